#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "polyspeech/rng.hpp"
#include "polyspeech/tensor.hpp"

namespace polyspeech {

/// A T×D sequence of continuous frames (one row per frame).
using FrameSequence = Tensor;

enum class Gender { kMale = 0, kFemale = 1 };

std::string_view gender_name(Gender g);
Gender parse_gender(std::string_view name);

struct ToyWorldConfig {
  int num_languages = 5;
  int symbols_per_language = 6;
  double shared_symbol_fraction = 1.0 / 3.0;
  int num_speakers = 40;
  int frame_dim = 16;
  /// Symbols live in this many dimensions; one more carries gender, the rest speakers.
  int symbol_subspace_dim = 10;
  int frames_per_symbol = 2;
  double symbol_scale = 1.5;
  double min_symbol_separation = 2.5;
  double speaker_scale = 1.0;
  double gender_offset = 0.75;
  /// Per-coordinate noise σ as a fraction of the realised minimum symbol separation.
  double noise_fraction = 0.05;
  double bigram_sharpness = 1.5;
  int min_text_len = 4;
  int max_text_len = 8;
  std::uint64_t seed = 1;
};

struct ToySpeaker {
  int language = 0;
  Gender gender = Gender::kMale;
  std::vector<double> vec;  // speaker component, norm == speaker_scale
};

struct Language {
  std::vector<int> symbols;                // global symbol ids
  std::vector<double> start_probs;         // over `symbols`
  std::vector<std::vector<double>> bigram; // row-stochastic over `symbols`
};

/// Deterministic generative world. Everything follows from the config.
class ToyWorld {
 public:
  explicit ToyWorld(const ToyWorldConfig& cfg);

  const ToyWorldConfig& config() const noexcept { return cfg_; }
  int num_symbols() const noexcept { return static_cast<int>(bases_.size()); }
  int num_languages() const noexcept { return static_cast<int>(languages_.size()); }
  int num_speakers() const noexcept { return static_cast<int>(speakers_.size()); }
  int frame_dim() const noexcept { return cfg_.frame_dim; }
  int frames_per_symbol() const noexcept { return cfg_.frames_per_symbol; }

  std::span<const double> base(int symbol) const;
  const ToySpeaker& speaker(int id) const;
  const Language& language(int id) const;
  std::span<const double> gender_direction() const noexcept { return gender_direction_; }
  /// speaker vector plus the signed gender term.
  std::vector<double> speaker_offset(int speaker, Gender gender) const;

  double min_symbol_separation() const noexcept { return min_separation_; }
  /// Default rendering noise σ.
  double noise_sigma() const noexcept { return sigma_; }

  /// Samples a text from the language's start/bigram model.
  std::vector<int> sample_text(int language, Rng& rng) const;
  std::vector<int> sample_text(int language, int length, Rng& rng) const;

  char symbol_char(int symbol) const;
  int symbol_from_char(char c) const;
  std::string text_to_string(std::span<const int> text) const;
  std::vector<int> text_from_string(std::string_view s) const;

 private:
  ToyWorldConfig cfg_;
  std::vector<std::vector<double>> bases_;
  std::vector<double> gender_direction_;
  std::vector<ToySpeaker> speakers_;
  std::vector<Language> languages_;
  double min_separation_ = 0.0;
  double sigma_ = 0.0;
};

/// r frames per symbol: base + speaker + gender term + N(0, σ²) noise.
FrameSequence render_utterance(const ToyWorld& world, std::span<const int> text, int speaker, Gender gender,
                               double sigma, Rng& rng);

struct ToyUtterance {
  std::string id;
  int language = 0;
  Gender gender = Gender::kMale;
  int speaker = 0;
  std::vector<int> text;
  FrameSequence frames;
};

struct CorpusConfig {
  int train_size = 2000;
  int val_size = 200;
  int test_size = 200;
  bool held_out_speakers = true;
  int held_out_per_language = 2;
  bool class_balance = true;
  /// σ override; negative means the world default.
  double sigma = -1.0;
};

struct Corpus {
  std::vector<ToyUtterance> train;
  std::vector<ToyUtterance> val;
  std::vector<ToyUtterance> test;
};

/// Frames are rounded to 32-bit floats so the in-memory corpus equals its
/// on-disk form.
Corpus sample_corpus(const ToyWorld& world, const CorpusConfig& cfg);

/// Least-squares speaker+gender estimate given the utterance's text.
std::vector<double> estimate_speaker_vector(const FrameSequence& frames, std::span<const int> text,
                                            const ToyWorld& world);

/// Nearest-base decoding of frames (r frames per symbol), with one round of
/// speaker-offset refinement.
std::vector<int> nearest_base_decode(const FrameSequence& frames, const ToyWorld& world);

// --- on-disk formats ------------------------------------------------------

/// "PSFR" | u32 version | u32 T | u32 D | T·D little-endian float32.
void write_frames(const std::filesystem::path& path, const FrameSequence& frames);
FrameSequence read_frames(const std::filesystem::path& path);

struct ManifestRecord {
  std::string id;
  std::string text;
  int language = 0;
  Gender gender = Gender::kMale;
  int speaker = 0;
  std::string frames_path;  // relative to the manifest's directory or absolute
};

/// One JSON object per line.
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records);
std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path);

/// Writes frames under `frames_dir` and returns manifest records.
std::vector<ManifestRecord> save_utterances(const std::vector<ToyUtterance>& utts, const ToyWorld& world,
                                            const std::filesystem::path& manifest_dir,
                                            const std::filesystem::path& frames_dir);
std::vector<ToyUtterance> load_utterances(const std::filesystem::path& manifest_path, const ToyWorld& world);

}  // namespace polyspeech
