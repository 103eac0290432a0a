#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "polyspeech/autograd.hpp"
#include "polyspeech/optim.hpp"
#include "polyspeech/rng.hpp"
#include "polyspeech/toyspeech.hpp"

namespace polyspeech {

struct SsetConfig {
  int frame_dim = 16;
  int latent_dim = 16;
  int downsample_factor = 2;
  int codebook_size = 64;
  int num_rvq_layers = 4;
  double commitment_weight = 0.25;
  double ema_decay = 0.99;
  int dead_code_steps = 100;
  int channels = 32;
  int kernel = 3;
  Activation activation = Activation::kTanh;
  std::uint64_t seed = 1;
};

void validate(const SsetConfig& cfg);

/// One RVQ layer. Code 0 is the reserved zero vector: selecting it leaves the
/// residual untouched, so no layer can ever increase the residual norm.
struct Codebook {
  int layer = 0;
  Tensor vectors;                 // K × latent_dim
  std::vector<double> usage;      // cumulative assignment counts
  std::vector<double> ema_count;  // EMA cluster sizes
  Tensor ema_sum;                 // EMA of assigned residual sums
  std::vector<double> idle_steps; // consecutive training steps without assignment

  Codebook() = default;
  Codebook(int layer_index, Tensor code_vectors);
  std::size_t size() const noexcept { return vectors.rows(); }
  std::size_t dim() const noexcept { return vectors.cols(); }
};

struct RvqResult {
  std::vector<int> codes;              // one per layer
  std::vector<double> quantized;       // Σ selected code vectors
  std::vector<double> residual;        // latent − quantized
  std::vector<double> residual_norms;  // r0 (= |latent|) … rQ
};

/// Greedy residual quantization: each layer picks the code nearest (Euclidean)
/// to the running residual; ties go to the lower index.
RvqResult rvq_quantize(std::span<const double> latent, std::span<const Codebook> codebooks);

struct SpeechTokenSeq {
  std::vector<int> codes;
  std::size_t frame_count = 0;
  int downsample_factor = 1;
};

struct SsetLosses {
  double recon = 0.0;
  double commit = 0.0;
  double total = 0.0;
};

class SsetModel {
 public:
  explicit SsetModel(const SsetConfig& cfg);
  /// s = 1, latent_dim = channels = frame_dim, centre-tap identity weights,
  /// identity activation: encode and decode are both the identity map.
  static SsetModel identity(int frame_dim, int codebook_size = 2, int num_rvq_layers = 1);

  const SsetConfig& config() const noexcept { return cfg_; }
  ParameterSet& params() noexcept { return params_; }
  const ParameterSet& params() const noexcept { return params_; }
  std::vector<Codebook>& codebooks() noexcept { return codebooks_; }
  const std::vector<Codebook>& codebooks() const noexcept { return codebooks_; }
  bool codebooks_ready() const noexcept { return codebooks_ready_; }
  /// Install explicit codebooks (one per layer, K × latent_dim each).
  void set_codebooks(std::vector<Codebook> books);

  /// frames (T×D) → latents (ceil(T/s) × latent_dim).
  Tensor encode(const FrameSequence& frames) const;
  Var encode(Graph& g, const Var& frames) const;
  /// latents (n × latent_dim) → frames (n·s × D).
  FrameSequence decode_latents(const Tensor& latents) const;
  Var decode(Graph& g, const Var& latents) const;

  /// Layer-1 codes of the encoded frames.
  SpeechTokenSeq tokenize(const FrameSequence& frames) const;
  /// Layer-1 code vectors → decoder. Throws on out-of-range codes.
  FrameSequence decode(const SpeechTokenSeq& tokens) const;
  FrameSequence decode(std::span<const int> codes) const;

  /// Full-RVQ reconstruction of frames (first T rows of the decoder output).
  FrameSequence reconstruct(const FrameSequence& frames) const;

 private:
  std::pair<int, int> strides() const;

  SsetConfig cfg_;
  ParameterSet params_;
  std::vector<Codebook> codebooks_;
  bool codebooks_ready_ = false;
};

/// Seeds layer 1 by k-means++ sampling over encoded latents (followed by a few
/// Lloyd rounds), deeper layers over the residuals left by earlier layers.
/// Deterministic in `seed`. Needs at least K latents.
void init_codebooks(SsetModel& model, std::span<const FrameSequence> sample, std::uint64_t seed);

/// Batch loss. With straight_through the decoder sees latent + stopgrad(q − latent);
/// without it the decoder sees q as a constant, which makes the loss an
/// ordinary differentiable function of the parameters (used for gradcheck).
Var sset_loss(const SsetModel& model, Graph& g, std::span<const FrameSequence> batch, bool straight_through,
              SsetLosses* parts = nullptr);

/// One optimisation step: Adam on encoder/decoder, EMA on codebooks, dead-code
/// re-seeding. Returns the loss components measured before the update.
SsetLosses sset_train_step(SsetModel& model, AdamState& opt, std::span<const FrameSequence> batch, Rng& rng);

/// Mean squared reconstruction error over all frame coordinates.
double reconstruction_mse(const SsetModel& model, std::span<const FrameSequence> frames);

}  // namespace polyspeech
