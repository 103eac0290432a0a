#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "polyspeech/checkpoint.hpp"
#include "polyspeech/decoding.hpp"
#include "polyspeech/lm.hpp"
#include "polyspeech/metrics.hpp"
#include "polyspeech/sset.hpp"
#include "polyspeech/tasks.hpp"
#include "polyspeech/token_decoder.hpp"
#include "polyspeech/toyspeech.hpp"
#include "polyspeech/trainer.hpp"

namespace polyspeech {

struct SsetTrainConfig {
  int updates = 600;
  int batch_size = 16;
  double peak_lr = 2e-3;
  int warmup_steps = 50;
  int validate_every = 100;
  /// Utterances whose latents seed the codebooks.
  int init_sample = 256;
};

struct DecoderTrainConfig {
  int code_dim = 32;
  int speaker_hidden = 32;
  int speaker_dim = 16;
  int updates = 3000;
  int batch_size = 16;
  double peak_lr = 2e-3;
  int warmup_steps = 50;
  int validate_every = 500;
  bool freeze_speaker_encoder = false;
};

struct TextLmTrainConfig {
  int updates = 300;
  int batch_size = 16;
  int corpus_size = 4000;
  double peak_lr = 2e-3;
  int warmup_steps = 50;
};

struct DecodeSettings {
  int k = 5;
  int beam_size = 5;
  int max_len = 32;
  double temperature = 1.0;
  bool length_normalize = false;
  /// LID/GID argmax restricted to the tag set.
  bool constrain_tags = true;
};

/// One experiment. A single `seed` drives every random stream.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  ToyWorldConfig world;
  CorpusConfig corpus;
  SsetConfig sset;
  SsetTrainConfig sset_train;
  LmConfig lm;
  TrainConfig train;
  DecodeSettings decode;
  DecoderTrainConfig decoder;
  std::vector<TaskKind> tasks = {TaskKind::kAsr};
  SourceRepresentation source = SourceRepresentation::kContinuous;
  bool text_lm_init = false;
  TextLmTrainConfig text_lm;
  /// Share of TTS training examples built from two same-speaker utterances,
  /// so training covers the lengths of prompted inference.
  double tts_concat_fraction = 0.5;
  std::string out_dir = "out";
  /// Optional overrides: share a corpus or a trained SSET between experiments.
  std::string manifests_dir;
  std::string sset_checkpoint;
};

std::string config_to_json(const ExperimentConfig& cfg);
ExperimentConfig config_from_json(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// `key=value` with a dotted key path, e.g. `train.max_updates=200`. The value
/// is parsed as JSON when possible, otherwise taken as a string.
void apply_override(ExperimentConfig& cfg, std::string_view assignment);
void validate(const ExperimentConfig& cfg);

Vocabulary vocabulary_for(const ExperimentConfig& cfg);
/// Sub-configs with the seed and the world-derived sizes filled in.
ToyWorldConfig resolved_world(const ExperimentConfig& cfg);
SsetConfig resolved_sset(const ExperimentConfig& cfg);
LmConfig resolved_lm(const ExperimentConfig& cfg, const std::vector<TaskKind>& tasks);
TokenDecoderConfig resolved_decoder(const ExperimentConfig& cfg);
DecodeConfig decode_config_for(const ExperimentConfig& cfg, TaskKind task);

/// Fixed artifact layout under the output directory.
struct Layout {
  std::filesystem::path root;
  std::filesystem::path manifests_override;
  std::filesystem::path sset_override;

  explicit Layout(const ExperimentConfig& cfg);
  std::filesystem::path manifests() const;
  std::filesystem::path checkpoints() const { return root / "checkpoints"; }
  std::filesystem::path logs() const { return root / "logs"; }
  std::filesystem::path reports() const { return root / "reports"; }
  std::filesystem::path manifest(std::string_view split) const;
  std::filesystem::path stage_dir(std::string_view stage) const { return checkpoints() / stage; }
  std::filesystem::path log(std::string_view stage) const;
  /// The file named by <stage>/best; throws kDependency naming the stage if absent.
  std::filesystem::path best_checkpoint(std::string_view stage) const;
  std::filesystem::path sset_checkpoint() const;
};

// --- data -----------------------------------------------------------------

struct GenDataResult {
  std::filesystem::path train, val, test;
};

/// Writes train/val/test manifests and frame files. Refuses a non-empty
/// manifests directory unless `force`.
GenDataResult gen_data(const ExperimentConfig& cfg, bool force = false);
Corpus load_corpus(const ExperimentConfig& cfg);

// --- training stages ------------------------------------------------------

struct StageResult {
  std::string stage;
  std::filesystem::path best_checkpoint;
  double best_validation_loss = 0.0;
  std::int64_t updates = 0;
  std::vector<CheckpointScore> scores;
};

struct TrainHooks {
  /// Called after every validation with the live LM.
  std::function<void(std::int64_t update, const MultiModalLm& model)> on_lm_validation;
};

StageResult train_sset(const ExperimentConfig& cfg, bool resume = false);
StageResult train_lm(const ExperimentConfig& cfg, bool resume = false, const TrainHooks& hooks = {});
StageResult train_text_lm(const ExperimentConfig& cfg);
StageResult train_decoder(const ExperimentConfig& cfg, bool resume = false);

SsetModel load_sset(const std::filesystem::path& checkpoint);
MultiModalLm load_lm(const std::filesystem::path& checkpoint);
TokenDecoderModel load_decoder(const std::filesystem::path& checkpoint);

/// Examples of the configured source representation; TTS (or a token source)
/// needs `sset`.
std::vector<RawExample> raw_examples(const std::vector<ToyUtterance>& utts, const SsetModel* sset);
TaskData assemble_task_data(const std::vector<RawExample>& raw, const std::vector<TaskKind>& tasks,
                            const Vocabulary& vocab, SourceRepresentation source, double tts_concat_fraction = 0.0,
                            std::uint64_t seed = 1);

// --- inference and evaluation ---------------------------------------------

struct InferOptions {
  TaskKind task = TaskKind::kAsr;
  std::filesystem::path input_manifest;
  std::filesystem::path checkpoint;  // default: the LM stage's best
  std::string prompt_utterance;      // TTS only
  std::filesystem::path output;      // default: manifests/outputs-<task>.jsonl
};

struct InferRecord {
  std::string id;
  std::string hypothesis;  // text (ASR), language index (LID), gender (GID), target text (TTS)
  std::vector<int> codes;  // TTS
  std::string frames_path; // TTS
  std::string prompt_id;   // TTS
  bool truncated = false;
};

std::filesystem::path infer(const ExperimentConfig& cfg, const InferOptions& opts);
std::vector<InferRecord> read_infer_outputs(const std::filesystem::path& path);

/// Decodes one utterance with a trained LM (ASR text, or the tag id for LID/GID).
std::vector<int> recognize(const MultiModalLm& model, const RawExample& ex, TaskKind task, const ExperimentConfig& cfg);

std::vector<EvalReport> evaluate(const ExperimentConfig& cfg, TaskKind task, const std::filesystem::path& outputs,
                                 const std::filesystem::path& references, const std::filesystem::path& report = {});

// --- ablation -------------------------------------------------------------

struct AblationMatrix {
  std::vector<std::vector<TaskKind>> task_sets;
  std::vector<SourceRepresentation> sources;
  std::vector<bool> text_lm_init;
};

AblationMatrix parse_ablation_matrix(std::string_view json);

struct AblationRow {
  std::string cell;
  std::vector<TaskKind> tasks;
  SourceRepresentation source = SourceRepresentation::kContinuous;
  bool text_lm_init = false;
  std::optional<double> asr_cer;
  std::optional<double> lid_accuracy;
  std::optional<double> gid_accuracy;
  std::optional<double> best_validation_loss;
  std::string status = "ok";
};

std::string cell_name(const std::vector<TaskKind>& tasks, SourceRepresentation source, bool text_lm_init);
/// Trains and evaluates one cell in `cfg` as given (tasks/source/init already set).
AblationRow run_cell(const ExperimentConfig& cfg);
std::vector<AblationRow> ablate(const ExperimentConfig& cfg, const AblationMatrix& matrix);
void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows);

// --- gradient checks ------------------------------------------------------

struct GradcheckResult {
  std::string name;
  double max_relative_error = 0.0;
};

/// Finite-difference checks of the LM, SSET and token-decoder losses on toy shapes.
std::vector<GradcheckResult> gradcheck_all(std::uint64_t seed = 1);

}  // namespace polyspeech
