#pragma once

#include <cstdint>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "polyspeech/lm.hpp"
#include "polyspeech/optim.hpp"
#include "polyspeech/rng.hpp"
#include "polyspeech/tasks.hpp"

namespace polyspeech {

/// Training-set sizes per task. Tasks are sampled in proportion to size.
struct TaskMix {
  std::vector<TaskKind> tasks;
  std::vector<std::size_t> sizes;

  static TaskMix from_sizes(const std::map<TaskKind, std::size_t>& sizes);
  std::size_t total() const;
  std::vector<double> probabilities() const;
  double probability(TaskKind t) const;
};

/// Draws an integer below the total size and maps it through the cumulative
/// sizes, so the probabilities are exactly size / total.
TaskKind sample_task(Rng& rng, const TaskMix& mix);

struct TrainConfig {
  int accumulation_steps = 4;
  int max_updates = 1000;
  int batch_size = 8;
  std::uint64_t seed = 1;
  int validate_every = 100;
  /// Validation examples per task (0 = all).
  int max_validation_examples = 0;
  std::string checkpoint_dir;
  AdamConfig adam;
};

void validate(const TrainConfig& cfg);

using TaskData = std::map<TaskKind, std::vector<AssembledExample>>;

TaskMix task_mix_of(const TaskData& data);

/// Everything a resumed run needs besides the parameters.
struct TrainerState {
  AdamState opt;
  Rng rng;
  std::int64_t updates = 0;

  TrainerState(const TrainConfig& cfg);
};

struct UpdateResult {
  std::int64_t update = 0;
  std::vector<TaskKind> micro_batch_tasks;
  std::vector<double> micro_batch_losses;
  double loss = 0.0;  // mean over micro-batches
  double lr = 0.0;

  std::string task_label() const;  // tasks joined with '+'
};

/// Mean per-example loss of one micro-batch and its gradients.
double micro_batch_gradients(const MultiModalLm& model, std::span<const AssembledExample* const> batch,
                             Gradients& grads, double weight);

/// One optimiser update over `accumulation_steps` task-homogeneous micro-batches.
UpdateResult train_update(MultiModalLm& model, TrainerState& state, const TaskMix& mix, const TaskData& data,
                          const TrainConfig& cfg);

struct ValidationResult {
  std::map<TaskKind, double> per_task;
  double loss = 0.0;  // mix-weighted
};

ValidationResult validation_loss(const MultiModalLm& model, const TaskMix& mix, const TaskData& data,
                                 int max_examples = 0);

/// Copies the trunk, positions and text embedding from a text-only LM, and
/// its text head into every text-target head of `target`. Other parameters
/// keep their fresh initialisation.
void init_from_text_lm(const MultiModalLm& text_lm, MultiModalLm& target);

struct CheckpointScore {
  std::string name;
  double validation_loss = 0.0;
};

/// argmin by validation loss; ties go to the earliest entry.
std::size_t select_best(std::span<const CheckpointScore> scores);

/// Append-only CSV `update,task,loss,lr,wallclock_ms`.
class TrainingLog {
 public:
  explicit TrainingLog(std::ostream& out, bool record_time = false);
  void header();
  void row(const UpdateResult& r);
  std::size_t rows() const noexcept { return rows_; }

 private:
  std::ostream* out_;
  bool record_time_;
  std::int64_t start_ms_;
  std::size_t rows_ = 0;
};

std::string format_loss(double v);

}  // namespace polyspeech
