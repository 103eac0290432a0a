#include "polyspeech/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "polyspeech/error.hpp"

namespace polyspeech {
namespace {

std::int64_t now_ms() {
  using namespace std::chrono;
  return duration_cast<milliseconds>(steady_clock::now().time_since_epoch()).count();
}

bool is_text_head(TaskKind t) { return target_modality(t) == Modality::kText; }

}  // namespace

TaskMix TaskMix::from_sizes(const std::map<TaskKind, std::size_t>& sizes) {
  TaskMix mix;
  for (const auto& [task, n] : sizes) {
    mix.tasks.push_back(task);
    mix.sizes.push_back(n);
  }
  return mix;
}

std::size_t TaskMix::total() const { return std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}); }

std::vector<double> TaskMix::probabilities() const {
  const std::size_t n = total();
  require(n > 0, "TaskMix: all task sizes are zero");
  std::vector<double> p;
  for (std::size_t s : sizes) p.push_back(static_cast<double>(s) / static_cast<double>(n));
  return p;
}

double TaskMix::probability(TaskKind t) const {
  const auto p = probabilities();
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (tasks[i] == t) return p[i];
  }
  return 0.0;
}

TaskKind sample_task(Rng& rng, const TaskMix& mix) {
  require(!mix.tasks.empty() && mix.tasks.size() == mix.sizes.size(), "sample_task: empty task mix");
  const std::size_t n = mix.total();
  require(n > 0, "sample_task: all task sizes are zero");
  std::uint64_t draw = rng.uniform_int(n);
  for (std::size_t i = 0; i < mix.tasks.size(); ++i) {
    if (draw < mix.sizes[i]) return mix.tasks[i];
    draw -= mix.sizes[i];
  }
  return mix.tasks.back();
}

void validate(const TrainConfig& cfg) {
  require(cfg.accumulation_steps >= 1, "TrainConfig: accumulation_steps must be >= 1");
  require(cfg.max_updates >= 0, "TrainConfig: max_updates must be >= 0");
  require(cfg.batch_size >= 1, "TrainConfig: batch_size must be >= 1");
  require(cfg.validate_every >= 1, "TrainConfig: validate_every must be >= 1");
  require(cfg.max_validation_examples >= 0, "TrainConfig: max_validation_examples must be >= 0");
  require(cfg.adam.peak_lr > 0.0 && cfg.adam.warmup_steps >= 1, "TrainConfig: bad learning-rate schedule");
}

TaskMix task_mix_of(const TaskData& data) {
  std::map<TaskKind, std::size_t> sizes;
  for (const auto& [task, examples] : data) sizes[task] = examples.size();
  return TaskMix::from_sizes(sizes);
}

TrainerState::TrainerState(const TrainConfig& cfg) : opt(cfg.adam), rng(cfg.seed, "trainer") {}

std::string UpdateResult::task_label() const {
  std::string s;
  for (std::size_t i = 0; i < micro_batch_tasks.size(); ++i) {
    if (i) s += '+';
    s += task_name(micro_batch_tasks[i]);
  }
  return s;
}

double micro_batch_gradients(const MultiModalLm& model, std::span<const AssembledExample* const> batch,
                             Gradients& grads, double weight) {
  require(!batch.empty(), "micro_batch_gradients: empty batch");
  Graph g;
  std::vector<Var> losses;
  for (const AssembledExample* ex : batch) losses.push_back(lm_example_loss(model, g, *ex));
  Var total = losses.front();
  for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
  Var mean = scale(total, 1.0 / static_cast<double>(batch.size()));
  const double value = mean->val()[0];
  if (!std::isfinite(value)) fail(ErrorKind::kNumeric, "training loss is not finite");
  g.backward(mean);
  accumulate_gradients(grads, g.gradients(), weight);
  return value;
}

UpdateResult train_update(MultiModalLm& model, TrainerState& state, const TaskMix& mix, const TaskData& data,
                          const TrainConfig& cfg) {
  validate(cfg);
  UpdateResult result;
  Gradients grads;
  const double weight = 1.0 / cfg.accumulation_steps;
  for (int step = 0; step < cfg.accumulation_steps; ++step) {
    const TaskKind task = sample_task(state.rng, mix);
    const auto it = data.find(task);
    require(it != data.end() && !it->second.empty(), "train_update: no examples for task " + std::string(task_name(task)));
    const auto& pool = it->second;
    std::vector<const AssembledExample*> batch;
    for (int b = 0; b < cfg.batch_size; ++b) batch.push_back(&pool[state.rng.uniform_int(pool.size())]);
    const double loss = micro_batch_gradients(model, batch, grads, weight);
    result.micro_batch_tasks.push_back(task);
    result.micro_batch_losses.push_back(loss);
    result.loss += loss * weight;
  }
  result.lr = adam_update(state.opt, model.params(), grads);
  result.update = ++state.updates;
  return result;
}

ValidationResult validation_loss(const MultiModalLm& model, const TaskMix& mix, const TaskData& data,
                                 int max_examples) {
  ValidationResult result;
  const auto probs = mix.probabilities();
  for (std::size_t i = 0; i < mix.tasks.size(); ++i) {
    const auto it = data.find(mix.tasks[i]);
    require(it != data.end() && !it->second.empty(),
            "validation_loss: no validation examples for task " + std::string(task_name(mix.tasks[i])));
    std::size_t n = it->second.size();
    if (max_examples > 0) n = std::min(n, static_cast<std::size_t>(max_examples));
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      Graph g(false);
      sum += lm_example_loss(model, g, it->second[j])->val()[0];
    }
    const double mean = sum / static_cast<double>(n);
    result.per_task[mix.tasks[i]] = mean;
    result.loss += probs[i] * mean;
  }
  if (!std::isfinite(result.loss)) fail(ErrorKind::kNumeric, "validation loss is not finite");
  return result;
}

void init_from_text_lm(const MultiModalLm& text_lm, MultiModalLm& target) {
  const LmConfig& a = text_lm.config();
  const LmConfig& b = target.config();
  require(a.num_layers == b.num_layers && a.d_model == b.d_model && a.d_ffn == b.d_ffn && a.num_heads == b.num_heads &&
              a.max_seq_len == b.max_seq_len,
          "init_from_text_lm: trunk shapes differ");
  require(a.text_vocab_size == b.text_vocab_size, "init_from_text_lm: text vocabularies differ");
  require(text_lm.has_head(TaskKind::kTextLm), "init_from_text_lm: source has no TEXTLM head");

  const ParameterSet& src = text_lm.params();
  ParameterSet& dst = target.params();
  auto copy = [&](const std::string& from, const std::string& to) {
    const Tensor& v = src.get(from).value;
    Tensor& w = dst.get(to).value;
    require(v.dims() == w.dims(), "init_from_text_lm: shape mismatch for " + to);
    w = v;
  };
  for (const auto& [name, p] : src) {
    if (name.starts_with("blocks.") || name.starts_with("final_ln.") || name == "embed.position" ||
        name == "embed.text") {
      copy(name, name);
    }
  }
  const std::string from = head_param_prefix(TaskKind::kTextLm);
  for (TaskKind t : b.tasks) {
    if (!is_text_head(t)) continue;
    const std::string to = head_param_prefix(t);
    copy(from + "weight", to + "weight");
    copy(from + "bias", to + "bias");
  }
}

std::size_t select_best(std::span<const CheckpointScore> scores) {
  require(!scores.empty(), "select_best: no checkpoints");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i].validation_loss < scores[best].validation_loss) best = i;
  }
  return best;
}

std::string format_loss(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

TrainingLog::TrainingLog(std::ostream& out, bool record_time)
    : out_(&out), record_time_(record_time), start_ms_(now_ms()) {}

void TrainingLog::header() { *out_ << "update,task,loss,lr,wallclock_ms\n"; }

void TrainingLog::row(const UpdateResult& r) {
  const std::int64_t ms = record_time_ ? now_ms() - start_ms_ : 0;
  *out_ << r.update << ',' << r.task_label() << ',' << format_loss(r.loss) << ',' << format_loss(r.lr) << ',' << ms
        << '\n';
  ++rows_;
}

}  // namespace polyspeech
