#include <cmath>
#include <sstream>

#include "doctest.h"
#include "polyspeech/error.hpp"
#include "polyspeech/trainer.hpp"

using namespace polyspeech;

namespace {

const Vocabulary kVocab{6, 2, 5};

LmConfig tiny_config(std::vector<TaskKind> tasks = {TaskKind::kAsr, TaskKind::kTts}) {
  LmConfig cfg = lm_config_for(kVocab, 3);
  cfg.num_layers = 1;
  cfg.num_heads = 2;
  cfg.d_model = 8;
  cfg.d_ffn = 16;
  cfg.max_seq_len = 32;
  cfg.tasks = std::move(tasks);
  return cfg;
}

RawExample random_raw(Rng& rng) {
  RawExample ex;
  ex.id = "r";
  const int n = 1 + int(rng.uniform_int(4));
  for (int i = 0; i < n; ++i) ex.text.push_back(int(rng.uniform_int(kVocab.num_symbols)));
  ex.frames = Tensor(2 + rng.uniform_int(3), 3);
  for (double& v : ex.frames.values()) v = rng.normal();
  std::vector<int> codes;
  for (std::size_t i = 0; i < ex.frames.rows(); ++i) codes.push_back(int(rng.uniform_int(kVocab.num_codes)));
  ex.codes = codes;
  return ex;
}

TaskData make_data(std::uint64_t seed, std::size_t asr, std::size_t tts) {
  Rng rng(seed, "data");
  TaskData data;
  for (std::size_t i = 0; i < asr; ++i) data[TaskKind::kAsr].push_back(assemble_asr(random_raw(rng), kVocab));
  for (std::size_t i = 0; i < tts; ++i) data[TaskKind::kTts].push_back(assemble_tts_train(random_raw(rng), kVocab));
  return data;
}

TrainConfig small_train() {
  TrainConfig cfg;
  cfg.batch_size = 2;
  cfg.accumulation_steps = 2;
  cfg.seed = 3;
  cfg.adam.peak_lr = 3e-3;
  cfg.adam.warmup_steps = 10;
  return cfg;
}

double max_rel_diff(const Gradients& a, const Gradients& b) {
  REQUIRE(a.size() == b.size());
  double worst = 0.0;
  for (const auto& [p, t] : a) {
    const Tensor& u = b.at(p);
    for (std::size_t i = 0; i < t.size(); ++i) {
      worst = std::max(worst, std::abs(t[i] - u[i]) / std::max(1.0, std::abs(t[i])));
    }
  }
  return worst;
}

bool same_params(const ParameterSet& a, const ParameterSet& b) {
  for (const auto& [name, p] : a) {
    if (p.value.values() != b.get(name).value.values()) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("task mix probabilities are size over total") {
  TaskMix mix = TaskMix::from_sizes({{TaskKind::kAsr, 3}, {TaskKind::kTts, 1}, {TaskKind::kLid, 6}});
  CHECK(mix.total() == 10);
  CHECK(mix.probability(TaskKind::kAsr) == 0.3);
  CHECK(mix.probability(TaskKind::kTts) == 0.1);
  CHECK(mix.probability(TaskKind::kLid) == 0.6);
  CHECK(mix.probability(TaskKind::kGid) == 0.0);

  TaskMix solo = TaskMix::from_sizes({{TaskKind::kTts, 7}});
  Rng rng(1, "solo");
  for (int i = 0; i < 100; ++i) CHECK(sample_task(rng, solo) == TaskKind::kTts);

  CHECK_THROWS_AS(sample_task(rng, TaskMix{}), Error);
  CHECK_THROWS_AS(TaskMix::from_sizes({{TaskKind::kAsr, 0}}).probabilities(), Error);
}

TEST_CASE("task sampling frequencies are within three sigma") {
  TaskMix mix = TaskMix::from_sizes({{TaskKind::kAsr, 3}, {TaskKind::kTts, 1}, {TaskKind::kLid, 6}});
  Rng rng(2, "freq");
  const int n = 100000;
  std::map<TaskKind, int> counts;
  for (int i = 0; i < n; ++i) ++counts[sample_task(rng, mix)];
  for (std::size_t i = 0; i < mix.tasks.size(); ++i) {
    const double p = mix.probabilities()[i];
    const double sigma = std::sqrt(p * (1 - p) / n);
    CHECK(std::abs(double(counts[mix.tasks[i]]) / n - p) < 3 * sigma);
  }
}

TEST_CASE("accumulated micro-batches equal one large batch") {
  MultiModalLm model(tiny_config());
  const TaskData data = make_data(4, 12, 0);
  const auto& pool = data.at(TaskKind::kAsr);
  for (int k : {1, 2, 3, 4}) {
    const int b = 12 / k;
    Gradients accumulated, whole;
    for (int step = 0; step < k; ++step) {
      std::vector<const AssembledExample*> batch;
      for (int i = 0; i < b; ++i) batch.push_back(&pool[step * b + i]);
      micro_batch_gradients(model, batch, accumulated, 1.0 / k);
    }
    std::vector<const AssembledExample*> all;
    for (const auto& ex : pool) all.push_back(&ex);
    micro_batch_gradients(model, all, whole, 1.0);
    CHECK(max_rel_diff(accumulated, whole) < 1e-12);
  }
}

TEST_CASE("an update without accumulation is a plain Adam step") {
  const TaskData data = make_data(5, 6, 6);
  const TaskMix mix = task_mix_of(data);
  TrainConfig cfg = small_train();
  cfg.accumulation_steps = 1;

  MultiModalLm a(tiny_config()), b(tiny_config());
  TrainerState state(cfg);
  AdamState opt(cfg.adam);
  Rng rng(cfg.seed, "trainer");
  for (int u = 0; u < 5; ++u) {
    UpdateResult r = train_update(a, state, mix, data, cfg);

    const TaskKind task = sample_task(rng, mix);
    const auto& pool = data.at(task);
    std::vector<const AssembledExample*> batch;
    for (int i = 0; i < cfg.batch_size; ++i) batch.push_back(&pool[rng.uniform_int(pool.size())]);
    Gradients grads;
    const double loss = micro_batch_gradients(b, batch, grads, 1.0);
    adam_update(opt, b.params(), grads);

    CHECK(r.micro_batch_tasks == std::vector<TaskKind>{task});
    CHECK(r.loss == loss);
    CHECK(r.update == u + 1);
    CHECK(same_params(a.params(), b.params()));
  }
}

TEST_CASE("training is deterministic for a fixed seed") {
  const TaskData data = make_data(6, 8, 8);
  const TaskMix mix = task_mix_of(data);
  const TrainConfig cfg = small_train();
  MultiModalLm a(tiny_config()), b(tiny_config());
  TrainerState sa(cfg), sb(cfg);
  for (int u = 0; u < 6; ++u) {
    UpdateResult ra = train_update(a, sa, mix, data, cfg);
    UpdateResult rb = train_update(b, sb, mix, data, cfg);
    CHECK(ra.loss == rb.loss);
    CHECK(ra.task_label() == rb.task_label());
  }
  CHECK(same_params(a.params(), b.params()));
}

TEST_CASE("two hundred updates lower the validation loss") {
  const TaskData data = make_data(7, 8, 8);
  const TaskMix mix = task_mix_of(data);
  TrainConfig cfg = small_train();
  cfg.batch_size = 4;
  MultiModalLm model(tiny_config());
  TrainerState state(cfg);
  const double before = validation_loss(model, mix, data).loss;
  for (int u = 0; u < 200; ++u) train_update(model, state, mix, data, cfg);
  const ValidationResult after = validation_loss(model, mix, data);
  CHECK(after.loss < before);
  CHECK(after.loss == doctest::Approx(0.5 * after.per_task.at(TaskKind::kAsr) + 0.5 * after.per_task.at(TaskKind::kTts)));
}

TEST_CASE("train_update rejects bad configs and missing tasks") {
  const TaskData data = make_data(8, 4, 0);
  MultiModalLm model(tiny_config());
  TrainConfig cfg = small_train();
  TrainerState state(cfg);
  CHECK_THROWS_AS(train_update(model, state, TaskMix::from_sizes({{TaskKind::kTts, 4}}), data, cfg), Error);
  cfg.accumulation_steps = 0;
  CHECK_THROWS_AS(train_update(model, state, task_mix_of(data), data, cfg), Error);
}

TEST_CASE("text lm initialisation copies the trunk and text heads only") {
  MultiModalLm text_lm(tiny_config({TaskKind::kTextLm}));
  Rng rng(9, "perturb");
  for (auto& [name, p] : text_lm.params()) {
    for (double& v : p.value.values()) v += rng.normal();
  }
  const ParameterSet source = text_lm.params();
  const MultiModalLm fresh(tiny_config({TaskKind::kAsr, TaskKind::kTts, TaskKind::kLid}));
  MultiModalLm target = fresh;
  init_from_text_lm(text_lm, target);

  CHECK(same_params(source, text_lm.params()));
  const std::string text_head = head_param_prefix(TaskKind::kTextLm);
  for (const auto& [name, p] : target.params()) {
    const bool trunk = name.starts_with("blocks.") || name.starts_with("final_ln.") || name == "embed.position" ||
                       name == "embed.text";
    if (trunk) {
      CHECK(p.value.values() == source.get(name).value.values());
    } else if (name.starts_with(head_param_prefix(TaskKind::kAsr))) {
      CHECK(p.value.values() == source.get(text_head + name.substr(head_param_prefix(TaskKind::kAsr).size())).value.values());
    } else if (name.starts_with(head_param_prefix(TaskKind::kLid))) {
      CHECK(p.value.values() == source.get(text_head + name.substr(head_param_prefix(TaskKind::kLid).size())).value.values());
    } else {
      CHECK(p.value.values() == fresh.params().get(name).value.values());
    }
  }

  MultiModalLm no_text_head(tiny_config({TaskKind::kAsr}));
  CHECK_THROWS_AS(init_from_text_lm(no_text_head, target), Error);
  LmConfig wider = tiny_config();
  wider.d_model = 12;
  MultiModalLm mismatch(wider);
  CHECK_THROWS_AS(init_from_text_lm(text_lm, mismatch), Error);
}

TEST_CASE("select best examples") {
  std::vector<CheckpointScore> scores{{"a", 2.0}, {"b", 1.5}, {"c", 1.5}, {"d", 3.0}};
  CHECK(select_best(scores) == 1);
  scores[0].validation_loss = 1.0;
  CHECK(select_best(scores) == 0);
  CHECK(select_best(std::span(scores).last(1)) == 0);
  CHECK_THROWS_AS(select_best(std::span<const CheckpointScore>{}), Error);
}

TEST_CASE("training log writes one row per update") {
  std::ostringstream out;
  TrainingLog log(out);
  log.header();
  UpdateResult r;
  r.update = 1;
  r.micro_batch_tasks = {TaskKind::kAsr, TaskKind::kTts};
  r.loss = 0.25;
  r.lr = 1e-3;
  log.row(r);
  r.update = 2;
  log.row(r);
  CHECK(log.rows() == 2);
  CHECK(out.str() == "update,task,loss,lr,wallclock_ms\n1,ASR+TTS,0.25,0.001,0\n2,ASR+TTS,0.25,0.001,0\n");
  CHECK(std::stod(format_loss(0.1)) == 0.1);
}
