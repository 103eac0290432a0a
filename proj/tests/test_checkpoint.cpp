#include <filesystem>

#include "doctest.h"
#include "polyspeech/checkpoint.hpp"
#include "polyspeech/error.hpp"
#include "polyspeech/trainer.hpp"

using namespace polyspeech;

namespace {

const Vocabulary kVocab{6, 2, 5};

LmConfig tiny_config() {
  LmConfig cfg = lm_config_for(kVocab, 3);
  cfg.num_layers = 1;
  cfg.num_heads = 2;
  cfg.d_model = 8;
  cfg.d_ffn = 16;
  cfg.max_seq_len = 32;
  cfg.tasks = {TaskKind::kAsr};
  return cfg;
}

RawExample random_raw(Rng& rng) {
  RawExample ex;
  ex.id = "r";
  const int n = 1 + int(rng.uniform_int(4));
  for (int i = 0; i < n; ++i) ex.text.push_back(int(rng.uniform_int(kVocab.num_symbols)));
  ex.frames = Tensor(2 + rng.uniform_int(3), 3);
  for (double& v : ex.frames.values()) v = rng.normal();
  return ex;
}

Checkpoint sample_checkpoint() {
  Checkpoint c;
  c.document = R"({"stage":"lm","update":3})";
  c.tensors["a"] = Tensor({2, 3}, {1.0, -2.5, 0.125, 3.0, 0.25, -7.0});
  c.tensors["b.bias"] = Tensor({4}, {0.0, 1.0, 2.0, 3.0});
  c.tensors["c"] = Tensor({1, 1, 2}, {0.5, -0.5});
  return c;
}

ErrorKind kind_of(const std::string& bytes) {
  try {
    parse_checkpoint(bytes);
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("parse did not throw");
  return ErrorKind::kInvalidArgument;
}

}  // namespace

TEST_CASE("fnv-1a reference values") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
}

TEST_CASE("serialisation round-trips byte for byte") {
  const Checkpoint c = sample_checkpoint();
  const std::string bytes = serialize_checkpoint(c);
  CHECK(bytes.substr(0, 4) == "PSPK");
  const Checkpoint back = parse_checkpoint(bytes);
  CHECK(back.document == c.document);
  REQUIRE(back.tensors.size() == 3);
  for (const auto& [name, t] : c.tensors) {
    CHECK(back.tensors.at(name).dims() == t.dims());
    CHECK(back.tensors.at(name).values() == t.values());
  }
  CHECK(serialize_checkpoint(back) == bytes);

  const auto path = std::filesystem::temp_directory_path() / "polyspeech_test.ckpt";
  save_checkpoint(path, c);
  CHECK(serialize_checkpoint(load_checkpoint(path)) == bytes);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_checkpoint(path), Error);
}

TEST_CASE("corrupt checkpoints are rejected") {
  const std::string bytes = serialize_checkpoint(sample_checkpoint());
  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  CHECK(kind_of(flipped) == ErrorKind::kIo);

  std::string magic = bytes;
  magic[0] = 'X';
  CHECK(kind_of(magic) == ErrorKind::kIo);
  CHECK(kind_of(bytes.substr(0, bytes.size() - 3)) == ErrorKind::kIo);
  CHECK(kind_of(bytes + "x") == ErrorKind::kIo);
  CHECK(kind_of("") == ErrorKind::kIo);
}

TEST_CASE("values are stored as float32") {
  Checkpoint c;
  c.tensors["x"] = Tensor({3}, {0.1, 1.0 / 3.0, 1e-40});
  const Checkpoint back = parse_checkpoint(serialize_checkpoint(c));
  const Tensor& x = back.tensors.at("x");
  CHECK(x[0] == double(0.1f));
  CHECK(x[1] == double(float(1.0 / 3.0)));
  CHECK(x[2] == double(float(1e-40)));

  Tensor r = c.tensors["x"];
  round_to_float32(r);
  CHECK(r.values() == x.values());
}

TEST_CASE("a restored model gives identical logits") {
  MultiModalLm model(tiny_config());
  Rng rng(1, "perturb");
  for (auto& [name, p] : model.params()) {
    for (double& v : p.value.values()) v += 0.3 * rng.normal();
  }
  round_to_float32(model.params());
  Checkpoint c;
  store_parameters(c, model.params(), "lm.");
  const Checkpoint back = parse_checkpoint(serialize_checkpoint(c));

  LmConfig other = tiny_config();
  other.seed = 99;
  MultiModalLm restored(other);
  restore_parameters(back, restored.params(), "lm.");
  for (int trial = 0; trial < 5; ++trial) {
    AssembledExample a = assemble_asr(random_raw(rng), kVocab);
    CHECK(restored.logits(a.elements, a.boundary, TaskKind::kAsr).values() ==
          model.logits(a.elements, a.boundary, TaskKind::kAsr).values());
  }

  CHECK_THROWS_AS(restore_parameters(back, restored.params()), Error);
  Checkpoint missing = back;
  missing.tensors.erase(missing.tensors.begin());
  CHECK_THROWS_AS(restore_parameters(missing, restored.params(), "lm."), Error);
}

TEST_CASE("resuming from a checkpoint continues the same run") {
  Rng rng(2, "data");
  TaskData data;
  for (int i = 0; i < 8; ++i) data[TaskKind::kAsr].push_back(assemble_asr(random_raw(rng), kVocab));
  const TaskMix mix = task_mix_of(data);
  TrainConfig cfg;
  cfg.batch_size = 2;
  cfg.accumulation_steps = 2;
  cfg.adam.warmup_steps = 3;

  // Uninterrupted, rounding at the same point a checkpoint would.
  MultiModalLm full(tiny_config());
  TrainerState fs(cfg);
  for (int u = 1; u <= 6; ++u) {
    train_update(full, fs, mix, data, cfg);
    if (u == 3) {
      round_to_float32(full.params());
      round_to_float32(fs.opt);
    }
  }

  MultiModalLm first(tiny_config());
  TrainerState s1(cfg);
  for (int u = 1; u <= 3; ++u) train_update(first, s1, mix, data, cfg);
  round_to_float32(first.params());
  round_to_float32(s1.opt);
  Checkpoint c;
  store_parameters(c, first.params());
  store_adam(c, s1.opt);
  const Checkpoint back = parse_checkpoint(serialize_checkpoint(c));

  LmConfig other = tiny_config();
  other.seed = 7;
  MultiModalLm resumed(other);
  TrainerState s2(cfg);
  restore_parameters(back, resumed.params());
  restore_adam(back, s2.opt);
  s2.opt.step_count = s1.opt.step_count;
  s2.rng.set_counter(s1.rng.counter());
  s2.updates = s1.updates;
  for (int u = 4; u <= 6; ++u) train_update(resumed, s2, mix, data, cfg);

  for (const auto& [name, p] : full.params()) CHECK(resumed.params().get(name).value.values() == p.value.values());
  CHECK(s2.updates == fs.updates);
}
