#include <benchmark/benchmark.h>

#include <algorithm>

#include "polyspeech/decoding.hpp"
#include "polyspeech/lm.hpp"
#include "polyspeech/sset.hpp"
#include "polyspeech/toyspeech.hpp"

using namespace polyspeech;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed, "bench");
  Tensor t(r, c);
  for (double& v : t.values()) v = rng.normal();
  return t;
}

const ToyWorld& world() {
  static const ToyWorld w{ToyWorldConfig{}};
  return w;
}

const std::vector<ToyUtterance>& utterances() {
  static const std::vector<ToyUtterance> u = [] {
    CorpusConfig c;
    c.train_size = 64;
    c.val_size = 0;
    c.test_size = 0;
    auto train = sample_corpus(world(), c).train;
    std::sort(train.begin(), train.end(), [](const auto& a, const auto& b) { return a.text.size() < b.text.size(); });
    return train;
  }();
  return u;
}

/// 0 = shortest utterance, 1 = longest.
RawExample example(int which) { return RawExample::from(which ? utterances().back() : utterances().front()); }

}  // namespace

static void BM_Matmul(benchmark::State& state) {
  const auto n = std::size_t(state.range(0));
  const Tensor a = random_tensor(n, n, 1), b = random_tensor(n, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

static void BM_Attention(benchmark::State& state) {
  const auto t = std::size_t(state.range(0));
  const Tensor q = random_tensor(t, 64, 1), k = random_tensor(t, 64, 2), v = random_tensor(t, 64, 3);
  const AttentionMask mask = build_attention_mask(t / 2, t);
  for (auto _ : state) benchmark::DoNotOptimize(attention_forward(q, k, v, mask, 4));
}
BENCHMARK(BM_Attention)->Arg(16)->Arg(32)->Arg(64);

static void BM_LmForward(benchmark::State& state) {
  const Vocabulary vocab{world().num_symbols(), world().num_languages(), 64};
  MultiModalLm model(lm_config_for(vocab, world().config().frame_dim));
  const AssembledExample a = assemble_asr(example(int(state.range(0))), vocab);
  for (auto _ : state) benchmark::DoNotOptimize(model.logits(a.elements, a.boundary, TaskKind::kAsr));
  state.counters["positions"] = double(a.elements.size());
}
BENCHMARK(BM_LmForward)->Arg(0)->Arg(1);

static void BM_LmTrainStep(benchmark::State& state) {
  const Vocabulary vocab{world().num_symbols(), world().num_languages(), 64};
  MultiModalLm model(lm_config_for(vocab, world().config().frame_dim));
  const AssembledExample a = assemble_asr(example(1), vocab);
  for (auto _ : state) {
    Graph g;
    Var loss = lm_example_loss(model, g, a);
    g.backward(loss);
    benchmark::DoNotOptimize(g.gradients());
  }
}
BENCHMARK(BM_LmTrainStep);

static void BM_BeamSearch(benchmark::State& state) {
  const Vocabulary vocab{world().num_symbols(), world().num_languages(), 64};
  MultiModalLm model(lm_config_for(vocab, world().config().frame_dim));
  const InferencePrefix p = assemble_infer_prefix(example(1), TaskKind::kAsr, vocab);
  DecodeConfig cfg;
  cfg.mode = DecodeMode::kBeam;
  cfg.max_len = 12;
  for (auto _ : state) {
    auto session = make_session(model, p, TaskKind::kAsr, vocab);
    benchmark::DoNotOptimize(beam_search(*session, cfg));
  }
}
BENCHMARK(BM_BeamSearch);

static void BM_SsetTokenize(benchmark::State& state) {
  SsetModel model(SsetConfig{});
  const RawExample ex = example(1);
  std::vector<FrameSequence> sample;
  for (const auto& u : utterances()) sample.push_back(u.frames);
  init_codebooks(model, sample, 1);
  for (auto _ : state) benchmark::DoNotOptimize(model.tokenize(ex.frames));
}
BENCHMARK(BM_SsetTokenize);

BENCHMARK_MAIN();
