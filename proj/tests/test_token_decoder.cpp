#include <algorithm>
#include <cmath>
#include <map>

#include "doctest.h"
#include "polyspeech/error.hpp"
#include "polyspeech/metrics.hpp"
#include "polyspeech/token_decoder.hpp"

using namespace polyspeech;

namespace {

FrameSequence random_frames(std::size_t t, std::size_t d, Rng& rng) {
  Tensor x(t, d);
  for (double& v : x.values()) v = rng.normal();
  return x;
}

// Noise-free world; the symbol ids double as codes, one per two frames.
struct Fixture {
  ToyWorld world{ToyWorldConfig{}};
  Corpus corpus = [this] {
    CorpusConfig c;
    c.train_size = 600;
    c.val_size = 10;
    c.test_size = 100;
    c.sigma = 0.0;
    return sample_corpus(world, c);
  }();

  std::vector<DecoderExample> pairs(const std::vector<ToyUtterance>& utts, Rng rng) const {
    std::map<int, std::vector<std::size_t>> by_speaker;
    for (std::size_t i = 0; i < utts.size(); ++i) by_speaker[utts[i].speaker].push_back(i);
    std::vector<DecoderExample> out;
    for (std::size_t i = 0; i < utts.size(); ++i) {
      const auto& same = by_speaker[utts[i].speaker];
      if (same.size() < 2) continue;
      std::size_t j = i;
      while (j == i) j = same[rng.uniform_int(same.size())];
      out.push_back({utts[i].text, utts[i].frames, utts[j].frames, utts[i].speaker, utts[j].speaker, utts[i].id,
                     utts[j].id});
    }
    return out;
  }

  TokenDecoderModel train(int steps) const {
    TokenDecoderConfig cfg;
    cfg.num_codes = world.num_symbols();
    TokenDecoderModel model(cfg);
    AdamConfig ac;
    ac.peak_lr = 5e-3;
    ac.warmup_steps = 30;
    AdamState opt(ac);
    const auto data = pairs(corpus.train, Rng(1, "pairs"));
    Rng rng(1, "batches");
    for (int s = 0; s < steps; ++s) {
      std::vector<DecoderExample> batch;
      for (int b = 0; b < 16; ++b) batch.push_back(data[rng.uniform_int(data.size())]);
      decoder_train_step(model, opt, batch);
    }
    return model;
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

const TokenDecoderModel& trained() {
  static const TokenDecoderModel m = fixture().train(600);
  return m;
}

}  // namespace

TEST_CASE("speaker embedding is deterministic and nonnegative") {
  TokenDecoderModel a(TokenDecoderConfig{}), b(TokenDecoderConfig{});
  Rng rng(1, "spk");
  for (int trial = 0; trial < 20; ++trial) {
    FrameSequence p = random_frames(1 + rng.uniform_int(10), 16, rng);
    std::vector<double> ea = a.encode_speaker(p);
    CHECK(ea == b.encode_speaker(p));
    CHECK(ea.size() == 16);
    for (double v : ea) CHECK(v >= 0.0);
  }
  CHECK_THROWS_AS(a.encode_speaker(Tensor(1, 15)), Error);
}

TEST_CASE("decoded length is codes times upsample") {
  TokenDecoderConfig cfg;
  cfg.num_codes = 5;
  for (int s : {1, 2, 3}) {
    cfg.upsample = s;
    TokenDecoderModel m(cfg);
    std::vector<double> spk(cfg.speaker_dim, 0.5);
    for (std::size_t n = 1; n <= 4; ++n) {
      std::vector<int> codes(n, 2);
      CHECK(m.decode_to_frames(codes, spk).rows() == n * s);
    }
    CHECK_THROWS_AS(m.decode_to_frames(std::vector<int>{5}, spk), Error);
    CHECK_THROWS_AS(m.decode_to_frames(std::vector<int>{-1}, spk), Error);
  }
}

TEST_CASE("zero speaker embedding on identity weights gives upsampled code embeddings") {
  TokenDecoderModel m = TokenDecoderModel::identity(4, 16, 2);
  std::vector<double> zero(m.config().speaker_dim, 0.0);
  std::vector<int> codes{3, 1};
  FrameSequence f = m.decode_to_frames(codes, zero);
  const Tensor& table = m.params().get("decoder.code_embedding").value;
  for (std::size_t r = 0; r < f.rows(); ++r) CHECK(std::ranges::equal(f.row(r), table.row(codes[r / 2])));
}

TEST_CASE("perturbing the speaker changes every frame") {
  TokenDecoderModel m(TokenDecoderConfig{});
  std::vector<double> spk(16, 0.3);
  std::vector<int> codes{1, 2, 3};
  FrameSequence a = m.decode_to_frames(codes, spk);
  spk[4] += 0.5;
  FrameSequence b = m.decode_to_frames(codes, spk);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    double delta = 0.0;
    for (std::size_t c = 0; c < a.cols(); ++c) delta = std::max(delta, std::abs(a(r, c) - b(r, c)));
    CHECK(delta > 0.0);
  }
}

TEST_CASE("decoder loss is zero on a perfect decode and rejects bad pairs") {
  TokenDecoderModel m(TokenDecoderConfig{});
  Rng rng(2, "loss");
  FrameSequence prompt = random_frames(6, 16, rng);
  std::vector<int> codes{4, 9};
  DecoderExample ex{codes, m.synthesize(codes, prompt), prompt, 3, 3, "t", "p"};
  Graph g;
  CHECK(decoder_loss(m, g, std::span(&ex, 1))->val()[0] == 0.0);
  ex.prompt_speaker = 4;
  CHECK_THROWS_AS(decoder_loss(m, g, std::span(&ex, 1)), Error);
  ex.prompt_speaker = 3;
  ex.prompt_id = "t";
  CHECK_THROWS_AS(decoder_loss(m, g, std::span(&ex, 1)), Error);
}

TEST_CASE("frozen speaker encoder gets no gradient") {
  TokenDecoderModel m(TokenDecoderConfig{});
  Rng rng(3, "freeze");
  DecoderExample ex{{1, 2, 3}, random_frames(6, 16, rng), random_frames(4, 16, rng), 0, 0, "a", "b"};
  const auto before = m.params();
  AdamState opt;
  decoder_train_step(m, opt, std::span(&ex, 1), true);
  for (const std::string& name : m.speaker_encoder_params()) {
    CHECK(m.params().get(name).value.values() == before.get(name).value.values());
  }
  CHECK(m.params().get("decoder.out.weight").value.values() != before.get("decoder.out.weight").value.values());

  Graph g;
  for (const std::string& name : m.speaker_encoder_params()) g.freeze(m.params().get(name));
  g.backward(decoder_loss(m, g, std::span(&ex, 1)));
  Gradients grads = g.gradients();
  for (const std::string& name : m.speaker_encoder_params()) {
    auto it = grads.find(&m.params().get(name));
    if (it == grads.end()) continue;
    for (double v : it->second.values()) CHECK(v == 0.0);
  }
}

TEST_CASE("decoder loss passes gradcheck") {
  TokenDecoderConfig cfg;
  cfg.num_codes = 4;
  cfg.code_dim = 3;
  cfg.frame_dim = 3;
  cfg.speaker_hidden = 3;
  cfg.speaker_dim = 2;
  TokenDecoderModel m(cfg);
  Rng rng(4, "gc");
  std::vector<DecoderExample> batch{{{1, 3}, random_frames(4, 3, rng), random_frames(3, 3, rng), 0, 0, "a", "b"}};
  std::vector<Parameter*> params;
  for (auto& [name, p] : m.params()) params.push_back(&p);
  CHECK(finite_diff_gradcheck([&](Graph& g) { return decoder_loss(m, g, batch); }, params, 1e-5) < 1e-4);
}

TEST_CASE("training lowers the loss on a fixed batch") {
  const Fixture& f = fixture();
  const auto data = f.pairs(f.corpus.train, Rng(2, "pairs"));
  std::vector<DecoderExample> batch(data.begin(), data.begin() + 16);
  TokenDecoderConfig cfg;
  cfg.num_codes = f.world.num_symbols();
  TokenDecoderModel m(cfg);
  AdamConfig ac;
  ac.peak_lr = 5e-3;
  ac.warmup_steps = 30;
  AdamState opt(ac);
  const double first = decoder_train_step(m, opt, batch);
  double last = first;
  for (int i = 0; i < 299; ++i) last = decoder_train_step(m, opt, batch);
  CHECK(last < first);
}

TEST_CASE("trained speaker embeddings rank same-speaker pairs above different-speaker pairs") {
  const Fixture& f = fixture();
  const TokenDecoderModel& m = trained();
  const auto& test = f.corpus.test;
  Rng rng(5, "triples");
  int wins = 0, total = 0;
  for (int t = 0; t < 300; ++t) {
    const auto& a = test[rng.uniform_int(test.size())];
    const auto& b = test[rng.uniform_int(test.size())];
    const auto& c = test[rng.uniform_int(test.size())];
    if (a.id == b.id || a.speaker != b.speaker || c.speaker == a.speaker) continue;
    const auto ea = m.encode_speaker(a.frames);
    wins += cosine_similarity(ea, m.encode_speaker(b.frames)) > cosine_similarity(ea, m.encode_speaker(c.frames));
    ++total;
  }
  REQUIRE(total > 20);
  CHECK(double(wins) / total >= 0.9);
}

TEST_CASE("decoding with another speaker's prompt transfers that speaker") {
  const Fixture& f = fixture();
  const TokenDecoderModel& m = trained();
  const auto& test = f.corpus.test;
  Rng rng(6, "transfer");
  int wins = 0, total = 0;
  for (int t = 0; t < 200; ++t) {
    const auto& a = test[rng.uniform_int(test.size())];
    const auto& b = test[rng.uniform_int(test.size())];
    if (a.speaker == b.speaker) continue;
    const FrameSequence out = m.synthesize(a.text, b.frames);
    const auto est = estimate_speaker_vector(out, a.text, f.world);
    const auto va = f.world.speaker_offset(a.speaker, a.gender);
    const auto vb = f.world.speaker_offset(b.speaker, b.gender);
    wins += squared_distance(est, vb) < squared_distance(est, va);
    ++total;
  }
  REQUIRE(total > 50);
  CHECK(double(wins) / total >= 0.9);
}
