#include <algorithm>
#include <cmath>
#include <functional>

#include "doctest.h"
#include "polyspeech/decoding.hpp"
#include "polyspeech/error.hpp"

using namespace polyspeech;

namespace {

/// Next-token logits are a fixed function of the history.
class FnSession : public DecodingSession {
 public:
  using Fn = std::function<std::vector<double>(const std::vector<int>&)>;
  FnSession(Fn fn, int eos) : fn_(std::move(fn)), eos_(eos) {}
  std::unique_ptr<DecodingSession> clone() const override { return std::make_unique<FnSession>(*this); }
  std::vector<double> next_logits() const override { return fn_(history_); }
  void append(int token) override { history_.push_back(token); }
  int eos_id() const override { return eos_; }

 private:
  Fn fn_;
  int eos_;
  std::vector<int> history_;
};

FnSession random_model(std::uint64_t seed, int vocab, double scale = 2.0) {
  return FnSession(
      [seed, vocab, scale](const std::vector<int>& h) {
        Rng rng(seed, "model");
        for (int t : h) rng = rng.split(std::uint64_t(t + 1));
        std::vector<double> l(vocab);
        for (double& v : l) v = scale * rng.normal();
        return l;
      },
      vocab - 1);
}

std::vector<double> log_softmax_of(const std::vector<double>& l) {
  double m = *std::max_element(l.begin(), l.end());
  double z = 0.0;
  for (double v : l) z += std::exp(v - m);
  std::vector<double> out;
  for (double v : l) out.push_back(v - m - std::log(z));
  return out;
}

}  // namespace

TEST_CASE("top-k with k = 1 is argmax") {
  Rng rng(1, "k1");
  std::vector<double> l{0.1, 2.0, -1.0, 1.9};
  for (int i = 0; i < 100; ++i) CHECK(top_k_sample(l, 1, rng) == 1);
  CHECK_THROWS_AS(top_k_sample(l, 5, rng), Error);
  CHECK_THROWS_AS(top_k_sample(l, 0, rng), Error);
}

TEST_CASE("top-k frequencies match the renormalised softmax") {
  Rng rng(2, "k2");
  std::vector<double> l{2.0, 1.0, 0.0, -1.0};
  const int n = 100000;
  int zeros = 0;
  for (int i = 0; i < n; ++i) {
    int id = top_k_sample(l, 2, rng);
    REQUIRE((id == 0 || id == 1));
    zeros += id == 0;
  }
  const double p = std::exp(2.0) / (std::exp(2.0) + std::exp(1.0));
  const double sigma = std::sqrt(p * (1 - p) / n);
  CHECK(std::abs(double(zeros) / n - p) < 3 * sigma);
}

TEST_CASE("top-k over equal logits is uniform") {
  Rng rng(3, "uniform");
  const int v = 6, n = 100000;
  std::vector<double> l(v, 0.25);
  std::vector<int> counts(v, 0);
  for (int i = 0; i < n; ++i) ++counts[top_k_sample(l, v, rng)];
  double chi2 = 0.0;
  const double e = double(n) / v;
  for (int c : counts) chi2 += (c - e) * (c - e) / e;
  // 0.999 quantile of chi-square with 5 degrees of freedom.
  CHECK(chi2 < 20.515);
}

TEST_CASE("top-k never leaves the top-k set") {
  Rng rng(4, "set");
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> l(10);
    for (double& v : l) v = rng.normal();
    std::vector<double> sorted = l;
    std::sort(sorted.rbegin(), sorted.rend());
    const double cut = sorted[2];
    for (int i = 0; i < 5000; ++i) CHECK(l[top_k_sample(l, 3, rng, 0.7)] >= cut);
  }
}

TEST_CASE("beam search matches exhaustive search on an enumerable model") {
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    FnSession m = random_model(seed, 3);
    DecodeConfig cfg;
    cfg.mode = DecodeMode::kBeam;
    cfg.max_len = 2;
    cfg.beam_size = 9;
    const Hypothesis h = beam_search(m, cfg);

    // Every finished sequence within two steps: [EOS] or [a, EOS].
    auto root = log_softmax_of(m.next_logits());
    double best = root[2];
    std::vector<int> best_seq;
    for (int a = 0; a < 2; ++a) {
      auto s = m.clone();
      s->append(a);
      double lp = root[a] + log_softmax_of(s->next_logits())[2];
      if (lp > best) {
        best = lp;
        best_seq = {a};
      }
    }
    CHECK(h.finished);
    CHECK(h.tokens == best_seq);
    CHECK(h.log_prob == doctest::Approx(best).epsilon(1e-14));
  }
}

TEST_CASE("beam size one is greedy and beam never scores below greedy") {
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    FnSession m = random_model(seed, 5);
    DecodeConfig cfg;
    cfg.max_len = 6;
    cfg.beam_size = 1;
    Hypothesis g = greedy_search(m, cfg);
    Hypothesis b1 = beam_search(m, cfg);
    CHECK(b1.tokens == g.tokens);
    CHECK(b1.log_prob == g.log_prob);
    cfg.beam_size = 4;
    Hypothesis b = beam_search(m, cfg);
    if (g.finished) {
      CHECK(b.finished);
      CHECK(b.log_prob >= g.log_prob);
    }
    CHECK(b.log_prob <= 0.0);
  }
}

TEST_CASE("a deterministic chain decodes exactly") {
  // a=0 → b=1 → EOS=2, each with probability ~1.
  FnSession chain(
      [](const std::vector<int>& h) {
        std::vector<double> l(3, -1e3);
        l[std::min<std::size_t>(h.size(), 2)] = 0.0;
        return l;
      },
      2);
  DecodeConfig cfg;
  cfg.mode = DecodeMode::kBeam;
  Hypothesis h = beam_search(chain, cfg);
  CHECK(h.tokens == std::vector<int>{0, 1});
  CHECK(h.finished);
  CHECK(std::abs(h.log_prob) < 1e-12);
}

TEST_CASE("generate stops at EOS or max_len") {
  FnSession eos_first([](const std::vector<int>&) { return std::vector<double>{0.0, 0.0, 50.0}; }, 2);
  DecodeConfig cfg;
  for (DecodeMode mode : {DecodeMode::kGreedy, DecodeMode::kBeam, DecodeMode::kTopK}) {
    cfg.mode = mode;
    cfg.k = 1;
    GenerateResult r = generate(eos_first, cfg);
    CHECK(r.tokens.empty());
    CHECK_FALSE(r.truncated);
  }

  FnSession never([](const std::vector<int>&) { return std::vector<double>{1.0, 0.5, -50.0}; }, 2);
  cfg.max_len = 3;
  for (DecodeMode mode : {DecodeMode::kGreedy, DecodeMode::kBeam, DecodeMode::kTopK}) {
    cfg.mode = mode;
    cfg.k = 2;
    Rng rng(1, "never");
    GenerateResult r = generate(never, cfg, rng);
    CHECK(r.tokens.size() == 3);
    CHECK(r.truncated);
  }
}

TEST_CASE("top-k generation is reproducible and k = 1 equals greedy") {
  FnSession m = random_model(11, 6, 1.0);
  DecodeConfig cfg;
  cfg.mode = DecodeMode::kTopK;
  cfg.k = 3;
  cfg.max_len = 10;
  Rng r1(5, "gen"), r2(5, "gen");
  CHECK(generate(m, cfg, r1).tokens == generate(m, cfg, r2).tokens);

  cfg.k = 1;
  Rng r3(6, "gen");
  GenerateResult topk = generate(m, cfg, r3);
  cfg.mode = DecodeMode::kGreedy;
  GenerateResult greedy = generate(m, cfg);
  CHECK(topk.tokens == greedy.tokens);
  CHECK(topk.log_prob == doctest::Approx(greedy.log_prob));
}

TEST_CASE("allowed ids constrain the output") {
  FnSession m([](const std::vector<int>&) { return std::vector<double>{5.0, 1.0, 0.0, -2.0}; }, 3);
  DecodeConfig cfg;
  cfg.max_len = 1;
  cfg.allowed_ids = {1, 2};
  GenerateResult r = generate(m, cfg);
  REQUIRE(r.tokens.size() == 1);
  CHECK(r.tokens[0] == 1);
}

TEST_CASE("cached and recomputed lm sessions agree bitwise") {
  const Vocabulary vocab{6, 2, 5};
  LmConfig lc = lm_config_for(vocab, 3);
  lc.num_layers = 2;
  lc.num_heads = 2;
  lc.d_model = 8;
  lc.d_ffn = 16;
  lc.max_seq_len = 48;
  MultiModalLm model(lc);
  Rng rng(7, "sessions");
  for (int trial = 0; trial < 5; ++trial) {
    RawExample ex;
    ex.text = {int(rng.uniform_int(6)), int(rng.uniform_int(6))};
    ex.frames = Tensor(3 + rng.uniform_int(3), 3);
    for (double& v : ex.frames.values()) v = rng.normal();
    InferencePrefix p = assemble_infer_prefix(ex, TaskKind::kAsr, vocab);
    auto cached = make_session(model, p, TaskKind::kAsr, vocab, true);
    auto full = make_session(model, p, TaskKind::kAsr, vocab, false);
    for (int step = 0; step < 8; ++step) {
      CHECK(cached->next_logits() == full->next_logits());
      int tok = int(rng.uniform_int(6));
      cached->append(tok);
      full->append(tok);
    }
    DecodeConfig cfg;
    cfg.mode = DecodeMode::kBeam;
    cfg.max_len = 6;
    auto c2 = make_session(model, p, TaskKind::kAsr, vocab, true);
    auto f2 = make_session(model, p, TaskKind::kAsr, vocab, false);
    Hypothesis a = beam_search(*c2, cfg), b = beam_search(*f2, cfg);
    CHECK(a.tokens == b.tokens);
    CHECK(a.log_prob == b.log_prob);
  }
}

TEST_CASE("decode config validation") {
  DecodeConfig cfg;
  cfg.k = 0;
  CHECK_THROWS_AS(validate(cfg), Error);
  cfg = {};
  cfg.beam_size = 0;
  CHECK_THROWS_AS(validate(cfg), Error);
  cfg = {};
  cfg.max_len = 0;
  CHECK_THROWS_AS(validate(cfg), Error);
  CHECK(parse_decode_mode(decode_mode_name(DecodeMode::kBeam)) == DecodeMode::kBeam);
}
