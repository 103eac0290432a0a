#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "polyspeech/error.hpp"
#include "polyspeech/metrics.hpp"
#include "polyspeech/toyspeech.hpp"

using namespace polyspeech;
namespace fs = std::filesystem;

namespace {

ToyWorld default_world() { return ToyWorld(ToyWorldConfig{}); }

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("polyspeech_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("same seed builds the same world") {
  ToyWorld a = default_world();
  ToyWorld b = default_world();
  REQUIRE(a.num_symbols() == b.num_symbols());
  for (int s = 0; s < a.num_symbols(); ++s) {
    CHECK(std::ranges::equal(a.base(s), b.base(s)));
  }
  for (int s = 0; s < a.num_speakers(); ++s) CHECK(a.speaker(s).vec == b.speaker(s).vec);
  for (int l = 0; l < a.num_languages(); ++l) CHECK(a.language(l).bigram == b.language(l).bigram);

  ToyWorldConfig other;
  other.seed = 2;
  ToyWorld c(other);
  CHECK_FALSE(std::ranges::equal(a.base(0), c.base(0)));
}

TEST_CASE("symbol bases are separated by more than 4 sigma sqrt(D)") {
  ToyWorld w = default_world();
  double min_d = 1e300;
  for (int i = 0; i < w.num_symbols(); ++i) {
    for (int j = i + 1; j < w.num_symbols(); ++j) {
      min_d = std::min(min_d, std::sqrt(squared_distance(w.base(i), w.base(j))));
    }
  }
  CHECK(min_d == doctest::Approx(w.min_symbol_separation()));
  CHECK(min_d > 4.0 * w.noise_sigma() * std::sqrt(double(w.frame_dim())));
}

TEST_CASE("gender direction is orthogonal to every symbol base and speaker vector") {
  ToyWorld w = default_world();
  CHECK(l2_norm(w.gender_direction()) == doctest::Approx(1.0));
  for (int s = 0; s < w.num_symbols(); ++s) CHECK(std::abs(dot(w.gender_direction(), w.base(s))) < 1e-12);
  for (int s = 0; s < w.num_speakers(); ++s) {
    CHECK(std::abs(dot(w.gender_direction(), w.speaker(s).vec)) < 1e-12);
    CHECK(l2_norm(w.speaker(s).vec) == doctest::Approx(w.config().speaker_scale));
  }
}

TEST_CASE("crowded configurations are rejected") {
  ToyWorldConfig cfg;
  cfg.symbol_subspace_dim = 2;
  cfg.symbol_scale = 0.1;
  CHECK_THROWS_AS(ToyWorld{cfg}, Error);
}

TEST_CASE("noise-free rendering is base plus speaker plus gender term") {
  ToyWorld w = default_world();
  Rng rng(3, "render");
  const int spk = 4;
  const Gender g = w.speaker(spk).gender;
  std::vector<int> text = w.sample_text(w.speaker(spk).language, rng);
  FrameSequence f = render_utterance(w, text, spk, g, 0.0, rng);
  REQUIRE(f.rows() == text.size() * 2);
  std::vector<double> offset = w.speaker_offset(spk, g);
  const double sign = g == Gender::kMale ? 1.0 : -1.0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    for (int d = 0; d < w.frame_dim(); ++d) {
      double expect = w.base(text[i])[d] + w.speaker(spk).vec[d] + sign * w.config().gender_offset * w.gender_direction()[d];
      CHECK(f(2 * i, d) == doctest::Approx(expect).epsilon(1e-14));
      CHECK(f(2 * i, d) == f(2 * i + 1, d));
      CHECK(offset[d] == doctest::Approx(expect - w.base(text[i])[d]).epsilon(1e-14));
    }
  }
  std::vector<int> bad = {w.num_symbols()};
  CHECK_THROWS_AS(render_utterance(w, bad, spk, g, 0.0, rng), Error);
}

TEST_CASE("noise-free decoding and speaker estimation are exact") {
  ToyWorld w = default_world();
  Rng rng(5, "exact");
  for (int trial = 0; trial < 50; ++trial) {
    int spk = int(rng.uniform_int(w.num_speakers()));
    Gender g = w.speaker(spk).gender;
    std::vector<int> text = w.sample_text(w.speaker(spk).language, rng);
    FrameSequence f = render_utterance(w, text, spk, g, 0.0, rng);
    CHECK(nearest_base_decode(f, w) == text);
    std::vector<double> est = estimate_speaker_vector(f, text, w);
    std::vector<double> truth = w.speaker_offset(spk, g);
    for (std::size_t d = 0; d < truth.size(); ++d) CHECK(std::abs(est[d] - truth[d]) < 1e-12);
  }
}

TEST_CASE("default noise keeps nearest-base CER under 1%") {
  ToyWorld w = default_world();
  Rng rng(9, "montecarlo");
  std::vector<std::vector<int>> hyps, refs;
  for (int i = 0; i < 1000; ++i) {
    int spk = int(rng.uniform_int(w.num_speakers()));
    std::vector<int> text = w.sample_text(w.speaker(spk).language, rng);
    FrameSequence f = render_utterance(w, text, spk, w.speaker(spk).gender, w.noise_sigma(), rng);
    hyps.push_back(nearest_base_decode(f, w));
    refs.push_back(text);
  }
  CHECK(corpus_cer(hyps, refs).value() < 0.01);
}

TEST_CASE("speaker estimates separate same and different speakers") {
  ToyWorld w = default_world();
  Rng rng(13, "secs");
  double same = 0.0, diff = 0.0;
  const int n = 300;
  auto estimate = [&](int spk) {
    std::vector<int> text = w.sample_text(w.speaker(spk).language, rng);
    FrameSequence f = render_utterance(w, text, spk, w.speaker(spk).gender, w.noise_sigma(), rng);
    return estimate_speaker_vector(f, text, w);
  };
  for (int i = 0; i < n; ++i) {
    int a = int(rng.uniform_int(w.num_speakers()));
    int b = int(rng.uniform_int(w.num_speakers() - 1));
    if (b >= a) ++b;
    std::vector<double> ea = estimate(a);
    same += cosine_similarity(ea, estimate(a));
    diff += cosine_similarity(ea, estimate(b));
  }
  CHECK(same / n - diff / n > 0.5);
}

TEST_CASE("corpus split sizes, held-out speakers and class balance") {
  ToyWorld w = default_world();
  CorpusConfig cc;
  cc.train_size = 100;
  cc.val_size = 10;
  cc.test_size = 10;
  Corpus c = sample_corpus(w, cc);
  CHECK(c.train.size() == 100);
  CHECK(c.val.size() == 10);
  CHECK(c.test.size() == 10);

  std::set<std::string> ids;
  std::set<int> train_speakers, test_speakers;
  for (auto* split : {&c.train, &c.val, &c.test}) {
    for (const ToyUtterance& u : *split) {
      CHECK(ids.insert(u.id).second);
      CHECK(u.frames.rows() == u.text.size() * std::size_t(w.frames_per_symbol()));
    }
  }
  for (const ToyUtterance& u : c.train) train_speakers.insert(u.speaker);
  for (const ToyUtterance& u : c.test) test_speakers.insert(u.speaker);
  for (int s : test_speakers) CHECK(train_speakers.count(s) == 0);

  std::vector<int> per_language(w.num_languages(), 0);
  for (const ToyUtterance& u : c.train) ++per_language[u.language];
  auto [lo, hi] = std::ranges::minmax(per_language);
  CHECK(hi - lo <= 1);
}

TEST_CASE("single-language world gives every utterance one tag") {
  ToyWorldConfig cfg;
  cfg.num_languages = 1;
  cfg.num_speakers = 8;
  ToyWorld w(cfg);
  CorpusConfig cc;
  cc.train_size = 30;
  cc.val_size = 5;
  cc.test_size = 5;
  cc.held_out_per_language = 2;
  Corpus c = sample_corpus(w, cc);
  for (const ToyUtterance& u : c.train) CHECK(u.language == 0);
  for (const ToyUtterance& u : c.test) CHECK(u.language == 0);
}

TEST_CASE("corpus is a deterministic function of the config") {
  ToyWorld w = default_world();
  CorpusConfig cc;
  cc.train_size = 40;
  cc.val_size = 5;
  cc.test_size = 5;
  Corpus a = sample_corpus(w, cc);
  Corpus b = sample_corpus(w, cc);
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].id == b.train[i].id);
    CHECK(a.train[i].text == b.train[i].text);
    CHECK(a.train[i].frames.values() == b.train[i].frames.values());
  }
}

TEST_CASE("frames and manifests round-trip through disk") {
  ToyWorld w = default_world();
  CorpusConfig cc;
  cc.train_size = 12;
  cc.val_size = 2;
  cc.test_size = 2;
  Corpus c = sample_corpus(w, cc);
  fs::path dir = scratch_dir("toyspeech_io");
  write_manifest(dir / "train.jsonl", save_utterances(c.train, w, dir, dir / "frames"));
  std::vector<ToyUtterance> back = load_utterances(dir / "train.jsonl", w);
  REQUIRE(back.size() == c.train.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].id == c.train[i].id);
    CHECK(back[i].text == c.train[i].text);
    CHECK(back[i].speaker == c.train[i].speaker);
    CHECK(back[i].gender == c.train[i].gender);
    CHECK(back[i].frames.values() == c.train[i].frames.values());
  }

  std::ifstream in(dir / "frames" / (c.train[0].id + ".psfr"), std::ios::binary);
  char magic[4];
  in.read(magic, 4);
  CHECK(std::string(magic, 4) == "PSFR");

  std::ofstream(dir / "bad.psfr", std::ios::binary) << "NOPE";
  CHECK_THROWS_AS(read_frames(dir / "bad.psfr"), Error);
  fs::remove_all(dir);
}
