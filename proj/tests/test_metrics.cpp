#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>

#include "doctest.h"
#include "polyspeech/error.hpp"
#include "polyspeech/metrics.hpp"
#include "polyspeech/rng.hpp"

using namespace polyspeech;

namespace {

std::size_t brute_edit(std::span<const int> a, std::span<const int> b) {
  if (a.empty()) return b.size();
  if (b.empty()) return a.size();
  if (a[0] == b[0]) return brute_edit(a.subspan(1), b.subspan(1));
  std::size_t best = std::min(brute_edit(a.subspan(1), b) + 1, brute_edit(a, b.subspan(1)) + 1);
  return std::min(best, brute_edit(a.subspan(1), b.subspan(1)) + 1);
}

std::vector<std::vector<int>> all_strings(int max_len, int alphabet) {
  std::vector<std::vector<int>> out{{}};
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (int(out[i].size()) == max_len) continue;
    for (int s = 0; s < alphabet; ++s) {
      auto next = out[i];
      next.push_back(s);
      out.push_back(next);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("cer examples") {
  std::vector<int> abc{0, 1, 2}, axc{0, 9, 2}, a{0};
  CHECK(cer(abc, abc) == 0.0);
  CHECK(cer(axc, abc) == doctest::Approx(1.0 / 3.0));
  CHECK(cer(abc, a) == 2.0);
  CHECK_THROWS_AS(cer(abc, std::vector<int>{}), Error);
}

TEST_CASE("edit distance equals the brute-force recursion on every short string pair") {
  const auto strings = all_strings(6, 3);
  std::size_t pairs = 0;
  for (const auto& h : strings) {
    for (const auto& r : strings) {
      CHECK(edit_distance(h, r) == brute_edit(h, r));
      CHECK(edit_distance(h, r) == edit_distance(r, h));
      CHECK((edit_distance(h, r) == 0) == (h == r));
      ++pairs;
    }
  }
  CHECK(pairs == strings.size() * strings.size());
}

TEST_CASE("corpus cer sums edits over reference lengths") {
  std::vector<std::vector<int>> hyps{{0, 1}, {2}}, refs{{0, 1, 2}, {3, 3}};
  CorpusCer c = corpus_cer(hyps, refs);
  CHECK(c.edits == 3);
  CHECK(c.ref_length == 5);
  CHECK(c.utterances == 2);
  CHECK(c.value() == doctest::Approx(0.6));
  hyps.pop_back();
  CHECK_THROWS_AS(corpus_cer(hyps, refs), Error);
}

TEST_CASE("accuracy examples") {
  std::vector<int> r{1, 2, 3, 4};
  CHECK(accuracy(r, r) == 1.0);
  CHECK(accuracy(std::vector<int>{0, 0, 0, 0}, r) == 0.0);
  CHECK(accuracy(std::vector<int>{1, 2, 3, 0}, r) == 0.75);
  CHECK_THROWS_AS(accuracy(std::vector<int>{}, std::vector<int>{}), Error);
  CHECK_THROWS_AS(accuracy(std::vector<int>{1}, r), Error);
}

TEST_CASE("macro f1 examples") {
  std::vector<int> classes{0, 1};
  std::vector<int> refs{0, 0, 1};
  CHECK(macro_f1(refs, refs, classes) == 1.0);
  CHECK(macro_f1(std::vector<int>{1, 1, 0}, refs, classes) == 0.0);
  CHECK(macro_f1(std::vector<int>{0, 1, 1}, refs, classes) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK_THROWS_AS(macro_f1(std::vector<int>{0}, refs, classes), Error);

  std::vector<int> three{0, 1, 2};
  CHECK(macro_f1(refs, refs, three) == doctest::Approx(2.0 / 3.0));
  CHECK(macro_f1(refs, refs, three, true) == 1.0);
}

TEST_CASE("macro f1 matches a hand-built confusion matrix and ignores relabelling") {
  Rng rng(1, "f1");
  for (int trial = 0; trial < 100; ++trial) {
    const int k = 2 + int(rng.uniform_int(4));
    std::vector<int> hyps, refs, classes;
    for (int c = 0; c < k; ++c) classes.push_back(c);
    const int n = 1 + int(rng.uniform_int(30));
    for (int i = 0; i < n; ++i) {
      refs.push_back(int(rng.uniform_int(k)));
      hyps.push_back(rng.uniform() < 0.6 ? refs.back() : int(rng.uniform_int(k)));
    }
    double sum = 0.0;
    for (int c = 0; c < k; ++c) {
      double tp = 0, fp = 0, fn = 0;
      for (int i = 0; i < n; ++i) {
        tp += hyps[i] == c && refs[i] == c;
        fp += hyps[i] == c && refs[i] != c;
        fn += hyps[i] != c && refs[i] == c;
      }
      const double p = tp + fp > 0 ? tp / (tp + fp) : 0.0;
      const double r = tp + fn > 0 ? tp / (tp + fn) : 0.0;
      sum += p + r > 0 ? 2 * p * r / (p + r) : 0.0;
    }
    CHECK(macro_f1(hyps, refs, classes) == doctest::Approx(sum / k).epsilon(1e-14));

    std::vector<int> perm = classes;
    std::reverse(perm.begin(), perm.end());
    std::vector<int> ph, pr;
    for (int i = 0; i < n; ++i) {
      ph.push_back(perm[hyps[i]]);
      pr.push_back(perm[refs[i]]);
    }
    CHECK(macro_f1(ph, pr, classes) == doctest::Approx(macro_f1(hyps, refs, classes)).epsilon(1e-14));

    // Accuracy is micro-averaged recall.
    double hits = 0;
    for (int i = 0; i < n; ++i) hits += hyps[i] == refs[i];
    CHECK(accuracy(hyps, refs) == doctest::Approx(hits / n));
  }
}

TEST_CASE("cosine similarity examples") {
  std::vector<double> a{1.0, 2.0, -0.5};
  CHECK(cosine_similarity(a, a) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(cosine_similarity(std::vector<double>{1.0, 0.0}, std::vector<double>{0.0, 3.0}) == 0.0);
  CHECK(cosine_similarity(std::vector<double>{1.0, 0.0}, std::vector<double>{-2.0, 0.0}) == -1.0);
  CHECK_THROWS_AS(cosine_similarity(a, std::vector<double>{0.0, 0.0, 0.0}), Error);
}

TEST_CASE("reports are written as task,metric,value,n") {
  auto path = std::filesystem::temp_directory_path() / "polyspeech_test_report.csv";
  EvalReport r;
  r.task = "ASR";
  r.metric = "cer";
  r.value = 0.125;
  r.n = 8;
  write_reports(path, {r});
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "task,metric,value,n");
  CHECK(row == "ASR,cer,0.125,8");
  std::filesystem::remove(path);
}
