#include "polyspeech/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "polyspeech/error.hpp"
#include "polyspeech/tensor.hpp"

namespace polyspeech {

std::size_t edit_distance(std::span<const int> hyp, std::span<const int> ref) {
  std::vector<std::size_t> prev(ref.size() + 1), cur(ref.size() + 1);
  std::iota(prev.begin(), prev.end(), std::size_t{0});
  for (std::size_t i = 1; i <= hyp.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= ref.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (hyp[i - 1] == ref[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[ref.size()];
}

double cer(std::span<const int> hyp, std::span<const int> ref) {
  require(!ref.empty(), "cer: empty reference");
  return static_cast<double>(edit_distance(hyp, ref)) / static_cast<double>(ref.size());
}

double CorpusCer::value() const {
  require(ref_length > 0, "corpus CER: no reference symbols");
  return static_cast<double>(edits) / static_cast<double>(ref_length);
}

CorpusCer corpus_cer(const std::vector<std::vector<int>>& hyps, const std::vector<std::vector<int>>& refs) {
  require(hyps.size() == refs.size(), "corpus_cer: hypothesis/reference count mismatch");
  CorpusCer out;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    require(!refs[i].empty(), "corpus_cer: empty reference");
    out.edits += edit_distance(hyps[i], refs[i]);
    out.ref_length += refs[i].size();
    ++out.utterances;
  }
  return out;
}

double accuracy(std::span<const int> hyps, std::span<const int> refs) {
  require(hyps.size() == refs.size(), "accuracy: length mismatch");
  require(!refs.empty(), "accuracy: no items");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < refs.size(); ++i) hits += hyps[i] == refs[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(refs.size());
}

double macro_f1(std::span<const int> hyps, std::span<const int> refs, std::span<const int> classes,
                bool exclude_absent) {
  require(hyps.size() == refs.size(), "macro_f1: length mismatch");
  require(!classes.empty(), "macro_f1: no classes");
  double sum = 0.0;
  std::size_t counted = 0;
  for (int c : classes) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < refs.size(); ++i) {
      const bool h = hyps[i] == c, r = refs[i] == c;
      tp += h && r;
      fp += h && !r;
      fn += !h && r;
    }
    if (tp + fp + fn == 0 && exclude_absent) continue;
    ++counted;
    const double precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double recall = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
    if (precision + recall > 0.0) sum += 2.0 * precision * recall / (precision + recall);
  }
  return counted == 0 ? 0.0 : sum / static_cast<double>(counted);
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "cosine_similarity: length mismatch");
  const double na = l2_norm(a), nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) fail("cosine_similarity: zero-norm embedding");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

std::string format_report_row(const EvalReport& r) {
  std::ostringstream os;
  os.precision(10);
  os << r.task << ',' << r.metric << ',' << r.value << ',' << r.n;
  return os.str();
}

void write_reports(const std::filesystem::path& path, const std::vector<EvalReport>& reports) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  os << "task,metric,value,n\n";
  for (const auto& r : reports) os << format_report_row(r) << '\n';
}

}  // namespace polyspeech
