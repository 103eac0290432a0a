#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace polyspeech {

/// Unit-cost Levenshtein distance.
std::size_t edit_distance(std::span<const int> hyp, std::span<const int> ref);

/// edit_distance / |ref|. May exceed 1. Throws on an empty reference.
double cer(std::span<const int> hyp, std::span<const int> ref);

struct CorpusCer {
  std::size_t edits = 0;
  std::size_t ref_length = 0;
  std::size_t utterances = 0;
  double value() const;
};

/// Σ edits / Σ |ref| over paired hypotheses and references.
CorpusCer corpus_cer(const std::vector<std::vector<int>>& hyps, const std::vector<std::vector<int>>& refs);

double accuracy(std::span<const int> hyps, std::span<const int> refs);

/// Unweighted mean of per-class F1 over `classes`. A class that appears in
/// neither refs nor hyps scores 0 unless `exclude_absent` drops it from the mean.
double macro_f1(std::span<const int> hyps, std::span<const int> refs, std::span<const int> classes,
                bool exclude_absent = false);

/// Cosine similarity in [−1, 1]. Throws on a zero-norm input.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

struct EvalReport {
  std::string task;
  std::string metric;
  double value = 0.0;
  std::size_t n = 0;
  std::size_t edits = 0;
  std::map<std::pair<int, int>, std::size_t> confusion;  // (ref, hyp) → count
};

/// CSV with header `task,metric,value,n`.
void write_reports(const std::filesystem::path& path, const std::vector<EvalReport>& reports);
std::string format_report_row(const EvalReport& r);

}  // namespace polyspeech
