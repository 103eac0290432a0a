#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "polyspeech/lm.hpp"
#include "polyspeech/rng.hpp"

namespace polyspeech {

enum class DecodeMode { kTopK, kBeam, kGreedy };

std::string_view decode_mode_name(DecodeMode m);
DecodeMode parse_decode_mode(std::string_view name);

struct DecodeConfig {
  DecodeMode mode = DecodeMode::kGreedy;
  int k = 5;
  int beam_size = 5;
  int max_len = 32;
  double temperature = 1.0;
  std::uint64_t seed = 1;
  bool length_normalize = false;
  /// If non-empty, only these ids (plus EOS) may be emitted.
  std::vector<int> allowed_ids;
};

void validate(const DecodeConfig& cfg);

struct Hypothesis {
  std::vector<int> tokens;  // EOS excluded
  double log_prob = 0.0;
  bool finished = false;
};

/// Incremental scoring state for one partial output.
class DecodingSession {
 public:
  virtual ~DecodingSession() = default;
  virtual std::unique_ptr<DecodingSession> clone() const = 0;
  /// Logits for the next token given everything appended so far.
  virtual std::vector<double> next_logits() const = 0;
  virtual void append(int token) = 0;
  virtual int eos_id() const = 0;
};

/// Drives a MultiModalLm from an assembled prefix. With `use_cache` every
/// step only processes the new element against cached keys/values; without it
/// each step reruns the whole sequence. Both give identical logits.
class LmSession : public DecodingSession {
 public:
  LmSession(const MultiModalLm& model, std::vector<SequenceElement> prefix, std::size_t boundary, TaskKind task,
            int eos, bool use_cache = true);

  std::unique_ptr<DecodingSession> clone() const override;
  std::vector<double> next_logits() const override { return logits_; }
  void append(int token) override;
  int eos_id() const override { return eos_; }

 private:
  const MultiModalLm* model_;
  std::vector<SequenceElement> elements_;
  std::size_t boundary_;
  TaskKind task_;
  int eos_;
  bool use_cache_;
  LmCache cache_;
  std::vector<double> logits_;
};

std::unique_ptr<LmSession> make_session(const MultiModalLm& model, const InferencePrefix& prefix, TaskKind task,
                                        const Vocabulary& vocab, bool use_cache = true);

/// Samples among the k largest logits (ties → lower id) with probability
/// ∝ softmax(logits / temperature) renormalised over that set.
int top_k_sample(std::span<const double> logits, int k, Rng& rng, double temperature = 1.0);

/// Length-unnormalised beam search (unless cfg.length_normalize). Finished
/// hypotheses stay in the pool and compete on total log-prob. The greedy
/// path is scored alongside, so the result never scores below greedy when
/// both finish. If nothing finishes by max_len the best partial is returned
/// with finished == false.
Hypothesis beam_search(const DecodingSession& start, const DecodeConfig& cfg);
Hypothesis greedy_search(const DecodingSession& start, const DecodeConfig& cfg);

struct GenerateResult {
  std::vector<int> tokens;  // EOS excluded
  double log_prob = 0.0;
  bool truncated = false;   // max_len reached without EOS
};

GenerateResult generate(const DecodingSession& start, const DecodeConfig& cfg, Rng& rng);
GenerateResult generate(const DecodingSession& start, const DecodeConfig& cfg);

}  // namespace polyspeech
