#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "polyspeech/autograd.hpp"
#include "polyspeech/tasks.hpp"

namespace polyspeech {

struct LmConfig {
  int num_layers = 2;
  int num_heads = 4;
  int d_model = 64;
  int d_ffn = 256;
  int text_vocab_size = 32;
  /// Rows of each speech-token table (codes plus the speech EOS id).
  int speech_vocab_size = 65;
  int speech_token_dims = 1;
  int num_task_ids = kNumTaskIds;
  int continuous_input_dim = 16;
  int max_seq_len = 128;
  /// Strictly causal over the whole sequence instead of prefix-causal.
  bool full_causal = false;
  std::vector<TaskKind> tasks = {TaskKind::kAsr, TaskKind::kTts, TaskKind::kLid, TaskKind::kGid};
  std::uint64_t seed = 1;
};

void validate(const LmConfig& cfg);
LmConfig lm_config_for(const Vocabulary& vocab, int continuous_input_dim);

/// Source rows (i < b) see exactly the source block; target rows see j ≤ i.
/// `full_causal` makes every row causal. Requires 1 ≤ b ≤ L.
AttentionMask build_attention_mask(std::size_t boundary, std::size_t length, bool full_causal = false);

/// Per-layer keys/values of every position processed so far.
struct LmCache {
  std::vector<Tensor> keys;
  std::vector<Tensor> values;
  std::size_t length = 0;
};

class MultiModalLm {
 public:
  explicit MultiModalLm(const LmConfig& cfg);

  const LmConfig& config() const noexcept { return cfg_; }
  ParameterSet& params() noexcept { return params_; }
  const ParameterSet& params() const noexcept { return params_; }
  bool has_head(TaskKind t) const;
  int head_width(TaskKind t) const;

  /// Token/frame embeddings before the positional term (L × d_model).
  Var embed_elements(Graph& g, std::span<const SequenceElement> elements) const;
  /// embed_elements plus learned absolute positions starting at `start_pos`.
  Var embed_sequence(Graph& g, std::span<const SequenceElement> elements, std::size_t start_pos = 0) const;

  /// Final-norm hidden states (L × d_model).
  Var hidden(Graph& g, std::span<const SequenceElement> elements, std::size_t boundary) const;
  /// Logits of the task's head at every position (L × head width).
  Var forward(Graph& g, std::span<const SequenceElement> elements, std::size_t boundary, TaskKind task) const;
  Tensor logits(std::span<const SequenceElement> elements, std::size_t boundary, TaskKind task) const;

  /// Appends `elements` to the cached sequence and returns their logits. The
  /// mask rows for the new positions are taken from the prefix-causal rule
  /// with the given boundary. Row-for-row identical to a full forward.
  Tensor extend(LmCache& cache, std::span<const SequenceElement> elements, std::size_t boundary, TaskKind task) const;

 private:
  Var run(Graph& g, std::span<const SequenceElement> elements, std::size_t start, const AttentionMask& mask,
          LmCache* cache) const;
  Var head(Graph& g, const Var& hidden, TaskKind task) const;

  LmConfig cfg_;
  ParameterSet params_;
};

/// Mean cross-entropy over the supervised positions boundary−1 … L−1.
Var lm_loss(const Var& logits, const AssembledExample& ex);
Var lm_example_loss(const MultiModalLm& model, Graph& g, const AssembledExample& ex);

std::string head_param_prefix(TaskKind t);

}  // namespace polyspeech
