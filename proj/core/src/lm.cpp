#include "polyspeech/lm.hpp"

#include <cmath>
#include <string>

#include "polyspeech/error.hpp"
#include "polyspeech/rng.hpp"

namespace polyspeech {
namespace {

constexpr double kInitStd = 0.02;

Tensor normal_tensor(std::size_t rows, std::size_t cols, double stddev, Rng rng) {
  Tensor t(rows, cols);
  for (double& v : t.values()) v = stddev * rng.normal();
  return t;
}

Tensor row_vector(std::size_t n, double fill) { return Tensor({n}, std::vector<double>(n, fill)); }

std::string block(int i) { return "blocks." + std::to_string(i) + "."; }

}  // namespace

std::string head_param_prefix(TaskKind t) {
  std::string name(task_name(t));
  for (char& c : name) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return "head." + name + ".";
}

void validate(const LmConfig& cfg) {
  require(cfg.num_layers >= 1 && cfg.num_heads >= 1, "LmConfig: need at least one layer and head");
  require(cfg.d_model % cfg.num_heads == 0, "LmConfig: d_model must be divisible by num_heads");
  require(cfg.d_ffn >= 1, "LmConfig: d_ffn must be >= 1");
  require(cfg.text_vocab_size >= 2 && cfg.speech_vocab_size >= 2, "LmConfig: vocab sizes must be >= 2");
  require(cfg.speech_token_dims >= 1, "LmConfig: speech_token_dims must be >= 1");
  require(cfg.num_task_ids >= kNumTaskIds, "LmConfig: num_task_ids too small");
  require(cfg.continuous_input_dim >= 1 && cfg.max_seq_len >= 1, "LmConfig: bad input sizes");
  require(!cfg.tasks.empty(), "LmConfig: no task heads");
}

LmConfig lm_config_for(const Vocabulary& vocab, int continuous_input_dim) {
  LmConfig cfg;
  cfg.text_vocab_size = vocab.text_size();
  cfg.speech_vocab_size = vocab.speech_size();
  cfg.continuous_input_dim = continuous_input_dim;
  return cfg;
}

AttentionMask build_attention_mask(std::size_t boundary, std::size_t length, bool full_causal) {
  require(boundary >= 1 && boundary <= length,
          "build_attention_mask: boundary " + std::to_string(boundary) + " outside [1, " + std::to_string(length) + "]");
  AttentionMask mask(length, length);
  for (std::size_t i = 0; i < length; ++i) {
    for (std::size_t j = 0; j < length; ++j) {
      const bool visible = (full_causal || i >= boundary) ? j <= i : j < boundary;
      mask.set(i, j, visible);
    }
  }
  return mask;
}

MultiModalLm::MultiModalLm(const LmConfig& cfg) : cfg_(cfg) {
  validate(cfg);
  Rng rng(cfg.seed, "lm.init");
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto f = static_cast<std::size_t>(cfg.d_ffn);
  const double out_std = kInitStd / std::sqrt(2.0 * cfg.num_layers);

  params_.add("embed.text", normal_tensor(cfg.text_vocab_size, d, kInitStd, rng.split("embed.text")));
  for (int j = 0; j < cfg.speech_token_dims; ++j) {
    const std::string name = "embed.speech." + std::to_string(j);
    params_.add(name, normal_tensor(cfg.speech_vocab_size, d, kInitStd, rng.split(name)));
  }
  params_.add("embed.task", normal_tensor(cfg.num_task_ids, d, kInitStd, rng.split("embed.task")));
  params_.add("embed.continuous.weight",
              normal_tensor(cfg.continuous_input_dim, d, kInitStd, rng.split("embed.continuous")));
  params_.add("embed.continuous.bias", row_vector(d, 0.0));
  params_.add("embed.position", normal_tensor(cfg.max_seq_len, d, kInitStd, rng.split("embed.position")));

  for (int i = 0; i < cfg.num_layers; ++i) {
    const std::string p = block(i);
    const Rng r = rng.split(p);
    params_.add(p + "ln1.gamma", row_vector(d, 1.0));
    params_.add(p + "ln1.beta", row_vector(d, 0.0));
    for (const char* w : {"attn.wq", "attn.wk", "attn.wv"}) {
      params_.add(p + w, normal_tensor(d, d, kInitStd, r.split(w)));
      params_.add(p + w + std::string(".bias"), row_vector(d, 0.0));
    }
    params_.add(p + "attn.wo", normal_tensor(d, d, out_std, r.split("attn.wo")));
    params_.add(p + "attn.wo.bias", row_vector(d, 0.0));
    params_.add(p + "ln2.gamma", row_vector(d, 1.0));
    params_.add(p + "ln2.beta", row_vector(d, 0.0));
    params_.add(p + "ffn.w1", normal_tensor(d, f, kInitStd, r.split("ffn.w1")));
    params_.add(p + "ffn.b1", row_vector(f, 0.0));
    params_.add(p + "ffn.w2", normal_tensor(f, d, out_std, r.split("ffn.w2")));
    params_.add(p + "ffn.b2", row_vector(d, 0.0));
  }
  params_.add("final_ln.gamma", row_vector(d, 1.0));
  params_.add("final_ln.beta", row_vector(d, 0.0));

  for (TaskKind t : cfg.tasks) {
    const std::string p = head_param_prefix(t);
    require(!params_.contains(p + "weight"), "LmConfig: duplicate task head");
    const auto width = static_cast<std::size_t>(head_width(t));
    params_.add(p + "weight", normal_tensor(d, width, kInitStd, rng.split(p)));
    params_.add(p + "bias", row_vector(width, 0.0));
  }
}

bool MultiModalLm::has_head(TaskKind t) const { return params_.contains(head_param_prefix(t) + "weight"); }

int MultiModalLm::head_width(TaskKind t) const {
  return target_modality(t) == Modality::kText ? cfg_.text_vocab_size : cfg_.speech_vocab_size;
}

Var MultiModalLm::embed_elements(Graph& g, std::span<const SequenceElement> elements) const {
  require(!elements.empty(), "embed_sequence: no elements");
  std::vector<Var> runs;
  std::size_t i = 0;
  while (i < elements.size()) {
    const ElementKind kind = elements[i].kind;
    std::size_t end = i;
    while (end < elements.size() && elements[end].kind == kind) ++end;
    const auto run = elements.subspan(i, end - i);
    switch (kind) {
      case ElementKind::kTextToken:
      case ElementKind::kTaskId: {
        std::vector<int> ids;
        for (const auto& e : run) {
          require(e.ids.size() == 1, "embed_sequence: text/task element needs exactly one id");
          ids.push_back(e.ids[0]);
        }
        const char* table = kind == ElementKind::kTextToken ? "embed.text" : "embed.task";
        runs.push_back(embedding(g.param(params_.get(table)), ids));
        break;
      }
      case ElementKind::kSpeechToken: {
        const auto m = static_cast<std::size_t>(cfg_.speech_token_dims);
        Var sum;
        for (std::size_t j = 0; j < m; ++j) {
          std::vector<int> ids;
          for (const auto& e : run) {
            require(e.ids.size() == m, "embed_sequence: speech token has " + std::to_string(e.ids.size()) +
                                           " ids, expected " + std::to_string(m));
            ids.push_back(e.ids[j]);
          }
          Var part = embedding(g.param(params_.get("embed.speech." + std::to_string(j))), ids);
          sum = sum ? add(sum, part) : part;
        }
        runs.push_back(m == 1 ? sum : scale(sum, 1.0 / static_cast<double>(m)));
        break;
      }
      case ElementKind::kContinuousFrame: {
        const auto dim = static_cast<std::size_t>(cfg_.continuous_input_dim);
        Tensor frames(run.size(), dim);
        for (std::size_t r = 0; r < run.size(); ++r) {
          require(run[r].frame.size() == dim, "embed_sequence: frame dim " + std::to_string(run[r].frame.size()) +
                                                  " != " + std::to_string(dim));
          std::copy(run[r].frame.begin(), run[r].frame.end(), frames.row(r).begin());
        }
        runs.push_back(add_row(matmul(g.constant(std::move(frames)), g.param(params_.get("embed.continuous.weight"))),
                               g.param(params_.get("embed.continuous.bias"))));
        break;
      }
    }
    i = end;
  }
  return runs.size() == 1 ? runs[0] : concat_rows(runs);
}

Var MultiModalLm::embed_sequence(Graph& g, std::span<const SequenceElement> elements, std::size_t start_pos) const {
  require(start_pos + elements.size() <= static_cast<std::size_t>(cfg_.max_seq_len),
          "embed_sequence: length " + std::to_string(start_pos + elements.size()) + " exceeds max_seq_len " +
              std::to_string(cfg_.max_seq_len));
  Var tokens = embed_elements(g, elements);
  Var pos = slice_rows(g.param(params_.get("embed.position")), start_pos, start_pos + elements.size());
  return add(tokens, pos);
}

Var MultiModalLm::run(Graph& g, std::span<const SequenceElement> elements, std::size_t start,
                      const AttentionMask& mask, LmCache* cache) const {
  Var x = embed_sequence(g, elements, start);
  const auto heads = static_cast<std::size_t>(cfg_.num_heads);
  if (cache && cache->keys.empty()) {
    cache->keys.resize(cfg_.num_layers);
    cache->values.resize(cfg_.num_layers);
  }
  for (int i = 0; i < cfg_.num_layers; ++i) {
    const std::string p = block(i);
    auto P = [&](const std::string& n) { return g.param(params_.get(p + n)); };
    Var h = layer_norm(x, P("ln1.gamma"), P("ln1.beta"));
    Var q = add_row(matmul(h, P("attn.wq")), P("attn.wq.bias"));
    Var k = add_row(matmul(h, P("attn.wk")), P("attn.wk.bias"));
    Var v = add_row(matmul(h, P("attn.wv")), P("attn.wv.bias"));
    if (cache && cache->length > 0) {
      k = concat_rows({g.constant(cache->keys[i]), k});
      v = concat_rows({g.constant(cache->values[i]), v});
    }
    if (cache) {
      cache->keys[i] = k->val();
      cache->values[i] = v->val();
    }
    Var a = attention(q, k, v, mask, heads);
    x = add(x, add_row(matmul(a, P("attn.wo")), P("attn.wo.bias")));
    h = layer_norm(x, P("ln2.gamma"), P("ln2.beta"));
    Var ff = gelu(add_row(matmul(h, P("ffn.w1")), P("ffn.b1")));
    x = add(x, add_row(matmul(ff, P("ffn.w2")), P("ffn.b2")));
  }
  if (cache) cache->length = start + elements.size();
  return layer_norm(x, g.param(params_.get("final_ln.gamma")), g.param(params_.get("final_ln.beta")));
}

Var MultiModalLm::head(Graph& g, const Var& hidden, TaskKind task) const {
  require(has_head(task), "model has no head for task " + std::string(task_name(task)));
  const std::string p = head_param_prefix(task);
  return add_row(matmul(hidden, g.param(params_.get(p + "weight"))), g.param(params_.get(p + "bias")));
}

Var MultiModalLm::hidden(Graph& g, std::span<const SequenceElement> elements, std::size_t boundary) const {
  return run(g, elements, 0, build_attention_mask(boundary, elements.size(), cfg_.full_causal), nullptr);
}

Var MultiModalLm::forward(Graph& g, std::span<const SequenceElement> elements, std::size_t boundary,
                          TaskKind task) const {
  return head(g, hidden(g, elements, boundary), task);
}

Tensor MultiModalLm::logits(std::span<const SequenceElement> elements, std::size_t boundary, TaskKind task) const {
  Graph g(false);
  return forward(g, elements, boundary, task)->val();
}

Tensor MultiModalLm::extend(LmCache& cache, std::span<const SequenceElement> elements, std::size_t boundary,
                            TaskKind task) const {
  require(!elements.empty(), "extend: no elements");
  const std::size_t start = cache.length;
  const std::size_t total = start + elements.size();
  require(boundary >= 1, "extend: boundary must be >= 1");
  require(start >= boundary || total >= boundary, "extend: the source block must be processed in one call");
  AttentionMask mask(elements.size(), total);
  for (std::size_t r = 0; r < elements.size(); ++r) {
    const std::size_t i = start + r;
    for (std::size_t j = 0; j < total; ++j) {
      const bool visible = (cfg_.full_causal || i >= boundary) ? j <= i : j < boundary;
      mask.set(r, j, visible);
    }
  }
  Graph g(false);
  return head(g, run(g, elements, start, mask, &cache), task)->val();
}

Var lm_loss(const Var& logits, const AssembledExample& ex) {
  const std::size_t length = ex.elements.size();
  require(!ex.targets.empty(), "lm_loss: empty target span");
  require(ex.boundary >= 1 && ex.boundary <= length, "lm_loss: bad boundary");
  require(ex.targets.size() == length - ex.boundary + 1, "lm_loss: target count does not match the target span");
  require(logits->val().rows() == length, "lm_loss: logits rows != sequence length");
  return cross_entropy(slice_rows(logits, ex.boundary - 1, length), ex.targets);
}

Var lm_example_loss(const MultiModalLm& model, Graph& g, const AssembledExample& ex) {
  return lm_loss(model.forward(g, ex.elements, ex.boundary, ex.task), ex);
}

}  // namespace polyspeech
