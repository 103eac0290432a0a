#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "polyspeech/tensor.hpp"

namespace polyspeech {

struct Parameter {
  std::string name;
  Tensor value;
};

/// Named parameters, iterated in lexicographic name order. Element addresses
/// are stable for the lifetime of the set.
class ParameterSet {
 public:
  Parameter& add(const std::string& name, Tensor value);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.contains(name); }

  std::size_t size() const noexcept { return params_.size(); }
  std::size_t num_values() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Parameter> params_;
};

/// Copy every value of `from` whose name also exists in `to`; shapes must agree.
void copy_values(const ParameterSet& from, ParameterSet& to);

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  const Tensor* borrowed = nullptr;  // parameter leaves alias the live value
  Tensor grad;
  bool requires_grad = false;
  const Parameter* param = nullptr;
  std::vector<Var> inputs;
  std::function<void(Node&)> backward;

  const Tensor& val() const { return borrowed ? *borrowed : value; }
  Tensor& grad_buffer();
};

using Gradients = std::unordered_map<const Parameter*, Tensor>;

/// Owns the leaves of one forward pass. Ops build the tape implicitly through
/// shared node pointers; backward() walks it in reverse topological order.
class Graph {
 public:
  explicit Graph(bool track_gradients = true) : track_(track_gradients) {}

  bool tracking() const noexcept { return track_; }

  Var constant(Tensor value) const;
  /// Leaf bound to a live parameter (no copy). Cached: one leaf per parameter.
  Var param(const Parameter& p);
  /// Frozen parameters enter the graph as constants.
  void freeze(const Parameter& p) { frozen_.insert(&p); }

  void backward(const Var& loss);
  /// Gradients of every parameter leaf touched by the last backward().
  Gradients gradients() const;

 private:
  bool track_;
  std::unordered_map<const Parameter*, Var> leaves_;
  std::unordered_set<const Parameter*> frozen_;
};

/// Boolean visibility matrix; visible(i, j) == false hides key j from query i.
struct AttentionMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> bits;

  AttentionMask() = default;
  AttentionMask(std::size_t r, std::size_t c, bool value = false)
      : rows(r), cols(c), bits(r * c, value ? 1 : 0) {}
  bool visible(std::size_t i, std::size_t j) const { return bits[i * cols + j] != 0; }
  void set(std::size_t i, std::size_t j, bool v) { bits[i * cols + j] = v ? 1 : 0; }
};

enum class Activation { kIdentity, kRelu, kTanh, kGelu };

// Differentiable ops. Shapes are checked; mismatches throw polyspeech::Error.
Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);  // a * bᵀ
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_row(const Var& x, const Var& row);  // broadcast a 1×c row over x
Var relu(const Var& x);
Var tanh(const Var& x);
Var sigmoid(const Var& x);
Var gelu(const Var& x);
Var activate(const Var& x, Activation act);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var embedding(const Var& table, std::span<const int> ids);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(const Var& x, std::size_t begin, std::size_t end);
Var slice_cols(const Var& x, std::size_t begin, std::size_t end);
Var repeat_rows(const Var& x, std::size_t factor);
/// Multi-head scaled dot-product attention; q, k, v carry `heads` equal column blocks.
Var attention(const Var& q, const Var& k, const Var& v, const AttentionMask& mask, std::size_t heads);
/// 1-D convolution over rows. x: T×Cin, w: Cout×(kernel·Cin) laid out [tap][cin],
/// b: 1×Cout. Left padding (kernel−1)/2, zero padded; output length ceil(T/stride).
Var conv1d(const Var& x, const Var& w, const Var& b, std::size_t kernel, std::size_t stride);
/// Mean cross-entropy of softmax(logits row r) against targets[r].
Var cross_entropy(const Var& logits, std::span<const int> targets);
Var mse(const Var& a, const Var& b);
Var sum_all(const Var& x);
Var mean_all(const Var& x);
Var detach(const Var& x);

// Plain (non-differentiable) helpers shared with inference code.
std::vector<double> softmax(std::span<const double> v);
std::vector<double> log_softmax(std::span<const double> v);
/// Forward of attention() on raw tensors.
Tensor attention_forward(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask,
                         std::size_t heads, std::vector<double>* probs_out = nullptr);

}  // namespace polyspeech
