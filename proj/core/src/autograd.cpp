#include "polyspeech/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <utility>

#include "polyspeech/error.hpp"

namespace polyspeech {

// ---------------------------------------------------------------------------
// Parameters

Parameter& ParameterSet::add(const std::string& name, Tensor value) {
  require(!params_.contains(name), "duplicate parameter '" + name + "'");
  auto [it, inserted] = params_.emplace(name, Parameter{name, std::move(value)});
  return it->second;
}

Parameter& ParameterSet::get(const std::string& name) {
  auto it = params_.find(name);
  require(it != params_.end(), "unknown parameter '" + name + "'");
  return it->second;
}

const Parameter& ParameterSet::get(const std::string& name) const {
  auto it = params_.find(name);
  require(it != params_.end(), "unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParameterSet::num_values() const {
  std::size_t n = 0;
  for (const auto& [name, p] : params_) n += p.value.size();
  return n;
}

void copy_values(const ParameterSet& from, ParameterSet& to) {
  for (const auto& [name, p] : from) {
    if (!to.contains(name)) continue;
    Parameter& dst = to.get(name);
    require(dst.value.same_shape(p.value), "copy_values: shape mismatch for '" + name + "'");
    dst.value = p.value;
  }
}

// ---------------------------------------------------------------------------
// Graph

Tensor& Node::grad_buffer() {
  if (grad.empty()) grad = Tensor::zeros_like(val());
  return grad;
}

Var Graph::constant(Tensor value) const {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return n;
}

Var Graph::param(const Parameter& p) {
  auto it = leaves_.find(&p);
  if (it != leaves_.end()) return it->second;
  auto n = std::make_shared<Node>();
  n->borrowed = &p.value;
  n->param = &p;
  n->requires_grad = track_ && !frozen_.contains(&p);
  leaves_.emplace(&p, n);
  return n;
}

void Graph::backward(const Var& loss) {
  require(track_, "backward() on a graph built without gradient tracking");
  require(loss->val().size() == 1, "backward() needs a scalar loss");
  if (!loss->requires_grad) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.get(), 0}};
  visited.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss->grad_buffer()[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

Gradients Graph::gradients() const {
  Gradients out;
  for (const auto& [param, leaf] : leaves_) {
    if (leaf->requires_grad && !leaf->grad.empty()) out.emplace(param, leaf->grad);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Op plumbing

namespace {

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Var& v) { return v->requires_grad; });
  if (needs) {
    n->requires_grad = true;
    n->inputs = std::move(inputs);
    n->backward = std::move(backward);
  }
  return n;
}

void accumulate(Tensor& dst, const Tensor& src) {
  double* d = dst.data();
  const double* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

void check_same(const Tensor& a, const Tensor& b, const char* op) {
  require(a.rows() == b.rows() && a.cols() == b.cols(),
          std::string(op) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
}

template <typename F, typename DF>
Var elementwise(const Var& x, F f, DF df) {
  const Tensor& xv = x->val();
  Tensor out(xv.rows(), xv.cols());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_result(std::move(out), {x}, [df](Node& self) {
    Node& in = *self.inputs[0];
    Tensor& g = in.grad_buffer();
    const Tensor& xv = in.val();
    for (std::size_t i = 0; i < xv.size(); ++i) g[i] += self.grad[i] * df(xv[i], self.value[i]);
  });
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

}  // namespace

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(const Var& a, const Var& b) {
  Tensor out(a->val().rows(), b->val().cols());
  matmul_into(a->val(), b->val(), out);
  return make_result(std::move(out), {a, b}, [](Node& self) {
    Node& a = *self.inputs[0];
    Node& b = *self.inputs[1];
    if (a.requires_grad) {
      Tensor da(a.val().rows(), a.val().cols());
      matmul_nt_into(self.grad, b.val(), da);
      accumulate(a.grad_buffer(), da);
    }
    if (b.requires_grad) matmul_tn_accumulate(a.val(), self.grad, b.grad_buffer());
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  Tensor out(a->val().rows(), b->val().rows());
  matmul_nt_into(a->val(), b->val(), out);
  return make_result(std::move(out), {a, b}, [](Node& self) {
    Node& a = *self.inputs[0];
    Node& b = *self.inputs[1];
    if (a.requires_grad) {
      Tensor da(a.val().rows(), a.val().cols());
      matmul_into(self.grad, b.val(), da);
      accumulate(a.grad_buffer(), da);
    }
    if (b.requires_grad) matmul_tn_accumulate(self.grad, a.val(), b.grad_buffer());
  });
}

Var add(const Var& a, const Var& b) {
  check_same(a->val(), b->val(), "add");
  Tensor out = a->val();
  accumulate(out, b->val());
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (auto& in : self.inputs) {
      if (in->requires_grad) accumulate(in->grad_buffer(), self.grad);
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same(a->val(), b->val(), "sub");
  Tensor out = a->val();
  const Tensor& bv = b->val();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    if (self.inputs[0]->requires_grad) accumulate(self.inputs[0]->grad_buffer(), self.grad);
    if (self.inputs[1]->requires_grad) {
      Tensor& g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same(a->val(), b->val(), "mul");
  Tensor out = a->val();
  const Tensor& bv = b->val();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    Node& a = *self.inputs[0];
    Node& b = *self.inputs[1];
    if (a.requires_grad) {
      Tensor& g = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b.val()[i];
    }
    if (b.requires_grad) {
      Tensor& g = b.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * a.val()[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a->val();
  for (double& v : out.values()) v *= s;
  return make_result(std::move(out), {a}, [s](Node& self) {
    Tensor& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

Var add_row(const Var& x, const Var& row) {
  const Tensor& xv = x->val();
  const Tensor& rv = row->val();
  require(rv.size() == xv.cols(), "add_row: row width " + std::to_string(rv.size()) +
                                      " != columns " + std::to_string(xv.cols()));
  Tensor out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += rv[c];
  }
  return make_result(std::move(out), {x, row}, [](Node& self) {
    if (self.inputs[0]->requires_grad) accumulate(self.inputs[0]->grad_buffer(), self.grad);
    if (self.inputs[1]->requires_grad) {
      Tensor& g = self.inputs[1]->grad_buffer();
      for (std::size_t r = 0; r < self.grad.rows(); ++r) {
        for (std::size_t c = 0; c < self.grad.cols(); ++c) g[c] += self.grad(r, c);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities

Var relu(const Var& x) {
  return elementwise(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var tanh(const Var& x) {
  return elementwise(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(const Var& x) {
  return elementwise(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Var gelu(const Var& x) {
  return elementwise(
      x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + 0.044715 * v * v * v))); },
      [](double v, double) {
        const double t = std::tanh(kGeluC * (v + 0.044715 * v * v * v));
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * v * v);
      });
}

Var activate(const Var& x, Activation act) {
  switch (act) {
    case Activation::kIdentity:
      return x;
    case Activation::kRelu:
      return relu(x);
    case Activation::kTanh:
      return tanh(x);
    case Activation::kGelu:
      return gelu(x);
  }
  return x;
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Tensor& xv = x->val();
  const std::size_t n = xv.rows(), d = xv.cols();
  require(gamma->val().size() == d && beta->val().size() == d, "layer_norm: gain/bias width mismatch");
  Tensor out(n, d);
  auto xhat = std::make_shared<Tensor>(n, d);
  auto inv = std::make_shared<std::vector<double>>(n);
  const Tensor& g = gamma->val();
  const Tensor& b = beta->val();
  for (std::size_t r = 0; r < n; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += xv(r, c);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double z = xv(r, c) - mean;
      var += z * z;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv)[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (xv(r, c) - mean) * is;
      (*xhat)(r, c) = h;
      out(r, c) = g[c] * h + b[c];
    }
  }
  return make_result(std::move(out), {x, gamma, beta}, [xhat, inv](Node& self) {
    Node& x = *self.inputs[0];
    Node& gamma = *self.inputs[1];
    Node& beta = *self.inputs[2];
    const std::size_t n = self.grad.rows(), d = self.grad.cols();
    const Tensor& g = gamma.val();
    if (gamma.requires_grad || beta.requires_grad) {
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < d; ++c) {
          if (gamma.requires_grad) gamma.grad_buffer()[c] += self.grad(r, c) * (*xhat)(r, c);
          if (beta.requires_grad) beta.grad_buffer()[c] += self.grad(r, c);
        }
      }
    }
    if (!x.requires_grad) return;
    Tensor& dx = x.grad_buffer();
    const double dd = static_cast<double>(d);
    for (std::size_t r = 0; r < n; ++r) {
      double sum_dh = 0.0, sum_dh_h = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double dh = self.grad(r, c) * g[c];
        sum_dh += dh;
        sum_dh_h += dh * (*xhat)(r, c);
      }
      for (std::size_t c = 0; c < d; ++c) {
        const double dh = self.grad(r, c) * g[c];
        dx(r, c) += (*inv)[r] * (dh - sum_dh / dd - (*xhat)(r, c) * sum_dh_h / dd);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Indexing and reshaping

Var embedding(const Var& table, std::span<const int> ids) {
  const Tensor& t = table->val();
  require(!ids.empty(), "embedding: no ids");
  Tensor out(ids.size(), t.cols());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    require(ids[r] >= 0 && static_cast<std::size_t>(ids[r]) < t.rows(),
            "embedding: id " + std::to_string(ids[r]) + " outside table of " + std::to_string(t.rows()));
    std::copy_n(t.row(ids[r]).data(), t.cols(), out.row(r).data());
  }
  auto saved = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  return make_result(std::move(out), {table}, [saved](Node& self) {
    Tensor& g = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < saved->size(); ++r) {
      auto dst = g.row((*saved)[r]);
      auto src = self.grad.row(r);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: nothing to concatenate");
  const std::size_t cols = parts[0]->val().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require(p->val().cols() == cols, "concat_rows: column mismatch");
    rows += p->val().rows();
  }
  Tensor out(rows, cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p->val().values().begin(), p->val().values().end(), out.data() + offset);
    offset += p->val().size();
  }
  return make_result(std::move(out), parts, [](Node& self) {
    std::size_t offset = 0;
    for (auto& in : self.inputs) {
      const std::size_t n = in->val().size();
      if (in->requires_grad) {
        Tensor& g = in->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
      }
      offset += n;
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: nothing to concatenate");
  const std::size_t rows = parts[0]->val().rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    require(p->val().rows() == rows, "concat_cols: row mismatch");
    cols += p->val().cols();
  }
  Tensor out(rows, cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const Tensor& v = p->val();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < v.cols(); ++c) out(r, offset + c) = v(r, c);
    }
    offset += v.cols();
  }
  return make_result(std::move(out), parts, [](Node& self) {
    std::size_t offset = 0;
    for (auto& in : self.inputs) {
      const std::size_t w = in->val().cols();
      if (in->requires_grad) {
        Tensor& g = in->grad_buffer();
        for (std::size_t r = 0; r < g.rows(); ++r) {
          for (std::size_t c = 0; c < w; ++c) g(r, c) += self.grad(r, offset + c);
        }
      }
      offset += w;
    }
  });
}

Var slice_rows(const Var& x, std::size_t begin, std::size_t end) {
  const Tensor& xv = x->val();
  require(begin < end && end <= xv.rows(), "slice_rows: bad range");
  Tensor out(end - begin, xv.cols());
  std::copy(xv.data() + begin * xv.cols(), xv.data() + end * xv.cols(), out.data());
  return make_result(std::move(out), {x}, [begin](Node& self) {
    Tensor& g = self.inputs[0]->grad_buffer();
    const std::size_t off = begin * g.cols();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[off + i] += self.grad[i];
  });
}

Var slice_cols(const Var& x, std::size_t begin, std::size_t end) {
  const Tensor& xv = x->val();
  require(begin < end && end <= xv.cols(), "slice_cols: bad range");
  Tensor out(xv.rows(), end - begin);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    for (std::size_t c = begin; c < end; ++c) out(r, c - begin) = xv(r, c);
  }
  return make_result(std::move(out), {x}, [begin](Node& self) {
    Tensor& g = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < self.grad.rows(); ++r) {
      for (std::size_t c = 0; c < self.grad.cols(); ++c) g(r, begin + c) += self.grad(r, c);
    }
  });
}

Var repeat_rows(const Var& x, std::size_t factor) {
  require(factor >= 1, "repeat_rows: factor must be >= 1");
  const Tensor& xv = x->val();
  Tensor out(xv.rows() * factor, xv.cols());
  for (std::size_t r = 0; r < out.rows(); ++r) {
    std::copy_n(xv.row(r / factor).data(), xv.cols(), out.row(r).data());
  }
  return make_result(std::move(out), {x}, [factor](Node& self) {
    Tensor& g = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < self.grad.rows(); ++r) {
      auto dst = g.row(r / factor);
      auto src = self.grad.row(r);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
    }
  });
}

// ---------------------------------------------------------------------------
// Attention

Tensor attention_forward(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask,
                         std::size_t heads, std::vector<double>* probs_out) {
  const std::size_t lq = q.rows(), lk = k.rows(), d = q.cols();
  require(heads >= 1 && d % heads == 0, "attention: width not divisible by heads");
  require(k.cols() == d && v.cols() == d && v.rows() == lk, "attention: q/k/v shape mismatch");
  require(mask.rows == lq && mask.cols == lk, "attention: mask shape mismatch");
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor out(lq, d);
  std::vector<double> scores(lk);
  if (probs_out) probs_out->assign(heads * lq * lk, 0.0);
  for (std::size_t i = 0; i < lq; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < lk; ++j) any = any || mask.visible(i, j);
    require(any, "attention: query row " + std::to_string(i) + " has no visible key");
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < lk; ++j) {
        if (!mask.visible(i, j)) continue;
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += q(i, off + c) * k(j, off + c);
        s *= sc;
        scores[j] = s;
        mx = std::max(mx, s);
      }
      double total = 0.0;
      for (std::size_t j = 0; j < lk; ++j) {
        if (!mask.visible(i, j)) continue;
        scores[j] = std::exp(scores[j] - mx);
        total += scores[j];
      }
      for (std::size_t j = 0; j < lk; ++j) {
        if (!mask.visible(i, j)) continue;
        const double p = scores[j] / total;
        if (probs_out) (*probs_out)[(h * lq + i) * lk + j] = p;
        for (std::size_t c = 0; c < dh; ++c) out(i, off + c) += p * v(j, off + c);
      }
    }
  }
  return out;
}

Var attention(const Var& q, const Var& k, const Var& v, const AttentionMask& mask, std::size_t heads) {
  auto probs = std::make_shared<std::vector<double>>();
  Tensor out = attention_forward(q->val(), k->val(), v->val(), mask, heads, probs.get());
  return make_result(std::move(out), {q, k, v}, [probs, heads](Node& self) {
    Node& q = *self.inputs[0];
    Node& k = *self.inputs[1];
    Node& v = *self.inputs[2];
    const std::size_t lq = q.val().rows(), lk = k.val().rows(), d = q.val().cols();
    const std::size_t dh = d / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> dp(lk), ds(lk);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < lq; ++i) {
        const double* p = probs->data() + (h * lq + i) * lk;
        double weighted = 0.0;
        for (std::size_t j = 0; j < lk; ++j) {
          double s = 0.0;
          if (p[j] != 0.0) {
            for (std::size_t c = 0; c < dh; ++c) s += self.grad(i, off + c) * v.val()(j, off + c);
          }
          dp[j] = s;
          weighted += s * p[j];
        }
        for (std::size_t j = 0; j < lk; ++j) ds[j] = p[j] * (dp[j] - weighted) * sc;
        if (v.requires_grad) {
          Tensor& gv = v.grad_buffer();
          for (std::size_t j = 0; j < lk; ++j) {
            if (p[j] == 0.0) continue;
            for (std::size_t c = 0; c < dh; ++c) gv(j, off + c) += p[j] * self.grad(i, off + c);
          }
        }
        if (q.requires_grad) {
          Tensor& gq = q.grad_buffer();
          for (std::size_t j = 0; j < lk; ++j) {
            if (ds[j] == 0.0) continue;
            for (std::size_t c = 0; c < dh; ++c) gq(i, off + c) += ds[j] * k.val()(j, off + c);
          }
        }
        if (k.requires_grad) {
          Tensor& gk = k.grad_buffer();
          for (std::size_t j = 0; j < lk; ++j) {
            if (ds[j] == 0.0) continue;
            for (std::size_t c = 0; c < dh; ++c) gk(j, off + c) += ds[j] * q.val()(i, off + c);
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution

Var conv1d(const Var& x, const Var& w, const Var& b, std::size_t kernel, std::size_t stride) {
  const Tensor& xv = x->val();
  const Tensor& wv = w->val();
  const std::size_t t_in = xv.rows(), cin = xv.cols(), cout = wv.rows();
  require(kernel >= 1 && stride >= 1, "conv1d: kernel and stride must be >= 1");
  require(wv.cols() == kernel * cin, "conv1d: weight has " + std::to_string(wv.cols()) +
                                         " columns, expected kernel*channels = " +
                                         std::to_string(kernel * cin));
  require(b->val().size() == cout, "conv1d: bias width mismatch");
  const std::size_t pad = (kernel - 1) / 2;
  const std::size_t t_out = (t_in + stride - 1) / stride;

  auto cols = std::make_shared<Tensor>(t_out, kernel * cin);
  for (std::size_t t = 0; t < t_out; ++t) {
    for (std::size_t u = 0; u < kernel; ++u) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + u) - static_cast<std::ptrdiff_t>(pad);
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(t_in)) continue;
      for (std::size_t c = 0; c < cin; ++c) (*cols)(t, u * cin + c) = xv(static_cast<std::size_t>(src), c);
    }
  }
  Tensor out(t_out, cout);
  matmul_nt_into(*cols, wv, out);
  const Tensor& bv = b->val();
  for (std::size_t t = 0; t < t_out; ++t) {
    for (std::size_t c = 0; c < cout; ++c) out(t, c) += bv[c];
  }
  return make_result(std::move(out), {x, w, b}, [cols, kernel, stride, pad](Node& self) {
    Node& x = *self.inputs[0];
    Node& w = *self.inputs[1];
    Node& b = *self.inputs[2];
    if (w.requires_grad) matmul_tn_accumulate(self.grad, *cols, w.grad_buffer());
    if (b.requires_grad) {
      Tensor& gb = b.grad_buffer();
      for (std::size_t t = 0; t < self.grad.rows(); ++t) {
        for (std::size_t c = 0; c < self.grad.cols(); ++c) gb[c] += self.grad(t, c);
      }
    }
    if (!x.requires_grad) return;
    Tensor dcols(cols->rows(), cols->cols());
    matmul_into(self.grad, w.val(), dcols);
    Tensor& gx = x.grad_buffer();
    const std::size_t t_in = gx.rows(), cin = gx.cols();
    for (std::size_t t = 0; t < dcols.rows(); ++t) {
      for (std::size_t u = 0; u < kernel; ++u) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + u) - static_cast<std::ptrdiff_t>(pad);
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(t_in)) continue;
        for (std::size_t c = 0; c < cin; ++c) gx(static_cast<std::size_t>(src), c) += dcols(t, u * cin + c);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Losses and reductions

std::vector<double> softmax(std::span<const double> v) {
  require(!v.empty(), "softmax: empty input");
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : v) {
    require(std::isfinite(x), "softmax: non-finite input");
    mx = std::max(mx, x);
  }
  std::vector<double> out(v.size());
  double total = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    total += out[i];
  }
  for (double& x : out) x /= total;
  return out;
}

std::vector<double> log_softmax(std::span<const double> v) {
  require(!v.empty(), "log_softmax: empty input");
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : v) {
    require(std::isfinite(x), "log_softmax: non-finite input");
    mx = std::max(mx, x);
  }
  double total = 0.0;
  for (double x : v) total += std::exp(x - mx);
  const double lse = mx + std::log(total);
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] - lse;
  return out;
}

Var cross_entropy(const Var& logits, std::span<const int> targets) {
  const Tensor& lv = logits->val();
  require(targets.size() == lv.rows(), "cross_entropy: one target per row required");
  require(!targets.empty(), "cross_entropy: no targets");
  auto probs = std::make_shared<Tensor>(lv.rows(), lv.cols());
  double loss = 0.0;
  for (std::size_t r = 0; r < lv.rows(); ++r) {
    require(targets[r] >= 0 && static_cast<std::size_t>(targets[r]) < lv.cols(),
            "cross_entropy: target " + std::to_string(targets[r]) + " out of range");
    const auto lp = log_softmax(lv.row(r));
    loss -= lp[targets[r]];
    for (std::size_t c = 0; c < lv.cols(); ++c) (*probs)(r, c) = std::exp(lp[c]);
  }
  const double n = static_cast<double>(lv.rows());
  Tensor out(1, 1, loss / n);
  auto saved = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
  return make_result(std::move(out), {logits}, [probs, saved, n](Node& self) {
    Tensor& g = self.inputs[0]->grad_buffer();
    const double up = self.grad[0] / n;
    for (std::size_t r = 0; r < g.rows(); ++r) {
      for (std::size_t c = 0; c < g.cols(); ++c) g(r, c) += up * (*probs)(r, c);
      g(r, (*saved)[r]) -= up;
    }
  });
}

Var mse(const Var& a, const Var& b) {
  check_same(a->val(), b->val(), "mse");
  const Tensor& av = a->val();
  const Tensor& bv = b->val();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - bv[i];
    s += d * d;
  }
  const double n = static_cast<double>(av.size());
  return make_result(Tensor(1, 1, s / n), {a, b}, [n](Node& self) {
    Node& a = *self.inputs[0];
    Node& b = *self.inputs[1];
    const double up = 2.0 * self.grad[0] / n;
    for (std::size_t i = 0; i < a.val().size(); ++i) {
      const double d = up * (a.val()[i] - b.val()[i]);
      if (a.requires_grad) a.grad_buffer()[i] += d;
      if (b.requires_grad) b.grad_buffer()[i] -= d;
    }
  });
}

Var sum_all(const Var& x) {
  double s = 0.0;
  for (double v : x->val().values()) s += v;
  return make_result(Tensor(1, 1, s), {x}, [](Node& self) {
    Tensor& g = self.inputs[0]->grad_buffer();
    for (double& v : g.values()) v += self.grad[0];
  });
}

Var mean_all(const Var& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x->val().size())); }

Var detach(const Var& x) {
  auto n = std::make_shared<Node>();
  n->value = x->val();
  return n;
}

}  // namespace polyspeech
