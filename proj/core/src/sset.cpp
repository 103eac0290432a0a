#include "polyspeech/sset.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "polyspeech/error.hpp"

namespace polyspeech {
namespace {

constexpr int kLloydRounds = 10;

Tensor random_tensor(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Tensor t(rows, cols);
  for (double& v : t.values()) v = stddev * rng.normal();
  return t;
}

/// Nearest code (ties → lower index).
int nearest_code(std::span<const double> x, const Tensor& vectors) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < vectors.rows(); ++k) {
    const double d = squared_distance(x, vectors.row(k));
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(k);
    }
  }
  return best;
}

/// k-means++ seeding with code 0 pinned at the origin, then Lloyd refinement.
Tensor kmeans_codebook(const std::vector<std::vector<double>>& points, std::size_t k, std::size_t dim, Rng& rng) {
  Tensor centers(k, dim);
  std::vector<double> d2(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) d2[i] = dot(points[i], points[i]);
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (double v : d2) total += v;
    std::size_t pick = 0;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      for (pick = 0; pick + 1 < points.size(); ++pick) {
        u -= d2[pick];
        if (u < 0.0) break;
      }
    } else {
      pick = rng.uniform_int(points.size());
    }
    std::copy(points[pick].begin(), points[pick].end(), centers.row(c).begin());
    for (std::size_t i = 0; i < points.size(); ++i) {
      d2[i] = std::min(d2[i], squared_distance(points[i], centers.row(c)));
    }
  }
  std::vector<int> assign(points.size());
  for (int round = 0; round < kLloydRounds; ++round) {
    for (std::size_t i = 0; i < points.size(); ++i) assign[i] = nearest_code(points[i], centers);
    Tensor sums(k, dim);
    std::vector<double> counts(k, 0.0);
    for (std::size_t i = 0; i < points.size(); ++i) {
      counts[assign[i]] += 1.0;
      auto row = sums.row(assign[i]);
      for (std::size_t j = 0; j < dim; ++j) row[j] += points[i][j];
    }
    for (std::size_t c = 1; c < k; ++c) {
      if (counts[c] == 0.0) continue;
      for (std::size_t j = 0; j < dim; ++j) centers(c, j) = sums(c, j) / counts[c];
    }
  }
  return centers;
}

}  // namespace

void validate(const SsetConfig& cfg) {
  require(cfg.frame_dim >= 1 && cfg.latent_dim >= 1 && cfg.channels >= 1, "SsetConfig: dims must be >= 1");
  require(cfg.downsample_factor >= 1, "SsetConfig: downsample_factor must be >= 1");
  require(cfg.codebook_size >= 2, "SsetConfig: codebook_size must be >= 2");
  require(cfg.num_rvq_layers >= 1, "SsetConfig: num_rvq_layers must be >= 1");
  require(cfg.commitment_weight >= 0.0, "SsetConfig: commitment_weight must be >= 0");
  require(cfg.kernel >= 1 && cfg.kernel % 2 == 1, "SsetConfig: kernel must be odd");
  require(cfg.ema_decay >= 0.0 && cfg.ema_decay < 1.0, "SsetConfig: ema_decay must be in [0,1)");
}

Codebook::Codebook(int layer_index, Tensor code_vectors) : layer(layer_index), vectors(std::move(code_vectors)) {
  require(vectors.rows() >= 2, "Codebook: need at least two codes");
  require(vectors.all_finite(), "Codebook: non-finite code vector");
  for (double& v : vectors.row(0)) v = 0.0;
  usage.assign(vectors.rows(), 0.0);
  ema_count.assign(vectors.rows(), 1.0);
  ema_sum = vectors;
  idle_steps.assign(vectors.rows(), 0.0);
}

RvqResult rvq_quantize(std::span<const double> latent, std::span<const Codebook> codebooks) {
  require(!codebooks.empty(), "rvq_quantize: no codebooks");
  RvqResult out;
  out.residual.assign(latent.begin(), latent.end());
  out.quantized.assign(latent.size(), 0.0);
  out.residual_norms.push_back(l2_norm(out.residual));
  for (const Codebook& book : codebooks) {
    require(book.dim() == latent.size(), "rvq_quantize: codebook dim mismatch");
    const int code = nearest_code(out.residual, book.vectors);
    out.codes.push_back(code);
    const auto c = book.vectors.row(code);
    for (std::size_t i = 0; i < latent.size(); ++i) {
      out.quantized[i] += c[i];
      out.residual[i] -= c[i];
    }
    out.residual_norms.push_back(l2_norm(out.residual));
  }
  return out;
}

// ---------------------------------------------------------------------------

SsetModel::SsetModel(const SsetConfig& cfg) : cfg_(cfg) {
  validate(cfg);
  Rng rng(cfg.seed, "sset.init");
  const auto k = static_cast<std::size_t>(cfg.kernel);
  auto conv = [&](const std::string& name, std::size_t cin, std::size_t cout) {
    params_.add(name + ".weight", random_tensor(cout, k * cin, 1.0 / std::sqrt(static_cast<double>(k * cin)), rng));
    params_.add(name + ".bias", Tensor({cout}, std::vector<double>(cout, 0.0)));
  };
  conv("encoder.conv0", cfg.frame_dim, cfg.channels);
  conv("encoder.conv1", cfg.channels, cfg.latent_dim);
  conv("decoder.conv0", cfg.latent_dim, cfg.channels);
  conv("decoder.conv1", cfg.channels, cfg.frame_dim);
}

SsetModel SsetModel::identity(int frame_dim, int codebook_size, int num_rvq_layers) {
  SsetConfig cfg;
  cfg.frame_dim = cfg.latent_dim = cfg.channels = frame_dim;
  cfg.downsample_factor = 1;
  cfg.codebook_size = codebook_size;
  cfg.num_rvq_layers = num_rvq_layers;
  cfg.activation = Activation::kIdentity;
  SsetModel model(cfg);
  const std::size_t d = static_cast<std::size_t>(frame_dim);
  const std::size_t centre = static_cast<std::size_t>(cfg.kernel / 2);
  for (auto& [name, p] : model.params_) {
    p.value.fill(0.0);
    if (name.ends_with(".weight")) {
      for (std::size_t c = 0; c < d; ++c) p.value(c, centre * d + c) = 1.0;
    }
  }
  return model;
}

void SsetModel::set_codebooks(std::vector<Codebook> books) {
  require(static_cast<int>(books.size()) == cfg_.num_rvq_layers, "set_codebooks: wrong number of layers");
  for (std::size_t q = 0; q < books.size(); ++q) {
    require(static_cast<int>(books[q].size()) == cfg_.codebook_size, "set_codebooks: wrong codebook size");
    require(static_cast<int>(books[q].dim()) == cfg_.latent_dim, "set_codebooks: wrong code dimension");
    books[q].layer = static_cast<int>(q);
  }
  codebooks_ = std::move(books);
  codebooks_ready_ = true;
}

std::pair<int, int> SsetModel::strides() const {
  const int s = cfg_.downsample_factor;
  int first = 1;
  for (int p = 2; p <= s; ++p) {
    if (s % p == 0) {
      first = p;
      break;
    }
  }
  return {first, s / first};
}

Var SsetModel::encode(Graph& g, const Var& frames) const {
  require(static_cast<int>(frames->val().cols()) == cfg_.frame_dim,
          "encode: frame dim " + std::to_string(frames->val().cols()) + " != " + std::to_string(cfg_.frame_dim));
  const auto [s1, s2] = strides();
  const auto k = static_cast<std::size_t>(cfg_.kernel);
  Var h = conv1d(frames, g.param(params_.get("encoder.conv0.weight")), g.param(params_.get("encoder.conv0.bias")),
                 k, static_cast<std::size_t>(s1));
  h = activate(h, cfg_.activation);
  h = conv1d(h, g.param(params_.get("encoder.conv1.weight")), g.param(params_.get("encoder.conv1.bias")), k,
             static_cast<std::size_t>(s2));
  return activate(h, cfg_.activation);
}

Var SsetModel::decode(Graph& g, const Var& latents) const {
  require(static_cast<int>(latents->val().cols()) == cfg_.latent_dim, "decode: latent dim mismatch");
  const auto [s1, s2] = strides();
  const auto k = static_cast<std::size_t>(cfg_.kernel);
  Var h = repeat_rows(latents, static_cast<std::size_t>(s2));
  h = conv1d(h, g.param(params_.get("decoder.conv0.weight")), g.param(params_.get("decoder.conv0.bias")), k, 1);
  h = activate(h, cfg_.activation);
  h = repeat_rows(h, static_cast<std::size_t>(s1));
  return conv1d(h, g.param(params_.get("decoder.conv1.weight")), g.param(params_.get("decoder.conv1.bias")), k, 1);
}

Tensor SsetModel::encode(const FrameSequence& frames) const {
  require(frames.rows() >= 1, "encode: empty frame sequence");
  Graph g(false);
  return encode(g, g.constant(frames))->val();
}

FrameSequence SsetModel::decode_latents(const Tensor& latents) const {
  Graph g(false);
  return decode(g, g.constant(latents))->val();
}

SpeechTokenSeq SsetModel::tokenize(const FrameSequence& frames) const {
  if (!codebooks_ready_) {
    throw Error(ErrorKind::kDependency, "tokenize: codec has neither trained nor explicitly initialised codebooks");
  }
  const Tensor latents = encode(frames);
  SpeechTokenSeq out;
  out.frame_count = frames.rows();
  out.downsample_factor = cfg_.downsample_factor;
  for (std::size_t t = 0; t < latents.rows(); ++t) {
    out.codes.push_back(nearest_code(latents.row(t), codebooks_[0].vectors));
  }
  return out;
}

FrameSequence SsetModel::decode(std::span<const int> codes) const {
  require(codebooks_ready_, "decode: codebooks not initialised");
  require(!codes.empty(), "decode: no codes");
  const Tensor& book = codebooks_[0].vectors;
  Tensor latents(codes.size(), book.cols());
  for (std::size_t t = 0; t < codes.size(); ++t) {
    require(codes[t] >= 0 && static_cast<std::size_t>(codes[t]) < book.rows(),
            "decode: code " + std::to_string(codes[t]) + " out of range");
    std::copy_n(book.row(codes[t]).data(), book.cols(), latents.row(t).data());
  }
  return decode_latents(latents);
}

FrameSequence SsetModel::decode(const SpeechTokenSeq& tokens) const { return decode(tokens.codes); }

FrameSequence SsetModel::reconstruct(const FrameSequence& frames) const {
  require(codebooks_ready_, "reconstruct: codebooks not initialised");
  Tensor latents = encode(frames);
  for (std::size_t t = 0; t < latents.rows(); ++t) {
    const auto q = rvq_quantize(latents.row(t), codebooks_);
    std::copy(q.quantized.begin(), q.quantized.end(), latents.row(t).begin());
  }
  const Tensor full = decode_latents(latents);
  Tensor out(frames.rows(), frames.cols());
  std::copy_n(full.data(), out.size(), out.data());
  return out;
}

// ---------------------------------------------------------------------------

void init_codebooks(SsetModel& model, std::span<const FrameSequence> sample, std::uint64_t seed) {
  const auto& cfg = model.config();
  std::vector<std::vector<double>> points;
  for (const auto& frames : sample) {
    const Tensor z = model.encode(frames);
    for (std::size_t t = 0; t < z.rows(); ++t) points.emplace_back(z.row(t).begin(), z.row(t).end());
  }
  require(static_cast<int>(points.size()) >= cfg.codebook_size,
          "init_codebooks: need at least K = " + std::to_string(cfg.codebook_size) + " latents, got " +
              std::to_string(points.size()));
  Rng rng(seed, "sset.codebook_init");
  std::vector<Codebook> books;
  for (int q = 0; q < cfg.num_rvq_layers; ++q) {
    Rng layer_rng = rng.split(static_cast<std::uint64_t>(q));
    Codebook book(q, kmeans_codebook(points, cfg.codebook_size, cfg.latent_dim, layer_rng));
    for (auto& p : points) {
      const int code = nearest_code(p, book.vectors);
      const auto c = book.vectors.row(code);
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= c[i];
    }
    books.push_back(std::move(book));
  }
  model.set_codebooks(std::move(books));
}

namespace {

struct Assignment {
  std::vector<std::vector<double>> inputs;  // per layer: the residual quantized
  std::vector<int> codes;                   // per layer
};

}  // namespace

static Var sset_loss_impl(const SsetModel& model, Graph& g, std::span<const FrameSequence> batch,
                          bool straight_through, SsetLosses* parts, std::vector<Assignment>* assignments) {
  require(!batch.empty(), "sset loss: empty batch");
  require(model.codebooks_ready(), "sset loss: codebooks not initialised");
  const auto& cfg = model.config();
  double total_frames = 0.0, total_latents = 0.0;
  for (const auto& f : batch) {
    total_frames += static_cast<double>(f.size());
    total_latents += static_cast<double>(((f.rows() + cfg.downsample_factor - 1) / cfg.downsample_factor) *
                                         cfg.latent_dim);
  }
  std::vector<Var> recon_terms, commit_terms;
  for (const auto& frames : batch) {
    Var x = g.constant(frames);
    Var z = model.encode(g, x);
    const Tensor& zv = z->val();
    Tensor q(zv.rows(), zv.cols());
    for (std::size_t t = 0; t < zv.rows(); ++t) {
      const auto r = rvq_quantize(zv.row(t), model.codebooks());
      std::copy(r.quantized.begin(), r.quantized.end(), q.row(t).begin());
      if (assignments) {
        Assignment a;
        std::vector<double> residual(zv.row(t).begin(), zv.row(t).end());
        for (std::size_t layer = 0; layer < r.codes.size(); ++layer) {
          a.inputs.push_back(residual);
          const auto c = model.codebooks()[layer].vectors.row(r.codes[layer]);
          for (std::size_t i = 0; i < residual.size(); ++i) residual[i] -= c[i];
        }
        a.codes = r.codes;
        assignments->push_back(std::move(a));
      }
    }
    Var decoder_in;
    if (straight_through) {
      Tensor delta = q;
      for (std::size_t i = 0; i < delta.size(); ++i) delta[i] -= zv[i];
      decoder_in = add(z, g.constant(std::move(delta)));
    } else {
      decoder_in = g.constant(q);
    }
    Var recon = slice_rows(model.decode(g, decoder_in), 0, frames.rows());
    recon_terms.push_back(scale(mse(recon, x), static_cast<double>(frames.size()) / total_frames));
    commit_terms.push_back(scale(mse(z, g.constant(q)), static_cast<double>(zv.size()) / total_latents));
  }
  Var recon_loss = recon_terms.size() == 1 ? recon_terms[0] : sum_all(concat_rows(recon_terms));
  Var commit_loss = commit_terms.size() == 1 ? commit_terms[0] : sum_all(concat_rows(commit_terms));
  Var total = cfg.commitment_weight == 0.0 ? recon_loss : add(recon_loss, scale(commit_loss, cfg.commitment_weight));
  if (parts) {
    parts->recon = recon_loss->val()[0];
    parts->commit = commit_loss->val()[0];
    parts->total = total->val()[0];
  }
  return total;
}

Var sset_loss(const SsetModel& model, Graph& g, std::span<const FrameSequence> batch, bool straight_through,
              SsetLosses* parts) {
  return sset_loss_impl(model, g, batch, straight_through, parts, nullptr);
}

SsetLosses sset_train_step(SsetModel& model, AdamState& opt, std::span<const FrameSequence> batch, Rng& rng) {
  const auto& cfg = model.config();
  SsetLosses parts;
  std::vector<Assignment> assignments;
  Graph g;
  Var loss = sset_loss_impl(model, g, batch, true, &parts, &assignments);
  if (!std::isfinite(parts.total)) throw Error(ErrorKind::kNumeric, "sset_train_step: non-finite loss");
  g.backward(loss);
  adam_update(opt, model.params(), g.gradients());

  // EMA codebook update over the assignments made before the step.
  const double decay = cfg.ema_decay;
  for (std::size_t layer = 0; layer < model.codebooks().size(); ++layer) {
    Codebook& book = model.codebooks()[layer];
    const std::size_t k = book.size(), dim = book.dim();
    std::vector<double> counts(k, 0.0);
    Tensor sums(k, dim);
    for (const auto& a : assignments) {
      const int code = a.codes[layer];
      counts[code] += 1.0;
      auto row = sums.row(code);
      for (std::size_t i = 0; i < dim; ++i) row[i] += a.inputs[layer][i];
    }
    for (std::size_t c = 0; c < k; ++c) {
      book.usage[c] += counts[c];
      if (c == 0) continue;
      if (counts[c] > 0.0) {
        book.idle_steps[c] = 0.0;
        book.ema_count[c] = decay * book.ema_count[c] + (1.0 - decay) * counts[c];
        for (std::size_t i = 0; i < dim; ++i) {
          book.ema_sum(c, i) = decay * book.ema_sum(c, i) + (1.0 - decay) * sums(c, i);
          book.vectors(c, i) = book.ema_sum(c, i) / book.ema_count[c];
        }
      } else if (++book.idle_steps[c] >= cfg.dead_code_steps && !assignments.empty()) {
        const auto& pick = assignments[rng.uniform_int(assignments.size())].inputs[layer];
        for (std::size_t i = 0; i < dim; ++i) book.vectors(c, i) = book.ema_sum(c, i) = pick[i];
        book.ema_count[c] = 1.0;
        book.idle_steps[c] = 0.0;
      }
    }
  }
  return parts;
}

double reconstruction_mse(const SsetModel& model, std::span<const FrameSequence> frames) {
  double sq = 0.0, n = 0.0;
  for (const auto& f : frames) {
    const auto r = model.reconstruct(f);
    sq += squared_distance(r.values(), f.values());
    n += static_cast<double>(f.size());
  }
  return sq / n;
}

}  // namespace polyspeech
