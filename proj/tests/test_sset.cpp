#include <cmath>

#include "doctest.h"
#include "polyspeech/error.hpp"
#include "polyspeech/sset.hpp"

using namespace polyspeech;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Tensor t(r, c);
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

std::vector<Codebook> random_books(int q, int k, int dim, Rng& rng) {
  std::vector<Codebook> books;
  for (int l = 0; l < q; ++l) books.emplace_back(l, random_tensor(k, dim, rng, 1.0 / (l + 1)));
  return books;
}

SsetConfig small_config() {
  SsetConfig cfg;
  cfg.frame_dim = 4;
  cfg.latent_dim = 3;
  cfg.channels = 6;
  cfg.codebook_size = 8;
  cfg.num_rvq_layers = 2;
  return cfg;
}

std::vector<FrameSequence> random_batch(int n, int dim, Rng& rng) {
  std::vector<FrameSequence> out;
  for (int i = 0; i < n; ++i) out.push_back(random_tensor(4 + rng.uniform_int(5), dim, rng));
  return out;
}

}  // namespace

TEST_CASE("identity codec encodes to its input") {
  SsetModel m = SsetModel::identity(3);
  Rng rng(1, "x");
  Tensor x = random_tensor(5, 3, rng);
  CHECK(m.encode(x).values() == x.values());
  CHECK(m.decode_latents(x).values() == x.values());
}

TEST_CASE("latent and token lengths follow ceil(T / s)") {
  for (int s : {1, 2, 4}) {
    SsetConfig cfg = small_config();
    cfg.downsample_factor = s;
    SsetModel m(cfg);
    Rng rng(2, "len");
    std::vector<FrameSequence> sample = random_batch(10, cfg.frame_dim, rng);
    init_codebooks(m, sample, 3);
    for (int t = 1; t <= 9; ++t) {
      Tensor x = random_tensor(t, cfg.frame_dim, rng);
      std::size_t n = (t + s - 1) / s;
      CHECK(m.encode(x).rows() == n);
      CHECK(m.encode(x).cols() == std::size_t(cfg.latent_dim));
      SpeechTokenSeq tok = m.tokenize(x);
      CHECK(tok.codes.size() == n);
      CHECK(m.decode(tok).rows() == n * s);
      CHECK(m.reconstruct(x).rows() == std::size_t(t));
    }
  }
}

TEST_CASE("encode is bitwise stable and rejects wrong frame width") {
  SsetModel a(small_config());
  SsetModel b(small_config());
  Rng rng(4, "x");
  Tensor x = random_tensor(7, 4, rng);
  CHECK(a.encode(x).values() == b.encode(x).values());
  CHECK(a.encode(x).values() == a.encode(x).values());
  CHECK_THROWS_AS(a.encode(random_tensor(7, 5, rng)), Error);
}

TEST_CASE("rvq examples") {
  Tensor v(3, 2);
  v(1, 0) = 1.0;
  v(1, 1) = -2.0;
  v(2, 0) = 0.5;
  v(2, 1) = 0.5;
  std::vector<Codebook> one{Codebook(0, v)};
  std::vector<double> latent{1.0, -2.0};
  RvqResult r = rvq_quantize(latent, one);
  CHECK(r.codes == std::vector<int>{1});
  CHECK(r.residual_norms.back() == 0.0);

  std::vector<Codebook> scalar{Codebook(0, Tensor({2, 1}, {0.0, 1.0}))};
  r = rvq_quantize(std::vector<double>{0.4}, scalar);
  CHECK(r.codes == std::vector<int>{0});
  CHECK(r.quantized == std::vector<double>{0.0});
  CHECK(r.residual_norms.back() == doctest::Approx(0.4));
}

TEST_CASE("rvq residual norms never increase and the decomposition is exact") {
  Rng rng(5, "rvq");
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Codebook> books = random_books(4, 8, 5, rng);
    Tensor latent = random_tensor(1, 5, rng);
    RvqResult r = rvq_quantize(latent.row(0), books);
    REQUIRE(r.residual_norms.size() == 5);
    for (std::size_t q = 1; q < r.residual_norms.size(); ++q) CHECK(r.residual_norms[q] <= r.residual_norms[q - 1]);
    std::vector<double> sum(5, 0.0);
    for (std::size_t q = 0; q < books.size(); ++q) {
      for (int i = 0; i < 5; ++i) sum[i] += books[q].vectors(r.codes[q], i);
    }
    for (int i = 0; i < 5; ++i) {
      CHECK(sum[i] == r.quantized[i]);
      CHECK(std::abs(r.quantized[i] + r.residual[i] - latent[i]) <= 1e-12);
    }
    std::vector<Codebook> fewer(books.begin(), books.begin() + 3);
    CHECK(r.residual_norms.back() <= rvq_quantize(latent.row(0), fewer).residual_norms.back());
  }
}

TEST_CASE("tokenize needs codebooks and picks the nearest layer-1 code") {
  SsetModel m = SsetModel::identity(2);
  CHECK_THROWS_AS(m.tokenize(Tensor(1, 2, 0.5)), Error);
  m.set_codebooks({Codebook(0, Tensor({2, 2}, {0.0, 0.0, 1.0, 1.0}))});
  CHECK(m.tokenize(Tensor({1, 2}, {0.9, 0.8})).codes == std::vector<int>{1});
}

TEST_CASE("decode examples") {
  SsetConfig cfg = small_config();
  SsetModel m(cfg);
  Rng rng(6, "dec");
  init_codebooks(m, random_batch(10, cfg.frame_dim, rng), 1);
  CHECK(m.decode(std::vector<int>{1, 2, 3}).rows() == 6);
  CHECK_THROWS_AS(m.decode(std::vector<int>{cfg.codebook_size}), Error);
  CHECK_THROWS_AS(m.decode(std::vector<int>{-1}), Error);

  SsetModel zero(cfg);
  for (auto& [name, p] : zero.params()) {
    if (name.ends_with(".bias")) p.value.fill(0.0);
  }
  std::vector<Codebook> books;
  for (int q = 0; q < cfg.num_rvq_layers; ++q) books.emplace_back(q, Tensor(cfg.codebook_size, cfg.latent_dim));
  zero.set_codebooks(books);
  const FrameSequence out = zero.decode(std::vector<int>{0, 3, 5});
  for (double v : out.values()) CHECK(v == 0.0);
}

TEST_CASE("identity codec reconstruction error is the layer-1 quantisation error") {
  SsetModel m = SsetModel::identity(2);
  Tensor book({2, 2}, {0.0, 0.0, 1.0, 1.0});
  m.set_codebooks({Codebook(0, book)});
  Tensor x({3, 2}, {0.9, 0.8, 0.1, 0.3, 1.2, 0.7});
  Tensor y = m.decode(m.tokenize(x));
  double recon = 0.0, quant = 0.0;
  for (std::size_t t = 0; t < x.rows(); ++t) {
    recon += squared_distance(x.row(t), y.row(t));
    quant += std::pow(rvq_quantize(x.row(t), m.codebooks()).residual_norms.back(), 2);
  }
  CHECK(recon == doctest::Approx(quant).epsilon(1e-14));
}

TEST_CASE("tokenize of decoded codes reproduces them for a separated codebook") {
  SsetModel m = SsetModel::identity(3, 6);
  Rng rng(7, "sep");
  Tensor book(6, 3);
  for (std::size_t c = 1; c < 6; ++c) {
    for (std::size_t i = 0; i < 3; ++i) book(c, i) = 4.0 * rng.normal();
  }
  m.set_codebooks({Codebook(0, book)});
  double min_sep = 1e300;
  for (std::size_t a = 0; a < 6; ++a) {
    for (std::size_t b = a + 1; b < 6; ++b) min_sep = std::min(min_sep, std::sqrt(squared_distance(book.row(a), book.row(b))));
  }
  REQUIRE(min_sep > 0.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> codes;
    for (int i = 0; i < 5; ++i) codes.push_back(int(rng.uniform_int(6)));
    CHECK(m.tokenize(m.decode(codes)).codes == codes);
  }
}

TEST_CASE("commitment weight zero makes the total the reconstruction loss") {
  SsetConfig cfg = small_config();
  cfg.commitment_weight = 0.0;
  SsetModel m(cfg);
  Rng rng(8, "b");
  std::vector<FrameSequence> batch = random_batch(4, cfg.frame_dim, rng);
  init_codebooks(m, random_batch(20, cfg.frame_dim, rng), 1);
  Graph g;
  SsetLosses parts;
  sset_loss(m, g, batch, true, &parts);
  CHECK(parts.total == parts.recon);
  CHECK(parts.commit > 0.0);
}

TEST_CASE("identity codec with a perfect codebook reconstructs exactly") {
  SsetModel m = SsetModel::identity(2, 3);
  m.set_codebooks({Codebook(0, Tensor({3, 2}, {0.0, 0.0, 1.0, 2.0, -1.0, 0.5}))});
  std::vector<FrameSequence> batch{Tensor({3, 2}, {1.0, 2.0, -1.0, 0.5, 0.0, 0.0})};
  Graph g;
  SsetLosses parts;
  sset_loss(m, g, batch, true, &parts);
  CHECK(parts.recon == 0.0);
  CHECK_THROWS_AS(sset_loss(m, g, std::span<const FrameSequence>{}, true), Error);
}

TEST_CASE("sset training lowers reconstruction loss on a fixed batch") {
  SsetConfig cfg = small_config();
  SsetModel m(cfg);
  Rng rng(9, "train");
  std::vector<FrameSequence> batch = random_batch(32, cfg.frame_dim, rng);
  init_codebooks(m, batch, 1);
  AdamConfig ac;
  ac.peak_lr = 5e-3;
  ac.warmup_steps = 20;
  AdamState opt(ac);
  Rng step_rng(9, "steps");
  const double first = sset_train_step(m, opt, batch, step_rng).recon;
  double last = first;
  for (int i = 0; i < 199; ++i) last = sset_train_step(m, opt, batch, step_rng).recon;
  CHECK(last < first);
}

TEST_CASE("ema update leaves unassigned codes unchanged") {
  SsetModel m = SsetModel::identity(2, 4);
  Tensor book({4, 2}, {0.0, 0.0, 1.0, 1.0, 5.0, 5.0, -7.0, 3.0});
  m.set_codebooks({Codebook(0, book)});
  std::vector<FrameSequence> batch{Tensor({2, 2}, {1.1, 0.9, 0.8, 1.2})};
  AdamState opt;
  Rng rng(1, "ema");
  const Tensor before = m.codebooks()[0].vectors;
  sset_train_step(m, opt, batch, rng);
  const Tensor& after = m.codebooks()[0].vectors;
  for (std::size_t c : {0u, 2u, 3u}) {
    for (std::size_t i = 0; i < 2; ++i) CHECK(after(c, i) == before(c, i));
  }
  CHECK(after(1, 0) != before(1, 0));
  CHECK(m.codebooks()[0].usage[1] == 2.0);
}

TEST_CASE("init_codebooks finds two clusters and is deterministic") {
  SsetModel m = SsetModel::identity(1, 2);
  std::vector<FrameSequence> sample;
  for (int i = 0; i < 20; ++i) sample.push_back(Tensor({2, 1}, {0.0, 10.0}));
  init_codebooks(m, sample, 5);
  CHECK(m.codebooks()[0].vectors(0, 0) == 0.0);
  CHECK(m.codebooks()[0].vectors(1, 0) == doctest::Approx(10.0));

  SsetConfig cfg = small_config();
  SsetModel a(cfg), b(cfg);
  Rng rng(10, "init");
  std::vector<FrameSequence> batch = random_batch(10, cfg.frame_dim, rng);
  init_codebooks(a, batch, 7);
  init_codebooks(b, batch, 7);
  for (int q = 0; q < cfg.num_rvq_layers; ++q) CHECK(a.codebooks()[q].vectors.values() == b.codebooks()[q].vectors.values());

  std::vector<FrameSequence> tiny{random_tensor(2, cfg.frame_dim, rng)};
  CHECK_THROWS_AS(init_codebooks(a, tiny, 1), Error);
}

TEST_CASE("seeded codebooks quantise better than random ones") {
  SsetConfig cfg = small_config();
  SsetModel seeded(cfg), random(cfg);
  Rng rng(11, "cmp");
  std::vector<FrameSequence> batch = random_batch(30, cfg.frame_dim, rng);
  init_codebooks(seeded, batch, 1);
  std::vector<Codebook> books;
  for (int q = 0; q < cfg.num_rvq_layers; ++q) books.emplace_back(q, random_tensor(cfg.codebook_size, cfg.latent_dim, rng));
  random.set_codebooks(books);
  auto error = [&](const SsetModel& m) {
    double e = 0.0;
    for (const auto& f : batch) {
      Tensor z = m.encode(f);
      for (std::size_t t = 0; t < z.rows(); ++t) e += std::pow(rvq_quantize(z.row(t), m.codebooks()).residual_norms.back(), 2);
    }
    return e;
  };
  CHECK(error(seeded) <= error(random));
}

TEST_CASE("sset loss passes gradcheck") {
  SsetConfig cfg = small_config();
  cfg.channels = 3;
  SsetModel m(cfg);
  Rng rng(12, "gc");
  std::vector<FrameSequence> batch = random_batch(2, cfg.frame_dim, rng);
  init_codebooks(m, random_batch(6, cfg.frame_dim, rng), 1);
  std::vector<Parameter*> params;
  for (auto& [name, p] : m.params()) params.push_back(&p);
  double err = finite_diff_gradcheck([&](Graph& g) { return sset_loss(m, g, batch, false); }, params, 1e-5);
  CHECK(err < 1e-4);
}
