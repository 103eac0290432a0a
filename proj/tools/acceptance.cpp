#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "polyspeech/error.hpp"
#include "polyspeech/experiment.hpp"

using namespace polyspeech;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void note(const std::string& s) { std::cerr << "  " << s << std::endl; }

fs::path fresh_dir(const fs::path& p) {
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// --- recipes ----------------------------------------------------------------

/// Default world and corpus (sigma = 0.05 of the minimum separation, 2000
/// training utterances) with the 2-layer, 4-head, d=64 LM.
ExperimentConfig base_config(const fs::path& out, std::uint64_t seed) {
  ExperimentConfig cfg;
  cfg.seed = seed;
  cfg.out_dir = out.string();
  cfg.train.max_updates = 1000;
  cfg.train.validate_every = 100;
  cfg.train.adam.peak_lr = 2e-3;
  cfg.train.adam.warmup_steps = 50;
  cfg.train.max_validation_examples = 100;
  return cfg;
}

ExperimentConfig tts_config(const fs::path& out, std::uint64_t seed) {
  ExperimentConfig cfg = base_config(out, seed);
  cfg.tasks = {TaskKind::kTts};
  cfg.corpus.train_size = 8000;
  cfg.sset.codebook_size = 32;
  cfg.sset.kernel = 1;
  cfg.train.max_updates = 6000;
  cfg.train.validate_every = 250;
  return cfg;
}

struct CellResult {
  double metric = 0.0;  // ASR CER, LID/GID accuracy
  StageResult stage;
};

/// Trains one LM in its own directory over shared manifests and evaluates
/// `task` on the test split with the best checkpoint.
CellResult run_lm_cell(ExperimentConfig cfg, const fs::path& dir, TaskKind task, const TrainHooks& hooks = {}) {
  const Layout shared(cfg);
  cfg.manifests_dir = fs::absolute(shared.manifests()).string();
  cfg.out_dir = dir.string();
  CellResult r;
  r.stage = train_lm(cfg, false, hooks);
  InferOptions opts;
  opts.task = task;
  opts.input_manifest = shared.manifest("test");
  opts.checkpoint = r.stage.best_checkpoint;
  const auto reports = evaluate(cfg, task, infer(cfg, opts), opts.input_manifest);
  r.metric = reports.front().value;
  return r;
}

double test_cer(const MultiModalLm& model, const std::vector<RawExample>& test, const ExperimentConfig& cfg) {
  std::vector<std::vector<int>> hyps, refs;
  for (const auto& ex : test) {
    hyps.push_back(recognize(model, ex, TaskKind::kAsr, cfg));
    refs.push_back(ex.text);
  }
  return corpus_cer(hyps, refs).value();
}

// --- 1 ----------------------------------------------------------------------

Outcome gradient_integrity() {
  Stopwatch sw;
  bool ok = true;
  std::string detail;
  for (const auto& r : gradcheck_all(1)) {
    ok &= r.max_relative_error < 1e-4;
    detail += fmt("%s %.2e; ", r.name.c_str(), r.max_relative_error);
  }
  const double t = sw.seconds();
  return {ok && t < 120.0, detail + fmt("%.1f s (limit 120 s)", t)};
}

// --- 2 ----------------------------------------------------------------------

Outcome rvq_properties() {
  Stopwatch sw;
  Rng rng(2, "acceptance.rvq");
  const int dim = 8, layers = 6, trials = 10000;
  double worst_decomposition = 0.0;
  std::size_t monotone_violations = 0, degrade_violations = 0;
  std::vector<std::vector<Codebook>> sets;
  for (int s = 0; s < 10; ++s) {
    std::vector<Codebook> books;
    for (int l = 0; l < layers; ++l) {
      const std::size_t k = 2 + rng.uniform_int(15);
      Tensor v(k, dim);
      const double scale = std::pow(0.6, l);
      for (double& x : v.values()) x = scale * rng.normal();
      books.emplace_back(l, v);
    }
    sets.push_back(std::move(books));
  }
  for (int t = 0; t < trials; ++t) {
    const auto& books = sets[t % sets.size()];
    std::vector<double> latent(dim);
    for (double& x : latent) x = 1.5 * rng.normal();
    const RvqResult r = rvq_quantize(latent, books);
    for (std::size_t i = 1; i < r.residual_norms.size(); ++i) {
      monotone_violations += r.residual_norms[i] > r.residual_norms[i - 1];
    }
    // latent = Σ code vectors + residual, rebuilt from the code indices.
    for (int d = 0; d < dim; ++d) {
      double sum = r.residual[d];
      for (int l = 0; l < layers; ++l) sum += books[l].vectors(r.codes[l], d);
      worst_decomposition = std::max(worst_decomposition, std::abs(sum - latent[d]));
    }
    double previous = INFINITY;
    for (int l = 1; l <= layers; ++l) {
      const RvqResult prefix = rvq_quantize(latent, std::span(books).first(l));
      double err = 0.0;
      for (double x : prefix.residual) err += x * x;
      degrade_violations += err > previous;
      previous = err;
    }
  }
  const double t = sw.seconds();
  const bool ok = monotone_violations == 0 && degrade_violations == 0 && worst_decomposition <= 1e-12 && t < 30.0;
  return {ok, fmt("%d latents: %zu monotonicity violations, max decomposition error %.1e, %zu layer-addition "
                  "degradations; %.1f s (limit 30 s)",
                  trials, monotone_violations, worst_decomposition, degrade_violations, t)};
}

// --- 3 ----------------------------------------------------------------------

SequenceElement perturbed(const SequenceElement& e, const Vocabulary& vocab, Rng& rng) {
  SequenceElement out = e;
  switch (e.kind) {
    case ElementKind::kTextToken:
      out.ids[0] = (e.ids[0] + 1 + int(rng.uniform_int(vocab.text_size() - 1))) % vocab.text_size();
      break;
    case ElementKind::kSpeechToken:
      out.ids[0] = (e.ids[0] + 1 + int(rng.uniform_int(vocab.num_codes))) % (vocab.num_codes + 1);
      break;
    case ElementKind::kContinuousFrame:
      for (double& v : out.frame) v += rng.normal();
      break;
    case ElementKind::kTaskId:
      break;
  }
  return out;
}

Outcome causality() {
  const ToyWorld world{ToyWorldConfig{}};
  CorpusConfig cc;
  cc.train_size = 100;
  cc.val_size = 0;
  cc.test_size = 0;
  const Corpus corpus = sample_corpus(world, cc);
  const Vocabulary vocab{world.num_symbols(), world.num_languages(), 16};
  LmConfig lc = lm_config_for(vocab, world.config().frame_dim);
  lc.d_model = 32;
  lc.d_ffn = 64;
  MultiModalLm model(lc);
  Rng rng(3, "acceptance.causality");
  std::size_t checks = 0, violations = 0;
  for (TaskKind task : {TaskKind::kAsr, TaskKind::kTts, TaskKind::kLid, TaskKind::kGid}) {
    for (const ToyUtterance& u : corpus.train) {
      RawExample ex = RawExample::from(u);
      std::vector<int> codes;
      for (std::size_t i = 0; i < (u.frames.rows() + 1) / 2; ++i) codes.push_back(int(rng.uniform_int(16)));
      ex.codes = codes;
      const AssembledExample a = assemble(ex, task, vocab);
      const Tensor base = model.logits(a.elements, a.boundary, task);
      for (std::size_t p = a.boundary; p < a.elements.size(); ++p) {
        std::vector<SequenceElement> changed = a.elements;
        for (std::size_t q = p; q < changed.size(); ++q) changed[q] = perturbed(changed[q], vocab, rng);
        const Tensor after = model.logits(changed, a.boundary, task);
        for (std::size_t i = 0; i < p; ++i) {
          ++checks;
          violations += !std::ranges::equal(base.row(i), after.row(i));
        }
      }
    }
  }
  return {violations == 0 && checks > 0,
          fmt("100 examples per task (ASR, TTS, LID, GID): %zu of %zu earlier rows changed", violations, checks)};
}

// --- 4 ----------------------------------------------------------------------

class TableSession : public DecodingSession {
 public:
  TableSession(std::uint64_t seed, int vocab, double scale) : seed_(seed), vocab_(vocab), scale_(scale) {}
  std::unique_ptr<DecodingSession> clone() const override { return std::make_unique<TableSession>(*this); }
  std::vector<double> next_logits() const override {
    Rng rng(seed_, "acceptance.model");
    for (int t : history_) rng = rng.split(std::uint64_t(t + 1));
    std::vector<double> l(vocab_);
    for (double& v : l) v = scale_ * rng.normal();
    return l;
  }
  void append(int token) override { history_.push_back(token); }
  int eos_id() const override { return vocab_ - 1; }

 private:
  std::uint64_t seed_;
  int vocab_;
  double scale_;
  std::vector<int> history_;
};

std::vector<double> log_softmax_of(const std::vector<double>& l) {
  const double m = *std::max_element(l.begin(), l.end());
  double z = 0.0;
  for (double v : l) z += std::exp(v - m);
  std::vector<double> out;
  for (double v : l) out.push_back(v - m - std::log(z));
  return out;
}

Outcome decoding_oracles() {
  // Exhaustive: with 3 tokens (EOS = 2) and 2 steps the finished sequences
  // are [EOS] and [a, EOS] for a in {0, 1}.
  int exhaustive_mismatch = 0;
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    TableSession m(seed, 3, 2.0);
    DecodeConfig cfg;
    cfg.mode = DecodeMode::kBeam;
    cfg.max_len = 2;
    cfg.beam_size = 5;
    const Hypothesis h = beam_search(m, cfg);
    const auto root = log_softmax_of(m.next_logits());
    double best = root[2];
    std::vector<int> best_seq;
    for (int a = 0; a < 2; ++a) {
      auto s = m.clone();
      s->append(a);
      const double lp = root[a] + log_softmax_of(s->next_logits())[2];
      if (lp > best) {
        best = lp;
        best_seq = {a};
      }
    }
    exhaustive_mismatch += h.tokens != best_seq || std::abs(h.log_prob - best) > 1e-12;
  }

  Rng rng(4, "acceptance.topk");
  const std::vector<double> logits{1.2, -0.3, 2.0, 0.4, -1.0, 0.9};
  const int k = 3, draws = 100000;
  std::vector<int> counts(logits.size(), 0);
  for (int i = 0; i < draws; ++i) ++counts[top_k_sample(logits, k, rng)];
  std::vector<int> order{0, 1, 2, 3, 4, 5};
  std::sort(order.begin(), order.end(), [&](int a, int b) { return logits[a] > logits[b]; });
  double z = 0.0;
  for (int i = 0; i < k; ++i) z += std::exp(logits[order[i]]);
  double worst_sigmas = 0.0;
  int outside = 0;
  for (int i = 0; i < int(logits.size()); ++i) {
    const bool in_top = std::find(order.begin(), order.begin() + k, i) != order.begin() + k;
    if (!in_top) {
      outside += counts[i];
      continue;
    }
    const double p = std::exp(logits[i]) / z;
    const double sigma = std::sqrt(p * (1 - p) / draws);
    worst_sigmas = std::max(worst_sigmas, std::abs(double(counts[i]) / draws - p) / sigma);
  }

  // Long enough that greedy finishes; a truncated greedy path would not be
  // comparable with a finished beam.
  int below_greedy = 0, unfinished = 0;
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    TableSession m(1000 + seed, 5, 2.0);
    DecodeConfig cfg;
    cfg.max_len = 40;
    cfg.beam_size = 5;
    const Hypothesis g = greedy_search(m, cfg);
    const Hypothesis b = beam_search(m, cfg);
    unfinished += !g.finished || !b.finished;
    below_greedy += !g.finished || !b.finished || b.log_prob < g.log_prob;
  }
  const bool ok = exhaustive_mismatch == 0 && outside == 0 && worst_sigmas < 3.0 && below_greedy == 0;
  return {ok, fmt("beam vs exhaustive: %d/100 mismatches; top-k: worst deviation %.2f sigma over %d draws, %d outside "
                  "the top-k; beam below greedy on %d/100 models (%d unfinished)",
                  exhaustive_mismatch, worst_sigmas, draws, outside, below_greedy, unfinished)};
}

// --- 5 ----------------------------------------------------------------------

Outcome sampler_fidelity() {
  Rng rng(5, "acceptance.sampler");
  const int draws = 10000;
  double worst = 0.0;
  std::string detail;
  for (int setting = 0; setting < 3; ++setting) {
    std::map<TaskKind, std::size_t> sizes;
    for (TaskKind t : {TaskKind::kAsr, TaskKind::kTts, TaskKind::kLid, TaskKind::kGid}) {
      sizes[t] = 1 + rng.uniform_int(5000);
    }
    const TaskMix mix = TaskMix::from_sizes(sizes);
    std::map<TaskKind, int> counts;
    Rng draw = rng.split(std::uint64_t(setting));
    for (int i = 0; i < draws; ++i) ++counts[sample_task(draw, mix)];
    for (std::size_t i = 0; i < mix.tasks.size(); ++i) {
      const double p = double(mix.sizes[i]) / double(mix.total());
      const double sigma = std::sqrt(p * (1 - p) / draws);
      worst = std::max(worst, std::abs(double(counts[mix.tasks[i]]) / draws - p) / sigma);
    }
    detail += fmt("mix %d sizes %zu/%zu/%zu/%zu; ", setting, mix.sizes[0], mix.sizes[1], mix.sizes[2], mix.sizes[3]);
  }
  return {worst < 3.0, detail + fmt("worst deviation %.2f sigma over %d draws each", worst, draws)};
}

// --- 6 ----------------------------------------------------------------------

Outcome single_task(const fs::path& work) {
  Stopwatch sw;
  const fs::path root = fresh_dir(work / "c6");
  const ExperimentConfig cfg = base_config(root, 1);
  gen_data(cfg);
  std::map<TaskKind, double> metric;
  for (TaskKind t : {TaskKind::kAsr, TaskKind::kLid, TaskKind::kGid}) {
    ExperimentConfig c = cfg;
    c.tasks = {t};
    metric[t] = run_lm_cell(c, root / "cells" / std::string(task_name(t)), t).metric;
    note(fmt("%s %.4f after %.0f s", std::string(task_name(t)).c_str(), metric[t], sw.seconds()));
  }
  const double t = sw.seconds();
  const bool ok = metric[TaskKind::kAsr] < 0.05 && metric[TaskKind::kLid] > 0.95 && metric[TaskKind::kGid] > 0.95 &&
                  t < 1800.0;
  return {ok, fmt("ASR CER %.4f (< 0.05), LID accuracy %.4f (> 0.95), GID accuracy %.4f (> 0.95); %.0f s (limit 1800 s)",
                  metric[TaskKind::kAsr], metric[TaskKind::kLid], metric[TaskKind::kGid], t)};
}

// --- 7 ----------------------------------------------------------------------

double frame_variance(const std::vector<ToyUtterance>& utts) {
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (const auto& u : utts) {
    for (double v : u.frames.values()) {
      sum += v;
      sq += v * v;
      ++n;
    }
  }
  const double mean = sum / double(n);
  return sq / double(n) - mean * mean;
}

Outcome tts_chain(const fs::path& work) {
  Stopwatch sw;
  const fs::path root = fresh_dir(work / "c7");
  const ExperimentConfig cfg = tts_config(root, 1);
  const Layout layout(cfg);
  gen_data(cfg);
  train_sset(cfg);
  const Corpus corpus = load_corpus(cfg);
  const SsetModel sset = load_sset(layout.best_checkpoint("sset"));
  std::vector<FrameSequence> test_frames;
  for (const auto& u : corpus.test) test_frames.push_back(u.frames);
  const double relative_mse = reconstruction_mse(sset, test_frames) / frame_variance(corpus.test);
  note(fmt("SSET relative reconstruction MSE %.4f after %.0f s", relative_mse, sw.seconds()));
  train_lm(cfg);
  note(fmt("LM trained after %.0f s", sw.seconds()));
  train_decoder(cfg);
  note(fmt("decoder trained after %.0f s", sw.seconds()));

  // Each of five held-out-speaker prompts voices every other test utterance
  // of its language.
  const ToyWorld world(resolved_world(cfg));
  const auto records = read_manifest(layout.manifest("test"));
  std::size_t edits = 0, ref_len = 0, secs_n = 0;
  double secs_sum = 0.0, midpoint = 0.0;
  const int prompts = 5;
  for (int p = 0; p < prompts; ++p) {
    const ToyUtterance& prompt = corpus.test[p];
    std::vector<ManifestRecord> subset;
    for (const auto& r : records) {
      if (r.language != prompt.language) continue;
      ManifestRecord copy = r;
      copy.frames_path = fs::absolute(layout.manifests() / r.frames_path).string();
      subset.push_back(copy);
    }
    const fs::path input = root / "prompts" / (prompt.id + ".jsonl");
    fs::create_directories(input.parent_path());
    write_manifest(input, subset);
    InferOptions opts;
    opts.task = TaskKind::kTts;
    opts.input_manifest = input;
    opts.prompt_utterance = prompt.id;
    opts.output = root / "prompts" / ("outputs-" + prompt.id + ".jsonl");
    const auto reports = evaluate(cfg, TaskKind::kTts, infer(cfg, opts), layout.manifest("test"),
                                  root / "prompts" / ("report-" + prompt.id + ".csv"));
    for (const auto& r : reports) {
      if (r.metric == "oracle_cer") edits += r.edits;
      if (r.metric == "secs") {
        secs_sum += r.value * double(r.n);
        secs_n += r.n;
      }
      if (r.metric == "secs_midpoint") midpoint = r.value;
    }
    for (const auto& r : subset) ref_len += r.id == prompt.id ? 0 : world.text_from_string(r.text).size();
  }
  const double cer = double(edits) / double(ref_len);
  const double secs = secs_sum / double(secs_n);
  const double t = sw.seconds();
  const bool ok = relative_mse < 0.1 && cer < 0.1 && secs > midpoint && t < 1800.0;
  return {ok, fmt("SSET reconstruction MSE %.4f of input variance (< 0.1); oracle CER %.4f (< 0.1) over %zu "
                  "utterances and %d prompts; SECS %.4f vs same/different midpoint %.4f; %.0f s (limit 1800 s)",
                  relative_mse, cer, secs_n, prompts, secs, midpoint, t)};
}

// --- 8 ----------------------------------------------------------------------

struct Comparison {
  std::string name;
  std::vector<double> advantage;  // per seed, positive = the expected direction
};

/// Mean paired advantage with its standard error over seeds: holds if the mean
/// is >= 0, a tie if it is negative but within 2 standard errors, a reversal
/// (fail) beyond that.
std::pair<bool, std::string> judge(const Comparison& c) {
  const double n = double(c.advantage.size());
  double mean = 0.0;
  for (double v : c.advantage) mean += v / n;
  double var = 0.0;
  for (double v : c.advantage) var += (v - mean) * (v - mean) / (n - 1);
  const double se = std::sqrt(var / n);
  std::string verdict = mean >= 0.0 ? "holds" : (-mean <= 2 * se ? "tie within noise" : "reversal beyond 2 sigma");
  std::string per_seed;
  for (double v : c.advantage) per_seed += fmt("%s%.4f", per_seed.empty() ? "" : ",", v);
  return {mean >= 0.0 || -mean <= 2 * se,
          fmt("%s: advantage %.4f +- %.4f [%s] %s", c.name.c_str(), mean, se, per_seed.c_str(), verdict.c_str())};
}

/// First validation update whose test CER is at or below `target`.
std::int64_t updates_to_reach(const std::vector<std::pair<std::int64_t, double>>& curve, double target,
                              std::int64_t never) {
  for (const auto& [u, cer] : curve) {
    if (cer <= target + 1e-12) return u;
  }
  return never;
}

Outcome directional(const fs::path& work, int seeds) {
  Stopwatch sw;
  Comparison a{"(a) CONTINUOUS vs SSET_TOKENS ASR CER", {}};
  Comparison b{"(b) updates to reach scratch's final ASR CER, scratch minus text-LM init", {}};
  Comparison c{"(c) 4-task minus single-task LID accuracy", {}};
  for (int s = 1; s <= seeds; ++s) {
    const fs::path root = fresh_dir(work / "c8" / ("seed-" + std::to_string(s)));
    ExperimentConfig cfg = base_config(root, std::uint64_t(s));
    cfg.sset.codebook_size = 32;
    gen_data(cfg);
    const StageResult sset = train_sset(cfg);
    cfg.sset_checkpoint = fs::absolute(sset.best_checkpoint).string();
    const std::vector<RawExample> test = raw_examples(load_corpus(cfg).test, nullptr);
    const std::int64_t never = cfg.train.max_updates + cfg.train.validate_every;

    auto asr_with_curve = [&](bool init, const std::string& name) {
      ExperimentConfig c2 = cfg;
      c2.tasks = {TaskKind::kAsr};
      c2.text_lm_init = init;
      std::vector<std::pair<std::int64_t, double>> curve;
      TrainHooks hooks;
      hooks.on_lm_validation = [&](std::int64_t u, const MultiModalLm& m) {
        curve.emplace_back(u, test_cer(m, test, c2));
      };
      const CellResult r = run_lm_cell(c2, root / name, TaskKind::kAsr, hooks);
      return std::make_pair(r, curve);
    };
    const auto [scratch, scratch_curve] = asr_with_curve(false, "asr-scratch");
    const auto [init, init_curve] = asr_with_curve(true, "asr-textlm");
    const double final_cer = scratch_curve.back().second;
    const std::int64_t scratch_reach = updates_to_reach(scratch_curve, final_cer, never);
    const std::int64_t init_reach = updates_to_reach(init_curve, final_cer, never);
    b.advantage.push_back(double(scratch_reach - init_reach));

    ExperimentConfig tokens = cfg;
    tokens.tasks = {TaskKind::kAsr};
    tokens.source = SourceRepresentation::kSsetTokens;
    const double token_cer = run_lm_cell(tokens, root / "asr-tokens", TaskKind::kAsr).metric;
    a.advantage.push_back(token_cer - scratch.metric);

    ExperimentConfig lid = cfg;
    lid.tasks = {TaskKind::kLid};
    const double single = run_lm_cell(lid, root / "lid", TaskKind::kLid).metric;
    ExperimentConfig all = cfg;
    all.tasks = {TaskKind::kAsr, TaskKind::kTts, TaskKind::kLid, TaskKind::kGid};
    const double multi = run_lm_cell(all, root / "four-task", TaskKind::kLid).metric;
    c.advantage.push_back(multi - single);

    note(fmt("seed %d after %.0f s: CER continuous %.4f, tokens %.4f; reach scratch %lld, init %lld (target %.4f); "
             "LID single %.4f, 4-task %.4f",
             s, sw.seconds(), scratch.metric, token_cer, (long long)scratch_reach, (long long)init_reach, final_cer,
             single, multi));
  }
  bool ok = true;
  std::string detail;
  for (const Comparison* cmp : {&a, &b, &c}) {
    const auto [pass, text] = judge(*cmp);
    ok &= pass;
    detail += text + "; ";
  }
  return {ok, detail + fmt("%d seeds, %.0f s", seeds, sw.seconds())};
}

// --- 9 ----------------------------------------------------------------------

std::size_t brute_edit(std::span<const int> a, std::span<const int> b) {
  if (a.empty()) return b.size();
  if (b.empty()) return a.size();
  if (a[0] == b[0]) return brute_edit(a.subspan(1), b.subspan(1));
  return 1 + std::min({brute_edit(a.subspan(1), b), brute_edit(a, b.subspan(1)), brute_edit(a.subspan(1), b.subspan(1))});
}

Outcome metrics_oracles() {
  Stopwatch sw;
  std::vector<std::vector<int>> strings{{}};
  for (std::size_t i = 0; i < strings.size(); ++i) {
    if (strings[i].size() == 6) continue;
    for (int s = 0; s < 3; ++s) {
      auto next = strings[i];
      next.push_back(s);
      strings.push_back(next);
    }
  }
  std::size_t mismatches = 0, pairs = 0;
  for (const auto& h : strings) {
    for (const auto& r : strings) {
      mismatches += edit_distance(h, r) != brute_edit(h, r);
      ++pairs;
    }
  }

  // Hand-computed confusion cases: (hyps, refs, classes, macro-F1).
  struct Case {
    std::vector<int> hyps, refs, classes;
    double f1;
  };
  const std::vector<Case> cases{
      {{0, 0, 1}, {0, 0, 1}, {0, 1}, 1.0},
      {{1, 1, 0}, {0, 0, 1}, {0, 1}, 0.0},
      // class 0: P 1, R 1/2, F1 2/3; class 1: P 1/2, R 1, F1 2/3
      {{0, 1, 1}, {0, 0, 1}, {0, 1}, 2.0 / 3.0},
      // class 0: F1 2/3; class 1: P 1/2, R 1/2, F1 1/2; class 2: P 0, R 0
      {{0, 1, 1, 2}, {0, 0, 1, 1}, {0, 1, 2}, (2.0 / 3.0 + 0.5 + 0.0) / 3.0},
      // class 0: P 2/3, R 1, F1 4/5; class 1: P 1, R 1/2, F1 2/3
      {{0, 0, 0, 1}, {0, 0, 1, 1}, {0, 1}, (0.8 + 2.0 / 3.0) / 2.0},
  };
  int f1_mismatches = 0;
  for (const auto& c : cases) f1_mismatches += std::abs(macro_f1(c.hyps, c.refs, c.classes) - c.f1) > 1e-12;
  const double t = sw.seconds();
  return {mismatches == 0 && f1_mismatches == 0 && t < 10.0,
          fmt("edit distance vs brute force: %zu of %zu pairs differ; macro-F1: %d of %zu hand cases differ; %.1f s "
              "(limit 10 s)",
              mismatches, pairs, f1_mismatches, cases.size(), t)};
}

// --- 10 ---------------------------------------------------------------------

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    files[fs::relative(e.path(), root).generic_string()] = ss.str();
  }
  return files;
}

void full_pipeline(const fs::path& out) {
  ExperimentConfig cfg = base_config(out, 7);
  cfg.tasks = {TaskKind::kAsr, TaskKind::kTts, TaskKind::kLid, TaskKind::kGid};
  cfg.corpus.train_size = 300;
  cfg.corpus.val_size = 40;
  cfg.corpus.test_size = 40;
  cfg.sset_train.updates = 100;
  cfg.train.max_updates = 60;
  cfg.train.validate_every = 20;
  cfg.decoder.updates = 60;
  cfg.decoder.validate_every = 20;
  cfg.text_lm_init = true;
  cfg.text_lm.updates = 20;
  cfg.text_lm.corpus_size = 200;
  gen_data(cfg);
  train_sset(cfg);
  train_lm(cfg);
  train_decoder(cfg);
  const Layout layout(cfg);
  for (TaskKind t : cfg.tasks) {
    InferOptions opts;
    opts.task = t;
    opts.input_manifest = layout.manifest("test");
    if (t == TaskKind::kTts) opts.prompt_utterance = "test-000000";
    evaluate(cfg, t, infer(cfg, opts), opts.input_manifest);
  }
}

Outcome reproducibility(const fs::path& work) {
  const fs::path a = fresh_dir(work / "c10" / "a"), b = fresh_dir(work / "c10" / "b");
  full_pipeline(a);
  full_pipeline(b);
  const auto sa = snapshot(a), sb = snapshot(b);
  std::size_t differing = 0;
  std::map<std::string, int> kinds;
  for (const auto& [name, bytes] : sa) {
    const auto it = sb.find(name);
    differing += it == sb.end() || it->second != bytes;
    ++kinds[name.substr(0, name.find('/'))];
  }
  for (const auto& [name, bytes] : sb) differing += !sa.contains(name);
  std::string detail;
  for (const auto& [k, n] : kinds) detail += fmt("%s%s %d", detail.empty() ? "" : ", ", k.c_str(), n);
  const bool covered = kinds.contains("manifests") && kinds.contains("logs") && kinds.contains("checkpoints") &&
                       kinds.contains("reports");
  return {differing == 0 && covered, fmt("%zu files compared (%s), %zu differ", sa.size(), detail.c_str(), differing)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria: one PASS/FAIL line per criterion"};
  std::vector<int> criteria;
  std::string work = (fs::temp_directory_path() / "polyspeech_acceptance").string();
  int seeds = 3;
  app.add_option("-c,--criterion", criteria, "criteria to run (default: all)")->check(CLI::Range(1, 10));
  app.add_option("-w,--work-dir", work, "scratch directory for end-to-end runs");
  app.add_option("--seeds", seeds, "seeds for the directional comparisons")->check(CLI::Range(2, 20));
  CLI11_PARSE(app, argc, argv);
  if (criteria.empty()) criteria = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};

  const std::map<int, std::pair<std::string, std::function<Outcome()>>> all{
      {1, {"gradient integrity", gradient_integrity}},
      {2, {"RVQ properties", rvq_properties}},
      {3, {"causality", causality}},
      {4, {"decoding oracles", decoding_oracles}},
      {5, {"sampler fidelity", sampler_fidelity}},
      {6, {"single-task learnability", [&] { return single_task(work); }}},
      {7, {"TTS chain", [&] { return tts_chain(work); }}},
      {8, {"directional comparisons", [&] { return directional(work, seeds); }}},
      {9, {"metrics oracles", metrics_oracles}},
      {10, {"reproducibility", [&] { return reproducibility(work); }}},
  };
  int failures = 0;
  for (int id : criteria) {
    const auto& [name, run] = all.at(id);
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << id << ". " << name << ": " << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
