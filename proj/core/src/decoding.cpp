#include "polyspeech/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "polyspeech/error.hpp"

namespace polyspeech {
namespace {

SequenceElement element_for(TaskKind task, int token) {
  return target_modality(task) == Modality::kSpeech ? SequenceElement::speech(token) : SequenceElement::text(token);
}

/// Candidate ids in id order: all, or the allowed set plus EOS.
std::vector<int> candidates(std::size_t vocab, const DecodeConfig& cfg, int eos) {
  std::vector<int> ids;
  if (cfg.allowed_ids.empty()) {
    ids.resize(vocab);
    std::iota(ids.begin(), ids.end(), 0);
  } else {
    ids = cfg.allowed_ids;
    if (std::find(ids.begin(), ids.end(), eos) == ids.end()) ids.push_back(eos);
    std::sort(ids.begin(), ids.end());
    for (int id : ids) require(id >= 0 && static_cast<std::size_t>(id) < vocab, "allowed id out of range");
  }
  return ids;
}

double score_of(const Hypothesis& h, const DecodeConfig& cfg) {
  if (!cfg.length_normalize) return h.log_prob;
  return h.log_prob / static_cast<double>(h.tokens.size() + (h.finished ? 1 : 0));
}

/// Prefer finished hypotheses, then higher score.
bool better(const Hypothesis& a, const Hypothesis& b, const DecodeConfig& cfg) {
  if (a.finished != b.finished) return a.finished;
  return score_of(a, cfg) > score_of(b, cfg);
}

}  // namespace

std::string_view decode_mode_name(DecodeMode m) {
  switch (m) {
    case DecodeMode::kTopK: return "TOP_K";
    case DecodeMode::kBeam: return "BEAM";
    case DecodeMode::kGreedy: return "GREEDY";
  }
  return "?";
}

DecodeMode parse_decode_mode(std::string_view name) {
  for (DecodeMode m : {DecodeMode::kTopK, DecodeMode::kBeam, DecodeMode::kGreedy}) {
    if (decode_mode_name(m) == name) return m;
  }
  throw Error(ErrorKind::kUsage, "unknown decode mode '" + std::string(name) + "'");
}

void validate(const DecodeConfig& cfg) {
  require(cfg.k >= 1, "DecodeConfig: k must be >= 1");
  require(cfg.beam_size >= 1, "DecodeConfig: beam_size must be >= 1");
  require(cfg.max_len >= 1, "DecodeConfig: max_len must be >= 1");
  require(cfg.temperature > 0.0, "DecodeConfig: temperature must be > 0");
}

// ---------------------------------------------------------------------------

LmSession::LmSession(const MultiModalLm& model, std::vector<SequenceElement> prefix, std::size_t boundary,
                     TaskKind task, int eos, bool use_cache)
    : model_(&model), elements_(std::move(prefix)), boundary_(boundary), task_(task), eos_(eos), use_cache_(use_cache) {
  require(!elements_.empty() && boundary_ >= 1 && boundary_ <= elements_.size(), "LmSession: bad prefix");
  if (use_cache_) {
    const Tensor l = model_->extend(cache_, elements_, boundary_, task_);
    const auto last = l.row(l.rows() - 1);
    logits_.assign(last.begin(), last.end());
  } else {
    const Tensor l = model_->logits(elements_, boundary_, task_);
    const auto last = l.row(l.rows() - 1);
    logits_.assign(last.begin(), last.end());
  }
}

std::unique_ptr<DecodingSession> LmSession::clone() const { return std::make_unique<LmSession>(*this); }

void LmSession::append(int token) {
  const SequenceElement e = element_for(task_, token);
  elements_.push_back(e);
  if (use_cache_) {
    const Tensor l = model_->extend(cache_, std::span<const SequenceElement>(&e, 1), boundary_, task_);
    logits_.assign(l.row(0).begin(), l.row(0).end());
  } else {
    const Tensor l = model_->logits(elements_, boundary_, task_);
    const auto last = l.row(l.rows() - 1);
    logits_.assign(last.begin(), last.end());
  }
}

std::unique_ptr<LmSession> make_session(const MultiModalLm& model, const InferencePrefix& prefix, TaskKind task,
                                        const Vocabulary& vocab, bool use_cache) {
  return std::make_unique<LmSession>(model, prefix.elements, prefix.boundary, task,
                                     vocab.eos(target_modality(task)), use_cache);
}

// ---------------------------------------------------------------------------

int top_k_sample(std::span<const double> logits, int k, Rng& rng, double temperature) {
  require(k >= 1, "top_k_sample: k must be >= 1");
  require(static_cast<std::size_t>(k) <= logits.size(), "top_k_sample: k exceeds vocabulary size");
  require(temperature > 0.0, "top_k_sample: temperature must be > 0");
  std::vector<int> order(logits.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return logits[a] > logits[b]; });
  order.resize(static_cast<std::size_t>(k));
  if (k == 1) return order[0];
  std::vector<double> scaled;
  for (int id : order) scaled.push_back(logits[id] / temperature);
  const auto p = softmax(scaled);
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return order[i];
  }
  return order.back();
}

Hypothesis greedy_search(const DecodingSession& start, const DecodeConfig& cfg) {
  validate(cfg);
  auto session = start.clone();
  Hypothesis h;
  for (int step = 0; step < cfg.max_len; ++step) {
    const auto logits = session->next_logits();
    const auto lp = log_softmax(logits);
    int best = -1;
    for (int id : candidates(logits.size(), cfg, session->eos_id())) {
      if (best < 0 || lp[id] > lp[best]) best = id;
    }
    h.log_prob += lp[best];
    if (best == session->eos_id()) {
      h.finished = true;
      return h;
    }
    h.tokens.push_back(best);
    if (step + 1 < cfg.max_len) session->append(best);
  }
  return h;
}

Hypothesis beam_search(const DecodingSession& start, const DecodeConfig& cfg) {
  validate(cfg);
  struct Beam {
    Hypothesis hyp;
    std::unique_ptr<DecodingSession> session;
  };
  struct Candidate {
    std::size_t parent;
    int token;  // −1: carried-over finished hypothesis
    double log_prob;
    bool finished;
  };

  const int eos = start.eos_id();
  std::vector<Beam> beams;
  beams.push_back({Hypothesis{}, start.clone()});
  for (int step = 0; step < cfg.max_len; ++step) {
    std::vector<Candidate> pool;
    for (std::size_t b = 0; b < beams.size(); ++b) {
      const Beam& beam = beams[b];
      if (beam.hyp.finished) {
        pool.push_back({b, -1, beam.hyp.log_prob, true});
        continue;
      }
      const auto logits = beam.session->next_logits();
      const auto lp = log_softmax(logits);
      for (int id : candidates(logits.size(), cfg, eos)) {
        pool.push_back({b, id, beam.hyp.log_prob + lp[id], id == eos});
      }
    }
    auto cand_score = [&](const Candidate& c) {
      if (!cfg.length_normalize) return c.log_prob;
      const auto& parent = beams[c.parent].hyp;
      const std::size_t len = parent.tokens.size() + (c.token >= 0 ? 1 : (parent.finished ? 1 : 0));
      return c.log_prob / static_cast<double>(len);
    };
    std::stable_sort(pool.begin(), pool.end(),
                     [&](const Candidate& a, const Candidate& b) { return cand_score(a) > cand_score(b); });
    if (pool.size() > static_cast<std::size_t>(cfg.beam_size)) pool.resize(static_cast<std::size_t>(cfg.beam_size));

    std::vector<Beam> next;
    bool all_finished = true;
    for (const Candidate& c : pool) {
      Beam& parent = beams[c.parent];
      Beam nb;
      nb.hyp = parent.hyp;
      nb.hyp.log_prob = c.log_prob;
      if (c.token < 0) {
        next.push_back(std::move(nb));
        continue;
      }
      if (c.token == eos) {
        nb.hyp.finished = true;
      } else {
        nb.hyp.tokens.push_back(c.token);
        all_finished = false;
        if (step + 1 < cfg.max_len) {
          nb.session = parent.session->clone();
          nb.session->append(c.token);
        }
      }
      next.push_back(std::move(nb));
    }
    beams = std::move(next);
    if (all_finished) break;
  }

  Hypothesis best = beams.front().hyp;
  for (const Beam& b : beams) {
    if (better(b.hyp, best, cfg)) best = b.hyp;
  }
  const Hypothesis greedy = greedy_search(start, cfg);
  if (greedy.finished == best.finished ? score_of(greedy, cfg) > score_of(best, cfg) : greedy.finished) {
    best = greedy;
  }
  return best;
}

GenerateResult generate(const DecodingSession& start, const DecodeConfig& cfg, Rng& rng) {
  validate(cfg);
  if (cfg.mode == DecodeMode::kBeam) {
    const Hypothesis h = beam_search(start, cfg);
    return {h.tokens, h.log_prob, !h.finished};
  }
  if (cfg.mode == DecodeMode::kGreedy) {
    const Hypothesis h = greedy_search(start, cfg);
    return {h.tokens, h.log_prob, !h.finished};
  }
  auto session = start.clone();
  GenerateResult out;
  for (int step = 0; step < cfg.max_len; ++step) {
    const auto logits = session->next_logits();
    const auto ids = candidates(logits.size(), cfg, session->eos_id());
    std::vector<double> restricted;
    for (int id : ids) restricted.push_back(logits[id]);
    const int k = std::min<int>(cfg.k, static_cast<int>(restricted.size()));
    const int token = ids[top_k_sample(restricted, k, rng, cfg.temperature)];
    out.log_prob += log_softmax(logits)[token];
    if (token == session->eos_id()) return out;
    out.tokens.push_back(token);
    if (step + 1 < cfg.max_len) session->append(token);
  }
  out.truncated = true;
  return out;
}

GenerateResult generate(const DecodingSession& start, const DecodeConfig& cfg) {
  Rng rng(cfg.seed, "generate");
  return generate(start, cfg, rng);
}

}  // namespace polyspeech
