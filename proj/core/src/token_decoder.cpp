#include "polyspeech/token_decoder.hpp"

#include <cmath>

#include "polyspeech/error.hpp"
#include "polyspeech/rng.hpp"

namespace polyspeech {
namespace {

Tensor uniform_init(std::size_t rows, std::size_t cols, Rng rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  Tensor t(rows, cols);
  for (double& v : t.values()) v = bound * (2.0 * rng.uniform() - 1.0);
  return t;
}

}  // namespace

void validate(const TokenDecoderConfig& cfg) {
  require(cfg.num_codes >= 2, "TokenDecoderConfig: num_codes must be >= 2");
  require(cfg.code_dim >= 1 && cfg.frame_dim >= 1, "TokenDecoderConfig: dims must be >= 1");
  require(cfg.upsample >= 1, "TokenDecoderConfig: upsample must be >= 1");
  require(cfg.speaker_hidden >= 1 && cfg.speaker_dim >= 1, "TokenDecoderConfig: speaker dims must be >= 1");
}

TokenDecoderModel::TokenDecoderModel(const TokenDecoderConfig& cfg) : cfg_(cfg) {
  validate(cfg);
  Rng rng(cfg.seed, "token_decoder.init");
  const auto h = static_cast<std::size_t>(cfg.speaker_hidden);
  const auto d = static_cast<std::size_t>(cfg.frame_dim);
  const auto e = static_cast<std::size_t>(cfg.speaker_dim);
  const auto c = static_cast<std::size_t>(cfg.code_dim);

  params_.add("speaker.lstm.wx", uniform_init(d, 4 * h, rng.split("wx")));
  params_.add("speaker.lstm.wh", uniform_init(h, 4 * h, rng.split("wh")));
  std::vector<double> bias(4 * h, 0.0);
  for (std::size_t i = h; i < 2 * h; ++i) bias[i] = 1.0;  // forget gate
  params_.add("speaker.lstm.bias", Tensor({4 * h}, bias));
  params_.add("speaker.linear.weight", uniform_init(h, e, rng.split("linear")));
  params_.add("speaker.linear.bias", Tensor({e}, std::vector<double>(e, 0.1)));

  params_.add("decoder.code_embedding", uniform_init(static_cast<std::size_t>(cfg.num_codes), c, rng.split("codes")));
  params_.add("decoder.speaker_proj", uniform_init(e, c, rng.split("spk_proj")));
  params_.add("decoder.out.weight", uniform_init(c, d, rng.split("out")));
  params_.add("decoder.out.bias", Tensor({d}, std::vector<double>(d, 0.0)));
}

TokenDecoderModel TokenDecoderModel::identity(int num_codes, int frame_dim, int upsample) {
  TokenDecoderConfig cfg;
  cfg.num_codes = num_codes;
  cfg.frame_dim = cfg.code_dim = frame_dim;
  cfg.upsample = upsample;
  TokenDecoderModel model(cfg);
  Tensor& w = model.params_.get("decoder.out.weight").value;
  w.fill(0.0);
  for (int i = 0; i < frame_dim; ++i) w(i, i) = 1.0;
  model.params_.get("decoder.out.bias").value.fill(0.0);
  return model;
}

std::vector<std::string> TokenDecoderModel::speaker_encoder_params() const {
  std::vector<std::string> names;
  for (const auto& [name, p] : params_) {
    if (name.starts_with("speaker.")) names.push_back(name);
  }
  return names;
}

Var TokenDecoderModel::encode_speaker(Graph& g, const FrameSequence& prompt) const {
  require(prompt.rows() >= 1 && !prompt.empty(), "encode_speaker: empty prompt");
  require(static_cast<int>(prompt.cols()) == cfg_.frame_dim, "encode_speaker: frame dim mismatch");
  const auto h = static_cast<std::size_t>(cfg_.speaker_hidden);
  Var wx = g.param(params_.get("speaker.lstm.wx"));
  Var wh = g.param(params_.get("speaker.lstm.wh"));
  Var b = g.param(params_.get("speaker.lstm.bias"));
  // Input projections for all steps at once; the recurrence adds h·Wh per step.
  Var xproj = add_row(matmul(g.constant(prompt), wx), b);
  Var hidden = g.constant(Tensor(1, h));
  Var cell = g.constant(Tensor(1, h));
  for (std::size_t t = 0; t < prompt.rows(); ++t) {
    Var gates = add(slice_rows(xproj, t, t + 1), matmul(hidden, wh));
    Var in = sigmoid(slice_cols(gates, 0, h));
    Var forget = sigmoid(slice_cols(gates, h, 2 * h));
    Var cand = tanh(slice_cols(gates, 2 * h, 3 * h));
    Var out = sigmoid(slice_cols(gates, 3 * h, 4 * h));
    cell = add(mul(forget, cell), mul(in, cand));
    hidden = mul(out, tanh(cell));
  }
  return relu(add_row(matmul(hidden, g.param(params_.get("speaker.linear.weight"))),
                      g.param(params_.get("speaker.linear.bias"))));
}

std::vector<double> TokenDecoderModel::encode_speaker(const FrameSequence& prompt) const {
  Graph g(false);
  return encode_speaker(g, prompt)->val().values();
}

Var TokenDecoderModel::decode_to_frames(Graph& g, std::span<const int> codes, const Var& speaker) const {
  require(!codes.empty(), "decode_to_frames: no codes");
  for (int c : codes) {
    require(c >= 0 && c < cfg_.num_codes, "decode_to_frames: code " + std::to_string(c) + " out of range");
  }
  require(static_cast<int>(speaker->val().size()) == cfg_.speaker_dim, "decode_to_frames: speaker dim mismatch");
  Var emb = repeat_rows(embedding(g.param(params_.get("decoder.code_embedding")), codes),
                        static_cast<std::size_t>(cfg_.upsample));
  Var cond = matmul(speaker, g.param(params_.get("decoder.speaker_proj")));
  Var hidden = add_row(emb, cond);
  return add_row(matmul(hidden, g.param(params_.get("decoder.out.weight"))), g.param(params_.get("decoder.out.bias")));
}

FrameSequence TokenDecoderModel::decode_to_frames(std::span<const int> codes, std::span<const double> speaker) const {
  Graph g(false);
  Var spk = g.constant(Tensor({1, speaker.size()}, std::vector<double>(speaker.begin(), speaker.end())));
  return decode_to_frames(g, codes, spk)->val();
}

FrameSequence TokenDecoderModel::synthesize(std::span<const int> codes, const FrameSequence& prompt) const {
  Graph g(false);
  return decode_to_frames(g, codes, encode_speaker(g, prompt))->val();
}

Var decoder_loss(const TokenDecoderModel& model, Graph& g, std::span<const DecoderExample> batch) {
  require(!batch.empty(), "decoder_loss: empty batch");
  double total = 0.0;
  for (const auto& ex : batch) total += static_cast<double>(ex.target.size());
  std::vector<Var> terms;
  for (const auto& ex : batch) {
    require(ex.prompt_speaker == ex.target_speaker,
            "decoder_loss: prompt speaker " + std::to_string(ex.prompt_speaker) + " differs from target speaker " +
                std::to_string(ex.target_speaker));
    require(ex.prompt_id.empty() || ex.prompt_id != ex.target_id,
            "decoder_loss: prompt utterance must differ from the target utterance");
    Var frames = model.decode_to_frames(g, ex.codes, model.encode_speaker(g, ex.prompt));
    require(frames->val().rows() >= ex.target.rows(), "decoder_loss: codes too short for the target frames");
    Var pred = slice_rows(frames, 0, ex.target.rows());
    terms.push_back(scale(mse(pred, g.constant(ex.target)), static_cast<double>(ex.target.size()) / total));
  }
  return terms.size() == 1 ? terms[0] : sum_all(concat_rows(terms));
}

double decoder_train_step(TokenDecoderModel& model, AdamState& opt, std::span<const DecoderExample> batch,
                          bool freeze_speaker_encoder) {
  Graph g;
  if (freeze_speaker_encoder) {
    for (const auto& name : model.speaker_encoder_params()) g.freeze(model.params().get(name));
  }
  Var loss = decoder_loss(model, g, batch);
  const double value = loss->val()[0];
  if (!std::isfinite(value)) throw Error(ErrorKind::kNumeric, "decoder_train_step: non-finite loss");
  g.backward(loss);
  adam_update(opt, model.params(), g.gradients());
  return value;
}

}  // namespace polyspeech
