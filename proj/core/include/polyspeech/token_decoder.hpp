#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "polyspeech/autograd.hpp"
#include "polyspeech/optim.hpp"
#include "polyspeech/toyspeech.hpp"

namespace polyspeech {

struct TokenDecoderConfig {
  int num_codes = 64;
  int code_dim = 32;
  int upsample = 2;
  int frame_dim = 16;
  int speaker_hidden = 32;
  int speaker_dim = 16;
  std::uint64_t seed = 1;
};

void validate(const TokenDecoderConfig& cfg);

/// Speech de-tokenizer: code embeddings, upsampled, plus a projected speaker
/// embedding at every position, mapped to frames. The speaker embedding comes
/// from an LSTM → linear → ReLU encoder run over a prompt utterance.
class TokenDecoderModel {
 public:
  explicit TokenDecoderModel(const TokenDecoderConfig& cfg);
  /// code_dim == frame_dim, identity output projection, zero output bias.
  static TokenDecoderModel identity(int num_codes, int frame_dim, int upsample);

  const TokenDecoderConfig& config() const noexcept { return cfg_; }
  ParameterSet& params() noexcept { return params_; }
  const ParameterSet& params() const noexcept { return params_; }
  /// Names of the speaker-encoder parameters.
  std::vector<std::string> speaker_encoder_params() const;

  Var encode_speaker(Graph& g, const FrameSequence& prompt) const;
  std::vector<double> encode_speaker(const FrameSequence& prompt) const;

  Var decode_to_frames(Graph& g, std::span<const int> codes, const Var& speaker) const;
  FrameSequence decode_to_frames(std::span<const int> codes, std::span<const double> speaker) const;
  /// Convenience: speaker embedding from `prompt`, then decode.
  FrameSequence synthesize(std::span<const int> codes, const FrameSequence& prompt) const;

 private:
  TokenDecoderConfig cfg_;
  ParameterSet params_;
};

struct DecoderExample {
  std::vector<int> codes;       // tokens of the target utterance
  FrameSequence target;         // frames of the target utterance
  FrameSequence prompt;         // a different utterance of the same speaker
  int target_speaker = 0;
  int prompt_speaker = 0;
  std::string target_id;
  std::string prompt_id;
};

/// L2 loss between decoded and target frames, averaged over all coordinates
/// of the batch. Throws if an example pairs different speakers or reuses the
/// target as its own prompt.
Var decoder_loss(const TokenDecoderModel& model, Graph& g, std::span<const DecoderExample> batch);

double decoder_train_step(TokenDecoderModel& model, AdamState& opt, std::span<const DecoderExample> batch,
                          bool freeze_speaker_encoder = false);

}  // namespace polyspeech
