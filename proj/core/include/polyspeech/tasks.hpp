#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "polyspeech/toyspeech.hpp"

namespace polyspeech {

/// kTextLm is the text-only continuation objective used to pretrain the
/// trunk; it has no task-ID token of its own in the assembled sequences.
enum class TaskKind { kAsr = 0, kTts = 1, kLid = 2, kGid = 3, kTextLm = 4 };
enum class Modality { kText, kSpeech };
enum class SourceRepresentation { kContinuous, kSsetTokens };

constexpr int kNumTaskIds = 5;

std::string_view task_name(TaskKind t);
TaskKind parse_task(std::string_view name);
std::string_view source_name(SourceRepresentation s);
SourceRepresentation parse_source(std::string_view name);
/// Classification tags are ordinary text tokens, so only TTS emits speech.
Modality target_modality(TaskKind t);
int task_id_token(TaskKind t);

/// Id layout of the two output vocabularies.
/// text:   [symbols | language tags | MALE, FEMALE | EOS]
/// speech: [codes 0..K−1 | EOS]
struct Vocabulary {
  int num_symbols = 0;
  int num_languages = 0;
  int num_codes = 0;

  int text_size() const { return num_symbols + num_languages + 3; }
  int text_eos() const { return num_symbols + num_languages + 2; }
  int language_tag(int language) const;
  int gender_tag(Gender g) const;
  int speech_size() const { return num_codes + 1; }
  int speech_eos() const { return num_codes; }
  int eos(Modality m) const { return m == Modality::kText ? text_eos() : speech_eos(); }
  int output_size(TaskKind t) const { return target_modality(t) == Modality::kText ? text_size() : speech_size(); }
  /// Token ids a classification head may emit (the tag set).
  std::vector<int> tag_ids(TaskKind t) const;
  std::optional<int> language_of_tag(int id) const;
  std::optional<Gender> gender_of_tag(int id) const;
};

enum class ElementKind { kTextToken, kSpeechToken, kTaskId, kContinuousFrame };

struct SequenceElement {
  ElementKind kind = ElementKind::kTextToken;
  std::vector<int> ids;        // one id, or m ids for a multi-dimensional speech token
  std::vector<double> frame;   // continuous frames only

  static SequenceElement text(int id) { return {ElementKind::kTextToken, {id}, {}}; }
  static SequenceElement speech(int id) { return {ElementKind::kSpeechToken, {id}, {}}; }
  static SequenceElement speech(std::vector<int> ids) { return {ElementKind::kSpeechToken, std::move(ids), {}}; }
  static SequenceElement task(TaskKind t) { return {ElementKind::kTaskId, {task_id_token(t)}, {}}; }
  static SequenceElement continuous(std::span<const double> f) {
    return {ElementKind::kContinuousFrame, {}, std::vector<double>(f.begin(), f.end())};
  }
  bool operator==(const SequenceElement&) const = default;
};

struct RawExample {
  std::string id;
  FrameSequence frames;
  std::vector<int> text;  // symbol ids
  int language = 0;
  Gender gender = Gender::kMale;
  int speaker = 0;
  std::optional<std::vector<int>> codes;  // layer-1 SSET codes

  static RawExample from(const ToyUtterance& u);
};

/// Two utterances of one speaker joined into a single longer one (text,
/// frames and codes concatenated).
RawExample concatenate(const RawExample& a, const RawExample& b);

/// Positions [0, boundary) are source plus the task-ID token at boundary − 1;
/// [boundary, L) is the target. targets[i] is the id predicted at position
/// boundary − 1 + i, so targets.size() == L − boundary + 1 and the last one is EOS.
struct AssembledExample {
  std::vector<SequenceElement> elements;
  std::size_t boundary = 0;
  std::vector<int> targets;
  TaskKind task = TaskKind::kAsr;
};

AssembledExample assemble_asr(const RawExample& ex, const Vocabulary& vocab,
                              SourceRepresentation source = SourceRepresentation::kContinuous);
AssembledExample assemble_tts_train(const RawExample& ex, const Vocabulary& vocab);
AssembledExample assemble_classification(const RawExample& ex, TaskKind task, const Vocabulary& vocab,
                                         SourceRepresentation source = SourceRepresentation::kContinuous);
AssembledExample assemble(const RawExample& ex, TaskKind task, const Vocabulary& vocab,
                          SourceRepresentation source = SourceRepresentation::kContinuous);
/// Plain next-token objective over a text string (fully causal).
AssembledExample assemble_text_lm(std::span<const int> text, const Vocabulary& vocab);

struct InferencePrefix {
  std::vector<SequenceElement> elements;
  std::size_t boundary = 0;  // index of the first target position
};

/// [prompt text ‖ target text, TASK_TTS, prompt codes]; generation continues
/// after the prompt codes.
InferencePrefix assemble_tts_infer_prefix(std::span<const int> prompt_text, std::span<const int> target_text,
                                          std::span<const int> prompt_codes, const Vocabulary& vocab);
/// Source elements followed by the task-ID token; the target starts empty.
InferencePrefix assemble_infer_prefix(const RawExample& ex, TaskKind task, const Vocabulary& vocab,
                                      SourceRepresentation source = SourceRepresentation::kContinuous);

struct Disassembled {
  std::vector<int> text;   // ASR target text, or TTS source text
  std::vector<int> codes;  // TTS target codes, or token-source codes
  std::optional<int> tag;  // LID/GID tag token id
};

Disassembled disassemble(const AssembledExample& ex, const Vocabulary& vocab);

}  // namespace polyspeech
