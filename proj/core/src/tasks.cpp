#include "polyspeech/tasks.hpp"

#include "polyspeech/error.hpp"

namespace polyspeech {

std::string_view task_name(TaskKind t) {
  switch (t) {
    case TaskKind::kAsr: return "ASR";
    case TaskKind::kTts: return "TTS";
    case TaskKind::kLid: return "LID";
    case TaskKind::kGid: return "GID";
    case TaskKind::kTextLm: return "TEXTLM";
  }
  return "?";
}

TaskKind parse_task(std::string_view name) {
  for (TaskKind t : {TaskKind::kAsr, TaskKind::kTts, TaskKind::kLid, TaskKind::kGid, TaskKind::kTextLm}) {
    if (task_name(t) == name) return t;
  }
  throw Error(ErrorKind::kUsage, "unknown task '" + std::string(name) + "'");
}

std::string_view source_name(SourceRepresentation s) {
  return s == SourceRepresentation::kContinuous ? "CONTINUOUS" : "SSET_TOKENS";
}

SourceRepresentation parse_source(std::string_view name) {
  if (name == "CONTINUOUS") return SourceRepresentation::kContinuous;
  if (name == "SSET_TOKENS") return SourceRepresentation::kSsetTokens;
  throw Error(ErrorKind::kUsage, "unknown source representation '" + std::string(name) + "'");
}

Modality target_modality(TaskKind t) { return t == TaskKind::kTts ? Modality::kSpeech : Modality::kText; }

int task_id_token(TaskKind t) { return static_cast<int>(t); }

int Vocabulary::language_tag(int language) const {
  require(language >= 0 && language < num_languages, "unknown language tag " + std::to_string(language));
  return num_symbols + language;
}

int Vocabulary::gender_tag(Gender g) const { return num_symbols + num_languages + static_cast<int>(g); }

std::vector<int> Vocabulary::tag_ids(TaskKind t) const {
  std::vector<int> ids;
  if (t == TaskKind::kLid) {
    for (int l = 0; l < num_languages; ++l) ids.push_back(language_tag(l));
  } else if (t == TaskKind::kGid) {
    ids = {gender_tag(Gender::kMale), gender_tag(Gender::kFemale)};
  } else {
    fail("tag_ids: " + std::string(task_name(t)) + " is not a classification task");
  }
  return ids;
}

std::optional<int> Vocabulary::language_of_tag(int id) const {
  if (id >= num_symbols && id < num_symbols + num_languages) return id - num_symbols;
  return std::nullopt;
}

std::optional<Gender> Vocabulary::gender_of_tag(int id) const {
  if (id == gender_tag(Gender::kMale)) return Gender::kMale;
  if (id == gender_tag(Gender::kFemale)) return Gender::kFemale;
  return std::nullopt;
}

RawExample RawExample::from(const ToyUtterance& u) {
  RawExample ex;
  ex.id = u.id;
  ex.frames = u.frames;
  ex.text = u.text;
  ex.language = u.language;
  ex.gender = u.gender;
  ex.speaker = u.speaker;
  return ex;
}

RawExample concatenate(const RawExample& a, const RawExample& b) {
  require(a.speaker == b.speaker, "concatenate: utterances of different speakers");
  require(a.frames.cols() == b.frames.cols(), "concatenate: frame dims differ");
  require(a.codes.has_value() == b.codes.has_value(), "concatenate: only one example has codes");
  RawExample out = a;
  out.id = a.id + "+" + b.id;
  std::vector<double> values = a.frames.values();
  values.insert(values.end(), b.frames.values().begin(), b.frames.values().end());
  out.frames = Tensor({a.frames.rows() + b.frames.rows(), a.frames.cols()}, std::move(values));
  out.text.insert(out.text.end(), b.text.begin(), b.text.end());
  if (a.codes) out.codes->insert(out.codes->end(), b.codes->begin(), b.codes->end());
  return out;
}

namespace {

void append_source(std::vector<SequenceElement>& out, const RawExample& ex, SourceRepresentation source) {
  if (source == SourceRepresentation::kContinuous) {
    require(ex.frames.rows() >= 1 && !ex.frames.empty(), "assemble: example '" + ex.id + "' has no frames");
    for (std::size_t t = 0; t < ex.frames.rows(); ++t) out.push_back(SequenceElement::continuous(ex.frames.row(t)));
  } else {
    require(ex.codes.has_value() && !ex.codes->empty(), "assemble: example '" + ex.id + "' has no speech tokens");
    for (int c : *ex.codes) out.push_back(SequenceElement::speech(c));
  }
}

void check_text(const RawExample& ex, const Vocabulary& vocab) {
  require(!ex.text.empty(), "assemble: example '" + ex.id + "' has empty text");
  for (int s : ex.text) require(s >= 0 && s < vocab.num_symbols, "assemble: symbol id out of range");
}

}  // namespace

AssembledExample assemble_asr(const RawExample& ex, const Vocabulary& vocab, SourceRepresentation source) {
  check_text(ex, vocab);
  AssembledExample out;
  out.task = TaskKind::kAsr;
  append_source(out.elements, ex, source);
  out.elements.push_back(SequenceElement::task(TaskKind::kAsr));
  out.boundary = out.elements.size();
  for (int s : ex.text) {
    out.elements.push_back(SequenceElement::text(s));
    out.targets.push_back(s);
  }
  out.targets.push_back(vocab.text_eos());
  return out;
}

AssembledExample assemble_tts_train(const RawExample& ex, const Vocabulary& vocab) {
  check_text(ex, vocab);
  require(ex.codes.has_value() && !ex.codes->empty(), "assemble_tts_train: example '" + ex.id + "' has no SSET codes");
  AssembledExample out;
  out.task = TaskKind::kTts;
  for (int s : ex.text) out.elements.push_back(SequenceElement::text(s));
  out.elements.push_back(SequenceElement::task(TaskKind::kTts));
  out.boundary = out.elements.size();
  for (int c : *ex.codes) {
    require(c >= 0 && c < vocab.num_codes, "assemble_tts_train: code out of range");
    out.elements.push_back(SequenceElement::speech(c));
    out.targets.push_back(c);
  }
  out.targets.push_back(vocab.speech_eos());
  return out;
}

AssembledExample assemble_classification(const RawExample& ex, TaskKind task, const Vocabulary& vocab,
                                         SourceRepresentation source) {
  require(task == TaskKind::kLid || task == TaskKind::kGid, "assemble_classification: task must be LID or GID");
  const int tag = task == TaskKind::kLid ? vocab.language_tag(ex.language) : vocab.gender_tag(ex.gender);
  AssembledExample out;
  out.task = task;
  append_source(out.elements, ex, source);
  out.elements.push_back(SequenceElement::task(task));
  out.boundary = out.elements.size();
  out.elements.push_back(SequenceElement::text(tag));
  out.targets = {tag, vocab.text_eos()};
  return out;
}

AssembledExample assemble(const RawExample& ex, TaskKind task, const Vocabulary& vocab, SourceRepresentation source) {
  switch (task) {
    case TaskKind::kAsr: return assemble_asr(ex, vocab, source);
    case TaskKind::kTts: return assemble_tts_train(ex, vocab);
    case TaskKind::kLid:
    case TaskKind::kGid: return assemble_classification(ex, task, vocab, source);
    case TaskKind::kTextLm: return assemble_text_lm(ex.text, vocab);
  }
  fail("assemble: unknown task");
}

AssembledExample assemble_text_lm(std::span<const int> text, const Vocabulary& vocab) {
  require(!text.empty(), "assemble_text_lm: empty text");
  AssembledExample out;
  out.task = TaskKind::kTextLm;
  for (int s : text) {
    require(s >= 0 && s < vocab.num_symbols, "assemble_text_lm: symbol id out of range");
    out.elements.push_back(SequenceElement::text(s));
  }
  out.boundary = 1;
  for (std::size_t i = 1; i < text.size(); ++i) out.targets.push_back(text[i]);
  out.targets.push_back(vocab.text_eos());
  return out;
}

InferencePrefix assemble_tts_infer_prefix(std::span<const int> prompt_text, std::span<const int> target_text,
                                          std::span<const int> prompt_codes, const Vocabulary& vocab) {
  require(!prompt_text.empty() && !target_text.empty() && !prompt_codes.empty(),
          "assemble_tts_infer_prefix: prompt text, target text and prompt codes must all be non-empty");
  InferencePrefix out;
  for (int s : prompt_text) out.elements.push_back(SequenceElement::text(s));
  for (int s : target_text) out.elements.push_back(SequenceElement::text(s));
  out.elements.push_back(SequenceElement::task(TaskKind::kTts));
  out.boundary = out.elements.size();
  for (int c : prompt_codes) {
    require(c >= 0 && c < vocab.num_codes, "assemble_tts_infer_prefix: code out of range");
    out.elements.push_back(SequenceElement::speech(c));
  }
  return out;
}

InferencePrefix assemble_infer_prefix(const RawExample& ex, TaskKind task, const Vocabulary& vocab,
                                      SourceRepresentation source) {
  InferencePrefix out;
  if (task == TaskKind::kTts) {
    check_text(ex, vocab);
    for (int s : ex.text) out.elements.push_back(SequenceElement::text(s));
  } else {
    append_source(out.elements, ex, source);
  }
  out.elements.push_back(SequenceElement::task(task));
  out.boundary = out.elements.size();
  return out;
}

Disassembled disassemble(const AssembledExample& ex, const Vocabulary& vocab) {
  require(ex.boundary >= 1 && ex.boundary <= ex.elements.size(), "disassemble: bad boundary");
  Disassembled out;
  for (std::size_t i = 0; i + 1 < ex.boundary; ++i) {
    const auto& e = ex.elements[i];
    if (e.kind == ElementKind::kTextToken) out.text.push_back(e.ids[0]);
    if (e.kind == ElementKind::kSpeechToken) out.codes.push_back(e.ids[0]);
  }
  for (std::size_t i = ex.boundary; i < ex.elements.size(); ++i) {
    const auto& e = ex.elements[i];
    switch (ex.task) {
      case TaskKind::kAsr:
        out.text.push_back(e.ids[0]);
        break;
      case TaskKind::kTts:
        out.codes.push_back(e.ids[0]);
        break;
      case TaskKind::kLid:
      case TaskKind::kGid:
        out.tag = e.ids[0];
        break;
      case TaskKind::kTextLm:
        break;
    }
  }
  if (ex.task == TaskKind::kTextLm) {
    for (const auto& e : ex.elements) out.text.push_back(e.ids[0]);
  }
  (void)vocab;
  return out;
}

}  // namespace polyspeech
