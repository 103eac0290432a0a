#include "polyspeech/experiment.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "polyspeech/error.hpp"

namespace polyspeech {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

// --- config <-> json --------------------------------------------------------

std::string_view activation_name(Activation a) {
  switch (a) {
    case Activation::kIdentity: return "IDENTITY";
    case Activation::kRelu: return "RELU";
    case Activation::kTanh: return "TANH";
    case Activation::kGelu: return "GELU";
  }
  return "TANH";
}

Activation parse_activation(std::string_view s) {
  for (Activation a : {Activation::kIdentity, Activation::kRelu, Activation::kTanh, Activation::kGelu}) {
    if (activation_name(a) == s) return a;
  }
  fail(ErrorKind::kUsage, "unknown activation '" + std::string(s) + "'");
}

class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) fail(ErrorKind::kUsage, "config section '" + name_ + "' must be an object");
  }
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.contains(key)) fail(ErrorKind::kUsage, "unknown config key '" + qualified(key) + "'");
    }
  }
  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      fail(ErrorKind::kUsage, "config key '" + qualified(key) + "': " + e.what());
    }
  }
  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }
  std::string qualified(const std::string& key) const { return name_.empty() ? key : name_ + "." + key; }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

json world_json(const ToyWorldConfig& w) {
  return {{"num_languages", w.num_languages},
          {"symbols_per_language", w.symbols_per_language},
          {"shared_symbol_fraction", w.shared_symbol_fraction},
          {"num_speakers", w.num_speakers},
          {"frame_dim", w.frame_dim},
          {"symbol_subspace_dim", w.symbol_subspace_dim},
          {"frames_per_symbol", w.frames_per_symbol},
          {"symbol_scale", w.symbol_scale},
          {"min_symbol_separation", w.min_symbol_separation},
          {"speaker_scale", w.speaker_scale},
          {"gender_offset", w.gender_offset},
          {"noise_fraction", w.noise_fraction},
          {"bigram_sharpness", w.bigram_sharpness},
          {"min_text_len", w.min_text_len},
          {"max_text_len", w.max_text_len}};
}

void read_world(const json& j, ToyWorldConfig& w) {
  Section s(j, "world");
  s.get("num_languages", w.num_languages);
  s.get("symbols_per_language", w.symbols_per_language);
  s.get("shared_symbol_fraction", w.shared_symbol_fraction);
  s.get("num_speakers", w.num_speakers);
  s.get("frame_dim", w.frame_dim);
  s.get("symbol_subspace_dim", w.symbol_subspace_dim);
  s.get("frames_per_symbol", w.frames_per_symbol);
  s.get("symbol_scale", w.symbol_scale);
  s.get("min_symbol_separation", w.min_symbol_separation);
  s.get("speaker_scale", w.speaker_scale);
  s.get("gender_offset", w.gender_offset);
  s.get("noise_fraction", w.noise_fraction);
  s.get("bigram_sharpness", w.bigram_sharpness);
  s.get("min_text_len", w.min_text_len);
  s.get("max_text_len", w.max_text_len);
}

json corpus_json(const CorpusConfig& c) {
  return {{"train_size", c.train_size},
          {"val_size", c.val_size},
          {"test_size", c.test_size},
          {"held_out_speakers", c.held_out_speakers},
          {"held_out_per_language", c.held_out_per_language},
          {"class_balance", c.class_balance},
          {"sigma", c.sigma}};
}

void read_corpus(const json& j, CorpusConfig& c) {
  Section s(j, "corpus");
  s.get("train_size", c.train_size);
  s.get("val_size", c.val_size);
  s.get("test_size", c.test_size);
  s.get("held_out_speakers", c.held_out_speakers);
  s.get("held_out_per_language", c.held_out_per_language);
  s.get("class_balance", c.class_balance);
  s.get("sigma", c.sigma);
}

json sset_json(const SsetConfig& c, const SsetTrainConfig& t) {
  return {{"latent_dim", c.latent_dim},
          {"downsample_factor", c.downsample_factor},
          {"codebook_size", c.codebook_size},
          {"num_rvq_layers", c.num_rvq_layers},
          {"commitment_weight", c.commitment_weight},
          {"ema_decay", c.ema_decay},
          {"dead_code_steps", c.dead_code_steps},
          {"channels", c.channels},
          {"kernel", c.kernel},
          {"activation", activation_name(c.activation)},
          {"updates", t.updates},
          {"batch_size", t.batch_size},
          {"peak_lr", t.peak_lr},
          {"warmup_steps", t.warmup_steps},
          {"validate_every", t.validate_every},
          {"init_sample", t.init_sample}};
}

void read_sset(const json& j, SsetConfig& c, SsetTrainConfig& t) {
  Section s(j, "sset");
  std::string act(activation_name(c.activation));
  s.get("latent_dim", c.latent_dim);
  s.get("downsample_factor", c.downsample_factor);
  s.get("codebook_size", c.codebook_size);
  s.get("num_rvq_layers", c.num_rvq_layers);
  s.get("commitment_weight", c.commitment_weight);
  s.get("ema_decay", c.ema_decay);
  s.get("dead_code_steps", c.dead_code_steps);
  s.get("channels", c.channels);
  s.get("kernel", c.kernel);
  s.get("activation", act);
  c.activation = parse_activation(act);
  s.get("updates", t.updates);
  s.get("batch_size", t.batch_size);
  s.get("peak_lr", t.peak_lr);
  s.get("warmup_steps", t.warmup_steps);
  s.get("validate_every", t.validate_every);
  s.get("init_sample", t.init_sample);
}

json lm_json(const LmConfig& c) {
  return {{"num_layers", c.num_layers}, {"num_heads", c.num_heads},     {"d_model", c.d_model},
          {"d_ffn", c.d_ffn},           {"max_seq_len", c.max_seq_len}, {"full_causal", c.full_causal}};
}

void read_lm(const json& j, LmConfig& c) {
  Section s(j, "lm");
  s.get("num_layers", c.num_layers);
  s.get("num_heads", c.num_heads);
  s.get("d_model", c.d_model);
  s.get("d_ffn", c.d_ffn);
  s.get("max_seq_len", c.max_seq_len);
  s.get("full_causal", c.full_causal);
}

json train_json(const TrainConfig& c) {
  return {{"accumulation_steps", c.accumulation_steps},
          {"max_updates", c.max_updates},
          {"batch_size", c.batch_size},
          {"validate_every", c.validate_every},
          {"max_validation_examples", c.max_validation_examples},
          {"peak_lr", c.adam.peak_lr},
          {"warmup_steps", c.adam.warmup_steps},
          {"checkpoint_dir", c.checkpoint_dir}};
}

void read_train(const json& j, TrainConfig& c) {
  Section s(j, "train");
  s.get("accumulation_steps", c.accumulation_steps);
  s.get("max_updates", c.max_updates);
  s.get("batch_size", c.batch_size);
  s.get("validate_every", c.validate_every);
  s.get("max_validation_examples", c.max_validation_examples);
  s.get("peak_lr", c.adam.peak_lr);
  s.get("warmup_steps", c.adam.warmup_steps);
  s.get("checkpoint_dir", c.checkpoint_dir);
}

json decode_json(const DecodeSettings& d) {
  return {{"k", d.k},
          {"beam_size", d.beam_size},
          {"max_len", d.max_len},
          {"temperature", d.temperature},
          {"length_normalize", d.length_normalize},
          {"constrain_tags", d.constrain_tags}};
}

void read_decode(const json& j, DecodeSettings& d) {
  Section s(j, "decode");
  s.get("k", d.k);
  s.get("beam_size", d.beam_size);
  s.get("max_len", d.max_len);
  s.get("temperature", d.temperature);
  s.get("length_normalize", d.length_normalize);
  s.get("constrain_tags", d.constrain_tags);
}

json decoder_json(const DecoderTrainConfig& d) {
  return {{"code_dim", d.code_dim},
          {"speaker_hidden", d.speaker_hidden},
          {"speaker_dim", d.speaker_dim},
          {"updates", d.updates},
          {"batch_size", d.batch_size},
          {"peak_lr", d.peak_lr},
          {"warmup_steps", d.warmup_steps},
          {"validate_every", d.validate_every},
          {"freeze_speaker_encoder", d.freeze_speaker_encoder}};
}

void read_decoder(const json& j, DecoderTrainConfig& d) {
  Section s(j, "decoder");
  s.get("code_dim", d.code_dim);
  s.get("speaker_hidden", d.speaker_hidden);
  s.get("speaker_dim", d.speaker_dim);
  s.get("updates", d.updates);
  s.get("batch_size", d.batch_size);
  s.get("peak_lr", d.peak_lr);
  s.get("warmup_steps", d.warmup_steps);
  s.get("validate_every", d.validate_every);
  s.get("freeze_speaker_encoder", d.freeze_speaker_encoder);
}

json text_lm_json(const TextLmTrainConfig& t) {
  return {{"updates", t.updates},
          {"batch_size", t.batch_size},
          {"corpus_size", t.corpus_size},
          {"peak_lr", t.peak_lr},
          {"warmup_steps", t.warmup_steps}};
}

void read_text_lm(const json& j, TextLmTrainConfig& t) {
  Section s(j, "text_lm");
  s.get("updates", t.updates);
  s.get("batch_size", t.batch_size);
  s.get("corpus_size", t.corpus_size);
  s.get("peak_lr", t.peak_lr);
  s.get("warmup_steps", t.warmup_steps);
}

json to_json(const ExperimentConfig& c) {
  json tasks = json::array();
  for (TaskKind t : c.tasks) tasks.push_back(task_name(t));
  return {{"seed", c.seed},
          {"world", world_json(c.world)},
          {"corpus", corpus_json(c.corpus)},
          {"sset", sset_json(c.sset, c.sset_train)},
          {"lm", lm_json(c.lm)},
          {"train", train_json(c.train)},
          {"decode", decode_json(c.decode)},
          {"decoder", decoder_json(c.decoder)},
          {"tasks", tasks},
          {"source", source_name(c.source)},
          {"text_lm_init", c.text_lm_init},
          {"tts_concat_fraction", c.tts_concat_fraction},
          {"text_lm", text_lm_json(c.text_lm)},
          {"out_dir", c.out_dir},
          {"manifests_dir", c.manifests_dir},
          {"sset_checkpoint", c.sset_checkpoint}};
}

ExperimentConfig from_json(const json& j) {
  ExperimentConfig c;
  Section s(j, "");
  s.get("seed", c.seed);
  if (const json* w = s.child("world")) read_world(*w, c.world);
  if (const json* w = s.child("corpus")) read_corpus(*w, c.corpus);
  if (const json* w = s.child("sset")) read_sset(*w, c.sset, c.sset_train);
  if (const json* w = s.child("lm")) read_lm(*w, c.lm);
  if (const json* w = s.child("train")) read_train(*w, c.train);
  if (const json* w = s.child("decode")) read_decode(*w, c.decode);
  if (const json* w = s.child("decoder")) read_decoder(*w, c.decoder);
  if (const json* w = s.child("text_lm")) read_text_lm(*w, c.text_lm);
  std::vector<std::string> tasks;
  s.get("tasks", tasks);
  if (!tasks.empty()) {
    c.tasks.clear();
    for (const auto& t : tasks) c.tasks.push_back(parse_task(t));
  }
  std::string source(source_name(c.source));
  s.get("source", source);
  c.source = parse_source(source);
  s.get("text_lm_init", c.text_lm_init);
  s.get("tts_concat_fraction", c.tts_concat_fraction);
  s.get("out_dir", c.out_dir);
  s.get("manifests_dir", c.manifests_dir);
  s.get("sset_checkpoint", c.sset_checkpoint);
  return c;
}

json parse_json(std::string_view text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::kUsage, what + ": " + e.what());
  }
}

// --- small file helpers -----------------------------------------------------

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) fail(ErrorKind::kDependency, "cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write " + p.string());
  out << s;
}

std::string checkpoint_name(std::int64_t update) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "update-%06lld.pspk", static_cast<long long>(update));
  return buf;
}

bool has_task(const std::vector<TaskKind>& tasks, TaskKind t) {
  return std::find(tasks.begin(), tasks.end(), t) != tasks.end();
}

/// Keeps the header and rows up to `update`, so a resumed run continues the same file.
void truncate_log(const fs::path& path, std::int64_t update) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kDependency, "cannot resume: missing log " + path.string());
  std::string line, kept;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      kept += line + "\n";
      header = false;
      continue;
    }
    if (std::stoll(line.substr(0, line.find(','))) <= update) kept += line + "\n";
  }
  in.close();
  write_text(path, kept);
}

json scores_json(const std::vector<CheckpointScore>& scores) {
  json a = json::array();
  for (const auto& s : scores) a.push_back({{"name", s.name}, {"validation_loss", s.validation_loss}});
  return a;
}

std::vector<CheckpointScore> scores_from(const json& a) {
  std::vector<CheckpointScore> out;
  for (const auto& s : a) out.push_back({s.at("name").get<std::string>(), s.at("validation_loss").get<double>()});
  return out;
}

/// Shared bookkeeping for a stage that validates and checkpoints periodically.
class StageWriter {
 public:
  StageWriter(const Layout& layout, std::string stage, fs::path dir)
      : layout_(layout), stage_(std::move(stage)), dir_(std::move(dir)) {}

  const fs::path& dir() const { return dir_; }

  std::optional<Checkpoint> latest() const {
    const fs::path pointer = dir_ / "latest";
    if (!fs::exists(pointer)) return std::nullopt;
    return load_checkpoint(dir_ / read_text(pointer).substr(0, read_text(pointer).find('\n')));
  }

  void save(std::int64_t update, Checkpoint ckpt, json& doc, double validation_loss) {
    const std::string name = checkpoint_name(update);
    scores.push_back({name, validation_loss});
    doc["update"] = update;
    doc["validation_loss"] = validation_loss;
    doc["scores"] = scores_json(scores);
    ckpt.document = doc.dump();
    fs::create_directories(dir_);
    save_checkpoint(dir_ / name, ckpt);
    write_text(dir_ / "latest", name + "\n");
    const auto& best = scores[select_best(scores)];
    write_text(dir_ / "best", best.name + "\n");
  }

  StageResult result(std::int64_t updates) const {
    StageResult r;
    r.stage = stage_;
    r.updates = updates;
    r.scores = scores;
    if (!scores.empty()) {
      const auto& best = scores[select_best(scores)];
      r.best_checkpoint = dir_ / best.name;
      r.best_validation_loss = best.validation_loss;
    }
    return r;
  }

  std::vector<CheckpointScore> scores;

 private:
  const Layout& layout_;
  std::string stage_;
  fs::path dir_;
};

void require_corpus(const Layout& layout) {
  if (!fs::exists(layout.manifest("train"))) {
    fail(ErrorKind::kDependency, "no corpus under " + layout.manifests().string() + " (run gen-data first)");
  }
}

std::vector<FrameSequence> frames_of(const std::vector<ToyUtterance>& utts) {
  std::vector<FrameSequence> out;
  for (const auto& u : utts) out.push_back(u.frames);
  return out;
}

void store_codebooks(Checkpoint& ckpt, const SsetModel& model) {
  for (const auto& book : model.codebooks()) {
    const std::string p = "codebook." + std::to_string(book.layer) + ".";
    const std::size_t k = book.size();
    ckpt.tensors[p + "vectors"] = book.vectors;
    ckpt.tensors[p + "ema_sum"] = book.ema_sum;
    ckpt.tensors[p + "ema_count"] = Tensor({k}, book.ema_count);
    ckpt.tensors[p + "usage"] = Tensor({k}, book.usage);
    ckpt.tensors[p + "idle_steps"] = Tensor({k}, book.idle_steps);
  }
}

void restore_codebooks(const Checkpoint& ckpt, SsetModel& model) {
  std::vector<Codebook> books;
  for (int q = 0; q < model.config().num_rvq_layers; ++q) {
    const std::string p = "codebook." + std::to_string(q) + ".";
    const auto get = [&](const std::string& n) -> const Tensor& {
      const auto it = ckpt.tensors.find(p + n);
      if (it == ckpt.tensors.end()) fail(ErrorKind::kDependency, "checkpoint lacks " + p + n);
      return it->second;
    };
    Codebook book(q, get("vectors"));
    book.vectors = get("vectors");
    book.ema_sum = get("ema_sum");
    book.ema_count = get("ema_count").values();
    book.usage = get("usage").values();
    book.idle_steps = get("idle_steps").values();
    books.push_back(std::move(book));
  }
  model.set_codebooks(std::move(books));
}

void round_codebooks(SsetModel& model) {
  for (auto& book : model.codebooks()) {
    round_to_float32(book.vectors);
    round_to_float32(book.ema_sum);
    for (auto* v : {&book.ema_count, &book.usage, &book.idle_steps}) {
      for (double& x : *v) x = static_cast<float>(x);
    }
  }
}

json sset_config_json(const SsetConfig& c) {
  return {{"frame_dim", c.frame_dim},
          {"latent_dim", c.latent_dim},
          {"downsample_factor", c.downsample_factor},
          {"codebook_size", c.codebook_size},
          {"num_rvq_layers", c.num_rvq_layers},
          {"commitment_weight", c.commitment_weight},
          {"ema_decay", c.ema_decay},
          {"dead_code_steps", c.dead_code_steps},
          {"channels", c.channels},
          {"kernel", c.kernel},
          {"activation", activation_name(c.activation)},
          {"seed", c.seed}};
}

SsetConfig sset_config_from(const json& j) {
  SsetConfig c;
  c.frame_dim = j.at("frame_dim");
  c.latent_dim = j.at("latent_dim");
  c.downsample_factor = j.at("downsample_factor");
  c.codebook_size = j.at("codebook_size");
  c.num_rvq_layers = j.at("num_rvq_layers");
  c.commitment_weight = j.at("commitment_weight");
  c.ema_decay = j.at("ema_decay");
  c.dead_code_steps = j.at("dead_code_steps");
  c.channels = j.at("channels");
  c.kernel = j.at("kernel");
  c.activation = parse_activation(j.at("activation").get<std::string>());
  c.seed = j.at("seed");
  return c;
}

json lm_config_json(const LmConfig& c) {
  json tasks = json::array();
  for (TaskKind t : c.tasks) tasks.push_back(task_name(t));
  json j = lm_json(c);
  j["text_vocab_size"] = c.text_vocab_size;
  j["speech_vocab_size"] = c.speech_vocab_size;
  j["speech_token_dims"] = c.speech_token_dims;
  j["num_task_ids"] = c.num_task_ids;
  j["continuous_input_dim"] = c.continuous_input_dim;
  j["tasks"] = tasks;
  j["seed"] = c.seed;
  return j;
}

LmConfig lm_config_from(const json& j) {
  LmConfig c;
  c.num_layers = j.at("num_layers");
  c.num_heads = j.at("num_heads");
  c.d_model = j.at("d_model");
  c.d_ffn = j.at("d_ffn");
  c.max_seq_len = j.at("max_seq_len");
  c.full_causal = j.at("full_causal");
  c.text_vocab_size = j.at("text_vocab_size");
  c.speech_vocab_size = j.at("speech_vocab_size");
  c.speech_token_dims = j.at("speech_token_dims");
  c.num_task_ids = j.at("num_task_ids");
  c.continuous_input_dim = j.at("continuous_input_dim");
  c.tasks.clear();
  for (const auto& t : j.at("tasks")) c.tasks.push_back(parse_task(t.get<std::string>()));
  c.seed = j.at("seed");
  return c;
}

json decoder_config_json(const TokenDecoderConfig& c) {
  return {{"num_codes", c.num_codes},           {"code_dim", c.code_dim},
          {"upsample", c.upsample},             {"frame_dim", c.frame_dim},
          {"speaker_hidden", c.speaker_hidden}, {"speaker_dim", c.speaker_dim},
          {"seed", c.seed}};
}

TokenDecoderConfig decoder_config_from(const json& j) {
  TokenDecoderConfig c;
  c.num_codes = j.at("num_codes");
  c.code_dim = j.at("code_dim");
  c.upsample = j.at("upsample");
  c.frame_dim = j.at("frame_dim");
  c.speaker_hidden = j.at("speaker_hidden");
  c.speaker_dim = j.at("speaker_dim");
  c.seed = j.at("seed");
  return c;
}

json checkpoint_doc(const Checkpoint& ckpt, const std::string& stage) {
  json doc = parse_json(ckpt.document, "checkpoint document");
  if (doc.value("stage", "") != stage) {
    fail(ErrorKind::kDependency, "checkpoint is a '" + doc.value("stage", "") + "' checkpoint, expected '" + stage + "'");
  }
  return doc;
}

}  // namespace

// --- config ----------------------------------------------------------------

std::string config_to_json(const ExperimentConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

ExperimentConfig config_from_json(std::string_view text) { return from_json(parse_json(text, "config")); }

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kUsage, "cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return config_from_json(ss.str());
}

void apply_override(ExperimentConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    fail(ErrorKind::kUsage, "override '" + std::string(assignment) + "' is not key=value");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  json j = to_json(cfg);
  json* node = &j;
  std::string rest = key;
  while (true) {
    const auto dot = rest.find('.');
    const std::string part = rest.substr(0, dot);
    if (!node->is_object() || !node->contains(part)) fail(ErrorKind::kUsage, "unknown config key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    rest = rest.substr(dot + 1);
  }
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  if (node->is_array() && value.is_string()) {
    json list = json::array();
    std::stringstream ss(raw);
    std::string item;
    while (std::getline(ss, item, ',')) list.push_back(item);
    value = list;
  }
  *node = value;
  cfg = from_json(j);
}

void validate(const ExperimentConfig& cfg) {
  if (cfg.tasks.empty()) fail(ErrorKind::kUsage, "config: task list is empty");
  std::set<TaskKind> seen;
  for (TaskKind t : cfg.tasks) {
    if (t == TaskKind::kTextLm) fail(ErrorKind::kUsage, "config: TEXTLM is not a trainable task (use text_lm_init)");
    if (!seen.insert(t).second) fail(ErrorKind::kUsage, "config: duplicate task " + std::string(task_name(t)));
  }
  if (cfg.out_dir.empty()) fail(ErrorKind::kUsage, "config: out_dir is empty");
  try {
    validate(resolved_sset(cfg));
    validate(resolved_lm(cfg, cfg.tasks));
    validate(cfg.train);
    validate(resolved_decoder(cfg));
    for (TaskKind t : cfg.tasks) validate(decode_config_for(cfg, t));
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kInvalidArgument) fail(ErrorKind::kUsage, e.what());
    throw;
  }
}

ToyWorldConfig resolved_world(const ExperimentConfig& cfg) {
  ToyWorldConfig w = cfg.world;
  w.seed = cfg.seed;
  return w;
}

Vocabulary vocabulary_for(const ExperimentConfig& cfg) {
  const ToyWorld world(resolved_world(cfg));
  return Vocabulary{world.num_symbols(), world.num_languages(), cfg.sset.codebook_size};
}

SsetConfig resolved_sset(const ExperimentConfig& cfg) {
  SsetConfig s = cfg.sset;
  s.frame_dim = cfg.world.frame_dim;
  s.seed = cfg.seed;
  return s;
}

LmConfig resolved_lm(const ExperimentConfig& cfg, const std::vector<TaskKind>& tasks) {
  LmConfig c = lm_config_for(vocabulary_for(cfg), cfg.world.frame_dim);
  c.num_layers = cfg.lm.num_layers;
  c.num_heads = cfg.lm.num_heads;
  c.d_model = cfg.lm.d_model;
  c.d_ffn = cfg.lm.d_ffn;
  c.max_seq_len = cfg.lm.max_seq_len;
  c.full_causal = cfg.lm.full_causal;
  c.tasks = tasks;
  c.seed = cfg.seed;
  return c;
}

TokenDecoderConfig resolved_decoder(const ExperimentConfig& cfg) {
  TokenDecoderConfig d;
  d.num_codes = cfg.sset.codebook_size;
  d.code_dim = cfg.decoder.code_dim;
  d.upsample = cfg.sset.downsample_factor;
  d.frame_dim = cfg.world.frame_dim;
  d.speaker_hidden = cfg.decoder.speaker_hidden;
  d.speaker_dim = cfg.decoder.speaker_dim;
  d.seed = cfg.seed;
  return d;
}

DecodeConfig decode_config_for(const ExperimentConfig& cfg, TaskKind task) {
  DecodeConfig d;
  d.k = cfg.decode.k;
  d.beam_size = cfg.decode.beam_size;
  d.max_len = cfg.decode.max_len;
  d.temperature = cfg.decode.temperature;
  d.length_normalize = cfg.decode.length_normalize;
  d.seed = cfg.seed;
  switch (task) {
    case TaskKind::kAsr: d.mode = DecodeMode::kBeam; break;
    case TaskKind::kTts: d.mode = DecodeMode::kTopK; break;
    case TaskKind::kLid:
    case TaskKind::kGid:
      d.mode = DecodeMode::kGreedy;
      d.max_len = 1;
      if (cfg.decode.constrain_tags) d.allowed_ids = vocabulary_for(cfg).tag_ids(task);
      break;
    case TaskKind::kTextLm: d.mode = DecodeMode::kGreedy; break;
  }
  return d;
}

// --- layout -----------------------------------------------------------------

Layout::Layout(const ExperimentConfig& cfg)
    : root(cfg.out_dir), manifests_override(cfg.manifests_dir), sset_override(cfg.sset_checkpoint) {}

fs::path Layout::manifests() const { return manifests_override.empty() ? root / "manifests" : manifests_override; }

fs::path Layout::manifest(std::string_view split) const { return manifests() / (std::string(split) + ".jsonl"); }

fs::path Layout::log(std::string_view stage) const { return logs() / (std::string(stage) + ".csv"); }

fs::path Layout::best_checkpoint(std::string_view stage) const {
  const fs::path pointer = stage_dir(stage) / "best";
  if (!fs::exists(pointer)) {
    fail(ErrorKind::kDependency, "no trained '" + std::string(stage) + "' checkpoint under " +
                                     stage_dir(stage).string() + " (run train-" +
                                     (stage == "lm" ? std::string("lm") : std::string(stage)) + " first)");
  }
  const std::string name = read_text(pointer);
  return stage_dir(stage) / name.substr(0, name.find('\n'));
}

fs::path Layout::sset_checkpoint() const {
  if (!sset_override.empty()) {
    if (!fs::exists(sset_override)) fail(ErrorKind::kDependency, "SSET checkpoint not found: " + sset_override.string());
    return sset_override;
  }
  return best_checkpoint("sset");
}

// --- data -------------------------------------------------------------------

GenDataResult gen_data(const ExperimentConfig& cfg, bool force) {
  const Layout layout(cfg);
  const fs::path dir = layout.manifests();
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) fail(ErrorKind::kUsage, "output directory " + dir.string() + " is not empty (use --force)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
  const ToyWorld world(resolved_world(cfg));
  const Corpus corpus = sample_corpus(world, cfg.corpus);
  GenDataResult r{layout.manifest("train"), layout.manifest("val"), layout.manifest("test")};
  write_manifest(r.train, save_utterances(corpus.train, world, dir, dir / "frames"));
  write_manifest(r.val, save_utterances(corpus.val, world, dir, dir / "frames"));
  write_manifest(r.test, save_utterances(corpus.test, world, dir, dir / "frames"));
  return r;
}

Corpus load_corpus(const ExperimentConfig& cfg) {
  const Layout layout(cfg);
  require_corpus(layout);
  const ToyWorld world(resolved_world(cfg));
  Corpus c;
  c.train = load_utterances(layout.manifest("train"), world);
  c.val = load_utterances(layout.manifest("val"), world);
  c.test = load_utterances(layout.manifest("test"), world);
  return c;
}

std::vector<RawExample> raw_examples(const std::vector<ToyUtterance>& utts, const SsetModel* sset) {
  std::vector<RawExample> out;
  for (const auto& u : utts) {
    RawExample ex = RawExample::from(u);
    if (sset) ex.codes = sset->tokenize(u.frames).codes;
    out.push_back(std::move(ex));
  }
  return out;
}

TaskData assemble_task_data(const std::vector<RawExample>& raw, const std::vector<TaskKind>& tasks,
                            const Vocabulary& vocab, SourceRepresentation source, double tts_concat_fraction,
                            std::uint64_t seed) {
  require(tts_concat_fraction >= 0.0 && tts_concat_fraction <= 1.0, "tts_concat_fraction must be in [0, 1]");
  std::map<int, std::vector<std::size_t>> by_speaker;
  for (std::size_t i = 0; i < raw.size(); ++i) by_speaker[raw[i].speaker].push_back(i);
  const Rng rng(seed, "tts.concat");
  TaskData data;
  for (TaskKind t : tasks) {
    auto& list = data[t];
    for (std::size_t i = 0; i < raw.size(); ++i) {
      const auto& ex = raw[i];
      if (t == TaskKind::kTts && tts_concat_fraction > 0.0) {
        Rng r = rng.split(static_cast<std::uint64_t>(i));
        const auto& same = by_speaker[ex.speaker];
        if (same.size() > 1 && r.uniform() < tts_concat_fraction) {
          std::size_t j = same[r.uniform_int(same.size() - 1)];
          if (j == i) j = same.back();
          list.push_back(assemble_tts_train(concatenate(raw[j], ex), vocab));
          continue;
        }
      }
      list.push_back(assemble(ex, t, vocab, source));
    }
  }
  return data;
}

// --- SSET stage -------------------------------------------------------------

SsetModel load_sset(const fs::path& checkpoint) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const json doc = checkpoint_doc(ckpt, "sset");
  SsetModel model(sset_config_from(doc.at("sset_config")));
  restore_parameters(ckpt, model.params());
  restore_codebooks(ckpt, model);
  return model;
}

StageResult train_sset(const ExperimentConfig& cfg, bool resume) {
  validate(cfg);
  const Layout layout(cfg);
  require_corpus(layout);
  const Corpus corpus = load_corpus(cfg);
  const SsetTrainConfig& tc = cfg.sset_train;
  require(tc.updates >= 0 && tc.batch_size >= 1 && tc.validate_every >= 1, "sset training config is invalid");

  const SsetConfig sc = resolved_sset(cfg);
  SsetModel model(sc);
  AdamConfig adam;
  adam.peak_lr = tc.peak_lr;
  adam.warmup_steps = tc.warmup_steps;
  AdamState opt(adam);
  Rng batch_rng(cfg.seed, "sset.batches");
  Rng step_rng(cfg.seed, "sset.dead_codes");
  std::int64_t start = 0;

  StageWriter writer(layout, "sset", layout.stage_dir("sset"));
  const fs::path log_path = layout.log("sset");
  std::optional<Checkpoint> prior = resume ? writer.latest() : std::nullopt;
  if (prior) {
    const json doc = checkpoint_doc(*prior, "sset");
    restore_parameters(*prior, model.params());
    restore_codebooks(*prior, model);
    restore_adam(*prior, opt);
    opt.step_count = doc.at("adam_step");
    batch_rng.set_counter(doc.at("batch_rng"));
    step_rng.set_counter(doc.at("step_rng"));
    start = doc.at("update");
    writer.scores = scores_from(doc.at("scores"));
    truncate_log(log_path, start);
  } else {
    if (fs::exists(writer.dir())) fs::remove_all(writer.dir());
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(tc.init_sample), corpus.train.size());
    std::vector<FrameSequence> sample;
    for (std::size_t i = 0; i < n; ++i) sample.push_back(corpus.train[i].frames);
    init_codebooks(model, sample, cfg.seed);
    write_text(log_path, "update,task,loss,lr,wallclock_ms\n");
  }

  const auto val_frames = frames_of(corpus.val);
  std::ofstream log(log_path, std::ios::app);
  TrainingLog writer_log(log);
  for (std::int64_t u = start + 1; u <= tc.updates; ++u) {
    std::vector<FrameSequence> batch;
    for (int b = 0; b < tc.batch_size; ++b) batch.push_back(corpus.train[batch_rng.uniform_int(corpus.train.size())].frames);
    const SsetLosses parts = sset_train_step(model, opt, batch, step_rng);
    UpdateResult row;
    row.update = u;
    row.loss = parts.total;
    row.lr = warmup_lr(opt.config, opt.step_count);
    log << u << ",SSET," << format_loss(row.loss) << ',' << format_loss(row.lr) << ",0\n";
    if (u % tc.validate_every == 0 || u == tc.updates) {
      round_to_float32(model.params());
      round_to_float32(opt);
      round_codebooks(model);
      const double val = reconstruction_mse(model, val_frames);
      if (!std::isfinite(val)) fail(ErrorKind::kNumeric, "sset validation loss is not finite");
      Checkpoint ckpt;
      store_parameters(ckpt, model.params());
      store_codebooks(ckpt, model);
      store_adam(ckpt, opt);
      json doc = {{"stage", "sset"},
                  {"sset_config", sset_config_json(sc)},
                  {"adam_step", opt.step_count},
                  {"batch_rng", batch_rng.counter()},
                  {"step_rng", step_rng.counter()}};
      log.flush();
      writer.save(u, std::move(ckpt), doc, val);
    }
  }
  if (writer.scores.empty()) {
    // Zero updates: still publish the initialised codec.
    round_to_float32(model.params());
    round_codebooks(model);
    Checkpoint ckpt;
    store_parameters(ckpt, model.params());
    store_codebooks(ckpt, model);
    json doc = {{"stage", "sset"}, {"sset_config", sset_config_json(sc)}, {"adam_step", 0}, {"batch_rng", 0}, {"step_rng", 0}};
    writer.save(0, std::move(ckpt), doc, reconstruction_mse(model, val_frames));
  }
  return writer.result(std::max<std::int64_t>(start, tc.updates));
}

// --- LM stages --------------------------------------------------------------

MultiModalLm load_lm(const fs::path& checkpoint) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const json doc = parse_json(ckpt.document, "checkpoint document");
  const std::string stage = doc.value("stage", "");
  if (stage != "lm" && stage != "text_lm") {
    fail(ErrorKind::kDependency, "checkpoint is a '" + stage + "' checkpoint, expected an LM");
  }
  MultiModalLm model(lm_config_from(doc.at("lm_config")));
  restore_parameters(ckpt, model.params());
  return model;
}

namespace {

struct LmRun {
  std::string stage;
  fs::path dir;
  const TaskData* train = nullptr;
  const TaskData* val = nullptr;
  TrainConfig tc;
  int max_validation_examples = 0;
};

StageResult run_lm_training(const Layout& layout, MultiModalLm& model, const LmRun& run, bool resume,
                            const TrainHooks& hooks) {
  TrainerState state(run.tc);
  std::int64_t start = 0;
  StageWriter writer(layout, run.stage, run.dir);
  const fs::path log_path = layout.log(run.stage);
  std::optional<Checkpoint> prior = resume ? writer.latest() : std::nullopt;
  if (prior) {
    const json doc = checkpoint_doc(*prior, run.stage);
    restore_parameters(*prior, model.params());
    restore_adam(*prior, state.opt);
    state.opt.step_count = doc.at("adam_step");
    state.rng.set_counter(doc.at("trainer_rng"));
    state.updates = doc.at("update");
    start = state.updates;
    writer.scores = scores_from(doc.at("scores"));
    truncate_log(log_path, start);
  } else {
    if (fs::exists(run.dir)) fs::remove_all(run.dir);
    write_text(log_path, "update,task,loss,lr,wallclock_ms\n");
  }
  const TaskMix mix = task_mix_of(*run.train);
  std::ofstream log_file(log_path, std::ios::app);
  TrainingLog log(log_file);

  auto checkpoint = [&](std::int64_t u) {
    round_to_float32(model.params());
    round_to_float32(state.opt);
    const ValidationResult v = validation_loss(model, mix, *run.val, run.max_validation_examples);
    Checkpoint ckpt;
    store_parameters(ckpt, model.params());
    store_adam(ckpt, state.opt);
    json per_task = json::object();
    for (const auto& [t, loss] : v.per_task) per_task[std::string(task_name(t))] = loss;
    json doc = {{"stage", run.stage},
                {"lm_config", lm_config_json(model.config())},
                {"adam_step", state.opt.step_count},
                {"trainer_rng", state.rng.counter()},
                {"per_task_validation_loss", per_task}};
    log_file.flush();
    writer.save(u, std::move(ckpt), doc, v.loss);
    if (hooks.on_lm_validation) hooks.on_lm_validation(u, model);
  };

  for (std::int64_t u = start + 1; u <= run.tc.max_updates; ++u) {
    const UpdateResult r = train_update(model, state, mix, *run.train, run.tc);
    log.row(r);
    if (u % run.tc.validate_every == 0 || u == run.tc.max_updates) checkpoint(u);
  }
  if (writer.scores.empty()) checkpoint(0);
  return writer.result(std::max<std::int64_t>(start, run.tc.max_updates));
}

}  // namespace

StageResult train_text_lm(const ExperimentConfig& cfg) {
  validate(cfg);
  const Layout layout(cfg);
  const ToyWorld world(resolved_world(cfg));
  const Vocabulary vocab = vocabulary_for(cfg);
  const TextLmTrainConfig& tc = cfg.text_lm;
  require(tc.corpus_size >= 1, "text_lm.corpus_size must be >= 1");

  Rng rng(cfg.seed, "text_lm.corpus");
  TaskData train, val;
  for (int i = 0; i < tc.corpus_size; ++i) {
    train[TaskKind::kTextLm].push_back(assemble_text_lm(world.sample_text(i % world.num_languages(), rng), vocab));
  }
  const int n_val = std::max(1, tc.corpus_size / 10);
  for (int i = 0; i < n_val; ++i) {
    val[TaskKind::kTextLm].push_back(assemble_text_lm(world.sample_text(i % world.num_languages(), rng), vocab));
  }
  MultiModalLm model(resolved_lm(cfg, {TaskKind::kTextLm}));
  LmRun run;
  run.stage = "text_lm";
  run.dir = layout.stage_dir("text_lm");
  run.train = &train;
  run.val = &val;
  run.tc = cfg.train;
  run.tc.max_updates = tc.updates;
  run.tc.batch_size = tc.batch_size;
  run.tc.validate_every = std::max(1, tc.updates);
  run.tc.adam.peak_lr = tc.peak_lr;
  run.tc.adam.warmup_steps = tc.warmup_steps;
  return run_lm_training(layout, model, run, false, {});
}

StageResult train_lm(const ExperimentConfig& cfg, bool resume, const TrainHooks& hooks) {
  validate(cfg);
  const Layout layout(cfg);
  require_corpus(layout);
  const bool needs_sset = cfg.source == SourceRepresentation::kSsetTokens || has_task(cfg.tasks, TaskKind::kTts);
  std::optional<SsetModel> sset;
  if (needs_sset) {
    try {
      sset.emplace(load_sset(layout.sset_checkpoint()));
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kDependency) throw;
      fail(ErrorKind::kDependency, std::string("train-lm needs the SSET stage: ") + e.what());
    }
    require(sset->config().codebook_size == cfg.sset.codebook_size, "SSET checkpoint codebook size differs from config");
  }
  const Corpus corpus = load_corpus(cfg);
  const Vocabulary vocab = vocabulary_for(cfg);
  const SsetModel* codec = sset ? &*sset : nullptr;
  const TaskData train = assemble_task_data(raw_examples(corpus.train, codec), cfg.tasks, vocab, cfg.source,
                                            cfg.tts_concat_fraction, cfg.seed);
  const TaskData val = assemble_task_data(raw_examples(corpus.val, codec), cfg.tasks, vocab, cfg.source);

  MultiModalLm model(resolved_lm(cfg, cfg.tasks));
  const StageWriter probe(layout, "lm", cfg.train.checkpoint_dir.empty() ? layout.stage_dir("lm") : fs::path(cfg.train.checkpoint_dir));
  const bool resuming = resume && fs::exists(probe.dir() / "latest");
  if (cfg.text_lm_init && !resuming) {
    const StageResult pre = train_text_lm(cfg);
    init_from_text_lm(load_lm(pre.best_checkpoint), model);
  }
  LmRun run;
  run.stage = "lm";
  run.dir = probe.dir();
  run.train = &train;
  run.val = &val;
  run.tc = cfg.train;
  run.tc.seed = cfg.seed;
  run.max_validation_examples = cfg.train.max_validation_examples;
  return run_lm_training(layout, model, run, resuming, hooks);
}

// --- token decoder stage ----------------------------------------------------

TokenDecoderModel load_decoder(const fs::path& checkpoint) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const json doc = checkpoint_doc(ckpt, "decoder");
  TokenDecoderModel model(decoder_config_from(doc.at("decoder_config")));
  restore_parameters(ckpt, model.params());
  return model;
}

namespace {

/// Pairs each utterance with a different utterance of the same speaker drawn
/// from `pool`; utterances without such a partner are skipped.
std::vector<DecoderExample> decoder_examples(const std::vector<ToyUtterance>& utts,
                                             const std::vector<ToyUtterance>& pool, const SsetModel& sset,
                                             Rng rng) {
  std::map<int, std::vector<std::size_t>> by_speaker;
  for (std::size_t i = 0; i < pool.size(); ++i) by_speaker[pool[i].speaker].push_back(i);
  std::vector<DecoderExample> out;
  for (std::size_t i = 0; i < utts.size(); ++i) {
    const auto& u = utts[i];
    std::vector<std::size_t> partners;
    for (std::size_t j : by_speaker[u.speaker]) {
      if (pool[j].id != u.id) partners.push_back(j);
    }
    if (partners.empty()) continue;
    Rng pick = rng.split(static_cast<std::uint64_t>(i));
    const auto& p = pool[partners[pick.uniform_int(partners.size())]];
    DecoderExample ex;
    ex.codes = sset.tokenize(u.frames).codes;
    ex.target = u.frames;
    ex.prompt = p.frames;
    ex.target_speaker = u.speaker;
    ex.prompt_speaker = p.speaker;
    ex.target_id = u.id;
    ex.prompt_id = p.id;
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace

StageResult train_decoder(const ExperimentConfig& cfg, bool resume) {
  validate(cfg);
  const Layout layout(cfg);
  require_corpus(layout);
  std::optional<SsetModel> sset;
  try {
    sset.emplace(load_sset(layout.sset_checkpoint()));
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kDependency) throw;
    fail(ErrorKind::kDependency, std::string("train-decoder needs the SSET stage: ") + e.what());
  }
  const Corpus corpus = load_corpus(cfg);
  const DecoderTrainConfig& tc = cfg.decoder;
  require(tc.updates >= 0 && tc.batch_size >= 1 && tc.validate_every >= 1, "decoder training config is invalid");
  const auto train = decoder_examples(corpus.train, corpus.train, *sset, Rng(cfg.seed, "decoder.prompts.train"));
  auto val = decoder_examples(corpus.val, corpus.val, *sset, Rng(cfg.seed, "decoder.prompts.val"));
  if (val.empty()) val = decoder_examples(corpus.val, corpus.train, *sset, Rng(cfg.seed, "decoder.prompts.val"));
  require(!train.empty() && !val.empty(), "decoder training: no same-speaker prompt pairs");

  const TokenDecoderConfig dc = resolved_decoder(cfg);
  TokenDecoderModel model(dc);
  AdamConfig adam;
  adam.peak_lr = tc.peak_lr;
  adam.warmup_steps = tc.warmup_steps;
  AdamState opt(adam);
  Rng rng(cfg.seed, "decoder.batches");
  std::int64_t start = 0;
  StageWriter writer(layout, "decoder", layout.stage_dir("decoder"));
  const fs::path log_path = layout.log("decoder");
  std::optional<Checkpoint> prior = resume ? writer.latest() : std::nullopt;
  if (prior) {
    const json doc = checkpoint_doc(*prior, "decoder");
    restore_parameters(*prior, model.params());
    restore_adam(*prior, opt);
    opt.step_count = doc.at("adam_step");
    rng.set_counter(doc.at("batch_rng"));
    start = doc.at("update");
    writer.scores = scores_from(doc.at("scores"));
    truncate_log(log_path, start);
  } else {
    if (fs::exists(writer.dir())) fs::remove_all(writer.dir());
    write_text(log_path, "update,task,loss,lr,wallclock_ms\n");
  }
  std::ofstream log(log_path, std::ios::app);

  auto checkpoint = [&](std::int64_t u) {
    round_to_float32(model.params());
    round_to_float32(opt);
    Graph g(false);
    const double v = decoder_loss(model, g, val)->val()[0];
    if (!std::isfinite(v)) fail(ErrorKind::kNumeric, "decoder validation loss is not finite");
    Checkpoint ckpt;
    store_parameters(ckpt, model.params());
    store_adam(ckpt, opt);
    json doc = {{"stage", "decoder"},
                {"decoder_config", decoder_config_json(dc)},
                {"adam_step", opt.step_count},
                {"batch_rng", rng.counter()}};
    log.flush();
    writer.save(u, std::move(ckpt), doc, v);
  };
  for (std::int64_t u = start + 1; u <= tc.updates; ++u) {
    std::vector<DecoderExample> batch;
    for (int b = 0; b < tc.batch_size; ++b) batch.push_back(train[rng.uniform_int(train.size())]);
    const double loss = decoder_train_step(model, opt, batch, tc.freeze_speaker_encoder);
    log << u << ",DECODER," << format_loss(loss) << ',' << format_loss(warmup_lr(opt.config, opt.step_count)) << ",0\n";
    if (u % tc.validate_every == 0 || u == tc.updates) checkpoint(u);
  }
  if (writer.scores.empty()) checkpoint(0);
  return writer.result(std::max<std::int64_t>(start, tc.updates));
}

// --- inference ----------------------------------------------------------------

std::vector<int> recognize(const MultiModalLm& model, const RawExample& ex, TaskKind task, const ExperimentConfig& cfg) {
  const Vocabulary vocab = vocabulary_for(cfg);
  const InferencePrefix prefix = assemble_infer_prefix(ex, task, vocab, cfg.source);
  const auto session = make_session(model, prefix, task, vocab);
  const DecodeConfig dc = decode_config_for(cfg, task);
  return dc.mode == DecodeMode::kBeam ? beam_search(*session, dc).tokens : greedy_search(*session, dc).tokens;
}

namespace {

std::vector<ToyUtterance> load_for_infer(const ExperimentConfig& cfg, const fs::path& manifest) {
  if (!fs::exists(manifest)) fail(ErrorKind::kDependency, "input manifest not found: " + manifest.string());
  return load_utterances(manifest, ToyWorld(resolved_world(cfg)));
}

}  // namespace

fs::path infer(const ExperimentConfig& cfg, const InferOptions& opts) {
  validate(cfg);
  const Layout layout(cfg);
  const ToyWorld world(resolved_world(cfg));
  const Vocabulary vocab = vocabulary_for(cfg);
  if (opts.task == TaskKind::kTts && opts.prompt_utterance.empty()) {
    fail(ErrorKind::kUsage, "TTS inference requires --prompt-utterance");
  }
  if (opts.task == TaskKind::kTextLm) fail(ErrorKind::kUsage, "TEXTLM has no inference mode");
  const fs::path ckpt_path = opts.checkpoint.empty() ? layout.best_checkpoint("lm") : opts.checkpoint;
  const MultiModalLm model = load_lm(ckpt_path);
  if (!model.has_head(opts.task)) {
    fail(ErrorKind::kDependency, "checkpoint " + ckpt_path.string() + " has no " + std::string(task_name(opts.task)) + " head");
  }
  const auto utts = load_for_infer(cfg, opts.input_manifest);
  const bool needs_sset = opts.task == TaskKind::kTts || cfg.source == SourceRepresentation::kSsetTokens;
  std::optional<SsetModel> sset;
  if (needs_sset) sset.emplace(load_sset(layout.sset_checkpoint()));

  const fs::path out_dir = layout.root / "manifests";
  const fs::path output =
      opts.output.empty() ? out_dir / ("outputs-" + std::string(task_name(opts.task)) + ".jsonl") : opts.output;
  if (output.has_parent_path()) fs::create_directories(output.parent_path());
  std::vector<InferRecord> records;

  if (opts.task == TaskKind::kTts) {
    const TokenDecoderModel decoder = load_decoder(layout.best_checkpoint("decoder"));
    const ToyUtterance* prompt = nullptr;
    for (const auto& u : utts) {
      if (u.id == opts.prompt_utterance) prompt = &u;
    }
    if (!prompt) fail(ErrorKind::kUsage, "prompt utterance '" + opts.prompt_utterance + "' is not in the input manifest");
    const auto prompt_codes = sset->tokenize(prompt->frames).codes;
    const DecodeConfig dc = decode_config_for(cfg, TaskKind::kTts);
    const Rng base(cfg.seed, "infer.tts");
    const fs::path frames_dir = output.parent_path() / ("tts-frames-" + output.stem().string());
    for (const auto& u : utts) {
      if (u.id == prompt->id) continue;
      const InferencePrefix prefix = assemble_tts_infer_prefix(prompt->text, u.text, prompt_codes, vocab);
      const auto session = make_session(model, prefix, TaskKind::kTts, vocab);
      Rng rng = base.split(u.id);
      const GenerateResult g = generate(*session, dc, rng);
      InferRecord r;
      r.id = u.id;
      r.hypothesis = world.text_to_string(u.text);
      r.codes = g.tokens;
      r.prompt_id = prompt->id;
      r.truncated = g.truncated;
      if (!g.tokens.empty()) {
        FrameSequence frames = decoder.synthesize(g.tokens, prompt->frames);
        round_to_float32(frames);
        const fs::path fp = frames_dir / (u.id + ".psfr");
        fs::create_directories(frames_dir);
        write_frames(fp, frames);
        r.frames_path = fs::relative(fp, output.parent_path()).generic_string();
      }
      records.push_back(std::move(r));
    }
  } else {
    const SsetModel* codec = sset ? &*sset : nullptr;
    for (const auto& ex : raw_examples(utts, codec)) {
      const auto tokens = recognize(model, ex, opts.task, cfg);
      InferRecord r;
      r.id = ex.id;
      if (opts.task == TaskKind::kAsr) {
        std::vector<int> text;
        for (int t : tokens) {
          if (t >= 0 && t < vocab.num_symbols) text.push_back(t);
        }
        r.hypothesis = world.text_to_string(text);
      } else if (!tokens.empty()) {
        if (opts.task == TaskKind::kLid) {
          const auto lang = vocab.language_of_tag(tokens.front());
          r.hypothesis = lang ? std::to_string(*lang) : "";
        } else {
          const auto gender = vocab.gender_of_tag(tokens.front());
          r.hypothesis = gender ? std::string(gender_name(*gender)) : "";
        }
      }
      records.push_back(std::move(r));
    }
  }

  std::ofstream out(output, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write " + output.string());
  for (const auto& r : records) {
    json j = {{"id", r.id}, {"task", task_name(opts.task)}, {"hypothesis", r.hypothesis}};
    if (opts.task == TaskKind::kTts) {
      j["codes"] = r.codes;
      j["frames_path"] = r.frames_path;
      j["prompt_id"] = r.prompt_id;
      j["truncated"] = r.truncated;
    }
    out << j.dump() << '\n';
  }
  return output;
}

std::vector<InferRecord> read_infer_outputs(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kDependency, "cannot read outputs " + path.string());
  std::vector<InferRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = parse_json(line, "outputs line");
    InferRecord r;
    r.id = j.at("id");
    r.hypothesis = j.at("hypothesis");
    if (j.contains("codes")) r.codes = j.at("codes").get<std::vector<int>>();
    r.frames_path = j.value("frames_path", "");
    r.prompt_id = j.value("prompt_id", "");
    r.truncated = j.value("truncated", false);
    out.push_back(std::move(r));
  }
  return out;
}

// --- evaluation -------------------------------------------------------------

std::vector<EvalReport> evaluate(const ExperimentConfig& cfg, TaskKind task, const fs::path& outputs,
                                 const fs::path& references, const fs::path& report) {
  const ToyWorld world(resolved_world(cfg));
  const auto hyps = read_infer_outputs(outputs);
  if (hyps.empty()) fail(ErrorKind::kDependency, "hypothesis file " + outputs.string() + " is empty");
  const auto refs = load_for_infer(cfg, references);
  std::map<std::string, const ToyUtterance*> by_id;
  for (const auto& u : refs) by_id[u.id] = &u;
  auto ref_of = [&](const std::string& id) -> const ToyUtterance& {
    const auto it = by_id.find(id);
    if (it == by_id.end()) fail(ErrorKind::kDependency, "utterance '" + id + "' is missing from the references");
    return *it->second;
  };
  const std::string name(task_name(task));
  std::vector<EvalReport> reports;

  if (task == TaskKind::kAsr) {
    std::vector<std::vector<int>> h, r;
    for (const auto& rec : hyps) {
      h.push_back(world.text_from_string(rec.hypothesis));
      r.push_back(ref_of(rec.id).text);
    }
    const CorpusCer c = corpus_cer(h, r);
    EvalReport e{name, "cer", c.value(), c.utterances, c.edits, {}};
    reports.push_back(e);
  } else if (task == TaskKind::kLid || task == TaskKind::kGid) {
    std::vector<int> h, r, classes;
    const int n_classes = task == TaskKind::kLid ? world.num_languages() : 2;
    for (int c = 0; c < n_classes; ++c) classes.push_back(c);
    for (const auto& rec : hyps) {
      const ToyUtterance& u = ref_of(rec.id);
      int pred = -1;
      if (!rec.hypothesis.empty()) {
        pred = task == TaskKind::kLid ? std::stoi(rec.hypothesis) : static_cast<int>(parse_gender(rec.hypothesis));
      }
      h.push_back(pred);
      r.push_back(task == TaskKind::kLid ? u.language : static_cast<int>(u.gender));
    }
    EvalReport acc{name, "accuracy", accuracy(h, r), h.size(), 0, {}};
    for (std::size_t i = 0; i < h.size(); ++i) ++acc.confusion[{r[i], h[i]}];
    reports.push_back(acc);
    reports.push_back({name, "macro_f1", macro_f1(h, r, classes), h.size(), 0, {}});
  } else if (task == TaskKind::kTts) {
    std::vector<std::vector<int>> h, r;
    double secs_sum = 0.0;
    std::size_t secs_n = 0;
    for (const auto& rec : hyps) {
      const ToyUtterance& target = ref_of(rec.id);
      r.push_back(target.text);
      if (rec.frames_path.empty()) {
        h.emplace_back();
        ++secs_n;
        continue;
      }
      const fs::path fp(rec.frames_path);
      const FrameSequence frames = read_frames(fp.is_absolute() ? fp : outputs.parent_path() / fp);
      const auto decoded = nearest_base_decode(frames, world);
      h.push_back(decoded);
      const ToyUtterance& prompt = ref_of(rec.prompt_id);
      const auto a = estimate_speaker_vector(frames, decoded, world);
      const auto b = estimate_speaker_vector(prompt.frames, prompt.text, world);
      secs_sum += cosine_similarity(a, b);
      ++secs_n;
    }
    const CorpusCer c = corpus_cer(h, r);
    reports.push_back({name, "oracle_cer", c.value(), c.utterances, c.edits, {}});
    reports.push_back({name, "secs", secs_sum / static_cast<double>(secs_n), secs_n, 0, {}});
    // Reference separation: speaker-vector cosine over real utterance pairs.
    std::vector<std::vector<double>> vecs;
    for (const auto& u : refs) vecs.push_back(estimate_speaker_vector(u.frames, u.text, world));
    double same = 0.0, diff = 0.0;
    std::size_t n_same = 0, n_diff = 0;
    for (std::size_t i = 0; i < refs.size(); ++i) {
      for (std::size_t j = i + 1; j < refs.size(); ++j) {
        const double s = cosine_similarity(vecs[i], vecs[j]);
        if (refs[i].speaker == refs[j].speaker) {
          same += s;
          ++n_same;
        } else {
          diff += s;
          ++n_diff;
        }
      }
    }
    if (n_same == 0 || n_diff == 0) fail(ErrorKind::kDependency, "references need same- and different-speaker pairs");
    same /= static_cast<double>(n_same);
    diff /= static_cast<double>(n_diff);
    reports.push_back({name, "secs_same_speaker", same, n_same, 0, {}});
    reports.push_back({name, "secs_different_speaker", diff, n_diff, 0, {}});
    reports.push_back({name, "secs_midpoint", 0.5 * (same + diff), n_same + n_diff, 0, {}});
  } else {
    fail(ErrorKind::kUsage, "no evaluation for task " + name);
  }

  const fs::path path = report.empty() ? Layout(cfg).reports() / (name + ".csv") : report;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_reports(path, reports);
  return reports;
}

// --- ablation -----------------------------------------------------------------

AblationMatrix parse_ablation_matrix(std::string_view text) {
  const json j = parse_json(text, "ablation matrix");
  AblationMatrix m;
  try {
    for (const auto& set : j.at("task_sets")) {
      std::vector<TaskKind> tasks;
      for (const auto& t : set) tasks.push_back(parse_task(t.get<std::string>()));
      m.task_sets.push_back(tasks);
    }
    for (const auto& s : j.at("sources")) m.sources.push_back(parse_source(s.get<std::string>()));
    for (const auto& b : j.at("text_lm_init")) m.text_lm_init.push_back(b.get<bool>());
  } catch (const json::exception& e) {
    fail(ErrorKind::kUsage, std::string("ablation matrix: ") + e.what());
  } catch (const Error& e) {
    fail(ErrorKind::kUsage, std::string("ablation matrix: ") + e.what());
  }
  if (m.task_sets.empty() || m.sources.empty() || m.text_lm_init.empty()) {
    fail(ErrorKind::kUsage, "ablation matrix: every axis needs at least one value");
  }
  return m;
}

std::string cell_name(const std::vector<TaskKind>& tasks, SourceRepresentation source, bool text_lm_init) {
  std::string s;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (i) s += '+';
    s += task_name(tasks[i]);
  }
  s += "__";
  s += source_name(source);
  s += text_lm_init ? "__textinit" : "__scratch";
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

AblationRow run_cell(const ExperimentConfig& cfg) {
  AblationRow row;
  row.cell = cell_name(cfg.tasks, cfg.source, cfg.text_lm_init);
  row.tasks = cfg.tasks;
  row.source = cfg.source;
  row.text_lm_init = cfg.text_lm_init;
  const Layout layout(cfg);
  const StageResult lm = train_lm(cfg);
  row.best_validation_loss = lm.best_validation_loss;
  for (TaskKind t : cfg.tasks) {
    if (t == TaskKind::kTts) continue;
    InferOptions opts;
    opts.task = t;
    opts.input_manifest = layout.manifest("test");
    opts.checkpoint = lm.best_checkpoint;
    const fs::path out = infer(cfg, opts);
    const auto reports = evaluate(cfg, t, out, layout.manifest("test"));
    const double v = reports.front().value;
    if (t == TaskKind::kAsr) row.asr_cer = v;
    if (t == TaskKind::kLid) row.lid_accuracy = v;
    if (t == TaskKind::kGid) row.gid_accuracy = v;
  }
  return row;
}

std::vector<AblationRow> ablate(const ExperimentConfig& cfg, const AblationMatrix& matrix) {
  const Layout layout(cfg);
  if (!fs::exists(layout.manifest("train"))) gen_data(cfg, false);
  bool needs_sset = false;
  for (const auto& set : matrix.task_sets) needs_sset |= has_task(set, TaskKind::kTts);
  for (auto s : matrix.sources) needs_sset |= s == SourceRepresentation::kSsetTokens;
  std::string sset_path = cfg.sset_checkpoint;
  if (needs_sset && sset_path.empty()) {
    const fs::path best = layout.stage_dir("sset") / "best";
    sset_path = (fs::exists(best) ? layout.best_checkpoint("sset") : train_sset(cfg).best_checkpoint).string();
  }
  std::vector<AblationRow> rows;
  for (const auto& tasks : matrix.task_sets) {
    for (SourceRepresentation source : matrix.sources) {
      for (bool init : matrix.text_lm_init) {
        ExperimentConfig c = cfg;
        c.tasks = tasks;
        c.source = source;
        c.text_lm_init = init;
        c.manifests_dir = fs::absolute(layout.manifests()).string();
        c.sset_checkpoint = sset_path.empty() ? "" : fs::absolute(sset_path).string();
        const std::string name = cell_name(tasks, source, init);
        c.out_dir = (layout.root / "cells" / name).string();
        try {
          rows.push_back(run_cell(c));
        } catch (const Error& e) {
          AblationRow row;
          row.cell = name;
          row.tasks = tasks;
          row.source = source;
          row.text_lm_init = init;
          row.status = std::string("error: ") + e.what();
          rows.push_back(std::move(row));
        }
      }
    }
  }
  write_ablation_csv(layout.reports() / "ablation.csv", rows);
  return rows;
}

void write_ablation_csv(const fs::path& path, const std::vector<AblationRow>& rows) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out << "cell,tasks,source,text_lm_init,asr_cer,lid_accuracy,gid_accuracy,best_validation_loss,status\n";
  auto opt = [](const std::optional<double>& v) { return v ? format_loss(*v) : std::string(); };
  for (const auto& r : rows) {
    std::string tasks;
    for (std::size_t i = 0; i < r.tasks.size(); ++i) {
      if (i) tasks += '+';
      tasks += task_name(r.tasks[i]);
    }
    std::string status = r.status;
    std::replace(status.begin(), status.end(), ',', ';');
    std::replace(status.begin(), status.end(), '\n', ' ');
    out << r.cell << ',' << tasks << ',' << source_name(r.source) << ',' << (r.text_lm_init ? "true" : "false") << ','
        << opt(r.asr_cer) << ',' << opt(r.lid_accuracy) << ',' << opt(r.gid_accuracy) << ','
        << opt(r.best_validation_loss) << ',' << status << '\n';
  }
}

// --- gradient checks --------------------------------------------------------

std::vector<GradcheckResult> gradcheck_all(std::uint64_t seed) {
  std::vector<GradcheckResult> out;
  Rng rng(seed, "gradcheck");
  auto params_of = [](ParameterSet& ps) {
    std::vector<Parameter*> list;
    for (auto& [name, p] : ps) list.push_back(&p);
    return list;
  };
  auto frames = [&](std::size_t t, std::size_t d) {
    FrameSequence f(t, d);
    for (double& v : f.values()) v = rng.normal();
    return f;
  };

  {
    const Vocabulary vocab{4, 2, 5};
    LmConfig cfg = lm_config_for(vocab, 3);
    cfg.num_layers = 1;
    cfg.num_heads = 2;
    cfg.d_model = 4;
    cfg.d_ffn = 6;
    cfg.max_seq_len = 16;
    cfg.seed = seed;
    MultiModalLm model(cfg);
    // Larger weights than the 0.02 init make the attention softmax non-trivial.
    for (auto& [name, p] : model.params()) {
      if (name.find("gamma") != std::string::npos) continue;
      for (double& v : p.value.values()) v = 0.5 * rng.normal();
    }
    RawExample ex;
    ex.id = "g";
    ex.frames = frames(4, 3);
    ex.text = {0, 3, 1};
    ex.codes = std::vector<int>{2, 4};
    std::vector<AssembledExample> examples = {assemble_asr(ex, vocab), assemble_tts_train(ex, vocab),
                                              assemble_classification(ex, TaskKind::kLid, vocab),
                                              assemble_classification(ex, TaskKind::kGid, vocab),
                                              assemble_asr(ex, vocab, SourceRepresentation::kSsetTokens)};
    auto list = params_of(model.params());
    const double err = finite_diff_gradcheck(
        [&](Graph& g) {
          Var total = lm_example_loss(model, g, examples[0]);
          for (std::size_t i = 1; i < examples.size(); ++i) total = add(total, lm_example_loss(model, g, examples[i]));
          return total;
        },
        list);
    out.push_back({"lm_loss", err});
  }
  {
    SsetConfig cfg;
    cfg.frame_dim = 3;
    cfg.latent_dim = 3;
    cfg.downsample_factor = 2;
    cfg.codebook_size = 4;
    cfg.num_rvq_layers = 2;
    cfg.channels = 4;
    cfg.seed = seed;
    SsetModel model(cfg);
    std::vector<FrameSequence> batch = {frames(6, 3), frames(5, 3), frames(8, 3)};
    init_codebooks(model, batch, seed);
    auto list = params_of(model.params());
    const double err = finite_diff_gradcheck([&](Graph& g) { return sset_loss(model, g, batch, false); }, list);
    out.push_back({"sset_loss", err});
  }
  {
    TokenDecoderConfig cfg;
    cfg.num_codes = 5;
    cfg.code_dim = 4;
    cfg.upsample = 2;
    cfg.frame_dim = 3;
    cfg.speaker_hidden = 4;
    cfg.speaker_dim = 3;
    cfg.seed = seed;
    TokenDecoderModel model(cfg);
    std::vector<DecoderExample> batch(2);
    batch[0].codes = {1, 4, 2};
    batch[0].target = frames(6, 3);
    batch[0].prompt = frames(5, 3);
    batch[1].codes = {0, 3};
    batch[1].target = frames(3, 3);
    batch[1].prompt = frames(4, 3);
    auto list = params_of(model.params());
    const double err = finite_diff_gradcheck([&](Graph& g) { return decoder_loss(model, g, batch); }, list);
    out.push_back({"decoder_loss", err});
  }
  return out;
}

}  // namespace polyspeech
