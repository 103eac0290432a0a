#include "polyspeech/toyspeech.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "polyspeech/error.hpp"

namespace polyspeech {
namespace {

constexpr std::string_view kSymbolChars = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
constexpr std::uint32_t kFramesVersion = 1;

std::vector<std::vector<double>> orthonormal_basis(int dim, Rng& rng) {
  std::vector<std::vector<double>> basis;
  while (static_cast<int>(basis.size()) < dim) {
    std::vector<double> v(dim);
    for (double& x : v) x = rng.normal();
    for (const auto& b : basis) {
      const double p = dot(v, b);
      for (int i = 0; i < dim; ++i) v[i] -= p * b[i];
    }
    const double n = l2_norm(v);
    if (n < 1e-6) continue;
    for (double& x : v) x /= n;
    basis.push_back(std::move(v));
  }
  return basis;
}

std::vector<double> normalized_weights(int n, double sharpness, Rng& rng) {
  std::vector<double> w(n);
  double total = 0.0;
  for (double& x : w) {
    x = std::exp(sharpness * rng.normal());
    total += x;
  }
  for (double& x : w) x /= total;
  return w;
}

std::size_t draw(std::span<const double> probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  return probs.size() - 1;
}

double round_to_float(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace

std::string_view gender_name(Gender g) { return g == Gender::kMale ? "MALE" : "FEMALE"; }

Gender parse_gender(std::string_view name) {
  if (name == "MALE") return Gender::kMale;
  if (name == "FEMALE") return Gender::kFemale;
  fail("unknown gender tag '" + std::string(name) + "'");
}

ToyWorld::ToyWorld(const ToyWorldConfig& cfg) : cfg_(cfg) {
  require(cfg.num_languages >= 1, "ToyWorld: need at least one language");
  require(cfg.symbols_per_language >= 2, "ToyWorld: need at least two symbols per language");
  require(cfg.shared_symbol_fraction >= 0.0 && cfg.shared_symbol_fraction <= 1.0,
          "ToyWorld: shared_symbol_fraction must be in [0,1]");
  require(cfg.num_speakers >= cfg.num_languages, "ToyWorld: need at least one speaker per language");
  require(cfg.frame_dim >= cfg.symbol_subspace_dim + 2 && cfg.symbol_subspace_dim >= 1,
          "ToyWorld: frame_dim must leave room for gender and speaker dimensions");
  require(cfg.frames_per_symbol >= 1, "ToyWorld: frames_per_symbol must be >= 1");
  require(cfg.min_text_len >= 1 && cfg.max_text_len >= cfg.min_text_len, "ToyWorld: bad text length range");

  const int d = cfg.frame_dim;
  Rng root(cfg.seed, "toyworld");
  Rng basis_rng = root.split("basis");
  const auto basis = orthonormal_basis(d, basis_rng);
  gender_direction_ = basis[cfg.symbol_subspace_dim];

  // Symbol inventory: a shared pool followed by language-specific symbols.
  const int shared = static_cast<int>(std::lround(cfg.symbols_per_language * cfg.shared_symbol_fraction));
  const int unique = cfg.symbols_per_language - shared;
  const int total_symbols = shared + unique * cfg.num_languages;
  require(total_symbols <= static_cast<int>(kSymbolChars.size()), "ToyWorld: too many symbols");

  Rng sym_rng = root.split("symbols");
  constexpr int kMaxRetries = 1000;
  for (int s = 0; s < total_symbols; ++s) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxRetries && !placed; ++attempt) {
      std::vector<double> v(d, 0.0);
      for (int k = 0; k < cfg.symbol_subspace_dim; ++k) {
        const double c = cfg.symbol_scale * sym_rng.normal();
        for (int i = 0; i < d; ++i) v[i] += c * basis[k][i];
      }
      placed = std::all_of(bases_.begin(), bases_.end(), [&](const auto& b) {
        return std::sqrt(squared_distance(b, v)) >= cfg.min_symbol_separation;
      });
      if (placed) bases_.push_back(std::move(v));
    }
    require(placed, "ToyWorld: symbol separation unachievable; config too crowded");
  }
  min_separation_ = std::numeric_limits<double>::infinity();
  for (int a = 0; a < total_symbols; ++a) {
    for (int b = a + 1; b < total_symbols; ++b) {
      min_separation_ = std::min(min_separation_, std::sqrt(squared_distance(bases_[a], bases_[b])));
    }
  }
  if (total_symbols < 2) min_separation_ = cfg.min_symbol_separation;
  sigma_ = cfg.noise_fraction * min_separation_;
  require(min_separation_ > 4.0 * sigma_ * std::sqrt(static_cast<double>(d)),
          "ToyWorld: noise too large for the symbol separation (need min distance > 4 sigma sqrt(D))");

  Rng lang_rng = root.split("languages");
  for (int l = 0; l < cfg.num_languages; ++l) {
    Language lang;
    for (int s = 0; s < shared; ++s) lang.symbols.push_back(s);
    for (int s = 0; s < unique; ++s) lang.symbols.push_back(shared + l * unique + s);
    const int n = static_cast<int>(lang.symbols.size());
    lang.start_probs = normalized_weights(n, cfg.bigram_sharpness, lang_rng);
    for (int s = 0; s < n; ++s) lang.bigram.push_back(normalized_weights(n, cfg.bigram_sharpness, lang_rng));
    languages_.push_back(std::move(lang));
  }

  Rng spk_rng = root.split("speakers");
  for (int s = 0; s < cfg.num_speakers; ++s) {
    ToySpeaker spk;
    spk.language = s % cfg.num_languages;
    spk.gender = ((s / cfg.num_languages) % 2 == 0) ? Gender::kMale : Gender::kFemale;
    std::vector<double> v(d, 0.0);
    for (int k = cfg.symbol_subspace_dim + 1; k < d; ++k) {
      const double c = spk_rng.normal();
      for (int i = 0; i < d; ++i) v[i] += c * basis[k][i];
    }
    const double n = l2_norm(v);
    for (double& x : v) x *= cfg.speaker_scale / n;
    spk.vec = std::move(v);
    speakers_.push_back(std::move(spk));
  }
}

std::span<const double> ToyWorld::base(int symbol) const {
  require(symbol >= 0 && symbol < num_symbols(), "unknown symbol " + std::to_string(symbol));
  return bases_[symbol];
}

const ToySpeaker& ToyWorld::speaker(int id) const {
  require(id >= 0 && id < num_speakers(), "unknown speaker " + std::to_string(id));
  return speakers_[id];
}

const Language& ToyWorld::language(int id) const {
  require(id >= 0 && id < num_languages(), "unknown language " + std::to_string(id));
  return languages_[id];
}

std::vector<double> ToyWorld::speaker_offset(int speaker_id, Gender gender) const {
  std::vector<double> out = speaker(speaker_id).vec;
  const double sign = gender == Gender::kMale ? 1.0 : -1.0;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += sign * cfg_.gender_offset * gender_direction_[i];
  return out;
}

std::vector<int> ToyWorld::sample_text(int language_id, Rng& rng) const {
  const int span = cfg_.max_text_len - cfg_.min_text_len + 1;
  const int length = cfg_.min_text_len + static_cast<int>(rng.uniform_int(span));
  return sample_text(language_id, length, rng);
}

std::vector<int> ToyWorld::sample_text(int language_id, int length, Rng& rng) const {
  const Language& lang = language(language_id);
  std::vector<int> text;
  std::size_t state = draw(lang.start_probs, rng);
  text.push_back(lang.symbols[state]);
  while (static_cast<int>(text.size()) < length) {
    state = draw(lang.bigram[state], rng);
    text.push_back(lang.symbols[state]);
  }
  return text;
}

char ToyWorld::symbol_char(int symbol) const {
  require(symbol >= 0 && symbol < num_symbols(), "unknown symbol " + std::to_string(symbol));
  return kSymbolChars[symbol];
}

int ToyWorld::symbol_from_char(char c) const {
  const auto pos = kSymbolChars.find(c);
  require(pos != std::string_view::npos && static_cast<int>(pos) < num_symbols(),
          std::string("unknown symbol character '") + c + "'");
  return static_cast<int>(pos);
}

std::string ToyWorld::text_to_string(std::span<const int> text) const {
  std::string s;
  for (int t : text) s.push_back(symbol_char(t));
  return s;
}

std::vector<int> ToyWorld::text_from_string(std::string_view s) const {
  std::vector<int> out;
  for (char c : s) out.push_back(symbol_from_char(c));
  return out;
}

FrameSequence render_utterance(const ToyWorld& world, std::span<const int> text, int speaker, Gender gender,
                               double sigma, Rng& rng) {
  require(!text.empty(), "render_utterance: empty text");
  const auto& lang = world.language(world.speaker(speaker).language);
  const int r = world.frames_per_symbol();
  const int d = world.frame_dim();
  const auto offset = world.speaker_offset(speaker, gender);
  FrameSequence frames(text.size() * r, d);
  for (std::size_t k = 0; k < text.size(); ++k) {
    require(std::find(lang.symbols.begin(), lang.symbols.end(), text[k]) != lang.symbols.end(),
            "render_utterance: symbol " + std::to_string(text[k]) + " not in the speaker's language");
    const auto b = world.base(text[k]);
    for (int f = 0; f < r; ++f) {
      auto row = frames.row(k * r + f);
      for (int i = 0; i < d; ++i) row[i] = b[i] + offset[i] + (sigma > 0.0 ? sigma * rng.normal() : 0.0);
    }
  }
  return frames;
}

Corpus sample_corpus(const ToyWorld& world, const CorpusConfig& cfg) {
  const int num_lang = world.num_languages();
  std::vector<std::vector<int>> seen(num_lang), held(num_lang);
  for (int s = 0; s < world.num_speakers(); ++s) seen[world.speaker(s).language].push_back(s);
  if (cfg.held_out_speakers) {
    for (int l = 0; l < num_lang; ++l) {
      auto& pool = seen[l];
      require(static_cast<int>(pool.size()) > cfg.held_out_per_language,
              "sample_corpus: not enough speakers per language to hold some out");
      held[l].assign(pool.end() - cfg.held_out_per_language, pool.end());
      pool.resize(pool.size() - cfg.held_out_per_language);
    }
  } else {
    held = seen;
  }
  const double sigma = cfg.sigma >= 0.0 ? cfg.sigma : world.noise_sigma();
  Rng root(world.config().seed, "corpus");

  auto make_split = [&](const std::string& name, int count, const std::vector<std::vector<int>>& pools) {
    std::vector<ToyUtterance> out;
    Rng split_rng = root.split(name);
    for (int i = 0; i < count; ++i) {
      std::ostringstream id;
      id << name << '-' << std::setw(6) << std::setfill('0') << i;
      Rng rng = split_rng.split(id.str());
      ToyUtterance u;
      u.id = id.str();
      u.language = cfg.class_balance ? i % num_lang : static_cast<int>(rng.uniform_int(num_lang));
      const auto& pool = pools[u.language];
      u.speaker = pool[rng.uniform_int(pool.size())];
      u.gender = world.speaker(u.speaker).gender;
      u.text = world.sample_text(u.language, rng);
      u.frames = render_utterance(world, u.text, u.speaker, u.gender, sigma, rng);
      for (double& v : u.frames.values()) v = round_to_float(v);
      out.push_back(std::move(u));
    }
    return out;
  };

  Corpus corpus;
  corpus.train = make_split("train", cfg.train_size, seen);
  corpus.val = make_split("val", cfg.val_size, seen);
  corpus.test = make_split("test", cfg.test_size, held);
  return corpus;
}

std::vector<double> estimate_speaker_vector(const FrameSequence& frames, std::span<const int> text,
                                            const ToyWorld& world) {
  const std::size_t r = static_cast<std::size_t>(world.frames_per_symbol());
  const std::size_t d = static_cast<std::size_t>(world.frame_dim());
  require(frames.cols() == d, "estimate_speaker_vector: frame dim mismatch");
  require(!text.empty(), "estimate_speaker_vector: empty text");
  std::vector<double> sum(d, 0.0);
  std::size_t used = 0;
  for (std::size_t t = 0; t < frames.rows(); ++t) {
    const std::size_t k = std::min(t / r, text.size() - 1);
    const auto b = world.base(text[k]);
    const auto row = frames.row(t);
    for (std::size_t i = 0; i < d; ++i) sum[i] += row[i] - b[i];
    ++used;
  }
  for (double& v : sum) v /= static_cast<double>(used);
  return sum;
}

std::vector<int> nearest_base_decode(const FrameSequence& frames, const ToyWorld& world) {
  const std::size_t r = static_cast<std::size_t>(world.frames_per_symbol());
  const std::size_t d = static_cast<std::size_t>(world.frame_dim());
  require(frames.cols() == d && frames.rows() >= 1, "nearest_base_decode: bad frame shape");
  const std::size_t groups = (frames.rows() + r - 1) / r;

  std::vector<double> offset(d, 0.0);
  std::vector<int> text(groups, 0);
  for (int round = 0; round < 2; ++round) {
    for (std::size_t g = 0; g < groups; ++g) {
      std::vector<double> mean(d, 0.0);
      const std::size_t begin = g * r, end = std::min(frames.rows(), begin + r);
      for (std::size_t t = begin; t < end; ++t) {
        for (std::size_t i = 0; i < d; ++i) mean[i] += frames(t, i);
      }
      for (std::size_t i = 0; i < d; ++i) mean[i] = mean[i] / static_cast<double>(end - begin) - offset[i];
      double best = std::numeric_limits<double>::infinity();
      for (int s = 0; s < world.num_symbols(); ++s) {
        const double dist = squared_distance(mean, world.base(s));
        if (dist < best) {
          best = dist;
          text[g] = s;
        }
      }
    }
    offset = estimate_speaker_vector(frames, text, world);
  }
  return text;
}

// ---------------------------------------------------------------------------
// Files

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw Error(ErrorKind::kIo, "truncated frames file");
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_frames(const std::filesystem::path& path, const FrameSequence& frames) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  os.write("PSFR", 4);
  put_u32(os, kFramesVersion);
  put_u32(os, static_cast<std::uint32_t>(frames.rows()));
  put_u32(os, static_cast<std::uint32_t>(frames.cols()));
  for (double v : frames.values()) put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  if (!os) throw Error(ErrorKind::kIo, "write failed for " + path.string());
}

FrameSequence read_frames(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "PSFR", 4) != 0) throw Error(ErrorKind::kIo, "bad frames magic in " + path.string());
  const std::uint32_t version = get_u32(is);
  if (version != kFramesVersion) throw Error(ErrorKind::kIo, "unsupported frames version in " + path.string());
  const std::uint32_t t = get_u32(is);
  const std::uint32_t d = get_u32(is);
  if (t == 0 || d == 0) throw Error(ErrorKind::kIo, "empty frames file " + path.string());
  std::vector<double> values(static_cast<std::size_t>(t) * d);
  for (double& v : values) v = static_cast<double>(std::bit_cast<float>(get_u32(is)));
  return FrameSequence({t, d}, std::move(values));
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["text"] = r.text;
    j["language"] = r.language;
    j["gender"] = gender_name(r.gender);
    j["speaker"] = r.speaker;
    j["frames_path"] = r.frames_path;
    os << j.dump() << '\n';
  }
}

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorKind::kIo, "cannot open manifest " + path.string());
  std::vector<ManifestRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ManifestRecord r;
      r.id = j.at("id").get<std::string>();
      r.text = j.at("text").get<std::string>();
      r.language = j.at("language").get<int>();
      r.gender = parse_gender(j.at("gender").get<std::string>());
      r.speaker = j.at("speaker").get<int>();
      r.frames_path = j.at("frames_path").get<std::string>();
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::kIo, "malformed manifest line in " + path.string() + ": " + e.what());
    }
  }
  return out;
}

std::vector<ManifestRecord> save_utterances(const std::vector<ToyUtterance>& utts, const ToyWorld& world,
                                            const std::filesystem::path& manifest_dir,
                                            const std::filesystem::path& frames_dir) {
  std::filesystem::create_directories(frames_dir);
  std::vector<ManifestRecord> records;
  for (const auto& u : utts) {
    const auto frames_path = frames_dir / (u.id + ".psfr");
    write_frames(frames_path, u.frames);
    records.push_back({u.id, world.text_to_string(u.text), u.language, u.gender, u.speaker,
                       std::filesystem::relative(frames_path, manifest_dir).generic_string()});
  }
  return records;
}

std::vector<ToyUtterance> load_utterances(const std::filesystem::path& manifest_path, const ToyWorld& world) {
  std::vector<ToyUtterance> out;
  const auto dir = manifest_path.parent_path();
  for (const auto& r : read_manifest(manifest_path)) {
    ToyUtterance u;
    u.id = r.id;
    u.language = r.language;
    u.gender = r.gender;
    u.speaker = r.speaker;
    u.text = world.text_from_string(r.text);
    const std::filesystem::path fp(r.frames_path);
    u.frames = read_frames(fp.is_absolute() ? fp : dir / fp);
    out.push_back(std::move(u));
  }
  return out;
}

}  // namespace polyspeech
