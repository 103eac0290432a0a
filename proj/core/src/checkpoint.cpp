#include "polyspeech/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "polyspeech/error.hpp"

namespace polyspeech {
namespace {

constexpr std::string_view kMagic = "PSPK";

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::string_view take(std::size_t n) {
    if (n > bytes_.size() - pos_) fail(ErrorKind::kIo, "checkpoint: truncated file");
    const auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32() {
    const auto s = take(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[i]);
    return v;
  }
  std::uint64_t u64() {
    const auto s = take(8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[i]);
    return v;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(ckpt.document.size()));
  out += ckpt.document;
  put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t.dims().size()));
    for (std::size_t d : t.dims()) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.values()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  put_u64(out, fnv1a64(out));
  return out;
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  Reader in(bytes);
  if (in.take(4) != kMagic) fail(ErrorKind::kIo, "checkpoint: bad magic");
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) fail(ErrorKind::kIo, "checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.document = std::string(in.take(in.u32()));
  const std::uint32_t count = in.u32();
  std::string previous;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(in.take(in.u32()));
    if (i > 0 && !(previous < name)) fail(ErrorKind::kIo, "checkpoint: tensor names out of order");
    const std::uint32_t rank = in.u32();
    std::vector<std::size_t> dims;
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      dims.push_back(in.u32());
      n *= dims.back();
    }
    std::vector<double> values(n);
    for (double& v : values) v = std::bit_cast<float>(in.u32());
    previous = name;
    ckpt.tensors.emplace(std::move(name), Tensor(std::move(dims), std::move(values)));
  }
  const std::size_t body = in.pos();
  const std::uint64_t sum = in.u64();
  if (!in.done()) fail(ErrorKind::kIo, "checkpoint: trailing bytes");
  if (sum != fnv1a64(bytes.substr(0, body))) fail(ErrorKind::kIo, "checkpoint: checksum mismatch");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write checkpoint " + path.string());
  const std::string bytes = serialize_checkpoint(ckpt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::kIo, "cannot write checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kDependency, "checkpoint not found: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

void round_to_float32(Tensor& t) {
  for (double& v : t.values()) v = static_cast<float>(v);
}

void round_to_float32(ParameterSet& params) {
  for (auto& [name, p] : params) round_to_float32(p.value);
}

void round_to_float32(AdamState& state) {
  for (auto& [name, t] : state.first_moment) round_to_float32(t);
  for (auto& [name, t] : state.second_moment) round_to_float32(t);
}

void store_parameters(Checkpoint& ckpt, const ParameterSet& params, const std::string& prefix) {
  for (const auto& [name, p] : params) ckpt.tensors[prefix + name] = p.value;
}

void restore_parameters(const Checkpoint& ckpt, ParameterSet& params, const std::string& prefix) {
  for (auto& [name, p] : params) {
    const auto it = ckpt.tensors.find(prefix + name);
    if (it == ckpt.tensors.end()) fail(ErrorKind::kDependency, "checkpoint lacks parameter " + prefix + name);
    if (it->second.dims() != p.value.dims()) {
      fail(ErrorKind::kDependency, "checkpoint shape mismatch for " + prefix + name + ": " +
                                       it->second.shape_string() + " vs " + p.value.shape_string());
    }
    p.value = it->second;
  }
}

void store_adam(Checkpoint& ckpt, const AdamState& state, const std::string& prefix) {
  for (const auto& [name, t] : state.first_moment) ckpt.tensors[prefix + "m." + name] = t;
  for (const auto& [name, t] : state.second_moment) ckpt.tensors[prefix + "v." + name] = t;
}

void restore_adam(const Checkpoint& ckpt, AdamState& state, const std::string& prefix) {
  state.first_moment.clear();
  state.second_moment.clear();
  const std::string m = prefix + "m.", v = prefix + "v.";
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.starts_with(m)) state.first_moment[name.substr(m.size())] = t;
    else if (name.starts_with(v)) state.second_moment[name.substr(v.size())] = t;
  }
}

}  // namespace polyspeech
