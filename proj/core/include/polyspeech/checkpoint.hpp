#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "polyspeech/autograd.hpp"
#include "polyspeech/optim.hpp"

namespace polyspeech {

constexpr std::uint32_t kCheckpointVersion = 1;

/// "PSPK" | u32 version | u32 document length | document (UTF-8 JSON)
/// | u32 tensor count | per tensor, in name order: u32 name length, name,
/// u32 rank, u32 dims…, float32 values | u64 FNV-1a of everything before it.
/// All integers and floats little-endian.
struct Checkpoint {
  std::string document;
  std::map<std::string, Tensor> tensors;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::uint64_t fnv1a64(std::string_view bytes);

/// Rounds every value to the nearest float32, so an in-memory state equals
/// what a checkpoint stores.
void round_to_float32(Tensor& t);
void round_to_float32(ParameterSet& params);
void round_to_float32(AdamState& state);

void store_parameters(Checkpoint& ckpt, const ParameterSet& params, const std::string& prefix = "");
/// Every parameter must be present with a matching shape.
void restore_parameters(const Checkpoint& ckpt, ParameterSet& params, const std::string& prefix = "");

/// Moments go in as "<prefix>m.<name>" / "<prefix>v.<name>"; the step count is
/// the caller's to record.
void store_adam(Checkpoint& ckpt, const AdamState& state, const std::string& prefix = "adam.");
void restore_adam(const Checkpoint& ckpt, AdamState& state, const std::string& prefix = "adam.");

}  // namespace polyspeech
