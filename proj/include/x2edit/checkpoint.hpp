#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "x2edit/tensor.hpp"

namespace x2edit {

// Checkpoint container file:
//   magic "X2EL" | u8 version = 1 | u64 little-endian header length |
//   JSON header mapping tensor name -> {shape, dtype:"f32", offset} |
//   raw little-endian IEEE-754 f32 payload at the stated offsets.
// Run state (config, step, rng streams, sampler cache) rides along under the
// reserved "__metadata__" header key. Offsets are payload-relative and
// assigned in sorted-name order, so identical state always produces
// byte-identical files.
inline constexpr char kCheckpointMagic[4] = {'X', '2', 'E', 'L'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

struct TensorEntry {
    std::string name;
    Tensor* tensor;
};

// Writes the checkpoint. Live tensors are snapped to their f32 values in
// place first, so the persisted file and the in-memory state agree bit for
// bit and an interrupted-then-resumed run cannot drift from an uninterrupted
// one.
void save_checkpoint(const std::string& path, const std::vector<TensorEntry>& tensors,
                     const nlohmann::json& metadata);

struct LoadedCheckpoint {
    std::map<std::string, Tensor> tensors;  // widened f32 -> f64
    nlohmann::json metadata;
};

// Throws FormatError (with the failing byte offset) on malformed or truncated
// files and VersionError on an unknown version byte.
LoadedCheckpoint load_checkpoint(const std::string& path);

// Rounds every element through f32; save_checkpoint applies this to its
// inputs.
void quantize_f32(Tensor& t);

}  // namespace x2edit
