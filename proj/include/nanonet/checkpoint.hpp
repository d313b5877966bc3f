#pragma once

// Checkpoint files are line-oriented UTF-8 text:
//
//   nanonet-checkpoint 1
//   config <EncoderConfig as one-line JSON>
//   params <count>
//   <name> <role> <trainable:0|1> <rank> <dim>...
//   <values, space separated, shortest round-trip decimal>
//   ... (two lines per parameter, in Encoder::params() order)
//
// Values round-trip bit-exactly.

#include <filesystem>
#include <string>

#include "nanonet/encoder.hpp"

namespace nanonet {

inline constexpr int kCheckpointVersion = 1;

std::string config_to_json(const EncoderConfig& config);
EncoderConfig config_from_json(const std::string& text);

void save_checkpoint(const Encoder& model, const std::filesystem::path& path);
Encoder load_checkpoint(const std::filesystem::path& path);

}  // namespace nanonet
