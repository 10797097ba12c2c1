#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "plugnet/layers.hpp"
#include "plugnet/plugin.hpp"

namespace plugnet {

// File layout (all integers little-endian):
//   "PLGN" | u32 version | u32 header_bytes | header (JSON text) |
//   f32 payload in layer order, weights before biases
inline constexpr char kCheckpointMagic[4] = {'P', 'L', 'G', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointBlob {
  nlohmann::json header;
  std::vector<float> payload;
};

std::string encode_checkpoint(const CheckpointBlob& blob);
CheckpointBlob decode_checkpoint(std::string_view bytes);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

std::string serialize_checkpoint(const BaseNetwork<float>& net);
BaseNetwork<float> deserialize_checkpoint(std::string_view bytes);
void save_checkpoint(const BaseNetwork<float>& net,
                     const std::filesystem::path& path);
// The loaded network is frozen.
BaseNetwork<float> load_checkpoint(const std::filesystem::path& path);

// Plugin checkpoints share the container; the header additionally records
// the attachment point and fusion operator.
std::string serialize_plugin(const PluginNetwork<float>& plugin);
PluginNetwork<float> deserialize_plugin(std::string_view bytes);
void save_plugin_checkpoint(const PluginNetwork<float>& plugin,
                            const std::filesystem::path& path);
PluginNetwork<float> load_plugin_checkpoint(const std::filesystem::path& path);

}  // namespace plugnet
