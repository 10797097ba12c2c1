#include "plugnet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace plugnet {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(std::string_view bytes, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[offset + i]))
         << (8 * i);
  return v;
}

}  // namespace

std::string encode_checkpoint(const CheckpointBlob& blob) {
  const std::string header = blob.header.dump();
  std::string out;
  out.reserve(12 + header.size() + 4 * blob.payload.size());
  out.append(kCheckpointMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  for (float f : blob.payload) put_u32(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

CheckpointBlob decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw Error("not a checkpoint");
  }
  if (bytes.size() < 12) throw Error("payload length mismatch: truncated header");
  const std::uint32_t version = get_u32(bytes, 4);
  if (version == 0 || version > kCheckpointVersion) {
    throw Error("unsupported version " + std::to_string(version));
  }
  const std::uint32_t header_len = get_u32(bytes, 8);
  if (bytes.size() < 12 + static_cast<std::size_t>(header_len)) {
    throw Error("payload length mismatch: truncated header");
  }
  CheckpointBlob blob;
  try {
    blob.header = nlohmann::json::parse(bytes.substr(12, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("corrupt checkpoint header: ") + e.what());
  }
  const std::string_view payload = bytes.substr(12 + header_len);
  if (payload.size() % 4 != 0) {
    throw Error("payload length mismatch: " + std::to_string(payload.size()) +
                " bytes is not a whole number of floats");
  }
  blob.payload.resize(payload.size() / 4);
  for (std::size_t i = 0; i < blob.payload.size(); ++i)
    blob.payload[i] = std::bit_cast<float>(get_u32(payload, 4 * i));
  return blob;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

std::string serialize_checkpoint(const BaseNetwork<float>& net) {
  CheckpointBlob blob;
  blob.header = {{"kind", "base"},
                 {"input_shape", net.input_shape()},
                 {"layers", net.layers()}};
  blob.payload = network_payload(net);
  return encode_checkpoint(blob);
}

BaseNetwork<float> deserialize_checkpoint(std::string_view bytes) {
  CheckpointBlob blob = decode_checkpoint(bytes);
  if (blob.header.value("kind", "") != "base") {
    throw Error("checkpoint does not hold a base network");
  }
  try {
    auto layers = blob.header.at("layers").get<std::vector<LayerSpec>>();
    auto input_shape = blob.header.at("input_shape").get<Shape>();
    return network_from_payload(std::move(layers), std::move(input_shape),
                                blob.payload);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("corrupt checkpoint header: ") + e.what());
  }
}

void save_checkpoint(const BaseNetwork<float>& net,
                     const std::filesystem::path& path) {
  write_file(path, serialize_checkpoint(net));
}

BaseNetwork<float> load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file(path));
}

std::string serialize_plugin(const PluginNetwork<float>& plugin) {
  CheckpointBlob blob;
  const AttachmentPoint& a = plugin.attachment();
  blob.header = {{"kind", "plugin"},
                 {"attachment", a.layer_id},
                 {"site", to_string(a.site)},
                 {"width", a.width},
                 {"operator", to_string(plugin.op())},
                 {"pe_dim", plugin.input_dim()},
                 {"hidden", plugin.hidden_sizes()}};
  blob.payload = plugin.flat_parameters();
  return encode_checkpoint(blob);
}

PluginNetwork<float> deserialize_plugin(std::string_view bytes) {
  CheckpointBlob blob = decode_checkpoint(bytes);
  if (blob.header.value("kind", "") != "plugin") {
    throw Error("checkpoint does not hold a plugin network");
  }
  try {
    const auto& h = blob.header;
    AttachmentPoint point{h.at("attachment").get<std::string>(),
                          parse_site(h.at("site").get<std::string>()),
                          h.at("width").get<std::size_t>()};
    PluginNetwork<float> plugin(h.at("pe_dim").get<std::size_t>(),
                                h.at("hidden").get<std::vector<std::size_t>>(),
                                point,
                                parse_fusion_op(h.at("operator").get<std::string>()),
                                0);
    plugin.assign_parameters(blob.payload);
    return plugin;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("corrupt checkpoint header: ") + e.what());
  }
}

void save_plugin_checkpoint(const PluginNetwork<float>& plugin,
                            const std::filesystem::path& path) {
  write_file(path, serialize_plugin(plugin));
}

PluginNetwork<float> load_plugin_checkpoint(const std::filesystem::path& path) {
  return deserialize_plugin(read_file(path));
}

}  // namespace plugnet
