#include "mdmd/checkpoint.hpp"

#include <cstring>

namespace mdmd {

using json = nlohmann::json;

json model_config_to_json(const ModelConfig& c) {
  return {{"image_size", c.image_size},
          {"patch_size", c.patch_size},
          {"embed_dim", c.embed_dim},
          {"encoder_layers", c.encoder_layers},
          {"encoder_heads", c.encoder_heads},
          {"decoder_blocks", c.decoder_blocks},
          {"decoder_heads", c.decoder_heads},
          {"ffn_ratio", c.ffn_ratio},
          {"decoder_ffn_residual", c.decoder_ffn_residual}};
}

ModelConfig model_config_from_json(const json& j) {
  if (!j.is_object()) fail("config", "model config must be an object");
  ModelConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
  c.encoder_heads = j.value("encoder_heads", c.encoder_heads);
  c.decoder_blocks = j.value("decoder_blocks", c.decoder_blocks);
  c.decoder_heads = j.value("decoder_heads", c.decoder_heads);
  c.ffn_ratio = j.value("ffn_ratio", c.ffn_ratio);
  c.decoder_ffn_residual =
      j.value("decoder_ffn_residual", c.decoder_ffn_residual);
  c.validate();
  return c;
}

namespace detail {

json read_checkpoint_header(std::ifstream& in,
                            const std::filesystem::path& path) {
  char magic[sizeof(kCheckpointMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    fail("checkpoint", "not a checkpoint file: " + path.string());
  std::uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string bytes(len, '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(len));
  if (!in) fail("checkpoint", "truncated checkpoint header: " + path.string());
  json header = json::parse(bytes, nullptr, false);
  if (header.is_discarded())
    fail("checkpoint", "corrupt checkpoint header: " + path.string());
  return header;
}

}  // namespace detail

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("io", "cannot open checkpoint " + path.string());
  json header = detail::read_checkpoint_header(in, path);
  CheckpointInfo info;
  info.step = header.at("step").get<std::int64_t>();
  info.scalar = header.at("scalar").get<std::string>();
  info.config = model_config_from_json(header.at("model"));
  info.schemas = load_schemas(header.at("schemas").dump());
  info.schema_fingerprint = header.at("schema_fingerprint").get<std::string>();
  info.has_adam = header.value("has_adam", false);
  info.train = header.value("train", json());
  return info;
}

}  // namespace mdmd
