#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdmd/error.hpp"
#include "mdmd/model.hpp"

namespace mdmd {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian");

// Adam first/second moments, aligned with ParamStore order.
template <typename S>
struct AdamState {
  std::int64_t t = 0;
  std::vector<Mat<S>> m, v;

  void init(const ParamStore<S>& params) {
    t = 0;
    m.clear();
    v.clear();
    for (const Mat<S>& p : params.values) {
      m.push_back(Mat<S>::Zero(p.rows(), p.cols()));
      v.push_back(Mat<S>::Zero(p.rows(), p.cols()));
    }
  }
};

nlohmann::json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Header fields of a checkpoint, readable without a model instance.
struct CheckpointInfo {
  std::int64_t step = 0;
  std::string scalar;  // "single" | "double"
  ModelConfig config;
  SchemaSet schemas;
  std::string schema_fingerprint;
  bool has_adam = false;
  nlohmann::json train;  // train config as written, or null
};

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'M', 'D', 'M', 'D',
                                             'C', 'K', 'P', '1'};

nlohmann::json read_checkpoint_header(std::ifstream& in,
                                      const std::filesystem::path& path);

template <typename S>
const char* scalar_tag() {
  return sizeof(S) == 4 ? "single" : "double";
}

}  // namespace detail

// File layout: magic, u32 header length, JSON header, raw row-major payload.
template <typename S>
void save_checkpoint(const std::filesystem::path& path,
                     const MdmdModel<S>& model, const AdamState<S>* adam,
                     std::int64_t step,
                     const nlohmann::json& train = nullptr) {
  const ParamStore<S>& params = model.params();
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  auto add_tensor = [&](const std::string& name, const Mat<S>& m,
                        const char* kind) {
    tensors.push_back({{"name", name},
                       {"rows", m.rows()},
                       {"cols", m.cols()},
                       {"offset", offset},
                       {"kind", kind}});
    offset += static_cast<std::uint64_t>(m.size()) * sizeof(S);
  };
  for (size_t i = 0; i < params.size(); ++i)
    add_tensor(params.names[i], params.values[i], "param");
  if (adam) {
    for (size_t i = 0; i < params.size(); ++i)
      add_tensor(params.names[i], adam->m[i], "adam_m");
    for (size_t i = 0; i < params.size(); ++i)
      add_tensor(params.names[i], adam->v[i], "adam_v");
  }

  nlohmann::json header;
  header["version"] = 1;
  header["scalar"] = detail::scalar_tag<S>();
  header["step"] = step;
  header["schema_fingerprint"] = schema_set_fingerprint(model.schema_set());
  header["schemas"] = nlohmann::json::parse(schema_set_to_json(model.schema_set()));
  header["model"] = model_config_to_json(model.config());
  header["train"] = train;
  header["adam_t"] = adam ? adam->t : 0;
  header["has_adam"] = adam != nullptr;
  header["tensors"] = tensors;
  std::string header_bytes = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) fail("io", "cannot write checkpoint " + path.string());
  out.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
  std::uint32_t len = static_cast<std::uint32_t>(header_bytes.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(header_bytes.data(), static_cast<std::streamsize>(len));
  auto write_mat = [&](const Mat<S>& m) {
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(m.size() * sizeof(S)));
  };
  for (const Mat<S>& m : params.values) write_mat(m);
  if (adam) {
    for (const Mat<S>& m : adam->m) write_mat(m);
    for (const Mat<S>& m : adam->v) write_mat(m);
  }
  if (!out) fail("io", "short write on checkpoint " + path.string());
}

// Loads parameters (and optimizer state when `adam` is non-null) into a model
// whose schemas and config must match the file. Returns the stored step.
template <typename S>
std::int64_t load_checkpoint(const std::filesystem::path& path,
                             MdmdModel<S>& model, AdamState<S>* adam) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("io", "cannot open checkpoint " + path.string());
  nlohmann::json header = detail::read_checkpoint_header(in, path);

  std::string want = schema_set_fingerprint(model.schema_set());
  std::string have = header.at("schema_fingerprint").get<std::string>();
  if (want != have)
    fail("fingerprint", "checkpoint schema fingerprint " + have +
                            " does not match model schemas " + want);
  if (model_config_to_json(model.config()) != header.at("model"))
    fail("checkpoint", "checkpoint model config does not match");
  if (adam && !header.at("has_adam").get<bool>())
    fail("checkpoint", "checkpoint has no optimizer state to resume from");

  std::string scalar = header.at("scalar").get<std::string>();
  if (scalar != "single" && scalar != "double")
    fail("checkpoint", "unknown checkpoint scalar '" + scalar + "'");
  size_t stored_width = scalar == "single" ? 4 : 8;

  std::streampos payload_start = in.tellg();
  ParamStore<S>& params = model.params();
  if (adam && adam->m.size() != params.size()) adam->init(params);
  size_t loaded_params = 0;

  auto read_into = [&](Mat<S>& dst, const nlohmann::json& t) {
    if (dst.rows() != t.at("rows").get<Eigen::Index>() ||
        dst.cols() != t.at("cols").get<Eigen::Index>())
      fail("checkpoint", "tensor shape mismatch for " +
                             t.at("name").get<std::string>());
    in.seekg(payload_start +
             static_cast<std::streamoff>(t.at("offset").get<std::uint64_t>()));
    size_t count = static_cast<size_t>(dst.size());
    if (stored_width == sizeof(S)) {
      in.read(reinterpret_cast<char*>(dst.data()),
              static_cast<std::streamsize>(count * sizeof(S)));
    } else if (stored_width == 4) {
      std::vector<float> buf(count);
      in.read(reinterpret_cast<char*>(buf.data()),
              static_cast<std::streamsize>(count * 4));
      for (size_t i = 0; i < count; ++i) dst.data()[i] = static_cast<S>(buf[i]);
    } else {
      std::vector<double> buf(count);
      in.read(reinterpret_cast<char*>(buf.data()),
              static_cast<std::streamsize>(count * 8));
      for (size_t i = 0; i < count; ++i) dst.data()[i] = static_cast<S>(buf[i]);
    }
    if (!in) fail("io", "truncated checkpoint " + path.string());
  };

  for (const nlohmann::json& t : header.at("tensors")) {
    std::string name = t.at("name").get<std::string>();
    auto it = params.index.find(name);
    if (it == params.index.end())
      fail("checkpoint", "checkpoint tensor " + name + " has no model slot");
    std::string kind = t.at("kind").get<std::string>();
    if (kind == "param") {
      read_into(params.values[it->second], t);
      ++loaded_params;
    } else if (adam && kind == "adam_m") {
      read_into(adam->m[it->second], t);
    } else if (adam && kind == "adam_v") {
      read_into(adam->v[it->second], t);
    }
  }
  if (loaded_params != params.size())
    fail("checkpoint", "checkpoint is missing parameter tensors");
  if (adam) adam->t = header.at("adam_t").get<std::int64_t>();
  return header.at("step").get<std::int64_t>();
}

}  // namespace mdmd
