#include "mdmd/train.hpp"

#include <algorithm>
#include <fstream>

namespace mdmd {

using json = nlohmann::json;

void TrainConfig::validate() const {
  if (datasets.empty()) fail("config", "no datasets configured");
  if (batch_size < 1) fail("config", "batch_size must be at least 1");
  if (total_steps < 1) fail("config", "total_steps must be at least 1");
  if (base_lr <= 0) fail("config", "base_lr must be positive");
  model.validate();
}

namespace {

LossMode loss_mode_from_string(const std::string& s) {
  if (s == "laplacian") return LossMode::Laplacian;
  if (s == "euclidean") return LossMode::Euclidean;
  fail("config", "unknown loss_mode '" + s + "'");
}

TokenMode token_mode_from_string(const std::string& s) {
  if (s == "flsg") return TokenMode::Flsg;
  if (s == "per-landmark") return TokenMode::PerLandmark;
  fail("config", "unknown token_mode '" + s + "'");
}

}  // namespace

TrainConfig train_config_from_json(const json& j) {
  if (!j.is_object()) fail("config", "train config must be an object");
  TrainConfig c;
  if (j.contains("datasets"))
    c.datasets = j.at("datasets").get<std::vector<std::string>>();
  c.batch_size = j.value("batch_size", c.batch_size);
  c.total_steps = j.value("total_steps", c.total_steps);
  c.base_lr = j.value("base_lr", c.base_lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.loss_mode = loss_mode_from_string(j.value("loss_mode", "laplacian"));
  c.token_mode = token_mode_from_string(j.value("token_mode", "flsg"));
  c.seed = j.value("seed", c.seed);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.stop_after_steps = j.value("stop_after_steps", c.stop_after_steps);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.crop_margin = j.value("crop_margin", c.crop_margin);
  c.augment = j.value("augment", c.augment);
  if (j.contains("augment_policy")) {
    const json& p = j.at("augment_policy");
    AugmentPolicy& a = c.augment_policy;
    a.p_rotate = p.value("p_rotate", a.p_rotate);
    a.max_rotate_deg = p.value("max_rotate_deg", a.max_rotate_deg);
    a.p_scale = p.value("p_scale", a.p_scale);
    a.scale_lo = p.value("scale_lo", a.scale_lo);
    a.scale_hi = p.value("scale_hi", a.scale_hi);
    a.p_translate = p.value("p_translate", a.p_translate);
    a.max_translate = p.value("max_translate", a.max_translate);
    a.p_flip = p.value("p_flip", a.p_flip);
    a.p_color = p.value("p_color", a.p_color);
    a.contrast_lo = p.value("contrast_lo", a.contrast_lo);
    a.contrast_hi = p.value("contrast_hi", a.contrast_hi);
    a.max_brightness = p.value("max_brightness", a.max_brightness);
  }
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  c.out_dir = j.value("out_dir", c.out_dir);
  return c;
}

json train_config_to_json(const TrainConfig& c) {
  json p = {{"p_rotate", c.augment_policy.p_rotate},
            {"max_rotate_deg", c.augment_policy.max_rotate_deg},
            {"p_scale", c.augment_policy.p_scale},
            {"scale_lo", c.augment_policy.scale_lo},
            {"scale_hi", c.augment_policy.scale_hi},
            {"p_translate", c.augment_policy.p_translate},
            {"max_translate", c.augment_policy.max_translate},
            {"p_flip", c.augment_policy.p_flip},
            {"p_color", c.augment_policy.p_color},
            {"contrast_lo", c.augment_policy.contrast_lo},
            {"contrast_hi", c.augment_policy.contrast_hi},
            {"max_brightness", c.augment_policy.max_brightness}};
  return {{"datasets", c.datasets},
          {"batch_size", c.batch_size},
          {"total_steps", c.total_steps},
          {"base_lr", c.base_lr},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"loss_mode",
           c.loss_mode == LossMode::Laplacian ? "laplacian" : "euclidean"},
          {"token_mode",
           c.token_mode == TokenMode::Flsg ? "flsg" : "per-landmark"},
          {"seed", c.seed},
          {"checkpoint_every", c.checkpoint_every},
          {"stop_after_steps", c.stop_after_steps},
          {"grad_clip", c.grad_clip},
          {"crop_margin", c.crop_margin},
          {"augment", c.augment},
          {"augment_policy", p},
          {"model", model_config_to_json(c.model)},
          {"out_dir", c.out_dir}};
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail("io", "cannot open train config " + path.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded())
    fail("config", "train config is not valid JSON: " + path.string());
  return train_config_from_json(j);
}

Batch sample_batch(const std::vector<Dataset>& datasets, Rng& rng,
                   int batch_size) {
  if (datasets.empty()) fail("train", "no datasets to sample from");
  for (const Dataset& d : datasets)
    if (d.size() == 0)
      fail("train", "empty dataset '" + d.schema_name + "'");
  Batch batch;
  batch.dataset_index = rng.uniform_int(datasets.size());
  const Dataset& ds = datasets[batch.dataset_index];
  batch.sample_indices.reserve(static_cast<size_t>(batch_size));
  for (int i = 0; i < batch_size; ++i)
    batch.sample_indices.push_back(rng.uniform_int(ds.size()));
  return batch;
}

TrainSetup prepare_training(const TrainConfig& config, const SchemaSet& set) {
  TrainSetup setup;
  std::vector<std::string> names;
  for (const std::string& manifest : config.datasets) {
    Dataset ds = read_dataset(manifest, set);
    if (std::find(names.begin(), names.end(), ds.schema_name) == names.end()) {
      names.push_back(ds.schema_name);
      setup.schemas.schemas.push_back(set.at(set.id_of(ds.schema_name)));
    }
    setup.datasets.push_back(std::move(ds));
  }
  setup.schemas.group_count = set.group_count;
  if (config.token_mode == TokenMode::PerLandmark)
    setup.schemas = to_per_landmark(setup.schemas);
  for (Dataset& ds : setup.datasets)
    ds.dataset_id = setup.schemas.id_of(ds.schema_name);
  return setup;
}

}  // namespace mdmd
