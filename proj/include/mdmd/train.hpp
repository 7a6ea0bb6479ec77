#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdmd/checkpoint.hpp"
#include "mdmd/data.hpp"
#include "mdmd/loss.hpp"
#include "mdmd/model.hpp"

namespace mdmd {

enum class TokenMode { Flsg, PerLandmark };

struct TrainConfig {
  std::vector<std::string> datasets;  // manifest paths
  int batch_size = 16;
  std::int64_t total_steps = 1000;
  double base_lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  LossMode loss_mode = LossMode::Laplacian;
  TokenMode token_mode = TokenMode::Flsg;
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every = 0;  // 0: only the final checkpoint
  std::int64_t stop_after_steps = 0;  // 0: run to total_steps (resume drills)
  double grad_clip = 1.0;             // global norm; <= 0 disables
  double crop_margin = 0.25;
  bool augment = true;
  AugmentPolicy augment_policy;
  ModelConfig model;
  std::string out_dir = "train_out";

  void validate() const;
};

TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json train_config_to_json(const TrainConfig& config);
TrainConfig load_train_config(const std::filesystem::path& path);

// One mini-batch: a dataset choice plus with-replacement sample indices.
struct Batch {
  size_t dataset_index = 0;
  std::vector<size_t> sample_indices;
};

Batch sample_batch(const std::vector<Dataset>& datasets, Rng& rng,
                   int batch_size);

inline double lr_at(std::int64_t step, const TrainConfig& config) {
  return config.base_lr *
         (1.0 - static_cast<double>(step) /
                    static_cast<double>(config.total_steps));
}

// The datasets actually referenced by the config, ids remapped onto a schema
// set restricted to them (in first-use order); per-landmark mode rewrites the
// groups. The model must be built over `schemas`.
struct TrainSetup {
  std::vector<Dataset> datasets;
  SchemaSet schemas;
};

TrainSetup prepare_training(const TrainConfig& config, const SchemaSet& set);

struct StepStats {
  double loss = 0;
  double lr = 0;
  int dataset_id = 0;
};

// Gradients flow only into the drawn dataset's heads plus the shared trunk;
// leaves the backward pass never touched are skipped, so unselected heads
// stay bitwise identical (their moments also stay zero until first use).
template <typename S>
StepStats train_step(MdmdModel<S>& model, const std::vector<Dataset>& datasets,
                     AdamState<S>& adam, const TrainConfig& config,
                     std::int64_t step) {
  Rng sampler = derive_rng(config.seed, "sampler",
                           static_cast<std::uint64_t>(step));
  Batch batch = sample_batch(datasets, sampler, config.batch_size);
  const Dataset& ds = datasets[batch.dataset_index];
  const DatasetSchema& schema = model.schema_set().at(ds.dataset_id);

  Tape<S> tape;
  BoundParams<S> bound = model.bind(tape, true);
  std::vector<Node<S>*> losses;
  std::vector<S> weights(batch.sample_indices.size(),
                         S(1) / S(batch.sample_indices.size()));
  std::vector<std::string> face_ids;
  for (size_t slot = 0; slot < batch.sample_indices.size(); ++slot) {
    Sample sample = ds.load(batch.sample_indices[slot]);
    face_ids.push_back(sample.face_id);
    ModelInput input =
        crop_and_resize(sample, config.crop_margin, model.config().image_size);
    if (config.augment) {
      Rng aug = derive_rng(config.seed, "aug", static_cast<std::uint64_t>(step),
                           static_cast<std::uint64_t>(slot));
      input = augment(input, config.augment_policy, schema, aug);
    }
    Mat<S> image = input.crop.template cast<S>();
    Mat<S> gt = input.landmarks_norm.template cast<S>();
    auto [lm, chol] =
        model.forward_nodes(tape, bound, image, ds.dataset_id);
    losses.push_back(
        loss_node(tape, lm, chol, gt, schema, config.loss_mode));
  }
  Node<S>* total = tape.weighted_sum(losses, weights);

  StepStats stats;
  stats.loss = static_cast<double>(total->value(0, 0));
  stats.lr = lr_at(step, config);
  stats.dataset_id = ds.dataset_id;
  if (!std::isfinite(stats.loss)) {
    std::string ids;
    for (const std::string& f : face_ids) ids += (ids.empty() ? "" : ", ") + f;
    fail("train", "non-finite loss at step " + std::to_string(step) +
                      " (dataset " + std::to_string(ds.dataset_id) +
                      ", faces: " + ids + ")");
  }
  tape.backward(total);

  double sq_norm = 0;
  for (Node<S>* leaf : bound.leaves)
    if (leaf->grad.size() > 0)
      sq_norm += static_cast<double>(leaf->grad.squaredNorm());
  S clip_scale = S(1);
  if (config.grad_clip > 0) {
    double norm = std::sqrt(sq_norm);
    if (norm > config.grad_clip)
      clip_scale = static_cast<S>(config.grad_clip / norm);
  }

  adam.t += 1;
  S bc1 = S(1) - static_cast<S>(std::pow(config.beta1, adam.t));
  S bc2 = S(1) - static_cast<S>(std::pow(config.beta2, adam.t));
  S b1 = static_cast<S>(config.beta1), b2 = static_cast<S>(config.beta2);
  S lr = static_cast<S>(stats.lr), eps = static_cast<S>(config.adam_eps);
  ParamStore<S>& params = model.params();
  for (size_t i = 0; i < bound.leaves.size(); ++i) {
    if (bound.leaves[i]->grad.size() == 0) continue;
    Mat<S> g = bound.leaves[i]->grad * clip_scale;
    adam.m[i] = b1 * adam.m[i] + (S(1) - b1) * g;
    adam.v[i] =
        (b2 * adam.v[i].array() + (S(1) - b2) * g.array().square()).matrix();
    params.values[i] -=
        (lr * (adam.m[i].array() / bc1) /
         ((adam.v[i].array() / bc2).sqrt() + eps))
            .matrix();
  }
  return stats;
}

using StepCallback =
    std::function<void(std::int64_t step, int dataset_id, double lr,
                       double loss)>;

// Runs the training loop, checkpointing into out_dir; returns the checkpoint
// path. A non-empty `resume` restores parameters, optimizer state, and step.
template <typename S>
std::filesystem::path fit(const TrainConfig& config, const SchemaSet& set,
                          const std::filesystem::path& resume = {},
                          const StepCallback& on_step = nullptr) {
  config.validate();
  TrainSetup setup = prepare_training(config, set);
  MdmdModel<S> model(config.model, setup.schemas);
  AdamState<S> adam;
  adam.init(model.params());

  std::int64_t start = 0;
  if (!resume.empty())
    start = load_checkpoint<S>(resume, model, &adam);
  else
    model.init_params(config.seed);

  std::filesystem::create_directories(config.out_dir);
  std::filesystem::path ckpt =
      std::filesystem::path(config.out_dir) / "checkpoint.bin";
  nlohmann::json train_json = train_config_to_json(config);

  std::int64_t stop = config.total_steps;
  if (config.stop_after_steps > 0)
    stop = std::min(stop, start + config.stop_after_steps);
  for (std::int64_t step = start; step < stop; ++step) {
    StepStats stats = train_step(model, setup.datasets, adam, config, step);
    if (on_step) on_step(step, stats.dataset_id, stats.lr, stats.loss);
    if (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0
        && step + 1 < stop)
      save_checkpoint(ckpt, model, &adam, step + 1, train_json);
  }
  save_checkpoint(ckpt, model, &adam, stop, train_json);
  return ckpt;
}

}  // namespace mdmd
