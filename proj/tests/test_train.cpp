#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "mdmd/error.hpp"
#include "mdmd/train.hpp"

using namespace mdmd;
namespace fs = std::filesystem;

namespace {

SchemaSet bundled() { return load_schema_dir(MDMD_BUNDLED_SCHEMA_DIR); }

fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("mdmd_train_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ModelConfig toy_model() {
  ModelConfig m;
  m.image_size = 16;
  m.patch_size = 8;
  m.embed_dim = 8;
  m.encoder_layers = 1;
  m.encoder_heads = 2;
  m.decoder_blocks = 1;
  m.ffn_ratio = 2;
  return m;
}

TrainConfig toy_config(const fs::path& manifest, const fs::path& out) {
  TrainConfig c;
  c.datasets = {manifest.string()};
  c.batch_size = 2;
  c.total_steps = 4;
  c.base_lr = 1e-3;
  c.seed = 5;
  c.augment = false;
  c.model = toy_model();
  c.out_dir = out.string();
  return c;
}

}  // namespace

TEST_CASE("train config json round trip") {
  TrainConfig c;
  c.datasets = {"a.jsonl", "b.jsonl"};
  c.batch_size = 3;
  c.total_steps = 77;
  c.loss_mode = LossMode::Euclidean;
  c.token_mode = TokenMode::PerLandmark;
  c.augment_policy.p_flip = 0.25;
  c.model.image_size = 32;
  c.model.patch_size = 8;
  TrainConfig back = train_config_from_json(train_config_to_json(c));
  CHECK(back.datasets == c.datasets);
  CHECK(back.batch_size == 3);
  CHECK(back.total_steps == 77);
  CHECK(back.loss_mode == LossMode::Euclidean);
  CHECK(back.token_mode == TokenMode::PerLandmark);
  CHECK(back.augment_policy.p_flip == 0.25);
  CHECK(back.model.image_size == 32);

  CHECK_THROWS_WITH_AS(train_config_from_json({{"loss_mode", "huber"}}),
                       doctest::Contains("loss_mode"), Error);
  TrainConfig bad;
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("datasets"), Error);
  bad.datasets = {"x"};
  bad.batch_size = 0;
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("batch_size"), Error);
}

TEST_CASE("learning rate decays linearly to zero") {
  TrainConfig c;
  c.base_lr = 1e-4;
  c.total_steps = 1000;
  CHECK(lr_at(0, c) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(lr_at(500, c) == doctest::Approx(5e-5).epsilon(1e-12));
  CHECK(lr_at(1000, c) == 0.0);
  double prev = lr_at(0, c);
  for (int s = 1; s <= 1000; s += 7) {
    double cur = lr_at(s, c);
    CHECK(cur <= prev);
    prev = cur;
  }
}

TEST_CASE("batch sampling is uniform over datasets and homogeneous") {
  SchemaSet set = bundled();
  fs::path d9 = temp_dir("samp9"), d68 = temp_dir("samp68");
  Dataset a = read_dataset(gen_synthetic("synth9", 3, 1, d9, set), set);
  Dataset b = read_dataset(gen_synthetic("synth68", 2, 1, d68, set), set);

  SUBCASE("single dataset always selected") {
    std::vector<Dataset> ds;
    ds.push_back(std::move(a));
    Rng rng = derive_rng(3, "sampler", 0);
    for (int i = 0; i < 20; ++i)
      CHECK(sample_batch(ds, rng, 4).dataset_index == 0);
  }

  SUBCASE("two datasets split evenly over many draws") {
    std::vector<Dataset> ds;
    ds.push_back(std::move(a));
    ds.push_back(std::move(b));
    int first = 0;
    for (int i = 0; i < 10000; ++i) {
      Rng rng = derive_rng(11, "sampler", static_cast<std::uint64_t>(i));
      Batch batch = sample_batch(ds, rng, 2);
      if (batch.dataset_index == 0) ++first;
      for (size_t idx : batch.sample_indices)
        CHECK(idx < ds[batch.dataset_index].size());
    }
    // 3 sigma for Binomial(1e4, 0.5) is about 150; the contract allows 200.
    CHECK(std::abs(first - 5000) <= 200);
  }

  SUBCASE("empty dataset is rejected") {
    std::vector<Dataset> ds;
    ds.push_back(std::move(a));
    ds.back().records.clear();
    Rng rng = derive_rng(3, "sampler", 0);
    CHECK_THROWS_WITH_AS(sample_batch(ds, rng, 2),
                         doctest::Contains("empty dataset"), Error);
  }
}

TEST_CASE("zero learning rate leaves parameters bitwise unchanged") {
  SchemaSet set = bundled();
  fs::path dir = temp_dir("zero_lr");
  TrainConfig cfg = toy_config(gen_synthetic("synth9", 2, 3, dir, set), dir);
  TrainSetup setup = prepare_training(cfg, set);
  MdmdModel<double> model(cfg.model, setup.schemas);
  model.init_params(cfg.seed);
  std::vector<Mat<double>> before = model.params().values;
  AdamState<double> adam;
  adam.init(model.params());
  // lr_at(total_steps) is exactly zero.
  train_step(model, setup.datasets, adam, cfg, cfg.total_steps);
  for (size_t i = 0; i < before.size(); ++i)
    CHECK(model.params().values[i] == before[i]);
  CHECK(adam.t == 1);
}

TEST_CASE("one small step decreases the loss on a single sample") {
  SchemaSet set = bundled();
  fs::path dir = temp_dir("descent");
  TrainConfig cfg = toy_config(gen_synthetic("synth9", 1, 9, dir, set), dir);
  cfg.batch_size = 1;
  cfg.base_lr = 1e-6;
  cfg.grad_clip = 0;  // raw gradient direction
  TrainSetup setup = prepare_training(cfg, set);
  MdmdModel<double> model(cfg.model, setup.schemas);
  model.init_params(cfg.seed);
  AdamState<double> adam;
  adam.init(model.params());

  const Dataset& ds = setup.datasets[0];
  ModelInput input = crop_and_resize(ds.load(0), cfg.crop_margin,
                                     cfg.model.image_size);
  Mat<double> gt = input.landmarks_norm;
  const DatasetSchema& schema = model.schema_set().at(ds.dataset_id);

  double before =
      mdmd_loss(model.forward(input.crop, ds.dataset_id), gt, schema);
  StepStats stats = train_step(model, setup.datasets, adam, cfg, 0);
  CHECK(stats.loss == doctest::Approx(before).epsilon(1e-12));
  double after =
      mdmd_loss(model.forward(input.crop, ds.dataset_id), gt, schema);
  CHECK(after < before);
}

TEST_CASE("training is deterministic given the seed") {
  SchemaSet set = bundled();
  fs::path dir = temp_dir("det");
  fs::path manifest = gen_synthetic("synth9", 3, 21, dir, set);
  auto run = [&](const fs::path& out) {
    TrainConfig cfg = toy_config(manifest, out);
    cfg.augment = true;  // exercise the augmentation streams too
    TrainSetup setup = prepare_training(cfg, set);
    MdmdModel<float> model(cfg.model, setup.schemas);
    model.init_params(cfg.seed);
    AdamState<float> adam;
    adam.init(model.params());
    std::vector<double> losses;
    for (std::int64_t s = 0; s < cfg.total_steps; ++s)
      losses.push_back(
          train_step(model, setup.datasets, adam, cfg, s).loss);
    return std::make_pair(losses, model.params().values);
  };
  auto [la, pa] = run(temp_dir("det_a"));
  auto [lb, pb] = run(temp_dir("det_b"));
  CHECK(la == lb);
  for (size_t i = 0; i < pa.size(); ++i) CHECK(pa[i] == pb[i]);
}

TEST_CASE("a step touches the drawn dataset's heads and the trunk only") {
  SchemaSet set = bundled();
  fs::path d9 = temp_dir("iso9"), d68 = temp_dir("iso68");
  fs::path m9 = gen_synthetic("synth9", 2, 3, d9, set);
  fs::path m68 = gen_synthetic("synth68", 2, 3, d68, set);
  TrainConfig cfg = toy_config(m9, d9);
  cfg.datasets = {m9.string(), m68.string()};
  TrainSetup setup = prepare_training(cfg, set);
  MdmdModel<double> model(cfg.model, setup.schemas);
  model.init_params(cfg.seed);
  AdamState<double> adam;
  adam.init(model.params());
  std::vector<Mat<double>> before = model.params().values;

  StepStats stats = train_step(model, setup.datasets, adam, cfg, 0);
  std::string drawn = stats.dataset_id == 0 ? "synth9" : "synth68";
  std::string other = stats.dataset_id == 0 ? "synth68" : "synth9";

  bool drawn_head_moved = false, trunk_moved = false;
  const ParamStore<double>& params = model.params();
  for (size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.names[i];
    bool changed = params.values[i] != before[i];
    if (name.rfind("head." + other + ".", 0) == 0) {
      CHECK_FALSE(changed);  // bitwise untouched
      CHECK(adam.m[i].isZero(0));
      CHECK(adam.v[i].isZero(0));
    } else if (name.rfind("head." + drawn + ".", 0) == 0) {
      drawn_head_moved = drawn_head_moved || changed;
    } else if (name.rfind("enc.", 0) == 0 || name == "flsg" ||
               name == "patch.W") {
      trunk_moved = trunk_moved || changed;
    }
  }
  CHECK(drawn_head_moved);
  CHECK(trunk_moved);
}

TEST_CASE("non-finite loss aborts with diagnostics") {
  SchemaSet set = bundled();
  fs::path dir = temp_dir("nonfinite");
  TrainConfig cfg = toy_config(gen_synthetic("synth9", 2, 3, dir, set), dir);
  TrainSetup setup = prepare_training(cfg, set);
  MdmdModel<double> model(cfg.model, setup.schemas);
  model.init_params(cfg.seed);
  model.params().at("patch.W").setConstant(
      std::numeric_limits<double>::quiet_NaN());
  AdamState<double> adam;
  adam.init(model.params());
  CHECK_THROWS_WITH_AS(train_step(model, setup.datasets, adam, cfg, 0),
                       doctest::Contains("non-finite loss at step 0"), Error);
}

TEST_CASE("fit writes a resumable checkpoint") {
  SchemaSet set = bundled();
  fs::path dir = temp_dir("fit");
  TrainConfig cfg = toy_config(gen_synthetic("synth9", 3, 13, dir, set),
                               dir / "out");
  cfg.total_steps = 5;
  int calls = 0;
  fs::path ckpt = fit<float>(cfg, set, {}, [&](std::int64_t step, int, double,
                                               double) {
    CHECK(step == calls);
    ++calls;
  });
  CHECK(calls == 5);
  CheckpointInfo info = read_checkpoint_info(ckpt);
  CHECK(info.step == 5);
  CHECK(info.scalar == "single");
  CHECK(info.has_adam);
  CHECK(info.schemas.size() == 1);
  CHECK(info.schemas.at(0).name == "synth9");
  CHECK(info.train.at("total_steps") == 5);
}

TEST_CASE("interrupted and resumed training matches an unbroken run bitwise") {
  SchemaSet set = bundled();
  fs::path dir = temp_dir("resume");
  fs::path manifest = gen_synthetic("synth9", 3, 29, dir, set);

  TrainConfig full = toy_config(manifest, dir / "full");
  full.total_steps = 6;
  full.augment = true;
  std::vector<double> full_losses;
  fs::path full_ckpt =
      fit<float>(full, set, {}, [&](std::int64_t, int, double, double l) {
        full_losses.push_back(l);
      });

  TrainConfig half = full;
  half.out_dir = (dir / "half").string();
  half.stop_after_steps = 3;
  fs::path half_ckpt = fit<float>(half, set);
  CHECK(read_checkpoint_info(half_ckpt).step == 3);

  TrainConfig rest = full;
  rest.out_dir = (dir / "rest").string();
  std::vector<double> rest_losses;
  fs::path rest_ckpt = fit<float>(rest, set, half_ckpt,
                                  [&](std::int64_t, int, double, double l) {
                                    rest_losses.push_back(l);
                                  });

  REQUIRE(rest_losses.size() == 3);
  for (int i = 0; i < 3; ++i) CHECK(rest_losses[i] == full_losses[3 + i]);

  // Final parameters agree bitwise.
  TrainSetup setup = prepare_training(full, set);
  MdmdModel<float> a(full.model, setup.schemas), b(full.model, setup.schemas);
  load_checkpoint<float>(full_ckpt, a, nullptr);
  load_checkpoint<float>(rest_ckpt, b, nullptr);
  for (size_t i = 0; i < a.params().size(); ++i)
    CHECK(a.params().values[i] == b.params().values[i]);
}

TEST_CASE("per-landmark token mode builds one group per landmark") {
  SchemaSet set = bundled();
  fs::path dir = temp_dir("perlm");
  TrainConfig cfg = toy_config(gen_synthetic("synth9", 2, 17, dir, set),
                               dir / "out");
  cfg.token_mode = TokenMode::PerLandmark;
  cfg.total_steps = 2;
  fs::path ckpt = fit<float>(cfg, set);
  CheckpointInfo info = read_checkpoint_info(ckpt);
  REQUIRE(info.schemas.size() == 1);
  const DatasetSchema& s = info.schemas.at(0);
  CHECK(s.flsg_map.group_count() == 9);
  for (const auto& g : s.flsg_map.groups) CHECK(g.size() == 1);
}

TEST_CASE("checkpoint round trip preserves parameters and optimizer state") {
  SchemaSet set = bundled();
  fs::path dir = temp_dir("ckpt");
  fs::path manifest = gen_synthetic("synth9", 2, 3, dir, set);
  TrainConfig cfg = toy_config(manifest, dir);
  TrainSetup setup = prepare_training(cfg, set);
  MdmdModel<double> model(cfg.model, setup.schemas);
  model.init_params(7);
  AdamState<double> adam;
  adam.init(model.params());
  for (std::int64_t s = 0; s < 2; ++s)
    train_step(model, setup.datasets, adam, cfg, s);

  fs::path path = dir / "ck.bin";
  save_checkpoint(path, model, &adam, 2);

  MdmdModel<double> other(cfg.model, setup.schemas);
  AdamState<double> adam2;
  adam2.init(other.params());
  std::int64_t step = load_checkpoint<double>(path, other, &adam2);
  CHECK(step == 2);
  CHECK(adam2.t == adam.t);
  for (size_t i = 0; i < model.params().size(); ++i) {
    CHECK(other.params().values[i] == model.params().values[i]);
    CHECK(adam2.m[i] == adam.m[i]);
    CHECK(adam2.v[i] == adam.v[i]);
  }

  SUBCASE("schema fingerprint mismatch is refused") {
    SchemaSet different;
    different.schemas.push_back(set.at(set.id_of("synth68")));
    different.group_count = set.group_count;
    MdmdModel<double> wrong(cfg.model, different);
    CHECK_THROWS_WITH_AS(load_checkpoint<double>(path, wrong, nullptr),
                         doctest::Contains("fingerprint"), Error);
  }

  SUBCASE("model config mismatch is refused") {
    ModelConfig bigger = cfg.model;
    bigger.embed_dim = 16;
    bigger.encoder_heads = 2;
    MdmdModel<double> wrong(bigger, setup.schemas);
    CHECK_THROWS_WITH_AS(load_checkpoint<double>(path, wrong, nullptr),
                         doctest::Contains("config"), Error);
  }

  SUBCASE("cross precision load approximates the stored values") {
    MdmdModel<float> single(cfg.model, setup.schemas);
    load_checkpoint<float>(path, single, nullptr);
    CHECK(std::abs(static_cast<double>(single.params().at("patch.W")(0, 0)) -
                   model.params().at("patch.W")(0, 0)) < 1e-6);
  }

  SUBCASE("parameter-only checkpoint cannot resume optimizer state") {
    fs::path lean = dir / "lean.bin";
    save_checkpoint<double>(lean, model, nullptr, 2);
    MdmdModel<double> target(cfg.model, setup.schemas);
    AdamState<double> adam3;
    CHECK_THROWS_WITH_AS(load_checkpoint<double>(lean, target, &adam3),
                         doctest::Contains("optimizer state"), Error);
  }
}
