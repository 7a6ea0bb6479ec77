#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mdmd/checkpoint.hpp"
#include "mdmd/data.hpp"
#include "mdmd/error.hpp"
#include "mdmd/loss.hpp"
#include "mdmd/metrics.hpp"
#include "mdmd/model.hpp"
#include "mdmd/train.hpp"

namespace {

using namespace mdmd;
using json = nlohmann::json;

int exit_code_for(const std::string& code) {
  if (code == "fingerprint") return 3;
  if (code == "unknown-schema") return 4;
  return 2;
}

bool use_double_precision() {
  const char* env = std::getenv("MDMD_PRECISION");
  if (!env || std::string(env) == "single") return false;
  if (std::string(env) == "double") return true;
  fail("config", "MDMD_PRECISION must be 'single' or 'double'");
}

SchemaSet schemas_or_bundled(const std::string& dir) {
  return load_schema_dir(dir.empty() ? MDMD_BUNDLED_SCHEMA_DIR : dir);
}

std::string peek_manifest_schema(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) fail("io", "cannot open manifest " + manifest.string());
  std::string line;
  std::getline(in, line);
  json header = json::parse(line, nullptr, false);
  if (header.is_discarded() || !header.contains("schema"))
    fail("data", "manifest header must declare schema and landmark_count");
  return header["schema"].get<std::string>();
}

double margin_from_train_json(const json& train) {
  if (train.is_object()) return train.value("crop_margin", 0.25);
  return 0.25;
}

struct TrainArgs {
  std::string config, resume, schemas_dir;
};

template <typename S>
int run_train(const TrainArgs& args) {
  TrainConfig cfg = load_train_config(args.config);
  SchemaSet set = schemas_or_bundled(args.schemas_dir);
  std::vector<std::int64_t> per_dataset;
  std::filesystem::path ckpt = fit<S>(
      cfg, set, std::filesystem::path(args.resume),
      [&](std::int64_t step, int dataset_id, double lr, double loss) {
        if (per_dataset.size() <= static_cast<size_t>(dataset_id))
          per_dataset.resize(static_cast<size_t>(dataset_id) + 1, 0);
        ++per_dataset[static_cast<size_t>(dataset_id)];
        std::cerr << step << ", " << dataset_id << ", " << lr << ", " << loss
                  << "\n";
      });
  for (size_t i = 0; i < per_dataset.size(); ++i)
    std::cerr << "dataset " << i << ": " << per_dataset[i] << " steps\n";
  std::cout << ckpt.string() << "\n";
  return 0;
}

// Prediction mapped through the crop transform into original-image pixels.
Mat<double> to_original_px(const Mat<double>& landmarks_norm,
                           const Affine& crop_transform, int image_size) {
  Mat<double> out(landmarks_norm.rows(), 2);
  for (Eigen::Index k = 0; k < landmarks_norm.rows(); ++k) {
    auto [x, y] = crop_transform.apply(landmarks_norm(k, 0) * image_size,
                                       landmarks_norm(k, 1) * image_size);
    out(k, 0) = x;
    out(k, 1) = y;
  }
  return out;
}

struct EvalArgs {
  std::string checkpoint, manifest, ced_out;
};

template <typename S>
int run_eval(const EvalArgs& args) {
  CheckpointInfo info = read_checkpoint_info(args.checkpoint);
  MdmdModel<S> model(info.config, info.schemas);
  load_checkpoint<S>(args.checkpoint, model, nullptr);

  std::string schema_name = peek_manifest_schema(args.manifest);
  int dataset_id = info.schemas.id_of(schema_name);
  if (dataset_id < 0)
    fail("fingerprint", "checkpoint (schemas " + info.schema_fingerprint +
                            ") was not trained for schema '" + schema_name +
                            "'");
  Dataset ds = read_dataset(args.manifest, info.schemas);
  double margin = margin_from_train_json(info.train);

  std::vector<ScoredFace> faces;
  for (size_t i = 0; i < ds.size(); ++i) {
    Sample sample = ds.load(i);
    ModelInput input =
        crop_and_resize(sample, margin, model.config().image_size);
    PredictionSet<S> pred =
        model.forward(input.crop.template cast<S>(), dataset_id);
    ScoredFace face;
    face.pred = to_original_px(pred.landmarks.template cast<double>(),
                               input.crop_transform, input.image_size);
    face.gt = sample.landmarks;
    face.bbox_w = sample.bbox[2];
    face.bbox_h = sample.bbox[3];
    faces.push_back(std::move(face));
  }
  MetricReport report = evaluate(faces, info.schemas.at(dataset_id));
  std::cout << metric_report_to_json(report) << "\n";
  if (!args.ced_out.empty()) {
    std::ofstream out(args.ced_out);
    if (!out) fail("io", "cannot write " + args.ced_out);
    out << "threshold,fraction\n";
    for (const auto& [t, f] : report.ced) out << t << "," << f << "\n";
  }
  return 0;
}

struct PredictArgs {
  std::string checkpoint, image, dataset, overlay;
  std::vector<double> bbox;
};

template <typename S>
int run_predict(const PredictArgs& args) {
  if (args.bbox.size() != 4)
    fail("config", "--bbox needs four values: x,y,w,h");
  CheckpointInfo info = read_checkpoint_info(args.checkpoint);
  MdmdModel<S> model(info.config, info.schemas);
  load_checkpoint<S>(args.checkpoint, model, nullptr);
  int dataset_id = info.schemas.id_of(args.dataset);
  if (dataset_id < 0)
    fail("unknown-schema",
         "checkpoint has no dataset '" + args.dataset + "'");
  const DatasetSchema& schema = info.schemas.at(dataset_id);

  Sample sample;
  sample.image = read_png(args.image);
  sample.bbox = {args.bbox[0], args.bbox[1], args.bbox[2], args.bbox[3]};
  sample.landmarks = Mat<double>::Zero(schema.landmark_count, 2);
  sample.dataset_id = dataset_id;
  sample.face_id = "predict";
  ModelInput input = crop_and_resize(sample, margin_from_train_json(info.train),
                                     model.config().image_size);
  PredictionSet<S> pred =
      model.forward(input.crop.template cast<S>(), dataset_id);

  Mat<double> lm_norm = pred.landmarks.template cast<double>();
  Mat<double> lm_px =
      to_original_px(lm_norm, input.crop_transform, input.image_size);
  const Affine& tf = input.crop_transform;
  double S_img = input.image_size;

  json out;
  out["dataset"] = args.dataset;
  out["landmarks"] = json::array();
  out["covariances"] = json::array();
  std::vector<std::array<double, 4>> sigma_roots;  // row-major 2x2 J*L
  for (int k = 0; k < schema.landmark_count; ++k) {
    out["landmarks"].push_back(json::array({lm_px(k, 0), lm_px(k, 1)}));
    CholeskyFactor<double> f = decode_cholesky<double>(
        static_cast<double>(pred.cholesky_raw(k, 0)),
        static_cast<double>(pred.cholesky_raw(k, 1)),
        static_cast<double>(pred.cholesky_raw(k, 2)));
    // Crop-normalized factor scaled to pixels, then through the crop map's
    // linear part; the covariance is (J L)(J L)^T.
    double l00 = f.a * S_img, l10 = f.b * S_img, l11 = f.c * S_img;
    double j00 = tf.m00, j01 = tf.m01, j10 = tf.m10, j11 = tf.m11;
    double r00 = j00 * l00 + j01 * l10, r01 = j01 * l11;
    double r10 = j10 * l00 + j11 * l10, r11 = j11 * l11;
    sigma_roots.push_back({r00, r01, r10, r11});
    double c00 = r00 * r00 + r01 * r01;
    double c01 = r00 * r10 + r01 * r11;
    double c11 = r10 * r10 + r11 * r11;
    out["covariances"].push_back(
        json::array({json::array({c00, c01}), json::array({c01, c11})}));
  }
  std::cout << out.dump() << "\n";

  if (!args.overlay.empty()) {
    ImageU8 canvas = sample.image;
    for (int k = 0; k < schema.landmark_count; ++k) {
      const auto& r = sigma_roots[static_cast<size_t>(k)];
      const int segments = 64;
      double px = 0, py = 0;
      for (int s = 0; s <= segments; ++s) {
        double a = 2 * M_PI * s / segments;
        double ux = std::cos(a), uy = std::sin(a);
        double x = lm_px(k, 0) + r[0] * ux + r[1] * uy;
        double y = lm_px(k, 1) + r[2] * ux + r[3] * uy;
        if (s > 0) draw_line(canvas, px, py, x, y, {40, 200, 80});
        px = x;
        py = y;
      }
      draw_dot(canvas, lm_px(k, 0), lm_px(k, 1), {230, 40, 40}, 1);
    }
    write_png(args.overlay, canvas);
  }
  return 0;
}

struct GenArgs {
  std::string schema, out, schemas_dir;
  int count = 8;
  std::uint64_t seed = 0;
};

int run_gen(const GenArgs& args) {
  SchemaSet set = schemas_or_bundled(args.schemas_dir);
  std::filesystem::path manifest =
      gen_synthetic(args.schema, args.count, args.seed, args.out, set);
  std::cout << manifest.string() << "\n";
  return 0;
}

int run_inspect(const std::string& name, const std::string& schemas_dir) {
  SchemaSet set = schemas_or_bundled(schemas_dir);
  int id = set.id_of(name);
  if (id < 0) fail("unknown-schema", "no schema named '" + name + "'");
  const DatasetSchema& s = set.at(id);
  std::cout << "schema: " << s.name << "\n";
  std::cout << "landmarks: " << s.landmark_count << "\n";
  if (s.normalization.kind == NormalizationKind::LandmarkPair)
    std::cout << "normalization: pair(" << s.normalization.i << ", "
              << s.normalization.j << ")\n";
  else
    std::cout << "normalization: bbox\n";
  std::cout << "flip_permutation: " << (s.flip_permutation ? "yes" : "no")
            << "\n";
  std::cout << "groups: " << s.flsg_map.group_count() << "\n";
  int nonempty = 0;
  for (size_t g = 0; g < s.flsg_map.groups.size(); ++g) {
    const auto& members = s.flsg_map.groups[g];
    std::cout << "  group " << g << " (size " << members.size() << "):";
    for (int m : members) std::cout << " " << m;
    std::cout << "\n";
    if (!members.empty()) ++nonempty;
  }
  std::cout << "nonempty groups: " << nonempty << "\n";
  std::cout << "gathered order:";
  for (int idx : flatten_ids(s.flsg_map)) std::cout << " " << idx;
  std::cout << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-domain landmark localization"};
  app.require_subcommand(1);

  TrainArgs train_args;
  CLI::App* cmd_train = app.add_subcommand("train", "run the training loop");
  cmd_train->add_option("--config", train_args.config, "train config JSON")
      ->required();
  cmd_train->add_option("--resume", train_args.resume, "checkpoint to resume");
  cmd_train->add_option("--schemas", train_args.schemas_dir,
                        "schema directory (default: bundled)");

  EvalArgs eval_args;
  CLI::App* cmd_eval = app.add_subcommand("eval", "score a manifest");
  cmd_eval->add_option("--checkpoint", eval_args.checkpoint, "model checkpoint")
      ->required();
  cmd_eval->add_option("--manifest", eval_args.manifest, "dataset manifest")
      ->required();
  cmd_eval->add_option("--ced-out", eval_args.ced_out, "CED curve CSV path");

  PredictArgs predict_args;
  CLI::App* cmd_predict =
      app.add_subcommand("predict", "landmarks for one image");
  cmd_predict
      ->add_option("--checkpoint", predict_args.checkpoint, "model checkpoint")
      ->required();
  cmd_predict->add_option("--image", predict_args.image, "input PNG")
      ->required();
  cmd_predict
      ->add_option("--bbox", predict_args.bbox, "face box x,y,w,h")
      ->required()
      ->delimiter(',')
      ->expected(4);
  cmd_predict
      ->add_option("--dataset", predict_args.dataset, "schema/dataset name")
      ->required();
  cmd_predict->add_option("--overlay", predict_args.overlay,
                          "write an annotated PNG here");

  GenArgs gen_args;
  CLI::App* cmd_gen =
      app.add_subcommand("gen-synthetic", "render a synthetic dataset");
  cmd_gen->add_option("--schema", gen_args.schema, "schema name")->required();
  cmd_gen->add_option("--count", gen_args.count, "number of faces");
  cmd_gen->add_option("--seed", gen_args.seed, "generator seed");
  cmd_gen->add_option("--out", gen_args.out, "output directory")->required();
  cmd_gen->add_option("--schemas", gen_args.schemas_dir,
                      "schema directory (default: bundled)");

  std::string inspect_name, inspect_dir;
  CLI::App* cmd_inspect =
      app.add_subcommand("inspect-schema", "print a schema's group layout");
  cmd_inspect->add_option("name", inspect_name, "schema name")->required();
  cmd_inspect->add_option("--schemas", inspect_dir,
                          "schema directory (default: bundled)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return 2;
  }

  try {
    bool use_double = use_double_precision();
    if (cmd_train->parsed())
      return use_double ? run_train<double>(train_args)
                        : run_train<float>(train_args);
    if (cmd_eval->parsed())
      return use_double ? run_eval<double>(eval_args)
                        : run_eval<float>(eval_args);
    if (cmd_predict->parsed())
      return use_double ? run_predict<double>(predict_args)
                        : run_predict<float>(predict_args);
    if (cmd_gen->parsed()) return run_gen(gen_args);
    if (cmd_inspect->parsed()) return run_inspect(inspect_name, inspect_dir);
    std::cerr << "error: config: no command given\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 2;
  }
}
