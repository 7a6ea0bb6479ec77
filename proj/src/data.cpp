#include "mdmd/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mdmd/error.hpp"

namespace mdmd {

using json = nlohmann::json;

Affine Affine::compose(const Affine& other) const {
  Affine r;
  r.m00 = m00 * other.m00 + m01 * other.m10;
  r.m01 = m00 * other.m01 + m01 * other.m11;
  r.m10 = m10 * other.m00 + m11 * other.m10;
  r.m11 = m10 * other.m01 + m11 * other.m11;
  r.tx = m00 * other.tx + m01 * other.ty + tx;
  r.ty = m10 * other.tx + m11 * other.ty + ty;
  return r;
}

Affine Affine::inverse() const {
  double det = m00 * m11 - m01 * m10;
  if (det == 0) fail("data", "singular affine transform");
  Affine r;
  r.m00 = m11 / det;
  r.m01 = -m01 / det;
  r.m10 = -m10 / det;
  r.m11 = m00 / det;
  r.tx = -(r.m00 * tx + r.m01 * ty);
  r.ty = -(r.m10 * tx + r.m11 * ty);
  return r;
}

Affine Affine::translation(double dx, double dy) {
  Affine r;
  r.tx = dx;
  r.ty = dy;
  return r;
}

Affine Affine::scaling(double s) {
  Affine r;
  r.m00 = s;
  r.m11 = s;
  return r;
}

Affine Affine::rotation(double radians) {
  Affine r;
  double c = std::cos(radians), s = std::sin(radians);
  r.m00 = c;
  r.m01 = -s;
  r.m10 = s;
  r.m11 = c;
  return r;
}

namespace {

MatD landmarks_from_json(const json& arr, const std::string& face_id) {
  if (!arr.is_array())
    fail("data", "landmarks must be an array (face " + face_id + ")");
  MatD out(static_cast<Eigen::Index>(arr.size()), 2);
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const json& pt = arr[static_cast<size_t>(i)];
    if (!pt.is_array() || pt.size() != 2)
      fail("data", "landmark " + std::to_string(i) + " malformed (face " +
                       face_id + ")");
    out(i, 0) = pt[0].get<double>();
    out(i, 1) = pt[1].get<double>();
  }
  return out;
}

json landmarks_to_json(const MatD& landmarks) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < landmarks.rows(); ++i)
    arr.push_back(json::array({landmarks(i, 0), landmarks(i, 1)}));
  return arr;
}

}  // namespace

Dataset read_dataset(const std::filesystem::path& manifest_path,
                     const SchemaSet& set) {
  std::ifstream in(manifest_path);
  if (!in) fail("io", "cannot open manifest " + manifest_path.string());

  std::string line;
  if (!std::getline(in, line)) fail("data", "empty manifest");
  json header = json::parse(line, nullptr, false);
  if (header.is_discarded() || !header.contains("schema") ||
      !header.contains("landmark_count"))
    fail("data", "manifest header must declare schema and landmark_count");

  Dataset ds;
  ds.schema_name = header["schema"].get<std::string>();
  ds.landmark_count = header["landmark_count"].get<int>();
  ds.dataset_id = set.id_of(ds.schema_name);
  if (ds.dataset_id < 0)
    fail("unknown-schema", "manifest references unknown schema '" +
                               ds.schema_name + "'");
  if (set.at(ds.dataset_id).landmark_count != ds.landmark_count)
    fail("data", "manifest landmark_count " +
                     std::to_string(ds.landmark_count) +
                     " disagrees with schema '" + ds.schema_name + "'");
  ds.root = manifest_path.parent_path();

  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json rec = json::parse(line, nullptr, false);
    if (rec.is_discarded()) fail("data", "malformed manifest record: " + line);
    SampleRecord sample;
    sample.face_id = rec.value("id", std::string("record " + std::to_string(
                                                     ds.records.size())));
    if (!rec.contains("image") || !rec.contains("bbox") ||
        !rec.contains("landmarks"))
      fail("data", "record missing fields (face " + sample.face_id + ")");
    sample.image = rec["image"].get<std::string>();
    const json& bb = rec["bbox"];
    if (!bb.is_array() || bb.size() != 4)
      fail("data", "bbox must be [x,y,w,h] (face " + sample.face_id + ")");
    for (int i = 0; i < 4; ++i) sample.bbox[i] = bb[i].get<double>();
    if (sample.bbox[2] <= 0 || sample.bbox[3] <= 0)
      fail("data", "bbox needs positive size (face " + sample.face_id + ")");
    sample.landmarks = landmarks_from_json(rec["landmarks"], sample.face_id);
    if (sample.landmarks.rows() != ds.landmark_count)
      fail("data", "landmark count mismatch for face " + sample.face_id +
                       ": got " + std::to_string(sample.landmarks.rows()) +
                       ", schema '" + ds.schema_name + "' wants " +
                       std::to_string(ds.landmark_count));
    if (!std::filesystem::exists(ds.root / sample.image))
      fail("io", "missing image file " + (ds.root / sample.image).string() +
                     " (face " + sample.face_id + ")");
    ds.records.push_back(std::move(sample));
  }
  return ds;
}

void write_manifest(const std::filesystem::path& manifest_path,
                    const Dataset& dataset) {
  std::ofstream out(manifest_path);
  if (!out) fail("io", "cannot write manifest " + manifest_path.string());
  json header;
  header["schema"] = dataset.schema_name;
  header["landmark_count"] = dataset.landmark_count;
  out << header.dump() << "\n";
  for (const SampleRecord& rec : dataset.records) {
    json j;
    j["image"] = rec.image;
    j["bbox"] = json::array({rec.bbox[0], rec.bbox[1], rec.bbox[2], rec.bbox[3]});
    j["landmarks"] = landmarks_to_json(rec.landmarks);
    j["id"] = rec.face_id;
    out << j.dump() << "\n";
  }
}

Sample Dataset::load(size_t index) const {
  const SampleRecord& rec = records.at(index);
  Sample s;
  s.image = read_png(root / rec.image);
  s.bbox = rec.bbox;
  s.landmarks = rec.landmarks;
  s.dataset_id = dataset_id;
  s.face_id = rec.face_id;
  return s;
}

ModelInput crop_and_resize(const Sample& sample, double margin,
                           int image_size) {
  const auto& bb = sample.bbox;
  if (bb[2] <= 0 || bb[3] <= 0) fail("data", "bbox needs positive size");
  if (bb[0] + bb[2] <= 0 || bb[1] + bb[3] <= 0 || bb[0] >= sample.image.width ||
      bb[1] >= sample.image.height)
    fail("data", "bbox fully outside image (face " + sample.face_id + ")");

  double side = std::max(bb[2], bb[3]) * (1.0 + 2.0 * margin);
  double cx = bb[0] + bb[2] / 2, cy = bb[1] + bb[3] / 2;
  double x0 = cx - side / 2, y0 = cy - side / 2;
  double scale = side / image_size;

  ModelInput out;
  out.image_size = image_size;
  out.crop_transform = Affine{scale, 0, 0, scale, x0, y0};
  out.crop.resize(image_size, image_size * 3);
  for (int py = 0; py < image_size; ++py) {
    for (int px = 0; px < image_size; ++px) {
      double sx = x0 + (px + 0.5) * scale;
      double sy = y0 + (py + 0.5) * scale;
      for (int c = 0; c < 3; ++c)
        out.crop(py, px * 3 + c) =
            sample_bilinear(sample.image, sx, sy, c) / 127.5 - 1.0;
    }
  }
  out.landmarks_norm.resize(sample.landmarks.rows(), 2);
  for (Eigen::Index i = 0; i < sample.landmarks.rows(); ++i) {
    out.landmarks_norm(i, 0) = (sample.landmarks(i, 0) - x0) / side;
    out.landmarks_norm(i, 1) = (sample.landmarks(i, 1) - y0) / side;
  }
  return out;
}

AugmentPolicy AugmentPolicy::none() {
  AugmentPolicy p;
  p.p_rotate = p.p_scale = p.p_translate = p.p_flip = p.p_color = 0;
  return p;
}

AugmentDraw sample_augment(const AugmentPolicy& policy, Rng& rng) {
  // Every knob is drawn so the stream advances identically whatever triggers.
  AugmentDraw d;
  double max_rad = policy.max_rotate_deg * M_PI / 180.0;
  d.rotate = rng.uniform() < policy.p_rotate;
  d.angle_rad = rng.uniform(-max_rad, max_rad);
  d.scale = rng.uniform() < policy.p_scale;
  d.scale_factor = rng.uniform(policy.scale_lo, policy.scale_hi);
  d.translate = rng.uniform() < policy.p_translate;
  d.shift_x = rng.uniform(-policy.max_translate, policy.max_translate);
  d.shift_y = rng.uniform(-policy.max_translate, policy.max_translate);
  d.flip = rng.uniform() < policy.p_flip;
  d.color = rng.uniform() < policy.p_color;
  d.contrast = rng.uniform(policy.contrast_lo, policy.contrast_hi);
  d.brightness = rng.uniform(-policy.max_brightness, policy.max_brightness);
  if (!d.rotate) d.angle_rad = 0;
  if (!d.scale) d.scale_factor = 1;
  if (!d.translate) d.shift_x = d.shift_y = 0;
  if (!d.color) {
    d.contrast = 1;
    d.brightness = 0;
  }
  return d;
}

ModelInput apply_augment(const ModelInput& input, const AugmentDraw& draw,
                         const DatasetSchema& schema) {
  bool geometric = draw.rotate || draw.scale || draw.translate || draw.flip;
  if (!geometric && !draw.color) return input;
  if (draw.flip && !schema.flip_permutation)
    fail("config", "flip requested without permutation (schema '" +
                       schema.name + "')");

  double S = input.image_size;
  Affine t;
  if (draw.flip) {
    t.m00 = -1;
    t.tx = S;
  }
  if (draw.rotate || draw.scale) {
    Affine about_center =
        Affine::translation(S / 2, S / 2)
            .compose(Affine::rotation(draw.angle_rad))
            .compose(Affine::scaling(draw.scale_factor))
            .compose(Affine::translation(-S / 2, -S / 2));
    t = about_center.compose(t);
  }
  if (draw.translate)
    t = Affine::translation(draw.shift_x * S, draw.shift_y * S).compose(t);

  ModelInput out;
  out.image_size = input.image_size;

  if (geometric) {
    Affine inv = t.inverse();
    auto fetch = [&](int xi, int yi, int c) {
      xi = std::clamp(xi, 0, input.image_size - 1);
      yi = std::clamp(yi, 0, input.image_size - 1);
      return input.crop(yi, xi * 3 + c);
    };
    out.crop.resize(input.crop.rows(), input.crop.cols());
    for (int py = 0; py < input.image_size; ++py) {
      for (int px = 0; px < input.image_size; ++px) {
        auto [sx, sy] = inv.apply(px + 0.5, py + 0.5);
        double fx = sx - 0.5, fy = sy - 0.5;
        int ix = static_cast<int>(std::floor(fx));
        int iy = static_cast<int>(std::floor(fy));
        double ax = fx - ix, ay = fy - iy;
        for (int c = 0; c < 3; ++c) {
          double top = fetch(ix, iy, c) * (1 - ax) + fetch(ix + 1, iy, c) * ax;
          double bot =
              fetch(ix, iy + 1, c) * (1 - ax) + fetch(ix + 1, iy + 1, c) * ax;
          out.crop(py, px * 3 + c) = top * (1 - ay) + bot * ay;
        }
      }
    }
    out.landmarks_norm.resize(input.landmarks_norm.rows(), 2);
    for (Eigen::Index i = 0; i < input.landmarks_norm.rows(); ++i) {
      Eigen::Index src =
          draw.flip ? static_cast<Eigen::Index>((*schema.flip_permutation)[i])
                    : i;
      auto [nx, ny] = t.apply(input.landmarks_norm(src, 0) * S,
                              input.landmarks_norm(src, 1) * S);
      out.landmarks_norm(i, 0) = nx / S;
      out.landmarks_norm(i, 1) = ny / S;
    }
    out.crop_transform = input.crop_transform.compose(t.inverse());
  } else {
    out.crop = input.crop;
    out.landmarks_norm = input.landmarks_norm;
    out.crop_transform = input.crop_transform;
  }

  if (draw.color)
    out.crop = (out.crop.array() * draw.contrast + draw.brightness).matrix();
  return out;
}

ModelInput augment(const ModelInput& input, const AugmentPolicy& policy,
                   const DatasetSchema& schema, Rng& rng) {
  if (policy.p_flip > 0 && !schema.flip_permutation)
    fail("config", "flip requested without permutation (schema '" +
                       schema.name + "')");
  return apply_augment(input, sample_augment(policy, rng), schema);
}

FaceParams sample_face(std::uint64_t seed, std::uint64_t index) {
  Rng rng = derive_rng(seed, "face", index);
  FaceParams f{};
  f.cx = rng.uniform(58, 70);
  f.cy = rng.uniform(58, 70);
  f.rx = rng.uniform(28, 40);
  f.ry = rng.uniform(34, 48);
  f.eye_dx = f.rx * rng.uniform(0.38, 0.52);
  f.eye_y = f.cy - f.ry * rng.uniform(0.15, 0.32);
  f.eye_r = rng.uniform(3.0, 5.5);
  f.brow_gap = rng.uniform(5, 9);
  f.brow_arch = rng.uniform(1, 3);
  f.brow_hw = f.eye_r * 1.6;
  f.nose_drop = f.ry * rng.uniform(0.05, 0.22);
  f.nose_hw = rng.uniform(4, 8);
  f.nose_h = rng.uniform(8, 14);
  f.mouth_y = f.ry * rng.uniform(0.45, 0.62);
  f.mouth_hw = f.rx * rng.uniform(0.38, 0.55);
  f.mouth_hh = rng.uniform(3.5, 7.0);

  auto byte = [&](double lo, double hi) {
    return static_cast<std::uint8_t>(std::lround(rng.uniform(lo, hi)));
  };
  f.bg = {byte(170, 220), byte(180, 225), byte(190, 235)};
  double skin_r = rng.uniform(190, 230);
  f.skin = {static_cast<std::uint8_t>(std::lround(skin_r)),
            byte(skin_r - 45, skin_r - 25), byte(skin_r - 70, skin_r - 45)};
  f.eye = {byte(20, 60), byte(20, 60), byte(30, 80)};
  f.brow = {byte(40, 90), byte(30, 70), byte(20, 60)};
  f.nose = {static_cast<std::uint8_t>(f.skin[0] * 4 / 5),
            static_cast<std::uint8_t>(f.skin[1] * 4 / 5),
            static_cast<std::uint8_t>(f.skin[2] * 4 / 5)};
  f.lip = {byte(140, 190), byte(40, 80), byte(50, 90)};
  return f;
}

ImageU8 render_face(const FaceParams& f) {
  ImageU8 img(kSyntheticCanvas, kSyntheticCanvas, f.bg);
  paint_ellipse(img, f.cx, f.cy, f.rx, f.ry, f.skin);
  for (int side : {-1, 1}) {
    double ex = f.cx + side * f.eye_dx;
    paint_ellipse(img, ex, f.eye_y - f.brow_gap - f.brow_arch / 2, f.brow_hw,
                  1.2 + f.brow_arch / 2, f.brow);
    paint_ellipse(img, ex, f.eye_y, f.eye_r, f.eye_r, f.eye);
  }
  paint_triangle(img,
                 {f.cx - f.nose_hw, f.cy + f.nose_drop, f.cx + f.nose_hw,
                  f.cy + f.nose_drop, f.cx, f.cy + f.nose_drop - f.nose_h},
                 f.nose);
  double my = f.cy + f.mouth_y;
  paint_ellipse(img, f.cx, my, f.mouth_hw, f.mouth_hh, f.lip);
  paint_ellipse(img, f.cx, my, f.mouth_hw * 0.6, f.mouth_hh * 0.5,
                {static_cast<std::uint8_t>(f.lip[0] * 3 / 5),
                 static_cast<std::uint8_t>(f.lip[1] * 3 / 5),
                 static_cast<std::uint8_t>(f.lip[2] * 3 / 5)});
  return img;
}

MatD face_landmarks_9(const FaceParams& f) {
  double my = f.cy + f.mouth_y;
  MatD lm(9, 2);
  lm << f.cx - f.eye_dx, f.eye_y,                     // left eye center
      f.cx - f.eye_dx - f.eye_r, f.eye_y,             // left eye outer
      f.cx + f.eye_dx, f.eye_y,                       // right eye center
      f.cx + f.eye_dx + f.eye_r, f.eye_y,             // right eye outer
      f.cx, f.cy + f.nose_drop,                       // nose tip
      f.cx - f.mouth_hw, my,                          // mouth left corner
      f.cx, my - f.mouth_hh,                          // mouth top center
      f.cx + f.mouth_hw, my,                          // mouth right corner
      f.cx, my + f.mouth_hh;                          // mouth bottom center
  return lm;
}

MatD face_landmarks_68(const FaceParams& f) {
  MatD lm(68, 2);
  auto deg = [](double d) { return d * M_PI / 180.0; };
  // Jaw contour sweeps the head ellipse from left ear over the chin.
  for (int i = 0; i <= 16; ++i) {
    double phi = deg(180.0 - i * 11.25);
    lm(i, 0) = f.cx + f.rx * std::cos(phi);
    lm(i, 1) = f.cy + f.ry * std::sin(phi);
  }
  // Brows: arched five-point rows, right brow an exact mirror of the left.
  double brow_y = f.eye_y - f.brow_gap;
  for (int j = 0; j <= 4; ++j) {
    double x = f.cx - f.eye_dx - f.brow_hw + j * (2 * f.brow_hw / 4);
    double y = brow_y - f.brow_arch * std::sin(M_PI * j / 4.0);
    lm(17 + j, 0) = x;
    lm(17 + j, 1) = y;
    lm(26 - j, 0) = 2 * f.cx - x;
    lm(26 - j, 1) = y;
  }
  // Nose bridge down the midline, then the base row through the tip.
  double bridge_top = f.eye_y;
  double bridge_bot = f.cy + f.nose_drop - f.nose_h;
  for (int j = 0; j <= 3; ++j) {
    lm(27 + j, 0) = f.cx;
    lm(27 + j, 1) = bridge_top + j * (bridge_bot - bridge_top) / 3.0;
  }
  for (int j = 0; j <= 4; ++j) {
    lm(31 + j, 0) = f.cx + (j - 2) * (f.nose_hw / 2);
    lm(31 + j, 1) = f.cy + f.nose_drop;
  }
  // Eye hexagons with centroid exactly at the eye center.
  const double eye_angles[6] = {180, 120, 60, 0, 300, 240};
  for (int side : {0, 1}) {
    double ex = side == 0 ? f.cx - f.eye_dx : f.cx + f.eye_dx;
    for (int j = 0; j < 6; ++j) {
      double a = deg(eye_angles[j]);
      lm(36 + 6 * side + j, 0) = ex + f.eye_r * std::cos(a);
      lm(36 + 6 * side + j, 1) = f.eye_y - f.eye_r * std::sin(a);
    }
  }
  // Outer and inner lip rings.
  double my = f.cy + f.mouth_y;
  const double outer_angles[12] = {180, 150, 120, 90,  60,  30,
                                   0,   330, 300, 270, 240, 210};
  for (int j = 0; j < 12; ++j) {
    double a = deg(outer_angles[j]);
    lm(48 + j, 0) = f.cx + f.mouth_hw * std::cos(a);
    lm(48 + j, 1) = my - f.mouth_hh * std::sin(a);
  }
  const double inner_angles[8] = {180, 120, 90, 60, 0, 300, 270, 240};
  for (int j = 0; j < 8; ++j) {
    double a = deg(inner_angles[j]);
    lm(60 + j, 0) = f.cx + f.mouth_hw * 0.6 * std::cos(a);
    lm(60 + j, 1) = my - f.mouth_hh * 0.5 * std::sin(a);
  }
  return lm;
}

std::filesystem::path gen_synthetic(const std::string& schema_name, int count,
                                    std::uint64_t seed,
                                    const std::filesystem::path& out_dir,
                                    const SchemaSet& set) {
  int id = set.id_of(schema_name);
  if (id < 0) fail("unknown-schema", "unknown schema '" + schema_name + "'");
  const DatasetSchema& schema = set.at(id);
  if (schema.landmark_count != 9 && schema.landmark_count != 68)
    fail("config", "no synthetic template for schema '" + schema_name +
                       "' (" + std::to_string(schema.landmark_count) +
                       " landmarks)");
  if (count <= 0) fail("config", "synthetic count must be positive");

  std::filesystem::create_directories(out_dir);
  Dataset ds;
  ds.schema_name = schema_name;
  ds.landmark_count = schema.landmark_count;
  ds.dataset_id = id;
  ds.root = out_dir;
  for (int i = 0; i < count; ++i) {
    FaceParams face = sample_face(seed, static_cast<std::uint64_t>(i));
    char name[32];
    std::snprintf(name, sizeof(name), "face_%04d", i);
    write_png(out_dir / (std::string(name) + ".png"), render_face(face));
    SampleRecord rec;
    rec.image = std::string(name) + ".png";
    rec.face_id = name;
    rec.bbox = {face.cx - face.rx, face.cy - face.ry, 2 * face.rx,
                2 * face.ry};
    rec.landmarks = schema.landmark_count == 9 ? face_landmarks_9(face)
                                               : face_landmarks_68(face);
    ds.records.push_back(std::move(rec));
  }
  std::filesystem::path manifest = out_dir / "manifest.jsonl";
  write_manifest(manifest, ds);
  return manifest;
}

}  // namespace mdmd
