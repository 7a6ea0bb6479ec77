#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mdmd/graph.hpp"
#include "mdmd/image.hpp"
#include "mdmd/rng.hpp"
#include "mdmd/schema.hpp"

namespace mdmd {

using MatD = Mat<double>;

// 2D affine map p' = M p + t.
struct Affine {
  double m00 = 1, m01 = 0, m10 = 0, m11 = 1, tx = 0, ty = 0;

  std::array<double, 2> apply(double x, double y) const {
    return {m00 * x + m01 * y + tx, m10 * x + m11 * y + ty};
  }
  // this ∘ other: apply `other` first.
  Affine compose(const Affine& other) const;
  Affine inverse() const;

  static Affine translation(double dx, double dy);
  static Affine scaling(double s);
  static Affine rotation(double radians);
};

struct SampleRecord {
  std::string image;  // path relative to the manifest directory
  std::array<double, 4> bbox{};
  MatD landmarks;  // N×2, original image px
  std::string face_id;
};

struct Sample {
  ImageU8 image;
  std::array<double, 4> bbox{};
  MatD landmarks;
  int dataset_id = -1;
  std::string face_id;
};

// Manifest-backed dataset; images stay on disk until load().
struct Dataset {
  std::string schema_name;
  int landmark_count = 0;
  int dataset_id = -1;
  std::filesystem::path root;
  std::vector<SampleRecord> records;

  size_t size() const { return records.size(); }
  Sample load(size_t index) const;
};

Dataset read_dataset(const std::filesystem::path& manifest_path,
                     const SchemaSet& set);
void write_manifest(const std::filesystem::path& manifest_path,
                    const Dataset& dataset);

struct ModelInput {
  MatD crop;            // image_size × 3·image_size, channels interleaved
  MatD landmarks_norm;  // N×2 in crop-frame units of image_size
  Affine crop_transform;  // crop px → original image px
  int image_size = 0;
};

// Expands bbox to a square with `margin` extra on every side, resamples to
// image_size², and maps landmarks into the normalized crop frame.
ModelInput crop_and_resize(const Sample& sample, double margin, int image_size);

struct AugmentPolicy {
  double p_rotate = 0.5;
  double max_rotate_deg = 30.0;
  double p_scale = 0.5;
  double scale_lo = 0.8;
  double scale_hi = 1.2;
  double p_translate = 0.5;
  double max_translate = 0.08;
  double p_flip = 0.5;
  double p_color = 0.5;
  double contrast_lo = 0.8;
  double contrast_hi = 1.2;
  double max_brightness = 0.2;

  static AugmentPolicy none();
};

// One concrete set of sampled augmentation knobs.
struct AugmentDraw {
  bool rotate = false, scale = false, translate = false, flip = false,
       color = false;
  double angle_rad = 0, scale_factor = 1, shift_x = 0, shift_y = 0,
         contrast = 1, brightness = 0;
};

// Consumes a fixed number of rng draws regardless of which ops trigger.
AugmentDraw sample_augment(const AugmentPolicy& policy, Rng& rng);
ModelInput apply_augment(const ModelInput& input, const AugmentDraw& draw,
                         const DatasetSchema& schema);
ModelInput augment(const ModelInput& input, const AugmentPolicy& policy,
                   const DatasetSchema& schema, Rng& rng);

// Geometry of one synthetic face; independent of any landmark template.
struct FaceParams {
  double cx, cy;          // head center
  double rx, ry;          // head half-axes
  double eye_dx;          // eye x-offset from center
  double eye_y;           // eye row
  double eye_r;
  double brow_gap, brow_arch, brow_hw;
  double nose_drop;       // tip y-offset below center
  double nose_hw, nose_h;
  double mouth_y;         // mouth center y-offset below center
  double mouth_hw, mouth_hh;
  std::array<std::uint8_t, 3> bg, skin, eye, brow, nose, lip;
};

inline constexpr int kSyntheticCanvas = 128;

FaceParams sample_face(std::uint64_t seed, std::uint64_t index);
ImageU8 render_face(const FaceParams& face);
MatD face_landmarks_9(const FaceParams& face);
MatD face_landmarks_68(const FaceParams& face);

// Writes count faces plus manifest.jsonl under out_dir; returns manifest path.
std::filesystem::path gen_synthetic(const std::string& schema_name, int count,
                                    std::uint64_t seed,
                                    const std::filesystem::path& out_dir,
                                    const SchemaSet& set);

}  // namespace mdmd
