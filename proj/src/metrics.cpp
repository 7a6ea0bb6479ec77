#include "mdmd/metrics.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "mdmd/error.hpp"

namespace mdmd {

double nme(const Mat<double>& pred, const Mat<double>& gt, double norm_distance) {
  if (pred.rows() != gt.rows() || pred.cols() != 2 || gt.cols() != 2)
    fail("shape", "nme expects matching N x 2 arrays");
  if (!(norm_distance > 0)) fail("metrics", "normalization distance must be positive");
  double sum = 0;
  for (Eigen::Index k = 0; k < pred.rows(); ++k)
    sum += std::hypot(pred(k, 0) - gt(k, 0), pred(k, 1) - gt(k, 1));
  return 100.0 * sum / (static_cast<double>(pred.rows()) * norm_distance);
}

double resolve_normalization(const DatasetSchema& schema, const Mat<double>& gt,
                             double bbox_w, double bbox_h) {
  if (schema.normalization.kind == NormalizationKind::LandmarkPair) {
    const int i = schema.normalization.i, j = schema.normalization.j;
    return std::hypot(gt(i, 0) - gt(j, 0), gt(i, 1) - gt(j, 1));
  }
  if (bbox_w <= 0 || bbox_h <= 0) return 0;
  return std::sqrt(bbox_w * bbox_h);
}

double failure_rate(const std::vector<double>& nmes, double threshold) {
  if (nmes.empty()) fail("metrics", "failure_rate over an empty list");
  // Complement of the CED so that fr == 100 * (1 - ced_at(threshold)) holds
  // bitwise, not just mathematically.
  return 100.0 * (1.0 - ced_at(nmes, threshold));
}

double auc(const std::vector<double>& nmes, double threshold) {
  if (nmes.empty()) fail("metrics", "auc over an empty list");
  // Each face with error v covers [v, threshold] of the CED's unit mass.
  // Sorted reduction keeps the result independent of face order.
  std::vector<double> sorted = nmes;
  std::sort(sorted.begin(), sorted.end());
  double area = 0;
  for (double v : sorted) area += std::max(0.0, threshold - v);
  return area / (threshold * static_cast<double>(nmes.size()));
}

double ced_at(const std::vector<double>& nmes, double t) {
  if (nmes.empty()) fail("metrics", "ced over an empty list");
  std::size_t within = 0;
  for (double v : nmes)
    if (v <= t) ++within;
  return static_cast<double>(within) / static_cast<double>(nmes.size());
}

MetricReport evaluate(const std::vector<ScoredFace>& faces,
                      const DatasetSchema& schema) {
  MetricReport report;
  report.normalization =
      schema.normalization.kind == NormalizationKind::LandmarkPair
          ? "pair(" + std::to_string(schema.normalization.i) + "," +
                std::to_string(schema.normalization.j) + ")"
          : "bbox";
  for (const ScoredFace& face : faces) {
    if (face.pred.rows() != schema.landmark_count ||
        face.gt.rows() != schema.landmark_count)
      fail("shape", "evaluate: face landmark count does not match schema '" +
                        schema.name + "'");
    const double d =
        resolve_normalization(schema, face.gt, face.bbox_w, face.bbox_h);
    if (!(d > 0) || !std::isfinite(d)) {
      ++report.excluded_faces;
      continue;
    }
    report.per_face_nme.push_back(nme(face.pred, face.gt, d));
  }
  if (report.per_face_nme.empty())
    fail("metrics", "no scorable faces (all normalization distances degenerate)");

  std::vector<double> sorted = report.per_face_nme;
  std::sort(sorted.begin(), sorted.end());
  double sum = 0;
  for (double v : sorted) sum += v;
  report.mean_nme = sum / static_cast<double>(report.per_face_nme.size());
  report.fr = failure_rate(report.per_face_nme);
  report.auc = auc(report.per_face_nme);
  for (int i = 0; i <= 100; ++i) {
    const double t = i / 10.0;
    report.ced.emplace_back(t, ced_at(report.per_face_nme, t));
  }
  return report;
}

std::string metric_report_to_json(const MetricReport& report) {
  nlohmann::json j;
  j["normalization"] = report.normalization;
  j["faces"] = report.per_face_nme.size();
  j["excluded_faces"] = report.excluded_faces;
  j["mean_nme"] = report.mean_nme;
  j["fr"] = report.fr;
  j["auc"] = report.auc;
  j["per_face_nme"] = report.per_face_nme;
  nlohmann::json ced = nlohmann::json::array();
  for (const auto& [t, frac] : report.ced) ced.push_back({t, frac});
  j["ced"] = std::move(ced);
  return j.dump(2);
}

}  // namespace mdmd
