#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mdmd/graph.hpp"
#include "mdmd/schema.hpp"

namespace mdmd {

// One face ready for scoring: predictions and ground truth in original-image
// pixels, plus the ground-truth box for bbox normalization.
struct ScoredFace {
  Mat<double> pred;  // N x 2
  Mat<double> gt;    // N x 2
  double bbox_w = 0;
  double bbox_h = 0;
};

struct MetricReport {
  std::vector<double> per_face_nme;  // percentages, scored faces only
  double mean_nme = 0;
  double fr = 0;                     // percentage of faces with nme > 10
  double auc = 0;                    // fraction in [0, 1]
  std::vector<std::pair<double, double>> ced;  // (threshold %, fraction <= t)
  std::string normalization;
  int excluded_faces = 0;  // degenerate normalization distance
};

// 100 * mean per-landmark distance / d.
double nme(const Mat<double>& pred, const Mat<double>& gt, double norm_distance);

// Normalization distance for one face under the schema's rule; <= 0 marks a
// degenerate face.
double resolve_normalization(const DatasetSchema& schema, const Mat<double>& gt,
                             double bbox_w, double bbox_h);

// Percentage of faces with nme strictly above the threshold.
double failure_rate(const std::vector<double>& nmes, double threshold = 10.0);

// Normalized area under the cumulative error distribution on [0, threshold],
// integrated exactly as a step function.
double auc(const std::vector<double>& nmes, double threshold = 10.0);

// Fraction of faces with nme <= t.
double ced_at(const std::vector<double>& nmes, double t);

MetricReport evaluate(const std::vector<ScoredFace>& faces,
                      const DatasetSchema& schema);

std::string metric_report_to_json(const MetricReport& report);

}  // namespace mdmd
