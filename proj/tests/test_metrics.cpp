#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "mdmd/metrics.hpp"
#include "mdmd/rng.hpp"

using namespace mdmd;

namespace {

using M = Mat<double>;

DatasetSchema pair_schema(int n, int i, int j) {
  DatasetSchema s;
  s.name = "m";
  s.landmark_count = n;
  std::vector<int> all;
  for (int k = 0; k < n; ++k) all.push_back(k);
  s.flsg_map.groups = {all};
  s.normalization = {NormalizationKind::LandmarkPair, i, j};
  validate_schema(s);
  return s;
}

DatasetSchema bbox_schema(int n) {
  DatasetSchema s;
  s.name = "m";
  s.landmark_count = n;
  std::vector<int> all;
  for (int k = 0; k < n; ++k) all.push_back(k);
  s.flsg_map.groups = {all};
  s.normalization = {NormalizationKind::BboxSqrtArea, -1, -1};
  validate_schema(s);
  return s;
}

std::vector<double> random_nmes(Rng& rng, int count, double hi) {
  std::vector<double> v;
  for (int i = 0; i < count; ++i) v.push_back(rng.uniform(0.0, hi));
  return v;
}

}  // namespace

TEST_CASE("nme closed forms") {
  M gt = M::Zero(1, 2);
  M pred(1, 2);
  pred << 6.0, 8.0;
  CHECK(nme(pred, gt, 100.0) == doctest::Approx(10.0).epsilon(1e-12));
  CHECK(nme(gt, gt, 100.0) == 0.0);

  M gt29 = M::Zero(29, 2);
  M pred29 = gt29;
  pred29(4, 0) = 10.0;
  CHECK(nme(pred29, gt29, 100.0) ==
        doctest::Approx(100.0 * (10.0 / 100.0) / 29.0).epsilon(1e-12));
}

TEST_CASE("nme is scale invariant") {
  Rng rng = derive_rng(51, "metrics", 0);
  M gt(5, 2), pred(5, 2);
  for (int k = 0; k < 5; ++k) {
    gt(k, 0) = rng.uniform(0, 100);
    gt(k, 1) = rng.uniform(0, 100);
    pred(k, 0) = gt(k, 0) + rng.normal();
    pred(k, 1) = gt(k, 1) + rng.normal();
  }
  const double base = nme(pred, gt, 50.0);
  CHECK(nme(M(pred * 3.25), M(gt * 3.25), 50.0 * 3.25) ==
        doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("failure rate boundary is strict") {
  CHECK(failure_rate({5.0, 15.0}) == 50.0);
  CHECK(failure_rate({0.0, 0.0, 0.0}) == 0.0);
  CHECK(failure_rate({10.0}) == 0.0);
  CHECK(failure_rate({10.0 + 1e-9}) == 100.0);
  CHECK_THROWS_AS(failure_rate({}), Error);
}

TEST_CASE("auc closed forms and grid cross-check") {
  CHECK(auc({0.0, 0.0}) == 1.0);
  CHECK(auc({11.0, 12.0}) == 0.0);
  CHECK(auc({5.0}) == doctest::Approx(0.5).epsilon(1e-12));

  Rng rng = derive_rng(52, "metrics", 0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> nmes = random_nmes(rng, 37, 14.0);
    // Fine-grid numeric integration of the step CED.
    const double step = 1e-4;
    double integral = 0;
    for (double t = step / 2; t < 10.0; t += step) integral += ced_at(nmes, t) * step;
    CHECK(std::abs(auc(nmes) - integral / 10.0) < 1e-3);
  }
}

TEST_CASE("fr equals the ced complement at the threshold") {
  Rng rng = derive_rng(53, "metrics", 1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> nmes = random_nmes(rng, 64, 20.0);
    CHECK(failure_rate(nmes) == 100.0 * (1.0 - ced_at(nmes, 10.0)));
  }
}

TEST_CASE("order invariance and monotone response to a perfect face") {
  Rng rng = derive_rng(54, "metrics", 0);
  std::vector<double> nmes = random_nmes(rng, 41, 15.0);
  std::vector<double> shuffled = nmes;
  std::reverse(shuffled.begin(), shuffled.end());
  CHECK(auc(nmes) == auc(shuffled));
  CHECK(failure_rate(nmes) == failure_rate(shuffled));

  std::vector<double> with_zero = nmes;
  with_zero.push_back(0.0);
  CHECK(auc(with_zero) >= auc(nmes));
  CHECK(failure_rate(with_zero) <= failure_rate(nmes));
}

TEST_CASE("evaluate composes per-face scoring") {
  DatasetSchema schema = pair_schema(3, 0, 2);
  std::vector<ScoredFace> faces;
  Rng rng = derive_rng(55, "metrics", 0);
  for (int f = 0; f < 50; ++f) {
    ScoredFace face;
    face.gt = M(3, 2);
    for (int k = 0; k < 3; ++k) {
      face.gt(k, 0) = rng.uniform(0, 200);
      face.gt(k, 1) = rng.uniform(0, 200);
    }
    face.pred = face.gt;
    for (int k = 0; k < 3; ++k) {
      face.pred(k, 0) += rng.normal() * 2;
      face.pred(k, 1) += rng.normal() * 2;
    }
    faces.push_back(std::move(face));
  }
  MetricReport report = evaluate(faces, schema);
  REQUIRE(report.per_face_nme.size() == 50);

  // Independent recomputation, scalar arithmetic only.
  std::vector<double> expect;
  for (const auto& face : faces) {
    const double d = std::hypot(face.gt(0, 0) - face.gt(2, 0),
                                face.gt(0, 1) - face.gt(2, 1));
    double sum = 0;
    for (int k = 0; k < 3; ++k)
      sum += std::sqrt(std::pow(face.pred(k, 0) - face.gt(k, 0), 2) +
                       std::pow(face.pred(k, 1) - face.gt(k, 1), 2));
    expect.push_back(100.0 * sum / (3 * d));
  }
  for (size_t i = 0; i < expect.size(); ++i)
    CHECK(std::abs(report.per_face_nme[i] - expect[i]) < 1e-10);

  double fails = 0;
  for (double v : expect)
    if (v > 10.0) ++fails;
  CHECK(report.fr == doctest::Approx(100.0 * fails / 50.0).epsilon(1e-12));
  CHECK(report.ced.front().first == 0.0);
  CHECK(report.ced.back().first == doctest::Approx(10.0).epsilon(1e-12));
  CHECK(report.fr == doctest::Approx(100.0 * (1.0 - report.ced.back().second)));
  for (size_t i = 1; i < report.ced.size(); ++i)
    CHECK(report.ced[i].second >= report.ced[i - 1].second);
}

TEST_CASE("perfect predictions give the extreme report") {
  DatasetSchema schema = bbox_schema(4);
  std::vector<ScoredFace> faces(3);
  for (auto& face : faces) {
    face.gt = M::Random(4, 2) * 50;
    face.pred = face.gt;
    face.bbox_w = 80;
    face.bbox_h = 120;
  }
  MetricReport report = evaluate(faces, schema);
  for (double v : report.per_face_nme) CHECK(v == 0.0);
  CHECK(report.fr == 0.0);
  CHECK(report.auc == 1.0);
}

TEST_CASE("degenerate normalization excludes the face and is surfaced") {
  DatasetSchema schema = pair_schema(2, 0, 1);
  ScoredFace good;
  good.gt = M(2, 2);
  good.gt << 0, 0, 100, 0;
  good.pred = good.gt;
  ScoredFace degenerate;
  degenerate.gt = M::Zero(2, 2);  // coincident pair landmarks
  degenerate.pred = degenerate.gt;
  MetricReport report = evaluate({good, degenerate}, schema);
  CHECK(report.per_face_nme.size() == 1);
  CHECK(report.excluded_faces == 1);

  CHECK_THROWS_AS(evaluate({degenerate}, schema), Error);
}

TEST_CASE("bbox normalization uses the box geometric mean") {
  DatasetSchema schema = bbox_schema(1);
  M gt = M::Zero(1, 2);
  CHECK(resolve_normalization(schema, gt, 25.0, 4.0) ==
        doctest::Approx(10.0).epsilon(1e-12));
  DatasetSchema pair = pair_schema(2, 0, 1);
  M gt2(2, 2);
  gt2 << 0, 0, 3, 4;
  CHECK(resolve_normalization(pair, gt2, 0, 0) == doctest::Approx(5.0).epsilon(1e-12));
}

TEST_CASE("report serializes with all fields") {
  DatasetSchema schema = bbox_schema(2);
  ScoredFace face;
  face.gt = M::Zero(2, 2);
  face.pred = face.gt;
  face.bbox_w = 10;
  face.bbox_h = 10;
  const std::string text = metric_report_to_json(evaluate({face}, schema));
  for (const char* key : {"\"fr\"", "\"auc\"", "\"ced\"", "\"mean_nme\"",
                          "\"normalization\"", "\"excluded_faces\""})
    CHECK(text.find(key) != std::string::npos);
}
