#pragma once

#include <cmath>

#include "mdmd/graph.hpp"
#include "mdmd/prediction.hpp"
#include "mdmd/schema.hpp"

namespace mdmd {

// Lower-triangular factor L = [[a,0],[b,c]] of a 2x2 covariance. a, c > 0.
template <typename S>
struct CholeskyFactor {
  S a, b, c;
};

// Softplus keeps the diagonal smooth in the raw outputs; the epsilon floor
// keeps it strictly positive even for very negative raw values.
template <typename S>
CholeskyFactor<S> decode_cholesky(S raw0, S raw1, S raw2, S eps = S(1e-6)) {
  return {Tape<S>::softplus(raw0) + eps, raw1, Tape<S>::softplus(raw2) + eps};
}

// 0.5*log|Sigma| + sqrt(3 * r' Sigma^-1 r) with Sigma = L L'. The quadratic
// form comes from one triangular solve: with L u = r, r' Sigma^-1 r = |u|^2.
template <typename S>
S laplacian_nll(S mu_x, S mu_y, const CholeskyFactor<S>& f, S gt_x, S gt_y) {
  const S u = (mu_x - gt_x) / f.a;
  const S v = (mu_y - gt_y - f.b * u) / f.c;
  return std::log(f.a) + std::log(f.c) + std::sqrt(S(3) * (u * u + v * v));
}

namespace detail {

template <typename S, typename PerLandmark>
S grouped_mean(const DatasetSchema& schema, PerLandmark term) {
  S total = 0;
  int nonempty = 0;
  for (const auto& group : schema.flsg_map.groups) {
    if (group.empty()) continue;
    S group_sum = 0;
    for (int k : group) group_sum += term(k);
    total += group_sum / S(group.size());
    ++nonempty;
  }
  return total / S(nonempty);
}

template <typename S>
void check_shapes(const PredictionSet<S>& pred, const Mat<S>& gt,
                  const DatasetSchema& schema) {
  const auto n = schema.landmark_count;
  if (pred.landmarks.rows() != n || pred.landmarks.cols() != 2 ||
      pred.cholesky_raw.rows() != n || pred.cholesky_raw.cols() != 3 ||
      gt.rows() != n || gt.cols() != 2)
    fail("shape", "loss inputs do not match schema '" + schema.name + "' (N=" +
                      std::to_string(n) + ")");
}

}  // namespace detail

// Mean over non-empty groups of the per-group mean of per-landmark Laplacian
// terms. Empty groups contribute nothing (their inner mean is undefined).
template <typename S>
S mdmd_loss(const PredictionSet<S>& pred, const Mat<S>& gt,
            const DatasetSchema& schema) {
  detail::check_shapes(pred, gt, schema);
  return detail::grouped_mean<S>(schema, [&](int k) {
    const CholeskyFactor<S> f = decode_cholesky(
        pred.cholesky_raw(k, 0), pred.cholesky_raw(k, 1), pred.cholesky_raw(k, 2));
    return laplacian_nll(pred.landmarks(k, 0), pred.landmarks(k, 1), f, gt(k, 0),
                         gt(k, 1));
  });
}

// Same two-level averaging with plain Euclidean distances; covariance ignored.
template <typename S>
S euclidean_loss(const PredictionSet<S>& pred, const Mat<S>& gt,
                 const DatasetSchema& schema) {
  detail::check_shapes(pred, gt, schema);
  return detail::grouped_mean<S>(schema, [&](int k) {
    return std::hypot(pred.landmarks(k, 0) - gt(k, 0),
                      pred.landmarks(k, 1) - gt(k, 1));
  });
}

// Per-landmark weights of the grouped mean, indexed canonically: landmark k in
// group g gets 1 / (nonempty_groups * |g|). Used to build the loss on a tape
// as one inner product with the per-landmark term column.
template <typename S>
Mat<S> loss_weights(const DatasetSchema& schema) {
  Mat<S> w = Mat<S>::Zero(schema.landmark_count, 1);
  int nonempty = 0;
  for (const auto& group : schema.flsg_map.groups)
    if (!group.empty()) ++nonempty;
  for (const auto& group : schema.flsg_map.groups)
    for (int k : group)
      w(k, 0) = S(1) / (S(nonempty) * S(group.size()));
  return w;
}

enum class LossMode { Laplacian, Euclidean };

// Tape version of the grouped loss for one face; 1 x 1 output.
template <typename S>
Node<S>* loss_node(Tape<S>& tape, Node<S>* landmarks, Node<S>* cholesky_raw,
                   const Mat<S>& gt, const DatasetSchema& schema, LossMode mode) {
  Node<S>* terms = mode == LossMode::Laplacian
                       ? tape.laplacian_terms(landmarks, cholesky_raw, gt)
                       : tape.euclidean_terms(landmarks, gt);
  return tape.inner_const(terms, loss_weights<S>(schema));
}

}  // namespace mdmd
