#pragma once

#include "mdmd/graph.hpp"

namespace mdmd {

// Model output for one face. Row k of both arrays is canonical landmark k of
// the schema. Landmarks live in normalized crop coordinates; cholesky_raw
// holds unconstrained head outputs (a_raw, b, c_raw).
template <typename S>
struct PredictionSet {
  Mat<S> landmarks;     // N x 2
  Mat<S> cholesky_raw;  // N x 3
};

}  // namespace mdmd
