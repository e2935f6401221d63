#pragma once

#include "splatpose/autodiff.hpp"

// Differentiable small-matrix solves used inside the per-layer camera
// recovery: 3x3 inverse, nearest-rotation (orthogonal Procrustes) and the
// axis-angle exponential, each recorded as a single tape node with an
// analytic backward.
namespace splatpose::ad {

// (3,3) -> (3,3). Throws if |det| < 1e-300.
Value inverse3(const Value& m);

// (3,3) -> nearest rotation R = U diag(1,1,det(UV^T)) V^T from the SVD of
// the input. Backward uses the standard SVD adjoint; the equal-singular-value
// direction is handled in the rotation-invariant (stable) form.
Value procrustes_rotation(const Value& a);

// (3,) axis-angle -> (3,3) rotation.
Value rodrigues(const Value& w);

}  // namespace splatpose::ad
