#pragma once

#include "splatpose/autodiff.hpp"
#include "splatpose/camera.hpp"
#include "splatpose/gaussians.hpp"
#include "splatpose/image.hpp"

#include <Eigen/Dense>

namespace splatpose {

struct RenderOutput {
    Image rgb;
    Grid depth;  // alpha-weighted expected depth, 0 on background
    Grid alpha;  // accumulated opacity in [0,1]
};

// Gaussian parameters as autodiff values (same unconstrained storage as
// GaussianSet).
struct GaussianValues {
    ad::Value mu;             // (N,3)
    ad::Value rot;            // (N,4)
    ad::Value scale_log;      // (N,3)
    ad::Value opacity_logit;  // (N)
    ad::Value sh;             // (N,C)
    int sh_degree = 0;
    int count() const { return mu.defined() ? mu.shape()[0] : 0; }
};

struct CameraValues {
    ad::Value R;  // (3,3)
    ad::Value t;  // (3)
    ad::Value K;  // (3,3), zero skew assumed
    int width = 0;
    int height = 0;
};

// The 3-sigma evaluation cutoff is hard in inference mode and a smooth
// multiplicative window in gradient mode, so finite differences stay valid.
enum class RenderMode { kGradient, kInference };

// Differentiable EWA splat: projects each Gaussian, composites front-to-back
// in depth order (index tie-break) and returns an (H,W,5) tensor holding
// rgb, expected depth and accumulated alpha. Gradients flow to every
// GaussianValues field and to R, t and the (fx,fy,cx,cy) entries of K.
ad::Value render_value(const GaussianValues& g, const CameraValues& cam, int width, int height,
                       const Eigen::Vector3d& bg, RenderMode mode);

RenderOutput render(const GaussianSet& g, const Camera& cam, int width, int height,
                    const Eigen::Vector3d& bg = Eigen::Vector3d::Zero());

Grid depth_map(const GaussianSet& g, const Camera& cam, int width, int height);

GaussianValues gaussians_to_values(const GaussianSet& g, bool requires_grad);
GaussianSet values_to_gaussians(const GaussianValues& g);
CameraValues camera_to_values(const Camera& cam);
Camera values_to_camera(const CameraValues& cam);

// Unpacks an (H,W,5) render tensor (no gradient tracking).
RenderOutput split_render_tensor(const ad::Value& t);

}  // namespace splatpose
