#pragma once

#include "splatpose/autodiff.hpp"
#include "splatpose/camera.hpp"
#include "splatpose/gaussians.hpp"
#include "splatpose/image.hpp"

#include <string>
#include <vector>

namespace splatpose {

struct LossWeights {
    double lambda_perceptual = 0.05;  // weight of the (1-SSIM) term inside loss_3d
    double lambda_rays = 1.0;
    double lambda_3d = 1.0;
};

// MSE + lambda*(1-SSIM), both differentiable. pred/gt: (H,W,3) in [0,1].
ad::Value loss_3d(const ad::Value& pred, const ad::Value& gt, const LossWeights& w);

// Differentiable single-scale SSIM (11x11 Gaussian window, sigma 1.5,
// C1=0.01^2, C2=0.03^2, valid-window borders, channel average). Requires
// H,W >= 11.
ad::Value ssim_value(const ad::Value& a, const ad::Value& b);

// Sum over views and rays of ||pred - s*gt||_2 with the sign s chosen
// per-ray to the closer orientation. pred/gt per view: (n,6), canonical.
ad::Value loss_rays(const std::vector<ad::Value>& pred, const std::vector<ad::Value>& gt);

// In-graph rays from a fixed ground-truth camera through differentiable
// reference points uv (n,2).
ad::Value gt_rays_value(const Camera& gt_cam, const ad::Value& uv);

// Scalar metrics on plain images.
double psnr(const Image& pred, const Image& gt);  // capped at 100 dB
double ssim(const Image& pred, const Image& gt);

enum class Bucket { kNone, kSmall, kMedium, kLarge };
const char* bucket_name(Bucket b);

// Fraction of Gaussian centers visible in both cameras over those visible in
// cam_a; bucketed per the small/medium/large ranges.
double overlap_fraction(const Camera& cam_a, const Camera& cam_b, const GaussianSet& g,
                        Bucket* bucket = nullptr);
Bucket bucket_of(double fraction);

}  // namespace splatpose
