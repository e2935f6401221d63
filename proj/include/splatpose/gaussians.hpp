#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace splatpose {

// Scene as N anisotropic Gaussians in canonical (reference-view) space.
// Shape parameters are stored unconstrained: log-scales, pre-sigmoid opacity
// logits, and unnormalized quaternions (w,x,y,z) normalized at use.
struct GaussianSet {
    int sh_degree = 0;                  // 0 or 1
    std::vector<double> mu;             // N*3 centers
    std::vector<double> rot;            // N*4 quaternions
    std::vector<double> scale_log;      // N*3
    std::vector<double> opacity_logit;  // N
    std::vector<double> sh;             // N*C, C = 3*(degree+1)^2

    int count() const { return static_cast<int>(opacity_logit.size()); }
    int sh_channels() const { return 3 * (sh_degree + 1) * (sh_degree + 1); }
    // Throws when array lengths disagree or values are non-finite.
    void validate() const;
};

inline constexpr double kSh0 = 0.28209479177387814;  // Y_00
inline constexpr double kSh1 = 0.48860251190291992;  // |Y_1m| band constant

// Evaluates the SH color for one Gaussian: DC band plus, for degree 1, the
// three linear bands with the standard (-y, +z, -x) ordering. Clamped to [0,1].
Eigen::Vector3d sh_to_color(const double* sh, int channels, const Eigen::Vector3d& view_dir,
                            int degree);

// JSON {mu, rot, scale_log, opacity_logit, sh, degree}; exact double round trip.
void save_gaussians_json(const GaussianSet& g, const std::string& path);
GaussianSet load_gaussians_json(const std::string& path);

}  // namespace splatpose
