#pragma once

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <vector>

namespace splatpose {

struct GaussianSet;
struct Image;

// Pinhole camera, world-to-camera convention x_C = R*x_W + t. Skew is fixed
// to zero; K is upper triangular with positive diagonal and K(2,2)=1.
struct Camera {
    Eigen::Matrix3d K = Eigen::Matrix3d::Identity();
    Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
    Eigen::Vector3d t = Eigen::Vector3d::Zero();
    int width = 0;
    int height = 0;

    Eigen::Vector3d center() const { return -R.transpose() * t; }
    // Throws std::invalid_argument when the rotation/intrinsics invariants
    // are violated beyond 1e-9.
    void validate() const;
};

// Line as direction + moment, m = c x d for any point c on the line.
// Canonical form keeps |d| = 1.
struct PlueckerRay {
    Eigen::Vector3d d = Eigen::Vector3d::UnitZ();
    Eigen::Vector3d m = Eigen::Vector3d::Zero();
};

struct RaySet {
    std::vector<PlueckerRay> rays;
    std::vector<Eigen::Vector2d> uv;  // pixel coordinates each ray passes through
};

struct PoseError {
    double rot_deg = 0.0;
    double trans_deg = 0.0;
};

struct ProjectionResult {
    std::vector<Eigen::Vector2d> uv;
    std::vector<double> depth;
    std::vector<bool> valid;
};

struct CenterResult {
    Eigen::Vector3d c;
    double residual_rms;
};

inline constexpr double kZNear = 1e-4;

// d = R^T K^-1 u, m = (-R^T t) x d, canonicalized to |d| = 1.
RaySet cameras_to_rays(const Camera& cam, const std::vector<Eigen::Vector2d>& uv);

// Least-squares point closest to all rays, from the stacked p x d = m
// system. Throws when directions are degenerate (second singular value of
// the stacked system below 1e-8 of the largest).
CenterResult rays_to_camera_center(const RaySet& rays);

// Recovers a full camera from >= 6 rays. With known_K the rotation comes
// from orthogonal Procrustes on K^-1 u vs d; otherwise M = K R is the
// smallest-singular-vector solution of (M d_j) x u_j = 0 followed by
// rq_decompose. width/height are copied into the result.
Camera rays_to_camera(const RaySet& rays, const std::optional<Eigen::Matrix3d>& known_K,
                      int width = 0, int height = 0);

struct RQResult {
    Eigen::Matrix3d K;
    Eigen::Matrix3d R;
    double s;  // M = s*K*R, sign(s) = sign(det M)
};

// Upper-triangular times rotation factorization via Givens rotations; K has
// positive diagonal and K(2,2)=1, R is a proper rotation.
RQResult rq_decompose(const Eigen::Matrix3d& m);

ProjectionResult project_points(const Camera& cam, const std::vector<Eigen::Vector3d>& pts);

PlueckerRay normalize_ray(const PlueckerRay& r);

PoseError pose_error(const Camera& est, const Camera& gt);

// AUC@tau of the cumulative accuracy of e = max(rot,trans) in degrees,
// integrated exactly over the piecewise-constant accuracy curve.
std::vector<double> pose_auc(const std::vector<PoseError>& errors,
                             const std::vector<double>& thresholds_deg);

struct AlignOptions {
    int iters = 100;
    double step = 1e-2;
};

// Refines `init` over a local SE(3) perturbation by Adam on the rendering
// MSE against target_img. Returns the best camera seen, so the final MSE
// never exceeds the initial one.
Camera align_target_pose(const GaussianSet& g, const Image& target_img, const Camera& init,
                         const AlignOptions& opts = {});

// JSON files: camera {K:[9 row-major], R:[9], t:[3], width, height};
// rays: array of {d:[3], m:[3], uv:[2]}.
void save_camera_json(const Camera& cam, const std::string& path);
Camera load_camera_json(const std::string& path);
void save_rays_json(const RaySet& rays, const std::string& path);
RaySet load_rays_json(const std::string& path);

}  // namespace splatpose
