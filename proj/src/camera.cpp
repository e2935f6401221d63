#include "splatpose/camera.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace splatpose {

namespace {

using json = nlohmann::json;

constexpr double kPi = 3.14159265358979323846;
constexpr double kRad2Deg = 180.0 / kPi;

json mat_to_json(const Eigen::Matrix3d& m) {
    json a = json::array();
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) a.push_back(m(i, j));
    return a;
}

Eigen::Matrix3d mat_from_json(const json& a) {
    if (!a.is_array() || a.size() != 9) throw std::runtime_error("expected 9-element matrix array");
    Eigen::Matrix3d m;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) m(i, j) = a[i * 3 + j].get<double>();
    return m;
}

}  // namespace

void Camera::validate() const {
    const Eigen::Matrix3d rtr = R.transpose() * R;
    if ((rtr - Eigen::Matrix3d::Identity()).norm() > 1e-9)
        throw std::invalid_argument("Camera: R is not orthonormal");
    if (std::abs(R.determinant() - 1.0) > 1e-9)
        throw std::invalid_argument("Camera: det(R) != +1");
    if (K(0, 0) <= 0 || K(1, 1) <= 0 || std::abs(K(2, 2) - 1.0) > 1e-12)
        throw std::invalid_argument("Camera: K diagonal must be positive with K(2,2)=1");
    if (std::abs(K(1, 0)) > 1e-12 || std::abs(K(2, 0)) > 1e-12 || std::abs(K(2, 1)) > 1e-12 ||
        std::abs(K(0, 1)) > 1e-12)
        throw std::invalid_argument("Camera: K must be upper triangular with zero skew");
    if ((R * center() + t).norm() > 1e-9)
        throw std::invalid_argument("Camera: center inconsistent with (R,t)");
}

PlueckerRay normalize_ray(const PlueckerRay& r) {
    const double n = r.d.norm();
    if (n <= 1e-12) throw std::invalid_argument("normalize_ray: zero-direction ray");
    return {r.d / n, r.m / n};
}

RaySet cameras_to_rays(const Camera& cam, const std::vector<Eigen::Vector2d>& uv) {
    const double det = cam.K.determinant();
    if (std::abs(det) < 1e-300) throw std::invalid_argument("cameras_to_rays: singular K");
    const Eigen::Matrix3d kinv = cam.K.inverse();
    const Eigen::Matrix3d rt = cam.R.transpose();
    const Eigen::Vector3d c = cam.center();
    RaySet out;
    out.rays.reserve(uv.size());
    out.uv = uv;
    for (const auto& p : uv) {
        const Eigen::Vector3d u(p.x(), p.y(), 1.0);
        PlueckerRay r;
        r.d = rt * (kinv * u);
        r.m = c.cross(r.d);
        out.rays.push_back(normalize_ray(r));
    }
    return out;
}

CenterResult rays_to_camera_center(const RaySet& rays) {
    const size_t n = rays.rays.size();
    if (n < 2) throw std::invalid_argument("rays_to_camera_center: need at least 2 rays");
    // Stack p x d_j = m_j as (-[d_j]x) p = m_j.
    Eigen::MatrixXd a(3 * n, 3);
    Eigen::VectorXd b(3 * n);
    for (size_t j = 0; j < n; ++j) {
        const Eigen::Vector3d& d = rays.rays[j].d;
        Eigen::Matrix3d dx;
        dx << 0, -d.z(), d.y(), d.z(), 0, -d.x(), -d.y(), d.x(), 0;
        a.block<3, 3>(3 * j, 0) = -dx;
        b.segment<3>(3 * j) = rays.rays[j].m;
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    // Parallel rays leave the along-direction component unconstrained, which
    // shows up as a vanishing smallest singular value.
    if (sv(2) < 1e-8 * sv(0))
        throw std::runtime_error("rays_to_camera_center: degenerate configuration (parallel rays)");
    const Eigen::Vector3d c = svd.solve(b);
    const double rms = std::sqrt((a * c - b).squaredNorm() / static_cast<double>(3 * n));
    return {c, rms};
}

RQResult rq_decompose(const Eigen::Matrix3d& m) {
    if (std::abs(m.determinant()) < 1e-300) throw std::invalid_argument("rq_decompose: singular M");
    // Zero below-diagonal entries with right-multiplied Givens rotations:
    // m * Gx * Gy * Gz = upper triangular.
    Eigen::Matrix3d k = m;
    auto givens = [](int i, int j, double c, double s) {
        Eigen::Matrix3d g = Eigen::Matrix3d::Identity();
        g(i, i) = c;
        g(j, j) = c;
        g(i, j) = -s;
        g(j, i) = s;
        return g;
    };
    // Zero k(2,1) using columns 1,2 (rotation about x).
    double r = std::hypot(k(2, 2), k(2, 1));
    Eigen::Matrix3d qx = givens(1, 2, k(2, 2) / r, -k(2, 1) / r);
    k = k * qx;
    // Zero k(2,0) using columns 0,2 (rotation about y).
    r = std::hypot(k(2, 2), k(2, 0));
    Eigen::Matrix3d qy = givens(0, 2, k(2, 2) / r, -k(2, 0) / r);
    k = k * qy;
    // Zero k(1,0) using columns 0,1 (rotation about z).
    r = std::hypot(k(1, 1), k(1, 0));
    Eigen::Matrix3d qz = givens(0, 1, k(1, 1) / r, -k(1, 0) / r);
    k = k * qz;
    Eigen::Matrix3d rot = (qx * qy * qz).transpose();
    // Absorb signs so K's diagonal is positive.
    Eigen::Vector3d dsign(k(0, 0) >= 0 ? 1.0 : -1.0, k(1, 1) >= 0 ? 1.0 : -1.0,
                          k(2, 2) >= 0 ? 1.0 : -1.0);
    k = k * dsign.asDiagonal();
    rot = dsign.asDiagonal() * rot;
    double s = k(2, 2);
    if (rot.determinant() < 0) {
        // det(m) < 0: absorb the global flip into s.
        rot = -rot;
        s = -s;
    }
    k /= k(2, 2);
    // Numerical noise below the diagonal is structurally zero.
    k(1, 0) = k(2, 0) = k(2, 1) = 0.0;
    return {k, rot, s};
}

Camera rays_to_camera(const RaySet& rays, const std::optional<Eigen::Matrix3d>& known_K, int width,
                      int height) {
    const size_t n = rays.rays.size();
    if (n < 6) throw std::invalid_argument("rays_to_camera: need at least 6 rays");
    if (rays.uv.size() != n) throw std::invalid_argument("rays_to_camera: rays/uv length mismatch");

    const CenterResult center = rays_to_camera_center(rays);
    Camera cam;
    cam.width = width;
    cam.height = height;

    if (known_K) {
        cam.K = *known_K;
        const Eigen::Matrix3d kinv = known_K->inverse();
        // R = argmin sum |R d_j - v_j|^2 with v_j = normalized K^-1 u_j.
        Eigen::Matrix3d acc = Eigen::Matrix3d::Zero();
        for (size_t j = 0; j < n; ++j) {
            const Eigen::Vector3d u(rays.uv[j].x(), rays.uv[j].y(), 1.0);
            const Eigen::Vector3d v = (kinv * u).normalized();
            acc += v * rays.rays[j].d.transpose();
        }
        Eigen::JacobiSVD<Eigen::Matrix3d> svd(acc, Eigen::ComputeFullU | Eigen::ComputeFullV);
        const Eigen::Matrix3d u = svd.matrixU();
        const Eigen::Matrix3d v = svd.matrixV();
        if (svd.singularValues()(1) < 1e-10 * svd.singularValues()(0))
            throw std::runtime_error("rays_to_camera: degenerate directions for Procrustes");
        Eigen::Vector3d c(1.0, 1.0, (u * v.transpose()).determinant() > 0 ? 1.0 : -1.0);
        cam.R = u * c.asDiagonal() * v.transpose();
    } else {
        // Stack (M d_j) x u_j = 0 as rows of a homogeneous system in vec(M).
        Eigen::MatrixXd a(3 * n, 9);
        for (size_t j = 0; j < n; ++j) {
            const Eigen::Vector3d& d = rays.rays[j].d;
            const Eigen::Vector3d u(rays.uv[j].x(), rays.uv[j].y(), 1.0);
            a.row(3 * j + 0) << 0, 0, 0, u.z() * d.x(), u.z() * d.y(), u.z() * d.z(),
                -u.y() * d.x(), -u.y() * d.y(), -u.y() * d.z();
            a.row(3 * j + 1) << -u.z() * d.x(), -u.z() * d.y(), -u.z() * d.z(), 0, 0, 0,
                u.x() * d.x(), u.x() * d.y(), u.x() * d.z();
            a.row(3 * j + 2) << u.y() * d.x(), u.y() * d.y(), u.y() * d.z(), -u.x() * d.x(),
                -u.x() * d.y(), -u.x() * d.z(), 0, 0, 0;
        }
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinV);
        const auto& sv = svd.singularValues();
        if (sv(7) < 1e-10 * sv(0))
            throw std::runtime_error("rays_to_camera: rank-deficient constraint system");
        Eigen::VectorXd h = svd.matrixV().col(8);
        Eigen::Matrix3d m;
        m << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
        if (m.determinant() < 0) m = -m;
        const RQResult rq = rq_decompose(m);
        cam.K = rq.K;
        cam.K(0, 1) = 0.0;  // skew is zero by model assumption
        cam.R = rq.R;
    }
    cam.t = -cam.R * center.c;
    return cam;
}

ProjectionResult project_points(const Camera& cam, const std::vector<Eigen::Vector3d>& pts) {
    ProjectionResult out;
    out.uv.reserve(pts.size());
    out.depth.reserve(pts.size());
    out.valid.reserve(pts.size());
    const double wmax = cam.width > 0 ? cam.width - 1.0 : 0.0;
    const double hmax = cam.height > 0 ? cam.height - 1.0 : 0.0;
    for (const auto& p : pts) {
        const Eigen::Vector3d xc = cam.R * p + cam.t;
        const double z = xc.z();
        const bool valid = z > kZNear;
        Eigen::Vector2d uv;
        if (valid) {
            const Eigen::Vector3d proj = cam.K * xc;
            uv = Eigen::Vector2d(proj.x() / z, proj.y() / z);
        } else {
            const Eigen::Vector3d proj = cam.K * Eigen::Vector3d(xc.x(), xc.y(), kZNear);
            uv = Eigen::Vector2d(std::clamp(proj.x() / kZNear, 0.0, wmax),
                                 std::clamp(proj.y() / kZNear, 0.0, hmax));
        }
        out.uv.push_back(uv);
        out.depth.push_back(z);
        out.valid.push_back(valid);
    }
    return out;
}

PoseError pose_error(const Camera& est, const Camera& gt) {
    PoseError e;
    const Eigen::Matrix3d rel = est.R * gt.R.transpose();
    const double c = std::clamp((rel.trace() - 1.0) * 0.5, -1.0, 1.0);
    e.rot_deg = std::acos(c) * kRad2Deg;
    const double ne = est.t.norm();
    const double ng = gt.t.norm();
    if (ng < 1e-9) {
        e.trans_deg = ne < 1e-9 ? 0.0 : 180.0;
    } else if (ne < 1e-9) {
        e.trans_deg = 180.0;
    } else {
        const double d = std::clamp(est.t.dot(gt.t) / (ne * ng), -1.0, 1.0);
        e.trans_deg = std::acos(d) * kRad2Deg;
    }
    return e;
}

std::vector<double> pose_auc(const std::vector<PoseError>& errors,
                             const std::vector<double>& thresholds_deg) {
    if (errors.empty()) throw std::invalid_argument("pose_auc: empty error list");
    for (double t : thresholds_deg)
        if (t <= 0) throw std::invalid_argument("pose_auc: thresholds must be positive");
    std::vector<double> out;
    out.reserve(thresholds_deg.size());
    for (double tau : thresholds_deg) {
        // integral of the step accuracy curve: each sample contributes
        // max(0, tau - e)/tau of the unit area.
        double acc = 0.0;
        for (const auto& e : errors) {
            const double s = std::max(e.rot_deg, e.trans_deg);
            acc += std::max(0.0, tau - s);
        }
        out.push_back(acc / (tau * static_cast<double>(errors.size())));
    }
    return out;
}

void save_camera_json(const Camera& cam, const std::string& path) {
    json j;
    j["K"] = mat_to_json(cam.K);
    j["R"] = mat_to_json(cam.R);
    j["t"] = {cam.t.x(), cam.t.y(), cam.t.z()};
    j["width"] = cam.width;
    j["height"] = cam.height;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_camera_json: cannot open " + path);
    out << j.dump(2) << "\n";
}

Camera load_camera_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_camera_json: cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw std::runtime_error("load_camera_json: " + path + ": " + e.what());
    }
    Camera cam;
    cam.K = mat_from_json(j.at("K"));
    cam.R = mat_from_json(j.at("R"));
    const auto& t = j.at("t");
    cam.t = Eigen::Vector3d(t[0].get<double>(), t[1].get<double>(), t[2].get<double>());
    cam.width = j.value("width", 0);
    cam.height = j.value("height", 0);
    return cam;
}

void save_rays_json(const RaySet& rays, const std::string& path) {
    json arr = json::array();
    for (size_t i = 0; i < rays.rays.size(); ++i) {
        const auto& r = rays.rays[i];
        json e;
        e["d"] = {r.d.x(), r.d.y(), r.d.z()};
        e["m"] = {r.m.x(), r.m.y(), r.m.z()};
        e["uv"] = {rays.uv[i].x(), rays.uv[i].y()};
        arr.push_back(e);
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_rays_json: cannot open " + path);
    out << arr.dump(2) << "\n";
}

RaySet load_rays_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_rays_json: cannot open " + path);
    json arr;
    try {
        in >> arr;
    } catch (const json::parse_error& e) {
        throw std::runtime_error("load_rays_json: " + path + ": " + e.what());
    }
    if (!arr.is_array()) throw std::runtime_error("load_rays_json: " + path + ": expected array");
    RaySet out;
    for (const auto& e : arr) {
        PlueckerRay r;
        const auto& d = e.at("d");
        const auto& m = e.at("m");
        const auto& uv = e.at("uv");
        r.d = Eigen::Vector3d(d[0].get<double>(), d[1].get<double>(), d[2].get<double>());
        r.m = Eigen::Vector3d(m[0].get<double>(), m[1].get<double>(), m[2].get<double>());
        out.rays.push_back(r);
        out.uv.emplace_back(uv[0].get<double>(), uv[1].get<double>());
    }
    return out;
}

}  // namespace splatpose
