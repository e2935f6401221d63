#include "splatpose/render.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <vector>

namespace splatpose {

namespace {

using ad::Value;

constexpr double kCutoffPower = -4.5;   // 3 sigma
constexpr double kWindowStart = -3.0;   // smooth window ramps over [-4.5,-3]
constexpr double kAlphaClamp = 0.99;
constexpr double kCovDilation = 0.3;
constexpr double kMinTransmit = 1e-14;

struct ProjectedGaussian {
    int idx = 0;
    double z = 0.0;
    Eigen::Vector2d p = Eigen::Vector2d::Zero();
    double conic[3] = {0, 0, 0};  // packed symmetric inverse covariance
    double opacity = 0.0;
    Eigen::Vector3d color = Eigen::Vector3d::Zero();
    bool color_clamped[3] = {false, false, false};
    int x0 = 0, x1 = -1, y0 = 0, y1 = -1;
    // intermediates for the backward chain
    Eigen::Vector3d xc;
    Eigen::Vector4d qn;
    double qnorm = 1.0;
    Eigen::Matrix3d rq;
    Eigen::Vector3d s;
    Eigen::Matrix3d sigma3;
    Eigen::Matrix<double, 2, 3> t2;
    Eigen::Matrix2d cov2;
    Eigen::Vector3d view_dir;
    double u_norm = 1.0;  // |mu - camera center|
};

Eigen::Matrix3d quat_to_rot(const Eigen::Vector4d& q) {
    const double w = q(0), x = q(1), y = q(2), z = q(3);
    Eigen::Matrix3d r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

// dR/dq for a unit quaternion, scaled by 2 inside.
Eigen::Matrix3d quat_rot_partial(const Eigen::Vector4d& q, int i) {
    const double w = q(0), x = q(1), y = q(2), z = q(3);
    Eigen::Matrix3d m;
    switch (i) {
        case 0: m << 0, -z, y, z, 0, -x, -y, x, 0; break;
        case 1: m << 0, y, z, y, -2 * x, -w, z, w, -2 * x; break;
        case 2: m << -2 * y, x, w, x, 0, z, -w, z, -2 * y; break;
        default: m << -2 * z, -w, x, w, -2 * z, y, x, y, 0; break;
    }
    return 2.0 * m;
}

struct SceneData {
    const double* mu;
    const double* rot;
    const double* scale_log;
    const double* logit;
    const double* sh;
    int n;
    int sh_channels;
    int degree;
    Eigen::Matrix3d r;
    Eigen::Vector3d t;
    Eigen::Matrix3d k;
    int w, h;
};

std::vector<ProjectedGaussian> project_all(const SceneData& s) {
    std::vector<ProjectedGaussian> out;
    out.reserve(s.n);
    const Eigen::Vector3d cam_center = -s.r.transpose() * s.t;
    const double fx = s.k(0, 0), fy = s.k(1, 1), cx = s.k(0, 2), cy = s.k(1, 2);
    for (int k = 0; k < s.n; ++k) {
        ProjectedGaussian pg;
        pg.idx = k;
        const Eigen::Vector3d mu(s.mu[k * 3], s.mu[k * 3 + 1], s.mu[k * 3 + 2]);
        pg.xc = s.r * mu + s.t;
        pg.z = pg.xc.z();
        if (!(pg.z > kZNear)) continue;
        Eigen::Vector4d q(s.rot[k * 4], s.rot[k * 4 + 1], s.rot[k * 4 + 2], s.rot[k * 4 + 3]);
        pg.qnorm = q.norm();
        if (pg.qnorm < 1e-12) throw std::runtime_error("render: degenerate quaternion");
        pg.qn = q / pg.qnorm;
        pg.rq = quat_to_rot(pg.qn);
        pg.s = Eigen::Vector3d(std::exp(s.scale_log[k * 3]), std::exp(s.scale_log[k * 3 + 1]),
                               std::exp(s.scale_log[k * 3 + 2]));
        const Eigen::Matrix3d m3 = pg.rq * pg.s.asDiagonal();
        pg.sigma3 = m3 * m3.transpose();
        const double z = pg.z;
        Eigen::Matrix<double, 2, 3> j;
        j << fx / z, 0, -fx * pg.xc.x() / (z * z), 0, fy / z, -fy * pg.xc.y() / (z * z);
        pg.t2 = j * s.r;
        pg.cov2 = pg.t2 * pg.sigma3 * pg.t2.transpose();
        pg.cov2(0, 0) += kCovDilation;
        pg.cov2(1, 1) += kCovDilation;
        const double det = pg.cov2(0, 0) * pg.cov2(1, 1) - pg.cov2(0, 1) * pg.cov2(0, 1);
        if (det <= 1e-300) continue;
        pg.conic[0] = pg.cov2(1, 1) / det;
        pg.conic[1] = -pg.cov2(0, 1) / det;
        pg.conic[2] = pg.cov2(0, 0) / det;
        const double mid = 0.5 * (pg.cov2(0, 0) + pg.cov2(1, 1));
        const double lam = mid + std::sqrt(std::max(0.0, mid * mid - det));
        const double radius = 3.0 * std::sqrt(lam);
        pg.p = Eigen::Vector2d((fx * pg.xc.x() + cx * z) / z, (fy * pg.xc.y() + cy * z) / z);
        if (pg.p.x() + radius < -0.5 || pg.p.x() - radius > s.w - 0.5 ||
            pg.p.y() + radius < -0.5 || pg.p.y() - radius > s.h - 0.5)
            continue;
        pg.x0 = std::max(0, static_cast<int>(std::floor(pg.p.x() - radius)));
        pg.x1 = std::min(s.w - 1, static_cast<int>(std::ceil(pg.p.x() + radius)));
        pg.y0 = std::max(0, static_cast<int>(std::floor(pg.p.y() - radius)));
        pg.y1 = std::min(s.h - 1, static_cast<int>(std::ceil(pg.p.y() + radius)));
        if (pg.x1 < pg.x0 || pg.y1 < pg.y0) continue;
        pg.opacity = 1.0 / (1.0 + std::exp(-s.logit[k]));
        // color, with per-channel clamp bookkeeping
        Eigen::Vector3d pre(kSh0 * s.sh[k * s.sh_channels + 0] + 0.5,
                            kSh0 * s.sh[k * s.sh_channels + 1] + 0.5,
                            kSh0 * s.sh[k * s.sh_channels + 2] + 0.5);
        if (s.degree >= 1) {
            const Eigen::Vector3d u = mu - cam_center;
            pg.u_norm = u.norm();
            pg.view_dir = pg.u_norm > 1e-12 ? Eigen::Vector3d(u / pg.u_norm)
                                            : Eigen::Vector3d(0, 0, 1);
            const double vx = pg.view_dir.x(), vy = pg.view_dir.y(), vz = pg.view_dir.z();
            for (int ch = 0; ch < 3; ++ch)
                pre(ch) += kSh1 * (-vy * s.sh[k * s.sh_channels + 3 + ch] +
                                   vz * s.sh[k * s.sh_channels + 6 + ch] -
                                   vx * s.sh[k * s.sh_channels + 9 + ch]);
        }
        for (int ch = 0; ch < 3; ++ch) {
            pg.color_clamped[ch] = pre(ch) < 0.0 || pre(ch) > 1.0;
            pg.color(ch) = std::min(std::max(pre(ch), 0.0), 1.0);
        }
        if (!pg.color.allFinite() || !std::isfinite(pg.opacity) || !std::isfinite(det))
            throw std::runtime_error("render: non-finite parameters");
        out.push_back(pg);
    }
    std::sort(out.begin(), out.end(), [](const ProjectedGaussian& a, const ProjectedGaussian& b) {
        if (a.z != b.z) return a.z < b.z;
        return a.idx < b.idx;
    });
    return out;
}

// Smooth multiplicative window over the cutoff band; w'(power) in dw.
double window_fn(double power, RenderMode mode, double* dw) {
    *dw = 0.0;
    if (mode == RenderMode::kInference) return 1.0;
    if (power >= kWindowStart) return 1.0;
    const double span = kWindowStart - kCutoffPower;
    const double u = (power - kCutoffPower) / span;
    *dw = (6.0 * u - 6.0 * u * u) / span;
    return u * u * (3.0 - 2.0 * u);
}

struct Contribution {
    int pi;  // index into the projected list
    double alpha;
    double power;
    double gexp_w;  // exp(power) * w
    double dgdp;    // d(gexp_w)/dpower
    double t_before;
};

void composite_forward(const std::vector<ProjectedGaussian>& proj, int w, int h,
                       const Eigen::Vector3d& bg, RenderMode mode, std::vector<double>& out) {
    out.assign(static_cast<size_t>(w) * h * 5, 0.0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double t = 1.0;
            double rgb[3] = {0, 0, 0};
            double depth = 0.0;
            for (const auto& pg : proj) {
                if (x < pg.x0 || x > pg.x1 || y < pg.y0 || y > pg.y1) continue;
                const double dx = x - pg.p.x();
                const double dy = y - pg.p.y();
                const double power = -0.5 * (pg.conic[0] * dx * dx + 2.0 * pg.conic[1] * dx * dy +
                                             pg.conic[2] * dy * dy);
                if (power <= kCutoffPower) continue;
                double dw;
                const double wv = window_fn(power, mode, &dw);
                const double alpha = std::min(pg.opacity * std::exp(power) * wv, kAlphaClamp);
                for (int c = 0; c < 3; ++c) rgb[c] += pg.color(c) * alpha * t;
                depth += pg.z * alpha * t;
                t *= 1.0 - alpha;
                if (t < kMinTransmit) break;
            }
            double* px = &out[(static_cast<size_t>(y) * w + x) * 5];
            for (int c = 0; c < 3; ++c) px[c] = rgb[c] + bg(c) * t;
            px[3] = depth;
            px[4] = 1.0 - t;
        }
    }
}

struct RenderNode : ad::Node {
    SceneData scene{};  // pointers refreshed in backward from saved inputs
    Eigen::Vector3d bg;
    RenderMode mode;

    void backward() override {
        // inputs: mu, rot, scale_log, logit, sh, R, t, K
        const Value& mu_v = inputs[0];
        const Value& rot_v = inputs[1];
        const Value& slog_v = inputs[2];
        const Value& logit_v = inputs[3];
        const Value& sh_v = inputs[4];
        const Value& r_v = inputs[5];
        const Value& t_v = inputs[6];
        const Value& k_v = inputs[7];
        SceneData s = scene;
        s.mu = mu_v.data().data();
        s.rot = rot_v.data().data();
        s.scale_log = slog_v.data().data();
        s.logit = logit_v.data().data();
        s.sh = sh_v.data().data();
        const auto proj = project_all(s);
        const auto& g = output.grad();

        const int n = s.n;
        std::vector<double> d_op(proj.size(), 0.0);
        std::vector<Eigen::Vector2d> d_p(proj.size(), Eigen::Vector2d::Zero());
        std::vector<Eigen::Vector3d> d_conic(proj.size(), Eigen::Vector3d::Zero());
        std::vector<Eigen::Vector3d> d_color(proj.size(), Eigen::Vector3d::Zero());
        std::vector<double> d_z(proj.size(), 0.0);

        std::vector<Contribution> contribs;
        for (int y = 0; y < s.h; ++y) {
            for (int x = 0; x < s.w; ++x) {
                contribs.clear();
                double t = 1.0;
                for (size_t pi = 0; pi < proj.size(); ++pi) {
                    const auto& pg = proj[pi];
                    if (x < pg.x0 || x > pg.x1 || y < pg.y0 || y > pg.y1) continue;
                    const double dx = x - pg.p.x();
                    const double dy = y - pg.p.y();
                    const double power = -0.5 * (pg.conic[0] * dx * dx +
                                                 2.0 * pg.conic[1] * dx * dy +
                                                 pg.conic[2] * dy * dy);
                    if (power <= kCutoffPower) continue;
                    double dw;
                    const double wv = window_fn(power, mode, &dw);
                    const double e = std::exp(power);
                    const double raw = pg.opacity * e * wv;
                    Contribution c;
                    c.pi = static_cast<int>(pi);
                    c.power = power;
                    c.gexp_w = e * wv;
                    c.dgdp = e * (wv + dw);
                    c.alpha = std::min(raw, kAlphaClamp);
                    c.t_before = t;
                    contribs.push_back(c);
                    t *= 1.0 - c.alpha;
                    if (t < kMinTransmit) break;
                }
                const double t_final = t;
                const double* gp = &g[(static_cast<size_t>(y) * s.w + x) * 5];
                Eigen::Vector3d s_rgb = bg * t_final;
                double s_depth = 0.0;
                for (auto it = contribs.rbegin(); it != contribs.rend(); ++it) {
                    const auto& c = *it;
                    const auto& pg = proj[c.pi];
                    const double om = 1.0 - c.alpha;
                    double dalpha = 0.0;
                    for (int ch = 0; ch < 3; ++ch) {
                        dalpha += gp[ch] * (pg.color(ch) * c.t_before - s_rgb(ch) / om);
                        d_color[c.pi](ch) += gp[ch] * c.alpha * c.t_before;
                    }
                    dalpha += gp[3] * (pg.z * c.t_before - s_depth / om);
                    dalpha += gp[4] * (t_final / om);
                    d_z[c.pi] += gp[3] * c.alpha * c.t_before;
                    const bool clamped = pg.opacity * c.gexp_w >= kAlphaClamp;
                    if (!clamped) {
                        d_op[c.pi] += dalpha * c.gexp_w;
                        const double dpower = dalpha * pg.opacity * c.dgdp;
                        const double dx = x - pg.p.x();
                        const double dy = y - pg.p.y();
                        d_conic[c.pi](0) += dpower * (-0.5 * dx * dx);
                        d_conic[c.pi](1) += dpower * (-dx * dy);
                        d_conic[c.pi](2) += dpower * (-0.5 * dy * dy);
                        d_p[c.pi](0) += dpower * (pg.conic[0] * dx + pg.conic[1] * dy);
                        d_p[c.pi](1) += dpower * (pg.conic[1] * dx + pg.conic[2] * dy);
                    }
                    s_rgb += pg.color * c.alpha * c.t_before;
                    s_depth += pg.z * c.alpha * c.t_before;
                }
            }
        }

        // chain per-gaussian gradients through the projection
        std::vector<double> gmu(static_cast<size_t>(n) * 3, 0.0);
        std::vector<double> grot(static_cast<size_t>(n) * 4, 0.0);
        std::vector<double> gslog(static_cast<size_t>(n) * 3, 0.0);
        std::vector<double> glogit(n, 0.0);
        std::vector<double> gsh(static_cast<size_t>(n) * s.sh_channels, 0.0);
        Eigen::Matrix3d gr = Eigen::Matrix3d::Zero();
        Eigen::Vector3d gt = Eigen::Vector3d::Zero();
        Eigen::Matrix3d gk = Eigen::Matrix3d::Zero();
        const double fx = s.k(0, 0), fy = s.k(1, 1);
        const Eigen::Vector3d cam_center = -s.r.transpose() * s.t;

        for (size_t pi = 0; pi < proj.size(); ++pi) {
            const auto& pg = proj[pi];
            const int k = pg.idx;
            const Eigen::Vector3d mu(s.mu[k * 3], s.mu[k * 3 + 1], s.mu[k * 3 + 2]);
            Eigen::Vector3d dxc = Eigen::Vector3d::Zero();
            double dfx = 0.0, dfy = 0.0;

            // opacity
            glogit[k] += d_op[pi] * pg.opacity * (1.0 - pg.opacity);

            // color -> sh (and view dir for degree 1)
            Eigen::Vector3d dpre = Eigen::Vector3d::Zero();
            for (int ch = 0; ch < 3; ++ch)
                if (!pg.color_clamped[ch]) dpre(ch) = d_color[pi](ch);
            for (int ch = 0; ch < 3; ++ch) gsh[k * s.sh_channels + ch] += kSh0 * dpre(ch);
            if (s.degree >= 1) {
                const double vx = pg.view_dir.x(), vy = pg.view_dir.y(), vz = pg.view_dir.z();
                Eigen::Vector3d dvd = Eigen::Vector3d::Zero();
                for (int ch = 0; ch < 3; ++ch) {
                    gsh[k * s.sh_channels + 3 + ch] += kSh1 * (-vy) * dpre(ch);
                    gsh[k * s.sh_channels + 6 + ch] += kSh1 * vz * dpre(ch);
                    gsh[k * s.sh_channels + 9 + ch] += kSh1 * (-vx) * dpre(ch);
                    dvder(dvd, s, k, dpre(ch), ch);
                }
                if (pg.u_norm > 1e-12) {
                    const Eigen::Vector3d du =
                        (dvd - pg.view_dir * pg.view_dir.dot(dvd)) / pg.u_norm;
                    for (int i = 0; i < 3; ++i) gmu[k * 3 + i] += du(i);
                    // d(center) = -du; center = -R^T t
                    const Eigen::Vector3d dcenter = -du;
                    gr += -s.t * dcenter.transpose();
                    gt += -s.r * dcenter;
                }
            }

            // conic -> cov2
            Eigen::Matrix2d glam;
            glam << d_conic[pi](0), 0.5 * d_conic[pi](1), 0.5 * d_conic[pi](1), d_conic[pi](2);
            Eigen::Matrix2d lam;
            lam << pg.conic[0], pg.conic[1], pg.conic[1], pg.conic[2];
            const Eigen::Matrix2d gcov = -lam * glam * lam;

            // cov2 = T2 Sigma3 T2^T + dilation
            const Eigen::Matrix3d gsigma3 = pg.t2.transpose() * gcov * pg.t2;
            const Eigen::Matrix<double, 2, 3> gt2 = 2.0 * gcov * pg.t2 * pg.sigma3;

            // T2 = J R
            Eigen::Matrix<double, 2, 3> j;
            {
                const double z = pg.z;
                j << fx / z, 0, -fx * pg.xc.x() / (z * z), 0, fy / z, -fy * pg.xc.y() / (z * z);
            }
            const Eigen::Matrix<double, 2, 3> gj = gt2 * s.r.transpose();
            gr += j.transpose() * gt2;
            {
                const double z = pg.z;
                dfx += gj(0, 0) / z + gj(0, 2) * (-pg.xc.x() / (z * z));
                dfy += gj(1, 1) / z + gj(1, 2) * (-pg.xc.y() / (z * z));
                dxc.x() += gj(0, 2) * (-fx / (z * z));
                dxc.y() += gj(1, 2) * (-fy / (z * z));
                dxc.z() += gj(0, 0) * (-fx / (z * z)) + gj(1, 1) * (-fy / (z * z)) +
                           gj(0, 2) * (2.0 * fx * pg.xc.x() / (z * z * z)) +
                           gj(1, 2) * (2.0 * fy * pg.xc.y() / (z * z * z));
            }

            // Sigma3 = M M^T, M = Rq diag(s)
            const Eigen::Matrix3d m3 = pg.rq * pg.s.asDiagonal();
            const Eigen::Matrix3d gm = 2.0 * gsigma3 * m3;
            const Eigen::Matrix3d grq = gm * pg.s.asDiagonal();
            for (int i = 0; i < 3; ++i) {
                double ds = 0.0;
                for (int a = 0; a < 3; ++a) ds += gm(a, i) * pg.rq(a, i);
                gslog[k * 3 + i] += ds * pg.s(i);
            }
            // Rq <- quaternion
            Eigen::Vector4d dqn;
            for (int i = 0; i < 4; ++i)
                dqn(i) = (grq.array() * quat_rot_partial(pg.qn, i).array()).sum();
            const Eigen::Vector4d dq = (dqn - pg.qn * pg.qn.dot(dqn)) / pg.qnorm;
            for (int i = 0; i < 4; ++i) grot[k * 4 + i] += dq(i);

            // p = ((K xc).xy)/z
            {
                const double z = pg.z;
                dxc.x() += d_p[pi](0) * fx / z;
                dxc.y() += d_p[pi](1) * fy / z;
                dxc.z() += d_p[pi](0) * (-fx * pg.xc.x() / (z * z)) +
                           d_p[pi](1) * (-fy * pg.xc.y() / (z * z));
                dfx += d_p[pi](0) * pg.xc.x() / z;
                dfy += d_p[pi](1) * pg.xc.y() / z;
                gk(0, 2) += d_p[pi](0);
                gk(1, 2) += d_p[pi](1);
            }

            // depth channel contribution
            dxc.z() += d_z[pi];

            // xc = R mu + t
            for (int i = 0; i < 3; ++i) gmu[k * 3 + i] += s.r.col(i).dot(dxc);
            gt += dxc;
            gr += dxc * mu.transpose();
            gk(0, 0) += dfx;
            gk(1, 1) += dfy;
        }

        accumulate_grad(mu_v, gmu);
        accumulate_grad(rot_v, grot);
        accumulate_grad(slog_v, gslog);
        accumulate_grad(logit_v, glogit);
        accumulate_grad(sh_v, gsh);
        if (r_v.requires_grad()) {
            std::vector<double> v(9);
            for (int i = 0; i < 3; ++i)
                for (int j2 = 0; j2 < 3; ++j2) v[i * 3 + j2] = gr(i, j2);
            accumulate_grad(r_v, v);
        }
        if (t_v.requires_grad()) accumulate_grad(t_v, {gt.x(), gt.y(), gt.z()});
        if (k_v.requires_grad()) {
            std::vector<double> v(9);
            for (int i = 0; i < 3; ++i)
                for (int j2 = 0; j2 < 3; ++j2) v[i * 3 + j2] = gk(i, j2);
            accumulate_grad(k_v, v);
        }
    }

    // view-dir partials of the SH linear bands for channel ch.
    static void dvder(Eigen::Vector3d& dvd, const SceneData& s, int k, double d, int ch) {
        dvd.x() += d * kSh1 * (-s.sh[k * s.sh_channels + 9 + ch]);
        dvd.y() += d * kSh1 * (-s.sh[k * s.sh_channels + 3 + ch]);
        dvd.z() += d * kSh1 * (s.sh[k * s.sh_channels + 6 + ch]);
    }
};

}  // namespace

ad::Value render_value(const GaussianValues& g, const CameraValues& cam, int width, int height,
                       const Eigen::Vector3d& bg, RenderMode mode) {
    if (width <= 0 || height <= 0) throw std::invalid_argument("render: bad image size");
    if (!g.mu.defined() || g.count() == 0) {
        std::vector<double> out(static_cast<size_t>(width) * height * 5, 0.0);
        for (int i = 0; i < width * height; ++i)
            for (int c = 0; c < 3; ++c) out[static_cast<size_t>(i) * 5 + c] = bg(c);
        return Value({height, width, 5}, std::move(out));
    }
    SceneData s;
    s.mu = g.mu.data().data();
    s.rot = g.rot.data().data();
    s.scale_log = g.scale_log.data().data();
    s.logit = g.opacity_logit.data().data();
    s.sh = g.sh.data().data();
    s.n = g.count();
    s.sh_channels = g.sh.shape()[1];
    s.degree = g.sh_degree;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            s.r(i, j) = cam.R.data()[i * 3 + j];
            s.k(i, j) = cam.K.data()[i * 3 + j];
        }
    s.t = Eigen::Vector3d(cam.t.data()[0], cam.t.data()[1], cam.t.data()[2]);
    s.w = width;
    s.h = height;

    const auto proj = project_all(s);
    std::vector<double> out;
    composite_forward(proj, width, height, bg, mode, out);

    std::vector<Value> ins = {g.mu, g.rot, g.scale_log, g.opacity_logit,
                              g.sh,  cam.R, cam.t,       cam.K};
    const bool rg = ad::recording_for(ins);
    Value result({height, width, 5}, std::move(out), rg && ad::active_graph() != nullptr);
    if (rg) {
        auto node = std::make_unique<RenderNode>();
        node->name = "render";
        node->inputs = ins;
        node->output = result;
        node->scene = s;
        node->bg = bg;
        node->mode = mode;
        ad::record_node(std::move(node));
    }
    return result;
}

RenderOutput split_render_tensor(const ad::Value& t) {
    const int h = t.shape()[0], w = t.shape()[1];
    RenderOutput out;
    out.rgb = Image(w, h);
    out.depth = Grid(w, h);
    out.alpha = Grid(w, h);
    const auto& d = t.data();
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double* px = &d[(static_cast<size_t>(y) * w + x) * 5];
            for (int c = 0; c < 3; ++c) out.rgb.at(x, y, c) = px[c];
            out.depth.at(x, y) = px[3];
            out.alpha.at(x, y) = px[4];
        }
    return out;
}

RenderOutput render(const GaussianSet& g, const Camera& cam, int width, int height,
                    const Eigen::Vector3d& bg) {
    g.validate();
    ad::NoGradGuard guard;
    if (g.count() == 0) {
        RenderOutput out;
        out.rgb = Image(width, height);
        out.depth = Grid(width, height);
        out.alpha = Grid(width, height);
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x)
                for (int c = 0; c < 3; ++c) out.rgb.at(x, y, c) = bg(c);
        return out;
    }
    const GaussianValues gv = gaussians_to_values(g, false);
    const CameraValues cv = camera_to_values(cam);
    return split_render_tensor(render_value(gv, cv, width, height, bg, RenderMode::kInference));
}

Grid depth_map(const GaussianSet& g, const Camera& cam, int width, int height) {
    return render(g, cam, width, height).depth;
}

GaussianValues gaussians_to_values(const GaussianSet& g, bool requires_grad) {
    GaussianValues v;
    const int n = g.count();
    v.sh_degree = g.sh_degree;
    if (n == 0) return v;
    auto mk = [&](const std::vector<double>& data, std::vector<int> shape) {
        return requires_grad ? Value::param(shape, data) : Value(shape, data);
    };
    v.mu = mk(g.mu, {n, 3});
    v.rot = mk(g.rot, {n, 4});
    v.scale_log = mk(g.scale_log, {n, 3});
    v.opacity_logit = mk(g.opacity_logit, {n});
    v.sh = mk(g.sh, {n, g.sh_channels()});
    return v;
}

GaussianSet values_to_gaussians(const GaussianValues& v) {
    GaussianSet g;
    g.sh_degree = v.sh_degree;
    if (!v.mu.defined()) return g;
    g.mu = v.mu.data();
    g.rot = v.rot.data();
    g.scale_log = v.scale_log.data();
    g.opacity_logit = v.opacity_logit.data();
    g.sh = v.sh.data();
    return g;
}

CameraValues camera_to_values(const Camera& cam) {
    CameraValues v;
    std::vector<double> r(9), k(9);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            r[i * 3 + j] = cam.R(i, j);
            k[i * 3 + j] = cam.K(i, j);
        }
    v.R = Value({3, 3}, r);
    v.t = Value({3}, {cam.t.x(), cam.t.y(), cam.t.z()});
    v.K = Value({3, 3}, k);
    v.width = cam.width;
    v.height = cam.height;
    return v;
}

Camera values_to_camera(const CameraValues& v) {
    Camera cam;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            cam.R(i, j) = v.R.data()[i * 3 + j];
            cam.K(i, j) = v.K.data()[i * 3 + j];
        }
    cam.t = Eigen::Vector3d(v.t.data()[0], v.t.data()[1], v.t.data()[2]);
    cam.width = v.width;
    cam.height = v.height;
    return cam;
}

}  // namespace splatpose
