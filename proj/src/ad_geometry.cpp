#include "splatpose/ad_geometry.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

namespace splatpose::ad {

namespace {

Eigen::Matrix3d to_mat3(const Value& v) {
    Eigen::Matrix3d m;
    const auto& d = v.data();
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) m(i, j) = d[i * 3 + j];
    return m;
}

Value from_mat3(const Eigen::Matrix3d& m, bool rg) {
    std::vector<double> d(9);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) d[i * 3 + j] = m(i, j);
    return Value({3, 3}, std::move(d), rg);
}

struct Inverse3Node : Node {
    void backward() override {
        const auto& g = output.grad();
        Eigen::Matrix3d gm;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) gm(i, j) = g[i * 3 + j];
        const Eigen::Matrix3d y = to_mat3(output);
        const Eigen::Matrix3d ga = -y.transpose() * gm * y.transpose();
        std::vector<double> out(9);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) out[i * 3 + j] = ga(i, j);
        accumulate_grad(inputs[0], out);
    }
};

struct ProcrustesNode : Node {
    Eigen::Matrix3d u, v;
    Eigen::Vector3d sigma;
    double det_sign = 1.0;

    void backward() override {
        const auto& g = output.grad();
        Eigen::Matrix3d gm;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) gm(i, j) = g[i * 3 + j];
        const Eigen::Matrix3d gt = u.transpose() * gm * v;  // G tilde
        const Eigen::Vector3d c(1.0, 1.0, det_sign);
        Eigen::Matrix3d wm = Eigen::Matrix3d::Zero();
        for (int i = 0; i < 3; ++i) {
            for (int j = i + 1; j < 3; ++j) {
                const double si = sigma(i), sj = sigma(j);
                if (c(i) == c(j)) {
                    // Numerator factors as (sj - si); divide it out so equal
                    // singular values stay finite.
                    const double denom = std::max(si + sj, 1e-300);
                    wm(i, j) = c(i) * (gt(i, j) - gt(j, i)) / denom;
                    wm(j, i) = -wm(i, j);
                } else {
                    const double x = c(j) * sj - c(i) * si;
                    const double y = c(j) * si - c(i) * sj;
                    double denom = sj * sj - si * si;
                    if (std::abs(denom) < 1e-12) denom = denom < 0 ? -1e-12 : 1e-12;
                    wm(i, j) = (gt(i, j) * x + gt(j, i) * y) / denom;
                    wm(j, i) = (gt(i, j) * y + gt(j, i) * x) / denom;
                }
            }
        }
        const Eigen::Matrix3d ga = u * wm * v.transpose();
        std::vector<double> out(9);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) out[i * 3 + j] = ga(i, j);
        accumulate_grad(inputs[0], out);
    }
};

struct RodriguesNode : Node {
    void backward() override {
        const auto& g = output.grad();
        Eigen::Matrix3d gm;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) gm(i, j) = g[i * 3 + j];
        const auto& wd = inputs[0].data();
        const Eigen::Vector3d w(wd[0], wd[1], wd[2]);
        Eigen::Matrix3d r;
        {
            const auto& rd = output.data();
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) r(i, j) = rd[i * 3 + j];
        }
        const double theta2 = w.squaredNorm();
        std::vector<double> gw(3, 0.0);
        auto hat = [](const Eigen::Vector3d& a) {
            Eigen::Matrix3d m;
            m << 0, -a.z(), a.y(), a.z(), 0, -a.x(), -a.y(), a.x(), 0;
            return m;
        };
        for (int i = 0; i < 3; ++i) {
            Eigen::Vector3d ei = Eigen::Vector3d::Zero();
            ei(i) = 1.0;
            Eigen::Matrix3d dr;
            if (theta2 < 1e-12) {
                dr = hat(ei);
            } else {
                // Gallego & Yezzi closed form for d exp([w]x)/d w_i.
                const Eigen::Vector3d q = w.cross((Eigen::Matrix3d::Identity() - r) * ei);
                dr = ((w(i) * hat(w) + hat(q)) / theta2) * r;
            }
            gw[i] = (gm.array() * dr.array()).sum();
        }
        accumulate_grad(inputs[0], gw);
    }
};

}  // namespace

Value inverse3(const Value& m) {
    if (m.shape() != std::vector<int>{3, 3})
        throw std::invalid_argument("inverse3: expected (3,3), got " + shape_str(m.shape()));
    const Eigen::Matrix3d a = to_mat3(m);
    const double det = a.determinant();
    if (std::abs(det) < 1e-300) throw std::runtime_error("inverse3: singular matrix");
    Value out = from_mat3(a.inverse(), m.requires_grad() && active_graph() != nullptr);
    if (recording_for({m})) {
        auto node = std::make_unique<Inverse3Node>();
        node->name = "inverse3";
        node->inputs = {m};
        node->output = out;
        record_node(std::move(node));
    }
    return out;
}

Value procrustes_rotation(const Value& a) {
    if (a.shape() != std::vector<int>{3, 3})
        throw std::invalid_argument("procrustes_rotation: expected (3,3), got " +
                                    shape_str(a.shape()));
    const Eigen::Matrix3d m = to_mat3(a);
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Eigen::Matrix3d u = svd.matrixU();
    const Eigen::Matrix3d v = svd.matrixV();
    const double s = (u * v.transpose()).determinant() > 0 ? 1.0 : -1.0;
    Eigen::Vector3d c(1.0, 1.0, s);
    const Eigen::Matrix3d r = u * c.asDiagonal() * v.transpose();
    Value out = from_mat3(r, a.requires_grad() && active_graph() != nullptr);
    if (recording_for({a})) {
        auto node = std::make_unique<ProcrustesNode>();
        node->name = "procrustes_rotation";
        node->inputs = {a};
        node->output = out;
        node->u = u;
        node->v = v;
        node->sigma = svd.singularValues();
        node->det_sign = s;
        record_node(std::move(node));
    }
    return out;
}

Value rodrigues(const Value& w) {
    if (w.size() != 3)
        throw std::invalid_argument("rodrigues: expected 3 elements, got " + shape_str(w.shape()));
    const auto& d = w.data();
    const Eigen::Vector3d wv(d[0], d[1], d[2]);
    const double theta = wv.norm();
    Eigen::Matrix3d k;
    k << 0, -wv.z(), wv.y(), wv.z(), 0, -wv.x(), -wv.y(), wv.x(), 0;
    Eigen::Matrix3d r;
    if (theta < 1e-12) {
        r = Eigen::Matrix3d::Identity() + k + 0.5 * k * k;
    } else {
        r = Eigen::Matrix3d::Identity() + (std::sin(theta) / theta) * k +
            ((1.0 - std::cos(theta)) / (theta * theta)) * k * k;
    }
    Value out = from_mat3(r, w.requires_grad() && active_graph() != nullptr);
    if (recording_for({w})) {
        auto node = std::make_unique<RodriguesNode>();
        node->name = "rodrigues";
        node->inputs = {w};
        node->output = out;
        record_node(std::move(node));
    }
    return out;
}

}  // namespace splatpose::ad
