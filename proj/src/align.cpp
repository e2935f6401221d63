#include "splatpose/ad_geometry.hpp"
#include "splatpose/camera.hpp"
#include "splatpose/render.hpp"

#include <cmath>
#include <stdexcept>

namespace splatpose {

namespace {

using ad::Value;

double mse_inference(const GaussianSet& g, const Camera& cam, const Image& target) {
    const RenderOutput out = render(g, cam, target.width, target.height);
    double acc = 0.0;
    for (size_t i = 0; i < out.rgb.px.size(); ++i) {
        const double d = out.rgb.px[i] - target.px[i];
        acc += d * d;
    }
    return acc / static_cast<double>(out.rgb.px.size());
}

}  // namespace

Camera align_target_pose(const GaussianSet& g, const Image& target_img, const Camera& init,
                         const AlignOptions& opts) {
    if (opts.iters <= 0) return init;
    g.validate();
    const int w = target_img.width, h = target_img.height;

    const GaussianValues gv = gaussians_to_values(g, false);
    const CameraValues base = camera_to_values(init);
    const Value r_init = base.R;
    const Value t_init = ad::reshape(base.t, {3, 1});
    const Value target(std::vector<int>{h, w, 3}, target_img.px);

    // Local SE(3) perturbation: R = exp([w]x) R0, t = exp([w]x) t0 + delta.
    std::vector<double> theta(6, 0.0);
    std::vector<double> m(6, 0.0), v(6, 0.0);
    std::vector<double> best_theta = theta;
    double best_loss = 1e300;
    constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;

    auto make_camera = [&](const std::vector<double>& th) -> CameraValues {
        Value wv(std::vector<int>{3}, {th[0], th[1], th[2]});
        Value dv(std::vector<int>{3, 1}, {th[3], th[4], th[5]});
        Value rp = ad::rodrigues(wv);
        CameraValues cam;
        cam.R = ad::matmul(rp, r_init);
        cam.t = ad::reshape(ad::add(ad::matmul(rp, t_init), dv), {3});
        cam.K = base.K;
        cam.width = w;
        cam.height = h;
        return cam;
    };

    for (int it = 0; it < opts.iters; ++it) {
        ad::Graph graph;
        Value wv, dv;
        double loss_val;
        {
            ad::GraphScope scope(graph);
            wv = Value::param({3}, {theta[0], theta[1], theta[2]});
            dv = Value::param({3, 1}, {theta[3], theta[4], theta[5]});
            Value rp = ad::rodrigues(wv);
            CameraValues cam;
            cam.R = ad::matmul(rp, r_init);
            cam.t = ad::reshape(ad::add(ad::matmul(rp, t_init), dv), {3});
            cam.K = base.K;
            cam.width = w;
            cam.height = h;
            Value rendered = render_value(gv, cam, w, h, Eigen::Vector3d::Zero(),
                                          RenderMode::kGradient);
            Value rgb = ad::slice(rendered, {0, 0, 0}, {h, w, 3});
            Value diff = ad::sub(rgb, target);
            Value loss = ad::mean(ad::mul(diff, diff));
            loss_val = loss.item();
            if (!std::isfinite(loss_val))
                throw std::runtime_error("align_target_pose: non-finite loss at iter " +
                                         std::to_string(it));
            if (loss_val < best_loss) {
                best_loss = loss_val;
                best_theta = theta;
            }
            graph.backward(loss);
        }
        std::vector<double> grad(6, 0.0);
        for (int i = 0; i < 3; ++i) {
            grad[i] = wv.has_grad() ? wv.grad()[i] : 0.0;
            grad[3 + i] = dv.has_grad() ? dv.grad()[i] : 0.0;
        }
        const double bc1 = 1.0 - std::pow(kBeta1, it + 1);
        const double bc2 = 1.0 - std::pow(kBeta2, it + 1);
        for (int i = 0; i < 6; ++i) {
            m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * grad[i];
            v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * grad[i] * grad[i];
            theta[i] -= opts.step * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + kEps);
        }
    }

    // Score the final iterate as well.
    {
        ad::NoGradGuard guard;
        CameraValues cam = make_camera(theta);
        Value rendered = render_value(gv, cam, w, h, Eigen::Vector3d::Zero(),
                                      RenderMode::kGradient);
        Value rgb = ad::slice(rendered, {0, 0, 0}, {h, w, 3});
        double acc = 0.0;
        for (int64_t i = 0; i < rgb.size(); ++i) {
            const double d = rgb.data()[i] - target_img.px[i];
            acc += d * d;
        }
        const double loss_val = acc / static_cast<double>(rgb.size());
        if (std::isfinite(loss_val) && loss_val < best_loss) {
            best_loss = loss_val;
            best_theta = theta;
        }
    }

    Camera out;
    {
        ad::NoGradGuard guard;
        out = values_to_camera(make_camera(best_theta));
    }
    // Inference-mode guard: never return a camera that scores worse than init.
    if (mse_inference(g, out, target_img) > mse_inference(g, init, target_img)) return init;
    return out;
}

}  // namespace splatpose
