#include "splatpose/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace splatpose {

namespace {

using ad::Value;

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;
constexpr double kSsimC1 = 0.01 * 0.01;
constexpr double kSsimC2 = 0.03 * 0.03;

// Valid-window separable Gaussian filter as a ((len-10) x len) matrix.
Value blur_matrix(int len) {
    if (len < kSsimWindow) throw std::invalid_argument("ssim: image smaller than the 11px window");
    double g[kSsimWindow];
    double sum = 0.0;
    for (int i = 0; i < kSsimWindow; ++i) {
        const double d = i - (kSsimWindow - 1) / 2.0;
        g[i] = std::exp(-0.5 * d * d / (kSsimSigma * kSsimSigma));
        sum += g[i];
    }
    for (double& v : g) v /= sum;
    const int rows = len - kSsimWindow + 1;
    std::vector<double> m(static_cast<size_t>(rows) * len, 0.0);
    for (int r = 0; r < rows; ++r)
        for (int i = 0; i < kSsimWindow; ++i) m[static_cast<size_t>(r) * len + r + i] = g[i];
    return Value({rows, len}, std::move(m));
}

Value channel(const Value& img, int c) {
    const int h = img.shape()[0], w = img.shape()[1];
    return ad::reshape(ad::slice(img, {0, 0, c}, {h, w, 1}), {h, w});
}

}  // namespace

Value ssim_value(const Value& a, const Value& b) {
    if (a.shape() != b.shape() || a.rank() != 3 || a.shape()[2] != 3)
        throw std::invalid_argument("ssim: expected matching (H,W,3) images");
    const int h = a.shape()[0], w = a.shape()[1];
    const Value bh = blur_matrix(h);
    const Value bwt = ad::transpose(blur_matrix(w));
    auto blur = [&](const Value& x) { return ad::matmul(ad::matmul(bh, x), bwt); };
    Value acc;
    for (int c = 0; c < 3; ++c) {
        const Value x = channel(a, c);
        const Value y = channel(b, c);
        const Value mx = blur(x);
        const Value my = blur(y);
        const Value mx2 = ad::mul(mx, mx);
        const Value my2 = ad::mul(my, my);
        const Value mxy = ad::mul(mx, my);
        const Value sx = ad::sub(blur(ad::mul(x, x)), mx2);
        const Value sy = ad::sub(blur(ad::mul(y, y)), my2);
        const Value sxy = ad::sub(blur(ad::mul(x, y)), mxy);
        const Value num = ad::mul(ad::add_scalar(ad::scale(mxy, 2.0), kSsimC1),
                                  ad::add_scalar(ad::scale(sxy, 2.0), kSsimC2));
        const Value den = ad::mul(ad::add_scalar(ad::add(mx2, my2), kSsimC1),
                                  ad::add_scalar(ad::add(sx, sy), kSsimC2));
        const Value m = ad::mean(ad::divide(num, den));
        acc = c == 0 ? m : ad::add(acc, m);
    }
    return ad::scale(acc, 1.0 / 3.0);
}

Value loss_3d(const Value& pred, const Value& gt, const LossWeights& w) {
    if (pred.shape() != gt.shape())
        throw std::invalid_argument("loss_3d: shape mismatch " + ad::shape_str(pred.shape()) +
                                    " vs " + ad::shape_str(gt.shape()));
    const Value diff = ad::sub(pred, gt);
    const Value mse = ad::mean(ad::mul(diff, diff));
    if (w.lambda_perceptual == 0.0) return mse;
    const Value ss = ssim_value(pred, gt);
    return ad::add(mse, ad::scale(ad::add_scalar(ad::neg(ss), 1.0), w.lambda_perceptual));
}

Value loss_rays(const std::vector<Value>& pred, const std::vector<Value>& gt) {
    if (pred.size() != gt.size()) throw std::invalid_argument("loss_rays: view count mismatch");
    Value total;
    for (size_t v = 0; v < pred.size(); ++v) {
        if (pred[v].shape() != gt[v].shape())
            throw std::invalid_argument("loss_rays: ray count mismatch in view " +
                                        std::to_string(v));
        const int n = pred[v].shape()[0];
        // per-ray orientation: pick the gt sign with the smaller distance
        std::vector<double> sign(n, 1.0);
        for (int i = 0; i < n; ++i) {
            double dplus = 0.0, dminus = 0.0;
            for (int j = 0; j < 6; ++j) {
                const double p = pred[v].data()[i * 6 + j];
                const double g = gt[v].data()[i * 6 + j];
                dplus += (p - g) * (p - g);
                dminus += (p + g) * (p + g);
            }
            if (dminus < dplus) sign[i] = -1.0;
        }
        const Value diff = ad::sub(pred[v], ad::mul(gt[v], Value({n, 1}, sign)));
        const Value dist = ad::l2norm(diff, -1, false);  // (n)
        const Value s = ad::sum(dist);
        total = v == 0 ? s : ad::add(total, s);
    }
    return total;
}

Value gt_rays_value(const Camera& gt_cam, const Value& uv) {
    const int n = uv.shape()[0];
    std::vector<double> kinv_t(9), r(9);
    const Eigen::Matrix3d ki = gt_cam.K.inverse().transpose();
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            kinv_t[i * 3 + j] = ki(i, j);
            r[i * 3 + j] = gt_cam.R(i, j);
        }
    const Value ones = Value::full({n, 1}, 1.0);
    const Value uh = ad::concat({uv, ones}, 1);
    const Value vt = ad::matmul(uh, Value({3, 3}, kinv_t));
    const Value d = ad::matmul(vt, Value({3, 3}, r));  // rows = (R^T K^-1 u)^T
    const Eigen::Vector3d c = gt_cam.center();
    std::vector<double> ctile(static_cast<size_t>(n) * 3);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < 3; ++j) ctile[i * 3 + j] = c(j);
    const Value m = ad::cross3(Value({n, 3}, std::move(ctile)), d);
    const Value nrm = ad::l2norm(d, -1, true);
    return ad::concat({ad::divide(d, nrm), ad::divide(m, nrm)}, 1);
}

double psnr(const Image& pred, const Image& gt) {
    if (pred.width != gt.width || pred.height != gt.height)
        throw std::invalid_argument("psnr: image size mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < pred.px.size(); ++i) {
        const double d = pred.px[i] - gt.px[i];
        acc += d * d;
    }
    const double mse = acc / static_cast<double>(pred.px.size());
    if (mse < 1e-10) return 100.0;
    return 10.0 * std::log10(1.0 / mse);
}

double ssim(const Image& pred, const Image& gt) {
    if (pred.width != gt.width || pred.height != gt.height)
        throw std::invalid_argument("ssim: image size mismatch");
    ad::NoGradGuard guard;
    const Value a(std::vector<int>{pred.height, pred.width, 3}, pred.px);
    const Value b(std::vector<int>{gt.height, gt.width, 3}, gt.px);
    return ssim_value(a, b).item();
}

const char* bucket_name(Bucket b) {
    switch (b) {
        case Bucket::kNone: return "none";
        case Bucket::kSmall: return "small";
        case Bucket::kMedium: return "medium";
        default: return "large";
    }
}

Bucket bucket_of(double f) {
    if (f < 0.05) return Bucket::kNone;
    if (f < 0.30) return Bucket::kSmall;
    if (f < 0.55) return Bucket::kMedium;
    return Bucket::kLarge;
}

double overlap_fraction(const Camera& cam_a, const Camera& cam_b, const GaussianSet& g,
                        Bucket* bucket) {
    if (g.count() == 0) throw std::invalid_argument("overlap_fraction: empty GaussianSet");
    std::vector<Eigen::Vector3d> pts(g.count());
    for (int i = 0; i < g.count(); ++i)
        pts[i] = Eigen::Vector3d(g.mu[i * 3], g.mu[i * 3 + 1], g.mu[i * 3 + 2]);
    const ProjectionResult pa = project_points(cam_a, pts);
    const ProjectionResult pb = project_points(cam_b, pts);
    auto inside = [](const ProjectionResult& p, int i, int w, int h) {
        return p.valid[i] && p.uv[i].x() >= 0 && p.uv[i].x() <= w - 1 && p.uv[i].y() >= 0 &&
               p.uv[i].y() <= h - 1;
    };
    int in_a = 0, in_both = 0;
    for (int i = 0; i < g.count(); ++i) {
        if (!inside(pa, i, cam_a.width, cam_a.height)) continue;
        ++in_a;
        if (inside(pb, i, cam_b.width, cam_b.height)) ++in_both;
    }
    const double f = in_a == 0 ? 0.0 : static_cast<double>(in_both) / in_a;
    if (bucket) *bucket = bucket_of(f);
    return f;
}

}  // namespace splatpose
