#include "splatpose/train.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <thread>

namespace splatpose {

namespace {
using ad::Value;
using json = nlohmann::json;
}  // namespace

int max_threads() {
    const char* env = std::getenv("SPLATPOSE_THREADS");
    if (!env) return 1;
    const int n = std::atoi(env);
    return n >= 1 ? n : 1;
}

// Runs fn(i) for i in [0,n) on up to max_threads() workers with a contiguous
// deterministic partition.
static void parallel_for(int n, const std::function<void(int)>& fn) {
    const int workers = std::min(max_threads(), n);
    if (workers <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::atomic<int> failed{0};
    for (int wkr = 0; wkr < workers; ++wkr) {
        pool.emplace_back([&, wkr] {
            for (int i = wkr; i < n; i += workers) {
                try {
                    fn(i);
                } catch (...) {
                    failed.fetch_add(1);
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (failed.load() > 0) throw std::runtime_error("parallel task failed");
}

// ---- Adam ------------------------------------------------------------------

Adam::Adam(ParamStore& store, double lr, double beta1, double beta2, double eps,
           double weight_decay)
    : store_(store), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
    for (const auto& [name, v] : store_.items()) {
        m_.emplace_back(v.size(), 0.0);
        v_.emplace_back(v.size(), 0.0);
    }
}

double Adam::clip_global_norm(double max_norm) {
    double sq = 0.0;
    for (auto& [name, p] : store_.items()) {
        if (!p.has_grad()) continue;
        for (double g : p.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        for (auto& [name, p] : store_.items()) {
            if (!p.has_grad()) continue;
            for (double& g : p.grad_or_init()) g *= s;
        }
    }
    return norm;
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    size_t idx = 0;
    for (auto& [name, p] : store_.items()) {
        auto& m = m_[idx];
        auto& v = v_[idx];
        ++idx;
        if (!p.has_grad()) continue;
        const auto& g = p.grad();
        auto& data = p.mutable_data();
        for (size_t i = 0; i < data.size(); ++i) {
            double gi = g[i];
            if (wd_ != 0.0) gi += wd_ * data[i];
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
            data[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
        }
    }
}

void Adam::zero_grad() { store_.zero_grads(); }

// ---- loss ---------------------------------------------------------------------

LossParts total_loss(const DecoderState& state, const Scene& scene,
                     const std::vector<int>& input_views, const LossWeights& w) {
    if (scene.target_views.empty())
        throw std::invalid_argument("total_loss: scene has no target views");
    const int h = scene.views[0].height, wd = scene.views[0].width;
    Value l3d;
    int count = 0;
    for (int tv : scene.target_views) {
        const CameraValues cam = camera_to_values(scene.cams[tv]);
        const Value rendered = render_value(state.gauss, cam, wd, h, Eigen::Vector3d::Zero(),
                                            RenderMode::kGradient);
        const Value rgb = ad::slice(rendered, {0, 0, 0}, {h, wd, 3});
        const Value gt(std::vector<int>{h, wd, 3}, scene.views[tv].px);
        const Value term = loss_3d(rgb, gt, w);
        l3d = count == 0 ? term : ad::add(l3d, term);
        ++count;
    }
    l3d = ad::scale(l3d, 1.0 / count);

    std::vector<Value> gt_rays;
    gt_rays.reserve(state.rays.size());
    for (size_t i = 0; i < state.rays.size(); ++i)
        gt_rays.push_back(gt_rays_value(scene.cams[input_views[i]], state.ray_uv[i]));
    const Value lrays = loss_rays(state.rays, gt_rays);

    LossParts parts;
    parts.l3d = l3d.item();
    parts.lrays = lrays.item();
    parts.total = ad::add(ad::scale(l3d, w.lambda_3d), ad::scale(lrays, w.lambda_rays));
    return parts;
}

// ---- training -------------------------------------------------------------------

TrainResult train_loop(const Dataset& ds, Model& model, ParamStore& store, const LossWeights& w,
                       const TrainOptions& opt) {
    if (ds.scenes.empty()) throw std::invalid_argument("train_loop: empty dataset");
    Adam adam(store, opt.lr);
    TrainResult result;

    // Deterministic scene order per seed.
    std::vector<int> order(ds.scenes.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(opt.seed);
    for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
        std::swap(order[i], order[rng.uniform_int(0, i)]);

    std::ofstream csv;
    if (!opt.out_prefix.empty()) {
        csv.open(opt.out_prefix + "_loss.csv");
        csv << "step,loss_total,loss_3d,loss_rays\n";
    }

    size_t cursor = 0;
    for (int step = 0; step < opt.steps; ++step) {
        ad::Graph graph;
        double total = 0.0, sum3d = 0.0, sumrays = 0.0;
        {
            ad::GraphScope scope(graph);
            Value batch_loss;
            for (int b = 0; b < opt.batch; ++b) {
                const Scene& scene = ds.scenes[order[cursor]];
                cursor = (cursor + 1) % order.size();
                std::vector<Image> inputs;
                std::vector<Camera> metas;
                for (int iv : scene.input_views) {
                    inputs.push_back(scene.views[iv]);
                    metas.push_back(scene.cams[iv]);
                }
                std::vector<DecoderState> layers;
                const DecoderState state =
                    model.run(inputs, metas, opt.deep_supervision ? &layers : nullptr);
                Value scene_loss;
                if (opt.deep_supervision) {
                    for (size_t l = 0; l < layers.size(); ++l) {
                        LossParts parts = total_loss(layers[l], scene, scene.input_views, w);
                        scene_loss = l == 0 ? parts.total : ad::add(scene_loss, parts.total);
                        if (l + 1 == layers.size()) {
                            sum3d += parts.l3d;
                            sumrays += parts.lrays;
                        }
                    }
                    scene_loss = ad::scale(scene_loss, 1.0 / layers.size());
                } else {
                    LossParts parts = total_loss(state, scene, scene.input_views, w);
                    scene_loss = parts.total;
                    sum3d += parts.l3d;
                    sumrays += parts.lrays;
                }
                batch_loss = b == 0 ? scene_loss : ad::add(batch_loss, scene_loss);
            }
            batch_loss = ad::scale(batch_loss, 1.0 / opt.batch);
            total = batch_loss.item();
            if (!std::isfinite(total))
                throw std::runtime_error("train_loop: non-finite loss at step " +
                                         std::to_string(step));
            graph.backward(batch_loss);
        }
        adam.clip_global_norm(opt.clip_norm);
        adam.step();
        adam.zero_grad();

        result.curve.push_back({static_cast<double>(step), total, sum3d / opt.batch,
                                sumrays / opt.batch});
        if (csv.is_open())
            csv << step << "," << total << "," << sum3d / opt.batch << ","
                << sumrays / opt.batch << "\n";
        if (step == 0) result.initial_loss = total;
        result.final_loss = total;
        if (!opt.out_prefix.empty() && opt.ckpt_every > 0 && (step + 1) % opt.ckpt_every == 0)
            store.save(opt.out_prefix + "_step" + std::to_string(step + 1));
    }
    if (!opt.out_prefix.empty()) store.save(opt.out_prefix);
    return result;
}

// ---- evaluation -----------------------------------------------------------------

void MetricsReport::save_json(const std::string& path) const {
    json j;
    j["psnr"] = psnr;
    j["ssim"] = ssim;
    j["auc5"] = auc5;
    j["auc10"] = auc10;
    j["auc20"] = auc20;
    j["e_rot"] = e_rot;
    j["e_trans"] = e_trans;
    j["aligned"] = aligned;
    if (aligned) {
        j["psnr_aligned"] = psnr_aligned;
        j["ssim_aligned"] = ssim_aligned;
    }
    json bks = json::object();
    const Bucket order[4] = {Bucket::kNone, Bucket::kSmall, Bucket::kMedium, Bucket::kLarge};
    for (Bucket b : order) {
        const auto& agg = buckets[static_cast<int>(b)];
        if (agg.count == 0) continue;
        bks[bucket_name(b)] = {{"count", agg.count},
                               {"psnr", agg.psnr},
                               {"ssim", agg.ssim},
                               {"auc20", agg.auc20}};
    }
    j["buckets"] = bks;
    json scs = json::array();
    for (const auto& s : scenes) {
        json e;
        e["psnr"] = s.psnr;
        e["ssim"] = s.ssim;
        if (aligned) {
            e["psnr_aligned"] = s.psnr_aligned;
            e["ssim_aligned"] = s.ssim_aligned;
        }
        e["e_rot"] = s.pose.rot_deg;
        e["e_trans"] = s.pose.trans_deg;
        e["overlap"] = s.overlap;
        e["bucket"] = bucket_name(s.bucket);
        scs.push_back(e);
    }
    j["scenes"] = scs;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("MetricsReport::save_json: cannot open " + path);
    out << j.dump(2) << "\n";
}

MetricsReport evaluate(const Dataset& ds, const Model& model, const EvalOptions& opt) {
    if (ds.scenes.empty()) throw std::invalid_argument("evaluate: empty dataset");
    const int n = static_cast<int>(ds.scenes.size());
    std::vector<SceneMetrics> per_scene(n);
    std::vector<std::vector<PoseError>> per_scene_errors(n);

    parallel_for(n, [&](int si) {
        const Scene& scene = ds.scenes[si];
        std::vector<int> input_views = scene.input_views;
        std::vector<int> target_views = scene.target_views;
        if (opt.views > 0) {
            if (opt.views >= static_cast<int>(scene.cams.size()))
                throw std::invalid_argument("evaluate: --views exceeds available views");
            input_views.clear();
            for (int v = 0; v < opt.views; ++v) input_views.push_back(v);
            target_views.clear();
            for (int v = opt.views; v < static_cast<int>(scene.cams.size()); ++v)
                target_views.push_back(v);
            if (target_views.empty())
                throw std::invalid_argument("evaluate: no target views left");
        }
        for (int iv : input_views)
            if (scene.cams[iv].width == 0)
                throw std::invalid_argument("evaluate: missing ground-truth camera");

        std::vector<Image> inputs;
        std::vector<Camera> metas;
        for (int iv : input_views) {
            inputs.push_back(scene.views[iv]);
            metas.push_back(scene.cams[iv]);
        }
        DecoderState state;
        {
            ad::NoGradGuard guard;
            state = model.run(inputs, metas);
        }
        const GaussianSet gauss = values_to_gaussians(state.gauss);

        // pose of every non-reference input view
        std::vector<PoseError>& errors = per_scene_errors[si];
        for (size_t i = 1; i < input_views.size(); ++i) {
            Camera est;
            if (opt.oracle_rays) {
                ad::NoGradGuard guard;
                const RaySet gt_rays =
                    cameras_to_rays(scene.cams[input_views[i]], [&] {
                        std::vector<Eigen::Vector2d> uv;
                        const auto& u = state.ray_uv[i];
                        for (int r = 0; r < u.shape()[0]; ++r)
                            uv.emplace_back(u.data()[r * 2], u.data()[r * 2 + 1]);
                        return uv;
                    }());
                est = rays_to_camera(gt_rays,
                                     model.config().known_intrinsics
                                         ? std::optional<Eigen::Matrix3d>(scene.cams[input_views[i]].K)
                                         : std::nullopt,
                                     scene.cams[input_views[i]].width,
                                     scene.cams[input_views[i]].height);
            } else {
                est = values_to_camera(state.cams[i]);
            }
            errors.push_back(pose_error(est, scene.cams[input_views[i]]));
        }

        SceneMetrics& sm = per_scene[si];
        double acc_psnr = 0, acc_ssim = 0, acc_psnr_a = 0, acc_ssim_a = 0;
        for (int tv : target_views) {
            const Camera& cam = scene.cams[tv];
            const Image rendered = render(gauss, cam, cam.width, cam.height).rgb;
            acc_psnr += psnr(rendered, scene.views[tv]);
            acc_ssim += ssim(rendered, scene.views[tv]);
            if (opt.align) {
                const Camera refined =
                    align_target_pose(gauss, scene.views[tv], cam, opt.align_opts);
                const Image re = render(gauss, refined, cam.width, cam.height).rgb;
                acc_psnr_a += psnr(re, scene.views[tv]);
                acc_ssim_a += ssim(re, scene.views[tv]);
            }
        }
        const double nt = static_cast<double>(target_views.size());
        sm.psnr = acc_psnr / nt;
        sm.ssim = acc_ssim / nt;
        if (opt.align) {
            sm.psnr_aligned = acc_psnr_a / nt;
            sm.ssim_aligned = acc_ssim_a / nt;
        }
        if (!errors.empty()) sm.pose = errors[0];
        sm.overlap = overlap_fraction(scene.cams[input_views[0]], scene.cams[input_views[1]],
                                      scene.gauss, &sm.bucket);
    });

    MetricsReport rep;
    rep.aligned = opt.align;
    rep.scenes = per_scene;
    std::vector<PoseError> all_errors;
    for (auto& es : per_scene_errors)
        for (auto& e : es) all_errors.push_back(e);
    const auto auc = pose_auc(all_errors, {5.0, 10.0, 20.0});
    rep.auc5 = auc[0];
    rep.auc10 = auc[1];
    rep.auc20 = auc[2];
    for (const auto& e : all_errors) {
        rep.e_rot += e.rot_deg;
        rep.e_trans += e.trans_deg;
    }
    rep.e_rot /= all_errors.size();
    rep.e_trans /= all_errors.size();
    for (int si = 0; si < n; ++si) {
        rep.psnr += per_scene[si].psnr;
        rep.ssim += per_scene[si].ssim;
        rep.psnr_aligned += per_scene[si].psnr_aligned;
        rep.ssim_aligned += per_scene[si].ssim_aligned;
        auto& agg = rep.buckets[static_cast<int>(per_scene[si].bucket)];
        agg.count++;
        agg.psnr += per_scene[si].psnr;
        agg.ssim += per_scene[si].ssim;
    }
    rep.psnr /= n;
    rep.ssim /= n;
    rep.psnr_aligned /= n;
    rep.ssim_aligned /= n;
    for (int b = 0; b < 4; ++b) {
        auto& agg = rep.buckets[b];
        if (agg.count == 0) continue;
        agg.psnr /= agg.count;
        agg.ssim /= agg.count;
        std::vector<PoseError> be;
        for (int si = 0; si < n; ++si)
            if (static_cast<int>(per_scene[si].bucket) == b)
                for (auto& e : per_scene_errors[si]) be.push_back(e);
        if (!be.empty()) agg.auc20 = pose_auc(be, {20.0})[0];
    }
    return rep;
}

}  // namespace splatpose
