#include "splatpose/camera.hpp"
#include "splatpose/decoder.hpp"
#include "splatpose/image.hpp"
#include "splatpose/losses.hpp"
#include "splatpose/render.hpp"
#include "splatpose/rng.hpp"
#include "splatpose/scenegen.hpp"
#include "splatpose/train.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

namespace {

using namespace splatpose;
using json = nlohmann::json;

Camera random_camera(Rng& rng, int width, int height) {
    Camera cam;
    const double f = rng.uniform(0.6, 1.6) * width;
    cam.K = Eigen::Matrix3d::Identity();
    cam.K(0, 0) = f;
    cam.K(1, 1) = f * rng.uniform(0.85, 1.15);
    cam.K(0, 2) = width * rng.uniform(0.4, 0.6);
    cam.K(1, 2) = height * rng.uniform(0.4, 0.6);
    cam.width = width;
    cam.height = height;
    const Eigen::Vector3d axis =
        Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()).normalized();
    const double angle = rng.uniform(0.0, 3.0);
    cam.R = Eigen::AngleAxisd(angle, axis).toRotationMatrix();
    cam.t = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
    return cam;
}

std::vector<Eigen::Vector2d> random_uv(Rng& rng, int n, int width, int height) {
    std::vector<Eigen::Vector2d> uv;
    uv.reserve(n);
    for (int i = 0; i < n; ++i)
        uv.emplace_back(rng.uniform(0.0, width - 1.0), rng.uniform(0.0, height - 1.0));
    return uv;
}

struct RoundTripStats {
    double max_rot = 0.0, max_trans = 0.0, max_k = 0.0;
};

RoundTripStats roundtrip_run(uint64_t seed, int count, int rays_per_cam,
                             const std::string& dump_dir) {
    Rng rng(seed);
    RoundTripStats st;
    for (int i = 0; i < count; ++i) {
        const Camera gt = random_camera(rng, 64, 64);
        const RaySet rays = cameras_to_rays(gt, random_uv(rng, rays_per_cam, 64, 64));
        if (!dump_dir.empty() && i == 0) {
            std::filesystem::create_directories(dump_dir);
            save_rays_json(rays, dump_dir + "/rays.json");
            save_camera_json(gt, dump_dir + "/cam_gt.json");
        }
        const Camera rec = rays_to_camera(rays, std::nullopt, gt.width, gt.height);
        const PoseError pe = pose_error(rec, gt);
        st.max_rot = std::max(st.max_rot, pe.rot_deg * M_PI / 180.0);
        st.max_trans = std::max(st.max_trans, (rec.t - gt.t).norm());
        double kerr = 0.0;
        for (int a = 0; a < 3; ++a)
            for (int b = a; b < 3; ++b) {
                const double denom = std::max(1.0, std::abs(gt.K(a, b)));
                kerr = std::max(kerr, std::abs(rec.K(a, b) - gt.K(a, b)) / denom);
            }
        st.max_k = std::max(st.max_k, kerr);
    }
    return st;
}

DecoderConfig config_for_dataset(const Dataset& ds, const std::string& config_path) {
    DecoderConfig cfg;
    if (!config_path.empty()) {
        cfg = DecoderConfig::from_json(config_path);
    } else {
        cfg.img_width = ds.width;
        cfg.img_height = ds.height;
    }
    if (cfg.img_width != ds.width || cfg.img_height != ds.height)
        throw std::runtime_error("config image size does not match the dataset");
    return cfg;
}

int run_ablate(const std::string& data_dir, const std::string& out_dir, int steps,
               uint64_t seed) {
    const Dataset ds = load_dataset(data_dir);
    struct Variant {
        std::string name;
        void (*tweak)(DecoderConfig&);
    };
    const Variant variants[] = {
        {"refray", [](DecoderConfig&) {}},
        {"6dpose", [](DecoderConfig& c) { c.camera_head = CameraHead::k6DPose; }},
        {"rays_on_pixel", [](DecoderConfig& c) { c.camera_head = CameraHead::kRaysOnPixel; }},
        {"no_camdfa", [](DecoderConfig& c) { c.use_camdfa = false; }},
        {"gt_pose", [](DecoderConfig& c) { c.gt_pose_input = true; }},
    };
    std::filesystem::create_directories(out_dir);
    json report = json::object();
    std::cout << "variant        auc5   auc10  auc20  psnr   ssim\n";
    for (const auto& v : variants) {
        DecoderConfig cfg = config_for_dataset(ds, "");
        v.tweak(cfg);
        ParamStore store;
        Model model(cfg, store, seed);
        LossWeights w;
        TrainOptions topt;
        topt.steps = steps;
        topt.seed = seed;
        topt.out_prefix = out_dir + "/" + v.name;
        model.config().save_json(out_dir + "/" + v.name + "_config.json");
        train_loop(ds, model, store, w, topt);
        EvalOptions eopt;
        const MetricsReport rep = evaluate(ds, model, eopt);
        rep.save_json(out_dir + "/" + v.name + "_metrics.json");
        report[v.name] = {{"auc5", rep.auc5},   {"auc10", rep.auc10}, {"auc20", rep.auc20},
                          {"psnr", rep.psnr},   {"ssim", rep.ssim},   {"e_rot", rep.e_rot},
                          {"e_trans", rep.e_trans}};
        std::printf("%-14s %.3f  %.3f  %.3f  %.2f  %.3f\n", v.name.c_str(), rep.auc5, rep.auc10,
                    rep.auc20, rep.psnr, rep.ssim);
    }
    std::ofstream out(out_dir + "/ablation.json");
    out << report.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"splatpose: pose-free Gaussian reconstruction tools"};
    app.require_subcommand(1);

    // scenegen
    auto* sg = app.add_subcommand("scenegen", "generate a synthetic multi-view dataset");
    std::string sg_spec, sg_out, sg_buckets;
    int sg_scenes = 4;
    uint64_t sg_seed = 0;
    sg->add_option("--spec", sg_spec, "scene spec JSON (defaults used when omitted)");
    sg->add_option("--out", sg_out, "output dataset directory")->required();
    sg->add_option("--scenes", sg_scenes, "number of scenes");
    sg->add_option("--seed", sg_seed, "base seed");
    sg->add_option("--buckets", sg_buckets, "comma list cycled across scenes");

    // train
    auto* tr = app.add_subcommand("train", "train the decoder on a dataset");
    std::string tr_data, tr_out, tr_config;
    int tr_steps = 500, tr_batch = 1, tr_ckpt_every = 0;
    double tr_lr = 2e-3;
    uint64_t tr_seed = 0;
    bool tr_deep = false;
    tr->add_option("--data", tr_data)->required();
    tr->add_option("--out", tr_out, "checkpoint path prefix")->required();
    tr->add_option("--config", tr_config, "decoder config JSON");
    tr->add_option("--steps", tr_steps);
    tr->add_option("--lr", tr_lr);
    tr->add_option("--batch", tr_batch);
    tr->add_option("--seed", tr_seed);
    tr->add_option("--ckpt-every", tr_ckpt_every);
    tr->add_flag("--deep-supervision", tr_deep);

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string ev_ckpt, ev_data, ev_out;
    bool ev_align = false, ev_oracle = false;
    int ev_views = 0, ev_align_iters = 100;
    uint64_t ev_seed = 0;
    ev->add_option("--ckpt", ev_ckpt, "checkpoint prefix")->required();
    ev->add_option("--data", ev_data)->required();
    ev->add_option("--out", ev_out, "metrics JSON path")->required();
    ev->add_flag("--align", ev_align, "evaluation-time pose alignment (-A)");
    ev->add_option("--views", ev_views, "override input view count");
    ev->add_flag("--oracle-rays", ev_oracle, "bypass the network with ground-truth rays");
    ev->add_option("--align-iters", ev_align_iters);
    ev->add_option("--seed", ev_seed);

    // raysolve
    auto* rs = app.add_subcommand("raysolve", "recover a camera from a ray file");
    std::string rs_rays, rs_out;
    std::vector<double> rs_k;
    int rs_w = 0, rs_h = 0;
    rs->add_option("--rays", rs_rays)->required();
    rs->add_option("--out", rs_out)->required();
    rs->add_option("--K", rs_k, "known intrinsics fx,fy,cx,cy")->expected(4);
    rs->add_option("--width", rs_w);
    rs->add_option("--height", rs_h);

    // render
    auto* rd = app.add_subcommand("render", "render Gaussians from a camera");
    std::string rd_g, rd_cam, rd_out, rd_depth;
    int rd_w = 0, rd_h = 0;
    rd->add_option("--gaussians", rd_g)->required();
    rd->add_option("--camera", rd_cam)->required();
    rd->add_option("--out", rd_out)->required();
    rd->add_option("--depth", rd_depth, "optional 16-bit PGM depth output");
    rd->add_option("--width", rd_w);
    rd->add_option("--height", rd_h);

    // roundtrip
    auto* rt = app.add_subcommand("roundtrip", "random-camera ray round-trip self check");
    uint64_t rt_seed = 0;
    int rt_count = 100, rt_rays = 16;
    std::string rt_dump;
    rt->add_option("--seed", rt_seed);
    rt->add_option("--count", rt_count);
    rt->add_option("--rays", rt_rays);
    rt->add_option("--dump", rt_dump, "directory for rays/camera JSON of the first sample");

    // ablate
    auto* ab = app.add_subcommand("ablate", "train + evaluate the model variants");
    std::string ab_data, ab_out;
    int ab_steps = 300;
    uint64_t ab_seed = 0;
    ab->add_option("--data", ab_data)->required();
    ab->add_option("--out", ab_out)->required();
    ab->add_option("--steps", ab_steps);
    ab->add_option("--seed", ab_seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);  // prints usage/error text
        return e.get_exit_code() == 0 ? 0 : 1;
    }

    try {
        if (*sg) {
            SceneSpec spec;
            if (!sg_spec.empty()) spec = SceneSpec::from_json(sg_spec);
            std::vector<std::string> buckets;
            if (!sg_buckets.empty()) {
                std::stringstream ss(sg_buckets);
                std::string item;
                while (std::getline(ss, item, ',')) buckets.push_back(item);
            }
            Dataset ds;
            ds.width = spec.width;
            ds.height = spec.height;
            ds.scenes.resize(sg_scenes);
            std::vector<SceneSpec> specs(sg_scenes, spec);
            for (int i = 0; i < sg_scenes; ++i) {
                specs[i].seed = sg_seed + static_cast<uint64_t>(i);
                if (!buckets.empty()) specs[i].bucket = buckets[i % buckets.size()];
            }
            std::atomic<int> next{0};
            const int workers = std::min(max_threads(), sg_scenes);
            std::vector<std::thread> pool;
            for (int wk = 0; wk < workers; ++wk)
                pool.emplace_back([&] {
                    for (int i = next.fetch_add(1); i < sg_scenes; i = next.fetch_add(1))
                        ds.scenes[i] = generate_scene(specs[i]);
                });
            for (auto& t : pool) t.join();
            save_dataset(ds, sg_out);
            std::cout << "wrote " << sg_scenes << " scenes to " << sg_out << "\n";
        } else if (*tr) {
            const Dataset ds = load_dataset(tr_data);
            DecoderConfig cfg = config_for_dataset(ds, tr_config);
            ParamStore store;
            Model model(cfg, store, tr_seed);
            model.config().save_json(tr_out + "_config.json");
            LossWeights w;
            TrainOptions opt;
            opt.steps = tr_steps;
            opt.lr = tr_lr;
            opt.batch = tr_batch;
            opt.seed = tr_seed;
            opt.ckpt_every = tr_ckpt_every;
            opt.out_prefix = tr_out;
            opt.deep_supervision = tr_deep;
            const TrainResult res = train_loop(ds, model, store, w, opt);
            std::cout << "loss " << res.initial_loss << " -> " << res.final_loss << " over "
                      << tr_steps << " steps\n";
        } else if (*ev) {
            const Dataset ds = load_dataset(ev_data);
            DecoderConfig cfg = DecoderConfig::from_json(ev_ckpt + "_config.json");
            ParamStore store;
            Model model(cfg, store, ev_seed);
            store.load(ev_ckpt);
            EvalOptions opt;
            opt.align = ev_align;
            opt.views = ev_views;
            opt.oracle_rays = ev_oracle;
            opt.align_opts.iters = ev_align_iters;
            const MetricsReport rep = evaluate(ds, model, opt);
            rep.save_json(ev_out);
            std::printf("psnr %.3f ssim %.4f auc5 %.3f auc10 %.3f auc20 %.3f e_rot %.3f e_trans %.3f\n",
                        rep.psnr, rep.ssim, rep.auc5, rep.auc10, rep.auc20, rep.e_rot, rep.e_trans);
            if (ev_align)
                std::printf("aligned: psnr %.3f ssim %.4f\n", rep.psnr_aligned, rep.ssim_aligned);
        } else if (*rs) {
            const RaySet rays = load_rays_json(rs_rays);
            std::optional<Eigen::Matrix3d> k;
            if (!rs_k.empty()) {
                Eigen::Matrix3d km = Eigen::Matrix3d::Identity();
                km(0, 0) = rs_k[0];
                km(1, 1) = rs_k[1];
                km(0, 2) = rs_k[2];
                km(1, 2) = rs_k[3];
                k = km;
            }
            const Camera cam = rays_to_camera(rays, k, rs_w, rs_h);
            save_camera_json(cam, rs_out);
            std::cout << "solved camera written to " << rs_out << "\n";
        } else if (*rd) {
            const GaussianSet g = load_gaussians_json(rd_g);
            const Camera cam = load_camera_json(rd_cam);
            const int w = rd_w > 0 ? rd_w : cam.width;
            const int h = rd_h > 0 ? rd_h : cam.height;
            if (w <= 0 || h <= 0) throw std::runtime_error("render: no image size available");
            const RenderOutput out = render(g, cam, w, h);
            write_ppm(out.rgb, rd_out);
            if (!rd_depth.empty()) write_pgm16(out.depth, rd_depth);
            std::cout << "rendered " << w << "x" << h << " to " << rd_out << "\n";
        } else if (*rt) {
            const RoundTripStats st = roundtrip_run(rt_seed, rt_count, rt_rays, rt_dump);
            std::printf("max rotation error  %.3e rad\n", st.max_rot);
            std::printf("max translation err %.3e\n", st.max_trans);
            std::printf("max intrinsics err  %.3e (relative)\n", st.max_k);
            if (st.max_rot > 1e-6 || st.max_trans > 1e-6 || st.max_k > 1e-6) {
                std::cerr << "round-trip accuracy above 1e-6\n";
                return 2;
            }
        } else if (*ab) {
            return run_ablate(ab_data, ab_out, ab_steps, ab_seed);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
