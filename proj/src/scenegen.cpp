#include "splatpose/scenegen.hpp"

#include "splatpose/render.hpp"
#include "splatpose/rng.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace splatpose {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

Camera orbit_camera(const Eigen::Vector3d& target, double radius, double azimuth,
                    double elevation, const Eigen::Matrix3d& k, int w, int h) {
    const Eigen::Vector3d dir(std::sin(azimuth) * std::cos(elevation), std::sin(elevation),
                              -std::cos(azimuth) * std::cos(elevation));
    const Eigen::Vector3d c = target + radius * dir;
    const Eigen::Vector3d z_row = (target - c).normalized();
    Eigen::Vector3d x_row = Eigen::Vector3d(0, 1, 0).cross(z_row);
    if (x_row.norm() < 1e-9) x_row = Eigen::Vector3d(1, 0, 0);
    x_row.normalize();
    const Eigen::Vector3d y_row = z_row.cross(x_row);
    Camera cam;
    cam.K = k;
    cam.width = w;
    cam.height = h;
    cam.R.row(0) = x_row;
    cam.R.row(1) = y_row;
    cam.R.row(2) = z_row;
    cam.t = -cam.R * c;
    return cam;
}

std::pair<double, double> bucket_range(const std::string& name) {
    if (name == "small") return {0.05, 0.30};
    if (name == "medium") return {0.30, 0.55};
    if (name == "large") return {0.55, 1.0 + 1e-9};
    throw std::invalid_argument("SceneSpec: unknown bucket '" + name + "'");
}

}  // namespace

SceneSpec SceneSpec::from_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("SceneSpec::from_json: cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw std::runtime_error("SceneSpec::from_json: " + path + ": " + e.what());
    }
    SceneSpec s;
    s.n_gaussians = j.value("n_gaussians", s.n_gaussians);
    s.width = j.value("width", s.width);
    s.height = j.value("height", s.height);
    s.n_views = j.value("n_views", s.n_views);
    s.n_input_views = j.value("n_input_views", s.n_input_views);
    s.bucket = j.value("bucket", s.bucket);
    s.z_min = j.value("z_min", s.z_min);
    s.z_max = j.value("z_max", s.z_max);
    s.scale_px_min = j.value("scale_px_min", s.scale_px_min);
    s.scale_px_max = j.value("scale_px_max", s.scale_px_max);
    s.opacity_min = j.value("opacity_min", s.opacity_min);
    s.opacity_max = j.value("opacity_max", s.opacity_max);
    s.color_min = j.value("color_min", s.color_min);
    s.color_max = j.value("color_max", s.color_max);
    s.focal_factor = j.value("focal_factor", s.focal_factor);
    s.seed = j.value("seed", s.seed);
    return s;
}

void SceneSpec::save_json(const std::string& path) const {
    json j;
    j["n_gaussians"] = n_gaussians;
    j["width"] = width;
    j["height"] = height;
    j["n_views"] = n_views;
    j["n_input_views"] = n_input_views;
    j["bucket"] = bucket;
    j["z_min"] = z_min;
    j["z_max"] = z_max;
    j["scale_px_min"] = scale_px_min;
    j["scale_px_max"] = scale_px_max;
    j["opacity_min"] = opacity_min;
    j["opacity_max"] = opacity_max;
    j["color_min"] = color_min;
    j["color_max"] = color_max;
    j["focal_factor"] = focal_factor;
    j["seed"] = seed;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("SceneSpec::save_json: cannot open " + path);
    out << j.dump(2) << "\n";
}

Scene generate_scene(const SceneSpec& spec) {
    if (spec.n_gaussians < 1 || spec.n_views < 2 || spec.n_input_views < 2 ||
        spec.n_input_views > spec.n_views)
        throw std::invalid_argument("generate_scene: invalid spec counts");
    Rng rng(spec.seed);
    const double f = spec.focal_factor * spec.width;
    Eigen::Matrix3d k = Eigen::Matrix3d::Identity();
    k(0, 0) = f;
    k(1, 1) = f;
    k(0, 2) = (spec.width - 1) * 0.5;
    k(1, 2) = (spec.height - 1) * 0.5;
    const Eigen::Matrix3d kinv = k.inverse();

    Scene scene;
    GaussianSet& g = scene.gauss;
    g.sh_degree = 0;
    for (int i = 0; i < spec.n_gaussians; ++i) {
        const double z = rng.uniform(spec.z_min, spec.z_max);
        const double u = rng.uniform(0.12 * spec.width, 0.88 * spec.width);
        const double v = rng.uniform(0.12 * spec.height, 0.88 * spec.height);
        const Eigen::Vector3d mu = kinv * Eigen::Vector3d(u, v, 1.0) * z;
        for (int a = 0; a < 3; ++a) g.mu.push_back(mu(a));
        Eigen::Vector4d q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
        q.normalize();
        for (int a = 0; a < 4; ++a) g.rot.push_back(q(a));
        const double base_scale = rng.uniform(spec.scale_px_min, spec.scale_px_max) * z / f;
        for (int a = 0; a < 3; ++a)
            g.scale_log.push_back(std::log(base_scale) + rng.uniform(-0.3, 0.3));
        const double op = rng.uniform(spec.opacity_min, spec.opacity_max);
        g.opacity_logit.push_back(std::log(op / (1.0 - op)));
        for (int a = 0; a < 3; ++a)
            g.sh.push_back((rng.uniform(spec.color_min, spec.color_max) - 0.5) / kSh0);
    }

    Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
    for (int i = 0; i < g.count(); ++i)
        centroid += Eigen::Vector3d(g.mu[i * 3], g.mu[i * 3 + 1], g.mu[i * 3 + 2]);
    centroid /= g.count();
    const double radius = centroid.norm();

    Camera ref;
    ref.K = k;
    ref.width = spec.width;
    ref.height = spec.height;
    scene.cams.push_back(ref);

    // Bisect the azimuth spread so the input pair lands in the target bucket.
    const auto [lo, hi] = bucket_range(spec.bucket);
    const double mid_target = 0.5 * (lo + std::min(hi, 1.0));
    double th_lo = 0.005, th_hi = 2.4;
    double theta = 0.0;
    bool found = false;
    for (int it = 0; it < 50; ++it) {
        theta = 0.5 * (th_lo + th_hi);
        const Camera cand = orbit_camera(centroid, radius, theta, 0.0, k, spec.width, spec.height);
        const double ov = overlap_fraction(ref, cand, g);
        if (ov >= lo && ov < hi && std::abs(ov - mid_target) < 0.12) {
            found = true;
            break;
        }
        if (ov > mid_target) {
            th_lo = theta;  // increase spread to lower the overlap
        } else {
            th_hi = theta;
        }
    }
    if (!found) {
        // accept any spread inside the bucket
        const Camera cand = orbit_camera(centroid, radius, theta, 0.0, k, spec.width, spec.height);
        const double ov = overlap_fraction(ref, cand, g);
        if (!(ov >= lo && ov < hi))
            throw std::runtime_error("generate_scene: bucket '" + spec.bucket +
                                     "' unreachable within 50 bisection iterations");
    }
    scene.cams.push_back(orbit_camera(centroid, radius, theta, 0.0, k, spec.width, spec.height));

    // Extra input views (if any) and targets sit inside the input arc.
    for (int v = 2; v < spec.n_views; ++v) {
        const double az = theta * rng.uniform(0.2, 0.8);
        const double el = rng.uniform(-0.06, 0.06);
        scene.cams.push_back(orbit_camera(centroid, radius, az, el, k, spec.width, spec.height));
    }

    scene.overlap = overlap_fraction(scene.cams[0], scene.cams[1], g, &scene.bucket);
    for (int v = 0; v < spec.n_views; ++v) {
        scene.views.push_back(render(g, scene.cams[v], spec.width, spec.height).rgb);
        if (v < spec.n_input_views) {
            scene.input_views.push_back(v);
        } else {
            scene.target_views.push_back(v);
        }
    }
    return scene;
}

void save_dataset(const Dataset& ds, const std::string& dir) {
    fs::create_directories(dir);
    json meta;
    meta["width"] = ds.width;
    meta["height"] = ds.height;
    json scenes = json::array();
    for (size_t s = 0; s < ds.scenes.size(); ++s) {
        const Scene& sc = ds.scenes[s];
        const std::string sdir = "scene_" + std::to_string(s);
        fs::create_directories(fs::path(dir) / sdir);
        save_gaussians_json(sc.gauss, (fs::path(dir) / sdir / "gaussians.json").string());
        for (size_t v = 0; v < sc.cams.size(); ++v) {
            save_camera_json(sc.cams[v],
                             (fs::path(dir) / sdir / ("cam_" + std::to_string(v) + ".json")).string());
            write_ppm(sc.views[v],
                      (fs::path(dir) / sdir / ("view_" + std::to_string(v) + ".ppm")).string());
        }
        json entry;
        entry["dir"] = sdir;
        entry["n_views"] = sc.cams.size();
        entry["input_views"] = sc.input_views;
        entry["target_views"] = sc.target_views;
        entry["overlap"] = sc.overlap;
        entry["bucket"] = bucket_name(sc.bucket);
        scenes.push_back(entry);
    }
    meta["scenes"] = scenes;
    std::ofstream out(fs::path(dir) / "meta.json");
    if (!out) throw std::runtime_error("save_dataset: cannot open " + dir + "/meta.json");
    out << meta.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
    const std::string meta_path = (fs::path(dir) / "meta.json").string();
    std::ifstream in(meta_path);
    if (!in) throw std::runtime_error("load_dataset: missing " + meta_path);
    json meta;
    try {
        in >> meta;
    } catch (const json::parse_error& e) {
        throw std::runtime_error("load_dataset: " + meta_path + ": " + e.what());
    }
    Dataset ds;
    ds.width = meta.at("width").get<int>();
    ds.height = meta.at("height").get<int>();
    for (const auto& entry : meta.at("scenes")) {
        Scene sc;
        const std::string sdir = (fs::path(dir) / entry.at("dir").get<std::string>()).string();
        sc.gauss = load_gaussians_json(sdir + "/gaussians.json");
        const int nv = entry.at("n_views").get<int>();
        for (int v = 0; v < nv; ++v) {
            sc.cams.push_back(load_camera_json(sdir + "/cam_" + std::to_string(v) + ".json"));
            sc.views.push_back(read_ppm(sdir + "/view_" + std::to_string(v) + ".ppm"));
        }
        sc.input_views = entry.at("input_views").get<std::vector<int>>();
        sc.target_views = entry.at("target_views").get<std::vector<int>>();
        sc.overlap = entry.value("overlap", 0.0);
        sc.bucket = bucket_of(sc.overlap);
        ds.scenes.push_back(std::move(sc));
    }
    return ds;
}

}  // namespace splatpose
