#pragma once

#include "splatpose/camera.hpp"
#include "splatpose/gaussians.hpp"
#include "splatpose/image.hpp"
#include "splatpose/losses.hpp"

#include <string>
#include <vector>

namespace splatpose {

// Everything a scene needs is derived deterministically from the seed.
struct SceneSpec {
    int n_gaussians = 96;
    int width = 64;
    int height = 64;
    int n_views = 4;        // first n_input_views are inputs, the rest targets
    int n_input_views = 2;
    std::string bucket = "large";  // target overlap bucket for the input pair
    double z_min = 2.2;
    double z_max = 3.2;
    double scale_px_min = 2.0;  // projected footprint range in pixels
    double scale_px_max = 5.0;
    double opacity_min = 0.55;
    double opacity_max = 0.90;
    double color_min = 0.15;
    double color_max = 0.85;
    double focal_factor = 1.0;  // focal length = factor * width
    uint64_t seed = 0;

    static SceneSpec from_json(const std::string& path);
    void save_json(const std::string& path) const;
};

struct Scene {
    GaussianSet gauss;           // ground truth, canonical (view-0) frame
    std::vector<Camera> cams;    // per view; cams[0] has identity extrinsics
    std::vector<Image> views;    // rendered from gauss/cams
    std::vector<int> input_views;
    std::vector<int> target_views;
    double overlap = 0.0;        // input-pair overlap fraction
    Bucket bucket = Bucket::kNone;
};

struct Dataset {
    int width = 0;
    int height = 0;
    std::vector<Scene> scenes;
};

// Samples Gaussians in the reference frustum and cameras on an orbit whose
// spread is bisected until the input-pair overlap lands in the requested
// bucket. Throws if the bucket is unreachable within 50 iterations.
Scene generate_scene(const SceneSpec& spec);

// Directory layout: meta.json, scene_<k>/gaussians.json,
// scene_<k>/cam_<v>.json, scene_<k>/view_<v>.ppm.
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace splatpose
