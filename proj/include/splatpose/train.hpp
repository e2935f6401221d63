#pragma once

#include "splatpose/decoder.hpp"
#include "splatpose/losses.hpp"
#include "splatpose/scenegen.hpp"

#include <array>
#include <string>
#include <vector>

namespace splatpose {

class Adam {
  public:
    Adam(ParamStore& store, double lr, double beta1 = 0.9, double beta2 = 0.95,
         double eps = 1e-8, double weight_decay = 0.0);
    // Scales grads so their global norm is at most max_norm; returns the
    // pre-clip norm.
    double clip_global_norm(double max_norm);
    void step();
    void zero_grad();
    void set_lr(double lr) { lr_ = lr; }

  private:
    ParamStore& store_;
    double lr_, beta1_, beta2_, eps_, wd_;
    int64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

struct LossParts {
    ad::Value total;
    double l3d = 0.0;
    double lrays = 0.0;
};

// Paper-weighted loss over one scene: render loss on the target views (with
// their ground-truth poses) plus the ray loss on the input views.
LossParts total_loss(const DecoderState& state, const Scene& scene,
                     const std::vector<int>& input_views, const LossWeights& w);

struct TrainOptions {
    int steps = 500;
    double lr = 2e-3;
    int batch = 1;
    uint64_t seed = 0;
    int ckpt_every = 0;       // 0: final checkpoint only
    std::string out_prefix;   // empty: no files written
    bool deep_supervision = false;
    double clip_norm = 1.0;
};

struct TrainResult {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::vector<std::array<double, 4>> curve;  // step, total, l3d, lrays
};

TrainResult train_loop(const Dataset& ds, Model& model, ParamStore& store, const LossWeights& w,
                       const TrainOptions& opt);

struct SceneMetrics {
    double psnr = 0.0, ssim = 0.0;
    double psnr_aligned = 0.0, ssim_aligned = 0.0;
    PoseError pose;
    double overlap = 0.0;
    Bucket bucket = Bucket::kNone;
};

struct MetricsReport {
    bool aligned = false;
    double psnr = 0.0, ssim = 0.0;
    double psnr_aligned = 0.0, ssim_aligned = 0.0;
    double auc5 = 0.0, auc10 = 0.0, auc20 = 0.0;
    double e_rot = 0.0, e_trans = 0.0;
    struct BucketAgg {
        int count = 0;
        double psnr = 0.0, ssim = 0.0, auc20 = 0.0;
    };
    BucketAgg buckets[4];  // indexed by Bucket
    std::vector<SceneMetrics> scenes;
    void save_json(const std::string& path) const;
};

struct EvalOptions {
    bool align = false;
    int views = 0;           // 0: the scene's declared input views
    bool oracle_rays = false;  // bypass the network with ground-truth rays
    AlignOptions align_opts;
};

MetricsReport evaluate(const Dataset& ds, const Model& model, const EvalOptions& opt);

// Worker cap from SPLATPOSE_THREADS (>=1).
int max_threads();

}  // namespace splatpose
