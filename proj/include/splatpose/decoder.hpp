#pragma once

#include "splatpose/autodiff.hpp"
#include "splatpose/camera.hpp"
#include "splatpose/image.hpp"
#include "splatpose/params.hpp"
#include "splatpose/render.hpp"

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace splatpose {

enum class CameraHead { kRefRay, kRaysOnPixel, k6DPose };

struct DecoderConfig {
    int layers = 4;
    int dim = 64;
    int n_3d = 128;
    int n_cam = 32;
    int heads = 4;
    int n_sample = 4;
    int views = 2;
    int patch = 8;
    int enc_blocks = 2;
    int ffn_mult = 4;
    int k_down = 64;  // efficient self-attention key count (clamped to n_3d)
    int sh_degree = 0;
    int img_width = 64;
    int img_height = 64;
    bool known_intrinsics = true;
    bool solve_in_graph = true;    // differentiable camera solve (known-K only)
    bool normalize_fuse = false;   // normalize view-fusion weights (ablation flag)
    bool use_camdfa = true;        // false: direct regression from the encoder
    bool gt_pose_input = false;    // feed ground-truth poses instead of solving
    CameraHead camera_head = CameraHead::kRefRay;

    int feat_w() const { return img_width / patch; }
    int feat_h() const { return img_height / patch; }
    int gauss_channels() const { return 11 + 3 * (sh_degree + 1) * (sh_degree + 1); }
    void check() const;  // throws on inconsistent settings

    static DecoderConfig from_json(const std::string& path);
    void save_json(const std::string& path) const;
};

struct FeatureMaps {
    int hf = 0, wf = 0, dim = 0;
    std::vector<ad::Value> feat;  // per view, (hf, wf, dim)
};

struct DecoderState {
    ad::Value q3d;                   // (n_3d, dim)
    std::vector<ad::Value> qcam;     // per view, (n_cam, dim)
    GaussianValues gauss;            // current Gaussians
    std::vector<ad::Value> rays;     // per view, (n_cam, 6), unit direction part
    std::vector<ad::Value> ray_uv;   // per view, (n_cam, 2) pixel points the rays target
    std::vector<CameraValues> cams;  // per view; cams[0] pinned to identity extrinsics
    std::vector<int> cam_subset;     // FPS indices of camera reference points
    int solve_fallbacks = 0;
};

// Greedy farthest-point sampling. Ties on the max-min distance break toward
// the lowest index; deterministic.
std::vector<int> fps(const std::vector<Eigen::Vector3d>& points, int k, int seed_index);

// ---- building blocks (wired to a ParamStore) -------------------------------

struct Linear {
    ad::Value w, b;  // (in,out), (out)
    ad::Value operator()(const ad::Value& x) const { return ad::add(ad::matmul(x, w), b); }
};

struct Mlp {
    Linear l1, l2;
    ad::Value operator()(const ad::Value& x) const { return l2(ad::gelu(l1(x))); }
};

struct MultiHeadAttention {
    int heads = 1;
    int dim = 0;
    Linear wq, wk, wv, wo;  // wo zero-initialized
    ad::Value attend(const ad::Value& q_tokens, const ad::Value& kv_tokens) const;
};

struct SelfAttentionBlock {
    MultiHeadAttention attn;
    Mlp ffn;  // second layer zero-initialized
    ad::Value operator()(const ad::Value& x) const;
    // Keys/values restricted to the given token rows.
    ad::Value with_keys(const ad::Value& x, const std::vector<int>& key_rows) const;
};

struct DfaWeights {
    int heads = 1;
    int n_sample = 4;
    Mlp offset_mlp;     // dim -> heads*n_sample*2, zero-initialized output
    Mlp weight_mlp;     // dim -> heads*n_sample sample logits, zero-initialized output
    Linear value_proj;  // dim -> dim
    Linear out_proj;    // dim -> dim, zero-initialized
};

// Deformable cross-attention: offsets/weights come from `driver`, features
// are sampled around ref_grid (grid-index units) and the projected result is
// residual-added onto `base`. Queries with valid=0 keep their base value.
ad::Value deformable_attention(const DfaWeights& w, const ad::Value& base, const ad::Value& driver,
                               const ad::Value& ref_grid, const std::vector<char>& valid,
                               const ad::Value& feat_grid);

// adaLN modulation: LayerNorm(q3d)*(1+scale)+shift with (scale,shift) from
// the mean-pooled camera queries.
ad::Value camera_modulation(const Mlp& mod_mlp, const ad::Value& q3d, const ad::Value& qcam);

// Eq-7 style fusion: sum_i sigmoid(MLP(Q_i)) * Q_i, optionally normalized.
ad::Value fuse_views(const Mlp& fuse_mlp, const std::vector<ad::Value>& q_views, bool normalize);

// ---- the model ------------------------------------------------------------

class Model {
  public:
    // Registers all parameters in `store` (deterministically from seed).
    Model(const DecoderConfig& cfg, ParamStore& store, uint64_t seed);

    // cams_meta supplies K and image size per view (and the ground-truth
    // extrinsics when gt_pose_input is set).
    DecoderState run(const std::vector<Image>& images, const std::vector<Camera>& cams_meta,
                     std::vector<DecoderState>* per_layer = nullptr) const;

    FeatureMaps encode(const std::vector<Image>& images) const;
    DecoderState init_queries(const FeatureMaps& f, const std::vector<Camera>& cams_meta) const;
    DecoderState layer(const DecoderState& s, const FeatureMaps& f, int layer_idx) const;

    const DecoderConfig& config() const { return cfg_; }

  private:
    struct LayerWeights {
        Mlp mod_mlp;
        DfaWeights dfa3d;
        Mlp fuse_mlp;
        DfaWeights dfa_cam;
        MultiHeadAttention cam_cross;
        SelfAttentionBlock sa3d;
        SelfAttentionBlock sa_cam;
        Mlp head_3d;
        Mlp head_cam;   // refray/rays-on-pixel: 6 ray channels; 6dpose: 9 pose channels
    };

    Eigen::Matrix3d view_K(const Camera& meta) const;
    void project_refpoints(const DecoderState& s, int view, ad::Value* uv_pix,
                           ad::Value* ref_grid, std::vector<char>* valid) const;
    void solve_cameras(DecoderState& s, const std::vector<Camera>& cams_meta,
                       const std::vector<ad::Value>& uv_by_view) const;
    ad::Value rays_from_camera_values(const CameraValues& cam, const ad::Value& uv,
                                      const Eigen::Matrix3d& k) const;
    GaussianValues apply_head_3d(const Mlp& head, const ad::Value& q3d,
                                 const GaussianValues& base) const;

    DecoderConfig cfg_;
    Linear patch_embed_;
    ad::Value pos_embed_;
    std::vector<SelfAttentionBlock> enc_blocks_;
    ad::Value qcam_embed_;  // (n_cam, dim), shared across views
    Mlp init_head_;         // produces the layer-0 Gaussians from initial queries
    std::vector<LayerWeights> layers_;
};

}  // namespace splatpose
