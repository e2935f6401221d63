#include "splatpose/decoder.hpp"

#include "splatpose/ad_geometry.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace splatpose {

namespace {

using ad::Value;
using json = nlohmann::json;

constexpr double kInitScaleLog = -3.0;    // exp(-3) ~ 0.05 world units
constexpr double kInitOpacityLogit = -2.0;

Value identity3_value() {
    return Value({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
}

Value matrix_value(const Eigen::Matrix3d& m) {
    std::vector<double> d(9);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) d[i * 3 + j] = m(i, j);
    return Value({3, 3}, std::move(d));
}

Linear make_linear(ParamStore& store, const std::string& name, int in, int out, Rng& rng,
                   bool zero_init) {
    Linear l;
    if (zero_init) {
        l.w = store.create_zeros(name + ".w", {in, out});
    } else {
        l.w = store.create_normal(name + ".w", {in, out}, rng, 1.0 / std::sqrt(in));
    }
    l.b = store.create_zeros(name + ".b", {out});
    return l;
}

Mlp make_mlp(ParamStore& store, const std::string& name, int in, int hidden, int out, Rng& rng,
             bool zero_out) {
    Mlp m;
    m.l1 = make_linear(store, name + ".l1", in, hidden, rng, false);
    m.l2 = make_linear(store, name + ".l2", hidden, out, rng, zero_out);
    return m;
}

MultiHeadAttention make_attention(ParamStore& store, const std::string& name, int dim, int heads,
                                  Rng& rng) {
    MultiHeadAttention a;
    a.heads = heads;
    a.dim = dim;
    a.wq = make_linear(store, name + ".wq", dim, dim, rng, false);
    a.wk = make_linear(store, name + ".wk", dim, dim, rng, false);
    a.wv = make_linear(store, name + ".wv", dim, dim, rng, false);
    a.wo = make_linear(store, name + ".wo", dim, dim, rng, true);
    return a;
}

SelfAttentionBlock make_sa_block(ParamStore& store, const std::string& name, int dim, int heads,
                                 int ffn_mult, Rng& rng) {
    SelfAttentionBlock b;
    b.attn = make_attention(store, name + ".attn", dim, heads, rng);
    b.ffn = make_mlp(store, name + ".ffn", dim, dim * ffn_mult, dim, rng, true);
    return b;
}

DfaWeights make_dfa(ParamStore& store, const std::string& name, int dim, int heads, int n_sample,
                    Rng& rng) {
    DfaWeights d;
    d.heads = heads;
    d.n_sample = n_sample;
    d.offset_mlp = make_mlp(store, name + ".offset", dim, dim, heads * n_sample * 2, rng, true);
    d.weight_mlp = make_mlp(store, name + ".weight", dim, dim, heads * n_sample, rng, true);
    d.value_proj = make_linear(store, name + ".value", dim, dim, rng, false);
    d.out_proj = make_linear(store, name + ".out", dim, dim, rng, true);
    return d;
}

std::vector<Eigen::Vector3d> centers_of(const Value& mu) {
    const int n = mu.shape()[0];
    std::vector<Eigen::Vector3d> pts(n);
    for (int i = 0; i < n; ++i)
        pts[i] = Eigen::Vector3d(mu.data()[i * 3], mu.data()[i * 3 + 1], mu.data()[i * 3 + 2]);
    return pts;
}

}  // namespace

// ---- config ----------------------------------------------------------------

void DecoderConfig::check() const {
    if (layers < 1 || dim < 1 || n_3d < 1 || n_cam < 1 || heads < 1 || n_sample < 1 || views < 2 ||
        patch < 1 || enc_blocks < 0 || ffn_mult < 1 || k_down < 1)
        throw std::invalid_argument("DecoderConfig: all counts must be positive (views >= 2)");
    if (n_cam > n_3d) throw std::invalid_argument("DecoderConfig: n_cam must be <= n_3d");
    if (dim % heads != 0) throw std::invalid_argument("DecoderConfig: dim must divide by heads");
    if (img_width % patch != 0 || img_height % patch != 0)
        throw std::invalid_argument("DecoderConfig: image size must divide by patch");
    if (sh_degree != 0 && sh_degree != 1)
        throw std::invalid_argument("DecoderConfig: sh_degree must be 0 or 1");
    if (n_3d > views * feat_h() * feat_w())
        throw std::invalid_argument("DecoderConfig: n_3d exceeds total feature cells");
    if (n_cam < 6) throw std::invalid_argument("DecoderConfig: n_cam must be >= 6 for the ray solve");
}

DecoderConfig DecoderConfig::from_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("DecoderConfig::from_json: cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw std::runtime_error("DecoderConfig::from_json: " + path + ": " + e.what());
    }
    DecoderConfig c;
    c.layers = j.value("layers", c.layers);
    c.dim = j.value("dim", c.dim);
    c.n_3d = j.value("n_3d", c.n_3d);
    c.n_cam = j.value("n_cam", c.n_cam);
    c.heads = j.value("heads", c.heads);
    c.n_sample = j.value("n_sample", c.n_sample);
    c.views = j.value("views", c.views);
    c.patch = j.value("patch", c.patch);
    c.enc_blocks = j.value("enc_blocks", c.enc_blocks);
    c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
    c.k_down = j.value("k_down", c.k_down);
    c.sh_degree = j.value("sh_degree", c.sh_degree);
    c.img_width = j.value("img_width", c.img_width);
    c.img_height = j.value("img_height", c.img_height);
    c.known_intrinsics = j.value("known_intrinsics", c.known_intrinsics);
    c.solve_in_graph = j.value("solve_in_graph", c.solve_in_graph);
    c.normalize_fuse = j.value("normalize_fuse", c.normalize_fuse);
    c.use_camdfa = j.value("use_camdfa", c.use_camdfa);
    c.gt_pose_input = j.value("gt_pose_input", c.gt_pose_input);
    const std::string head = j.value("camera_head", std::string("refray"));
    if (head == "refray") c.camera_head = CameraHead::kRefRay;
    else if (head == "rays_on_pixel") c.camera_head = CameraHead::kRaysOnPixel;
    else if (head == "6dpose") c.camera_head = CameraHead::k6DPose;
    else throw std::runtime_error("DecoderConfig: unknown camera_head " + head);
    return c;
}

void DecoderConfig::save_json(const std::string& path) const {
    json j;
    j["layers"] = layers;
    j["dim"] = dim;
    j["n_3d"] = n_3d;
    j["n_cam"] = n_cam;
    j["heads"] = heads;
    j["n_sample"] = n_sample;
    j["views"] = views;
    j["patch"] = patch;
    j["enc_blocks"] = enc_blocks;
    j["ffn_mult"] = ffn_mult;
    j["k_down"] = k_down;
    j["sh_degree"] = sh_degree;
    j["img_width"] = img_width;
    j["img_height"] = img_height;
    j["known_intrinsics"] = known_intrinsics;
    j["solve_in_graph"] = solve_in_graph;
    j["normalize_fuse"] = normalize_fuse;
    j["use_camdfa"] = use_camdfa;
    j["gt_pose_input"] = gt_pose_input;
    j["camera_head"] = camera_head == CameraHead::kRefRay       ? "refray"
                       : camera_head == CameraHead::kRaysOnPixel ? "rays_on_pixel"
                                                                 : "6dpose";
    std::ofstream out(path);
    if (!out) throw std::runtime_error("DecoderConfig::save_json: cannot open " + path);
    out << j.dump(2) << "\n";
}

// ---- fps -------------------------------------------------------------------

std::vector<int> fps(const std::vector<Eigen::Vector3d>& points, int k, int seed_index) {
    const int m = static_cast<int>(points.size());
    if (k < 1 || k > m) throw std::invalid_argument("fps: k out of range");
    if (seed_index < 0 || seed_index >= m) throw std::invalid_argument("fps: bad seed index");
    std::vector<int> out;
    out.reserve(k);
    out.push_back(seed_index);
    std::vector<double> mind(m);
    for (int i = 0; i < m; ++i) mind[i] = (points[i] - points[seed_index]).squaredNorm();
    while (static_cast<int>(out.size()) < k) {
        int best = 0;
        double best_d = -1.0;
        for (int i = 0; i < m; ++i) {
            if (mind[i] > best_d) {
                best_d = mind[i];
                best = i;
            }
        }
        out.push_back(best);
        for (int i = 0; i < m; ++i)
            mind[i] = std::min(mind[i], (points[i] - points[best]).squaredNorm());
    }
    return out;
}

// ---- blocks ------------------------------------------------------------------

Value MultiHeadAttention::attend(const Value& q_tokens, const Value& kv_tokens) const {
    const int nq = q_tokens.shape()[0];
    const int nk = kv_tokens.shape()[0];
    const int dh = dim / heads;
    const Value q = wq(q_tokens);
    const Value k = wk(kv_tokens);
    const Value v = wv(kv_tokens);
    std::vector<Value> outs;
    outs.reserve(heads);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int h = 0; h < heads; ++h) {
        const Value qh = ad::slice(q, {0, h * dh}, {nq, dh});
        const Value kh = ad::slice(k, {0, h * dh}, {nk, dh});
        const Value vh = ad::slice(v, {0, h * dh}, {nk, dh});
        const Value att = ad::softmax(ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt), -1);
        outs.push_back(ad::matmul(att, vh));
    }
    return wo(ad::concat(outs, 1));
}

Value SelfAttentionBlock::operator()(const Value& x) const {
    const Value h = ad::layernorm(x);
    const Value y = ad::add(x, attn.attend(h, h));
    return ad::add(y, ffn(ad::layernorm(y)));
}

Value SelfAttentionBlock::with_keys(const Value& x, const std::vector<int>& key_rows) const {
    const Value h = ad::layernorm(x);
    const Value kv = ad::take_rows(h, key_rows);
    const Value y = ad::add(x, attn.attend(h, kv));
    return ad::add(y, ffn(ad::layernorm(y)));
}

Value deformable_attention(const DfaWeights& w, const Value& base, const Value& driver,
                           const Value& ref_grid, const std::vector<char>& valid,
                           const Value& feat_grid) {
    const int n = base.shape()[0];
    const int dim = base.shape()[1];
    if (driver.shape() != base.shape())
        throw std::invalid_argument("deformable_attention: driver/base width mismatch");
    const int hf = feat_grid.shape()[0];
    const int wf = feat_grid.shape()[1];
    if (feat_grid.shape()[2] != dim)
        throw std::invalid_argument("deformable_attention: feature width mismatch");
    const int dh = dim / w.heads;
    const int ns = w.n_sample;

    const Value vgrid = ad::reshape(w.value_proj(ad::reshape(feat_grid, {hf * wf, dim})),
                                    {hf, wf, dim});
    const Value offsets = w.offset_mlp(driver);   // (n, heads*ns*2)
    const Value logits = w.weight_mlp(driver);    // (n, heads*ns)

    std::vector<Value> head_outs;
    head_outs.reserve(w.heads);
    for (int h = 0; h < w.heads; ++h) {
        const Value wts = ad::softmax(ad::slice(logits, {0, h * ns}, {n, ns}), -1);
        const Value vh = ad::slice(vgrid, {0, 0, h * dh}, {hf, wf, dh});
        Value acc;
        for (int s = 0; s < ns; ++s) {
            const Value off = ad::slice(offsets, {0, (h * ns + s) * 2}, {n, 2});
            const Value pts = ad::add(ref_grid, off);
            const Value sampled = ad::bilinear_sample(vh, pts);          // (n, dh)
            const Value ws = ad::slice(wts, {0, s}, {n, 1});
            const Value term = ad::mul(ws, sampled);
            acc = s == 0 ? term : ad::add(acc, term);
        }
        head_outs.push_back(acc);
    }
    Value res = w.out_proj(ad::concat(head_outs, 1));
    // masked queries keep their base value
    std::vector<double> mask(n, 1.0);
    bool any_masked = false;
    for (int i = 0; i < n; ++i) {
        if (!valid.empty() && !valid[i]) {
            mask[i] = 0.0;
            any_masked = true;
        }
    }
    if (any_masked) res = ad::mul(res, Value({n, 1}, mask));
    return ad::add(base, res);
}

Value camera_modulation(const Mlp& mod_mlp, const Value& q3d, const Value& qcam) {
    const int dim = q3d.shape()[1];
    if (qcam.shape()[1] != dim)
        throw std::invalid_argument("camera_modulation: query width mismatch");
    const Value pooled = ad::mean(qcam, 0, true);  // (1, dim)
    const Value ms = mod_mlp(pooled);              // (1, 2*dim)
    const Value scl = ad::slice(ms, {0, 0}, {1, dim});
    const Value shf = ad::slice(ms, {0, dim}, {1, dim});
    return ad::add(ad::mul(ad::layernorm(q3d), ad::add_scalar(scl, 1.0)), shf);
}

Value fuse_views(const Mlp& fuse_mlp, const std::vector<Value>& q_views, bool normalize) {
    if (q_views.empty()) throw std::invalid_argument("fuse_views: no views");
    Value out, wsum;
    for (size_t i = 0; i < q_views.size(); ++i) {
        const Value wi = ad::sigmoid(fuse_mlp(q_views[i]));  // (n, 1)
        const Value term = ad::mul(wi, q_views[i]);
        out = i == 0 ? term : ad::add(out, term);
        if (normalize) wsum = i == 0 ? wi : ad::add(wsum, wi);
    }
    if (normalize) out = ad::divide(out, wsum);
    return out;
}

// ---- model -------------------------------------------------------------------

Model::Model(const DecoderConfig& cfg, ParamStore& store, uint64_t seed) : cfg_(cfg) {
    if (!cfg_.use_camdfa) cfg_.camera_head = CameraHead::kRaysOnPixel;
    if (cfg_.camera_head == CameraHead::kRaysOnPixel)
        cfg_.n_cam = cfg_.feat_h() * cfg_.feat_w();
    if (cfg_.n_cam > cfg_.n_3d) cfg_.n_cam = cfg_.n_3d;
    cfg_.check();
    Rng rng(seed);
    const int dim = cfg_.dim;
    const int pin = cfg_.patch * cfg_.patch * 3;
    patch_embed_ = make_linear(store, "enc.embed", pin, dim, rng, false);
    pos_embed_ = store.create_normal("enc.pos", {cfg_.feat_h() * cfg_.feat_w(), dim}, rng, 0.02);
    for (int b = 0; b < cfg_.enc_blocks; ++b)
        enc_blocks_.push_back(
            make_sa_block(store, "enc.block" + std::to_string(b), dim, cfg_.heads, cfg_.ffn_mult, rng));
    qcam_embed_ = store.create_normal("qcam_embed", {cfg_.n_cam, dim}, rng, 0.02);
    init_head_ = make_mlp(store, "init_head", dim, dim, cfg_.gauss_channels(), rng, true);
    const int cam_channels = cfg_.camera_head == CameraHead::k6DPose ? 9 : 6;
    for (int l = 0; l < cfg_.layers; ++l) {
        const std::string p = "layer" + std::to_string(l);
        LayerWeights lw;
        lw.mod_mlp = make_mlp(store, p + ".mod", dim, dim, 2 * dim, rng, true);
        lw.dfa3d = make_dfa(store, p + ".dfa3d", dim, cfg_.heads, cfg_.n_sample, rng);
        lw.fuse_mlp = make_mlp(store, p + ".fuse", dim, dim, 1, rng, true);
        lw.dfa_cam = make_dfa(store, p + ".dfacam", dim, cfg_.heads, cfg_.n_sample, rng);
        lw.cam_cross = make_attention(store, p + ".camcross", dim, cfg_.heads, rng);
        lw.sa3d = make_sa_block(store, p + ".sa3d", dim, cfg_.heads, cfg_.ffn_mult, rng);
        lw.sa_cam = make_sa_block(store, p + ".sacam", dim, cfg_.heads, cfg_.ffn_mult, rng);
        lw.head_3d = make_mlp(store, p + ".head3d", dim, dim, cfg_.gauss_channels(), rng, true);
        lw.head_cam = make_mlp(store, p + ".headcam", dim, dim, cam_channels, rng, true);
        layers_.push_back(lw);
    }
}

Eigen::Matrix3d Model::view_K(const Camera& meta) const {
    if (cfg_.known_intrinsics) return meta.K;
    // Intrinsics-free: canonical guess, focal = max(W,H), principal point at
    // the image center.
    Eigen::Matrix3d k = Eigen::Matrix3d::Identity();
    const double f = std::max(cfg_.img_width, cfg_.img_height);
    k(0, 0) = f;
    k(1, 1) = f;
    k(0, 2) = (cfg_.img_width - 1) * 0.5;
    k(1, 2) = (cfg_.img_height - 1) * 0.5;
    return k;
}

FeatureMaps Model::encode(const std::vector<Image>& images) const {
    if (images.empty()) throw std::invalid_argument("encode_images: no input views");
    const int p = cfg_.patch;
    const int hf = cfg_.feat_h(), wf = cfg_.feat_w();
    FeatureMaps out;
    out.hf = hf;
    out.wf = wf;
    out.dim = cfg_.dim;
    for (const Image& img : images) {
        if (img.width != cfg_.img_width || img.height != cfg_.img_height)
            throw std::invalid_argument("encode_images: image size mismatch with config");
        if (img.width % p != 0 || img.height % p != 0)
            throw std::invalid_argument("encode_images: image size not divisible by patch");
        std::vector<double> cells(static_cast<size_t>(hf) * wf * p * p * 3);
        size_t o = 0;
        for (int r = 0; r < hf; ++r)
            for (int c = 0; c < wf; ++c)
                for (int py = 0; py < p; ++py)
                    for (int px = 0; px < p; ++px)
                        for (int ch = 0; ch < 3; ++ch)
                            cells[o++] = img.at(c * p + px, r * p + py, ch);
        Value x = patch_embed_(Value({hf * wf, p * p * 3}, std::move(cells)));
        x = ad::add(x, pos_embed_);
        for (const auto& blk : enc_blocks_) x = blk(x);
        out.feat.push_back(ad::reshape(x, {hf, wf, cfg_.dim}));
    }
    return out;
}

Value Model::rays_from_camera_values(const CameraValues& cam, const Value& uv,
                                     const Eigen::Matrix3d& k) const {
    const int n = uv.shape()[0];
    const Value ones = Value::full({n, 1}, 1.0);
    const Value uh = ad::concat({uv, ones}, 1);
    const Value kinv_t = matrix_value(k.inverse().transpose());
    const Value v = ad::matmul(uh, kinv_t);  // rows = (K^-1 u)^T
    const Value d = ad::matmul(v, cam.R);    // rows = (R^T K^-1 u)^T
    const Value c = ad::neg(ad::matmul(ad::transpose(cam.R), ad::reshape(cam.t, {3, 1})));
    const Value c_tiled = ad::mul(ones, ad::transpose(c));  // (n,3)
    const Value m = ad::cross3(c_tiled, d);
    const Value nrm = ad::l2norm(d, -1, true);
    return ad::concat({ad::divide(d, nrm), ad::divide(m, nrm)}, 1);
}

GaussianValues Model::apply_head_3d(const Mlp& head, const Value& q3d,
                                    const GaussianValues& base) const {
    const int n = q3d.shape()[0];
    const int c = 3 * (cfg_.sh_degree + 1) * (cfg_.sh_degree + 1);
    const Value delta = head(q3d);
    GaussianValues out;
    out.sh_degree = cfg_.sh_degree;
    out.mu = ad::add(base.mu, ad::slice(delta, {0, 0}, {n, 3}));
    out.rot = ad::add(base.rot, ad::slice(delta, {0, 3}, {n, 4}));
    out.scale_log = ad::add(base.scale_log, ad::slice(delta, {0, 7}, {n, 3}));
    out.opacity_logit =
        ad::add(base.opacity_logit, ad::reshape(ad::slice(delta, {0, 10}, {n, 1}), {n}));
    out.sh = ad::add(base.sh, ad::slice(delta, {0, 11}, {n, c}));
    return out;
}

DecoderState Model::init_queries(const FeatureMaps& f, const std::vector<Camera>& cams_meta) const {
    const int v = static_cast<int>(f.feat.size());
    if (v != static_cast<int>(cams_meta.size()))
        throw std::invalid_argument("init_queries: views/camera metadata mismatch");
    const int hf = f.hf, wf = f.wf;
    const int cells = v * hf * wf;
    if (cells < cfg_.n_3d)
        throw std::invalid_argument("init_queries: too few feature cells for n_3d");

    std::vector<Value> flats;
    flats.reserve(v);
    for (const auto& g : f.feat) flats.push_back(ad::reshape(g, {hf * wf, cfg_.dim}));
    const Value flat_all = v == 1 ? flats[0] : ad::concat(flats, 0);

    // Unproject each cell's source pixel at depth 1 under identity pose.
    std::vector<Eigen::Vector3d> base_centers(cells);
    for (int i = 0; i < v; ++i) {
        const Eigen::Matrix3d kinv = view_K(cams_meta[i]).inverse();
        for (int r = 0; r < hf; ++r)
            for (int c = 0; c < wf; ++c) {
                const double u = (c + 0.5) * cfg_.patch - 0.5;
                const double w = (r + 0.5) * cfg_.patch - 0.5;
                base_centers[(static_cast<size_t>(i) * hf + r) * wf + c] =
                    kinv * Eigen::Vector3d(u, w, 1.0);
            }
    }

    DecoderState s;
    std::vector<int> sel;
    if (cells > cfg_.n_3d) {
        sel = fps(base_centers, cfg_.n_3d, 0);
        s.q3d = ad::take_rows(flat_all, sel);
    } else {
        sel.resize(cells);
        for (int i = 0; i < cells; ++i) sel[i] = i;
        s.q3d = flat_all;
    }

    const int n = cfg_.n_3d;
    std::vector<double> mu0(static_cast<size_t>(n) * 3);
    for (int i = 0; i < n; ++i)
        for (int a = 0; a < 3; ++a) mu0[i * 3 + a] = base_centers[sel[i]](a);
    GaussianValues base;
    base.sh_degree = cfg_.sh_degree;
    base.mu = Value({n, 3}, std::move(mu0));
    std::vector<double> rot0(static_cast<size_t>(n) * 4, 0.0);
    for (int i = 0; i < n; ++i) rot0[i * 4] = 1.0;
    base.rot = Value({n, 4}, std::move(rot0));
    base.scale_log = Value::full({n, 3}, kInitScaleLog);
    base.opacity_logit = Value::full({n}, kInitOpacityLogit);
    base.sh = Value::zeros({n, 3 * (cfg_.sh_degree + 1) * (cfg_.sh_degree + 1)});
    s.gauss = apply_head_3d(init_head_, s.q3d, base);

    // Initial cameras: identity extrinsics (or ground truth in gt-pose mode).
    for (int i = 0; i < v; ++i) {
        CameraValues cam;
        if (cfg_.gt_pose_input) {
            cam = camera_to_values(cams_meta[i]);
            cam.K = matrix_value(view_K(cams_meta[i]));
        } else {
            cam.R = identity3_value();
            cam.t = Value::zeros({3});
            cam.K = matrix_value(view_K(cams_meta[i]));
        }
        cam.width = cfg_.img_width;
        cam.height = cfg_.img_height;
        s.cams.push_back(cam);
    }

    // Camera reference points: FPS subset of the 3D reference points, fixed
    // patch-grid points in rays-on-pixel mode.
    if (cfg_.camera_head == CameraHead::kRaysOnPixel) {
        s.cam_subset.clear();
    } else {
        s.cam_subset = fps(centers_of(s.gauss.mu), cfg_.n_cam, 0);
    }

    for (int i = 0; i < v; ++i) {
        s.qcam.push_back(qcam_embed_);
        Value uv_pix, ref_grid;
        std::vector<char> valid;
        project_refpoints(s, i, &uv_pix, &ref_grid, &valid);
        Value uv_i;
        if (cfg_.camera_head == CameraHead::kRaysOnPixel) {
            std::vector<double> grid(static_cast<size_t>(hf) * wf * 2);
            for (int r = 0; r < hf; ++r)
                for (int c = 0; c < wf; ++c) {
                    grid[(static_cast<size_t>(r) * wf + c) * 2 + 0] = (c + 0.5) * cfg_.patch - 0.5;
                    grid[(static_cast<size_t>(r) * wf + c) * 2 + 1] = (r + 0.5) * cfg_.patch - 0.5;
                }
            uv_i = Value({hf * wf, 2}, std::move(grid));
        } else {
            uv_i = ad::take_rows(uv_pix, s.cam_subset);
        }
        s.ray_uv.push_back(uv_i);
        s.rays.push_back(rays_from_camera_values(s.cams[i], uv_i, view_K(cams_meta[i])));
    }
    return s;
}

void Model::project_refpoints(const DecoderState& s, int view, Value* uv_pix, Value* ref_grid,
                              std::vector<char>* valid) const {
    const int n = s.gauss.mu.shape()[0];
    const CameraValues& cam = s.cams[view];
    const double fx = cam.K.data()[0], cx = cam.K.data()[2];
    const double fy = cam.K.data()[4], cy = cam.K.data()[5];
    const Value xc = ad::add(ad::matmul(s.gauss.mu, ad::transpose(cam.R)),
                             ad::reshape(cam.t, {1, 3}));
    const Value x = ad::slice(xc, {0, 0}, {n, 1});
    const Value y = ad::slice(xc, {0, 1}, {n, 1});
    const Value z = ad::slice(xc, {0, 2}, {n, 1});
    const Value zc = ad::clamp(z, kZNear, 1e12);
    const Value u = ad::add_scalar(ad::scale(ad::divide(x, zc), fx), cx);
    const Value w = ad::add_scalar(ad::scale(ad::divide(y, zc), fy), cy);
    *uv_pix = ad::concat({u, w}, 1);
    valid->assign(n, 1);
    for (int i = 0; i < n; ++i)
        if (!(z.data()[i] > kZNear)) (*valid)[i] = 0;
    const Value un = ad::clamp(ad::scale(u, 1.0 / cfg_.img_width), 0.0, 1.0);
    const Value wn = ad::clamp(ad::scale(w, 1.0 / cfg_.img_height), 0.0, 1.0);
    *ref_grid = ad::concat({ad::scale(un, cfg_.feat_w() - 1.0), ad::scale(wn, cfg_.feat_h() - 1.0)}, 1);
}

void Model::solve_cameras(DecoderState& s, const std::vector<Camera>& cams_meta,
                          const std::vector<Value>& uv_by_view) const {
    const int v = static_cast<int>(s.cams.size());
    if (cfg_.gt_pose_input) return;  // cameras stay pinned to ground truth
    for (int i = 1; i < v; ++i) {
        const Eigen::Matrix3d k = view_K(cams_meta[i]);
        const Value& rays = s.rays[i];
        const Value& uv = uv_by_view[i];
        const int n = rays.shape()[0];
        bool ok = false;
        if (cfg_.known_intrinsics && cfg_.solve_in_graph) {
            // Differentiable known-K path: Procrustes rotation + closed-form
            // least-squares center.
            const Value d_raw = ad::slice(rays, {0, 0}, {n, 3});
            const Value m_raw = ad::slice(rays, {0, 3}, {n, 3});
            const Value nrm = ad::l2norm(d_raw, -1, true);
            const Value dn = ad::divide(d_raw, nrm);
            const Value mn = ad::divide(m_raw, nrm);
            const Value ones = Value::full({n, 1}, 1.0);
            const Value uh = ad::concat({uv, ones}, 1);
            const Value vt = ad::matmul(uh, matrix_value(k.inverse().transpose()));
            const Value vn = ad::divide(vt, ad::l2norm(vt, -1, true));
            const Value a = ad::matmul(ad::transpose(vn), dn);  // (3,3)
            const Value s2 = ad::reshape(ad::sum(ad::mul(dn, dn)), {1, 1});
            const Value smat = ad::sub(ad::mul(s2, identity3_value()),
                                       ad::matmul(ad::transpose(dn), dn));
            // eager degeneracy checks on the computed data
            Eigen::Matrix3d am, sm;
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 3; ++c) {
                    am(r, c) = a.data()[r * 3 + c];
                    sm(r, c) = smat.data()[r * 3 + c];
                }
            Eigen::JacobiSVD<Eigen::Matrix3d> svd(am);
            Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(sm);
            if (svd.singularValues()(1) > 1e-10 * svd.singularValues()(0) &&
                eig.eigenvalues()(0) > 1e-10 * eig.eigenvalues()(2)) {
                CameraValues cam;
                cam.R = ad::procrustes_rotation(a);
                const Value b = ad::reshape(ad::sum(ad::cross3(dn, mn), 0, false), {3, 1});
                const Value c = ad::matmul(ad::inverse3(smat), b);
                cam.t = ad::reshape(ad::neg(ad::matmul(cam.R, c)), {3});
                cam.K = matrix_value(k);
                cam.width = cfg_.img_width;
                cam.height = cfg_.img_height;
                s.cams[i] = cam;
                ok = true;
            }
        } else {
            // Stop-gradient solve through the standalone recovery.
            RaySet rs;
            rs.rays.resize(n);
            rs.uv.resize(n);
            for (int j = 0; j < n; ++j) {
                rs.rays[j].d = Eigen::Vector3d(rays.data()[j * 6], rays.data()[j * 6 + 1],
                                               rays.data()[j * 6 + 2]);
                rs.rays[j].m = Eigen::Vector3d(rays.data()[j * 6 + 3], rays.data()[j * 6 + 4],
                                               rays.data()[j * 6 + 5]);
                rs.uv[j] = Eigen::Vector2d(uv.data()[j * 2], uv.data()[j * 2 + 1]);
            }
            try {
                const Camera cam =
                    rays_to_camera(rs, cfg_.known_intrinsics ? std::optional<Eigen::Matrix3d>(k)
                                                             : std::nullopt,
                                   cfg_.img_width, cfg_.img_height);
                CameraValues cv = camera_to_values(cam);
                s.cams[i] = cv;
                ok = true;
            } catch (const std::exception&) {
                ok = false;
            }
        }
        if (!ok) s.solve_fallbacks++;  // keep the previous layer's camera
    }
}

DecoderState Model::layer(const DecoderState& s, const FeatureMaps& f, int layer_idx) const {
    if (layer_idx < 0 || layer_idx >= cfg_.layers)
        throw std::invalid_argument("decoder_layer: bad layer index");
    const LayerWeights& lw = layers_[layer_idx];
    const int v = static_cast<int>(s.cams.size());
    if (v < 2) throw std::invalid_argument("decoder_layer: needs >= 2 views");

    DecoderState out = s;

    // (a) shared reference points from the current Gaussians and cameras
    std::vector<Value> uv_pix(v), ref_grid(v);
    std::vector<std::vector<char>> valid(v);
    for (int i = 0; i < v; ++i) project_refpoints(s, i, &uv_pix[i], &ref_grid[i], &valid[i]);

    // (b) per-view camera-modulated deformable attention on 3D queries
    std::vector<Value> q_views(v);
    for (int i = 0; i < v; ++i) {
        const Value mod = camera_modulation(lw.mod_mlp, s.q3d, s.qcam[i]);
        q_views[i] = deformable_attention(lw.dfa3d, s.q3d, mod, ref_grid[i], valid[i], f.feat[i]);
    }
    Value q3d = fuse_views(lw.fuse_mlp, q_views, cfg_.normalize_fuse);

    // (c) camera-query updates on the shared reference-point subset
    const bool dense_cam = cfg_.camera_head == CameraHead::kRaysOnPixel;
    std::vector<Value> uv_cam(v), ref_cam(v);
    std::vector<std::vector<char>> valid_cam(v);
    for (int i = 0; i < v; ++i) {
        if (dense_cam) {
            uv_cam[i] = s.ray_uv[i];  // fixed patch grid
            const int n = uv_cam[i].shape()[0];
            std::vector<double> grid(static_cast<size_t>(n) * 2);
            for (int j = 0; j < n; ++j) {
                grid[j * 2 + 0] =
                    std::clamp(uv_cam[i].data()[j * 2] / cfg_.img_width, 0.0, 1.0) *
                    (cfg_.feat_w() - 1.0);
                grid[j * 2 + 1] =
                    std::clamp(uv_cam[i].data()[j * 2 + 1] / cfg_.img_height, 0.0, 1.0) *
                    (cfg_.feat_h() - 1.0);
            }
            ref_cam[i] = Value({n, 2}, std::move(grid));
            valid_cam[i].assign(n, 1);
        } else {
            uv_cam[i] = ad::take_rows(uv_pix[i], s.cam_subset);
            ref_cam[i] = ad::take_rows(ref_grid[i], s.cam_subset);
            valid_cam[i].resize(s.cam_subset.size());
            for (size_t j = 0; j < s.cam_subset.size(); ++j)
                valid_cam[i][j] = valid[i][s.cam_subset[j]];
        }
    }
    std::vector<Value> qcam = s.qcam;
    for (int i = 1; i < v; ++i) {
        qcam[i] = deformable_attention(lw.dfa_cam, qcam[i], qcam[i], ref_cam[i], valid_cam[i],
                                       f.feat[i]);
        qcam[0] = deformable_attention(lw.dfa_cam, qcam[0], qcam[0], ref_cam[0], valid_cam[0],
                                       f.feat[i]);
    }
    for (int i = 1; i < v; ++i) {
        const Value h = ad::layernorm(qcam[i]);
        const Value href = ad::layernorm(qcam[0]);
        qcam[i] = ad::add(qcam[i], lw.cam_cross.attend(h, href));
    }

    // (d) self-attention + FFN; 3D queries use the FPS-downsampled keys
    const int kd = std::min(cfg_.k_down, cfg_.n_3d);
    const std::vector<int> down = fps(centers_of(s.gauss.mu), kd, 0);
    q3d = lw.sa3d.with_keys(q3d, down);
    for (int i = 0; i < v; ++i) qcam[i] = lw.sa_cam(qcam[i]);

    // (e) residual heads
    out.q3d = q3d;
    out.qcam = qcam;
    out.gauss = apply_head_3d(lw.head_3d, q3d, s.gauss);
    out.ray_uv = uv_cam;

    if (cfg_.camera_head == CameraHead::k6DPose) {
        // Direct pose regression per non-reference view; rays derived from
        // the regressed camera keep the ray supervision comparable.
        for (int i = 0; i < v; ++i) {
            Eigen::Matrix3d k;
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 3; ++c) k(r, c) = s.cams[i].K.data()[r * 3 + c];
            if (i == 0 || cfg_.gt_pose_input) {
                out.rays[i] = rays_from_camera_values(out.cams[i], uv_cam[i], k);
                continue;
            }
            const Value pooled = ad::mean(qcam[i], 0, true);
            const Value raw = lw.head_cam(pooled);  // (1,9)
            const Value base(std::vector<int>{1, 9},
                             {1, 0, 0, 0, 1, 0, 0, 0, 0});
            const Value p9 = ad::add(raw, base);
            const Value a1 = ad::slice(p9, {0, 0}, {1, 3});
            const Value a2 = ad::slice(p9, {0, 3}, {1, 3});
            const Value tv = ad::slice(p9, {0, 6}, {1, 3});
            const Value b1 = ad::divide(a1, ad::l2norm(a1, -1, true));
            const Value dot = ad::sum(ad::mul(b1, a2), -1, true);
            const Value a2p = ad::sub(a2, ad::mul(dot, b1));
            const Value b2 = ad::divide(a2p, ad::l2norm(a2p, -1, true));
            const Value b3 = ad::cross3(b1, b2);
            CameraValues cam;
            cam.R = ad::concat({b1, b2, b3}, 0);  // rows form the rotation
            cam.t = ad::reshape(tv, {3});
            cam.K = s.cams[i].K;
            cam.width = cfg_.img_width;
            cam.height = cfg_.img_height;
            out.cams[i] = cam;
            out.rays[i] = rays_from_camera_values(cam, uv_cam[i], k);
        }
        return out;
    }

    // refray / rays-on-pixel: residual ray update then per-view solve
    for (int i = 0; i < v; ++i) {
        const Value delta = lw.head_cam(qcam[i]);  // (n_cam, 6)
        const Value raw = ad::add(s.rays[i], delta);
        const int n = raw.shape()[0];
        const Value d = ad::slice(raw, {0, 0}, {n, 3});
        const Value m = ad::slice(raw, {0, 3}, {n, 3});
        const Value nrm = ad::l2norm(d, -1, true);
        out.rays[i] = ad::concat({ad::divide(d, nrm), ad::divide(m, nrm)}, 1);
    }
    std::vector<Camera> metas(v);
    for (int i = 0; i < v; ++i) metas[i] = values_to_camera(s.cams[i]);
    solve_cameras(out, metas, uv_cam);
    return out;
}

DecoderState Model::run(const std::vector<Image>& images, const std::vector<Camera>& cams_meta,
                        std::vector<DecoderState>* per_layer) const {
    if (static_cast<int>(images.size()) != static_cast<int>(cams_meta.size()))
        throw std::invalid_argument("Model::run: images/camera metadata mismatch");
    const FeatureMaps f = encode(images);
    DecoderState s = init_queries(f, cams_meta);
    if (!cfg_.use_camdfa) {
        // Direct regression from the encoder: per-view feature tokens act as
        // camera queries, one head application, no refinement layers.
        const int v = static_cast<int>(images.size());
        for (int i = 0; i < v; ++i) {
            s.qcam[i] = ad::reshape(f.feat[i], {cfg_.feat_h() * cfg_.feat_w(), cfg_.dim});
            const Value delta = layers_[0].head_cam(s.qcam[i]);
            const Value raw = ad::add(s.rays[i], delta);
            const int n = raw.shape()[0];
            const Value d = ad::slice(raw, {0, 0}, {n, 3});
            const Value m = ad::slice(raw, {0, 3}, {n, 3});
            const Value nrm = ad::l2norm(d, -1, true);
            s.rays[i] = ad::concat({ad::divide(d, nrm), ad::divide(m, nrm)}, 1);
        }
        solve_cameras(s, cams_meta, s.ray_uv);
        if (per_layer) per_layer->push_back(s);
        return s;
    }
    for (int l = 0; l < cfg_.layers; ++l) {
        s = layer(s, f, l);
        if (per_layer) per_layer->push_back(s);
    }
    return s;
}

}  // namespace splatpose
