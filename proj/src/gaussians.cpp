#include "splatpose/gaussians.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace splatpose {

namespace {
using json = nlohmann::json;

bool all_finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}
}  // namespace

void GaussianSet::validate() const {
    const size_t n = opacity_logit.size();
    if (mu.size() != n * 3 || rot.size() != n * 4 || scale_log.size() != n * 3 ||
        sh.size() != n * static_cast<size_t>(sh_channels()))
        throw std::invalid_argument("GaussianSet: inconsistent array lengths");
    if (sh_degree != 0 && sh_degree != 1)
        throw std::invalid_argument("GaussianSet: sh_degree must be 0 or 1");
    if (!all_finite(mu) || !all_finite(rot) || !all_finite(scale_log) ||
        !all_finite(opacity_logit) || !all_finite(sh))
        throw std::invalid_argument("GaussianSet: non-finite parameters");
}

Eigen::Vector3d sh_to_color(const double* sh, int channels, const Eigen::Vector3d& view_dir,
                            int degree) {
    const int expected = 3 * (degree + 1) * (degree + 1);
    if (channels != expected)
        throw std::invalid_argument("sh_to_color: coefficient count " + std::to_string(channels) +
                                    " does not match degree " + std::to_string(degree));
    Eigen::Vector3d c(kSh0 * sh[0] + 0.5, kSh0 * sh[1] + 0.5, kSh0 * sh[2] + 0.5);
    if (degree >= 1) {
        const double x = view_dir.x(), y = view_dir.y(), z = view_dir.z();
        for (int ch = 0; ch < 3; ++ch)
            c(ch) += kSh1 * (-y * sh[3 + ch] + z * sh[6 + ch] - x * sh[9 + ch]);
    }
    return c.cwiseMax(0.0).cwiseMin(1.0);
}

void save_gaussians_json(const GaussianSet& g, const std::string& path) {
    json j;
    j["degree"] = g.sh_degree;
    j["mu"] = g.mu;
    j["rot"] = g.rot;
    j["scale_log"] = g.scale_log;
    j["opacity_logit"] = g.opacity_logit;
    j["sh"] = g.sh;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_gaussians_json: cannot open " + path);
    out << j.dump() << "\n";
}

GaussianSet load_gaussians_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_gaussians_json: cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw std::runtime_error("load_gaussians_json: " + path + ": " + e.what());
    }
    GaussianSet g;
    g.sh_degree = j.at("degree").get<int>();
    g.mu = j.at("mu").get<std::vector<double>>();
    g.rot = j.at("rot").get<std::vector<double>>();
    g.scale_log = j.at("scale_log").get<std::vector<double>>();
    g.opacity_logit = j.at("opacity_logit").get<std::vector<double>>();
    g.sh = j.at("sh").get<std::vector<double>>();
    g.validate();
    return g;
}

}  // namespace splatpose
