#include "splatpose/params.hpp"

#include <nlohmann/json.hpp>

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace splatpose {

using json = nlohmann::json;

ad::Value& ParamStore::create(const std::string& name, std::vector<int> shape,
                              std::vector<double> data) {
    if (find(name)) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
    items_.emplace_back(name, ad::Value::param(std::move(shape), std::move(data)));
    return items_.back().second;
}

ad::Value& ParamStore::create_normal(const std::string& name, std::vector<int> shape, Rng& rng,
                                     double stddev) {
    const int64_t n = ad::shape_numel(shape);
    std::vector<double> data(n);
    for (auto& v : data) v = rng.normal(0.0, stddev);
    return create(name, std::move(shape), std::move(data));
}

ad::Value& ParamStore::create_zeros(const std::string& name, std::vector<int> shape) {
    const int64_t n = ad::shape_numel(shape);
    return create(name, std::move(shape), std::vector<double>(n, 0.0));
}

ad::Value* ParamStore::find(const std::string& name) {
    for (auto& [k, v] : items_)
        if (k == name) return &v;
    return nullptr;
}

const ad::Value* ParamStore::find(const std::string& name) const {
    for (const auto& [k, v] : items_)
        if (k == name) return &v;
    return nullptr;
}

int64_t ParamStore::total_size() const {
    int64_t n = 0;
    for (const auto& [k, v] : items_) n += v.size();
    return n;
}

void ParamStore::zero_grads() {
    for (auto& [k, v] : items_) v.clear_grad();
}

void ParamStore::save(const std::string& prefix) const {
    std::ofstream bin(prefix + ".bin", std::ios::binary);
    if (!bin) throw std::runtime_error("ParamStore::save: cannot open " + prefix + ".bin");
    json manifest = json::array();
    int64_t offset = 0;
    for (const auto& [name, v] : items_) {
        manifest.push_back({{"name", name}, {"shape", v.shape()}, {"offset", offset}});
        bin.write(reinterpret_cast<const char*>(v.data().data()),
                  static_cast<std::streamsize>(v.size() * sizeof(double)));
        offset += v.size();
    }
    if (!bin) throw std::runtime_error("ParamStore::save: write failed for " + prefix + ".bin");
    std::ofstream mf(prefix + ".json");
    if (!mf) throw std::runtime_error("ParamStore::save: cannot open " + prefix + ".json");
    mf << json{{"params", manifest}, {"total", offset}}.dump(2) << "\n";
}

void ParamStore::load(const std::string& prefix) {
    std::ifstream mf(prefix + ".json");
    if (!mf) throw std::runtime_error("ParamStore::load: cannot open " + prefix + ".json");
    json j;
    try {
        mf >> j;
    } catch (const json::parse_error& e) {
        throw std::runtime_error("ParamStore::load: " + prefix + ".json: " + e.what());
    }
    std::ifstream bin(prefix + ".bin", std::ios::binary);
    if (!bin) throw std::runtime_error("ParamStore::load: cannot open " + prefix + ".bin");
    for (const auto& entry : j.at("params")) {
        const std::string name = entry.at("name").get<std::string>();
        const std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
        const int64_t offset = entry.at("offset").get<int64_t>();
        ad::Value* v = find(name);
        if (!v) throw std::runtime_error("ParamStore::load: unknown parameter " + name);
        if (v->shape() != shape)
            throw std::runtime_error("ParamStore::load: shape mismatch for " + name);
        bin.seekg(offset * static_cast<int64_t>(sizeof(double)));
        bin.read(reinterpret_cast<char*>(v->mutable_data().data()),
                 static_cast<std::streamsize>(v->size() * sizeof(double)));
        if (!bin) throw std::runtime_error("ParamStore::load: truncated data for " + name);
    }
}

}  // namespace splatpose
