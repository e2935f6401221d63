#pragma once

#include "splatpose/autodiff.hpp"
#include "splatpose/rng.hpp"

#include <string>
#include <utility>
#include <vector>

namespace splatpose {

// Ordered collection of named trainable tensors. Registration order is the
// optimizer iteration order, so construction must be deterministic.
class ParamStore {
  public:
    // Creates the tensor (error if the name exists) and returns it.
    ad::Value& create(const std::string& name, std::vector<int> shape,
                      std::vector<double> data);
    ad::Value& create_normal(const std::string& name, std::vector<int> shape, Rng& rng,
                             double stddev);
    ad::Value& create_zeros(const std::string& name, std::vector<int> shape);

    ad::Value* find(const std::string& name);
    const ad::Value* find(const std::string& name) const;

    std::vector<std::pair<std::string, ad::Value>>& items() { return items_; }
    const std::vector<std::pair<std::string, ad::Value>>& items() const { return items_; }

    int64_t total_size() const;
    void zero_grads();

    // Checkpoint: <prefix>.bin holds little-endian f64 data back to back,
    // <prefix>.json is the manifest [{name, shape, offset}] with offsets in
    // elements.
    void save(const std::string& prefix) const;
    // Loads values into existing entries by name; throws on missing names or
    // shape mismatches.
    void load(const std::string& prefix);

  private:
    std::vector<std::pair<std::string, ad::Value>> items_;
};

}  // namespace splatpose
