#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "gaam/autograd.hpp"
#include "gaam/rng.hpp"

namespace gaam {

// Uniform in +-sqrt(6 / (fan_in + fan_out)) for a 2-D (fan_in, fan_out) shape.
template <typename T>
Array<T> xavier_init(const Shape& shape, Rng& rng) {
  if (shape.size() != 2) throw ContractError("xavier_init: expected a 2-D shape, got " + shape_str(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
  Array<T> out(shape);
  for (auto& v : out.storage()) v = static_cast<T>(rng.uniform(-bound, bound));
  return out;
}

// Uniform in +-1/sqrt(fan_in); used for attention projections, which the
// decoder recipe keeps out of Xavier initialization.
template <typename T>
Array<T> fan_in_uniform_init(const Shape& shape, Rng& rng) {
  if (shape.size() != 2) throw ContractError("fan_in_uniform_init: expected a 2-D shape");
  const double bound = 1.0 / std::sqrt(static_cast<double>(shape[0]));
  Array<T> out(shape);
  for (auto& v : out.storage()) v = static_cast<T>(rng.uniform(-bound, bound));
  return out;
}

template <typename T>
Array<T> randn(const Shape& shape, Rng& rng, double stddev = 1.0) {
  Array<T> out(shape);
  for (auto& v : out.storage()) v = static_cast<T>(stddev * rng.normal());
  return out;
}

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Coupled weight decay folds wd * theta into the gradient instead.
  bool decoupled_weight_decay = true;
};

// Named trainable parameters plus Adam moment buffers. Iteration order is
// the lexicographic name order, which keeps updates and checkpoints stable.
template <typename T>
class ParamStore {
 public:
  Var<T> add(const std::string& name, Array<T> init) {
    if (params_.count(name)) throw ContractError("ParamStore: duplicate parameter '" + name + "'");
    Var<T> p = Var<T>::parameter(std::move(init));
    params_.emplace(name, Slot{p, Array<T>(p.shape()), Array<T>(p.shape())});
    return p;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  Var<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("ParamStore: unknown parameter '" + name + "'");
    return it->second.param;
  }
  const Var<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("ParamStore: unknown parameter '" + name + "'");
    return it->second.param;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [name, slot] : params_) out.push_back(name);
    return out;
  }

  std::size_t size() const { return params_.size(); }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& [name, slot] : params_) n += slot.param.size();
    return n;
  }

  std::uint64_t step_count() const { return step_; }

  void zero_grad() {
    for (auto& [name, slot] : params_) slot.param.zero_grad();
  }

  // One Adam update with bias correction. Decoupled decay shrinks theta by
  // lr * wd * theta before the adaptive step.
  void adam_step(double lr, double weight_decay, const AdamOptions& opt = {}) {
    for (const auto& [name, slot] : params_) {
      if (!slot.param.has_grad()) throw ContractError("adam_step: parameter '" + name + "' has no gradient");
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step_));
    for (auto& [name, slot] : params_) {
      Array<T>& theta = slot.param.mutable_value();
      const Array<T>& g = slot.param.grad();
      for (std::size_t i = 0; i < theta.size(); ++i) {
        double th = theta[i];
        double gi = g[i];
        if (opt.decoupled_weight_decay) {
          th -= lr * weight_decay * th;
        } else {
          gi += weight_decay * th;
        }
        const double m = opt.beta1 * slot.m[i] + (1.0 - opt.beta1) * gi;
        const double v = opt.beta2 * slot.v[i] + (1.0 - opt.beta2) * gi * gi;
        slot.m[i] = static_cast<T>(m);
        slot.v[i] = static_cast<T>(v);
        th -= lr * (m / bc1) / (std::sqrt(v / bc2) + opt.eps);
        theta[i] = static_cast<T>(th);
      }
      if (!theta.all_finite()) throw NumericError("adam_step: parameter '" + name + "' became non-finite");
    }
  }

  const Array<T>& first_moment(const std::string& name) const { return params_.at(name).m; }
  const Array<T>& second_moment(const std::string& name) const { return params_.at(name).v; }

 private:
  struct Slot {
    Var<T> param;
    Array<T> m;
    Array<T> v;
  };
  std::map<std::string, Slot> params_;
  std::uint64_t step_ = 0;
};

template <typename T>
void adam_step(ParamStore<T>& store, double lr, double weight_decay) {
  store.adam_step(lr, weight_decay);
}

}  // namespace gaam
