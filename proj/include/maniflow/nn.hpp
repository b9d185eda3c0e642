#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "maniflow/tensor.hpp"

namespace maniflow {

// Named parameter leaves with deterministic (sorted) iteration order.
class ParamStore {
public:
  Tensor& create(const std::string& name, Tensor t) {
    auto [it, inserted] = params_.emplace(name, std::move(t));
    if (!inserted) throw TensorError("ParamStore: duplicate parameter '" + name + "'");
    return it->second;
  }

  Tensor& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw TensorError("ParamStore: no parameter '" + name + "'");
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw TensorError("ParamStore: no parameter '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return params_.count(name) > 0; }

  const std::map<std::string, Tensor>& entries() const { return params_; }
  size_t size() const { return params_.size(); }

  int64_t total_elems() const {
    int64_t n = 0;
    for (const auto& [_, t] : params_) n += t.numel();
    return n;
  }

  void zero_grads() {
    for (auto& [_, t] : params_) t.zero_grad();
  }

  double grad_l2_norm() const {
    double acc = 0.0;
    for (const auto& [_, t] : params_)
      for (float gi : t.grad()) acc += static_cast<double>(gi) * gi;
    return std::sqrt(acc);
  }

private:
  std::map<std::string, Tensor> params_;
};

// stable 64-bit name hash for per-parameter init streams
inline uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline Tensor xavier_uniform(Shape shape, RngStream& rng) {
  int64_t fan_in = shape.size() >= 2 ? shape[0] : 1;
  int64_t fan_out = shape.size() >= 2 ? shape[1] : shape[0];
  const float a = std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
  return Tensor::rand_uniform(std::move(shape), rng, -a, a, true);
}

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

// Bias-corrected Adam over a ParamStore. Moments keyed by parameter name.
class AdamState {
public:
  AdamState() = default;
  AdamState(const ParamStore& params, AdamConfig cfg) : cfg_(cfg) {
    for (const auto& [name, t] : params.entries()) {
      m_[name].assign(static_cast<size_t>(t.numel()), 0.0f);
      v_[name].assign(static_cast<size_t>(t.numel()), 0.0f);
    }
  }

  const AdamConfig& config() const { return cfg_; }
  int64_t step_count() const { return step_; }
  std::vector<float>& moment1(const std::string& name) { return m_.at(name); }
  std::vector<float>& moment2(const std::string& name) { return v_.at(name); }
  void set_step_count(int64_t s) { step_ = s; }

  // One update over all parameters; requires every gradient present, and
  // clears gradients afterwards.
  void step(ParamStore& params) {
    for (const auto& [name, t] : params.entries())
      if (!t.has_grad()) throw TensorError("adam_step: parameter '" + name + "' has no gradient");
    ++step_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(step_));
    for (auto& [name, t] : params.entries() /* const map, mutate via node */) {
      auto g = t.grad();
      auto& m = m_.at(name);
      auto& v = v_.at(name);
      float* w = t.node()->value.data();
      for (size_t i = 0; i < g.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0f - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0f - cfg_.beta2) * g[i] * g[i];
        const double mhat = static_cast<double>(m[i]) / bc1;
        const double vhat = static_cast<double>(v[i]) / bc2;
        w[i] -= static_cast<float>(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
    params.zero_grads();
  }

private:
  AdamConfig cfg_;
  int64_t step_ = 0;
  std::map<std::string, std::vector<float>> m_;
  std::map<std::string, std::vector<float>> v_;
};

}  // namespace maniflow
