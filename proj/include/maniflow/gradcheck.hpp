#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "maniflow/tensor.hpp"

// Finite-difference gradient checking. The recorded graph is replayed in
// double precision with single leaf elements perturbed; central differences
// from that replay are the oracle for the float32 reverse pass.

namespace maniflow {

class DoubleReplay {
public:
  explicit DoubleReplay(const Tensor& root) : root_(root.node()) {
    order_ = detail::topo_order(root_);
    for (detail::Node* n : order_) slot_[n] = bufs_.size(), bufs_.emplace_back();
  }

  // f(leaves with leaf[elem] += delta), evaluated in double
  double eval(const detail::Node* leaf, int64_t elem, double delta) {
    for (detail::Node* n : order_) {
      auto& buf = bufs_[slot_[n]];
      if (n->parents.empty()) {
        buf.assign(n->value.begin(), n->value.end());
        if (n == leaf) buf[static_cast<size_t>(elem)] += delta;
      } else {
        std::vector<detail::PView<double>> pv;
        pv.reserve(n->parents.size());
        for (const auto& p : n->parents) pv.push_back({&bufs_[slot_[p.get()]], &p->shape});
        buf.assign(n->value.size(), 0.0);
        detail::eval_op<double>(n->kind, n->meta, n->shape, pv, buf);
      }
    }
    return bufs_[slot_[root_]][0];
  }

private:
  detail::Node* root_;
  std::vector<detail::Node*> order_;
  std::unordered_map<const detail::Node*, size_t> slot_;
  std::vector<std::vector<double>> bufs_;
};

struct GradCheckResult {
  // per-tensor relative error: ||analytic - fd||_inf / max(||analytic||_inf, ||fd||_inf)
  double max_rel_err = 0.0;
  std::string worst;  // name of the worst tensor when names are given
};

struct NamedLeaf {
  std::string name;
  Tensor tensor;
};

// Runs backward on `loss` and compares every leaf gradient against central
// finite differences of the double replay. Leaf grads are cleared first so
// the comparison sees exactly one backward pass.
inline GradCheckResult grad_check(const Tensor& loss, const std::vector<NamedLeaf>& leaves,
                                  double h = 1e-3) {
  for (const auto& l : leaves) l.tensor.zero_grad();
  backward(loss);
  DoubleReplay replay(loss);
  GradCheckResult res;
  for (const auto& l : leaves) {
    const detail::Node* node = l.tensor.node();
    auto g = l.tensor.grad();
    if (g.empty())
      throw TensorError("grad_check: leaf '" + l.name + "' received no gradient");
    double max_diff = 0.0, max_mag = 0.0;
    for (int64_t i = 0; i < l.tensor.numel(); ++i) {
      const double fp = replay.eval(node, i, h);
      const double fm = replay.eval(node, i, -h);
      const double fd = (fp - fm) / (2.0 * h);
      const double a = static_cast<double>(g[static_cast<size_t>(i)]);
      max_diff = std::max(max_diff, std::abs(a - fd));
      max_mag = std::max({max_mag, std::abs(a), std::abs(fd)});
    }
    const double rel = max_mag > 0.0 ? max_diff / max_mag : max_diff;
    if (rel > res.max_rel_err) {
      res.max_rel_err = rel;
      res.worst = l.name;
    }
  }
  return res;
}

}  // namespace maniflow
