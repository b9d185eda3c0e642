#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "maniflow/rng.hpp"

// Dense float32 tensors on a reverse-mode gradient tape. Row-major layout,
// explicit shapes, no implicit broadcasting beyond scalars. A tensor graph is
// confined to one thread; independent graphs may live on independent threads.

namespace maniflow {

struct TensorError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {

enum class OpKind : uint8_t {
  kLeaf,
  kAdd,
  kAddScalar,   // tensor + scalar
  kSub,
  kSubScalarR,  // tensor - scalar
  kSubScalarL,  // scalar - tensor
  kScalarMul,   // constant * tensor
  kMul,
  kMulScalar,   // tensor * scalar tensor
  kMatmul,
  kTranspose,
  kReshape,
  kConcat,
  kSlice,
  kRepeat,
  kSum,
  kMean,
  kRelu,
  kGelu,
  kTanh,
  kSoftmax,
  kLayerNorm,
  kEmbedding,
  kAddRowvec,
};

struct OpMeta {
  int axis = 0;
  int start = 0;
  int len = 0;
  float fval = 0.0f;
  std::vector<int> indices;  // embedding lookup rows
};

struct Node {
  OpKind kind = OpKind::kLeaf;
  OpMeta meta;
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0f);
  }
};

using NodePtr = std::shared_ptr<Node>;

// ---- kernels, shared between the float engine and the double-precision
// ---- replay used by finite-difference checks

template <class T>
void gemm_nn(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* ar = a + static_cast<int64_t>(i) * k;
    T* cr = c + static_cast<int64_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const T av = ar[p];
      const T* br = b + static_cast<int64_t>(p) * n;
      for (int j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

// c[ra, rb] += dot(a_row_i, b_row_j), shared inner dim k
template <class T>
void gemm_nt(const T* a, const T* b, T* c, int ra, int rb, int k) {
  for (int i = 0; i < ra; ++i) {
    const T* ar = a + static_cast<int64_t>(i) * k;
    T* cr = c + static_cast<int64_t>(i) * rb;
    for (int j = 0; j < rb; ++j) {
      const T* br = b + static_cast<int64_t>(j) * k;
      T acc = 0;
      for (int p = 0; p < k; ++p) acc += ar[p] * br[p];
      cr[j] += acc;
    }
  }
}

// c[k, n] += a^T b with a[m, k], b[m, n]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* ar = a + static_cast<int64_t>(i) * k;
    const T* br = b + static_cast<int64_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const T av = ar[p];
      T* cr = c + static_cast<int64_t>(p) * n;
      for (int j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

template <class T>
struct PView {
  const std::vector<T>* v;
  const Shape* s;
};

inline void axis_spans(const Shape& s, int axis, int64_t& outer, int64_t& inner) {
  outer = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  inner = 1;
  for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

template <class T>
void eval_op(OpKind kind, const OpMeta& meta, const Shape& oshape,
             const std::vector<PView<T>>& p, std::vector<T>& out) {
  const int64_t n_out = static_cast<int64_t>(out.size());
  switch (kind) {
    case OpKind::kLeaf:
      return;
    case OpKind::kAdd: {
      const auto& a = *p[0].v;
      const auto& b = *p[1].v;
      for (int64_t i = 0; i < n_out; ++i) out[i] = a[i] + b[i];
      return;
    }
    case OpKind::kAddScalar: {
      const auto& a = *p[0].v;
      const T s = (*p[1].v)[0];
      for (int64_t i = 0; i < n_out; ++i) out[i] = a[i] + s;
      return;
    }
    case OpKind::kSub: {
      const auto& a = *p[0].v;
      const auto& b = *p[1].v;
      for (int64_t i = 0; i < n_out; ++i) out[i] = a[i] - b[i];
      return;
    }
    case OpKind::kSubScalarR: {
      const auto& a = *p[0].v;
      const T s = (*p[1].v)[0];
      for (int64_t i = 0; i < n_out; ++i) out[i] = a[i] - s;
      return;
    }
    case OpKind::kSubScalarL: {
      const auto& a = *p[0].v;
      const T s = (*p[1].v)[0];
      for (int64_t i = 0; i < n_out; ++i) out[i] = s - a[i];
      return;
    }
    case OpKind::kScalarMul: {
      const auto& a = *p[0].v;
      const T c = static_cast<T>(meta.fval);
      for (int64_t i = 0; i < n_out; ++i) out[i] = c * a[i];
      return;
    }
    case OpKind::kMul: {
      const auto& a = *p[0].v;
      const auto& b = *p[1].v;
      for (int64_t i = 0; i < n_out; ++i) out[i] = a[i] * b[i];
      return;
    }
    case OpKind::kMulScalar: {
      const auto& a = *p[0].v;
      const T s = (*p[1].v)[0];
      for (int64_t i = 0; i < n_out; ++i) out[i] = a[i] * s;
      return;
    }
    case OpKind::kMatmul: {
      const Shape& sa = *p[0].s;
      const Shape& sb = *p[1].s;
      const T* a = p[0].v->data();
      const T* b = p[1].v->data();
      T* c = out.data();
      if (sa.size() == 2) {
        gemm_nn(a, b, c, sa[0], sa[1], sb[1]);
      } else if (sb.size() == 3) {  // [B,m,k] x [B,k,n]
        const int B = sa[0], m = sa[1], k = sa[2], nn = sb[2];
        for (int bi = 0; bi < B; ++bi)
          gemm_nn(a + static_cast<int64_t>(bi) * m * k, b + static_cast<int64_t>(bi) * k * nn,
                  c + static_cast<int64_t>(bi) * m * nn, m, k, nn);
      } else {  // [B,m,k] x [k,n]
        const int B = sa[0], m = sa[1], k = sa[2], nn = sb[1];
        gemm_nn(a, b, c, B * m, k, nn);
      }
      return;
    }
    case OpKind::kTranspose: {
      const Shape& sa = *p[0].s;
      const auto& a = *p[0].v;
      const int m = sa[sa.size() - 2], n = sa[sa.size() - 1];
      const int64_t batch = (sa.size() == 3) ? sa[0] : 1;
      for (int64_t bi = 0; bi < batch; ++bi) {
        const T* ab = a.data() + bi * m * n;
        T* ob = out.data() + bi * m * n;
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) ob[static_cast<int64_t>(j) * m + i] = ab[static_cast<int64_t>(i) * n + j];
      }
      return;
    }
    case OpKind::kReshape: {
      const auto& a = *p[0].v;
      for (int64_t i = 0; i < n_out; ++i) out[i] = a[i];
      return;
    }
    case OpKind::kConcat: {
      int64_t outer, inner;
      axis_spans(oshape, meta.axis, outer, inner);
      const int64_t ostride = oshape[meta.axis] * inner;
      int64_t off = 0;
      for (const auto& part : p) {
        const int64_t pblock = (*part.s)[meta.axis] * inner;
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t i = 0; i < pblock; ++i) out[o * ostride + off + i] = (*part.v)[o * pblock + i];
        off += pblock;
      }
      return;
    }
    case OpKind::kSlice: {
      const Shape& sa = *p[0].s;
      int64_t outer, inner;
      axis_spans(sa, meta.axis, outer, inner);
      const int64_t astride = sa[meta.axis] * inner;
      const int64_t oblock = static_cast<int64_t>(meta.len) * inner;
      const auto& a = *p[0].v;
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < oblock; ++i) out[o * oblock + i] = a[o * astride + meta.start * inner + i];
      return;
    }
    case OpKind::kRepeat: {
      const Shape& sa = *p[0].s;
      int64_t outer, inner;
      axis_spans(sa, meta.axis, outer, inner);
      const auto& a = *p[0].v;
      const int times = oshape[meta.axis];
      for (int64_t o = 0; o < outer; ++o)
        for (int t = 0; t < times; ++t)
          for (int64_t i = 0; i < inner; ++i) out[(o * times + t) * inner + i] = a[o * inner + i];
      return;
    }
    case OpKind::kSum:
    case OpKind::kMean: {
      const auto& a = *p[0].v;
      double acc = 0.0;
      for (const T x : a) acc += static_cast<double>(x);
      if (kind == OpKind::kMean) acc /= static_cast<double>(a.size());
      out[0] = static_cast<T>(acc);
      return;
    }
    case OpKind::kRelu: {
      const auto& a = *p[0].v;
      for (int64_t i = 0; i < n_out; ++i) out[i] = a[i] > T(0) ? a[i] : T(0);
      return;
    }
    case OpKind::kGelu: {
      const auto& a = *p[0].v;
      for (int64_t i = 0; i < n_out; ++i) {
        const double x = static_cast<double>(a[i]);
        out[i] = static_cast<T>(0.5 * x * (1.0 + std::erf(x * 0.7071067811865476)));
      }
      return;
    }
    case OpKind::kTanh: {
      const auto& a = *p[0].v;
      for (int64_t i = 0; i < n_out; ++i) out[i] = static_cast<T>(std::tanh(static_cast<double>(a[i])));
      return;
    }
    case OpKind::kSoftmax: {
      const Shape& sa = *p[0].s;
      const int64_t inner = sa.back();
      const int64_t rows = n_out / inner;
      const auto& a = *p[0].v;
      std::vector<double> e(inner);
      for (int64_t r = 0; r < rows; ++r) {
        const T* row = a.data() + r * inner;
        double mx = static_cast<double>(row[0]);
        for (int64_t i = 1; i < inner; ++i) mx = std::max(mx, static_cast<double>(row[i]));
        double s = 0.0;
        for (int64_t i = 0; i < inner; ++i) {
          e[i] = std::exp(static_cast<double>(row[i]) - mx);
          s += e[i];
        }
        for (int64_t i = 0; i < inner; ++i) out[r * inner + i] = static_cast<T>(e[i] / s);
      }
      return;
    }
    case OpKind::kLayerNorm: {
      const Shape& sa = *p[0].s;
      const int64_t inner = sa.back();
      const int64_t rows = n_out / inner;
      const auto& a = *p[0].v;
      const double eps = static_cast<double>(meta.fval);
      for (int64_t r = 0; r < rows; ++r) {
        const T* row = a.data() + r * inner;
        double mu = 0.0;
        for (int64_t i = 0; i < inner; ++i) mu += static_cast<double>(row[i]);
        mu /= static_cast<double>(inner);
        double var = 0.0;
        for (int64_t i = 0; i < inner; ++i) {
          const double d = static_cast<double>(row[i]) - mu;
          var += d * d;
        }
        var /= static_cast<double>(inner);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int64_t i = 0; i < inner; ++i)
          out[r * inner + i] = static_cast<T>((static_cast<double>(row[i]) - mu) * inv);
      }
      return;
    }
    case OpKind::kEmbedding: {
      const Shape& st = *p[0].s;
      const int64_t d = st[1];
      const auto& table = *p[0].v;
      for (size_t r = 0; r < meta.indices.size(); ++r) {
        const int64_t src = static_cast<int64_t>(meta.indices[r]) * d;
        for (int64_t i = 0; i < d; ++i) out[r * d + i] = table[src + i];
      }
      return;
    }
    case OpKind::kAddRowvec: {
      const auto& a = *p[0].v;
      const auto& v = *p[1].v;
      const int64_t d = static_cast<int64_t>(v.size());
      const int64_t rows = n_out / d;
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t i = 0; i < d; ++i) out[r * d + i] = a[r * d + i] + v[i];
      return;
    }
  }
}

void backprop_node(Node& n);  // defined below

}  // namespace detail

class Tensor {
public:
  Tensor() = default;
  explicit Tensor(detail::NodePtr n) : n_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return leaf(std::move(shape), requires_grad);
  }
  static Tensor full(Shape shape, float v, bool requires_grad = false) {
    Tensor t = leaf(std::move(shape), requires_grad);
    for (auto& x : t.n_->value) x = v;
    return t;
  }
  static Tensor scalar(float v, bool requires_grad = false) { return full({1}, v, requires_grad); }
  static Tensor from_data(Shape shape, std::vector<float> data, bool requires_grad = false) {
    if (numel_of(shape) != static_cast<int64_t>(data.size()))
      throw TensorError("from_data: shape " + shape_str(shape) + " does not hold " +
                        std::to_string(data.size()) + " values");
    Tensor t = leaf(std::move(shape), requires_grad);
    t.n_->value = std::move(data);
    return t;
  }
  static Tensor randn(Shape shape, RngStream& rng, float stddev = 1.0f, bool requires_grad = false) {
    Tensor t = leaf(std::move(shape), requires_grad);
    for (auto& x : t.n_->value) x = stddev * static_cast<float>(rng.next_gaussian());
    return t;
  }
  static Tensor rand_uniform(Shape shape, RngStream& rng, float lo, float hi,
                             bool requires_grad = false) {
    Tensor t = leaf(std::move(shape), requires_grad);
    for (auto& x : t.n_->value) x = lo + (hi - lo) * rng.next_float();
    return t;
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int64_t numel() const { return n_->numel(); }
  std::span<const float> values() const { return {n_->value.data(), n_->value.size()}; }
  bool requires_grad() const { return n_->requires_grad; }
  bool has_grad() const { return !n_->grad.empty(); }
  std::span<const float> grad() const { return {n_->grad.data(), n_->grad.size()}; }

  float item() const {
    if (numel() != 1) throw TensorError("item: tensor has shape " + shape_str(shape()));
    return n_->value[0];
  }

  void zero_grad() const { n_->grad.clear(); }

  // Value copy detached from the tape; never receives gradient.
  Tensor detach() const {
    Tensor t = leaf(n_->shape, false);
    t.n_->value = n_->value;
    return t;
  }

  detail::Node* node() const { return n_.get(); }
  const detail::NodePtr& node_ptr() const { return n_; }

private:
  static Tensor leaf(Shape shape, bool requires_grad) {
    for (int d : shape)
      if (d <= 0) throw TensorError("tensor extents must be positive, got " + shape_str(shape));
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value.assign(static_cast<size_t>(numel_of(n->shape)), 0.0f);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  detail::NodePtr n_;
};

namespace detail {

inline Tensor make_op(OpKind kind, OpMeta meta, Shape oshape, std::vector<NodePtr> parents) {
  auto n = std::make_shared<Node>();
  n->kind = kind;
  n->meta = std::move(meta);
  n->shape = std::move(oshape);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  std::vector<PView<float>> pv;
  pv.reserve(n->parents.size());
  for (const auto& p : n->parents) pv.push_back({&p->value, &p->shape});
  n->value.assign(static_cast<size_t>(numel_of(n->shape)), 0.0f);
  eval_op<float>(n->kind, n->meta, n->shape, pv, n->value);
  if (!n->requires_grad) {
    // outside the tape: keep only the value
    n->parents.clear();
    n->kind = OpKind::kLeaf;
    n->meta = OpMeta{};
  }
  return Tensor(std::move(n));
}

inline void check_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b)
    throw TensorError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace detail

// ---- op surface ----

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape())
    return detail::make_op(detail::OpKind::kAdd, {}, a.shape(), {a.node_ptr(), b.node_ptr()});
  if (b.numel() == 1)
    return detail::make_op(detail::OpKind::kAddScalar, {}, a.shape(), {a.node_ptr(), b.node_ptr()});
  if (a.numel() == 1)
    return detail::make_op(detail::OpKind::kAddScalar, {}, b.shape(), {b.node_ptr(), a.node_ptr()});
  throw TensorError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape())
    return detail::make_op(detail::OpKind::kSub, {}, a.shape(), {a.node_ptr(), b.node_ptr()});
  if (b.numel() == 1)
    return detail::make_op(detail::OpKind::kSubScalarR, {}, a.shape(), {a.node_ptr(), b.node_ptr()});
  if (a.numel() == 1)
    return detail::make_op(detail::OpKind::kSubScalarL, {}, b.shape(), {b.node_ptr(), a.node_ptr()});
  throw TensorError("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline Tensor scalar_mul(const Tensor& a, float c) {
  detail::OpMeta m;
  m.fval = c;
  return detail::make_op(detail::OpKind::kScalarMul, std::move(m), a.shape(), {a.node_ptr()});
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape())
    return detail::make_op(detail::OpKind::kMul, {}, a.shape(), {a.node_ptr(), b.node_ptr()});
  if (b.numel() == 1)
    return detail::make_op(detail::OpKind::kMulScalar, {}, a.shape(), {a.node_ptr(), b.node_ptr()});
  if (a.numel() == 1)
    return detail::make_op(detail::OpKind::kMulScalar, {}, b.shape(), {b.node_ptr(), a.node_ptr()});
  throw TensorError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// 2D x 2D, [B,m,k] x [B,k,n], or [B,m,k] x [k,n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const auto fail = [&] {
    throw TensorError("matmul: incompatible shapes " + shape_str(sa) + " vs " + shape_str(sb));
  };
  Shape out;
  if (sa.size() == 2 && sb.size() == 2) {
    if (sa[1] != sb[0]) fail();
    out = {sa[0], sb[1]};
  } else if (sa.size() == 3 && sb.size() == 3) {
    if (sa[0] != sb[0] || sa[2] != sb[1]) fail();
    out = {sa[0], sa[1], sb[2]};
  } else if (sa.size() == 3 && sb.size() == 2) {
    if (sa[2] != sb[0]) fail();
    out = {sa[0], sa[1], sb[1]};
  } else {
    fail();
  }
  return detail::make_op(detail::OpKind::kMatmul, {}, std::move(out), {a.node_ptr(), b.node_ptr()});
}

// swap the last two axes (rank 2 or 3)
inline Tensor transpose(const Tensor& a) {
  const Shape& s = a.shape();
  if (s.size() != 2 && s.size() != 3)
    throw TensorError("transpose: need rank 2 or 3, got " + shape_str(s));
  Shape out = s;
  std::swap(out[out.size() - 1], out[out.size() - 2]);
  return detail::make_op(detail::OpKind::kTranspose, {}, std::move(out), {a.node_ptr()});
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel())
    throw TensorError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape) +
                      " changes element count");
  return detail::make_op(detail::OpKind::kReshape, {}, std::move(shape), {a.node_ptr()});
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw TensorError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis < 0 || axis >= static_cast<int>(s0.size()))
    throw TensorError("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(s0));
  Shape out = s0;
  out[axis] = 0;
  std::vector<detail::NodePtr> ps;
  for (const auto& t : parts) {
    const Shape& s = t.shape();
    if (s.size() != s0.size())
      throw TensorError("concat: rank mismatch " + shape_str(s0) + " vs " + shape_str(s));
    for (size_t i = 0; i < s.size(); ++i)
      if (static_cast<int>(i) != axis && s[i] != s0[i])
        throw TensorError("concat: shape mismatch " + shape_str(s0) + " vs " + shape_str(s));
    out[axis] += s[axis];
    ps.push_back(t.node_ptr());
  }
  detail::OpMeta m;
  m.axis = axis;
  return detail::make_op(detail::OpKind::kConcat, std::move(m), std::move(out), std::move(ps));
}

inline Tensor slice(const Tensor& a, int axis, int start, int len) {
  const Shape& s = a.shape();
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw TensorError("slice: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  if (len < 1 || start < 0 || start + len > s[axis])
    throw TensorError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                      ") invalid for axis " + std::to_string(axis) + " of " + shape_str(s));
  Shape out = s;
  out[axis] = len;
  detail::OpMeta m;
  m.axis = axis;
  m.start = start;
  m.len = len;
  return detail::make_op(detail::OpKind::kSlice, std::move(m), std::move(out), {a.node_ptr()});
}

// tile an axis of extent 1
inline Tensor repeat(const Tensor& a, int axis, int times) {
  const Shape& s = a.shape();
  if (axis < 0 || axis >= static_cast<int>(s.size()) || s[axis] != 1)
    throw TensorError("repeat: axis " + std::to_string(axis) + " of " + shape_str(s) +
                      " must exist with extent 1");
  if (times < 1) throw TensorError("repeat: times must be >= 1");
  Shape out = s;
  out[axis] = times;
  detail::OpMeta m;
  m.axis = axis;
  return detail::make_op(detail::OpKind::kRepeat, std::move(m), std::move(out), {a.node_ptr()});
}

inline Tensor sum(const Tensor& a) {
  return detail::make_op(detail::OpKind::kSum, {}, {1}, {a.node_ptr()});
}
inline Tensor mean(const Tensor& a) {
  return detail::make_op(detail::OpKind::kMean, {}, {1}, {a.node_ptr()});
}

inline Tensor relu(const Tensor& a) {
  return detail::make_op(detail::OpKind::kRelu, {}, a.shape(), {a.node_ptr()});
}
inline Tensor gelu(const Tensor& a) {
  return detail::make_op(detail::OpKind::kGelu, {}, a.shape(), {a.node_ptr()});
}
inline Tensor tanh_act(const Tensor& a) {
  return detail::make_op(detail::OpKind::kTanh, {}, a.shape(), {a.node_ptr()});
}

inline Tensor softmax_lastdim(const Tensor& a) {
  if (a.shape().empty()) throw TensorError("softmax: rank must be >= 1");
  return detail::make_op(detail::OpKind::kSoftmax, {}, a.shape(), {a.node_ptr()});
}

inline Tensor layer_norm_lastdim(const Tensor& a, float eps = 1e-5f) {
  if (a.shape().empty()) throw TensorError("layer_norm: rank must be >= 1");
  detail::OpMeta m;
  m.fval = eps;
  return detail::make_op(detail::OpKind::kLayerNorm, std::move(m), a.shape(), {a.node_ptr()});
}

inline Tensor embedding_lookup(const Tensor& table, std::vector<int> indices) {
  const Shape& s = table.shape();
  if (s.size() != 2) throw TensorError("embedding_lookup: table must be rank 2, got " + shape_str(s));
  for (int idx : indices)
    if (idx < 0 || idx >= s[0])
      throw TensorError("embedding_lookup: index " + std::to_string(idx) + " out of range for " +
                        shape_str(s));
  Shape out = {static_cast<int>(indices.size()), s[1]};
  detail::OpMeta m;
  m.indices = std::move(indices);
  return detail::make_op(detail::OpKind::kEmbedding, std::move(m), std::move(out),
                         {table.node_ptr()});
}

// add a vector of width d to every trailing row of x
inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  const Shape& sx = x.shape();
  const Shape& sv = v.shape();
  if (sv.size() != 1 || sx.empty() || sx.back() != sv[0])
    throw TensorError("add_rowvec: shape mismatch " + shape_str(sx) + " vs " + shape_str(sv));
  return detail::make_op(detail::OpKind::kAddRowvec, {}, sx, {x.node_ptr(), v.node_ptr()});
}

// sinusoidal features of a scalar in [0,1]: geometric frequency ladder over
// [1, 1000], sines in the first half, cosines in the second
inline Tensor sinusoidal_features(float value, int dim) {
  if (dim < 2 || dim % 2 != 0) throw TensorError("sinusoidal_features: dim must be even and >= 2");
  const int half = dim / 2;
  std::vector<float> out(static_cast<size_t>(dim));
  for (int j = 0; j < half; ++j) {
    const double freq = half == 1 ? 1.0 : std::pow(1000.0, static_cast<double>(j) / (half - 1));
    out[j] = static_cast<float>(std::sin(freq * value));
    out[half + j] = static_cast<float>(std::cos(freq * value));
  }
  return Tensor::from_data({dim}, std::move(out));
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(float c, const Tensor& a) { return scalar_mul(a, c); }
inline Tensor operator*(const Tensor& a, float c) { return scalar_mul(a, c); }

// ---- reverse pass ----

namespace detail {

inline void backprop_node(Node& n) {
  const auto& g = n.grad;
  auto& P = n.parents;
  const auto pgrad = [&](size_t i) -> std::vector<float>& {
    P[i]->ensure_grad();
    return P[i]->grad;
  };
  const auto wants = [&](size_t i) { return P[i]->requires_grad; };
  const int64_t ng = static_cast<int64_t>(g.size());

  switch (n.kind) {
    case OpKind::kLeaf:
      return;
    case OpKind::kAdd: {
      for (size_t s = 0; s < 2; ++s)
        if (wants(s)) {
          auto& d = pgrad(s);
          for (int64_t i = 0; i < ng; ++i) d[i] += g[i];
        }
      return;
    }
    case OpKind::kAddScalar: {
      if (wants(0)) {
        auto& d = pgrad(0);
        for (int64_t i = 0; i < ng; ++i) d[i] += g[i];
      }
      if (wants(1)) {
        double acc = 0.0;
        for (int64_t i = 0; i < ng; ++i) acc += g[i];
        pgrad(1)[0] += static_cast<float>(acc);
      }
      return;
    }
    case OpKind::kSub: {
      if (wants(0)) {
        auto& d = pgrad(0);
        for (int64_t i = 0; i < ng; ++i) d[i] += g[i];
      }
      if (wants(1)) {
        auto& d = pgrad(1);
        for (int64_t i = 0; i < ng; ++i) d[i] -= g[i];
      }
      return;
    }
    case OpKind::kSubScalarR:
    case OpKind::kSubScalarL: {
      const float sign = n.kind == OpKind::kSubScalarR ? 1.0f : -1.0f;
      if (wants(0)) {
        auto& d = pgrad(0);
        for (int64_t i = 0; i < ng; ++i) d[i] += sign * g[i];
      }
      if (wants(1)) {
        double acc = 0.0;
        for (int64_t i = 0; i < ng; ++i) acc += g[i];
        pgrad(1)[0] += static_cast<float>(-sign * acc);
      }
      return;
    }
    case OpKind::kScalarMul: {
      if (wants(0)) {
        auto& d = pgrad(0);
        for (int64_t i = 0; i < ng; ++i) d[i] += n.meta.fval * g[i];
      }
      return;
    }
    case OpKind::kMul: {
      if (wants(0)) {
        auto& d = pgrad(0);
        const auto& b = P[1]->value;
        for (int64_t i = 0; i < ng; ++i) d[i] += b[i] * g[i];
      }
      if (wants(1)) {
        auto& d = pgrad(1);
        const auto& a = P[0]->value;
        for (int64_t i = 0; i < ng; ++i) d[i] += a[i] * g[i];
      }
      return;
    }
    case OpKind::kMulScalar: {
      const float s = P[1]->value[0];
      if (wants(0)) {
        auto& d = pgrad(0);
        for (int64_t i = 0; i < ng; ++i) d[i] += s * g[i];
      }
      if (wants(1)) {
        double acc = 0.0;
        const auto& a = P[0]->value;
        for (int64_t i = 0; i < ng; ++i) acc += static_cast<double>(a[i]) * g[i];
        pgrad(1)[0] += static_cast<float>(acc);
      }
      return;
    }
    case OpKind::kMatmul: {
      const Shape& sa = P[0]->shape;
      const Shape& sb = P[1]->shape;
      const float* A = P[0]->value.data();
      const float* B = P[1]->value.data();
      const float* G = g.data();
      if (sa.size() == 2) {
        const int m = sa[0], k = sa[1], nn = sb[1];
        if (wants(0)) gemm_nt(G, B, pgrad(0).data(), m, k, nn);
        if (wants(1)) gemm_tn(A, G, pgrad(1).data(), m, k, nn);
      } else if (sb.size() == 3) {
        const int Bn = sa[0], m = sa[1], k = sa[2], nn = sb[2];
        for (int bi = 0; bi < Bn; ++bi) {
          const int64_t ao = static_cast<int64_t>(bi) * m * k;
          const int64_t bo = static_cast<int64_t>(bi) * k * nn;
          const int64_t go = static_cast<int64_t>(bi) * m * nn;
          if (wants(0)) gemm_nt(G + go, B + bo, pgrad(0).data() + ao, m, k, nn);
          if (wants(1)) gemm_tn(A + ao, G + go, pgrad(1).data() + bo, m, k, nn);
        }
      } else {
        const int Bn = sa[0], m = sa[1], k = sa[2], nn = sb[1];
        if (wants(0)) gemm_nt(G, B, pgrad(0).data(), Bn * m, k, nn);
        if (wants(1)) gemm_tn(A, G, pgrad(1).data(), Bn * m, k, nn);
      }
      return;
    }
    case OpKind::kTranspose: {
      if (!wants(0)) return;
      const Shape& so = n.shape;
      const int m = so[so.size() - 2], nn = so[so.size() - 1];
      const int64_t batch = (so.size() == 3) ? so[0] : 1;
      auto& d = pgrad(0);
      for (int64_t bi = 0; bi < batch; ++bi) {
        const float* gb = g.data() + bi * m * nn;
        float* db = d.data() + bi * m * nn;
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < nn; ++j) db[static_cast<int64_t>(j) * m + i] += gb[static_cast<int64_t>(i) * nn + j];
      }
      return;
    }
    case OpKind::kReshape: {
      if (!wants(0)) return;
      auto& d = pgrad(0);
      for (int64_t i = 0; i < ng; ++i) d[i] += g[i];
      return;
    }
    case OpKind::kConcat: {
      int64_t outer, inner;
      axis_spans(n.shape, n.meta.axis, outer, inner);
      const int64_t ostride = n.shape[n.meta.axis] * inner;
      int64_t off = 0;
      for (size_t s = 0; s < P.size(); ++s) {
        const int64_t pblock = P[s]->shape[n.meta.axis] * inner;
        if (wants(s)) {
          auto& d = pgrad(s);
          for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < pblock; ++i) d[o * pblock + i] += g[o * ostride + off + i];
        }
        off += pblock;
      }
      return;
    }
    case OpKind::kSlice: {
      if (!wants(0)) return;
      const Shape& sa = P[0]->shape;
      int64_t outer, inner;
      axis_spans(sa, n.meta.axis, outer, inner);
      const int64_t astride = sa[n.meta.axis] * inner;
      const int64_t oblock = static_cast<int64_t>(n.meta.len) * inner;
      auto& d = pgrad(0);
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < oblock; ++i) d[o * astride + n.meta.start * inner + i] += g[o * oblock + i];
      return;
    }
    case OpKind::kRepeat: {
      if (!wants(0)) return;
      const Shape& sa = P[0]->shape;
      int64_t outer, inner;
      axis_spans(sa, n.meta.axis, outer, inner);
      const int times = n.shape[n.meta.axis];
      auto& d = pgrad(0);
      for (int64_t o = 0; o < outer; ++o)
        for (int t = 0; t < times; ++t)
          for (int64_t i = 0; i < inner; ++i) d[o * inner + i] += g[(o * times + t) * inner + i];
      return;
    }
    case OpKind::kSum: {
      if (!wants(0)) return;
      auto& d = pgrad(0);
      const float g0 = g[0];
      for (auto& x : d) x += g0;
      return;
    }
    case OpKind::kMean: {
      if (!wants(0)) return;
      auto& d = pgrad(0);
      const float g0 = g[0] / static_cast<float>(P[0]->numel());
      for (auto& x : d) x += g0;
      return;
    }
    case OpKind::kRelu: {
      if (!wants(0)) return;
      auto& d = pgrad(0);
      const auto& a = P[0]->value;
      for (int64_t i = 0; i < ng; ++i)
        if (a[i] > 0.0f) d[i] += g[i];
      return;
    }
    case OpKind::kGelu: {
      if (!wants(0)) return;
      auto& d = pgrad(0);
      const auto& a = P[0]->value;
      for (int64_t i = 0; i < ng; ++i) {
        const double x = static_cast<double>(a[i]);
        const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865476));
        const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014327;
        d[i] += static_cast<float>(cdf + x * pdf) * g[i];
      }
      return;
    }
    case OpKind::kTanh: {
      if (!wants(0)) return;
      auto& d = pgrad(0);
      const auto& y = n.value;
      for (int64_t i = 0; i < ng; ++i) d[i] += (1.0f - y[i] * y[i]) * g[i];
      return;
    }
    case OpKind::kSoftmax: {
      if (!wants(0)) return;
      const int64_t inner = n.shape.back();
      const int64_t rows = ng / inner;
      auto& d = pgrad(0);
      const auto& y = n.value;
      for (int64_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (int64_t i = 0; i < inner; ++i)
          dot += static_cast<double>(g[r * inner + i]) * y[r * inner + i];
        for (int64_t i = 0; i < inner; ++i)
          d[r * inner + i] += y[r * inner + i] * (g[r * inner + i] - static_cast<float>(dot));
      }
      return;
    }
    case OpKind::kLayerNorm: {
      if (!wants(0)) return;
      const int64_t inner = n.shape.back();
      const int64_t rows = ng / inner;
      auto& d = pgrad(0);
      const auto& x = P[0]->value;
      const auto& y = n.value;
      const double eps = static_cast<double>(n.meta.fval);
      for (int64_t r = 0; r < rows; ++r) {
        double mu = 0.0, var = 0.0;
        for (int64_t i = 0; i < inner; ++i) mu += static_cast<double>(x[r * inner + i]);
        mu /= static_cast<double>(inner);
        for (int64_t i = 0; i < inner; ++i) {
          const double dx = static_cast<double>(x[r * inner + i]) - mu;
          var += dx * dx;
        }
        var /= static_cast<double>(inner);
        const double inv = 1.0 / std::sqrt(var + eps);
        double mg = 0.0, mgy = 0.0;
        for (int64_t i = 0; i < inner; ++i) {
          mg += static_cast<double>(g[r * inner + i]);
          mgy += static_cast<double>(g[r * inner + i]) * y[r * inner + i];
        }
        mg /= static_cast<double>(inner);
        mgy /= static_cast<double>(inner);
        for (int64_t i = 0; i < inner; ++i)
          d[r * inner + i] += static_cast<float>(
              inv * (static_cast<double>(g[r * inner + i]) - mg - y[r * inner + i] * mgy));
      }
      return;
    }
    case OpKind::kEmbedding: {
      if (!wants(0)) return;
      const int64_t dcols = P[0]->shape[1];
      auto& d = pgrad(0);
      for (size_t r = 0; r < n.meta.indices.size(); ++r) {
        const int64_t dst = static_cast<int64_t>(n.meta.indices[r]) * dcols;
        for (int64_t i = 0; i < dcols; ++i) d[dst + i] += g[r * dcols + i];
      }
      return;
    }
    case OpKind::kAddRowvec: {
      const int64_t dcols = P[1]->shape[0];
      const int64_t rows = ng / dcols;
      if (wants(0)) {
        auto& d = pgrad(0);
        for (int64_t i = 0; i < ng; ++i) d[i] += g[i];
      }
      if (wants(1)) {
        auto& d = pgrad(1);
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t i = 0; i < dcols; ++i) d[i] += g[r * dcols + i];
      }
      return;
    }
  }
}

inline std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    Node* n = stack.back().first;
    size_t& i = stack.back().second;
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace detail

// Populates gradients of every grad-requiring leaf reachable from `loss`.
// Interior gradients are rebuilt per call; leaf gradients accumulate across
// calls until cleared.
inline void backward(const Tensor& loss) {
  detail::Node* root = loss.node();
  if (root->numel() != 1)
    throw TensorError("backward: loss must be scalar, got shape " + shape_str(root->shape));
  if (!root->requires_grad)
    throw TensorError("backward: loss is not connected to any gradient-requiring tensor");
  auto order = detail::topo_order(root);
  for (detail::Node* n : order)
    if (n->kind != detail::OpKind::kLeaf) n->grad.assign(n->value.size(), 0.0f);
  root->ensure_grad();
  root->grad[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->requires_grad && !n->parents.empty()) detail::backprop_node(*n);
  }
}

}  // namespace maniflow
