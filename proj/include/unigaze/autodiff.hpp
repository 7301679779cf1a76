#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <initializer_list>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "unigaze/common.hpp"

/// Reverse-mode automatic differentiation over dense row-major arrays.
///
/// A Graph is a tape: every primitive appends a node whose inputs were
/// recorded earlier, so creation order is a topological order and backward
/// is a single reverse sweep. Instantiate with double for reference mode
/// (finite-difference checks, bit-exact reproducibility) and float for
/// throughput.
namespace unigaze::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// 64-byte aligned storage. Eigen peels vectorized reductions according to
/// the runtime alignment of the data, so unaligned heap blocks would make
/// sums differ in the last bit from one run to the next.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <typename T>
struct Tensor {
  Shape shape;
  Buffer<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(numel(shape), fill) {
    for (auto e : shape) {
      if (e == 0) throw ShapeError("Tensor: extents must be positive, got " + shape_str(shape));
    }
  }
  Tensor(Shape s, std::initializer_list<T> d) : Tensor(std::move(s), Buffer<T>(d)) {}
  Tensor(Shape s, const std::vector<T>& d) : Tensor(std::move(s), Buffer<T>(d.begin(), d.end())) {}
  Tensor(Shape s, Buffer<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel(shape)) {
      throw ShapeError("Tensor: " + std::to_string(data.size()) + " values for shape " +
                       shape_str(shape));
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, Buffer<T>{v}); }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  T& operator[](std::size_t i) { return data[i]; }
  T operator[](std::size_t i) const { return data[i]; }

  /// Row count and row width when viewed as a matrix over the first axis.
  std::size_t rows() const { return shape.front(); }
  std::size_t row_size() const { return data.size() / shape.front(); }

  bool operator==(const Tensor&) const = default;

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape, Buffer<U>(data.begin(), data.end()));
  }
};

enum class Op {
  leaf,
  matmul,
  add,
  sub,
  mul,
  scalar_mul,
  gelu,
  softmax,
  layer_norm,
  reshape,
  transpose,
  slice_rows,
  gather_rows,
  concat,
  mean,
  sum,
  square,
  abs,
};

template <typename T>
class Graph;

/// Handle to a node of a Graph.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  int id = -1;

  const Tensor<T>& value() const { return graph->value(*this); }
  const Shape& shape() const { return graph->value(*this).shape; }
};

template <typename T>
class Graph {
 public:
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapM = Eigen::Map<Mat>;
  using CMapM = Eigen::Map<const Mat>;
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  using MapA = Eigen::Map<Arr>;
  using CMapA = Eigen::Map<const Arr>;
  using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

  Var<T> leaf(Tensor<T> value, bool requires_grad) {
    Node n;
    n.op = Op::leaf;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }
  Var<T> param(Tensor<T> value) { return leaf(std::move(value), true); }
  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  const Tensor<T>& value(Var<T> v) const { return nodes_.at(static_cast<std::size_t>(v.id)).value; }

  /// Gradient of the last backward() target w.r.t. v; zeros when v was not
  /// reached.
  Tensor<T> grad(Var<T> v) const {
    const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
    if (n.grad.empty()) return Tensor<T>(n.value.shape, T(0));
    return Tensor<T>(n.value.shape, n.grad);
  }

  std::size_t size() const { return nodes_.size(); }
  Op op(Var<T> v) const { return nodes_.at(static_cast<std::size_t>(v.id)).op; }
  const std::vector<int>& inputs(Var<T> v) const {
    return nodes_.at(static_cast<std::size_t>(v.id)).inputs;
  }

  // -------------------------------------------------------------------------
  // Primitives

  /// [.., m, k] x [.., k, n] with equal leading extents, or [.., m, k] x [k, n]
  /// with the right operand shared across the leading axes.
  Var<T> matmul(Var<T> a, Var<T> b) {
    const Shape& sa = value(a).shape;
    const Shape& sb = value(b).shape;
    auto fail = [&] {
      throw ShapeError("matmul: incompatible shapes " + shape_str(sa) + " x " + shape_str(sb));
    };
    if (sa.size() < 2 || sb.size() < 2) fail();
    const std::size_t m = sa[sa.size() - 2], k = sa.back();
    if (sb[sb.size() - 2] != k) fail();
    const std::size_t n = sb.back();
    Shape out(sa.begin(), sa.end() - 1);
    out.push_back(n);
    Node node = make(Op::matmul, {a, b}, Tensor<T>(out));
    if (sb.size() == 2) {
      const std::size_t rows = value(a).size() / k;
      MapM(node.value.data.data(), rows, n).noalias() =
          CMapM(value(a).data.data(), rows, k) * CMapM(value(b).data.data(), k, n);
    } else {
      if (sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin())) fail();
      const std::size_t batch = value(a).size() / (m * k);
      for (std::size_t i = 0; i < batch; ++i) {
        MapM(node.value.data.data() + i * m * n, m, n).noalias() =
            CMapM(value(a).data.data() + i * m * k, m, k) *
            CMapM(value(b).data.data() + i * k * n, k, n);
      }
    }
    return push(std::move(node));
  }

  /// a x b^T over the last two axes: [.., m, k] x [.., n, k] -> [.., m, n],
  /// batched like matmul.
  Var<T> matmul_bt(Var<T> a, Var<T> b) {
    const Shape& sa = value(a).shape;
    const Shape& sb = value(b).shape;
    auto fail = [&] {
      throw ShapeError("matmul_bt: incompatible shapes " + shape_str(sa) + " x " + shape_str(sb) + "^T");
    };
    if (sa.size() < 2 || sb.size() < 2) fail();
    const std::size_t m = sa[sa.size() - 2], k = sa.back();
    if (sb.back() != k) fail();
    const std::size_t n = sb[sb.size() - 2];
    Shape out(sa.begin(), sa.end() - 1);
    out.push_back(n);
    Node node = make(Op::matmul, {a, b}, Tensor<T>(out));
    node.axis = 1;  // right operand transposed
    if (sb.size() == 2) {
      const std::size_t rows = value(a).size() / k;
      MapM(node.value.data.data(), rows, n).noalias() =
          CMapM(value(a).data.data(), rows, k) * CMapM(value(b).data.data(), n, k).transpose();
    } else {
      if (sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin())) fail();
      const std::size_t batch = value(a).size() / (m * k);
      for (std::size_t i = 0; i < batch; ++i) {
        MapM(node.value.data.data() + i * m * n, m, n).noalias() =
            CMapM(value(a).data.data() + i * m * k, m, k) *
            CMapM(value(b).data.data() + i * n * k, n, k).transpose();
      }
    }
    return push(std::move(node));
  }

  /// Elementwise a + b. b may match the trailing axes of a, in which case it
  /// is broadcast over the leading axes.
  Var<T> add(Var<T> a, Var<T> b) { return binary(Op::add, a, b); }
  Var<T> sub(Var<T> a, Var<T> b) { return binary(Op::sub, a, b); }
  Var<T> mul(Var<T> a, Var<T> b) { return binary(Op::mul, a, b); }

  Var<T> scalar_mul(Var<T> a, T s) {
    Node node = make(Op::scalar_mul, {a}, value(a));
    node.scalar = s;
    for (auto& x : node.value.data) x *= s;
    return push(std::move(node));
  }

  /// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
  Var<T> gelu(Var<T> a) {
    Node node = make(Op::gelu, {a}, value(a));
    const std::size_t n = node.value.size();
    CMapA x(value(a).data.data(), static_cast<Eigen::Index>(n));
    node.saved.resize(n);
    MapA th(node.saved.data(), static_cast<Eigen::Index>(n));
    th = (kGeluK * (x + kGeluC * x.cube())).tanh();
    MapA(node.value.data.data(), static_cast<Eigen::Index>(n)) = T(0.5) * x * (T(1) + th);
    return push(std::move(node));
  }

  Var<T> square(Var<T> a) {
    Node node = make(Op::square, {a}, value(a));
    for (auto& x : node.value.data) x = x * x;
    return push(std::move(node));
  }

  Var<T> abs(Var<T> a) {
    Node node = make(Op::abs, {a}, value(a));
    for (auto& x : node.value.data) x = std::abs(x);
    return push(std::move(node));
  }

  Var<T> softmax(Var<T> a, int axis = -1) {
    const Strides st = strides(value(a).shape, axis, "softmax");
    Node node = make(Op::softmax, {a}, value(a));
    node.axis = st.axis;
    T* y = node.value.data.data();
    if (st.inner == 1) {
      MapM ym(y, st.outer, st.len);
      const Eigen::Matrix<T, Eigen::Dynamic, 1> mx = ym.rowwise().maxCoeff();
      ym.colwise() -= mx;
      ym = ym.array().exp().matrix();
      const Eigen::Matrix<T, Eigen::Dynamic, 1> total = ym.rowwise().sum();
      ym.array().colwise() /= total.array();
      return push(std::move(node));
    }
    for_each_lane(st, [&](std::size_t base, std::size_t step) {
      T mx = y[base];
      for (std::size_t j = 1; j < st.len; ++j) mx = std::max(mx, y[base + j * step]);
      T total = 0;
      for (std::size_t j = 0; j < st.len; ++j) {
        T& e = y[base + j * step];
        e = std::exp(e - mx);
        total += e;
      }
      const T inv = T(1) / total;
      for (std::size_t j = 0; j < st.len; ++j) y[base + j * step] *= inv;
    });
    return push(std::move(node));
  }

  /// Standardizes along an axis with population variance; no affine terms.
  Var<T> layer_norm(Var<T> a, int axis = -1, T eps = T(1e-6)) {
    const Strides st = strides(value(a).shape, axis, "layer_norm");
    Node node = make(Op::layer_norm, {a}, value(a));
    node.axis = st.axis;
    node.scalar = eps;
    node.saved.assign(st.outer * st.inner, T(0));  // 1 / std per lane
    T* y = node.value.data.data();
    std::size_t lane = 0;
    for_each_lane(st, [&](std::size_t base, std::size_t step) {
      T mean = 0;
      for (std::size_t j = 0; j < st.len; ++j) mean += y[base + j * step];
      mean /= static_cast<T>(st.len);
      T var = 0;
      for (std::size_t j = 0; j < st.len; ++j) {
        const T d = y[base + j * step] - mean;
        var += d * d;
      }
      var /= static_cast<T>(st.len);
      const T rstd = T(1) / std::sqrt(var + eps);
      for (std::size_t j = 0; j < st.len; ++j) {
        T& e = y[base + j * step];
        e = (e - mean) * rstd;
      }
      node.saved[lane++] = rstd;
    });
    return push(std::move(node));
  }

  Var<T> reshape(Var<T> a, Shape shape) {
    if (numel(shape) != value(a).size()) {
      throw ShapeError("reshape: cannot view " + shape_str(value(a).shape) + " as " +
                       shape_str(shape));
    }
    Node node = make(Op::reshape, {a}, Tensor<T>(std::move(shape), value(a).data));
    return push(std::move(node));
  }

  /// Permutes axes: output axis i is input axis perm[i].
  Var<T> transpose(Var<T> a, std::vector<std::size_t> perm) {
    const Shape& s = value(a).shape;
    std::vector<std::size_t> check = perm;
    std::sort(check.begin(), check.end());
    bool ok = perm.size() == s.size();
    for (std::size_t i = 0; ok && i < check.size(); ++i) ok = check[i] == i;
    if (!ok) throw ShapeError("transpose: invalid permutation for shape " + shape_str(s));
    Shape out(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) out[i] = s[perm[i]];
    Node node = make(Op::transpose, {a}, Tensor<T>(out));
    permute(value(a).data.data(), s, perm, node.value.data.data(), false);
    node.ints = std::move(perm);
    return push(std::move(node));
  }

  /// Swaps the last two axes.
  Var<T> transpose_last(Var<T> a) {
    std::vector<std::size_t> perm(value(a).rank());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    if (perm.size() < 2) throw ShapeError("transpose_last: rank < 2");
    std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
    return transpose(a, std::move(perm));
  }

  Var<T> slice_rows(Var<T> a, std::size_t start, std::size_t count) {
    const Tensor<T>& x = value(a);
    if (count == 0 || start + count > x.rows()) {
      throw ShapeError("slice_rows: rows [" + std::to_string(start) + ", " +
                       std::to_string(start + count) + ") out of " + shape_str(x.shape));
    }
    Shape out = x.shape;
    out[0] = count;
    const std::size_t w = x.row_size();
    Node node = make(Op::slice_rows, {a},
                     Tensor<T>(out, Buffer<T>(x.data.begin() + static_cast<std::ptrdiff_t>(start * w),
                                                   x.data.begin() + static_cast<std::ptrdiff_t>((start + count) * w))));
    node.ints = {start};
    return push(std::move(node));
  }

  /// Selects rows along the first axis; indices may repeat.
  Var<T> gather_rows(Var<T> a, std::vector<std::size_t> idx) {
    const Tensor<T>& x = value(a);
    if (idx.empty()) throw ShapeError("gather_rows: empty index list");
    for (auto i : idx) {
      if (i >= x.rows()) {
        throw ShapeError("gather_rows: index " + std::to_string(i) + " out of " +
                         shape_str(x.shape));
      }
    }
    Shape out = x.shape;
    out[0] = idx.size();
    const std::size_t w = x.row_size();
    Node node = make(Op::gather_rows, {a}, Tensor<T>(out));
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::copy_n(x.data.data() + idx[r] * w, w, node.value.data.data() + r * w);
    }
    node.ints = std::move(idx);
    return push(std::move(node));
  }

  /// Concatenates along the first axis.
  Var<T> concat(std::span<const Var<T>> parts) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    Shape out = value(parts[0]).shape;
    out[0] = 0;
    for (const auto& p : parts) {
      const Shape& s = value(p).shape;
      if (s.size() != out.size() || !std::equal(s.begin() + 1, s.end(), out.begin() + 1)) {
        throw ShapeError("concat: shape " + shape_str(s) + " does not match " +
                         shape_str(value(parts[0]).shape));
      }
      out[0] += s[0];
    }
    std::vector<Var<T>> inputs(parts.begin(), parts.end());
    Node node = make(Op::concat, inputs, Tensor<T>(out));
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const auto& d = value(p).data;
      std::copy(d.begin(), d.end(), node.value.data.begin() + static_cast<std::ptrdiff_t>(offset));
      offset += d.size();
    }
    return push(std::move(node));
  }
  Var<T> concat(std::initializer_list<Var<T>> parts) {
    return concat(std::span<const Var<T>>(parts.begin(), parts.size()));
  }

  /// Sum over all elements (scalar result) or along one axis (axis removed).
  Var<T> sum(Var<T> a) { return reduce_all(Op::sum, a); }
  Var<T> sum(Var<T> a, int axis) { return reduce_axis(Op::sum, a, axis); }
  Var<T> mean(Var<T> a) { return reduce_all(Op::mean, a); }
  Var<T> mean(Var<T> a, int axis) { return reduce_axis(Op::mean, a, axis); }

  // -------------------------------------------------------------------------

  /// Reverse sweep from a scalar loss. Gradients from earlier calls are reset.
  void backward(Var<T> loss) {
    Node& root = nodes_.at(static_cast<std::size_t>(loss.id));
    if (root.value.size() != 1) {
      throw ShapeError("backward: loss must be scalar, got shape " + shape_str(root.value.shape));
    }
    for (auto& n : nodes_) n.grad.clear();
    if (!root.requires_grad) return;
    root.grad.assign(1, T(1));
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.grad.empty() || n.op == Op::leaf) continue;
      backprop(n);
    }
  }

 private:
  struct Node {
    Op op = Op::leaf;
    std::vector<int> inputs;
    Tensor<T> value;
    Buffer<T> grad;
    bool requires_grad = false;
    int axis = 0;
    T scalar = T(0);
    std::vector<std::size_t> ints;
    Buffer<T> saved;
  };

  struct Strides {
    std::size_t outer, len, inner;
    int axis;
  };

  // deque: appending never invalidates references handed out by value().
  std::deque<Node> nodes_;

  static constexpr T kGeluK = T(0.7978845608028654);  // sqrt(2 / pi)
  static constexpr T kGeluC = T(0.044715);

  Var<T> push(Node n) {
    nodes_.push_back(std::move(n));
    return Var<T>{this, static_cast<int>(nodes_.size() - 1)};
  }

  Node make(Op op, std::initializer_list<Var<T>> in, Tensor<T> value) {
    return make(op, std::vector<Var<T>>(in), std::move(value));
  }
  Node make(Op op, const std::vector<Var<T>>& in, Tensor<T> value) {
    Node n;
    n.op = op;
    n.value = std::move(value);
    for (const auto& v : in) {
      if (v.graph != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
        throw ShapeError("graph: input variable does not belong to this graph");
      }
      n.inputs.push_back(v.id);
      n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(v.id)].requires_grad;
    }
    return n;
  }

  static Strides strides(const Shape& s, int axis, const char* who) {
    const int r = static_cast<int>(s.size());
    const int ax = axis < 0 ? axis + r : axis;
    if (ax < 0 || ax >= r) {
      throw ShapeError(std::string(who) + ": axis " + std::to_string(axis) + " invalid for " +
                       shape_str(s));
    }
    Strides st{1, s[static_cast<std::size_t>(ax)], 1, ax};
    for (int i = 0; i < ax; ++i) st.outer *= s[static_cast<std::size_t>(i)];
    for (int i = ax + 1; i < r; ++i) st.inner *= s[static_cast<std::size_t>(i)];
    return st;
  }

  template <typename F>
  static void for_each_lane(const Strides& st, F&& f) {
    for (std::size_t o = 0; o < st.outer; ++o) {
      for (std::size_t i = 0; i < st.inner; ++i) f(o * st.len * st.inner + i, st.inner);
    }
  }

  // Copies src (shape s) into dst laid out as the permuted shape. With
  // inverse set, reads from the permuted layout and writes to shape s.
  static void permute(const T* src, const Shape& s, const std::vector<std::size_t>& perm, T* dst,
                      bool inverse) {
    std::size_t r = s.size();
    std::vector<std::size_t> in_stride(r, 1);
    for (std::size_t i = r - 1; i > 0; --i) in_stride[i - 1] = in_stride[i] * s[i];
    // A trailing axis that stays in place moves as contiguous blocks.
    std::size_t block = 1;
    if (perm[r - 1] == r - 1) {
      block = s[r - 1];
      --r;
    }
    Shape out(r);
    std::vector<std::size_t> step(r);
    for (std::size_t i = 0; i < r; ++i) {
      out[i] = s[perm[i]];
      step[i] = in_stride[perm[i]];
    }
    std::vector<std::size_t> idx(r, 0);
    const std::size_t total = numel(s) / block;
    std::size_t off = 0;
    for (std::size_t o = 0; o < total; ++o) {
      if (inverse) {
        for (std::size_t j = 0; j < block; ++j) dst[off + j] += src[o * block + j];
      } else {
        std::copy_n(src + off, block, dst + o * block);
      }
      for (std::size_t d = r; d-- > 0;) {
        off += step[d];
        if (++idx[d] < out[d]) break;
        off -= step[d] * out[d];
        idx[d] = 0;
      }
    }
  }

  Var<T> binary(Op op, Var<T> a, Var<T> b) {
    const Shape& sa = value(a).shape;
    const Shape& sb = value(b).shape;
    const char* name = op == Op::add ? "add" : op == Op::sub ? "sub" : "mul";
    if (sb.size() > sa.size() || !std::equal(sb.rbegin(), sb.rend(), sa.rbegin())) {
      throw ShapeError(std::string(name) + ": cannot broadcast " + shape_str(sb) + " onto " +
                       shape_str(sa));
    }
    Node node = make(op, {a, b}, value(a));
    const auto& bd = value(b).data;
    const std::size_t w = bd.size();
    MapM y(node.value.data.data(), node.value.size() / w, w);
    Eigen::Map<const RowVec> bv(bd.data(), static_cast<Eigen::Index>(w));
    if (op == Op::add) {
      y.rowwise() += bv;
    } else if (op == Op::sub) {
      y.rowwise() -= bv;
    } else {
      y.array().rowwise() *= bv.array();
    }
    return push(std::move(node));
  }

  Var<T> reduce_all(Op op, Var<T> a) {
    const auto& x = value(a).data;
    T total = 0;
    for (T v : x) total += v;
    if (op == Op::mean) total /= static_cast<T>(x.size());
    return push(make(op, {a}, Tensor<T>::scalar(total)));
  }

  Var<T> reduce_axis(Op op, Var<T> a, int axis) {
    const Shape& s = value(a).shape;
    const Strides st = strides(s, axis, op == Op::sum ? "sum" : "mean");
    Shape out;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (static_cast<int>(i) != st.axis) out.push_back(s[i]);
    }
    if (out.empty()) out.push_back(1);
    Node node = make(op, {a}, Tensor<T>(out));
    node.axis = st.axis;
    node.ints = {1};  // marks an axis reduction
    const T* x = value(a).data.data();
    std::size_t lane = 0;
    for_each_lane(st, [&](std::size_t base, std::size_t step) {
      T total = 0;
      for (std::size_t j = 0; j < st.len; ++j) total += x[base + j * step];
      if (op == Op::mean) total /= static_cast<T>(st.len);
      // lanes are visited outer-major, inner-minor: the output layout.
      node.value.data[lane++] = total;
    });
    return push(std::move(node));
  }

  Buffer<T>* grad_of(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
    return &n.grad;
  }

  void backprop(Node& n) {
    const Buffer<T>& gy = n.grad;
    const int i0 = n.inputs.empty() ? -1 : n.inputs[0];
    auto in_value = [&](std::size_t k) -> const Tensor<T>& {
      return nodes_[static_cast<std::size_t>(n.inputs[k])].value;
    };
    switch (n.op) {
      case Op::leaf:
        break;
      case Op::matmul: {
        const Tensor<T>& a = in_value(0);
        const Tensor<T>& b = in_value(1);
        const std::size_t k = a.shape.back();
        const std::size_t nn = n.value.shape.back();
        Buffer<T>* ga = grad_of(n.inputs[0]);
        Buffer<T>* gb = grad_of(n.inputs[1]);
        if (n.axis == 1) {
          // y = a b^T: ga += g b, gb += g^T a.
          const std::size_t m = b.rank() == 2 ? a.size() / k : a.shape[a.rank() - 2];
          const std::size_t batch = b.rank() == 2 ? 1 : a.size() / (m * k);
          for (std::size_t i = 0; i < batch; ++i) {
            CMapM g(gy.data() + i * m * nn, m, nn);
            const std::size_t boff = b.rank() == 2 ? 0 : i * nn * k;
            if (ga) {
              MapM(ga->data() + i * m * k, m, k).noalias() += g * CMapM(b.data.data() + boff, nn, k);
            }
            if (gb) {
              MapM(gb->data() + boff, nn, k).noalias() +=
                  g.transpose() * CMapM(a.data.data() + i * m * k, m, k);
            }
          }
          break;
        }
        if (b.rank() == 2) {
          const std::size_t rows = a.size() / k;
          CMapM g(gy.data(), rows, nn);
          if (ga) MapM(ga->data(), rows, k).noalias() += g * CMapM(b.data.data(), k, nn).transpose();
          if (gb) MapM(gb->data(), k, nn).noalias() += CMapM(a.data.data(), rows, k).transpose() * g;
        } else {
          const std::size_t m = a.shape[a.rank() - 2];
          const std::size_t batch = a.size() / (m * k);
          for (std::size_t i = 0; i < batch; ++i) {
            CMapM g(gy.data() + i * m * nn, m, nn);
            if (ga) {
              MapM(ga->data() + i * m * k, m, k).noalias() +=
                  g * CMapM(b.data.data() + i * k * nn, k, nn).transpose();
            }
            if (gb) {
              MapM(gb->data() + i * k * nn, k, nn).noalias() +=
                  CMapM(a.data.data() + i * m * k, m, k).transpose() * g;
            }
          }
        }
        break;
      }
      case Op::add:
      case Op::sub:
      case Op::mul: {
        const Tensor<T>& a = in_value(0);
        const Tensor<T>& b = in_value(1);
        const std::size_t w = b.size();
        const std::size_t rows = gy.size() / w;
        Buffer<T>* ga = grad_of(n.inputs[0]);
        Buffer<T>* gb = grad_of(n.inputs[1]);
        CMapM g(gy.data(), rows, w);
        Eigen::Map<const RowVec> bv(b.data.data(), static_cast<Eigen::Index>(w));
        if (n.op == Op::mul) {
          if (ga) MapM(ga->data(), rows, w).array() += g.array().rowwise() * bv.array();
          if (gb) {
            Eigen::Map<RowVec>(gb->data(), static_cast<Eigen::Index>(w)) +=
                g.cwiseProduct(CMapM(a.data.data(), rows, w)).colwise().sum();
          }
        } else {
          if (ga) MapM(ga->data(), rows, w) += g;
          if (gb) {
            Eigen::Map<RowVec> gbv(gb->data(), static_cast<Eigen::Index>(w));
            if (n.op == Op::add) {
              gbv += g.colwise().sum();
            } else {
              gbv -= g.colwise().sum();
            }
          }
        }
        break;
      }
      case Op::scalar_mul: {
        if (auto* ga = grad_of(i0)) {
          for (std::size_t i = 0; i < gy.size(); ++i) (*ga)[i] += gy[i] * n.scalar;
        }
        break;
      }
      case Op::gelu: {
        if (auto* ga = grad_of(i0)) {
          const auto len = static_cast<Eigen::Index>(gy.size());
          CMapA x(in_value(0).data.data(), len);
          CMapA th(n.saved.data(), len);
          MapA(ga->data(), len) +=
              CMapA(gy.data(), len) *
              (T(0.5) * (T(1) + th) +
               T(0.5) * x * (T(1) - th.square()) * kGeluK * (T(1) + T(3) * kGeluC * x.square()));
        }
        break;
      }
      case Op::square: {
        if (auto* ga = grad_of(i0)) {
          const auto& x = in_value(0).data;
          for (std::size_t i = 0; i < gy.size(); ++i) (*ga)[i] += gy[i] * T(2) * x[i];
        }
        break;
      }
      case Op::abs: {
        if (auto* ga = grad_of(i0)) {
          const auto& x = in_value(0).data;
          for (std::size_t i = 0; i < gy.size(); ++i) {
            const T s = x[i] > T(0) ? T(1) : (x[i] < T(0) ? T(-1) : T(0));
            (*ga)[i] += gy[i] * s;
          }
        }
        break;
      }
      case Op::softmax: {
        if (auto* ga = grad_of(i0)) {
          const Strides st = strides(n.value.shape, n.axis, "softmax");
          const T* y = n.value.data.data();
          if (st.inner == 1) {
            CMapM ym(y, st.outer, st.len);
            CMapM g(gy.data(), st.outer, st.len);
            const Eigen::Matrix<T, Eigen::Dynamic, 1> dot = g.cwiseProduct(ym).rowwise().sum();
            MapM(ga->data(), st.outer, st.len).array() +=
                ym.array() * (g.colwise() - dot).array();
            break;
          }
          for_each_lane(st, [&](std::size_t base, std::size_t step) {
            T dot = 0;
            for (std::size_t j = 0; j < st.len; ++j) dot += gy[base + j * step] * y[base + j * step];
            for (std::size_t j = 0; j < st.len; ++j) {
              const std::size_t e = base + j * step;
              (*ga)[e] += y[e] * (gy[e] - dot);
            }
          });
        }
        break;
      }
      case Op::layer_norm: {
        if (auto* ga = grad_of(i0)) {
          const Strides st = strides(n.value.shape, n.axis, "layer_norm");
          const T* y = n.value.data.data();
          const T inv_len = T(1) / static_cast<T>(st.len);
          std::size_t lane = 0;
          for_each_lane(st, [&](std::size_t base, std::size_t step) {
            T mg = 0, mgy = 0;
            for (std::size_t j = 0; j < st.len; ++j) {
              const std::size_t e = base + j * step;
              mg += gy[e];
              mgy += gy[e] * y[e];
            }
            mg *= inv_len;
            mgy *= inv_len;
            const T rstd = n.saved[lane++];
            for (std::size_t j = 0; j < st.len; ++j) {
              const std::size_t e = base + j * step;
              (*ga)[e] += rstd * (gy[e] - mg - y[e] * mgy);
            }
          });
        }
        break;
      }
      case Op::reshape: {
        if (auto* ga = grad_of(i0)) {
          for (std::size_t i = 0; i < gy.size(); ++i) (*ga)[i] += gy[i];
        }
        break;
      }
      case Op::transpose: {
        if (auto* ga = grad_of(i0)) permute(gy.data(), in_value(0).shape, n.ints, ga->data(), true);
        break;
      }
      case Op::slice_rows: {
        if (auto* ga = grad_of(i0)) {
          const std::size_t off = n.ints[0] * in_value(0).row_size();
          for (std::size_t i = 0; i < gy.size(); ++i) (*ga)[off + i] += gy[i];
        }
        break;
      }
      case Op::gather_rows: {
        if (auto* ga = grad_of(i0)) {
          const std::size_t w = in_value(0).row_size();
          for (std::size_t r = 0; r < n.ints.size(); ++r) {
            T* dst = ga->data() + n.ints[r] * w;
            const T* src = gy.data() + r * w;
            for (std::size_t j = 0; j < w; ++j) dst[j] += src[j];
          }
        }
        break;
      }
      case Op::concat: {
        std::size_t off = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const std::size_t len = in_value(k).size();
          if (auto* ga = grad_of(n.inputs[k])) {
            for (std::size_t i = 0; i < len; ++i) (*ga)[i] += gy[off + i];
          }
          off += len;
        }
        break;
      }
      case Op::sum:
      case Op::mean: {
        auto* ga = grad_of(i0);
        if (!ga) break;
        const Tensor<T>& x = in_value(0);
        if (n.ints.empty()) {
          const T g = n.op == Op::mean ? gy[0] / static_cast<T>(x.size()) : gy[0];
          for (auto& v : *ga) v += g;
        } else {
          const Strides st = strides(x.shape, n.axis, "reduce");
          const T scale = n.op == Op::mean ? T(1) / static_cast<T>(st.len) : T(1);
          std::size_t lane = 0;
          for_each_lane(st, [&](std::size_t base, std::size_t step) {
            const T g = gy[lane++] * scale;
            for (std::size_t j = 0; j < st.len; ++j) (*ga)[base + j * step] += g;
          });
        }
        break;
      }
    }
  }
};

// Free-function spellings so model code reads as expressions.
template <typename T> Var<T> matmul(Var<T> a, Var<T> b) { return a.graph->matmul(a, b); }
template <typename T> Var<T> matmul_bt(Var<T> a, Var<T> b) { return a.graph->matmul_bt(a, b); }
template <typename T> Var<T> operator+(Var<T> a, Var<T> b) { return a.graph->add(a, b); }
template <typename T> Var<T> operator-(Var<T> a, Var<T> b) { return a.graph->sub(a, b); }
template <typename T> Var<T> operator*(Var<T> a, Var<T> b) { return a.graph->mul(a, b); }
template <typename T> Var<T> operator*(Var<T> a, T s) { return a.graph->scalar_mul(a, s); }
template <typename T> Var<T> gelu(Var<T> a) { return a.graph->gelu(a); }
template <typename T> Var<T> square(Var<T> a) { return a.graph->square(a); }
template <typename T> Var<T> abs(Var<T> a) { return a.graph->abs(a); }
template <typename T> Var<T> softmax(Var<T> a, int axis = -1) { return a.graph->softmax(a, axis); }
template <typename T> Var<T> layer_norm(Var<T> a, int axis = -1, T eps = T(1e-6)) {
  return a.graph->layer_norm(a, axis, eps);
}
template <typename T> Var<T> reshape(Var<T> a, Shape s) { return a.graph->reshape(a, std::move(s)); }
template <typename T> Var<T> sum(Var<T> a) { return a.graph->sum(a); }
template <typename T> Var<T> mean(Var<T> a) { return a.graph->mean(a); }

// ---------------------------------------------------------------------------
// Finite-difference verification

/// Builds a scalar loss from parameter leaves registered on a fresh graph.
using LossBuilder = std::function<Var<double>(Graph<double>&, std::span<const Var<double>>)>;

struct FdOptions {
  double step = 1e-4;
  std::size_t coordinates = 0;  // sampled coordinates; 0 checks every coordinate
  std::uint64_t seed = 0;
};

/// Compares reverse-mode gradients against central differences and returns
/// max |g_ad - g_fd| / max(1, |g_ad|, |g_fd|) over the checked coordinates.
inline double finite_difference_check(const LossBuilder& f, std::vector<Tensor<double>> params,
                                      const FdOptions& opts = {}) {
  std::vector<Tensor<double>> grads;
  {
    Graph<double> g;
    std::vector<Var<double>> vars;
    for (const auto& p : params) vars.push_back(g.param(p));
    const Var<double> loss = f(g, vars);
    g.backward(loss);
    for (const auto& v : vars) grads.push_back(g.grad(v));
  }
  auto eval = [&] {
    Graph<double> g;
    std::vector<Var<double>> vars;
    for (const auto& p : params) vars.push_back(g.constant(p));
    return f(g, vars).value()[0];
  };

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t t = 0; t < params.size(); ++t) {
    for (std::size_t i = 0; i < params[t].size(); ++i) coords.emplace_back(t, i);
  }
  if (opts.coordinates > 0 && opts.coordinates < coords.size()) {
    Rng rng(opts.seed);
    shuffle(coords, rng);
    coords.resize(opts.coordinates);
  }

  double worst = 0.0;
  for (const auto& [t, i] : coords) {
    double& x = params[t].data[i];
    const double saved = x;
    x = saved + opts.step;
    const double up = eval();
    x = saved - opts.step;
    const double down = eval();
    x = saved;
    const double fd = (up - down) / (2.0 * opts.step);
    const double ad = grads[t].data[i];
    worst = std::max(worst, std::abs(ad - fd) / std::max({1.0, std::abs(ad), std::abs(fd)}));
  }
  return worst;
}

}  // namespace unigaze::ad
