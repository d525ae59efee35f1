#include "afgeo/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace afgeo {

using detail::make_result;
using detail::Node;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

namespace {

template <typename T>
T softplus_t(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

template <typename T>
T sigmoid_t(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

std::vector<std::size_t> row_major_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

// For every element of `out`, the flat index of the broadcast source element.
std::vector<std::size_t> broadcast_index_map(const Shape& out, const Shape& in) {
  const std::size_t rank = out.size();
  const std::size_t offset = rank - in.size();
  std::vector<std::size_t> in_strides(rank, 0);
  auto raw = row_major_strides(in);
  for (std::size_t i = 0; i < in.size(); ++i) {
    in_strides[offset + i] = in[i] == 1 ? 0 : raw[i];
  }
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t src = 0;
  for (std::size_t k = 0; k < n; ++k) {
    map[k] = src;
    for (std::size_t axis = rank; axis-- > 0;) {
      ++counter[axis];
      src += in_strides[axis];
      if (counter[axis] < out[axis]) break;
      src -= in_strides[axis] * counter[axis];
      counter[axis] = 0;
    }
  }
  return map;
}

enum class BinaryKind { kAdd, kSub, kMul, kDiv, kMin, kMax };

template <typename T>
Tensor<T> binary(BinaryKind kind, const Tensor<T>& a, const Tensor<T>& b) {
  const Shape out = broadcast_shapes(a.shape(), b.shape());
  const std::size_t n = shape_numel(out);
  const bool direct_a = a.shape() == out;
  const bool direct_b = b.shape() == out;
  std::vector<std::size_t> ia = direct_a ? std::vector<std::size_t>{} : broadcast_index_map(out, a.shape());
  std::vector<std::size_t> ib = direct_b ? std::vector<std::size_t>{} : broadcast_index_map(out, b.shape());
  auto av = a.values();
  auto bv = b.values();
  Buffer<T> y(n);
  for (std::size_t k = 0; k < n; ++k) {
    const T x = av[direct_a ? k : ia[k]];
    const T z = bv[direct_b ? k : ib[k]];
    switch (kind) {
      case BinaryKind::kAdd: y[k] = x + z; break;
      case BinaryKind::kSub: y[k] = x - z; break;
      case BinaryKind::kMul: y[k] = x * z; break;
      case BinaryKind::kDiv: y[k] = x / z; break;
      case BinaryKind::kMin: y[k] = x <= z ? x : z; break;
      case BinaryKind::kMax: y[k] = x >= z ? x : z; break;
    }
  }
  auto backward = [kind, n, direct_a, direct_b, ia = std::move(ia), ib = std::move(ib)](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    Node<T>& pb = *self.parents[1];
    const auto& g = self.grad;
    const auto& av = *pa.value;
    const auto& bv = *pb.value;
    // Resolve both accumulators before writing: a and b may be the same node.
    T* ga = pa.requires_grad ? pa.ensure_grad().data() : nullptr;
    T* gb = pb.requires_grad ? pb.ensure_grad().data() : nullptr;
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t ka = direct_a ? k : ia[k];
      const std::size_t kb = direct_b ? k : ib[k];
      const T x = av[ka];
      const T z = bv[kb];
      T da = 0, db = 0;
      switch (kind) {
        case BinaryKind::kAdd: da = g[k]; db = g[k]; break;
        case BinaryKind::kSub: da = g[k]; db = -g[k]; break;
        case BinaryKind::kMul: da = g[k] * z; db = g[k] * x; break;
        case BinaryKind::kDiv: da = g[k] / z; db = -g[k] * x / (z * z); break;
        case BinaryKind::kMin: (x <= z ? da : db) = g[k]; break;
        case BinaryKind::kMax: (x >= z ? da : db) = g[k]; break;
      }
      if (ga) ga[ka] += da;
      if (gb) gb[kb] += db;
    }
  };
  return make_result<T>(out, std::move(y), {a.node(), b.node()}, std::move(backward));
}

enum class UnaryKind { kNeg, kExp, kLog, kSqrt, kSigmoid, kSoftplus, kRelu, kSilu, kScale, kShift, kClampMin };

template <typename T>
Tensor<T> unary(UnaryKind kind, const Tensor<T>& x, T param = T(0)) {
  auto xv = x.values();
  const std::size_t n = xv.size();
  Buffer<T> y(n);
  for (std::size_t k = 0; k < n; ++k) {
    const T v = xv[k];
    switch (kind) {
      case UnaryKind::kNeg: y[k] = -v; break;
      case UnaryKind::kExp: y[k] = std::exp(v); break;
      case UnaryKind::kLog: y[k] = std::log(v); break;
      case UnaryKind::kSqrt: y[k] = std::sqrt(v); break;
      case UnaryKind::kSigmoid: y[k] = sigmoid_t(v); break;
      case UnaryKind::kSoftplus: y[k] = softplus_t(v); break;
      case UnaryKind::kRelu: y[k] = v > T(0) ? v : T(0); break;
      case UnaryKind::kSilu: y[k] = v * sigmoid_t(v); break;
      case UnaryKind::kScale: y[k] = v * param; break;
      case UnaryKind::kShift: y[k] = v + param; break;
      case UnaryKind::kClampMin: y[k] = v > param ? v : param; break;
    }
  }
  auto backward = [kind, param](Node<T>& self) {
    Node<T>& px = *self.parents[0];
    if (!px.requires_grad) return;
    auto& gx = px.ensure_grad();
    const auto& g = self.grad;
    const auto& xv = *px.value;
    const auto& yv = *self.value;
    for (std::size_t k = 0; k < g.size(); ++k) {
      const T v = xv[k];
      T d = 0;
      switch (kind) {
        case UnaryKind::kNeg: d = -1; break;
        case UnaryKind::kExp: d = yv[k]; break;
        case UnaryKind::kLog: d = T(1) / v; break;
        case UnaryKind::kSqrt: d = T(0.5) / yv[k]; break;
        case UnaryKind::kSigmoid: d = yv[k] * (T(1) - yv[k]); break;
        case UnaryKind::kSoftplus: d = sigmoid_t(v); break;
        case UnaryKind::kRelu: d = v > T(0) ? T(1) : T(0); break;
        case UnaryKind::kSilu: {
          const T s = sigmoid_t(v);
          d = s + v * s * (T(1) - s);
          break;
        }
        case UnaryKind::kScale: d = param; break;
        case UnaryKind::kShift: d = 1; break;
        case UnaryKind::kClampMin: d = v > param ? T(1) : T(0); break;
      }
      gx[k] += g[k] * d;
    }
  };
  return make_result<T>(x.shape(), std::move(y), {x.node()}, std::move(backward));
}

void require_rank(const char* op, const Shape& shape, std::size_t rank) {
  if (shape.size() != rank) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                                shape_str(shape));
  }
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw std::invalid_argument("broadcast: incompatible shapes " + shape_str(a) + " and " + shape_str(b));
    }
    out[i] = ea == 1 ? eb : ea;
  }
  return out;
}

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return binary(BinaryKind::kAdd, a, b); }
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return binary(BinaryKind::kSub, a, b); }
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return binary(BinaryKind::kMul, a, b); }
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) { return binary(BinaryKind::kDiv, a, b); }
template <typename T> Tensor<T> minimum(const Tensor<T>& a, const Tensor<T>& b) { return binary(BinaryKind::kMin, a, b); }
template <typename T> Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) { return binary(BinaryKind::kMax, a, b); }

template <typename T> Tensor<T> neg(const Tensor<T>& x) { return unary(UnaryKind::kNeg, x); }
template <typename T> Tensor<T> exp(const Tensor<T>& x) { return unary(UnaryKind::kExp, x); }
template <typename T> Tensor<T> log(const Tensor<T>& x) { return unary(UnaryKind::kLog, x); }
template <typename T> Tensor<T> sqrt(const Tensor<T>& x) { return unary(UnaryKind::kSqrt, x); }
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x) { return unary(UnaryKind::kSigmoid, x); }
template <typename T> Tensor<T> softplus(const Tensor<T>& x) { return unary(UnaryKind::kSoftplus, x); }
template <typename T> Tensor<T> relu(const Tensor<T>& x) { return unary(UnaryKind::kRelu, x); }
template <typename T> Tensor<T> silu(const Tensor<T>& x) { return unary(UnaryKind::kSilu, x); }
template <typename T> Tensor<T> scale(const Tensor<T>& x, T factor) { return unary(UnaryKind::kScale, x, factor); }
template <typename T> Tensor<T> shift(const Tensor<T>& x, T offset) { return unary(UnaryKind::kShift, x, offset); }
template <typename T> Tensor<T> clamp_min(const Tensor<T>& x, T floor) { return unary(UnaryKind::kClampMin, x, floor); }

template <typename T>
Tensor<T> reduce(ReduceKind kind, const Tensor<T>& x, std::vector<std::size_t> axes, bool keep_dims) {
  const Shape& in = x.shape();
  if (x.numel() == 0) throw std::invalid_argument("reduce: empty tensor " + shape_str(in));
  if (axes.empty()) {
    axes.resize(in.size());
    std::iota(axes.begin(), axes.end(), std::size_t{0});
  }
  std::vector<bool> reduced(in.size(), false);
  for (auto axis : axes) {
    if (axis >= in.size()) {
      throw std::invalid_argument("reduce: axis " + std::to_string(axis) + " invalid for shape " + shape_str(in));
    }
    reduced[axis] = true;
  }
  Shape kept(in.size());
  Shape out;
  std::size_t count = 1;
  for (std::size_t i = 0; i < in.size(); ++i) {
    kept[i] = reduced[i] ? 1 : in[i];
    if (reduced[i]) count *= in[i];
    if (!reduced[i] || keep_dims) out.push_back(kept[i]);
  }
  // Each input element's destination is the broadcast map run in reverse.
  const std::vector<std::size_t> dest = broadcast_index_map(in, kept);
  const std::size_t n_out = shape_numel(kept);
  auto xv = x.values();
  Buffer<T> y(n_out, T(0));
  std::vector<std::size_t> argmax;
  std::vector<bool> seen;
  if (kind == ReduceKind::kMax) {
    argmax.assign(n_out, 0);
    seen.assign(n_out, false);
  }
  for (std::size_t k = 0; k < xv.size(); ++k) {
    const std::size_t d = dest[k];
    if (kind == ReduceKind::kMax) {
      if (!seen[d] || xv[k] > y[d]) {
        y[d] = xv[k];
        argmax[d] = k;
        seen[d] = true;
      }
    } else {
      y[d] += xv[k];
    }
  }
  if (kind == ReduceKind::kMean) {
    for (auto& v : y) v /= static_cast<T>(count);
  }
  auto backward = [kind, count, dest, argmax = std::move(argmax)](Node<T>& self) {
    Node<T>& px = *self.parents[0];
    if (!px.requires_grad) return;
    auto& gx = px.ensure_grad();
    const auto& g = self.grad;
    if (kind == ReduceKind::kMax) {
      for (std::size_t d = 0; d < g.size(); ++d) gx[argmax[d]] += g[d];
      return;
    }
    const T factor = kind == ReduceKind::kMean ? T(1) / static_cast<T>(count) : T(1);
    for (std::size_t k = 0; k < dest.size(); ++k) gx[k] += g[dest[k]] * factor;
  };
  return make_result<T>(out, std::move(y), {x.node()}, std::move(backward));
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank("matmul", a.shape(), 2);
  require_rank("matmul", b.shape(), 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw std::invalid_argument("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  Buffer<T> y(m * n);
  MatMap<T>(y.data(), m, n).noalias() =
      ConstMatMap<T>(a.values().data(), m, k) * ConstMatMap<T>(b.values().data(), k, n);
  auto backward = [m, k, n](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    Node<T>& pb = *self.parents[1];
    ConstMatMap<T> g(self.grad.data(), m, n);
    if (pa.requires_grad) {
      MatMap<T>(pa.ensure_grad().data(), m, k).noalias() += g * ConstMatMap<T>(pb.value->data(), k, n).transpose();
    }
    if (pb.requires_grad) {
      MatMap<T>(pb.ensure_grad().data(), k, n).noalias() += ConstMatMap<T>(pa.value->data(), m, k).transpose() * g;
    }
  };
  return make_result<T>({m, n}, std::move(y), {a.node(), b.node()}, std::move(backward));
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  require_rank("transpose", x.shape(), 2);
  const std::size_t r = x.dim(0), c = x.dim(1);
  Buffer<T> y(r * c);
  MatMap<T>(y.data(), c, r) = ConstMatMap<T>(x.values().data(), r, c).transpose();
  auto backward = [r, c](Node<T>& self) {
    Node<T>& px = *self.parents[0];
    if (!px.requires_grad) return;
    MatMap<T>(px.ensure_grad().data(), r, c) += ConstMatMap<T>(self.grad.data(), c, r).transpose();
  };
  return make_result<T>({c, r}, std::move(y), {x.node()}, std::move(backward));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  auto backward = [](Node<T>& self) {
    Node<T>& px = *self.parents[0];
    if (!px.requires_grad) return;
    auto& gx = px.ensure_grad();
    for (std::size_t k = 0; k < gx.size(); ++k) gx[k] += self.grad[k];
  };
  return make_result<T>(std::move(shape), Buffer<T>(x.values().begin(), x.values().end()), {x.node()}, std::move(backward));
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding) {
  require_rank("conv2d input", x.shape(), 3);
  require_rank("conv2d weight", w.shape(), 4);
  const std::size_t c_in = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t c_out = w.dim(0), k = w.dim(2);
  if (w.dim(1) != c_in || w.dim(3) != k) {
    throw std::invalid_argument("conv2d: weight " + shape_str(w.shape()) + " does not match input " +
                                shape_str(x.shape()));
  }
  if (k % 2 == 0) throw std::invalid_argument("conv2d: kernel extent must be odd, got " + std::to_string(k));
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  if (bias.defined() && bias.shape() != Shape{c_out}) {
    throw std::invalid_argument("conv2d: bias shape " + shape_str(bias.shape()) + " for " + std::to_string(c_out) +
                                " output channels");
  }
  if (h + 2 * padding < k || wd + 2 * padding < k) {
    throw std::invalid_argument("conv2d: output extent < 1 for input " + shape_str(x.shape()) + " and kernel " +
                                std::to_string(k));
  }
  const std::size_t ho = (h + 2 * padding - k) / stride + 1;
  const std::size_t wo = (wd + 2 * padding - k) / stride + 1;
  const std::size_t rows = c_in * k * k;
  const std::size_t cols_n = ho * wo;

  // im2col: one row per (channel, ky, kx), one column per output location.
  auto xv = x.values();
  Buffer<T> cols(rows * cols_n, T(0));
  for (std::size_t c = 0; c < c_in; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = cols.data() + ((c * k + ky) * k + kx) * cols_n;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          const T* src = xv.data() + (c * h + static_cast<std::size_t>(iy)) * wd;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(wd)) row[oy * wo + ox] = src[ix];
          }
        }
      }
    }
  }

  Buffer<T> y(c_out * cols_n);
  MatMap<T> ym(y.data(), c_out, cols_n);
  ym.noalias() = ConstMatMap<T>(w.values().data(), c_out, rows) * ConstMatMap<T>(cols.data(), rows, cols_n);
  if (bias.defined()) {
    auto bv = bias.values();
    for (std::size_t o = 0; o < c_out; ++o) ym.row(o).array() += bv[o];
  }

  std::vector<NodePtr<T>> parents{x.node(), w.node()};
  if (bias.defined()) parents.push_back(bias.node());
  auto backward = [=, cols = std::move(cols)](Node<T>& self) {
    Node<T>& px = *self.parents[0];
    Node<T>& pw = *self.parents[1];
    ConstMatMap<T> g(self.grad.data(), c_out, cols_n);
    if (pw.requires_grad) {
      MatMap<T>(pw.ensure_grad().data(), c_out, rows).noalias() +=
          g * ConstMatMap<T>(cols.data(), rows, cols_n).transpose();
    }
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      auto& gb = self.parents[2]->ensure_grad();
      for (std::size_t o = 0; o < c_out; ++o) gb[o] += g.row(o).sum();
    }
    if (!px.requires_grad) return;
    RowMatrix<T> dcols = ConstMatMap<T>(pw.value->data(), c_out, rows).transpose() * g;
    auto& gx = px.ensure_grad();
    for (std::size_t c = 0; c < c_in; ++c) {
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const T* row = dcols.data() + ((c * k + ky) * k + kx) * cols_n;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const std::ptrdiff_t iy =
                static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            T* dst = gx.data() + (c * h + static_cast<std::size_t>(iy)) * wd;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
              if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(wd)) dst[ix] += row[oy * wo + ox];
            }
          }
        }
      }
    }
  };
  return make_result<T>({c_out, ho, wo}, std::move(y), std::move(parents), std::move(backward));
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t k) {
  require_rank("avg_pool2d", x.shape(), 3);
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (k == 0 || h < k || w < k) {
    throw std::invalid_argument("avg_pool2d: window " + std::to_string(k) + " invalid for " + shape_str(x.shape()));
  }
  const std::size_t ho = h / k, wo = w / k;
  const T inv = T(1) / static_cast<T>(k * k);
  auto xv = x.values();
  Buffer<T> y(c * ho * wo, T(0));
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        T acc = 0;
        for (std::size_t dy = 0; dy < k; ++dy)
          for (std::size_t dx = 0; dx < k; ++dx) acc += xv[(ch * h + oy * k + dy) * w + ox * k + dx];
        y[(ch * ho + oy) * wo + ox] = acc * inv;
      }
  auto backward = [=](Node<T>& self) {
    Node<T>& px = *self.parents[0];
    if (!px.requires_grad) return;
    auto& gx = px.ensure_grad();
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          const T g = self.grad[(ch * ho + oy) * wo + ox] * inv;
          for (std::size_t dy = 0; dy < k; ++dy)
            for (std::size_t dx = 0; dx < k; ++dx) gx[(ch * h + oy * k + dy) * w + ox * k + dx] += g;
        }
  };
  return make_result<T>({c, ho, wo}, std::move(y), {x.node()}, std::move(backward));
}

namespace {

struct Tap {
  std::size_t lo, hi;
  double frac;
};

// Corner-aligned sample positions along one axis.
std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  for (std::size_t i = 0; i < out; ++i) {
    const double src = out > 1 ? static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out - 1) : 0.0;
    std::size_t lo = static_cast<std::size_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[i] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  const Shape& s = x.shape();
  if (s.size() != 2 && s.size() != 3) {
    throw std::invalid_argument("resize_bilinear: expected rank 2 or 3, got " + shape_str(s));
  }
  if (out_h == 0 || out_w == 0) throw std::invalid_argument("resize_bilinear: output extents must be >= 1");
  const std::size_t planes = s.size() == 3 ? s[0] : 1;
  const std::size_t h = s[s.size() - 2], w = s[s.size() - 1];
  auto ty = bilinear_taps(h, out_h);
  auto tx = bilinear_taps(w, out_w);
  auto xv = x.values();
  Buffer<T> y(planes * out_h * out_w);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xv.data() + p * h * w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const T fy = static_cast<T>(ty[i].frac);
      for (std::size_t j = 0; j < out_w; ++j) {
        const T fx = static_cast<T>(tx[j].frac);
        const T top = src[ty[i].lo * w + tx[j].lo] * (T(1) - fx) + src[ty[i].lo * w + tx[j].hi] * fx;
        const T bot = src[ty[i].hi * w + tx[j].lo] * (T(1) - fx) + src[ty[i].hi * w + tx[j].hi] * fx;
        y[(p * out_h + i) * out_w + j] = top * (T(1) - fy) + bot * fy;
      }
    }
  }
  Shape out = s;
  out[s.size() - 2] = out_h;
  out[s.size() - 1] = out_w;
  auto backward = [=, ty = std::move(ty), tx = std::move(tx)](Node<T>& self) {
    Node<T>& px = *self.parents[0];
    if (!px.requires_grad) return;
    auto& gx = px.ensure_grad();
    for (std::size_t p = 0; p < planes; ++p) {
      T* dst = gx.data() + p * h * w;
      for (std::size_t i = 0; i < out_h; ++i) {
        const T fy = static_cast<T>(ty[i].frac);
        for (std::size_t j = 0; j < out_w; ++j) {
          const T fx = static_cast<T>(tx[j].frac);
          const T g = self.grad[(p * out_h + i) * out_w + j];
          dst[ty[i].lo * w + tx[j].lo] += g * (T(1) - fy) * (T(1) - fx);
          dst[ty[i].lo * w + tx[j].hi] += g * (T(1) - fy) * fx;
          dst[ty[i].hi * w + tx[j].lo] += g * fy * (T(1) - fx);
          dst[ty[i].hi * w + tx[j].hi] += g * fy * fx;
        }
      }
    }
  };
  return make_result<T>(std::move(out), std::move(y), {x.node()}, std::move(backward));
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw std::invalid_argument("concat: axis out of range for " + shape_str(first));
  Shape out = first;
  out[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) throw std::invalid_argument("concat: shape " + shape_str(s) + " incompatible with " + shape_str(first));
    out[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.dim(axis) * inner);
  const std::size_t row = out[axis] * inner;
  Buffer<T> y(shape_numel(out));
  std::vector<NodePtr<T>> parents;
  std::size_t offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    auto v = parts[pi].values();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(v.data() + o * widths[pi], widths[pi], y.data() + o * row + offset);
    }
    offset += widths[pi];
    parents.push_back(parts[pi].node());
  }
  auto backward = [outer, row, widths](Node<T>& self) {
    std::size_t offset = 0;
    for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
      Node<T>& p = *self.parents[pi];
      if (p.requires_grad) {
        auto& gp = p.ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t k = 0; k < widths[pi]; ++k) gp[o * widths[pi] + k] += self.grad[o * row + offset + k];
      }
      offset += widths[pi];
    }
  };
  return make_result<T>(std::move(out), std::move(y), std::move(parents), std::move(backward));
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& s = x.shape();
  if (axis >= s.size() || start + length > s[axis] || length == 0) {
    throw std::invalid_argument("slice: [" + std::to_string(start) + ", +" + std::to_string(length) + ") on axis " +
                                std::to_string(axis) + " invalid for " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t src_row = s[axis] * inner, dst_row = length * inner, skip = start * inner;
  Shape out = s;
  out[axis] = length;
  auto xv = x.values();
  Buffer<T> y(outer * dst_row);
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(xv.data() + o * src_row + skip, dst_row, y.data() + o * dst_row);
  auto backward = [=](Node<T>& self) {
    Node<T>& px = *self.parents[0];
    if (!px.requires_grad) return;
    auto& gx = px.ensure_grad();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < dst_row; ++k) gx[o * src_row + skip + k] += self.grad[o * dst_row + k];
  };
  return make_result<T>(std::move(out), std::move(y), {x.node()}, std::move(backward));
}

template <typename T>
Tensor<T> take(const Tensor<T>& x, std::span<const std::size_t> flat_indices) {
  auto xv = x.values();
  std::vector<std::size_t> idx(flat_indices.begin(), flat_indices.end());
  Buffer<T> y(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= xv.size()) {
      throw std::out_of_range("take: index " + std::to_string(idx[k]) + " out of range for " + shape_str(x.shape()));
    }
    y[k] = xv[idx[k]];
  }
  const std::size_t n = idx.size();
  auto backward = [idx = std::move(idx)](Node<T>& self) {
    Node<T>& px = *self.parents[0];
    if (!px.requires_grad) return;
    auto& gx = px.ensure_grad();
    for (std::size_t k = 0; k < idx.size(); ++k) gx[idx[k]] += self.grad[k];
  };
  return make_result<T>({n}, std::move(y), {x.node()}, std::move(backward));
}

template <typename T>
Tensor<T> sigmoid_focal_loss(const Tensor<T>& logits, const Tensor<T>& targets, T alpha, T gamma) {
  if (logits.shape() != targets.shape()) {
    throw std::invalid_argument("sigmoid_focal_loss: logits " + shape_str(logits.shape()) + " vs targets " +
                                shape_str(targets.shape()));
  }
  auto xv = logits.values();
  auto tv = targets.values();
  Buffer<T> y(xv.size());
  // -log p = softplus(-x), -log(1-p) = softplus(x); (1-p)^g = exp(-g softplus(x)).
  for (std::size_t k = 0; k < xv.size(); ++k) {
    const T x = xv[k], t = tv[k];
    const T sp_pos = softplus_t(x), sp_neg = softplus_t(-x);
    const T pos = alpha * std::exp(-gamma * sp_pos) * sp_neg;
    const T negv = (T(1) - alpha) * std::exp(-gamma * sp_neg) * sp_pos;
    y[k] = t * pos + (T(1) - t) * negv;
  }
  auto tvals = targets.to_vector();
  auto backward = [alpha, gamma, tvals = std::move(tvals)](Node<T>& self) {
    Node<T>& px = *self.parents[0];
    if (!px.requires_grad) return;
    auto& gx = px.ensure_grad();
    const auto& xv = *px.value;
    for (std::size_t k = 0; k < gx.size(); ++k) {
      const T x = xv[k], t = tvals[k];
      const T p = sigmoid_t(x);
      const T sp_pos = softplus_t(x), sp_neg = softplus_t(-x);
      const T dpos = alpha * std::exp(-gamma * sp_pos) * (-gamma * p * sp_neg - (T(1) - p));
      const T dneg = (T(1) - alpha) * std::exp(-gamma * sp_neg) * (p + gamma * (T(1) - p) * sp_pos);
      gx[k] += self.grad[k] * (t * dpos + (T(1) - t) * dneg);
    }
  };
  return make_result<T>(logits.shape(), std::move(y), {logits.node()}, std::move(backward));
}

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets) {
  if (logits.shape() != targets.shape()) {
    throw std::invalid_argument("bce_with_logits: logits " + shape_str(logits.shape()) + " vs targets " +
                                shape_str(targets.shape()));
  }
  auto xv = logits.values();
  auto tv = targets.values();
  Buffer<T> y(xv.size());
  for (std::size_t k = 0; k < xv.size(); ++k) {
    y[k] = tv[k] * softplus_t(-xv[k]) + (T(1) - tv[k]) * softplus_t(xv[k]);
  }
  auto tvals = targets.to_vector();
  auto backward = [tvals = std::move(tvals)](Node<T>& self) {
    Node<T>& px = *self.parents[0];
    if (!px.requires_grad) return;
    auto& gx = px.ensure_grad();
    for (std::size_t k = 0; k < gx.size(); ++k) gx[k] += self.grad[k] * (sigmoid_t((*px.value)[k]) - tvals[k]);
  };
  return make_result<T>(logits.shape(), std::move(y), {logits.node()}, std::move(backward));
}

#define AFGEO_INSTANTIATE_OPS(T)                                                                         \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> minimum(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> maximum(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> neg(const Tensor<T>&);                                                              \
  template Tensor<T> exp(const Tensor<T>&);                                                              \
  template Tensor<T> log(const Tensor<T>&);                                                              \
  template Tensor<T> sqrt(const Tensor<T>&);                                                             \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                          \
  template Tensor<T> softplus(const Tensor<T>&);                                                         \
  template Tensor<T> relu(const Tensor<T>&);                                                             \
  template Tensor<T> silu(const Tensor<T>&);                                                             \
  template Tensor<T> scale(const Tensor<T>&, T);                                                         \
  template Tensor<T> shift(const Tensor<T>&, T);                                                         \
  template Tensor<T> clamp_min(const Tensor<T>&, T);                                                     \
  template Tensor<T> reduce(ReduceKind, const Tensor<T>&, std::vector<std::size_t>, bool);               \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> transpose(const Tensor<T>&);                                                        \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                   \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t); \
  template Tensor<T> avg_pool2d(const Tensor<T>&, std::size_t);                                          \
  template Tensor<T> resize_bilinear(const Tensor<T>&, std::size_t, std::size_t);                        \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                                 \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                     \
  template Tensor<T> take(const Tensor<T>&, std::span<const std::size_t>);                               \
  template Tensor<T> sigmoid_focal_loss(const Tensor<T>&, const Tensor<T>&, T, T);                       \
  template Tensor<T> bce_with_logits(const Tensor<T>&, const Tensor<T>&);

AFGEO_INSTANTIATE_OPS(float)
AFGEO_INSTANTIATE_OPS(double)

}  // namespace afgeo
