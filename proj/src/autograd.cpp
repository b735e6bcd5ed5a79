#include "magic/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace magic {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
using Arr = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstArr = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
bool recording(std::initializer_list<const Var<T>*> inputs) {
  if (Tape<T>::active() == nullptr) return false;
  for (const auto* v : inputs) {
    if (v != nullptr && v->defined() && v->requires_grad()) return true;
  }
  return false;
}

template <typename T>
Var<T> make_output(Tensor<T> value, bool rec) {
  return Var<T>::leaf(std::move(value), rec);
}

void require(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

std::string two_shapes(const char* op, const Shape& a, const Shape& b) {
  return std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b);
}

enum class Broadcast { same, scalar, channel, sample_channel };

Broadcast classify(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return Broadcast::same;
  if (shape_numel(b) == 1 && b.size() <= 1) return Broadcast::scalar;
  if (a.size() == 4 && b.size() == 1 && b[0] == a[1]) return Broadcast::channel;
  if (a.size() == 4 && b.size() == 2 && b[0] == a[0] && b[1] == a[1]) return Broadcast::sample_channel;
  throw ShapeError(two_shapes(op, a, b));
}

// Index into b for element i of a under a broadcast rule.
struct BroadcastIndex {
  Broadcast kind;
  std::int64_t plane = 1;     // H*W
  std::int64_t channels = 1;  // C
  std::int64_t operator()(std::int64_t i) const {
    switch (kind) {
      case Broadcast::same: return i;
      case Broadcast::scalar: return 0;
      case Broadcast::channel: return (i / plane) % channels;
      case Broadcast::sample_channel: return i / plane;
    }
    return 0;
  }
};

BroadcastIndex make_index(Broadcast kind, const Shape& a) {
  BroadcastIndex idx{kind};
  if (a.size() == 4) {
    idx.plane = a[2] * a[3];
    idx.channels = a[1];
  }
  return idx;
}

template <typename T>
Var<T> binary(const char* name, const Var<T>& a, const Var<T>& b, int kind /*0 add,1 sub,2 mul*/) {
  const Broadcast bc = classify(name, a.shape(), b.shape());
  if (kind == 2 && bc != Broadcast::same && bc != Broadcast::scalar) {
    throw ShapeError(two_shapes(name, a.shape(), b.shape()));
  }
  const auto idx = make_index(bc, a.shape());
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  Tensor<T> out(av.shape());
  const std::int64_t n = av.numel();
  const T* ap = av.ptr();
  const T* bp = bv.ptr();
  T* op = out.ptr();
  if (bc == Broadcast::same) {
    if (kind == 0) for (std::int64_t i = 0; i < n; ++i) op[i] = ap[i] + bp[i];
    else if (kind == 1) for (std::int64_t i = 0; i < n; ++i) op[i] = ap[i] - bp[i];
    else for (std::int64_t i = 0; i < n; ++i) op[i] = ap[i] * bp[i];
  } else {
    for (std::int64_t i = 0; i < n; ++i) {
      const T bvi = bp[idx(i)];
      op[i] = kind == 0 ? ap[i] + bvi : kind == 1 ? ap[i] - bvi : ap[i] * bvi;
    }
  }
  const bool rec = recording<T>({&a, &b});
  Var<T> result = make_output(std::move(out), rec);
  if (rec) {
    Tape<T>::active()->record(
        result.node(), [an = a.node(), bn = b.node(), on = result.node(), idx, kind, n]() {
          if (!on->has_grad()) return;
          const T* g = on->grad.ptr();
          if (an->requires_grad) {
            T* ga = an->grad_buffer();
            if (kind == 2) {
              const T* bp2 = bn->value.ptr();
              for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * bp2[idx(i)];
            } else {
              for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
            }
          }
          if (bn->requires_grad) {
            T* gb = bn->grad_buffer();
            const T sign = kind == 1 ? T(-1) : T(1);
            if (kind == 2) {
              const T* ap2 = an->value.ptr();
              for (std::int64_t i = 0; i < n; ++i) gb[idx(i)] += g[i] * ap2[i];
            } else {
              for (std::int64_t i = 0; i < n; ++i) gb[idx(i)] += sign * g[i];
            }
          }
        });
  }
  return result;
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return binary("add", a, b, 0);
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return binary("sub", a, b, 1);
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return binary("mul", a, b, 2);
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out(a.shape());
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a.value()[i] * factor;
  const bool rec = recording<T>({&a});
  Var<T> result = make_output(std::move(out), rec);
  if (rec) {
    Tape<T>::active()->record(result.node(), [an = a.node(), on = result.node(), factor, n]() {
      if (!on->has_grad()) return;
      T* ga = an->grad_buffer();
      const T* g = on->grad.ptr();
      for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * factor;
    });
  }
  return result;
}

namespace {

// Unary op with derivative computed from the input value.
template <typename T, typename F, typename D>
Var<T> unary(const Var<T>& a, F f, D df) {
  Tensor<T> out(a.shape());
  const std::int64_t n = out.numel();
  const T* ap = a.value().ptr();
  T* op = out.ptr();
  for (std::int64_t i = 0; i < n; ++i) op[i] = f(ap[i]);
  const bool rec = recording<T>({&a});
  Var<T> result = make_output(std::move(out), rec);
  if (rec) {
    Tape<T>::active()->record(result.node(), [an = a.node(), on = result.node(), df, n]() {
      if (!on->has_grad()) return;
      T* ga = an->grad_buffer();
      const T* g = on->grad.ptr();
      const T* x = an->value.ptr();
      for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * df(x[i]);
    });
  }
  return result;
}

}  // namespace

template <typename T>
Var<T> silu(const Var<T>& a) {
  const std::int64_t n = a.value().numel();
  Tensor<T> out(a.shape());
  ConstArr<T> x(a.value().ptr(), n);
  Arr<T>(out.ptr(), n) = x / (T(1) + (-x).exp());
  const bool rec = recording<T>({&a});
  Var<T> result = make_output(std::move(out), rec);
  if (rec) {
    Tape<T>::active()->record(result.node(), [an = a.node(), on = result.node(), n]() {
      if (!on->has_grad()) return;
      ConstArr<T> xv(an->value.ptr(), n);
      const auto s = (T(1) / (T(1) + (-xv).exp())).eval();
      Arr<T>(an->grad_buffer(), n) += ConstArr<T>(on->grad.ptr(), n) * s * (T(1) + xv * (T(1) - s));
    });
  }
  return result;
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  return unary(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T x) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> square(const Var<T>& a) {
  return unary(
      a, [](T x) { return x * x; }, [](T x) { return T(2) * x; });
}

template <typename T>
Var<T> elementwise(ElementwiseOp op, const Var<T>& a, const Var<T>* b, T factor) {
  auto need_b = [&]() -> const Var<T>& {
    if (b == nullptr) throw std::invalid_argument("elementwise: binary op requires a second operand");
    return *b;
  };
  switch (op) {
    case ElementwiseOp::add: return add(a, need_b());
    case ElementwiseOp::sub: return sub(a, need_b());
    case ElementwiseOp::mul: return mul(a, need_b());
    case ElementwiseOp::scale: return scale(a, factor);
    case ElementwiseOp::silu: return silu(a);
    case ElementwiseOp::relu: return relu(a);
    case ElementwiseOp::square: return square(a);
  }
  throw std::invalid_argument("elementwise: unknown op");
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  // Fixed left-to-right order with a wide accumulator.
  long double acc = 0;
  for (T v : a.value().data()) acc += v;
  const bool rec = recording<T>({&a});
  Var<T> result = make_output(Tensor<T>::scalar(static_cast<T>(acc)), rec);
  if (rec) {
    const std::int64_t n = a.value().numel();
    Tape<T>::active()->record(result.node(), [an = a.node(), on = result.node(), n]() {
      if (!on->has_grad()) return;
      const T g = on->grad[0];
      T* ga = an->grad_buffer();
      for (std::int64_t i = 0; i < n; ++i) ga[i] += g;
    });
  }
  return result;
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  const auto n = a.value().numel();
  if (n == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(n));
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeometry {
  std::int64_t batch, cin, h, w, cout, k, stride, pad, ho, wo;
  std::int64_t col_rows() const { return cin * k * k; }
  std::int64_t col_cols() const { return ho * wo; }
};

// Valid output-column range [lo, hi) for kernel offset kx.
inline void valid_cols(const ConvGeometry& g, std::int64_t kx, std::int64_t& lo, std::int64_t& hi) {
  // need 0 <= ox*stride - pad + kx < w
  const std::int64_t a = g.pad - kx;
  lo = a <= 0 ? 0 : (a + g.stride - 1) / g.stride;
  const std::int64_t b = g.w - 1 + g.pad - kx;  // ox*stride <= b
  hi = b < 0 ? 0 : std::min(g.wo, b / g.stride + 1);
  if (hi < lo) hi = lo;
}

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  for (std::int64_t c = 0; c < g.cin; ++c) {
    for (std::int64_t ky = 0; ky < g.k; ++ky) {
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        T* row = col + ((c * g.k + ky) * g.k + kx) * g.ho * g.wo;
        std::int64_t lo, hi;
        valid_cols(g, kx, lo, hi);
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          T* dst = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = x + (c * g.h + iy) * g.w - g.pad + kx;
          std::fill(dst, dst + lo, T(0));
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride];
          }
          std::fill(dst + hi, dst + g.wo, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* dx) {
  for (std::int64_t c = 0; c < g.cin; ++c) {
    for (std::int64_t ky = 0; ky < g.k; ++ky) {
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((c * g.k + ky) * g.k + kx) * g.ho * g.wo;
        std::int64_t lo, hi;
        valid_cols(g, kx, lo, hi);
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          const T* src = row + oy * g.wo;
          T* dst = dx + (c * g.h + iy) * g.w - g.pad + kx;
          for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox * g.stride] += src[ox];
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeometry& g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

template <typename T>
AlignedVector<T>& scratch(std::size_t n) {
  thread_local AlignedVector<T> buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, const Var<T>& bias, int stride, int padding) {
  const Shape& xs = input.shape();
  const Shape& ks = kernel.shape();
  require(xs.size() == 4, "conv2d: input must be rank 4, got " + shape_str(xs));
  require(ks.size() == 4, "conv2d: kernel must be rank 4, got " + shape_str(ks));
  require(ks[1] == xs[1], two_shapes("conv2d", xs, ks));
  require(ks[2] == ks[3] && ks[2] % 2 == 1, "conv2d: kernel must be square with odd extent, got " + shape_str(ks));
  require(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
  require(padding >= 0, "conv2d: negative padding");
  if (bias.defined()) {
    require(bias.shape() == Shape{ks[0]}, two_shapes("conv2d bias", ks, bias.shape()));
  }
  ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ks[0], ks[2], stride, padding, 0, 0};
  const std::int64_t span_h = g.h + 2 * g.pad - g.k;
  const std::int64_t span_w = g.w + 2 * g.pad - g.k;
  require(span_h >= 0 && span_w >= 0 && span_h % g.stride == 0 && span_w % g.stride == 0,
          "conv2d: non-integral output extent for input " + shape_str(xs) + ", kernel " + shape_str(ks) +
              ", stride " + std::to_string(stride) + ", padding " + std::to_string(padding));
  g.ho = span_h / g.stride + 1;
  g.wo = span_w / g.stride + 1;

  Tensor<T> out(Shape{g.batch, g.cout, g.ho, g.wo});
  const std::int64_t in_per = g.cin * g.h * g.w;
  const std::int64_t out_per = g.cout * g.ho * g.wo;
  ConstMapMat<T> wmat(kernel.value().ptr(), g.cout, g.col_rows());
  for (std::int64_t b = 0; b < g.batch; ++b) {
    const T* colp;
    if (is_pointwise(g)) {
      colp = input.value().ptr() + b * in_per;
    } else {
      auto& col = scratch<T>(static_cast<std::size_t>(g.col_rows() * g.col_cols()));
      im2col(input.value().ptr() + b * in_per, g, col.data());
      colp = col.data();
    }
    ConstMapMat<T> cmat(colp, g.col_rows(), g.col_cols());
    MapMat<T> omat(out.ptr() + b * out_per, g.cout, g.col_cols());
    omat.noalias() = wmat * cmat;
    if (bias.defined()) {
      for (std::int64_t c = 0; c < g.cout; ++c) omat.row(c).array() += bias.value()[c];
    }
  }

  const bool rec = recording<T>({&input, &kernel, &bias});
  Var<T> result = make_output(std::move(out), rec);
  if (rec) {
    NodePtr<T> bn = bias.defined() ? bias.node() : nullptr;
    Tape<T>::active()->record(result.node(), [xn = input.node(), kn = kernel.node(), bn, on = result.node(), g,
                                              in_per, out_per]() {
      if (!on->has_grad()) return;
      const T* gout = on->grad.ptr();
      ConstMapMat<T> wmat(kn->value.ptr(), g.cout, g.col_rows());
      if (bn && bn->requires_grad) {
        T* gb = bn->grad_buffer();
        for (std::int64_t b = 0; b < g.batch; ++b) {
          ConstMapMat<T> gmat(gout + b * out_per, g.cout, g.col_cols());
          for (std::int64_t c = 0; c < g.cout; ++c) gb[c] += gmat.row(c).sum();
        }
      }
      const bool need_w = kn->requires_grad;
      const bool need_x = xn->requires_grad;
      if (!need_w && !need_x) return;
      T* gw = need_w ? kn->grad_buffer() : nullptr;
      T* gx = need_x ? xn->grad_buffer() : nullptr;
      const std::size_t col_n = static_cast<std::size_t>(g.col_rows() * g.col_cols());
      AlignedVector<T> col_buf;
      AlignedVector<T> dcol_buf;
      for (std::int64_t b = 0; b < g.batch; ++b) {
        ConstMapMat<T> gmat(gout + b * out_per, g.cout, g.col_cols());
        if (need_w) {
          const T* colp;
          if (is_pointwise(g)) {
            colp = xn->value.ptr() + b * in_per;
          } else {
            col_buf.resize(col_n);
            im2col(xn->value.ptr() + b * in_per, g, col_buf.data());
            colp = col_buf.data();
          }
          ConstMapMat<T> cmat(colp, g.col_rows(), g.col_cols());
          MapMat<T> gwmat(gw, g.cout, g.col_rows());
          gwmat.noalias() += gmat * cmat.transpose();
        }
        if (need_x) {
          if (is_pointwise(g)) {
            MapMat<T> dx(gx + b * in_per, g.col_rows(), g.col_cols());
            dx.noalias() += wmat.transpose() * gmat;
          } else {
            dcol_buf.resize(col_n);
            MapMat<T> dcol(dcol_buf.data(), g.col_rows(), g.col_cols());
            dcol.noalias() = wmat.transpose() * gmat;
            col2im(dcol_buf.data(), g, gx + b * in_per);
          }
        }
      }
    });
  }
  return result;
}

template <typename T>
Var<T> linear(const Var<T>& input, const Var<T>& weight, const Var<T>& bias) {
  const Shape& xs = input.shape();
  const Shape& ws = weight.shape();
  require(xs.size() == 2 && ws.size() == 2 && xs[1] == ws[1], two_shapes("linear", xs, ws));
  if (bias.defined()) require(bias.shape() == Shape{ws[0]}, two_shapes("linear bias", ws, bias.shape()));
  const std::int64_t B = xs[0], N = xs[1], M = ws[0];
  Tensor<T> out(Shape{B, M});
  {
    // plain dot products: a sample's result depends on neither the batch
    // size nor where its row starts
    const T* x = input.value().ptr();
    const T* w = weight.value().ptr();
    T* y = out.ptr();
    for (std::int64_t r = 0; r < B; ++r) {
      for (std::int64_t c = 0; c < M; ++c) {
        T acc = T(0);
        for (std::int64_t n = 0; n < N; ++n) acc += x[r * N + n] * w[c * N + n];
        y[r * M + c] = bias.defined() ? acc + bias.value()[c] : acc;
      }
    }
  }
  const bool rec = recording<T>({&input, &weight, &bias});
  Var<T> result = make_output(std::move(out), rec);
  if (rec) {
    NodePtr<T> bn = bias.defined() ? bias.node() : nullptr;
    Tape<T>::active()->record(result.node(), [xn = input.node(), wn = weight.node(), bn, on = result.node(), B, N,
                                              M]() {
      if (!on->has_grad()) return;
      ConstMapMat<T> gy(on->grad.ptr(), B, M);
      if (xn->requires_grad) {
        T* gx = xn->grad_buffer();
        const T* w = wn->value.ptr();
        for (std::int64_t r = 0; r < B; ++r)
          for (std::int64_t c = 0; c < M; ++c) {
            const T g = gy(r, c);
            for (std::int64_t n = 0; n < N; ++n) gx[r * N + n] += g * w[c * N + n];
          }
      }
      if (wn->requires_grad) {
        MapMat<T> gw(wn->grad_buffer(), M, N);
        ConstMapMat<T> x(xn->value.ptr(), B, N);
        gw.noalias() += gy.transpose() * x;
      }
      if (bn && bn->requires_grad) {
        T* gb = bn->grad_buffer();
        for (std::int64_t r = 0; r < B; ++r)
          for (std::int64_t c = 0; c < M; ++c) gb[c] += gy(r, c);
      }
    });
  }
  return result;
}

template <typename T>
Var<T> normalize_channels(const Var<T>& input, const Var<T>& gain, const Var<T>& bias, int groups, T eps) {
  const Shape& xs = input.shape();
  require(xs.size() == 4, "normalize_channels: input must be rank 4, got " + shape_str(xs));
  const std::int64_t B = xs[0], C = xs[1], HW = xs[2] * xs[3];
  require(groups > 0 && C % groups == 0,
          "normalize_channels: " + std::to_string(C) + " channels not divisible by " + std::to_string(groups) +
              " groups");
  require(gain.shape() == Shape{C} && bias.shape() == Shape{C},
          two_shapes("normalize_channels affine", xs, gain.shape()));
  if (!(eps > T(0))) throw std::invalid_argument("normalize_channels: eps must be positive");
  const std::int64_t cpg = C / groups;
  const std::int64_t gsize = cpg * HW;
  Tensor<T> out(xs);
  Tensor<T> xhat_t(xs);
  std::vector<T> rstd(static_cast<std::size_t>(B * groups));
  const T* x = input.value().ptr();
  const T* gamma_v = gain.value().ptr();
  const T* beta_v = bias.value().ptr();
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t gi = 0; gi < groups; ++gi) {
      const std::int64_t base = (b * C + gi * cpg) * HW;
      ConstArr<T> xg(x + base, gsize);
      const double mu = xg.template cast<double>().sum() / static_cast<double>(gsize);
      const double v = (xg.template cast<double>() - mu).square().sum() / static_cast<double>(gsize);
      const double r = 1.0 / std::sqrt(v + static_cast<double>(eps));
      rstd[static_cast<std::size_t>(b * groups + gi)] = static_cast<T>(r);
      for (std::int64_t k = 0; k < cpg; ++k) {
        const std::int64_t c = gi * cpg + k;
        const std::int64_t off = base + k * HW;
        Arr<T> xh(xhat_t.ptr() + off, HW);
        xh = ((ConstArr<T>(x + off, HW).template cast<double>() - mu) * r).template cast<T>();
        Arr<T>(out.ptr() + off, HW) = xh * gamma_v[c] + beta_v[c];
      }
    }
  }
  const bool rec = recording<T>({&input, &gain, &bias});
  Var<T> result = make_output(std::move(out), rec);
  if (rec) {
    Tape<T>::active()->record(result.node(), [xn = input.node(), gn = gain.node(), bn = bias.node(),
                                              on = result.node(), xhat_t = std::move(xhat_t), rstd = std::move(rstd), B,
                                              C, HW, groups, cpg, gsize]() {
      if (!on->has_grad()) return;
      const T* gy = on->grad.ptr();
      const T* xhat = xhat_t.ptr();
      if (gn->requires_grad || bn->requires_grad) {
        T* gg = gn->requires_grad ? gn->grad_buffer() : nullptr;
        T* gb = bn->requires_grad ? bn->grad_buffer() : nullptr;
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t c = 0; c < C; ++c) {
            const std::int64_t base = (b * C + c) * HW;
            ConstArr<T> g(gy + base, HW);
            if (gg) gg[c] += (g * ConstArr<T>(xhat + base, HW)).sum();
            if (gb) gb[c] += g.sum();
          }
      }
      if (!xn->requires_grad) return;
      T* gx = xn->grad_buffer();
      const T* gamma = gn->value.ptr();
      for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t gi = 0; gi < groups; ++gi) {
          double m1 = 0, m2 = 0;
          for (std::int64_t k = 0; k < cpg; ++k) {
            const std::int64_t off = (b * C + gi * cpg + k) * HW;
            const double gm = gamma[gi * cpg + k];
            ConstArr<T> g(gy + off, HW);
            m1 += gm * g.template cast<double>().sum();
            m2 += gm * (g.template cast<double>() * ConstArr<T>(xhat + off, HW).template cast<double>()).sum();
          }
          m1 /= static_cast<double>(gsize);
          m2 /= static_cast<double>(gsize);
          const double r = rstd[static_cast<std::size_t>(b * groups + gi)];
          for (std::int64_t k = 0; k < cpg; ++k) {
            const std::int64_t off = (b * C + gi * cpg + k) * HW;
            const double gm = gamma[gi * cpg + k];
            Arr<T>(gx + off, HW) +=
                (r * (ConstArr<T>(gy + off, HW).template cast<double>() * gm - m1 -
                      ConstArr<T>(xhat + off, HW).template cast<double>() * m2))
                    .template cast<T>();
          }
        }
      }
    });
  }
  return result;
}

template <typename T>
Var<T> resample(const Var<T>& input, ResampleDirection direction) {
  const Shape& xs = input.shape();
  require(xs.size() == 4, "resample: input must be rank 4, got " + shape_str(xs));
  const std::int64_t BC = xs[0] * xs[1], H = xs[2], W = xs[3];
  const bool down = direction == ResampleDirection::down;
  if (down) require(H % 2 == 0 && W % 2 == 0, "resample down: odd spatial extent in " + shape_str(xs));
  const std::int64_t Ho = down ? H / 2 : H * 2, Wo = down ? W / 2 : W * 2;
  Tensor<T> out(Shape{xs[0], xs[1], Ho, Wo});
  const T* x = input.value().ptr();
  for (std::int64_t p = 0; p < BC; ++p)
    for (std::int64_t y = 0; y < Ho; ++y)
      for (std::int64_t xx = 0; xx < Wo; ++xx) {
        const std::int64_t sy = down ? 2 * y : y / 2, sx = down ? 2 * xx : xx / 2;
        out[(p * Ho + y) * Wo + xx] = x[(p * H + sy) * W + sx];
      }
  const bool rec = recording<T>({&input});
  Var<T> result = make_output(std::move(out), rec);
  if (rec) {
    Tape<T>::active()->record(result.node(), [xn = input.node(), on = result.node(), BC, H, W, Ho, Wo, down]() {
      if (!on->has_grad()) return;
      T* gx = xn->grad_buffer();
      const T* gy = on->grad.ptr();
      for (std::int64_t p = 0; p < BC; ++p)
        for (std::int64_t y = 0; y < Ho; ++y)
          for (std::int64_t xx = 0; xx < Wo; ++xx) {
            const std::int64_t sy = down ? 2 * y : y / 2, sx = down ? 2 * xx : xx / 2;
            gx[(p * H + sy) * W + sx] += gy[(p * Ho + y) * Wo + xx];
          }
    });
  }
  return result;
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  require(as.size() == 4 && bs.size() == 4 && as[0] == bs[0] && as[2] == bs[2] && as[3] == bs[3],
          two_shapes("concat_channels", as, bs));
  const std::int64_t B = as[0], HW = as[2] * as[3];
  const std::int64_t na = as[1] * HW, nb = bs[1] * HW;
  Tensor<T> out(Shape{B, as[1] + bs[1], as[2], as[3]});
  for (std::int64_t i = 0; i < B; ++i) {
    std::copy_n(a.value().ptr() + i * na, na, out.ptr() + i * (na + nb));
    std::copy_n(b.value().ptr() + i * nb, nb, out.ptr() + i * (na + nb) + na);
  }
  const bool rec = recording<T>({&a, &b});
  Var<T> result = make_output(std::move(out), rec);
  if (rec) {
    Tape<T>::active()->record(result.node(), [an = a.node(), bn = b.node(), on = result.node(), B, na, nb]() {
      if (!on->has_grad()) return;
      const T* g = on->grad.ptr();
      if (an->requires_grad) {
        T* ga = an->grad_buffer();
        for (std::int64_t i = 0; i < B; ++i)
          for (std::int64_t j = 0; j < na; ++j) ga[i * na + j] += g[i * (na + nb) + j];
      }
      if (bn->requires_grad) {
        T* gb = bn->grad_buffer();
        for (std::int64_t i = 0; i < B; ++i)
          for (std::int64_t j = 0; j < nb; ++j) gb[i * nb + j] += g[i * (na + nb) + na + j];
      }
    });
  }
  return result;
}

template <typename T>
Var<T> spatial_mean(const Var<T>& input) {
  const Shape& xs = input.shape();
  require(xs.size() == 4, "spatial_mean: input must be rank 4, got " + shape_str(xs));
  const std::int64_t BC = xs[0] * xs[1], HW = xs[2] * xs[3];
  Tensor<T> out(Shape{xs[0], xs[1]});
  for (std::int64_t p = 0; p < BC; ++p) {
    double s = 0;
    for (std::int64_t i = 0; i < HW; ++i) s += input.value()[p * HW + i];
    out[p] = static_cast<T>(s / static_cast<double>(HW));
  }
  const bool rec = recording<T>({&input});
  Var<T> result = make_output(std::move(out), rec);
  if (rec) {
    Tape<T>::active()->record(result.node(), [xn = input.node(), on = result.node(), BC, HW]() {
      if (!on->has_grad()) return;
      T* gx = xn->grad_buffer();
      const T inv = T(1) / static_cast<T>(HW);
      for (std::int64_t p = 0; p < BC; ++p) {
        const T g = on->grad[p] * inv;
        for (std::int64_t i = 0; i < HW; ++i) gx[p * HW + i] += g;
      }
    });
  }
  return result;
}

template <typename T>
Var<T> embedding(const Var<T>& table, const std::vector<int>& ids) {
  const Shape& ts = table.shape();
  require(ts.size() == 2, "embedding: table must be rank 2, got " + shape_str(ts));
  const std::int64_t K = ts[0], D = ts[1];
  const std::int64_t B = static_cast<std::int64_t>(ids.size());
  Tensor<T> out(Shape{B, D});
  for (std::int64_t i = 0; i < B; ++i) {
    const int id = ids[static_cast<std::size_t>(i)];
    if (id < -1 || id >= K) {
      throw std::out_of_range("embedding: id " + std::to_string(id) + " outside [-1," + std::to_string(K) + ")");
    }
    if (id < 0) continue;
    std::copy_n(table.value().ptr() + id * D, D, out.ptr() + i * D);
  }
  const bool rec = recording<T>({&table});
  Var<T> result = make_output(std::move(out), rec);
  if (rec) {
    Tape<T>::active()->record(result.node(), [tn = table.node(), on = result.node(), ids, D]() {
      if (!on->has_grad()) return;
      T* gt = tn->grad_buffer();
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::int64_t d = 0; d < D && ids[i] >= 0; ++d) gt[ids[i] * D + d] += on->grad[static_cast<std::int64_t>(i) * D + d];
    });
  }
  return result;
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
  const Shape& ls = logits.shape();
  require(ls.size() == 2 && ls[0] == static_cast<std::int64_t>(labels.size()),
          "cross_entropy: logits " + shape_str(ls) + " vs " + std::to_string(labels.size()) + " labels");
  const std::int64_t B = ls[0], K = ls[1];
  std::vector<T> probs(static_cast<std::size_t>(B * K));
  double total = 0;
  for (std::int64_t b = 0; b < B; ++b) {
    const int y = labels[static_cast<std::size_t>(b)];
    if (y < 0 || y >= K) throw std::out_of_range("cross_entropy: label out of range");
    const T* row = logits.value().ptr() + b * K;
    const T mx = *std::max_element(row, row + K);
    double z = 0;
    for (std::int64_t k = 0; k < K; ++k) z += std::exp(static_cast<double>(row[k] - mx));
    for (std::int64_t k = 0; k < K; ++k)
      probs[static_cast<std::size_t>(b * K + k)] = static_cast<T>(std::exp(static_cast<double>(row[k] - mx)) / z);
    total += -(static_cast<double>(row[y] - mx) - std::log(z));
  }
  const bool rec = recording<T>({&logits});
  Var<T> result = make_output(Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(B))), rec);
  if (rec) {
    Tape<T>::active()->record(result.node(), [ln = logits.node(), on = result.node(), probs = std::move(probs),
                                              labels, B, K]() {
      if (!on->has_grad()) return;
      const T g = on->grad[0] / static_cast<T>(B);
      T* gl = ln->grad_buffer();
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t k = 0; k < K; ++k) {
          const T onehot = k == labels[static_cast<std::size_t>(b)] ? T(1) : T(0);
          gl[b * K + k] += g * (probs[static_cast<std::size_t>(b * K + k)] - onehot);
        }
    });
  }
  return result;
}

template <typename T>
Var<T> squared_distance(const Var<T>& a, const Tensor<T>& target) {
  require(a.shape() == target.shape(), two_shapes("squared_distance", a.shape(), target.shape()));
  const std::int64_t n = target.numel();
  long double acc = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const T d = a.value()[i] - target[i];
    acc += static_cast<long double>(d) * d;
  }
  const bool rec = recording<T>({&a});
  Var<T> result = make_output(Tensor<T>::scalar(static_cast<T>(acc)), rec);
  if (rec) {
    Tape<T>::active()->record(result.node(), [an = a.node(), on = result.node(), target, n]() {
      if (!on->has_grad()) return;
      const T g = on->grad[0] * T(2);
      T* ga = an->grad_buffer();
      for (std::int64_t i = 0; i < n; ++i) ga[i] += g * (an->value[i] - target[i]);
    });
  }
  return result;
}

template <typename T>
Var<T> mse(const Var<T>& pred, const Tensor<T>& target) {
  if (target.numel() == 0) throw ShapeError("mse of empty tensor");
  return scale(squared_distance(pred, target), T(1) / static_cast<T>(target.numel()));
}

template <typename T>
Var<T> detach(const Var<T>& a) {
  return Var<T>::leaf(a.value(), false);
}

#define MAGIC_INSTANTIATE_OPS(T)                                                                        \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                   \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                   \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                   \
  template Var<T> scale(const Var<T>&, T);                                                             \
  template Var<T> silu(const Var<T>&);                                                                 \
  template Var<T> relu(const Var<T>&);                                                                 \
  template Var<T> square(const Var<T>&);                                                               \
  template Var<T> elementwise(ElementwiseOp, const Var<T>&, const Var<T>*, T);                          \
  template Var<T> sum(const Var<T>&);                                                                  \
  template Var<T> mean(const Var<T>&);                                                                 \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, int, int);                        \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                                  \
  template Var<T> normalize_channels(const Var<T>&, const Var<T>&, const Var<T>&, int, T);              \
  template Var<T> resample(const Var<T>&, ResampleDirection);                                          \
  template Var<T> concat_channels(const Var<T>&, const Var<T>&);                                       \
  template Var<T> spatial_mean(const Var<T>&);                                                         \
  template Var<T> embedding(const Var<T>&, const std::vector<int>&);                                   \
  template Var<T> cross_entropy(const Var<T>&, const std::vector<int>&);                               \
  template Var<T> squared_distance(const Var<T>&, const Tensor<T>&);                                   \
  template Var<T> mse(const Var<T>&, const Tensor<T>&);                                                \
  template Var<T> detach(const Var<T>&);

MAGIC_INSTANTIATE_OPS(float)
MAGIC_INSTANTIATE_OPS(double)

}  // namespace magic
