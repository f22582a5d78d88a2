#include "c2l/ops.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace c2l::ops {

namespace {

template <typename T>
using NodeP = std::shared_ptr<detail::Node<T>>;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    fail(ErrorKind::Dimension,
         std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    fail(ErrorKind::Dimension, std::string(op) + ": expected rank " + std::to_string(rank) +
                                   ", got " + shape_str(s));
  }
}

// Per-channel parameter indexing for [C] or [N,C] shaped broadcasts.
struct ChannelIndex {
  std::size_t channels = 0;
  bool per_sample = false;
  std::size_t operator()(std::size_t n, std::size_t c) const {
    return per_sample ? n * channels + c : c;
  }
};

template <typename T>
ChannelIndex channel_index(const BasicTensor<T>& p, std::size_t n, std::size_t c, const char* op) {
  if (p.rank() == 1 && p.dim(0) == c) return {c, false};
  if (p.rank() == 2 && p.dim(0) == n && p.dim(1) == c) return {c, true};
  fail(ErrorKind::Dimension, std::string(op) + ": per-channel parameter shape " + shape_str(p.shape()) +
                                 " incompatible with N=" + std::to_string(n) + ", C=" + std::to_string(c));
}

struct ConvGeom {
  std::size_t n, c, h, w, o, k, stride, pad, oh, ow;
  std::size_t kdim() const { return c * k * k; }
  std::size_t pix() const { return oh * ow; }
};

// Output columns [ox_lo, ox_hi) read input column ox * stride + offset inside [0, w).
struct ColRange {
  std::size_t lo, hi;
};

inline ColRange valid_cols(const ConvGeom& g, long offset) {
  long lo = 0, hi = static_cast<long>(g.ow);
  while (lo < hi && lo * static_cast<long>(g.stride) + offset < 0) ++lo;
  while (hi > lo && (hi - 1) * static_cast<long>(g.stride) + offset >= static_cast<long>(g.w)) --hi;
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// Column matrix rows are `ld` apart so several samples can share one matrix.
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col, std::size_t ld) {
  for (std::size_t c = 0; c < g.c; ++c) {
    const T* xc = x + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        T* row = col + ((c * g.k + ki) * g.k + kj) * ld;
        const long xoff = static_cast<long>(kj) - static_cast<long>(g.pad);
        const ColRange r = valid_cols(g, xoff);
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          T* dst = row + oy * g.ow;
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.ow, T(0));
            continue;
          }
          const T* src = xc + static_cast<std::size_t>(iy) * g.w;
          std::fill(dst, dst + r.lo, T(0));
          if (g.stride == 1) {
            std::copy(src + (static_cast<long>(r.lo) + xoff), src + (static_cast<long>(r.hi) + xoff), dst + r.lo);
          } else {
            for (std::size_t ox = r.lo; ox < r.hi; ++ox) dst[ox] = src[static_cast<long>(ox * g.stride) + xoff];
          }
          std::fill(dst + r.hi, dst + g.ow, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeom& g, T* x, std::size_t ld) {
  for (std::size_t c = 0; c < g.c; ++c) {
    T* xc = x + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const T* row = col + ((c * g.k + ki) * g.k + kj) * ld;
        const long xoff = static_cast<long>(kj) - static_cast<long>(g.pad);
        const ColRange r = valid_cols(g, xoff);
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          const T* src = row + oy * g.ow;
          T* dst = xc + static_cast<std::size_t>(iy) * g.w;
          for (std::size_t ox = r.lo; ox < r.hi; ++ox) dst[static_cast<long>(ox * g.stride) + xoff] += src[ox];
        }
      }
    }
  }
}

// Batched column matrix [C*k*k, N*P]; sample n occupies columns [n*P, (n+1)*P).
template <typename T>
std::vector<T> batch_im2col(const T* x, const ConvGeom& g) {
  const std::size_t P = g.pix(), ld = g.n * P, in_stride = g.c * g.h * g.w;
  std::vector<T> col(g.kdim() * ld);
  for (std::size_t n = 0; n < g.n; ++n) im2col(x + n * in_stride, g, col.data() + n * P, ld);
  return col;
}

// Stride-1 convolution as k*k shifted GEMMs over a zero-padded, channel-major
// copy of the batch. Output is computed on the padded grid ("wide" layout);
// positions past the valid window are discarded.
struct WideGeom {
  std::size_t hp, wp, L, Lw;
  explicit WideGeom(const ConvGeom& g)
      : hp(g.h + 2 * g.pad), wp(g.w + 2 * g.pad), L(g.n * hp * wp),
        Lw(L - (g.k - 1) * wp - (g.k - 1)) {}
  std::size_t at(std::size_t n, std::size_t y, std::size_t x) const { return n * hp * wp + y * wp + x; }
};

template <typename T>
std::vector<T> pad_channel_major(const T* x, const ConvGeom& g, const WideGeom& wg) {
  std::vector<T> xp(g.c * wg.L, T(0));
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t c = 0; c < g.c; ++c)
      for (std::size_t y = 0; y < g.h; ++y)
        std::copy_n(x + ((n * g.c + c) * g.h + y) * g.w, g.w, xp.data() + c * wg.L + wg.at(n, y + g.pad, g.pad));
  return xp;
}

// Kernel tap (ki, kj) as an [O, C] matrix.
template <typename T>
RowMat<T> kernel_tap(const T* w, const ConvGeom& g, std::size_t ki, std::size_t kj) {
  RowMat<T> m(g.o, g.c);
  for (std::size_t o = 0; o < g.o; ++o)
    for (std::size_t c = 0; c < g.c; ++c) m(o, c) = w[((o * g.c + c) * g.k + ki) * g.k + kj];
  return m;
}

}  // namespace

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "add");
  Buffer<T> out(a.numel());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return detail::make_result<T>(a.shape(), std::move(out), "add", {a.node(), b.node()},
                                [](detail::Node<T>& self) {
                                  for (auto& p : self.parents)
                                    if (p->requires_grad) p->accumulate(self.grad);
                                });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "sub");
  Buffer<T> out(a.numel());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return detail::make_result<T>(a.shape(), std::move(out), "sub", {a.node(), b.node()},
                                [](detail::Node<T>& self) {
                                  if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad);
                                  if (self.parents[1]->requires_grad) {
                                    auto& g = self.parents[1]->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
                                  }
                                });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "mul");
  Buffer<T> out(a.numel());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return detail::make_result<T>(a.shape(), std::move(out), "mul", {a.node(), b.node()},
                                [](detail::Node<T>& self) {
                                  auto& pa = *self.parents[0];
                                  auto& pb = *self.parents[1];
                                  if (pa.requires_grad) {
                                    auto& g = pa.grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.values[i];
                                  }
                                  if (pb.requires_grad) {
                                    auto& g = pb.grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.values[i];
                                  }
                                });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T s) {
  Buffer<T> out(a.numel());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  return detail::make_result<T>(a.shape(), std::move(out), "scale", {a.node()},
                                [s](detail::Node<T>& self) {
                                  auto& g = self.parents[0]->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
                                });
}

template <typename T>
BasicTensor<T> silu(const BasicTensor<T>& a) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  Buffer<T> out(a.numel());
  Eigen::Map<const Arr> x(a.values().data(), a.numel());
  Eigen::Map<Arr>(out.data(), out.size()) = x / (T(1) + (-x).exp());
  return detail::make_result<T>(a.shape(), std::move(out), "silu", {a.node()},
                                [](detail::Node<T>& self) {
                                  auto& p = *self.parents[0];
                                  auto& g = p.grad_buffer();
                                  const auto n = static_cast<Eigen::Index>(g.size());
                                  Eigen::Map<const Arr> x(p.values.data(), n), gy(self.grad.data(), n);
                                  const Arr sig = T(1) / (T(1) + (-x).exp());
                                  Eigen::Map<Arr>(g.data(), n) += gy * sig * (T(1) + x * (T(1) - sig));
                                });
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  require(shape_numel(shape) == a.numel(), ErrorKind::Dimension,
          "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  Buffer<T> out(a.values().begin(), a.values().end());
  return detail::make_result<T>(std::move(shape), std::move(out), "reshape", {a.node()},
                                [](detail::Node<T>& self) { self.parents[0]->accumulate(self.grad); });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  T s = 0;
  for (T v : a.values()) s += v;
  return detail::make_result<T>(Shape{}, {s}, "sum", {a.node()}, [](detail::Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  require(a.numel() > 0, ErrorKind::Dimension, "mean of empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
BasicTensor<T> scale_rows(const BasicTensor<T>& a, std::span<const T> factors) {
  require(a.rank() >= 1 && a.dim(0) == factors.size(), ErrorKind::Dimension,
          "scale_rows: factor count does not match first axis");
  const std::size_t rows = factors.size();
  const std::size_t stride = rows ? a.numel() / rows : 0;
  Buffer<T> out(a.numel());
  auto av = a.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < stride; ++j) out[r * stride + j] = av[r * stride + j] * factors[r];
  std::vector<T> f(factors.begin(), factors.end());
  return detail::make_result<T>(a.shape(), std::move(out), "scale_rows", {a.node()},
                                [f = std::move(f), stride](detail::Node<T>& self) {
                                  auto& g = self.parents[0]->grad_buffer();
                                  for (std::size_t r = 0; r < f.size(); ++r)
                                    for (std::size_t j = 0; j < stride; ++j)
                                      g[r * stride + j] += self.grad[r * stride + j] * f[r];
                                });
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>* bias) {
  require_rank(x.shape(), 2, "linear input");
  require_rank(weight.shape(), 2, "linear weight");
  const std::size_t N = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  require(weight.dim(1) == in, ErrorKind::Dimension,
          "linear: input width " + std::to_string(in) + " vs weight " + shape_str(weight.shape()));
  if (bias) {
    require(bias->rank() == 1 && bias->dim(0) == out_dim, ErrorKind::Dimension, "linear: bias shape");
  }
  Buffer<T> out(N * out_dim);
  {
    Eigen::Map<const RowMat<T>> X(x.values().data(), N, in);
    Eigen::Map<const RowMat<T>> Wm(weight.values().data(), out_dim, in);
    Eigen::Map<RowMat<T>> Y(out.data(), N, out_dim);
    Y.noalias() = X * Wm.transpose();
    if (bias) {
      auto bv = bias->values();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < out_dim; ++o) out[n * out_dim + o] += bv[o];
    }
  }
  std::vector<NodeP<T>> parents{x.node(), weight.node()};
  if (bias) parents.push_back(bias->node());
  return detail::make_result<T>(
      Shape{N, out_dim}, std::move(out), "linear", std::move(parents),
      [N, in, out_dim](detail::Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        Eigen::Map<const RowMat<T>> G(self.grad.data(), N, out_dim);
        if (px.requires_grad) {
          Eigen::Map<RowMat<T>> GX(px.grad_buffer().data(), N, in);
          Eigen::Map<const RowMat<T>> Wm(pw.values.data(), out_dim, in);
          GX.noalias() += G * Wm;
        }
        if (pw.requires_grad) {
          Eigen::Map<RowMat<T>> GW(pw.grad_buffer().data(), out_dim, in);
          Eigen::Map<const RowMat<T>> X(px.values.data(), N, in);
          GW.noalias() += G.transpose() * X;
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
          auto& gb = self.parents[2]->grad_buffer();
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t o = 0; o < out_dim; ++o) gb[o] += self.grad[n * out_dim + o];
        }
      });
}

template <typename T>
BasicTensor<T> conv2d_shifted(const BasicTensor<T>& input, const BasicTensor<T>& kernel, const BasicTensor<T>* bias,
                              const ConvGeom& g, std::vector<NodeP<T>> parents) {
  using Stride = Eigen::OuterStride<>;
  using XMap = Eigen::Map<const RowMat<T>, 0, Stride>;
  const WideGeom wg(g);
  const auto C = static_cast<Eigen::Index>(g.c), Lw = static_cast<Eigen::Index>(wg.Lw);
  const auto L = static_cast<Eigen::Index>(wg.L);
  const std::vector<T> xp = pad_channel_major(input.values().data(), g, wg);
  RowMat<T> Y = RowMat<T>::Zero(g.o, Lw);
  for (std::size_t ki = 0; ki < g.k; ++ki)
    for (std::size_t kj = 0; kj < g.k; ++kj) {
      XMap X(xp.data() + ki * wg.wp + kj, C, Lw, Stride(L));
      Y.noalias() += kernel_tap(kernel.values().data(), g, ki, kj) * X;
    }
  Buffer<T> out(g.n * g.o * g.pix());
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t o = 0; o < g.o; ++o) {
      const T b = bias ? bias->values()[o] : T(0);
      for (std::size_t y = 0; y < g.oh; ++y) {
        const T* src = Y.data() + o * wg.Lw + wg.at(n, y, 0);
        T* dst = out.data() + ((n * g.o + o) * g.oh + y) * g.ow;
        for (std::size_t x = 0; x < g.ow; ++x) dst[x] = src[x] + b;
      }
    }
  return detail::make_result<T>(
      Shape{g.n, g.o, g.oh, g.ow}, std::move(out), "conv2d", std::move(parents),
      [g](detail::Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        const WideGeom wg(g);
        const auto C = static_cast<Eigen::Index>(g.c), Lw = static_cast<Eigen::Index>(wg.Lw);
        const auto L = static_cast<Eigen::Index>(wg.L);
        RowMat<T> G = RowMat<T>::Zero(g.o, Lw);
        for (std::size_t n = 0; n < g.n; ++n)
          for (std::size_t o = 0; o < g.o; ++o)
            for (std::size_t y = 0; y < g.oh; ++y)
              std::copy_n(self.grad.data() + ((n * g.o + o) * g.oh + y) * g.ow, g.ow,
                          G.data() + o * wg.Lw + wg.at(n, y, 0));
        if (pw.requires_grad) {
          const std::vector<T> xp = pad_channel_major(px.values.data(), g, wg);
          auto& gw = pw.grad_buffer();
          for (std::size_t ki = 0; ki < g.k; ++ki)
            for (std::size_t kj = 0; kj < g.k; ++kj) {
              XMap X(xp.data() + ki * wg.wp + kj, C, Lw, Stride(L));
              const RowMat<T> tap = G * X.transpose();
              for (std::size_t o = 0; o < g.o; ++o)
                for (std::size_t c = 0; c < g.c; ++c) gw[((o * g.c + c) * g.k + ki) * g.k + kj] += tap(o, c);
            }
        }
        if (px.requires_grad) {
          RowMat<T> gxp = RowMat<T>::Zero(C, L);
          for (std::size_t ki = 0; ki < g.k; ++ki)
            for (std::size_t kj = 0; kj < g.k; ++kj) {
              Eigen::Map<RowMat<T>, 0, Stride> GX(gxp.data() + ki * wg.wp + kj, C, Lw, Stride(L));
              GX.noalias() += kernel_tap(pw.values.data(), g, ki, kj).transpose() * G;
            }
          auto& gx = px.grad_buffer();
          for (std::size_t n = 0; n < g.n; ++n)
            for (std::size_t c = 0; c < g.c; ++c)
              for (std::size_t y = 0; y < g.h; ++y) {
                const T* src = gxp.data() + c * wg.L + wg.at(n, y + g.pad, g.pad);
                T* dst = gx.data() + ((n * g.c + c) * g.h + y) * g.w;
                for (std::size_t x = 0; x < g.w; ++x) dst[x] += src[x];
              }
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
          auto& gb = self.parents[2]->grad_buffer();
          for (std::size_t o = 0; o < g.o; ++o) gb[o] += G.row(o).sum();
        }
      });
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel, const BasicTensor<T>* bias,
                      std::size_t stride, std::size_t padding) {
  require_rank(input.shape(), 4, "conv2d input");
  require_rank(kernel.shape(), 4, "conv2d kernel");
  require(stride >= 1, ErrorKind::Config, "conv2d: stride must be >= 1");
  ConvGeom g{};
  g.n = input.dim(0);
  g.c = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.o = kernel.dim(0);
  g.k = kernel.dim(2);
  g.stride = stride;
  g.pad = padding;
  require(kernel.dim(1) == g.c, ErrorKind::Dimension,
          "conv2d: kernel expects " + std::to_string(kernel.dim(1)) + " channels, input has " +
              std::to_string(g.c));
  require(kernel.dim(3) == g.k, ErrorKind::Dimension, "conv2d: kernel must be square");
  require(g.k <= g.h + 2 * padding && g.k <= g.w + 2 * padding, ErrorKind::Dimension,
          "conv2d: kernel larger than padded input");
  if (bias) require(bias->rank() == 1 && bias->dim(0) == g.o, ErrorKind::Dimension, "conv2d: bias shape");
  g.oh = (g.h + 2 * padding - g.k) / stride + 1;
  g.ow = (g.w + 2 * padding - g.k) / stride + 1;

  std::vector<NodeP<T>> parents{input.node(), kernel.node()};
  if (bias) parents.push_back(bias->node());
  if (g.stride == 1) return conv2d_shifted(input, kernel, bias, g, std::move(parents));

  const std::size_t K = g.kdim(), P = g.pix(), NP = g.n * P;
  const std::vector<T> col = batch_im2col(input.values().data(), g);
  Eigen::Map<const RowMat<T>> Wm(kernel.values().data(), g.o, K);
  Eigen::Map<const RowMat<T>> C(col.data(), K, NP);
  RowMat<T> Y = Wm * C;
  Buffer<T> out(g.n * g.o * P);
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t o = 0; o < g.o; ++o) {
      const T b = bias ? bias->values()[o] : T(0);
      const T* src = Y.data() + o * NP + n * P;
      T* dst = out.data() + (n * g.o + o) * P;
      for (std::size_t p = 0; p < P; ++p) dst[p] = src[p] + b;
    }
  return detail::make_result<T>(
      Shape{g.n, g.o, g.oh, g.ow}, std::move(out), "conv2d", std::move(parents),
      [g](detail::Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        const std::size_t K = g.kdim(), P = g.pix(), NP = g.n * P, in_stride = g.c * g.h * g.w;
        RowMat<T> G(g.o, NP);
        for (std::size_t n = 0; n < g.n; ++n)
          for (std::size_t o = 0; o < g.o; ++o)
            std::copy_n(self.grad.data() + (n * g.o + o) * P, P, G.data() + o * NP + n * P);
        if (pw.requires_grad) {
          const std::vector<T> col = batch_im2col(px.values.data(), g);
          Eigen::Map<const RowMat<T>> C(col.data(), K, NP);
          RowMat<T> gw = G * C.transpose();
          pw.accumulate(std::span<const T>(gw.data(), g.o * K));
        }
        if (px.requires_grad) {
          Eigen::Map<const RowMat<T>> Wm(pw.values.data(), g.o, K);
          RowMat<T> gcol = Wm.transpose() * G;
          auto& gx = px.grad_buffer();
          for (std::size_t n = 0; n < g.n; ++n) col2im_add(gcol.data() + n * P, g, gx.data() + n * in_stride, NP);
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
          auto& gb = self.parents[2]->grad_buffer();
          for (std::size_t o = 0; o < g.o; ++o) gb[o] += G.row(o).sum();
        }
      });
}

template <typename T>
BasicTensor<T> add_channel_bias(const BasicTensor<T>& x, const BasicTensor<T>& bias) {
  require_rank(x.shape(), 4, "add_channel_bias");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const ChannelIndex idx = channel_index(bias, N, C, "add_channel_bias");
  Buffer<T> out(x.values().begin(), x.values().end());
  auto bv = bias.values();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T b = bv[idx(n, c)];
      T* row = out.data() + (n * C + c) * HW;
      for (std::size_t p = 0; p < HW; ++p) row[p] += b;
    }
  return detail::make_result<T>(x.shape(), std::move(out), "add_channel_bias", {x.node(), bias.node()},
                                [N, C, HW, idx](detail::Node<T>& self) {
                                  if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad);
                                  if (self.parents[1]->requires_grad) {
                                    auto& gb = self.parents[1]->grad_buffer();
                                    for (std::size_t n = 0; n < N; ++n)
                                      for (std::size_t c = 0; c < C; ++c) {
                                        const T* row = self.grad.data() + (n * C + c) * HW;
                                        T s = 0;
                                        for (std::size_t p = 0; p < HW; ++p) s += row[p];
                                        gb[idx(n, c)] += s;
                                      }
                                  }
                                });
}

template <typename T>
BasicTensor<T> group_norm(const BasicTensor<T>& x, std::size_t groups, T eps) {
  require_rank(x.shape(), 4, "group_norm");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  require(groups >= 1 && C % groups == 0, ErrorKind::Config,
          "group_norm: " + std::to_string(groups) + " groups do not divide " + std::to_string(C) + " channels");
  const std::size_t m = (C / groups) * HW;
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const auto em = static_cast<Eigen::Index>(m);
  Buffer<T> out(x.numel());
  std::vector<T> inv_std(N * groups);
  for (std::size_t b = 0; b < N * groups; ++b) {
    Eigen::Map<const Arr> xb(x.values().data() + b * m, em);
    const T mu = xb.mean();
    const T var = (xb - mu).square().mean();
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std[b] = inv;
    Eigen::Map<Arr>(out.data() + b * m, em) = (xb - mu) * inv;
  }
  Buffer<T> normalized;
  if (grad_enabled() && x.node()->requires_grad) normalized = out;
  return detail::make_result<T>(
      x.shape(), std::move(out), "group_norm", {x.node()},
      [m, em, inv_std = std::move(inv_std), y = std::move(normalized)](detail::Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t b = 0; b < inv_std.size(); ++b) {
          Eigen::Map<const Arr> dy(self.grad.data() + b * m, em), yb(y.data() + b * m, em);
          const T mean_dy = dy.mean();
          const T mean_dy_y = (dy * yb).mean();
          Eigen::Map<Arr>(g.data() + b * m, em) += inv_std[b] * (dy - mean_dy - yb * mean_dy_y);
        }
      });
}

template <typename T>
BasicTensor<T> film_modulate(const BasicTensor<T>& h, const BasicTensor<T>& gamma, const BasicTensor<T>& beta) {
  require_rank(h.shape(), 4, "film_modulate");
  const std::size_t N = h.dim(0), C = h.dim(1), HW = h.dim(2) * h.dim(3);
  const ChannelIndex gi = channel_index(gamma, N, C, "film_modulate gamma");
  const ChannelIndex bi = channel_index(beta, N, C, "film_modulate beta");
  Buffer<T> out(h.numel());
  auto hv = h.values(), gv = gamma.values(), bv = beta.values();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T gm = gv[gi(n, c)], bt = bv[bi(n, c)];
      const std::size_t off = (n * C + c) * HW;
      for (std::size_t p = 0; p < HW; ++p) out[off + p] = gm * hv[off + p] + bt;
    }
  return detail::make_result<T>(
      h.shape(), std::move(out), "film_modulate", {h.node(), gamma.node(), beta.node()},
      [N, C, HW, gi, bi](detail::Node<T>& self) {
        auto& ph = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t off = (n * C + c) * HW;
            const T* dy = self.grad.data() + off;
            if (ph.requires_grad) {
              auto& g = ph.grad_buffer();
              const T gm = pg.values[gi(n, c)];
              for (std::size_t p = 0; p < HW; ++p) g[off + p] += dy[p] * gm;
            }
            if (pg.requires_grad) {
              T s = 0;
              for (std::size_t p = 0; p < HW; ++p) s += dy[p] * ph.values[off + p];
              pg.grad_buffer()[gi(n, c)] += s;
            }
            if (pb.requires_grad) {
              T s = 0;
              for (std::size_t p = 0; p < HW; ++p) s += dy[p];
              pb.grad_buffer()[bi(n, c)] += s;
            }
          }
      });
}

template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank(a.shape(), 4, "concat_channels");
  require_rank(b.shape(), 4, "concat_channels");
  require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3), ErrorKind::Dimension,
          "concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), HW = a.dim(2) * a.dim(3);
  Buffer<T> out(N * (Ca + Cb) * HW);
  auto av = a.values(), bv = b.values();
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(av.data() + n * Ca * HW, Ca * HW, out.data() + n * (Ca + Cb) * HW);
    std::copy_n(bv.data() + n * Cb * HW, Cb * HW, out.data() + (n * (Ca + Cb) + Ca) * HW);
  }
  return detail::make_result<T>(Shape{N, Ca + Cb, a.dim(2), a.dim(3)}, std::move(out), "concat_channels",
                                {a.node(), b.node()}, [N, Ca, Cb, HW](detail::Node<T>& self) {
                                  auto& pa = *self.parents[0];
                                  auto& pb = *self.parents[1];
                                  for (std::size_t n = 0; n < N; ++n) {
                                    const T* src = self.grad.data() + n * (Ca + Cb) * HW;
                                    if (pa.requires_grad) {
                                      T* dst = pa.grad_buffer().data() + n * Ca * HW;
                                      for (std::size_t i = 0; i < Ca * HW; ++i) dst[i] += src[i];
                                    }
                                    if (pb.requires_grad) {
                                      T* dst = pb.grad_buffer().data() + n * Cb * HW;
                                      for (std::size_t i = 0; i < Cb * HW; ++i) dst[i] += src[Ca * HW + i];
                                    }
                                  }
                                });
}

template <typename T>
BasicTensor<T> upsample_nearest2x(const BasicTensor<T>& x) {
  require_rank(x.shape(), 4, "upsample_nearest2x");
  const std::size_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  Buffer<T> out(NC * 4 * H * W);
  auto xv = x.values();
  for (std::size_t nc = 0; nc < NC; ++nc)
    for (std::size_t i = 0; i < 2 * H; ++i)
      for (std::size_t j = 0; j < 2 * W; ++j)
        out[(nc * 2 * H + i) * 2 * W + j] = xv[(nc * H + i / 2) * W + j / 2];
  return detail::make_result<T>(Shape{x.dim(0), x.dim(1), 2 * H, 2 * W}, std::move(out), "upsample_nearest2x",
                                {x.node()}, [NC, H, W](detail::Node<T>& self) {
                                  auto& g = self.parents[0]->grad_buffer();
                                  for (std::size_t nc = 0; nc < NC; ++nc)
                                    for (std::size_t i = 0; i < 2 * H; ++i)
                                      for (std::size_t j = 0; j < 2 * W; ++j)
                                        g[(nc * H + i / 2) * W + j / 2] += self.grad[(nc * 2 * H + i) * 2 * W + j];
                                });
}

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
  require_rank(x.shape(), 4, "global_avg_pool");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Buffer<T> out(N * C);
  auto xv = x.values();
  for (std::size_t i = 0; i < N * C; ++i) {
    T s = 0;
    for (std::size_t p = 0; p < HW; ++p) s += xv[i * HW + p];
    out[i] = s / static_cast<T>(HW);
  }
  return detail::make_result<T>(Shape{N, C}, std::move(out), "global_avg_pool", {x.node()},
                                [N, C, HW](detail::Node<T>& self) {
                                  auto& g = self.parents[0]->grad_buffer();
                                  const T inv = T(1) / static_cast<T>(HW);
                                  for (std::size_t i = 0; i < N * C; ++i)
                                    for (std::size_t p = 0; p < HW; ++p) g[i * HW + p] += self.grad[i] * inv;
                                });
}

template <typename T>
BasicTensor<T> weighted_mse(const BasicTensor<T>& pred, const BasicTensor<T>& target, std::span<const T> weights) {
  require_same_shape(pred, target, "weighted_mse");
  require(pred.rank() >= 1 && pred.dim(0) == weights.size(), ErrorKind::Dimension,
          "weighted_mse: one weight per sample required");
  const std::size_t N = weights.size();
  const std::size_t M = N ? pred.numel() / N : 0;
  require(N > 0 && M > 0, ErrorKind::Dimension, "weighted_mse: empty input");
  auto pv = pred.values(), tv = target.values();
  T total = 0;
  for (std::size_t n = 0; n < N; ++n) {
    T s = 0;
    for (std::size_t j = 0; j < M; ++j) {
      const T d = pv[n * M + j] - tv[n * M + j];
      s += d * d;
    }
    total += weights[n] * s / static_cast<T>(M);
  }
  total /= static_cast<T>(N);
  std::vector<T> w(weights.begin(), weights.end());
  return detail::make_result<T>(Shape{}, {total}, "weighted_mse", {pred.node(), target.node()},
                                [w = std::move(w), N, M](detail::Node<T>& self) {
                                  auto& pp = *self.parents[0];
                                  if (!pp.requires_grad) return;
                                  const auto& tv = self.parents[1]->values;
                                  auto& g = pp.grad_buffer();
                                  const T base = T(2) * self.grad[0] / static_cast<T>(N * M);
                                  for (std::size_t n = 0; n < N; ++n)
                                    for (std::size_t j = 0; j < M; ++j)
                                      g[n * M + j] += base * w[n] * (pp.values[n * M + j] - tv[n * M + j]);
                                });
}

template <typename T>
BasicTensor<T> l1_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
  require_same_shape(pred, target, "l1_loss");
  require(pred.numel() > 0, ErrorKind::Dimension, "l1_loss: empty input");
  auto pv = pred.values(), tv = target.values();
  T total = 0;
  for (std::size_t i = 0; i < pv.size(); ++i) total += std::abs(pv[i] - tv[i]);
  total /= static_cast<T>(pv.size());
  return detail::make_result<T>(Shape{}, {total}, "l1_loss", {pred.node(), target.node()},
                                [](detail::Node<T>& self) {
                                  auto& pp = *self.parents[0];
                                  if (!pp.requires_grad) return;
                                  const auto& tv = self.parents[1]->values;
                                  auto& g = pp.grad_buffer();
                                  const T base = self.grad[0] / static_cast<T>(g.size());
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                    const T d = pp.values[i] - tv[i];
                                    g[i] += d > 0 ? base : (d < 0 ? -base : T(0));
                                  }
                                });
}

template <typename T>
BasicTensor<T> embed_timestep(std::span<const int> timesteps, std::size_t dim) {
  require(dim >= 2 && dim % 2 == 0, ErrorKind::Config, "embed_timestep: dim must be even and >= 2");
  const std::size_t half = dim / 2;
  Buffer<T> out(timesteps.size() * dim);
  for (std::size_t n = 0; n < timesteps.size(); ++n) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double arg = static_cast<double>(timesteps[n]) * freq;
      out[n * dim + i] = static_cast<T>(std::sin(arg));
      out[n * dim + half + i] = static_cast<T>(std::cos(arg));
    }
  }
  return BasicTensor<T>(Shape{timesteps.size(), dim}, std::move(out));
}

#define C2L_INSTANTIATE_OPS(T)                                                                          \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                            \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                            \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                            \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                              \
  template BasicTensor<T> silu(const BasicTensor<T>&);                                                  \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                        \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                                   \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                                  \
  template BasicTensor<T> scale_rows(const BasicTensor<T>&, std::span<const T>);                        \
  template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>*);  \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>*,   \
                                 std::size_t, std::size_t);                                             \
  template BasicTensor<T> add_channel_bias(const BasicTensor<T>&, const BasicTensor<T>&);               \
  template BasicTensor<T> group_norm(const BasicTensor<T>&, std::size_t, T);                            \
  template BasicTensor<T> film_modulate(const BasicTensor<T>&, const BasicTensor<T>&,                   \
                                        const BasicTensor<T>&);                                         \
  template BasicTensor<T> concat_channels(const BasicTensor<T>&, const BasicTensor<T>&);                \
  template BasicTensor<T> upsample_nearest2x(const BasicTensor<T>&);                                    \
  template BasicTensor<T> global_avg_pool(const BasicTensor<T>&);                                       \
  template BasicTensor<T> weighted_mse(const BasicTensor<T>&, const BasicTensor<T>&, std::span<const T>); \
  template BasicTensor<T> l1_loss(const BasicTensor<T>&, const BasicTensor<T>&);                        \
  template BasicTensor<T> embed_timestep(std::span<const int>, std::size_t);

C2L_INSTANTIATE_OPS(float)
C2L_INSTANTIATE_OPS(double)

#undef C2L_INSTANTIATE_OPS

}  // namespace c2l::ops
