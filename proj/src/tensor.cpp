#include "sfr/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>

namespace sfr::nn {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  int c_in, h, w, c_out, k, stride, pad, h_out, w_out;

  std::size_t rows() const { return static_cast<std::size_t>(c_in) * k * k; }
  std::size_t cols() const { return static_cast<std::size_t>(h_out) * w_out; }
  bool pointwise() const { return k == 1 && stride == 1; }
};

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& x, const Tensor<T>& weight, int stride) {
  if (x.rank() != 3) throw ShapeMismatch("conv input must be (C, H, W), got " + shape_string(x.shape()));
  if (weight.rank() != 4 || weight.dim(2) != weight.dim(3)) {
    throw ShapeMismatch("conv weight must be (C_out, C_in, k, k), got " + shape_string(weight.shape()));
  }
  if (weight.dim(1) != x.dim(0)) {
    throw ShapeMismatch("conv expects " + std::to_string(weight.dim(1)) + " input channels, got " +
                        std::to_string(x.dim(0)));
  }
  if (stride < 1) throw ShapeMismatch("conv stride must be >= 1");
  ConvGeometry g{};
  g.c_in = x.dim(0);
  g.h = x.dim(1);
  g.w = x.dim(2);
  g.c_out = weight.dim(0);
  g.k = weight.dim(2);
  g.stride = stride;
  g.pad = (g.k - 1) / 2;
  g.h_out = (g.h + 2 * g.pad - g.k) / stride + 1;
  g.w_out = (g.w + 2 * g.pad - g.k) / stride + 1;
  if (g.h_out < 1 || g.w_out < 1) throw ShapeMismatch("conv input smaller than kernel");
  return g;
}

// Output rows [ho0, ho1) of the unfolded input; `col` is rows() x span
// with span = (ho1 - ho0) * w_out.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, int ho0, int ho1, T* col) {
  const std::size_t plane = static_cast<std::size_t>(g.h) * g.w;
  const std::size_t span = static_cast<std::size_t>(ho1 - ho0) * g.w_out;
  std::size_t row = 0;
  for (int c = 0; c < g.c_in; ++c) {
    const T* xc = x + c * plane;
    for (int u = 0; u < g.k; ++u) {
      for (int v = 0; v < g.k; ++v, ++row) {
        T* dst = col + row * span;
        for (int ho = ho0; ho < ho1; ++ho) {
          const int hi = ho * g.stride + u - g.pad;
          T* drow = dst + static_cast<std::size_t>(ho - ho0) * g.w_out;
          if (hi < 0 || hi >= g.h) {
            std::fill(drow, drow + g.w_out, T{0});
            continue;
          }
          const T* srow = xc + static_cast<std::size_t>(hi) * g.w;
          if (g.stride == 1) {
            const int shift = v - g.pad;
            const int lo = std::max(0, -shift);
            const int hi_w = std::min(g.w_out, g.w - shift);
            std::fill(drow, drow + lo, T{0});
            if (hi_w > lo) std::memcpy(drow + lo, srow + lo + shift, sizeof(T) * (hi_w - lo));
            std::fill(drow + std::max(hi_w, lo), drow + g.w_out, T{0});
          } else {
            for (int wo = 0; wo < g.w_out; ++wo) {
              const int wi = wo * g.stride + v - g.pad;
              drow[wo] = (wi >= 0 && wi < g.w) ? srow[wi] : T{0};
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, int ho0, int ho1, T* dx) {
  const std::size_t plane = static_cast<std::size_t>(g.h) * g.w;
  const std::size_t span = static_cast<std::size_t>(ho1 - ho0) * g.w_out;
  std::size_t row = 0;
  for (int c = 0; c < g.c_in; ++c) {
    T* dc = dx + c * plane;
    for (int u = 0; u < g.k; ++u) {
      for (int v = 0; v < g.k; ++v, ++row) {
        const T* src = col + row * span;
        for (int ho = ho0; ho < ho1; ++ho) {
          const int hi = ho * g.stride + u - g.pad;
          if (hi < 0 || hi >= g.h) continue;
          const T* srow = src + static_cast<std::size_t>(ho - ho0) * g.w_out;
          T* drow = dc + static_cast<std::size_t>(hi) * g.w;
          if (g.stride == 1) {
            const int shift = v - g.pad;
            const int lo = std::max(0, -shift);
            const int hi_w = std::min(g.w_out, g.w - shift);
            for (int wo = lo; wo < hi_w; ++wo) drow[wo + shift] += srow[wo];
          } else {
            for (int wo = 0; wo < g.w_out; ++wo) {
              const int wi = wo * g.stride + v - g.pad;
              if (wi >= 0 && wi < g.w) drow[wi] += srow[wo];
            }
          }
        }
      }
    }
  }
}

// Output rows per unfolded block, keeping the block around 256 KiB.
template <typename T>
int rows_per_block(const ConvGeometry& g) {
  const std::size_t bytes_per_row = g.rows() * static_cast<std::size_t>(g.w_out) * sizeof(T);
  const auto n = static_cast<int>((std::size_t{256} << 10) / std::max<std::size_t>(bytes_per_row, 1));
  return std::clamp(n, 1, g.h_out);
}

template <typename T>
AlignedVector<T>& scratch_buffer() {
  thread_local AlignedVector<T> buffer;
  return buffer;
}

// Stride-1 convolution with odd k as k*k shifted GEMMs over a zero-padded
// copy of the input. With the padded width Wp = W + k - 1, output (h, w)
// accumulates at flat index h * Wp + w and tap (u, v) reads the padded input
// at that index plus u * Wp + v, so every tap is one contiguous column block.
struct ShiftPlan {
  int c_in, c_out, k, h, w, pad, wp;
  Eigen::Index span;    // h * wp
  Eigen::Index padded;  // (h + k - 1) * wp + k - 1

  explicit ShiftPlan(const ConvGeometry& g)
      : c_in(g.c_in), c_out(g.c_out), k(g.k), h(g.h), w(g.w), pad(g.pad), wp(g.w + g.k - 1),
        span(static_cast<Eigen::Index>(g.h) * (g.w + g.k - 1)),
        padded(static_cast<Eigen::Index>(g.h + g.k - 1) * (g.w + g.k - 1) + g.k - 1) {}

  Eigen::Index offset(int u, int v) const { return static_cast<Eigen::Index>(u) * wp + v; }
};

bool use_shift_path(const ConvGeometry& g) { return g.stride == 1 && g.k > 1 && g.k % 2 == 1; }

template <typename T>
void pad_input(const T* x, const ShiftPlan& p, T* out) {
  std::fill(out, out + static_cast<std::size_t>(p.c_in) * p.padded, T{0});
  for (int c = 0; c < p.c_in; ++c) {
    const T* src = x + static_cast<std::size_t>(c) * p.h * p.w;
    T* dst = out + static_cast<std::size_t>(c) * p.padded;
    for (int i = 0; i < p.h; ++i) {
      std::memcpy(dst + static_cast<std::size_t>(i + p.pad) * p.wp + p.pad,
                  src + static_cast<std::size_t>(i) * p.w, sizeof(T) * p.w);
    }
  }
}

// Per-tap weight slices: taps[u * k + v] is C_out x C_in.
template <typename T>
std::vector<RowMat<T>> tap_weights(const T* weight, const ShiftPlan& p) {
  std::vector<RowMat<T>> taps(static_cast<std::size_t>(p.k * p.k), RowMat<T>(p.c_out, p.c_in));
  for (int o = 0; o < p.c_out; ++o)
    for (int i = 0; i < p.c_in; ++i)
      for (int t = 0; t < p.k * p.k; ++t)
        taps[static_cast<std::size_t>(t)](o, i) =
            weight[(static_cast<std::size_t>(o) * p.c_in + i) * p.k * p.k + t];
  return taps;
}

template <typename T>
struct Scratch {
  AlignedVector<T> a, b;
};

template <typename T>
Scratch<T>& shift_scratch() {
  thread_local Scratch<T> s;
  return s;
}

}  // namespace

std::string shape_string(const std::vector<int>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride) {
  const ConvGeometry g = conv_geometry(x, weight, stride);
  if (bias.size() != static_cast<std::size_t>(g.c_out)) throw ShapeMismatch("conv bias size mismatch");
  Tensor<T> y({g.c_out, g.h_out, g.w_out});
  const auto rows = static_cast<Eigen::Index>(g.rows());
  const auto cols = static_cast<Eigen::Index>(g.cols());
  ConstMatMap<T> wmat(weight.data(), g.c_out, rows);
  MatMap<T> ymat(y.data(), g.c_out, cols);
  if (g.pointwise()) {
    ymat.noalias() = wmat * ConstMatMap<T>(x.data(), rows, cols);
  } else if (use_shift_path(g)) {
    const ShiftPlan p(g);
    auto& buf = shift_scratch<T>();
    buf.a.resize(static_cast<std::size_t>(p.c_in) * p.padded);
    buf.b.assign(static_cast<std::size_t>(p.c_out) * p.span, T{0});
    pad_input(x.data(), p, buf.a.data());
    const auto taps = tap_weights(weight.data(), p);
    ConstMatMap<T> xp(buf.a.data(), p.c_in, p.padded);
    MatMap<T> acc(buf.b.data(), p.c_out, p.span);
    for (int u = 0; u < p.k; ++u)
      for (int v = 0; v < p.k; ++v)
        acc.noalias() += taps[static_cast<std::size_t>(u * p.k + v)] * xp.middleCols(p.offset(u, v), p.span);
    for (int o = 0; o < g.c_out; ++o)
      for (int i = 0; i < g.h; ++i)
        std::memcpy(y.data() + (static_cast<std::size_t>(o) * g.h + i) * g.w,
                    buf.b.data() + static_cast<std::size_t>(o) * p.span + static_cast<std::size_t>(i) * p.wp,
                    sizeof(T) * g.w);
  } else {
    const int block = rows_per_block<T>(g);
    auto& col = scratch_buffer<T>();
    col.resize(g.rows() * static_cast<std::size_t>(block) * g.w_out);
    for (int ho0 = 0; ho0 < g.h_out; ho0 += block) {
      const int ho1 = std::min(g.h_out, ho0 + block);
      const auto span = static_cast<Eigen::Index>(ho1 - ho0) * g.w_out;
      im2col(x.data(), g, ho0, ho1, col.data());
      ymat.middleCols(static_cast<Eigen::Index>(ho0) * g.w_out, span).noalias() =
          wmat * ConstMatMap<T>(col.data(), rows, span);
    }
  }
  for (int o = 0; o < g.c_out; ++o) ymat.row(o).array() += bias[static_cast<std::size_t>(o)];
  return y;
}

template <typename T>
Tensor<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, int stride,
                          const Tensor<T>& dy, Tensor<T>* dweight, Tensor<T>* dbias,
                          bool need_dx) {
  const ConvGeometry g = conv_geometry(x, weight, stride);
  if (dy.rank() != 3 || dy.dim(0) != g.c_out || dy.dim(1) != g.h_out || dy.dim(2) != g.w_out) {
    throw ShapeMismatch("conv output gradient has shape " + shape_string(dy.shape()));
  }
  const auto rows = static_cast<Eigen::Index>(g.rows());
  const auto cols = static_cast<Eigen::Index>(g.cols());
  ConstMatMap<T> dymat(dy.data(), g.c_out, cols);
  ConstMatMap<T> wmat(weight.data(), g.c_out, rows);

  if (dbias != nullptr) {
    for (int o = 0; o < g.c_out; ++o) (*dbias)[static_cast<std::size_t>(o)] += dymat.row(o).sum();
  }
  Tensor<T> dx;
  if (need_dx) dx = Tensor<T>({g.c_in, g.h, g.w});

  if (g.pointwise()) {
    if (dweight != nullptr) {
      MatMap<T> dwmat(dweight->data(), g.c_out, rows);
      dwmat.noalias() += dymat * ConstMatMap<T>(x.data(), rows, cols).transpose();
    }
    if (need_dx) MatMap<T>(dx.data(), rows, cols).noalias() = wmat.transpose() * dymat;
    return dx;
  }

  if (use_shift_path(g)) {
    const ShiftPlan p(g);
    auto& buf = shift_scratch<T>();
    buf.a.resize(static_cast<std::size_t>(p.c_in) * p.padded);
    buf.b.assign(static_cast<std::size_t>(p.c_out) * p.span, T{0});
    for (int o = 0; o < g.c_out; ++o)
      for (int i = 0; i < g.h; ++i)
        std::memcpy(buf.b.data() + static_cast<std::size_t>(o) * p.span + static_cast<std::size_t>(i) * p.wp,
                    dy.data() + (static_cast<std::size_t>(o) * g.h + i) * g.w, sizeof(T) * g.w);
    ConstMatMap<T> dacc(buf.b.data(), p.c_out, p.span);
    MatMap<T> xp(buf.a.data(), p.c_in, p.padded);
    if (dweight != nullptr) {
      pad_input(x.data(), p, buf.a.data());
      RowMat<T> dtap(p.c_out, p.c_in);
      for (int u = 0; u < p.k; ++u) {
        for (int v = 0; v < p.k; ++v) {
          dtap.noalias() = dacc * xp.middleCols(p.offset(u, v), p.span).transpose();
          for (int o = 0; o < p.c_out; ++o)
            for (int i = 0; i < p.c_in; ++i)
              (*dweight)[((static_cast<std::size_t>(o) * p.c_in + i) * p.k + u) * p.k + v] += dtap(o, i);
        }
      }
    }
    if (need_dx) {
      const auto taps = tap_weights(weight.data(), p);
      xp.setZero();
      for (int u = 0; u < p.k; ++u)
        for (int v = 0; v < p.k; ++v)
          xp.middleCols(p.offset(u, v), p.span).noalias() +=
              taps[static_cast<std::size_t>(u * p.k + v)].transpose() * dacc;
      for (int c = 0; c < g.c_in; ++c)
        for (int i = 0; i < g.h; ++i)
          std::memcpy(dx.data() + (static_cast<std::size_t>(c) * g.h + i) * g.w,
                      buf.a.data() + static_cast<std::size_t>(c) * p.padded +
                          static_cast<std::size_t>(i + p.pad) * p.wp + p.pad,
                      sizeof(T) * g.w);
    }
    return dx;
  }

  const int block = rows_per_block<T>(g);
  auto& col = scratch_buffer<T>();
  col.resize(g.rows() * static_cast<std::size_t>(block) * g.w_out);
  for (int ho0 = 0; ho0 < g.h_out; ho0 += block) {
    const int ho1 = std::min(g.h_out, ho0 + block);
    const auto span = static_cast<Eigen::Index>(ho1 - ho0) * g.w_out;
    const auto dy_block = dymat.middleCols(static_cast<Eigen::Index>(ho0) * g.w_out, span);
    MatMap<T> cmat(col.data(), rows, span);
    if (dweight != nullptr) {
      im2col(x.data(), g, ho0, ho1, col.data());
      MatMap<T>(dweight->data(), g.c_out, rows).noalias() += dy_block * cmat.transpose();
    }
    if (need_dx) {
      cmat.noalias() = wmat.transpose() * dy_block;
      col2im(col.data(), g, ho0, ho1, dx.data());
    }
  }
  return dx;
}

template <typename T>
void leaky_relu_inplace(Tensor<T>& x, T slope) {
  for (T& v : x.values()) v = v > T{0} ? v : v * slope;
}

template <typename T>
void leaky_relu_backward_inplace(const Tensor<T>& y, Tensor<T>& dy, T slope) {
  auto yv = y.values();
  auto dv = dy.values();
  for (std::size_t i = 0; i < dv.size(); ++i) {
    if (!(yv[i] > T{0})) dv[i] *= slope;
  }
}

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, T eps, std::vector<T>& inv_std) {
  const int c = x.dim(0);
  const std::size_t plane = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  Tensor<T> y(x.shape());
  inv_std.assign(static_cast<std::size_t>(c), T{0});
  for (int ch = 0; ch < c; ++ch) {
    const T* src = x.data() + ch * plane;
    T* dst = y.data() + ch * plane;
    double mean = 0.0;
    for (std::size_t i = 0; i < plane; ++i) mean += src[i];
    mean /= static_cast<double>(plane);
    double var = 0.0;
    for (std::size_t i = 0; i < plane; ++i) {
      const double d = src[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(plane);
    const T istd = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    inv_std[static_cast<std::size_t>(ch)] = istd;
    const T m = static_cast<T>(mean);
    for (std::size_t i = 0; i < plane; ++i) dst[i] = (src[i] - m) * istd;
  }
  return y;
}

template <typename T>
Tensor<T> instance_norm_backward(const Tensor<T>& y, const std::vector<T>& inv_std,
                                 const Tensor<T>& dy) {
  const int c = y.dim(0);
  const std::size_t plane = static_cast<std::size_t>(y.dim(1)) * y.dim(2);
  Tensor<T> dx(y.shape());
  for (int ch = 0; ch < c; ++ch) {
    const T* yc = y.data() + ch * plane;
    const T* gc = dy.data() + ch * plane;
    T* dc = dx.data() + ch * plane;
    double mean_g = 0.0;
    double mean_gy = 0.0;
    for (std::size_t i = 0; i < plane; ++i) {
      mean_g += gc[i];
      mean_gy += static_cast<double>(gc[i]) * yc[i];
    }
    mean_g /= static_cast<double>(plane);
    mean_gy /= static_cast<double>(plane);
    const T istd = inv_std[static_cast<std::size_t>(ch)];
    const T mg = static_cast<T>(mean_g);
    const T mgy = static_cast<T>(mean_gy);
    for (std::size_t i = 0; i < plane; ++i) dc[i] = istd * (gc[i] - mg - yc[i] * mgy);
  }
  return dx;
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor<T> y({c, 2 * h, 2 * w});
  for (int ch = 0; ch < c; ++ch) {
    for (int i = 0; i < 2 * h; ++i) {
      for (int j = 0; j < 2 * w; ++j) y.at(ch, i, j) = x.at(ch, i / 2, j / 2);
    }
  }
  return y;
}

template <typename T>
Tensor<T> upsample_nearest2x_backward(const Tensor<T>& dy) {
  const int c = dy.dim(0), h = dy.dim(1) / 2, w = dy.dim(2) / 2;
  Tensor<T> dx({c, h, w});
  for (int ch = 0; ch < c; ++ch) {
    for (int i = 0; i < 2 * h; ++i) {
      for (int j = 0; j < 2 * w; ++j) dx.at(ch, i / 2, j / 2) += dy.at(ch, i, j);
    }
  }
  return dx;
}

template <typename T>
Tensor<T> concat_channels(std::initializer_list<const Tensor<T>*> parts) {
  int channels = 0;
  const Tensor<T>* first = *parts.begin();
  for (const auto* p : parts) {
    if (p->dim(1) != first->dim(1) || p->dim(2) != first->dim(2)) {
      throw ShapeMismatch("concat spatial size mismatch");
    }
    channels += p->dim(0);
  }
  Tensor<T> out({channels, first->dim(1), first->dim(2)});
  T* dst = out.data();
  for (const auto* p : parts) dst = std::copy(p->data(), p->data() + p->size(), dst);
  return out;
}

template <typename T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& x, const std::vector<int>& sizes) {
  const std::size_t plane = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  std::vector<Tensor<T>> out;
  const T* src = x.data();
  for (int c : sizes) {
    Tensor<T> part({c, x.dim(1), x.dim(2)});
    std::copy(src, src + part.size(), part.data());
    src += static_cast<std::size_t>(c) * plane;
    out.push_back(std::move(part));
  }
  return out;
}

template <typename T>
void add_inplace(Tensor<T>& acc, const Tensor<T>& x) {
  if (acc.shape() != x.shape()) {
    throw ShapeMismatch("add shape mismatch " + shape_string(acc.shape()) + " vs " + shape_string(x.shape()));
  }
  auto a = acc.values();
  auto b = x.values();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

#define SFR_INSTANTIATE(T)                                                                        \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int);           \
  template Tensor<T> conv2d_backward(const Tensor<T>&, const Tensor<T>&, int, const Tensor<T>&,   \
                                     Tensor<T>*, Tensor<T>*, bool);                               \
  template void leaky_relu_inplace(Tensor<T>&, T);                                                \
  template void leaky_relu_backward_inplace(const Tensor<T>&, Tensor<T>&, T);                     \
  template Tensor<T> instance_norm(const Tensor<T>&, T, std::vector<T>&);                         \
  template Tensor<T> instance_norm_backward(const Tensor<T>&, const std::vector<T>&,              \
                                            const Tensor<T>&);                                    \
  template Tensor<T> upsample_nearest2x(const Tensor<T>&);                                        \
  template Tensor<T> upsample_nearest2x_backward(const Tensor<T>&);                               \
  template Tensor<T> concat_channels(std::initializer_list<const Tensor<T>*>);                    \
  template std::vector<Tensor<T>> split_channels(const Tensor<T>&, const std::vector<int>&);      \
  template void add_inplace(Tensor<T>&, const Tensor<T>&);

SFR_INSTANTIATE(float)
SFR_INSTANTIATE(double)

#undef SFR_INSTANTIATE

}  // namespace sfr::nn
