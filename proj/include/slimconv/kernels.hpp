#pragma once

#include <type_traits>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "slimconv/parallel.hpp"
#include "slimconv/tensor.hpp"

// Tape-free forward and backward kernels. Everything here is a pure function
// of its arguments; reductions always run in a fixed order so results are
// bit-identical for any thread count.
namespace slimconv::kernels {

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  if (in + 2 * padding < kernel) {
    throw ConfigError("conv2d: non-positive output size (input " + std::to_string(in) + ", kernel " +
                      std::to_string(kernel) + ", padding " + std::to_string(padding) + ")");
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

inline Shape conv_output_shape(const Shape& in, const Shape& weight, const ConvGeometry& g) {
  if (g.groups == 0) throw ConfigError("conv2d: groups must be positive");
  if (in.c % g.groups != 0) {
    throw ContractViolation("conv2d: input channels C=" + std::to_string(in.c) + " not divisible by groups " +
                            std::to_string(g.groups));
  }
  if (weight.n % g.groups != 0) {
    throw ContractViolation("conv2d: output channels Cout=" + std::to_string(weight.n) +
                            " not divisible by groups " + std::to_string(g.groups));
  }
  if (weight.c != in.c / g.groups) {
    throw ContractViolation("conv2d: weight dimension Cin/g=" + std::to_string(weight.c) + " but input has C=" +
                            std::to_string(in.c) + " with groups " + std::to_string(g.groups));
  }
  return {in.n, weight.n, conv_out_extent(in.h, weight.h, g.stride, g.padding),
          conv_out_extent(in.w, weight.w, g.stride, g.padding)};
}

namespace detail {

// c[m x n] += a[m x k] * b[k x n], all row-major with the given leading dims.
// Four rows of c are updated per pass so each row of b is loaded once.
template <typename T>
void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
              std::size_t ldb, T* c, std::size_t ldc) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    T* __restrict c0 = c + i * ldc;
    T* __restrict c1 = c0 + ldc;
    T* __restrict c2 = c1 + ldc;
    T* __restrict c3 = c2 + ldc;
    for (std::size_t p = 0; p < k; ++p) {
      const T a0 = a[i * lda + p], a1 = a[(i + 1) * lda + p], a2 = a[(i + 2) * lda + p], a3 = a[(i + 3) * lda + p];
      const T* __restrict bp = b + p * ldb;
      for (std::size_t j = 0; j < n; ++j) {
        const T bv = bp[j];
        c0[j] += a0 * bv;
        c1[j] += a1 * bv;
        c2[j] += a2 * bv;
        c3[j] += a3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    T* __restrict ci = c + i * ldc;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * lda + p];
      const T* __restrict bp = b + p * ldb;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m x n] += a^T * b where a is [k x m] and b is [k x n].
template <typename T>
void gemm_tn_acc(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
                 std::size_t ldb, T* c, std::size_t ldc) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    T* __restrict c0 = c + i * ldc;
    T* __restrict c1 = c0 + ldc;
    T* __restrict c2 = c1 + ldc;
    T* __restrict c3 = c2 + ldc;
    for (std::size_t p = 0; p < k; ++p) {
      const T* ap = a + p * lda + i;
      const T a0 = ap[0], a1 = ap[1], a2 = ap[2], a3 = ap[3];
      const T* __restrict bp = b + p * ldb;
      for (std::size_t j = 0; j < n; ++j) {
        const T bv = bp[j];
        c0[j] += a0 * bv;
        c1[j] += a1 * bv;
        c2[j] += a2 * bv;
        c3[j] += a3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    T* __restrict ci = c + i * ldc;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[p * lda + i];
      const T* __restrict bp = b + p * ldb;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

struct PatchGeometry {
  std::size_t channels, in_h, in_w, kh, kw, out_h, out_w, stride, padding;
  std::size_t rows() const { return channels * kh * kw; }
  std::size_t cols() const { return out_h * out_w; }
};

// col[(c*kh + dy)*kw + dx][oy*out_w + ox] = src[c][oy*s+dy-p][ox*s+dx-p] (0 outside).
template <typename T>
void im2col(const T* src, const PatchGeometry& g, T* col) {
  const std::size_t cols = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* plane = src + c * g.in_h * g.in_w;
    for (std::size_t dy = 0; dy < g.kh; ++dy) {
      for (std::size_t dx = 0; dx < g.kw; ++dx) {
        T* row = col + ((c * g.kh + dy) * g.kw + dx) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + dy) -
                                    static_cast<std::ptrdiff_t>(g.padding);
          T* out = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) {
            std::fill(out, out + g.out_w, T(0));
            continue;
          }
          const T* line = plane + static_cast<std::size_t>(iy) * g.in_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + dx) -
                                      static_cast<std::ptrdiff_t>(g.padding);
            out[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) ? T(0) : line[ix];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters col back into dst (accumulating).
template <typename T>
void col2im_acc(const T* col, const PatchGeometry& g, T* dst) {
  const std::size_t cols = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    T* plane = dst + c * g.in_h * g.in_w;
    for (std::size_t dy = 0; dy < g.kh; ++dy) {
      for (std::size_t dx = 0; dx < g.kw; ++dx) {
        const T* row = col + ((c * g.kh + dy) * g.kw + dx) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + dy) -
                                    static_cast<std::ptrdiff_t>(g.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          T* line = plane + static_cast<std::size_t>(iy) * g.in_w;
          const T* in = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + dx) -
                                      static_cast<std::ptrdiff_t>(g.padding);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.in_w)) line[ix] += in[ox];
          }
        }
      }
    }
  }
}

inline bool is_pointwise(const PatchGeometry& g) {
  return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.padding == 0;
}

}  // namespace detail

// Patch-matrix convolution: im2col per (sample, group) followed by a GEMM.
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weight, const std::type_identity_t<Tensor<T>>* bias,
                         const ConvGeometry& geo, int threads = 1) {
  const Shape& in = input.shape();
  const Shape& ws = weight.shape();
  const Shape os = conv_output_shape(in, ws, geo);
  if (bias != nullptr && bias->numel() != ws.n) {
    throw ContractViolation("conv2d: bias length " + std::to_string(bias->numel()) + " != Cout " +
                            std::to_string(ws.n));
  }
  Tensor<T> out(os);
  const std::size_t cout_g = ws.n / geo.groups;
  const detail::PatchGeometry pg{ws.c, in.h, in.w, ws.h, ws.w, os.h, os.w, geo.stride, geo.padding};
  const std::size_t krows = pg.rows();
  const std::size_t cols = pg.cols();
  const bool pointwise = detail::is_pointwise(pg);

  parallel_for(in.n, threads, [&](std::size_t n) {
    std::vector<T> col(pointwise ? 0 : krows * cols);
    for (std::size_t g = 0; g < geo.groups; ++g) {
      const T* src = input.plane_ptr(n, g * ws.c);
      const T* b = src;
      if (!pointwise) {
        detail::im2col(src, pg, col.data());
        b = col.data();
      }
      T* dst = out.plane_ptr(n, g * cout_g);
      if (bias != nullptr) {
        for (std::size_t co = 0; co < cout_g; ++co) {
          std::fill(dst + co * cols, dst + (co + 1) * cols, (*bias)[g * cout_g + co]);
        }
      }
      detail::gemm_acc(cout_g, cols, krows, weight.data() + g * cout_g * krows, krows, b, cols, dst, cols);
    }
  });
  return out;
}

template <typename T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& grad_out,
                             const ConvGeometry& geo, bool with_bias, bool need_input, bool need_weight,
                             int threads = 1) {
  const Shape& in = input.shape();
  const Shape& ws = weight.shape();
  const Shape os = conv_output_shape(in, ws, geo);
  require_same_shape(grad_out.shape(), os, "conv2d backward");
  const std::size_t cout_g = ws.n / geo.groups;
  const detail::PatchGeometry pg{ws.c, in.h, in.w, ws.h, ws.w, os.h, os.w, geo.stride, geo.padding};
  const std::size_t krows = pg.rows();
  const std::size_t cols = pg.cols();
  const bool pointwise = detail::is_pointwise(pg);

  ConvGrads<T> grads;
  if (need_input) grads.input = Tensor<T>(in);

  // Per-sample weight contributions, summed afterwards in sample order.
  std::vector<std::vector<T>> partial_w(need_weight ? in.n : 0);

  parallel_for(in.n, threads, [&](std::size_t n) {
    std::vector<T> col(krows * cols);
    std::vector<T> col_t;
    if (need_weight) {
      partial_w[n].assign(ws.numel(), T(0));
      col_t.resize(krows * cols);
    }
    for (std::size_t g = 0; g < geo.groups; ++g) {
      const T* gout = grad_out.plane_ptr(n, g * cout_g);
      const T* wg = weight.data() + g * cout_g * krows;
      if (need_weight) {
        const T* src = input.plane_ptr(n, g * ws.c);
        const T* colp = src;
        if (!pointwise) {
          detail::im2col(src, pg, col.data());
          colp = col.data();
        }
        for (std::size_t r = 0; r < krows; ++r) {
          for (std::size_t p = 0; p < cols; ++p) col_t[p * krows + r] = colp[r * cols + p];
        }
        // dW[co][r] += sum_p gout[co][p] * col[r][p]
        detail::gemm_acc(cout_g, krows, cols, gout, cols, col_t.data(), krows,
                         partial_w[n].data() + g * cout_g * krows, krows);
      }
      if (need_input) {
        T* dst = grads.input.plane_ptr(n, g * ws.c);
        if (pointwise) {
          detail::gemm_tn_acc(krows, cols, cout_g, wg, krows, gout, cols, dst, cols);
        } else {
          std::fill(col.begin(), col.end(), T(0));
          detail::gemm_tn_acc(krows, cols, cout_g, wg, krows, gout, cols, col.data(), cols);
          detail::col2im_acc(col.data(), pg, dst);
        }
      }
    }
  });

  if (need_weight) {
    grads.weight = Tensor<T>(ws);
    for (std::size_t n = 0; n < in.n; ++n) {
      for (std::size_t i = 0; i < ws.numel(); ++i) grads.weight[i] += partial_w[n][i];
    }
  }
  if (with_bias) {
    grads.bias = Tensor<T>(Shape{1, ws.n, 1, 1});
    for (std::size_t co = 0; co < ws.n; ++co) {
      T acc = T(0);
      for (std::size_t n = 0; n < in.n; ++n) {
        const T* p = grad_out.plane_ptr(n, co);
        for (std::size_t i = 0; i < cols; ++i) acc += p[i];
      }
      grads.bias[co] = acc;
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Batch normalization over (N, H, W) per channel.

template <typename T>
struct BatchNormSaved {
  std::vector<T> mean;     // per channel statistics used for normalization
  std::vector<T> inv_std;
  std::vector<T> batch_var;  // biased batch variance (train mode only)
  Tensor<T> xhat;
};

template <typename T>
Tensor<T> batch_norm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                             const Tensor<T>* running_mean, const Tensor<T>* running_var, bool train, double eps,
                             BatchNormSaved<T>& saved) {
  const Shape& s = x.shape();
  if (gamma.numel() != s.c || beta.numel() != s.c) {
    throw ContractViolation("batch_norm: gamma/beta length must equal C=" + std::to_string(s.c));
  }
  if (!(eps > 0.0)) throw ConfigError("batch_norm: eps must be positive");
  const std::size_t plane = s.plane();
  const std::size_t count = s.n * plane;
  if (count == 0) throw ContractViolation("batch_norm: empty input");
  saved.mean.assign(s.c, T(0));
  saved.inv_std.assign(s.c, T(0));
  saved.batch_var.assign(s.c, T(0));
  saved.xhat = Tensor<T>(s);
  Tensor<T> y(s);
  for (std::size_t c = 0; c < s.c; ++c) {
    double mean = 0.0;
    double var = 0.0;
    if (train) {
      for (std::size_t n = 0; n < s.n; ++n) {
        const T* p = x.plane_ptr(n, c);
        for (std::size_t i = 0; i < plane; ++i) mean += p[i];
      }
      mean /= static_cast<double>(count);
      for (std::size_t n = 0; n < s.n; ++n) {
        const T* p = x.plane_ptr(n, c);
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = p[i] - mean;
          var += d * d;
        }
      }
      var /= static_cast<double>(count);
    } else {
      if (running_mean == nullptr || running_var == nullptr) {
        throw UsageError("batch_norm: eval mode requires running statistics");
      }
      mean = (*running_mean)[c];
      var = (*running_var)[c];
    }
    const double inv_std = 1.0 / std::sqrt(var + eps);
    saved.mean[c] = static_cast<T>(mean);
    saved.inv_std[c] = static_cast<T>(inv_std);
    saved.batch_var[c] = static_cast<T>(var);
    const T g = gamma[c];
    const T b = beta[c];
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* p = x.plane_ptr(n, c);
      T* xh = saved.xhat.plane_ptr(n, c);
      T* q = y.plane_ptr(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        xh[i] = static_cast<T>((p[i] - mean) * inv_std);
        q[i] = g * xh[i] + b;
      }
    }
  }
  return y;
}

// Momentum update of running statistics; running variance uses the unbiased
// batch estimate.
template <typename T>
void batch_norm_update_running(const BatchNormSaved<T>& saved, std::size_t count, double momentum,
                               Tensor<T>& running_mean, Tensor<T>& running_var) {
  const double unbias = count > 1 ? static_cast<double>(count) / static_cast<double>(count - 1) : 1.0;
  for (std::size_t c = 0; c < saved.mean.size(); ++c) {
    running_mean[c] = static_cast<T>((1.0 - momentum) * running_mean[c] + momentum * saved.mean[c]);
    running_var[c] =
        static_cast<T>((1.0 - momentum) * running_var[c] + momentum * unbias * saved.batch_var[c]);
  }
}

template <typename T>
struct BatchNormGrads {
  Tensor<T> input;
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <typename T>
BatchNormGrads<T> batch_norm_backward(const Tensor<T>& grad_out, const Tensor<T>& gamma,
                                      const BatchNormSaved<T>& saved, bool train) {
  const Shape& s = grad_out.shape();
  const std::size_t plane = s.plane();
  const double count = static_cast<double>(s.n * plane);
  BatchNormGrads<T> g{Tensor<T>(s), Tensor<T>(Shape{1, s.c, 1, 1}), Tensor<T>(Shape{1, s.c, 1, 1})};
  for (std::size_t c = 0; c < s.c; ++c) {
    double sum_dy = 0.0;
    double sum_dy_xhat = 0.0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* dy = grad_out.plane_ptr(n, c);
      const T* xh = saved.xhat.plane_ptr(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        sum_dy += dy[i];
        sum_dy_xhat += static_cast<double>(dy[i]) * xh[i];
      }
    }
    g.beta[c] = static_cast<T>(sum_dy);
    g.gamma[c] = static_cast<T>(sum_dy_xhat);
    const double scale = static_cast<double>(gamma[c]) * saved.inv_std[c];
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* dy = grad_out.plane_ptr(n, c);
      const T* xh = saved.xhat.plane_ptr(n, c);
      T* dx = g.input.plane_ptr(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        if (train) {
          dx[i] = static_cast<T>(scale * (dy[i] - sum_dy / count - xh[i] * sum_dy_xhat / count));
        } else {
          dx[i] = static_cast<T>(scale * dy[i]);
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Pooling.

template <typename T>
Tensor<T> global_avg_pool_forward(const Tensor<T>& x) {
  const Shape& s = x.shape();
  if (s.h == 0 || s.w == 0) throw ContractViolation("global_avg_pool: H and W must be >= 1");
  Tensor<T> out(Shape{s.n, s.c, 1, 1});
  const std::size_t plane = s.plane();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* p = x.plane_ptr(n, c);
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      out.at(n, c, 0, 0) = static_cast<T>(acc / static_cast<double>(plane));
    }
  }
  return out;
}

struct PoolGeometry {
  std::size_t kernel = 2;
  std::size_t stride = 2;
  std::size_t padding = 0;
};

// Returns pooled tensor; `argmax` receives the flat input offset of each max
// (first maximum in scan order on ties).
template <typename T>
Tensor<T> max_pool_forward(const Tensor<T>& x, const PoolGeometry& g, std::vector<std::size_t>& argmax) {
  const Shape& s = x.shape();
  if (g.padding >= g.kernel) throw ConfigError("max_pool: padding must be smaller than kernel");
  const std::size_t oh = conv_out_extent(s.h, g.kernel, g.stride, g.padding);
  const std::size_t ow = conv_out_extent(s.w, g.kernel, g.stride, g.padding);
  Tensor<T> out(Shape{s.n, s.c, oh, ow});
  argmax.assign(out.numel(), 0);
  std::size_t o = 0;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
          T best = -std::numeric_limits<T>::infinity();
          std::size_t best_i = 0;
          bool found = false;
          for (std::size_t dy = 0; dy < g.kernel; ++dy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + dy) -
                                      static_cast<std::ptrdiff_t>(g.padding);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(s.h)) continue;
            for (std::size_t dx = 0; dx < g.kernel; ++dx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + dx) -
                                        static_cast<std::ptrdiff_t>(g.padding);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(s.w)) continue;
              const std::size_t idx = x.offset(n, c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
              if (!found || x[idx] > best) {
                best = x[idx];
                best_i = idx;
                found = true;
              }
            }
          }
          out[o] = best;
          argmax[o] = best_i;
        }
      }
    }
  }
  return out;
}

}  // namespace slimconv::kernels
