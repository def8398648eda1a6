#pragma once

#include <type_traits>
#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "slimconv/kernels.hpp"
#include "slimconv/tape.hpp"

// Differentiable operations. Each one computes its forward value through
// `kernels` and registers the adjoint on the tape.
namespace slimconv::ops {

using kernels::ConvGeometry;
using kernels::PoolGeometry;

template <typename T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& x, const Var<T>& weight, const std::type_identity_t<Var<T>>* bias,
              const ConvGeometry& geo) {
  Tensor<T> out = kernels::conv2d_forward(x.value(), weight.value(), bias ? &bias->value() : nullptr, geo,
                                          tape.threads());
  auto xn = x.node();
  auto wn = weight.node();
  std::shared_ptr<Node<T>> bn = bias ? bias->node() : nullptr;
  const int threads = tape.threads();
  auto make = [=] {
    return [=](const Tensor<T>& gout) {
      auto g = kernels::conv2d_backward(xn->value, wn->value, gout, geo, bn && bn->requires_grad,
                                        xn->requires_grad, wn->requires_grad, threads);
      if (xn->requires_grad) xn->accumulate(g.input);
      if (wn->requires_grad) wn->accumulate(g.weight);
      if (bn && bn->requires_grad) bn->accumulate(g.bias);
    };
  };
  if (bias) return tape.record(std::move(out), {&x, &weight, bias}, make);
  return tape.record(std::move(out), {&x, &weight}, make);
}

// Fully connected layer on [N,Cin,1,1] activations; weight is [Cout,Cin,1,1].
template <typename T>
Var<T> linear(Tape<T>& tape, const Var<T>& x, const Var<T>& weight, const std::type_identity_t<Var<T>>* bias) {
  if (x.shape().h != 1 || x.shape().w != 1) {
    throw ContractViolation("linear: input must be [N,C,1,1], got " + x.shape().str());
  }
  return conv2d(tape, x, weight, bias, ConvGeometry{});
}

// Running statistics owned by the caller (a model's parameter store).
template <typename T>
struct RunningStats {
  Tensor<T>* mean = nullptr;
  Tensor<T>* var = nullptr;
};

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.1;
};

template <typename T>
Var<T> batch_norm(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  RunningStats<T> running, Mode mode, BatchNormOptions opt = {}) {
  const bool train = mode == Mode::Train;
  if (running.mean && running.mean->numel() != x.shape().c) {
    throw ContractViolation("batch_norm: running statistics length != C");
  }
  auto saved = std::make_shared<kernels::BatchNormSaved<T>>();
  Tensor<T> out = kernels::batch_norm_forward(x.value(), gamma.value(), beta.value(), running.mean, running.var,
                                              train, opt.eps, *saved);
  if (train && running.mean && running.var) {
    kernels::batch_norm_update_running(*saved, x.shape().n * x.shape().plane(), opt.momentum, *running.mean,
                                       *running.var);
  }
  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  return tape.record(std::move(out), {&x, &gamma, &beta}, [=] {
    return [=](const Tensor<T>& gout) {
      auto g = kernels::batch_norm_backward(gout, gn->value, *saved, train);
      xn->accumulate(g.input);
      gn->accumulate(g.gamma.reshaped(gn->value.shape()));
      bn->accumulate(g.beta.reshaped(bn->value.shape()));
    };
  });
}

template <typename T>
Var<T> relu(Tape<T>& tape, const Var<T>& x) {
  Tensor<T> out(x.shape());
  const Tensor<T>& v = x.value();
  for (std::size_t i = 0; i < v.numel(); ++i) out[i] = v[i] > T(0) ? v[i] : T(0);
  if (auto* log = tape.branch_log())
    for (std::size_t i = 0; i < v.numel(); ++i) log->push_back(v[i] > T(0));
  auto xn = x.node();
  return tape.record(std::move(out), {&x}, [=] {
    return [=](const Tensor<T>& gout) {
      Tensor<T> g(gout.shape());
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] = xn->value[i] > T(0) ? gout[i] : T(0);
      xn->accumulate(g);
    };
  });
}

template <typename T>
T sigmoid_scalar(T v) {
  // Split by sign so neither branch overflows exp().
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <typename T>
Var<T> sigmoid(Tape<T>& tape, const Var<T>& x) {
  Tensor<T> out(x.shape());
  const Tensor<T>& v = x.value();
  for (std::size_t i = 0; i < v.numel(); ++i) out[i] = sigmoid_scalar(v[i]);
  auto xn = x.node();
  auto y = std::make_shared<Tensor<T>>(out);
  return tape.record(std::move(out), {&x}, [=] {
    return [=](const Tensor<T>& gout) {
      Tensor<T> g(gout.shape());
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] = gout[i] * (*y)[i] * (T(1) - (*y)[i]);
      xn->accumulate(g);
    };
  });
}

template <typename T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  auto an = a.node();
  auto bn = b.node();
  return tape.record(std::move(out), {&a, &b}, [=] {
    return [=](const Tensor<T>& gout) {
      an->accumulate(gout);
      bn->accumulate(gout);
    };
  });
}

// Elementwise product of two same-shaped tensors.
template <typename T>
Var<T> mul(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  auto an = a.node();
  auto bn = b.node();
  return tape.record(std::move(out), {&a, &b}, [=] {
    return [=](const Tensor<T>& gout) {
      if (an->requires_grad) {
        Tensor<T> g(gout.shape());
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] = gout[i] * bn->value[i];
        an->accumulate(g);
      }
      if (bn->requires_grad) {
        Tensor<T> g(gout.shape());
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] = gout[i] * an->value[i];
        bn->accumulate(g);
      }
    };
  });
}

// x[N,C,H,W] scaled per (n, c) by w[N,C,1,1].
template <typename T>
Var<T> mul_channelwise(Tape<T>& tape, const Var<T>& x, const Var<T>& w) {
  const Shape& s = x.shape();
  if (w.shape() != Shape{s.n, s.c, 1, 1}) {
    throw ContractViolation("mul_channelwise: weights must be " + Shape{s.n, s.c, 1, 1}.str() + ", got " +
                            w.shape().str());
  }
  Tensor<T> out(s);
  const std::size_t plane = s.plane();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T k = w.value().at(n, c, 0, 0);
      const T* src = x.value().plane_ptr(n, c);
      T* dst = out.plane_ptr(n, c);
      for (std::size_t i = 0; i < plane; ++i) dst[i] = k * src[i];
    }
  }
  auto xn = x.node();
  auto wn = w.node();
  return tape.record(std::move(out), {&x, &w}, [=] {
    return [=](const Tensor<T>& gout) {
      const std::size_t pl = gout.shape().plane();
      if (xn->requires_grad) {
        Tensor<T> gx(gout.shape());
        for (std::size_t n = 0; n < s.n; ++n) {
          for (std::size_t c = 0; c < s.c; ++c) {
            const T k = wn->value.at(n, c, 0, 0);
            const T* g = gout.plane_ptr(n, c);
            T* d = gx.plane_ptr(n, c);
            for (std::size_t i = 0; i < pl; ++i) d[i] = k * g[i];
          }
        }
        xn->accumulate(gx);
      }
      if (wn->requires_grad) {
        Tensor<T> gw(wn->value.shape());
        for (std::size_t n = 0; n < s.n; ++n) {
          for (std::size_t c = 0; c < s.c; ++c) {
            const T* g = gout.plane_ptr(n, c);
            const T* v = xn->value.plane_ptr(n, c);
            T acc = T(0);
            for (std::size_t i = 0; i < pl; ++i) acc += g[i] * v[i];
            gw.at(n, c, 0, 0) = acc;
          }
        }
        wn->accumulate(gw);
      }
    };
  });
}

namespace detail {

template <typename T>
void copy_channels(const Tensor<T>& src, std::size_t src_c0, Tensor<T>& dst, std::size_t dst_c0,
                   std::size_t count) {
  const std::size_t plane = src.shape().plane();
  for (std::size_t n = 0; n < src.shape().n; ++n) {
    for (std::size_t c = 0; c < count; ++c) {
      const T* s = src.plane_ptr(n, src_c0 + c);
      std::copy(s, s + plane, dst.plane_ptr(n, dst_c0 + c));
    }
  }
}

}  // namespace detail

template <typename T>
Var<T> concat_channels(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw ContractViolation("concat_channels: N/H/W mismatch (" + sa.str() + " vs " + sb.str() + ")");
  }
  Tensor<T> out(Shape{sa.n, sa.c + sb.c, sa.h, sa.w});
  detail::copy_channels(a.value(), 0, out, 0, sa.c);
  detail::copy_channels(b.value(), 0, out, sa.c, sb.c);
  auto an = a.node();
  auto bn = b.node();
  return tape.record(std::move(out), {&a, &b}, [=] {
    return [=](const Tensor<T>& gout) {
      if (an->requires_grad) {
        Tensor<T> g(sa);
        detail::copy_channels(gout, 0, g, 0, sa.c);
        an->accumulate(g);
      }
      if (bn->requires_grad) {
        Tensor<T> g(sb);
        detail::copy_channels(gout, sa.c, g, 0, sb.c);
        bn->accumulate(g);
      }
    };
  });
}

// Channel slice [begin, begin + count).
template <typename T>
Var<T> slice_channels(Tape<T>& tape, const Var<T>& x, std::size_t begin, std::size_t count) {
  const Shape& s = x.shape();
  if (begin + count > s.c || count == 0) {
    throw ContractViolation("slice_channels: range [" + std::to_string(begin) + "," +
                            std::to_string(begin + count) + ") outside C=" + std::to_string(s.c));
  }
  Tensor<T> out(Shape{s.n, count, s.h, s.w});
  detail::copy_channels(x.value(), begin, out, 0, count);
  auto xn = x.node();
  return tape.record(std::move(out), {&x}, [=] {
    return [=](const Tensor<T>& gout) {
      Tensor<T> g(s);
      detail::copy_channels(gout, 0, g, begin, count);
      xn->accumulate(g);
    };
  });
}

template <typename T>
std::pair<Var<T>, Var<T>> split_channels(Tape<T>& tape, const Var<T>& x, std::size_t at) {
  const std::size_t c = x.shape().c;
  if (at == 0 || at >= c) {
    throw ContractViolation("split_channels: split index " + std::to_string(at) + " must be in (0, " +
                            std::to_string(c) + ")");
  }
  return {slice_channels(tape, x, 0, at), slice_channels(tape, x, at, c - at)};
}

// Reverses the channel order: out[:, c] = x[:, C-1-c]. Its adjoint is itself.
template <typename T>
Tensor<T> flip_channels_value(const Tensor<T>& x) {
  const Shape& s = x.shape();
  Tensor<T> out(s);
  const std::size_t plane = s.plane();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* src = x.plane_ptr(n, s.c - 1 - c);
      std::copy(src, src + plane, out.plane_ptr(n, c));
    }
  }
  return out;
}

template <typename T>
Var<T> flip_channels(Tape<T>& tape, const Var<T>& x) {
  auto xn = x.node();
  return tape.record(flip_channels_value(x.value()), {&x}, [=] {
    return [=](const Tensor<T>& gout) { xn->accumulate(flip_channels_value(gout)); };
  });
}

// Width of the split-sum output when C channels are folded into `parts` pieces.
inline std::size_t split_sum_width(std::size_t channels, std::size_t parts) {
  if (parts < 2) throw ConfigError("split_sum: need at least 2 parts");
  if (channels < parts) {
    throw ContractViolation("split_sum: C=" + std::to_string(channels) + " smaller than parts " +
                            std::to_string(parts));
  }
  return channels / parts;
}

// Cuts the channels into `parts` consecutive chunks of width C/parts and sums
// them elementwise: out[j] = sum over c with c mod width == j of x[c]. Any
// remainder (C not divisible by parts) forms a zero-padded trailing chunk.
template <typename T>
Var<T> split_sum(Tape<T>& tape, const Var<T>& x, std::size_t parts = 2) {
  const Shape& s = x.shape();
  if (parts == 2 && s.c % 2 != 0) {
    throw ContractViolation("split_sum: C=" + std::to_string(s.c) + " must be even to split in halves");
  }
  const std::size_t width = split_sum_width(s.c, parts);
  Tensor<T> out(Shape{s.n, width, s.h, s.w});
  const std::size_t plane = s.plane();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* src = x.value().plane_ptr(n, c);
      T* dst = out.plane_ptr(n, c % width);
      for (std::size_t i = 0; i < plane; ++i) dst[i] += src[i];
    }
  }
  auto xn = x.node();
  return tape.record(std::move(out), {&x}, [=] {
    return [=](const Tensor<T>& gout) {
      Tensor<T> g(s);
      for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t c = 0; c < s.c; ++c) {
          const T* src = gout.plane_ptr(n, c % width);
          std::copy(src, src + plane, g.plane_ptr(n, c));
        }
      }
      xn->accumulate(g);
    };
  });
}

template <typename T>
Var<T> global_avg_pool(Tape<T>& tape, const Var<T>& x) {
  const Shape s = x.shape();
  auto xn = x.node();
  return tape.record(kernels::global_avg_pool_forward(x.value()), {&x}, [=] {
    return [=](const Tensor<T>& gout) {
      Tensor<T> g(s);
      const std::size_t plane = s.plane();
      const T inv = T(1) / static_cast<T>(plane);
      for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t c = 0; c < s.c; ++c) {
          const T v = gout.at(n, c, 0, 0) * inv;
          T* d = g.plane_ptr(n, c);
          std::fill(d, d + plane, v);
        }
      }
      xn->accumulate(g);
    };
  });
}

template <typename T>
Var<T> max_pool2d(Tape<T>& tape, const Var<T>& x, const PoolGeometry& geo) {
  auto argmax = std::make_shared<std::vector<std::size_t>>();
  Tensor<T> out = kernels::max_pool_forward(x.value(), geo, *argmax);
  if (auto* log = tape.branch_log()) log->insert(log->end(), argmax->begin(), argmax->end());
  const Shape s = x.shape();
  auto xn = x.node();
  return tape.record(std::move(out), {&x}, [=] {
    return [=](const Tensor<T>& gout) {
      Tensor<T> g(s);
      for (std::size_t i = 0; i < gout.numel(); ++i) g[(*argmax)[i]] += gout[i];
      xn->accumulate(g);
    };
  });
}

template <typename T>
Var<T> sum(Tape<T>& tape, const Var<T>& x) {
  double acc = 0.0;
  for (T v : x.value().values()) acc += v;
  const Shape s = x.shape();
  auto xn = x.node();
  return tape.record(Tensor<T>(Shape{1, 1, 1, 1}, static_cast<T>(acc)), {&x}, [=] {
    return [=](const Tensor<T>& gout) { xn->accumulate(Tensor<T>(s, gout[0])); };
  });
}

// Mean cross-entropy of logits [N,K,1,1] against integer labels, computed
// through a max-shifted log-softmax.
template <typename T>
Var<T> softmax_cross_entropy(Tape<T>& tape, const Var<T>& logits, const std::vector<int>& labels) {
  const Shape& s = logits.shape();
  if (s.h != 1 || s.w != 1) throw ContractViolation("softmax_cross_entropy: logits must be [N,K,1,1]");
  if (labels.size() != s.n) throw ContractViolation("softmax_cross_entropy: label count != N");
  auto probs = std::make_shared<Tensor<T>>(s);
  double loss = 0.0;
  for (std::size_t n = 0; n < s.n; ++n) {
    const int y = labels[n];
    if (y < 0 || static_cast<std::size_t>(y) >= s.c) {
      throw ContractViolation("softmax_cross_entropy: label " + std::to_string(y) + " out of range");
    }
    double mx = logits.value().at(n, 0, 0, 0);
    for (std::size_t k = 1; k < s.c; ++k) mx = std::max<double>(mx, logits.value().at(n, k, 0, 0));
    double z = 0.0;
    for (std::size_t k = 0; k < s.c; ++k) z += std::exp(logits.value().at(n, k, 0, 0) - mx);
    const double log_z = std::log(z) + mx;
    for (std::size_t k = 0; k < s.c; ++k) {
      probs->at(n, k, 0, 0) = static_cast<T>(std::exp(logits.value().at(n, k, 0, 0) - log_z));
    }
    loss += log_z - logits.value().at(n, static_cast<std::size_t>(y), 0, 0);
  }
  loss /= static_cast<double>(s.n);
  auto ln = logits.node();
  return tape.record(Tensor<T>(Shape{1, 1, 1, 1}, static_cast<T>(loss)), {&logits}, [=] {
    return [=](const Tensor<T>& gout) {
      Tensor<T> g(s);
      const T scale = gout[0] / static_cast<T>(s.n);
      for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t k = 0; k < s.c; ++k) {
          const T onehot = static_cast<std::size_t>(labels[n]) == k ? T(1) : T(0);
          g.at(n, k, 0, 0) = (probs->at(n, k, 0, 0) - onehot) * scale;
        }
      }
      ln->accumulate(g);
    };
  });
}

}  // namespace slimconv::ops
