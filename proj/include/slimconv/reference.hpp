#pragma once

#include "slimconv/kernels.hpp"

namespace slimconv::reference {

// Direct nested-loop convolution, kept as the ground truth the patch-matrix
// kernel is tested against.
template <typename T>
Tensor<T> conv2d_direct(const Tensor<T>& input, const Tensor<T>& weight, const std::type_identity_t<Tensor<T>>* bias,
                        const kernels::ConvGeometry& geo) {
  const Shape& in = input.shape();
  const Shape& ws = weight.shape();
  const Shape os = kernels::conv_output_shape(in, ws, geo);
  const std::size_t cout_g = ws.n / geo.groups;
  const std::size_t cin_g = ws.c;
  Tensor<T> out(os);
  for (std::size_t n = 0; n < os.n; ++n) {
    for (std::size_t co = 0; co < os.c; ++co) {
      const std::size_t g = co / cout_g;
      for (std::size_t y = 0; y < os.h; ++y) {
        for (std::size_t x = 0; x < os.w; ++x) {
          double acc = bias != nullptr ? static_cast<double>((*bias)[co]) : 0.0;
          for (std::size_t ci = 0; ci < cin_g; ++ci) {
            for (std::size_t dy = 0; dy < ws.h; ++dy) {
              for (std::size_t dx = 0; dx < ws.w; ++dx) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * geo.stride + dy) -
                                          static_cast<std::ptrdiff_t>(geo.padding);
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x * geo.stride + dx) -
                                          static_cast<std::ptrdiff_t>(geo.padding);
                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(in.h) ||
                    ix >= static_cast<std::ptrdiff_t>(in.w)) {
                  continue;
                }
                acc += static_cast<double>(input.at(n, g * cin_g + ci, static_cast<std::size_t>(iy),
                                                    static_cast<std::size_t>(ix))) *
                       static_cast<double>(weight.at(co, ci, dy, dx));
              }
            }
          }
          out.at(n, co, y, x) = static_cast<T>(acc);
        }
      }
    }
  }
  return out;
}

}  // namespace slimconv::reference
