#pragma once

#include <functional>
#include <vector>

#include "slimconv/graph.hpp"
#include "slimconv/model_zoo.hpp"

namespace slimconv {

// Called with every node's value right after it is computed.
template <typename T>
using Capture = std::function<void(const LayerNode&, const Var<T>&)>;

template <typename T>
Var<T> run_graph(ParamBinding<T>& p, const ModelGraph& g, const Var<T>& input, Mode mode,
                 const Capture<T>& capture = nullptr) {
  if (!g.executable) throw UsageError("graph '" + g.name + "' is config-only and cannot be executed");
  const Shape& want = g.input_shape();
  const Shape& got = input.shape();
  if (got.c != want.c || got.h != want.h || got.w != want.w) {
    throw ContractViolation("forward: batch " + got.str() + " does not match model input " +
                            Shape{got.n, want.c, want.h, want.w}.str());
  }
  const auto& nodes = g.nodes();
  // Values are dropped after their last consumer so inference keeps only the
  // live frontier.
  std::vector<std::size_t> last_use(nodes.size(), 0);
  for (const auto& n : nodes)
    for (std::size_t in : n.inputs) last_use[in] = n.id;

  Tape<T>& t = p.tape();
  std::vector<Var<T>> v(nodes.size());
  for (const auto& n : nodes) {
    auto in = [&](std::size_t i) -> const Var<T>& { return v[n.inputs[i]]; };
    switch (n.kind) {
      case LayerKind::Input:
        v[n.id] = input;
        break;
      case LayerKind::Conv: {
        const kernels::ConvGeometry geo{n.stride, n.padding, n.groups};
        if (n.bias) {
          const Var<T>& b = p(n.name + ".bias");
          v[n.id] = ops::conv2d(t, in(0), p(n.name + ".weight"), &b, geo);
        } else {
          v[n.id] = ops::conv2d(t, in(0), p(n.name + ".weight"), nullptr, geo);
        }
        break;
      }
      case LayerKind::BatchNorm:
        v[n.id] = apply_batch_norm(p, in(0), n.name + ".", mode);
        break;
      case LayerKind::ReLU:
        v[n.id] = ops::relu(t, in(0));
        break;
      case LayerKind::Sigmoid:
        v[n.id] = ops::sigmoid(t, in(0));
        break;
      case LayerKind::MaxPool:
        v[n.id] = ops::max_pool2d(t, in(0), {n.kernel, n.stride, n.padding});
        break;
      case LayerKind::GlobalAvgPool:
        v[n.id] = ops::global_avg_pool(t, in(0));
        break;
      case LayerKind::Linear: {
        const Var<T>& b = p(n.name + ".bias");
        v[n.id] = ops::linear(t, in(0), p(n.name + ".weight"), &b);
        break;
      }
      case LayerKind::Add:
        v[n.id] = ops::add(t, in(0), in(1));
        break;
      case LayerKind::MulChannelwise:
        v[n.id] = ops::mul_channelwise(t, in(0), in(1));
        break;
      case LayerKind::ConcatChannels:
        v[n.id] = ops::concat_channels(t, in(0), in(1));
        break;
      case LayerKind::FlipChannels:
        v[n.id] = ops::flip_channels(t, in(0));
        break;
      case LayerKind::SplitSum:
        v[n.id] = ops::split_sum(t, in(0), n.parts);
        break;
      case LayerKind::Output:
        v[n.id] = in(0);
        break;
      default:
        throw UnsupportedLayer("forward: node '" + n.name + "' has an unsupported kind");
    }
    if (capture) capture(n, v[n.id]);
    for (std::size_t i : n.inputs)
      if (last_use[i] == n.id) v[i] = Var<T>();
  }
  return v.back();
}

// Inference helper; training binds parameters itself to read gradients.
template <typename T>
Var<T> forward(Tape<T>& tape, Model<T>& m, const Tensor<T>& batch, Mode mode, const Capture<T>& capture = nullptr) {
  ParamBinding<T> p(tape, m.params, false);
  return run_graph(p, m.graph, tape.constant(batch), mode, capture);
}

}  // namespace slimconv
