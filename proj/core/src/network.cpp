#include "mars/network.hpp"

#include <string>

namespace mars {

Tensor flatten_chw(const Tensor& x) {
  Tensor out = x;
  out.dims = {static_cast<int>(x.size()), 1, 1};
  return out;
}

CodeTensor flatten_chw(const CodeTensor& x) {
  CodeTensor out = x;
  out.dims = {static_cast<int>(x.size()), 1, 1};
  return out;
}

void NetworkModel::validate() const {
  if (in_ch < 1 || in_h < 1 || in_w < 1) throw ShapeError("network input dims must be positive");
  int c = in_ch, h = in_h, w = in_w;
  for (size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const std::string where = " at layer " + std::to_string(i);
    try {
      l.conv.validate();
      l.weights.validate();
      if (l.weights.dims.size() != 4) throw ShapeError("weights must be rank 4");
      if (l.weights.dims[0] != l.conv.out_ch || l.weights.dims[1] != l.conv.in_ch ||
          l.weights.dims[2] != l.conv.kernel_h || l.weights.dims[3] != l.conv.kernel_w)
        throw ShapeError("weight dims do not match conv spec");
      if (!l.bias.empty() && l.bias.size() != static_cast<size_t>(l.conv.out_ch))
        throw ShapeError("bias length does not match out_ch");
      if (l.bn) l.bn->validate(l.conv.out_ch);
      if (l.type == LayerType::fc) {
        if (l.conv.kernel_h != 1 || l.conv.kernel_w != 1 || l.conv.pad != 0 || l.conv.stride != 1)
          throw ShapeError("fc layer must be a 1x1 stride-1 pad-0 conv over the flattened input");
        if (l.conv.in_ch != c * h * w) throw ShapeError("fc input size does not match activations");
        c = l.conv.out_ch;
        h = w = 1;
      } else {
        if (l.conv.in_ch != c) throw ShapeError("conv in_ch does not match activations");
        const int oh = l.conv.out_h(h), ow = l.conv.out_w(w);
        if (oh < 1 || ow < 1) throw ShapeError("conv output would be empty");
        c = l.conv.out_ch;
        h = oh;
        w = ow;
      }
      if (l.pool.window > 0) {
        if (l.pool.stride < 1) throw ShapeError("pool stride must be positive");
        if (h < l.pool.window || w < l.pool.window)
          throw ShapeError("pool window exceeds activation extent");
        h = (h - l.pool.window) / l.pool.stride + 1;
        w = (w - l.pool.window) / l.pool.stride + 1;
      }
    } catch (const ShapeError& e) {
      throw ShapeError(std::string(e.what()) + where);
    }
  }
}

Tensor forward_ref(const NetworkModel& model, const Tensor& input) {
  if (input.dims.size() != 3) throw ShapeError("network input must be rank 3 [C,H,W]");
  if (input.dims[0] != model.in_ch || input.dims[1] != model.in_h || input.dims[2] != model.in_w)
    throw ShapeError("input dims do not match network");
  model.validate();

  Tensor a = input;
  for (size_t i = 0; i < model.layers.size(); ++i) {
    const LayerSpec& l = model.layers[i];
    try {
      if (l.type == LayerType::fc) a = flatten_chw(a);
      a = conv2d_ref(a, l.weights, l.conv, l.bias);
      if (l.bn) a = batchnorm_ref(a, *l.bn);
      if (l.relu) a = relu_ref(a);
      if (l.pool.window > 0) a = maxpool_ref(a, l.pool.window, l.pool.stride);
    } catch (const ShapeError& e) {
      throw ShapeError(std::string(e.what()) + " at layer " + std::to_string(i));
    }
  }
  return a;
}

}  // namespace mars
