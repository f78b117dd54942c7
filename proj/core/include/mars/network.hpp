#pragma once
#include <optional>
#include <string>
#include <vector>

#include "mars/tensor.hpp"

namespace mars {

enum class LayerType { conv, fc };

struct PoolSpec {
  int window = 0;  // 0 = no pooling
  int stride = 0;
};

// One compute layer. fc layers are stored as convolutions whose kernel is
// 1x1 over the flattened input (in_ch = C*H*W of the previous activation).
struct LayerSpec {
  LayerType type = LayerType::conv;
  ConvSpec conv;
  Tensor weights;             // [out,in,kh,kw]
  std::vector<double> bias;   // [out], zeros if absent
  std::optional<BnParams> bn;
  bool relu = true;
  PoolSpec pool;
  std::string name;
};

struct NetworkModel {
  int in_ch = 0, in_h = 0, in_w = 0;
  std::vector<LayerSpec> layers;

  void validate() const;  // shape chaining, per-layer parameter checks
};

// Flattens [C,H,W] -> [C*H*W,1,1] in channel-major row-major order; the fc
// convention everywhere in this codebase.
Tensor flatten_chw(const Tensor& x);
CodeTensor flatten_chw(const CodeTensor& x);

// Golden float forward pass: per layer conv -> batchnorm -> ReLU -> pool.
// Empty layer list returns the input unchanged.
Tensor forward_ref(const NetworkModel& model, const Tensor& input);

}  // namespace mars
