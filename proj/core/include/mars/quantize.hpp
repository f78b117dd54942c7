#pragma once
#include <utility>
#include <vector>

#include "mars/network.hpp"
#include "mars/tensor.hpp"

namespace mars {

struct DegenerateGroupError : MappingError {
  using MappingError::MappingError;
};

struct QuantConfig {
  int b_w = 8;       // weight bits, 4 or 8
  int b_a = 8;       // activation bits, 4 or 8
  int g = 1;         // group count for the standalone grouped-normalization API
  double eps = 1e-5;
  void validate() const;
};

// tanh normalization of one weight group: w -> tanh(w) / max|tanh(w)|.
// Output lies in [-1,1] with at least one element at magnitude 1.
// An all-zero group has no defined result and throws DegenerateGroupError;
// pipeline callers substitute the zero array instead.
std::vector<double> normalize_weights(const std::vector<double>& group);

// Splits values into g equal contiguous groups and normalizes each.
std::vector<double> normalize_groups(const std::vector<double>& values, int g);

// Per-layer normalization: kernels along out_ch are grouped in slabs of
// (up to) 16, matching the 16-kernel group-set width of the macros. All-zero
// slabs normalize to zeros.
Tensor normalize_layer(const Tensor& weights, int kernels_per_slab = 16);

// Folds batchnorm scale into one kernel's normalized weights:
//   fused = clamp(gamma * w_hat / sqrt(sigma2 + eps), -1, 1)
// and returns the per-channel bias offset beta - gamma*mu/sqrt(sigma2+eps).
std::pair<std::vector<double>, double> fuse_bn(const std::vector<double>& w_hat,
                                               const BnParams& bn, int channel);

// Symmetric weight codes: round-half-away-from-zero of v*(2^(b_w-1)-1).
// Codes live in [-(2^(b_w-1)-1), 2^(b_w-1)-1]; dequantized value is
// code / 2^(b_w-1).
int32_t quantize_weight_value(double v, int b_w);
std::vector<int32_t> quantize_weights(const std::vector<double>& w_bar, int b_w);
double dequantize_weight(int32_t code, int b_w);

// Unsigned activation codes: clip to [0,1], code = round(a*(2^b_a-1)),
// dequantized value code/(2^b_a-1).
int32_t quantize_activation_value(double a, int b_a);
CodeTensor quantize_activations(const Tensor& a, int b_a);
double dequantize_activation(int32_t code, int b_a);

// Straight-through estimate: the gradient passes the rounding unchanged and
// is zeroed wherever the fusion clamp saturated (|pre_clamp| > 1).
std::vector<double> ste_grad(const std::vector<double>& upstream,
                             const std::vector<double>& pre_clamp);

struct QuantizedLayer {
  LayerType type = LayerType::conv;
  ConvSpec conv;
  bool relu = true;
  PoolSpec pool;
  std::vector<int32_t> codes;       // [out,in,kh,kw]
  std::vector<int32_t> bias_codes;  // [out], accumulator units
  double scale = 0.0;               // code -> effective real weight
  std::string name;

  int64_t code_count() const {
    return static_cast<int64_t>(conv.out_ch) * conv.in_ch * conv.kernel_h * conv.kernel_w;
  }
  CodeTensor code_tensor() const;
};

struct QuantizedModel {
  int in_ch = 0, in_h = 0, in_w = 0;
  int b_w = 8, b_a = 8;
  std::vector<QuantizedLayer> layers;
  void validate() const;
};

// Full export pipeline: per layer tanh-normalize (16-kernel slabs), fuse BN
// per channel, clamp, quantize to codes; the conv bias folds into the BN
// offset; the offset becomes an integer bias in accumulator units. strict
// turns all-zero slabs into an error instead of substituting zeros.
QuantizedModel quantize_model(const NetworkModel& model, const QuantConfig& cfg,
                              bool strict = false);

// Accumulator-to-real factor for the activation-quantize stage.
double output_scale(const QuantizedLayer& layer, int b_a);

// Golden integer forward pass, no CIM machinery: per layer
//   codes_out = quantize_activations(pool(relu(out_scale * (conv_int + bias))))
CodeTensor reference_layer(const QuantizedLayer& layer, const CodeTensor& in_codes, int b_a);
CodeTensor reference_forward(const QuantizedModel& model, const Tensor& input);
CodeTensor reference_forward_codes(const QuantizedModel& model, const CodeTensor& in_codes);

}  // namespace mars
