#pragma once
#include <cstdint>
#include <optional>
#include <vector>

#include "mars/errors.hpp"

namespace mars {

// Fixed-point annotation: integer codes with a bit width and a real scale.
// Signed codes live in the symmetric range [-(2^(bits-1)-1), 2^(bits-1)-1];
// unsigned activation codes use [0, 2^bits - 1].
struct FixedPointFormat {
  int bits = 8;
  double scale = 1.0;
  bool is_signed = true;
};

// Dense row-major tensor of float64 values; the golden-model currency.
// A fixed-point tensor stores its (integer) codes as exact doubles and
// carries the format alongside.
struct Tensor {
  std::vector<int> dims;
  std::vector<double> data;
  std::optional<FixedPointFormat> fixed;

  Tensor() = default;
  explicit Tensor(std::vector<int> d, double fill = 0.0);

  int64_t size() const;
  bool same_shape(const Tensor& o) const { return dims == o.dims; }

  // [C,H,W] accessor for the common rank-3 case.
  double& at3(int c, int h, int w);
  double at3(int c, int h, int w) const;
  // [O,I,Kh,Kw] accessor for weight tensors.
  double& at4(int o, int i, int kh, int kw);
  double at4(int o, int i, int kh, int kw) const;

  void validate() const;  // dims/data agreement + fixed-point range
};

// Integer twin used by the quantized pipeline (activation/weight codes).
struct CodeTensor {
  std::vector<int> dims;
  std::vector<int32_t> data;

  CodeTensor() = default;
  explicit CodeTensor(std::vector<int> d, int32_t fill = 0);
  int64_t size() const;
  int32_t& at3(int c, int h, int w);
  int32_t at3(int c, int h, int w) const;
  int32_t& at4(int o, int i, int kh, int kw);
  int32_t at4(int o, int i, int kh, int kw) const;
  bool operator==(const CodeTensor& o) const { return dims == o.dims && data == o.data; }
};

struct ConvSpec {
  int kernel_h = 3, kernel_w = 3;
  int in_ch = 0, out_ch = 0;
  int stride = 1;
  int pad = 0;

  int out_h(int in_h) const { return (in_h + 2 * pad - kernel_h) / stride + 1; }
  int out_w(int in_w) const { return (in_w + 2 * pad - kernel_w) / stride + 1; }
  void validate() const;
};

struct BnParams {
  std::vector<double> gamma, beta, mu, sigma2;
  double eps = 1e-5;
  void validate(int channels) const;
};

int64_t numel(const std::vector<int>& dims);

// Cross-correlation with zero padding. ifm [C,H,W], weights [O,C,Kh,Kw],
// optional per-channel bias, output [O,H',W'].
Tensor conv2d_ref(const Tensor& ifm, const Tensor& weights, const ConvSpec& spec,
                  const std::vector<double>& bias = {});

// Same arithmetic on integer codes. Accumulates in 64 bits and refuses to
// leave the 32-bit accumulator range (never silently wraps).
CodeTensor conv2d_int(const CodeTensor& ifm, const CodeTensor& weights, const ConvSpec& spec,
                      const std::vector<int32_t>& bias = {});

Tensor batchnorm_ref(const Tensor& x, const BnParams& bn);
Tensor relu_ref(const Tensor& x);
Tensor maxpool_ref(const Tensor& x, int window, int stride);

}  // namespace mars
