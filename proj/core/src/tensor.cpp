#include "mars/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace mars {

int64_t numel(const std::vector<int>& dims) {
  int64_t n = 1;
  for (int d : dims) {
    if (d < 0) throw ShapeError("negative tensor extent");
    n *= d;
  }
  return n;
}

Tensor::Tensor(std::vector<int> d, double fill) : dims(std::move(d)) {
  data.assign(static_cast<size_t>(numel(dims)), fill);
}

int64_t Tensor::size() const { return static_cast<int64_t>(data.size()); }

double& Tensor::at3(int c, int h, int w) {
  return data[(static_cast<size_t>(c) * dims[1] + h) * dims[2] + w];
}
double Tensor::at3(int c, int h, int w) const {
  return data[(static_cast<size_t>(c) * dims[1] + h) * dims[2] + w];
}
double& Tensor::at4(int o, int i, int kh, int kw) {
  return data[((static_cast<size_t>(o) * dims[1] + i) * dims[2] + kh) * dims[3] + kw];
}
double Tensor::at4(int o, int i, int kh, int kw) const {
  return data[((static_cast<size_t>(o) * dims[1] + i) * dims[2] + kh) * dims[3] + kw];
}

void Tensor::validate() const {
  if (static_cast<int64_t>(data.size()) != numel(dims))
    throw ShapeError("tensor data length does not match dims");
  if (fixed) {
    if (fixed->bits < 2 || fixed->bits > 32) throw ShapeError("fixed-point bit width out of range");
    const double lo = fixed->is_signed ? -(std::pow(2.0, fixed->bits - 1) - 1) : 0.0;
    const double hi = fixed->is_signed ? std::pow(2.0, fixed->bits - 1) - 1
                                       : std::pow(2.0, fixed->bits) - 1;
    for (double v : data) {
      if (v != std::floor(v)) throw ShapeError("fixed-point tensor holds a non-integer value");
      if (v < lo || v > hi) throw ShapeError("fixed-point code outside symmetric range");
    }
  }
}

CodeTensor::CodeTensor(std::vector<int> d, int32_t fill) : dims(std::move(d)) {
  data.assign(static_cast<size_t>(numel(dims)), fill);
}
int64_t CodeTensor::size() const { return static_cast<int64_t>(data.size()); }
int32_t& CodeTensor::at3(int c, int h, int w) {
  return data[(static_cast<size_t>(c) * dims[1] + h) * dims[2] + w];
}
int32_t CodeTensor::at3(int c, int h, int w) const {
  return data[(static_cast<size_t>(c) * dims[1] + h) * dims[2] + w];
}
int32_t& CodeTensor::at4(int o, int i, int kh, int kw) {
  return data[((static_cast<size_t>(o) * dims[1] + i) * dims[2] + kh) * dims[3] + kw];
}
int32_t CodeTensor::at4(int o, int i, int kh, int kw) const {
  return data[((static_cast<size_t>(o) * dims[1] + i) * dims[2] + kh) * dims[3] + kw];
}

void ConvSpec::validate() const {
  if (kernel_h < 1 || kernel_w < 1) throw ShapeError("kernel extent must be positive");
  if (in_ch < 1 || out_ch < 1) throw ShapeError("channel counts must be positive");
  if (stride < 1) throw ShapeError("stride must be positive");
  if (pad < 0) throw ShapeError("pad must be non-negative");
}

void BnParams::validate(int channels) const {
  const size_t n = static_cast<size_t>(channels);
  if (gamma.size() != n || beta.size() != n || mu.size() != n || sigma2.size() != n)
    throw ShapeError("batchnorm parameter length does not match channel count");
  if (eps <= 0) throw ShapeError("batchnorm eps must be positive");
  for (double v : sigma2)
    if (v < 0) throw ShapeError("batchnorm variance must be non-negative");
}

static void check_conv_shapes(const std::vector<int>& ifm_dims, const std::vector<int>& w_dims,
                              const ConvSpec& spec, size_t bias_len) {
  spec.validate();
  if (ifm_dims.size() != 3) throw ShapeError("ifm must be rank 3 [C,H,W]");
  if (w_dims.size() != 4) throw ShapeError("weights must be rank 4 [O,I,Kh,Kw]");
  if (ifm_dims[0] != spec.in_ch) throw ShapeError("ifm channels do not match conv spec");
  if (w_dims[0] != spec.out_ch || w_dims[1] != spec.in_ch || w_dims[2] != spec.kernel_h ||
      w_dims[3] != spec.kernel_w)
    throw ShapeError("weight dims do not match conv spec");
  if (bias_len != 0 && bias_len != static_cast<size_t>(spec.out_ch))
    throw ShapeError("bias length does not match out_ch");
  if (spec.out_h(ifm_dims[1]) < 1 || spec.out_w(ifm_dims[2]) < 1)
    throw ShapeError("conv output would be empty");
}

Tensor conv2d_ref(const Tensor& ifm, const Tensor& weights, const ConvSpec& spec,
                  const std::vector<double>& bias) {
  check_conv_shapes(ifm.dims, weights.dims, spec, bias.size());
  const int H = ifm.dims[1], W = ifm.dims[2];
  const int OH = spec.out_h(H), OW = spec.out_w(W);
  Tensor out({spec.out_ch, OH, OW});
  for (int oc = 0; oc < spec.out_ch; ++oc) {
    for (int oy = 0; oy < OH; ++oy) {
      for (int ox = 0; ox < OW; ++ox) {
        double acc = bias.empty() ? 0.0 : bias[oc];
        for (int ic = 0; ic < spec.in_ch; ++ic) {
          for (int ky = 0; ky < spec.kernel_h; ++ky) {
            const int iy = oy * spec.stride + ky - spec.pad;
            if (iy < 0 || iy >= H) continue;  // zero padding
            for (int kx = 0; kx < spec.kernel_w; ++kx) {
              const int ix = ox * spec.stride + kx - spec.pad;
              if (ix < 0 || ix >= W) continue;
              acc += ifm.at3(ic, iy, ix) * weights.at4(oc, ic, ky, kx);
            }
          }
        }
        out.at3(oc, oy, ox) = acc;
      }
    }
  }
  return out;
}

CodeTensor conv2d_int(const CodeTensor& ifm, const CodeTensor& weights, const ConvSpec& spec,
                      const std::vector<int32_t>& bias) {
  check_conv_shapes(ifm.dims, weights.dims, spec, bias.size());
  const int H = ifm.dims[1], W = ifm.dims[2];
  const int OH = spec.out_h(H), OW = spec.out_w(W);
  CodeTensor out({spec.out_ch, OH, OW});
  for (int oc = 0; oc < spec.out_ch; ++oc) {
    for (int oy = 0; oy < OH; ++oy) {
      for (int ox = 0; ox < OW; ++ox) {
        int64_t acc = bias.empty() ? 0 : bias[oc];
        for (int ic = 0; ic < spec.in_ch; ++ic) {
          for (int ky = 0; ky < spec.kernel_h; ++ky) {
            const int iy = oy * spec.stride + ky - spec.pad;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < spec.kernel_w; ++kx) {
              const int ix = ox * spec.stride + kx - spec.pad;
              if (ix < 0 || ix >= W) continue;
              acc += static_cast<int64_t>(ifm.at3(ic, iy, ix)) * weights.at4(oc, ic, ky, kx);
            }
          }
        }
        if (acc > std::numeric_limits<int32_t>::max() || acc < std::numeric_limits<int32_t>::min())
          throw SimError("accumulator overflow beyond 32 bits at out channel " +
                         std::to_string(oc));
        out.at3(oc, oy, ox) = static_cast<int32_t>(acc);
      }
    }
  }
  return out;
}

Tensor batchnorm_ref(const Tensor& x, const BnParams& bn) {
  if (x.dims.size() != 3) throw ShapeError("batchnorm input must be rank 3 [C,H,W]");
  bn.validate(x.dims[0]);
  Tensor out(x.dims);
  const int C = x.dims[0], H = x.dims[1], W = x.dims[2];
  for (int c = 0; c < C; ++c) {
    const double inv = 1.0 / std::sqrt(bn.sigma2[c] + bn.eps);
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w)
        out.at3(c, h, w) = bn.gamma[c] * (x.at3(c, h, w) - bn.mu[c]) * inv + bn.beta[c];
  }
  return out;
}

Tensor relu_ref(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.data) v = std::max(0.0, v);
  return out;
}

Tensor maxpool_ref(const Tensor& x, int window, int stride) {
  if (x.dims.size() != 3) throw ShapeError("maxpool input must be rank 3 [C,H,W]");
  if (window < 1 || stride < 1) throw ShapeError("maxpool window/stride must be positive");
  const int C = x.dims[0], H = x.dims[1], W = x.dims[2];
  if (H < window || W < window) throw ShapeError("maxpool window exceeds spatial extent");
  const int OH = (H - window) / stride + 1, OW = (W - window) / stride + 1;
  Tensor out({C, OH, OW});
  for (int c = 0; c < C; ++c) {
    for (int oy = 0; oy < OH; ++oy) {
      for (int ox = 0; ox < OW; ++ox) {
        double m = -std::numeric_limits<double>::infinity();
        for (int ky = 0; ky < window; ++ky)
          for (int kx = 0; kx < window; ++kx)
            m = std::max(m, x.at3(c, oy * stride + ky, ox * stride + kx));
        out.at3(c, oy, ox) = m;
      }
    }
  }
  return out;
}

}  // namespace mars
