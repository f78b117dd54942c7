#include "mars/quantize.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace mars {

void QuantConfig::validate() const {
  if (b_w != 4 && b_w != 8) throw FormatError("b_w must be 4 or 8");
  if (b_a != 4 && b_a != 8) throw FormatError("b_a must be 4 or 8");
  if (g < 1) throw FormatError("group count g must be >= 1");
  if (eps <= 0) throw FormatError("eps must be positive");
}

std::vector<double> normalize_weights(const std::vector<double>& group) {
  double m = 0.0;
  std::vector<double> t(group.size());
  for (size_t i = 0; i < group.size(); ++i) {
    t[i] = std::tanh(group[i]);
    m = std::max(m, std::fabs(t[i]));
  }
  if (m == 0.0) throw DegenerateGroupError("degenerate group: all weights zero");
  for (double& v : t) v /= m;
  return t;
}

std::vector<double> normalize_groups(const std::vector<double>& values, int g) {
  if (g < 1) throw ShapeError("group count must be >= 1");
  if (values.empty() || values.size() % static_cast<size_t>(g) != 0)
    throw ShapeError("values do not split into g equal groups");
  const size_t len = values.size() / g;
  std::vector<double> out(values.size());
  for (int k = 0; k < g; ++k) {
    std::vector<double> grp(values.begin() + k * len, values.begin() + (k + 1) * len);
    std::vector<double> n = normalize_weights(grp);
    std::copy(n.begin(), n.end(), out.begin() + k * len);
  }
  return out;
}

Tensor normalize_layer(const Tensor& weights, int kernels_per_slab) {
  if (weights.dims.size() != 4) throw ShapeError("weights must be rank 4 [O,I,Kh,Kw]");
  if (kernels_per_slab < 1) throw ShapeError("kernels_per_slab must be >= 1");
  const int out_ch = weights.dims[0];
  const int64_t ksize = weights.size() / out_ch;
  Tensor result = weights;
  for (int s0 = 0; s0 < out_ch; s0 += kernels_per_slab) {
    const int s1 = std::min(s0 + kernels_per_slab, out_ch);
    const size_t lo = static_cast<size_t>(s0) * ksize, hi = static_cast<size_t>(s1) * ksize;
    std::vector<double> slab(weights.data.begin() + lo, weights.data.begin() + hi);
    bool all_zero = true;
    for (double v : slab)
      if (v != 0.0) { all_zero = false; break; }
    if (all_zero) {
      std::fill(result.data.begin() + lo, result.data.begin() + hi, 0.0);
    } else {
      std::vector<double> n = normalize_weights(slab);
      std::copy(n.begin(), n.end(), result.data.begin() + lo);
    }
  }
  return result;
}

std::pair<std::vector<double>, double> fuse_bn(const std::vector<double>& w_hat,
                                               const BnParams& bn, int channel) {
  if (channel < 0 || static_cast<size_t>(channel) >= bn.gamma.size())
    throw ShapeError("bn channel out of range");
  const double inv = 1.0 / std::sqrt(bn.sigma2[channel] + bn.eps);
  const double f = bn.gamma[channel] * inv;
  std::vector<double> fused(w_hat.size());
  for (size_t i = 0; i < w_hat.size(); ++i) fused[i] = std::clamp(f * w_hat[i], -1.0, 1.0);
  return {fused, bn.beta[channel] - f * bn.mu[channel]};
}

int32_t quantize_weight_value(double v, int b_w) {
  if (b_w < 2 || b_w > 16) throw FormatError("weight bit width out of range");
  const double vmax = static_cast<double>((1 << (b_w - 1)) - 1);
  const double x = std::clamp(v, -1.0, 1.0) * vmax;
  return static_cast<int32_t>(std::llround(x));  // llround: half away from zero
}

std::vector<int32_t> quantize_weights(const std::vector<double>& w_bar, int b_w) {
  std::vector<int32_t> codes(w_bar.size());
  for (size_t i = 0; i < w_bar.size(); ++i) codes[i] = quantize_weight_value(w_bar[i], b_w);
  return codes;
}

double dequantize_weight(int32_t code, int b_w) {
  return static_cast<double>(code) / static_cast<double>(1 << (b_w - 1));
}

int32_t quantize_activation_value(double a, int b_a) {
  if (b_a < 2 || b_a > 16) throw FormatError("activation bit width out of range");
  const double amax = static_cast<double>((1 << b_a) - 1);
  return static_cast<int32_t>(std::llround(std::clamp(a, 0.0, 1.0) * amax));
}

CodeTensor quantize_activations(const Tensor& a, int b_a) {
  CodeTensor out(a.dims);
  for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = quantize_activation_value(a.data[i], b_a);
  return out;
}

double dequantize_activation(int32_t code, int b_a) {
  return static_cast<double>(code) / static_cast<double>((1 << b_a) - 1);
}

std::vector<double> ste_grad(const std::vector<double>& upstream,
                             const std::vector<double>& pre_clamp) {
  if (upstream.size() != pre_clamp.size()) throw ShapeError("ste_grad length mismatch");
  std::vector<double> g(upstream.size());
  for (size_t i = 0; i < upstream.size(); ++i)
    g[i] = std::fabs(pre_clamp[i]) <= 1.0 ? upstream[i] : 0.0;
  return g;
}

CodeTensor QuantizedLayer::code_tensor() const {
  CodeTensor t({conv.out_ch, conv.in_ch, conv.kernel_h, conv.kernel_w});
  if (static_cast<int64_t>(codes.size()) != t.size())
    throw ShapeError("quantized layer code count does not match shape");
  t.data = codes;
  return t;
}

void QuantizedModel::validate() const {
  if (b_w < 2 || b_w > 8 || b_a < 2 || b_a > 8) throw FormatError("bit widths out of range");
  if (in_ch < 1 || in_h < 1 || in_w < 1) throw FormatError("model input dims must be positive");
  const int32_t wmax = (1 << (b_w - 1)) - 1;
  int c = in_ch, h = in_h, w = in_w;
  for (size_t i = 0; i < layers.size(); ++i) {
    const QuantizedLayer& l = layers[i];
    const std::string where = " at layer " + std::to_string(i);
    if (static_cast<int64_t>(l.codes.size()) != l.code_count())
      throw FormatError("code count mismatch" + where);
    if (l.bias_codes.size() != static_cast<size_t>(l.conv.out_ch))
      throw FormatError("bias code count mismatch" + where);
    for (int32_t v : l.codes)
      if (v > wmax || v < -wmax) throw FormatError("weight code out of range" + where);
    if (l.type == LayerType::fc) {
      if (l.conv.in_ch != c * h * w) throw FormatError("fc input size mismatch" + where);
      c = l.conv.out_ch;
      h = w = 1;
    } else {
      if (l.conv.in_ch != c) throw FormatError("conv in_ch mismatch" + where);
      h = l.conv.out_h(h);
      w = l.conv.out_w(w);
      if (h < 1 || w < 1) throw FormatError("empty conv output" + where);
      c = l.conv.out_ch;
    }
    if (l.pool.window > 0) {
      if (h < l.pool.window || w < l.pool.window)
        throw FormatError("pool window exceeds activation extent" + where);
      h = (h - l.pool.window) / l.pool.stride + 1;
      w = (w - l.pool.window) / l.pool.stride + 1;
    }
  }
}

double output_scale(const QuantizedLayer& layer, int b_a) {
  return layer.scale / static_cast<double>((1 << b_a) - 1);
}

QuantizedModel quantize_model(const NetworkModel& model, const QuantConfig& cfg, bool strict) {
  cfg.validate();
  model.validate();
  QuantizedModel qm;
  qm.in_ch = model.in_ch;
  qm.in_h = model.in_h;
  qm.in_w = model.in_w;
  qm.b_w = cfg.b_w;
  qm.b_a = cfg.b_a;

  const double w_scale = 1.0 / static_cast<double>(1 << (cfg.b_w - 1));
  const double out_sc = w_scale / static_cast<double>((1 << cfg.b_a) - 1);

  for (size_t li = 0; li < model.layers.size(); ++li) {
    const LayerSpec& l = model.layers[li];
    if (strict) {
      const int64_t ksize = l.weights.size() / l.conv.out_ch;
      for (int s0 = 0; s0 < l.conv.out_ch; s0 += 16) {
        const int s1 = std::min(s0 + 16, l.conv.out_ch);
        bool all_zero = true;
        for (int64_t i = s0 * ksize; i < s1 * ksize && all_zero; ++i)
          if (l.weights.data[static_cast<size_t>(i)] != 0.0) all_zero = false;
        if (all_zero)
          throw DegenerateGroupError("degenerate group: all-zero kernel slab at layer " +
                                     std::to_string(li));
      }
    }
    Tensor w_hat = normalize_layer(l.weights, 16);

    QuantizedLayer q;
    q.type = l.type;
    q.conv = l.conv;
    q.relu = l.relu;
    q.pool = l.pool;
    q.scale = w_scale;
    q.name = l.name;
    q.codes.resize(static_cast<size_t>(q.code_count()));
    q.bias_codes.resize(static_cast<size_t>(l.conv.out_ch));

    const int64_t ksize = w_hat.size() / l.conv.out_ch;
    for (int oc = 0; oc < l.conv.out_ch; ++oc) {
      std::vector<double> kernel(w_hat.data.begin() + oc * ksize,
                                 w_hat.data.begin() + (oc + 1) * ksize);
      double offset;
      std::vector<double> w_bar;
      if (l.bn) {
        // A conv bias b shifts the pre-activation, so it folds into the BN
        // mean: use mu - b in place of mu.
        BnParams bn = *l.bn;
        if (!l.bias.empty()) bn.mu[oc] -= l.bias[oc];
        auto fused = fuse_bn(kernel, bn, oc);
        w_bar = std::move(fused.first);
        offset = fused.second;
      } else {
        w_bar.resize(kernel.size());
        for (size_t i = 0; i < kernel.size(); ++i) w_bar[i] = std::clamp(kernel[i], -1.0, 1.0);
        offset = l.bias.empty() ? 0.0 : l.bias[oc];
      }
      std::vector<int32_t> codes = quantize_weights(w_bar, cfg.b_w);
      std::copy(codes.begin(), codes.end(), q.codes.begin() + oc * ksize);
      const long long bc = std::llround(offset / out_sc);
      if (bc > std::numeric_limits<int32_t>::max() || bc < std::numeric_limits<int32_t>::min())
        throw SimError("bias code overflows 32 bits at layer " + std::to_string(li));
      q.bias_codes[static_cast<size_t>(oc)] = static_cast<int32_t>(bc);
    }
    qm.layers.push_back(std::move(q));
  }
  return qm;
}

CodeTensor reference_layer(const QuantizedLayer& layer, const CodeTensor& in_codes, int b_a) {
  CodeTensor in = in_codes;
  if (layer.type == LayerType::fc) in = flatten_chw(in);
  const CodeTensor acc = conv2d_int(in, layer.code_tensor(), layer.conv, layer.bias_codes);
  const double sc = output_scale(layer, b_a);

  Tensor real(acc.dims);
  for (size_t i = 0; i < acc.data.size(); ++i) {
    double v = sc * static_cast<double>(acc.data[i]);
    if (layer.relu) v = std::max(0.0, v);
    real.data[i] = v;
  }
  if (layer.pool.window > 0) real = maxpool_ref(real, layer.pool.window, layer.pool.stride);
  return quantize_activations(real, b_a);
}

CodeTensor reference_forward_codes(const QuantizedModel& model, const CodeTensor& in_codes) {
  model.validate();
  CodeTensor a = in_codes;
  for (size_t i = 0; i < model.layers.size(); ++i) {
    try {
      a = reference_layer(model.layers[i], a, model.b_a);
    } catch (const ShapeError& e) {
      throw ShapeError(std::string(e.what()) + " at layer " + std::to_string(i));
    }
  }
  return a;
}

CodeTensor reference_forward(const QuantizedModel& model, const Tensor& input) {
  if (input.dims.size() != 3 || input.dims[0] != model.in_ch || input.dims[1] != model.in_h ||
      input.dims[2] != model.in_w)
    throw ShapeError("input dims do not match quantized model");
  return reference_forward_codes(model, quantize_activations(input, model.b_a));
}

}  // namespace mars
