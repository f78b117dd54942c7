#include "mars/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <random>

#include "mars/errors.hpp"
#include "mars/quantize.hpp"

namespace mars {
namespace {

double clip01(double v) { return std::clamp(v, 0.0, 1.0); }

std::vector<double> softmax(const std::vector<double>& logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

// Gradients of a conv layer given the upstream dy; mirrors conv2d_ref.
void conv_backward(const Tensor& x, const Tensor& w, const ConvSpec& sp, const Tensor& dy,
                   Tensor* dx, Tensor& dw, std::vector<double>& dbias) {
  const int oh = dy.dims[1], ow = dy.dims[2];
  for (int oc = 0; oc < sp.out_ch; ++oc)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        const double g = dy.at3(oc, oy, ox);
        if (g == 0.0) continue;
        dbias[static_cast<size_t>(oc)] += g;
        for (int ic = 0; ic < sp.in_ch; ++ic)
          for (int ky = 0; ky < sp.kernel_h; ++ky)
            for (int kx = 0; kx < sp.kernel_w; ++kx) {
              const int iy = oy * sp.stride + ky - sp.pad;
              const int ix = ox * sp.stride + kx - sp.pad;
              if (iy < 0 || iy >= x.dims[1] || ix < 0 || ix >= x.dims[2]) continue;
              dw.at4(oc, ic, ky, kx) += g * x.at3(ic, iy, ix);
              if (dx) dx->at3(ic, iy, ix) += g * w.at4(oc, ic, ky, kx);
            }
      }
}

}  // namespace

Dataset make_synthetic_dataset(int per_class, int channels, int h, int w, uint64_t seed) {
  if (per_class < 1 || channels < 1 || h < 1 || w < 1)
    throw TrainError("dataset dimensions must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> coin(0, 1);
  std::normal_distribution<double> noise(0.0, 0.08);

  std::vector<Tensor> patterns;
  for (int cls = 0; cls < 2; ++cls) {
    Tensor p({channels, h, w});
    for (double& v : p.data) v = coin(rng) ? 0.8 : 0.2;
    patterns.push_back(std::move(p));
  }
  Dataset d;
  d.classes = 2;
  for (int i = 0; i < per_class; ++i)
    for (int cls = 0; cls < 2; ++cls) {
      Tensor img = patterns[static_cast<size_t>(cls)];
      for (double& v : img.data) v = clip01(v + noise(rng));
      d.images.push_back(std::move(img));
      d.labels.push_back(cls);
    }
  return d;
}

std::string trace_to_csv(const std::vector<EpochStats>& trace) {
  std::string out = "epoch,loss,penalty,accuracy\n";
  char buf[160];
  for (const EpochStats& s : trace) {
    std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g,%.10g\n", s.epoch, s.loss, s.penalty,
                  s.accuracy);
    out += buf;
  }
  return out;
}

Trainer::Trainer(NetworkModel model, TrainConfig cfg)
    : model_(std::move(model)), cfg_(std::move(cfg)) {
  model_.validate();
  if (model_.layers.size() < 2)
    throw TrainError("trainer expects conv layers followed by one fc head");
  head_ = static_cast<int>(model_.layers.size()) - 1;
  for (int li = 0; li < head_; ++li)
    if (model_.layers[static_cast<size_t>(li)].type != LayerType::conv)
      throw TrainError("trainer expects conv layers followed by one fc head");
  const LayerSpec& head = model_.layers[static_cast<size_t>(head_)];
  if (head.type != LayerType::fc || head.relu || head.pool.window != 0 || head.bn)
    throw TrainError("classifier head must be a plain fc layer (no relu, no pool)");
  QuantConfig qc;
  qc.b_w = cfg_.b_w;
  qc.b_a = cfg_.b_a;
  qc.validate();
  if (cfg_.batch_size < 1) throw TrainError("batch size must be >= 1");
  if (cfg_.epochs < 0) throw TrainError("epoch count must be >= 0");
  if (cfg_.lr < 0 || cfg_.lr_decay <= 0) throw TrainError("learning rate settings must be positive");
  if (cfg_.warmup_fraction < 0 || cfg_.warmup_fraction > 1)
    throw TrainError("warmup fraction must be in [0, 1]");
  if (cfg_.bn_momentum < 0 || cfg_.bn_momentum >= 1)
    throw TrainError("bn momentum must be in [0, 1)");

  for (size_t li = 0; li < model_.layers.size(); ++li) {
    LayerSpec& L = model_.layers[li];
    ParamBlock wb;
    wb.name = L.name + ".weights";
    wb.values = &L.weights.data;
    wb.weight_decay = true;
    wb.conv_layer = static_cast<int>(li) < head_ ? static_cast<int>(li) : -1;
    blocks_.push_back(std::move(wb));
    blocks_.push_back(ParamBlock{L.name + ".bias", &L.bias, {}, false, -1});
    if (L.bn) {
      blocks_.push_back(ParamBlock{L.name + ".gamma", &L.bn->gamma, {}, false, -1});
      blocks_.push_back(ParamBlock{L.name + ".beta", &L.bn->beta, {}, false, -1});
    }
  }
  if (cfg_.lambda_g > 0.0) {
    std::vector<int> conv_layers(static_cast<size_t>(head_));
    std::iota(conv_layers.begin(), conv_layers.end(), 0);
    lasso_structure_ = build_group_structure(model_, cfg_.alpha, cfg_.n, conv_layers);
    has_lasso_ = true;
  }
  prepared_.resize(static_cast<size_t>(head_));
  stat_sum_.resize(static_cast<size_t>(head_));
  stat_sumsq_.resize(static_cast<size_t>(head_));
  stat_count_.assign(static_cast<size_t>(head_), 0);
}

void Trainer::zero_grads() {
  for (ParamBlock& b : blocks_) b.grad.assign(b.values->size(), 0.0);
}

void Trainer::apply_frozen_mask() {
  if (has_mask_) apply_mask(model_, mask_structure_, mask_);
}

void Trainer::set_mask(const GroupMask& mask, const GroupStructure& structure) {
  mask_ = mask;
  mask_structure_ = structure;
  has_mask_ = true;
  apply_frozen_mask();
}

// Weight-side pipeline, fixed for a whole batch: tanh -> per-slab max
// normalize -> per-channel scale gamma/sqrt(sigma2+eps) (1 without BN) ->
// clamp -> optional rounding to codes times 2^-(b_w-1). Offsets follow
// beta - gamma*(mu - bias)/sqrt(sigma2+eps) (plain bias without BN) and are
// optionally rounded to integer multiples of the accumulator scale.
void Trainer::prepare_weights() {
  const int wmax = (1 << (cfg_.b_w - 1)) - 1;
  const double w_scale = 1.0 / static_cast<double>(1 << (cfg_.b_w - 1));
  const double out_sc = w_scale / static_cast<double>((1 << cfg_.b_a) - 1);
  kink_margin_ = std::numeric_limits<double>::infinity();

  for (int li = 0; li < head_; ++li) {
    const LayerSpec& L = model_.layers[static_cast<size_t>(li)];
    PreparedLayer& P = prepared_[static_cast<size_t>(li)];
    const int out_ch = L.conv.out_ch;
    const int64_t ksize = L.weights.size() / out_ch;
    const int n_slabs = (out_ch + 15) / 16;

    P.t = Tensor(L.weights.dims);
    for (size_t i = 0; i < L.weights.data.size(); ++i) P.t.data[i] = std::tanh(L.weights.data[i]);

    P.slab_max.assign(static_cast<size_t>(n_slabs), 0.0);
    P.slab_argmax.assign(static_cast<size_t>(n_slabs), -1);
    P.w_hat = Tensor(L.weights.dims);
    for (int s = 0; s < n_slabs; ++s) {
      const int64_t lo = static_cast<int64_t>(s) * 16 * ksize;
      const int64_t hi = std::min<int64_t>(lo + 16 * ksize, L.weights.size());
      double best = 0.0, second = 0.0;
      int64_t arg = -1;
      for (int64_t i = lo; i < hi; ++i) {
        const double a = std::fabs(P.t.data[static_cast<size_t>(i)]);
        if (a > best) {
          second = best;
          best = a;
          arg = i;
        } else {
          second = std::max(second, a);
        }
      }
      P.slab_max[static_cast<size_t>(s)] = best;
      P.slab_argmax[static_cast<size_t>(s)] = arg;
      if (best > 0.0) {
        kink_margin_ = std::min(kink_margin_, best - second);  // argmax switch
        for (int64_t i = lo; i < hi; ++i)
          P.w_hat.data[static_cast<size_t>(i)] = P.t.data[static_cast<size_t>(i)] / best;
      } else {
        kink_margin_ = 0.0;  // all-zero slab: normalization is degenerate
      }
    }

    P.scale.assign(static_cast<size_t>(out_ch), 1.0);
    P.inv_sigma.assign(static_cast<size_t>(out_ch), 1.0);
    P.offset.assign(static_cast<size_t>(out_ch), 0.0);
    for (int oc = 0; oc < out_ch; ++oc) {
      const double bias = L.bias.empty() ? 0.0 : L.bias[static_cast<size_t>(oc)];
      if (L.bn) {
        const double inv = 1.0 / std::sqrt(L.bn->sigma2[static_cast<size_t>(oc)] + L.bn->eps);
        P.inv_sigma[static_cast<size_t>(oc)] = inv;
        P.scale[static_cast<size_t>(oc)] = L.bn->gamma[static_cast<size_t>(oc)] * inv;
        P.offset[static_cast<size_t>(oc)] =
            L.bn->beta[static_cast<size_t>(oc)] -
            L.bn->gamma[static_cast<size_t>(oc)] * inv *
                (L.bn->mu[static_cast<size_t>(oc)] - bias);
      } else {
        P.offset[static_cast<size_t>(oc)] = bias;
      }
    }

    P.pre = Tensor(L.weights.dims);
    P.w_eff = Tensor(L.weights.dims);
    for (int oc = 0; oc < out_ch; ++oc) {
      const int slab = oc / 16;
      for (int64_t k = 0; k < ksize; ++k) {
        const int64_t i = oc * ksize + k;
        const double pre = P.scale[static_cast<size_t>(oc)] * P.w_hat.data[static_cast<size_t>(i)];
        P.pre.data[static_cast<size_t>(i)] = pre;
        const double f = std::clamp(pre, -1.0, 1.0);
        P.w_eff.data[static_cast<size_t>(i)] =
            cfg_.quantize ? static_cast<double>(std::llround(f * wmax)) * w_scale : f;
        // Clamp kink; the slab's max element sits exactly on +-1 without BN
        // but is locally constant there, so it is not a kink.
        if (L.bn || i != P.slab_argmax[static_cast<size_t>(slab)])
          kink_margin_ = std::min(kink_margin_, std::fabs(std::fabs(pre) - 1.0));
      }
    }

    P.offset_eff.assign(static_cast<size_t>(out_ch), 0.0);
    for (int oc = 0; oc < out_ch; ++oc)
      P.offset_eff[static_cast<size_t>(oc)] =
          cfg_.quantize
              ? static_cast<double>(std::llround(P.offset[static_cast<size_t>(oc)] / out_sc)) *
                    out_sc
              : P.offset[static_cast<size_t>(oc)];

    P.d_w_eff = Tensor(L.weights.dims);
    P.d_offset.assign(static_cast<size_t>(out_ch), 0.0);
  }
}

std::vector<double> Trainer::forward_sample(const Tensor& image, std::vector<LayerCache>* caches) {
  const int amax = (1 << cfg_.b_a) - 1;
  auto quantize_act = [&](double v) {
    const double c = clip01(v);
    return cfg_.quantize ? static_cast<double>(std::llround(c * amax)) / amax : c;
  };

  Tensor cur({model_.in_ch, model_.in_h, model_.in_w});
  if (image.dims != cur.dims) throw ShapeError("sample does not match the network input shape");
  for (size_t i = 0; i < image.data.size(); ++i) cur.data[i] = quantize_act(image.data[i]);

  for (int li = 0; li < head_; ++li) {
    const LayerSpec& L = model_.layers[static_cast<size_t>(li)];
    const PreparedLayer& P = prepared_[static_cast<size_t>(li)];
    LayerCache lc;
    lc.x = std::move(cur);
    lc.y = conv2d_ref(lc.x, P.w_eff, L.conv, P.offset_eff);
    lc.r = lc.y;
    if (L.relu)
      for (double& v : lc.r.data) {
        kink_margin_ = std::min(kink_margin_, std::fabs(v));
        v = std::max(v, 0.0);
      }
    if (L.pool.window > 0) {
      const int pw = L.pool.window, ps = L.pool.stride;
      const int rh = lc.r.dims[1], rw = lc.r.dims[2];
      if (rh < pw || rw < pw) throw ShapeError("pool window exceeds the feature map");
      const int ph = (rh - pw) / ps + 1, pqw = (rw - pw) / ps + 1;
      lc.p = Tensor({L.conv.out_ch, ph, pqw});
      lc.pool_arg.assign(lc.p.data.size(), 0);
      for (int c = 0; c < L.conv.out_ch; ++c)
        for (int py = 0; py < ph; ++py)
          for (int px = 0; px < pqw; ++px) {
            double best = -std::numeric_limits<double>::infinity();
            double second = -std::numeric_limits<double>::infinity();
            int64_t arg = 0;
            for (int wy = 0; wy < pw; ++wy)
              for (int wx = 0; wx < pw; ++wx) {
                const int ry = py * ps + wy, rx = px * ps + wx;
                const double v = lc.r.at3(c, ry, rx);
                if (v > best) {
                  second = best;
                  best = v;
                  arg = (static_cast<int64_t>(c) * rh + ry) * rw + rx;
                } else {
                  second = std::max(second, v);
                }
              }
            // A tie among relu-clamped zeros is locally constant, not a
            // kink: a clamped entry cannot move infinitesimally, and its
            // unclamping distance is already tracked by the relu margin.
            if (pw * pw > 1 && !(L.relu && best <= 0.0))
              kink_margin_ = std::min(kink_margin_, best - second);
            lc.p.at3(c, py, px) = best;
            lc.pool_arg[(static_cast<size_t>(c) * ph + py) * pqw + px] = arg;
          }
    } else {
      lc.p = lc.r;
    }
    lc.a = Tensor(lc.p.dims);
    for (size_t i = 0; i < lc.p.data.size(); ++i) {
      const double v = lc.p.data[i];
      kink_margin_ = std::min(kink_margin_, L.relu ? std::fabs(1.0 - v)
                                                   : std::min(std::fabs(v), std::fabs(1.0 - v)));
      lc.a.data[i] = quantize_act(v);
    }
    cur = lc.a;
    if (caches) caches->push_back(std::move(lc));
  }

  const LayerSpec& head = model_.layers[static_cast<size_t>(head_)];
  const int classes = head.conv.out_ch;
  const int in_flat = head.conv.in_ch;
  if (static_cast<int64_t>(cur.data.size()) != in_flat)
    throw ShapeError("flattened activation does not match the head input");
  std::vector<double> logits(static_cast<size_t>(classes), 0.0);
  for (int k = 0; k < classes; ++k) {
    double z = head.bias.empty() ? 0.0 : head.bias[static_cast<size_t>(k)];
    const size_t row = static_cast<size_t>(k) * in_flat;
    for (int i = 0; i < in_flat; ++i)
      z += head.weights.data[row + i] * cur.data[static_cast<size_t>(i)];
    logits[static_cast<size_t>(k)] = z;
  }
  return logits;
}

// Routes the accumulated d_w_eff / d_offset through the weight transforms
// back to the raw parameters, once per batch (the transforms are linear in
// the upstream gradient, so summing first is exact).
void Trainer::backprop_weight_transforms() {
  const int wmax = (1 << (cfg_.b_w - 1)) - 1;
  const double w_scale = 1.0 / static_cast<double>(1 << (cfg_.b_w - 1));
  const double ste_factor = cfg_.quantize ? wmax * w_scale : 1.0;

  size_t bi = 0;  // block cursor: weights, bias, [gamma, beta] per layer
  for (int li = 0; li < head_; ++li) {
    const LayerSpec& L = model_.layers[static_cast<size_t>(li)];
    const PreparedLayer& P = prepared_[static_cast<size_t>(li)];
    ParamBlock& wb = blocks_[bi++];
    ParamBlock& bb = blocks_[bi++];
    ParamBlock* gb = nullptr;
    ParamBlock* beta_b = nullptr;
    if (L.bn) {
      gb = &blocks_[bi++];
      beta_b = &blocks_[bi++];
    }

    const int out_ch = L.conv.out_ch;
    const int64_t ksize = L.weights.size() / out_ch;

    // clamp + scale backward into d_w_hat; per-channel scale gradient
    Tensor d_w_hat(L.weights.dims);
    std::vector<double> d_scale(static_cast<size_t>(out_ch), 0.0);
    for (int oc = 0; oc < out_ch; ++oc)
      for (int64_t k = 0; k < ksize; ++k) {
        const size_t i = static_cast<size_t>(oc * ksize + k);
        const double dF = P.d_w_eff.data[i] * ste_factor;
        if (std::fabs(P.pre.data[i]) <= 1.0) {
          d_w_hat.data[i] = dF * P.scale[static_cast<size_t>(oc)];
          d_scale[static_cast<size_t>(oc)] += dF * P.w_hat.data[i];
        }
      }

    // tanh-normalization backward, per slab
    const int n_slabs = (out_ch + 15) / 16;
    for (int s = 0; s < n_slabs; ++s) {
      const int64_t lo = static_cast<int64_t>(s) * 16 * ksize;
      const int64_t hi = std::min<int64_t>(lo + 16 * ksize, L.weights.size());
      const double M = P.slab_max[static_cast<size_t>(s)];
      if (M == 0.0) continue;  // degenerate slab: weights frozen at zero
      const int64_t arg = P.slab_argmax[static_cast<size_t>(s)];
      const double sgn = P.t.data[static_cast<size_t>(arg)] >= 0.0 ? 1.0 : -1.0;
      double S = 0.0;
      for (int64_t i = lo; i < hi; ++i)
        S += P.t.data[static_cast<size_t>(i)] * d_w_hat.data[static_cast<size_t>(i)];
      for (int64_t i = lo; i < hi; ++i) {
        const double t = P.t.data[static_cast<size_t>(i)];
        double g = d_w_hat.data[static_cast<size_t>(i)] / M;
        if (i == arg) g -= sgn * S / (M * M);
        wb.grad[static_cast<size_t>(i)] += (1.0 - t * t) * g;
      }
    }

    // offsets and the BN parameters
    for (int oc = 0; oc < out_ch; ++oc) {
      const double doff = P.d_offset[static_cast<size_t>(oc)];
      if (L.bn) {
        const double inv = P.inv_sigma[static_cast<size_t>(oc)];
        const double gamma = L.bn->gamma[static_cast<size_t>(oc)];
        const double bias = L.bias.empty() ? 0.0 : L.bias[static_cast<size_t>(oc)];
        const double mu_eff = L.bn->mu[static_cast<size_t>(oc)] - bias;
        gb->grad[static_cast<size_t>(oc)] +=
            d_scale[static_cast<size_t>(oc)] * inv - doff * mu_eff * inv;
        beta_b->grad[static_cast<size_t>(oc)] += doff;
        if (!bb.grad.empty()) bb.grad[static_cast<size_t>(oc)] += doff * gamma * inv;
      } else {
        if (!bb.grad.empty()) bb.grad[static_cast<size_t>(oc)] += doff;
      }
    }
  }
}

void Trainer::add_penalties(bool with_grads) {
  penalty_ = 0.0;
  if (cfg_.lambda > 0.0)
    for (ParamBlock& b : blocks_)
      if (b.weight_decay) {
        double sq = 0.0;
        for (size_t i = 0; i < b.values->size(); ++i) {
          const double v = (*b.values)[i];
          sq += v * v;
          if (with_grads) b.grad[i] += cfg_.lambda * v;
        }
        penalty_ += 0.5 * cfg_.lambda * sq;
      }

  if (has_lasso_ && cfg_.lambda_g > 0.0) {
    for (const LayerGroupInfo& info : lasso_structure_.layers) {
      LayerSpec& L = model_.layers[static_cast<size_t>(info.layer)];
      ParamBlock* wb = nullptr;
      for (ParamBlock& b : blocks_)
        if (b.conv_layer == info.layer) wb = &b;
      const std::vector<double> norms =
          layer_set_norms(L.weights, info, lasso_structure_.alpha, lasso_structure_.n);
      size_t at = 0;
      const int kw = L.conv.kernel_w;
      for (int slab = 0; slab < info.n_slabs; ++slab)
        for (int sp = 0; sp < info.n_spatial; ++sp)
          for (int ch = 0; ch < info.n_chunks; ++ch) {
            const double norm = norms[at++];
            penalty_ += 0.5 * cfg_.lambda_g * norm;
            kink_margin_ = std::min(kink_margin_, norm);  // ||w|| kink at zero
            if (!with_grads || norm == 0.0) continue;
            const double f = 0.5 * cfg_.lambda_g / norm;
            const int ky = sp / kw, kx = sp % kw;
            for (int k = 0; k < lasso_structure_.n; ++k)
              for (int i = 0; i < lasso_structure_.alpha; ++i) {
                const int oc = slab * lasso_structure_.n + k;
                const int ic = ch * lasso_structure_.alpha + i;
                const size_t idx =
                    ((static_cast<size_t>(oc) * L.conv.in_ch + ic) * L.conv.kernel_h + ky) *
                        L.conv.kernel_w +
                    kx;
                wb->grad[idx] += f * L.weights.data[idx];
              }
          }
    }
  }
}

double Trainer::batch_pass(const std::vector<const Tensor*>& images,
                           const std::vector<int>& labels, bool with_grads, bool update_stats) {
  if (images.empty() || images.size() != labels.size())
    throw TrainError("batch is empty or images/labels disagree");
  prepare_weights();
  if (with_grads) zero_grads();
  if (update_stats)
    for (int li = 0; li < head_; ++li) {
      const int out_ch = model_.layers[static_cast<size_t>(li)].conv.out_ch;
      stat_sum_[static_cast<size_t>(li)].assign(static_cast<size_t>(out_ch), 0.0);
      stat_sumsq_[static_cast<size_t>(li)].assign(static_cast<size_t>(out_ch), 0.0);
      stat_count_[static_cast<size_t>(li)] = 0;
    }

  const LayerSpec& head = model_.layers[static_cast<size_t>(head_)];
  const int classes = head.conv.out_ch;
  const int in_flat = head.conv.in_ch;
  const double inv_b = 1.0 / static_cast<double>(images.size());
  double data_loss = 0.0;

  for (size_t s = 0; s < images.size(); ++s) {
    const int label = labels[s];
    if (label < 0 || label >= classes) throw TrainError("label outside the class count");
    std::vector<LayerCache> caches;
    const bool need_caches = with_grads || update_stats;
    const std::vector<double> logits = forward_sample(*images[s], need_caches ? &caches : nullptr);
    const std::vector<double> prob = softmax(logits);
    data_loss += -std::log(std::max(prob[static_cast<size_t>(label)], 1e-300));

    if (update_stats)
      for (int li = 0; li < head_; ++li) {
        const LayerSpec& L = model_.layers[static_cast<size_t>(li)];
        if (!L.bn) continue;
        const PreparedLayer& P = prepared_[static_cast<size_t>(li)];
        const Tensor z = conv2d_ref(caches[static_cast<size_t>(li)].x, P.w_hat, L.conv, L.bias);
        const int64_t hw = static_cast<int64_t>(z.dims[1]) * z.dims[2];
        for (int oc = 0; oc < L.conv.out_ch; ++oc)
          for (int64_t k = 0; k < hw; ++k) {
            const double v = z.data[static_cast<size_t>(oc * hw + k)];
            stat_sum_[static_cast<size_t>(li)][static_cast<size_t>(oc)] += v;
            stat_sumsq_[static_cast<size_t>(li)][static_cast<size_t>(oc)] += v * v;
          }
        stat_count_[static_cast<size_t>(li)] += hw;
      }

    if (!with_grads) continue;

    // head backward
    std::vector<double> dlogits(static_cast<size_t>(classes));
    for (int k = 0; k < classes; ++k)
      dlogits[static_cast<size_t>(k)] =
          (prob[static_cast<size_t>(k)] - (k == label ? 1.0 : 0.0)) * inv_b;
    ParamBlock* head_w = nullptr;
    ParamBlock* head_b = nullptr;
    for (ParamBlock& b : blocks_) {
      if (b.name == head.name + ".weights") head_w = &b;
      if (b.name == head.name + ".bias") head_b = &b;
    }
    const Tensor& flat_in = caches.back().a;
    std::vector<double> dflat(static_cast<size_t>(in_flat), 0.0);
    for (int k = 0; k < classes; ++k) {
      const double g = dlogits[static_cast<size_t>(k)];
      head_b->grad[static_cast<size_t>(k)] += g;
      const size_t row = static_cast<size_t>(k) * in_flat;
      for (int i = 0; i < in_flat; ++i) {
        head_w->grad[row + i] += g * flat_in.data[static_cast<size_t>(i)];
        dflat[static_cast<size_t>(i)] += g * head.weights.data[row + i];
      }
    }

    Tensor da(caches.back().a.dims);
    da.data = dflat;  // same channel-major layout as the flatten
    for (int li = head_ - 1; li >= 0; --li) {
      const LayerSpec& L = model_.layers[static_cast<size_t>(li)];
      PreparedLayer& P = prepared_[static_cast<size_t>(li)];
      LayerCache& lc = caches[static_cast<size_t>(li)];

      // activation rounding is straight-through; clip passes on (0, 1)
      Tensor dp(lc.p.dims);
      for (size_t i = 0; i < dp.data.size(); ++i) {
        const double v = lc.p.data[i];
        dp.data[i] = (v > 0.0 && v < 1.0) ? da.data[i] : 0.0;
      }
      Tensor dr(lc.r.dims);
      if (L.pool.window > 0) {
        for (size_t i = 0; i < dp.data.size(); ++i)
          dr.data[static_cast<size_t>(lc.pool_arg[i])] += dp.data[i];
      } else {
        dr = dp;
      }
      Tensor dy(lc.y.dims);
      for (size_t i = 0; i < dy.data.size(); ++i)
        dy.data[i] = (!L.relu || lc.y.data[i] > 0.0) ? dr.data[i] : 0.0;

      if (li > 0) {
        Tensor dx(lc.x.dims);
        conv_backward(lc.x, P.w_eff, L.conv, dy, &dx, P.d_w_eff, P.d_offset);
        da = std::move(dx);
      } else {
        conv_backward(lc.x, P.w_eff, L.conv, dy, nullptr, P.d_w_eff, P.d_offset);
      }
    }
  }

  data_loss *= inv_b;
  if (with_grads) backprop_weight_transforms();
  add_penalties(with_grads);

  if (update_stats)
    for (int li = 0; li < head_; ++li) {
      LayerSpec& L = model_.layers[static_cast<size_t>(li)];
      if (!L.bn || stat_count_[static_cast<size_t>(li)] == 0) continue;
      const double n = static_cast<double>(stat_count_[static_cast<size_t>(li)]);
      const double m = cfg_.bn_momentum;
      for (int oc = 0; oc < L.conv.out_ch; ++oc) {
        const double mean = stat_sum_[static_cast<size_t>(li)][static_cast<size_t>(oc)] / n;
        const double var = std::max(
            0.0, stat_sumsq_[static_cast<size_t>(li)][static_cast<size_t>(oc)] / n - mean * mean);
        L.bn->mu[static_cast<size_t>(oc)] = m * L.bn->mu[static_cast<size_t>(oc)] + (1 - m) * mean;
        L.bn->sigma2[static_cast<size_t>(oc)] =
            m * L.bn->sigma2[static_cast<size_t>(oc)] + (1 - m) * var;
      }
    }

  return data_loss + penalty_;
}

double Trainer::compute_loss(const std::vector<const Tensor*>& images,
                             const std::vector<int>& labels) {
  return batch_pass(images, labels, false, false);
}

double Trainer::compute_gradients(const std::vector<const Tensor*>& images,
                                  const std::vector<int>& labels) {
  return batch_pass(images, labels, true, false);
}

void Trainer::sgd_step(double lr) {
  for (ParamBlock& b : blocks_)
    for (size_t i = 0; i < b.values->size(); ++i) (*b.values)[i] -= lr * b.grad[i];
  apply_frozen_mask();
}

double Trainer::train_step(const std::vector<const Tensor*>& images,
                           const std::vector<int>& labels, double lr) {
  const double loss = batch_pass(images, labels, true, true);
  sgd_step(lr);
  return loss;
}

std::vector<double> Trainer::forward_logits(const Tensor& image) {
  prepare_weights();
  return forward_sample(image, nullptr);
}

int Trainer::predict(const Tensor& image) {
  const std::vector<double> logits = forward_logits(image);
  return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

double Trainer::accuracy(const Dataset& data) {
  if (data.images.empty()) throw TrainError("dataset is empty");
  prepare_weights();
  int64_t hit = 0;
  for (size_t i = 0; i < data.images.size(); ++i) {
    const std::vector<double> logits = forward_sample(data.images[i], nullptr);
    const int pred =
        static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    if (pred == data.labels[i]) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(data.images.size());
}

TrainResult train_tiny(const NetworkModel& model, const Dataset& data, const TrainConfig& cfg) {
  if (data.images.empty() || data.images.size() != data.labels.size())
    throw TrainError("dataset is empty or misaligned");
  Trainer tr(model, cfg);
  TrainResult res;

  const bool will_prune = cfg.target_zero_ratio > 0.0;
  GroupStructure structure;
  if (will_prune) {
    std::vector<int> conv_layers(model.layers.size() - 1);
    std::iota(conv_layers.begin(), conv_layers.end(), 0);
    structure = build_group_structure(model, cfg.alpha, cfg.n, conv_layers);
  }
  int prune_epoch = -1;
  if (will_prune) {
    prune_epoch = static_cast<int>(std::llround(cfg.epochs * cfg.warmup_fraction));
    prune_epoch = std::clamp(prune_epoch, 0, std::max(0, cfg.epochs - 1));
  }

  std::mt19937_64 rng(cfg.seed);
  std::vector<size_t> order(data.images.size());
  std::iota(order.begin(), order.end(), 0);
  const size_t B = static_cast<size_t>(std::max(1, cfg.batch_size));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (will_prune && epoch == prune_epoch) {
      auto [pruned, mask] = prune_to_target(tr.model(), structure, cfg.target_zero_ratio);
      (void)pruned;
      tr.set_mask(mask, structure);
      res.mask = mask;
      res.structure = structure;
    }
    const double lr = cfg.lr * std::pow(cfg.lr_decay, epoch);
    std::shuffle(order.begin(), order.end(), rng);

    double sum_loss = 0.0;
    int batches = 0;
    for (size_t start = 0; start < order.size(); start += B) {
      const size_t stop = std::min(order.size(), start + B);
      std::vector<const Tensor*> images;
      std::vector<int> labels;
      for (size_t i = start; i < stop; ++i) {
        images.push_back(&data.images[order[i]]);
        labels.push_back(data.labels[order[i]]);
      }
      sum_loss += tr.train_step(images, labels, lr);
      ++batches;
    }
    EpochStats st;
    st.epoch = epoch;
    st.loss = batches ? sum_loss / batches : 0.0;
    st.penalty = tr.last_penalty();
    st.accuracy = tr.accuracy(data);
    res.trace.push_back(st);
  }

  res.model = tr.model();
  res.final_accuracy = res.trace.empty() ? tr.accuracy(data) : res.trace.back().accuracy;
  return res;
}

}  // namespace mars
