#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "mars/network.hpp"
#include "mars/prune.hpp"

namespace mars {

// Quantization- and sparsity-aware trainer for small conv stacks with a
// float fully-connected classifier head (the head is never quantized or
// pruned). The forward pass mirrors the deployment pipeline exactly:
// per-slab tanh normalization, per-channel BN fusion with frozen running
// statistics, clamp, rounding to b_w-bit codes times the hardware scale,
// and b_a-bit activation rounding; with quantize=false the same graph runs
// without the rounding steps (the dense float baseline, and the target the
// finite-difference checks differentiate).
struct TrainConfig {
  int epochs = 60;
  int batch_size = 8;
  double lr = 0.05;
  double lr_decay = 1.0;  // per-epoch multiplier
  double lambda = 0.0;    // L2 on conv+fc weight tensors, lambda/2 * ||w||^2
  double lambda_g = 0.0;  // group lasso on conv weights, lambda_g/2 * sum ||w_g||
  double target_zero_ratio = 0.0;
  double warmup_fraction = 0.6;  // epochs before the one-shot prune
  double bn_momentum = 0.9;
  bool quantize = true;
  int b_w = 4, b_a = 4;
  int alpha = 16, n = 16;  // group geometry for the lasso/pruner
  uint64_t seed = 1;
};

struct Dataset {
  std::vector<Tensor> images;  // [C,H,W], values in [0,1]
  std::vector<int> labels;
  int classes = 2;
};

// Two-class separable toy set: per class a fixed clipped pattern plus small
// clipped Gaussian noise. Deterministic in the seed.
Dataset make_synthetic_dataset(int per_class, int channels, int h, int w, uint64_t seed);

struct EpochStats {
  int epoch = 0;
  double loss = 0.0;     // mean objective (data + penalties) over batches
  double penalty = 0.0;  // L2 + group-lasso value at epoch end
  double accuracy = 0.0;
};
std::string trace_to_csv(const std::vector<EpochStats>& trace);

// One trainable parameter tensor and its gradient buffer.
struct ParamBlock {
  std::string name;
  std::vector<double>* values = nullptr;
  std::vector<double> grad;
  bool weight_decay = false;  // L2 applies (weight tensors only)
  int conv_layer = -1;        // >=0 marks group-lasso-eligible conv weights
};

class Trainer {
 public:
  Trainer(NetworkModel model, TrainConfig cfg);

  // Objective (mean data loss + penalties) for the current parameters.
  double compute_loss(const std::vector<const Tensor*>& images, const std::vector<int>& labels);
  // Same objective; overwrites every block's gradient.
  double compute_gradients(const std::vector<const Tensor*>& images,
                           const std::vector<int>& labels);
  // Gradients + running-statistics update + SGD update + mask re-freeze.
  double train_step(const std::vector<const Tensor*>& images, const std::vector<int>& labels,
                    double lr);
  void sgd_step(double lr);

  // Zeroes pruned groups now and freezes them for later steps.
  void set_mask(const GroupMask& mask, const GroupStructure& structure);

  std::vector<double> forward_logits(const Tensor& image);
  int predict(const Tensor& image);
  double accuracy(const Dataset& data);

  // Distance to the nearest non-smooth point (relu/clip/clamp/pool/argmax)
  // seen by the last forward; finite-difference checks resample batches
  // until this clears their step size.
  double last_kink_margin() const { return kink_margin_; }
  double last_penalty() const { return penalty_; }

  std::vector<ParamBlock>& blocks() { return blocks_; }
  NetworkModel& model() { return model_; }
  const TrainConfig& config() const { return cfg_; }

 private:
  struct PreparedLayer {  // weight-side tensors, fixed per batch
    Tensor t;             // tanh(raw weights)
    std::vector<double> slab_max;
    std::vector<int64_t> slab_argmax;  // flat index into the layer tensor
    Tensor w_hat;
    Tensor pre;    // per-channel scale * w_hat, before the clamp
    Tensor w_eff;  // weights the convolution actually uses
    std::vector<double> scale, inv_sigma, offset, offset_eff;
    Tensor d_w_eff;  // batch accumulators
    std::vector<double> d_offset;
  };
  struct LayerCache {  // activation-side tensors, per sample
    Tensor x, y, r, p, a;
    std::vector<int64_t> pool_arg;
  };

  void prepare_weights();
  void backprop_weight_transforms();
  std::vector<double> forward_sample(const Tensor& image, std::vector<LayerCache>* caches);
  double batch_pass(const std::vector<const Tensor*>& images, const std::vector<int>& labels,
                    bool with_grads, bool update_stats);
  void add_penalties(bool with_grads);
  void zero_grads();
  void apply_frozen_mask();

  NetworkModel model_;
  TrainConfig cfg_;
  int head_ = 0;  // index of the fc head layer
  std::vector<ParamBlock> blocks_;
  std::vector<PreparedLayer> prepared_;
  GroupMask mask_;
  GroupStructure mask_structure_;
  bool has_mask_ = false;
  GroupStructure lasso_structure_;
  bool has_lasso_ = false;
  double kink_margin_ = 0.0;
  double penalty_ = 0.0;
  // running-statistics accumulators, per conv layer x channel
  std::vector<std::vector<double>> stat_sum_, stat_sumsq_;
  std::vector<int64_t> stat_count_;
};

struct TrainResult {
  NetworkModel model;
  GroupMask mask;
  GroupStructure structure;
  std::vector<EpochStats> trace;
  double final_accuracy = 0.0;
};

// Full recipe: warm-up training with the lasso, one-shot prune to the
// target zero ratio, masked fine-tune. target_zero_ratio == 0 trains
// without pruning.
TrainResult train_tiny(const NetworkModel& model, const Dataset& data, const TrainConfig& cfg);

}  // namespace mars
