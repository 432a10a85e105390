#pragma once

// Reference predictors the two-branch model is benchmarked against. All of
// them share the episode-in / query-sized-mask-out contract of
// TwoBranchModel::predict, and all of them pool the pixels of every support
// image when an episode carries more than one.
//
// Three predictors lean on one supervised encoder (BaseFeatureNet, trained
// for per-pixel classification of the training classes):
//   nn1       copy the label of the Euclidean-nearest support feature pixel
//   logreg    fit an L2-regularized logistic regression on support pixels
//   finetune  clone the net, retrain its tail + a fresh binary head on the
//             supports
// The fourth trains its own encoder end to end:
//   siamese   learned per-channel L1 similarity; copy the label of the most
//             similar support pixel.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "episeg/checkpoint.hpp"
#include "episeg/dataset.hpp"
#include "episeg/tensor.hpp"

namespace episeg {

// Per-cell majority vote over the same block partition downsample_mask uses;
// ties go to the smallest label id.
std::vector<int> downsample_labels(const LabelRaster& labels, std::int64_t h, std::int64_t w);

// Convolutional encoder (3x3 convs, relu, 2x2 maxpools after the first two
// layers, stride 4 overall) with a 1x1-conv head for (train classes + 1)-way
// pixel classification. Channel 0 of the head is background; channel 1+i is
// the i-th training class in ascending id order. The feature volume handed
// to the baselines is the post-relu output of the last encoder layer.
class BaseFeatureNet {
 public:
  BaseFeatureNet(std::vector<int> widths, int num_labels, std::uint64_t init_seed);

  static BaseFeatureNet from_checkpoint(const Checkpoint& ck);
  Checkpoint to_checkpoint(std::uint64_t run_seed) const;

  int feature_dim() const { return widths_.back(); }
  int num_labels() const { return num_labels_; }

  Tensor features(Tape& tape, const Tensor& image) const;       // [D, H/4, W/4]
  Tensor label_logits(Tape& tape, const Tensor& feats) const;   // [num_labels, h, w]

  std::vector<std::pair<Tensor, double>> trainable_params() const;
  // Kernel and bias of the last `layers` encoder convolutions — the slice a
  // fine-tuning run is allowed to move.
  std::vector<std::pair<Tensor, double>> tail_params(int layers) const;

  BaseFeatureNet clone() const;  // deep parameter copy

 private:
  BaseFeatureNet() = default;

  std::vector<int> widths_;
  int num_labels_ = 0;
  std::vector<Tensor> kernels_;
  std::vector<Tensor> biases_;
  Tensor head_kernel_;  // [num_labels, D, 1, 1]
  Tensor head_bias_;    // [num_labels]
};

struct BaseTrainConfig {
  std::vector<int> widths = {12, 24, 64};
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::int64_t iterations = 2000;
  std::uint64_t seed = 0;
};

// Supervised pixel-classification training on the listed classes (dataset
// must already be remapped so no other foreground labels remain). Targets
// live at feature resolution via majority vote per cell.
BaseFeatureNet train_base_classifier(const SegDataset& ds, const std::vector<int>& train_classes,
                                     const BaseTrainConfig& cfg);

// Solution of  min_{w,b} (1/n) sum_i bce(sigmoid(w.x_i + b), y_i) + (reg/2)|w|^2
// by damped Newton steps. x is row-major n x d. Throws when the gradient has
// not vanished within max_iters steps.
struct LogregFit {
  std::vector<double> w;
  double b = 0.0;
  int iterations = 0;  // Newton steps actually taken
};
LogregFit fit_logistic(const std::vector<double>& x, std::int64_t n, std::int64_t d,
                       const std::vector<std::uint8_t>& y, double reg, int max_iters);

BinaryMask nn1_predict(const BaseFeatureNet& net, const Episode& ep);

BinaryMask logreg_predict(const BaseFeatureNet& net, const Episode& ep, double reg = 1e-3,
                          int max_iters = 500);

// Clones the net, freezes everything but the last two encoder layers, bolts
// on a fresh zero-initialized binary head (so the starting prediction is
// exactly 0.5 everywhere), normalizes features per channel over the support
// pixels, and runs `steps` full-batch gradient steps on the support
// cross-entropy. The passed-in net is never modified. When loss_trace is
// given it receives the support loss before each step.
BinaryMask finetune_predict(const BaseFeatureNet& net, const Episode& ep, int steps = 50,
                            double lr = 0.1, std::vector<double>* loss_trace = nullptr);

// Shared-encoder matcher scoring pixel pairs with sigmoid(sum_c alpha_c *
// |f_a[c] - f_b[c]| + beta). alpha starts at -1/D so larger distance means
// lower similarity from the first step on.
class SiameseMatcher {
 public:
  SiameseMatcher(std::vector<int> widths, std::uint64_t init_seed);

  static SiameseMatcher from_checkpoint(const Checkpoint& ck);
  Checkpoint to_checkpoint(std::uint64_t run_seed) const;

  int feature_dim() const { return widths_.back(); }
  Tensor features(Tape& tape, const Tensor& image) const;  // [D, H/4, W/4]
  const Tensor& alpha() const { return alpha_; }
  const Tensor& beta() const { return beta_; }

  std::vector<std::pair<Tensor, double>> trainable_params() const;

  // Each query feature pixel copies the label of the support feature pixel
  // with the highest similarity; ties go to the lowest pooled support-pixel
  // index. The label map is then upsampled to query size.
  BinaryMask predict(const Episode& ep) const;

 private:
  SiameseMatcher() = default;

  std::vector<int> widths_;
  std::vector<Tensor> kernels_;
  std::vector<Tensor> biases_;
  Tensor alpha_;  // [D]
  Tensor beta_;   // [1]
};

struct SiameseConfig {
  std::vector<int> widths = {12, 24, 64};
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::int64_t iterations = 2000;
  double sample_fraction = 0.5;  // share of pixel positions drawn per image
  std::uint64_t seed = 0;
};

// Verification training: sample an image pair sharing a class, draw a subset
// of feature pixels from each side, and fit the similarity to predict
// whether the two pixels carry the same mask label.
SiameseMatcher siamese_train(const SegDataset& ds, const std::vector<int>& train_classes,
                             const SiameseConfig& cfg);

}  // namespace episeg
