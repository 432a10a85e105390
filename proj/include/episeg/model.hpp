#pragma once

#include <atomic>
#include <cstdint>
#include <utility>
#include <vector>

#include "episeg/checkpoint.hpp"
#include "episeg/dataset.hpp"
#include "episeg/hashing.hpp"
#include "episeg/tensor.hpp"

namespace episeg {

// Layer widths for the two branches. The conditioning branch runs
// conv3x3+relu+maxpool per width, then a global average pool and a linear
// head onto an embedding of length embedding_len. The segmentation branch
// runs conv3x3+relu per width with a maxpool after each of the first two
// blocks, so its features sit at 1/4 of the input resolution and have
// seg_widths.back() channels.
// The conditioning branch is kept deliberately light relative to the
// segmentation branch: at test time the segmentation features are computed
// once per query while conditioning runs once per support, so a thin
// conditioning encoder is what keeps k-shot inference near 1-shot cost.
struct ArchConfig {
  std::vector<int> cond_widths = {4, 8, 16, 24};
  std::vector<int> seg_widths = {12, 24, 64};
  int embedding_len = 64;
  std::uint64_t hash_seed = 0;

  int feature_dim() const { return seg_widths.back(); }
  // input must survive one maxpool per conditioning block
  std::int64_t min_input_side() const { return std::int64_t(1) << cond_widths.size(); }
};

// Pixel classifier predicted by the conditioning branch: probability of
// foreground is sigmoid(w . feature + b) at every feature-map position.
struct ClassifierParams {
  Tensor w;  // [feature_dim]
  Tensor b;  // [1]
};

// Support image with its background zeroed out, as the conditioning input.
Tensor mask_support(const SegImage& image, const BinaryMask& mask);

// Thresholds upsampled probabilities at 0.5 (ties count as foreground).
BinaryMask threshold_probs(const Tensor& probs);  // [1,H,W] -> mask

class TwoBranchModel {
 public:
  // Fresh parameters: He-scaled conv kernels, a small-variance embedding
  // head, zero biases. The hashing tables come from cfg.hash_seed.
  TwoBranchModel(const ArchConfig& cfg, std::uint64_t init_seed);

  // movable but not copyable (the forward counter is an atomic)
  TwoBranchModel(TwoBranchModel&& other) noexcept;
  TwoBranchModel& operator=(TwoBranchModel&& other) noexcept;

  static TwoBranchModel from_checkpoint(const Checkpoint& ck);
  Checkpoint to_checkpoint(std::uint64_t run_seed) const;

  const ArchConfig& config() const { return cfg_; }
  const HashingSpec& hashing() const { return hashing_; }

  // Trainable tensors with their learning-rate multipliers (the whole
  // conditioning branch trains at 0.1x the base rate).
  std::vector<std::pair<Tensor, double>> trainable_params() const;

  // Conditioning branch: masked support -> embedding -> hashed {w, b}.
  Tensor condition_vector(Tape& tape, const Tensor& masked_support) const;
  ClassifierParams condition(Tape& tape, const SegImage& support_image,
                             const BinaryMask& support_mask) const;

  // Segmentation branch; every call counts one feature forward pass.
  Tensor extract_features(Tape& tape, const Tensor& image) const;  // [D, h, w]

  // Per-position linear classifier over the feature map -> raw scores
  // [1, h, w]. Losses should be built from these so saturation of the
  // sigmoid never silences the gradient.
  Tensor classify_logits(Tape& tape, const Tensor& features,
                         const ClassifierParams& params) const;

  // sigmoid(classify_logits(...)) -> probs [1, h, w].
  Tensor classify(Tape& tape, const Tensor& features, const ClassifierParams& params) const;

  // End-to-end k-shot inference: one feature pass for the query, one
  // conditioning pass per support, predicted masks combined by union.
  BinaryMask predict(const SegImage& query, const std::vector<SegImage>& support_images,
                     const std::vector<BinaryMask>& support_masks) const;

  std::uint64_t feature_forward_count() const { return feature_forwards_.load(); }
  void reset_feature_forward_count() { feature_forwards_.store(0); }

 private:
  ArchConfig cfg_;
  HashingSpec hashing_;
  std::vector<Tensor> cond_kernels_, cond_biases_;
  Tensor head_weight_, head_bias_;
  std::vector<Tensor> seg_kernels_, seg_biases_;
  mutable std::atomic<std::uint64_t> feature_forwards_{0};
};

}  // namespace episeg
