#include "episeg/model.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "episeg/rng.hpp"

namespace episeg {

namespace {

constexpr std::uint64_t kInitStreamTag = 0x696e6974u;  // "init"

void check_arch(const ArchConfig& cfg) {
  if (cfg.cond_widths.empty() || cfg.seg_widths.empty())
    throw std::invalid_argument("model: branch widths must be non-empty");
  for (int w : cfg.cond_widths)
    if (w <= 0) throw std::invalid_argument("model: conditioning width must be positive");
  for (int w : cfg.seg_widths)
    if (w <= 0) throw std::invalid_argument("model: segmentation width must be positive");
  if (cfg.embedding_len <= 0)
    throw std::invalid_argument("model: embedding_len must be positive");
}

Tensor he_kernel(int cout, int cin, Rng& rng) {
  const double stddev = std::sqrt(2.0 / (static_cast<double>(cin) * 9.0));
  return Tensor::randn({cout, cin, 3, 3}, stddev, rng, true);
}

void check_image_tensor(const Tensor& t, std::int64_t min_side, const char* what) {
  if (t.rank() != 3 || t.extent(0) != 3)
    throw std::invalid_argument(std::string(what) + ": expected a [3,H,W] tensor");
  if (t.extent(1) < min_side || t.extent(2) < min_side)
    throw std::invalid_argument(std::string(what) + ": input smaller than " +
                                std::to_string(min_side) + " pixels per side");
}

}  // namespace

Tensor mask_support(const SegImage& image, const BinaryMask& mask) {
  if (mask.height != image.height || mask.width != image.width)
    throw std::invalid_argument("mask_support: mask size differs from image");
  Tensor t = to_input_tensor(image);
  const std::int64_t hw = image.height * image.width;
  auto v = t.data();
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t i = 0; i < hw; ++i)
      if (!mask.fg[static_cast<std::size_t>(i)]) v[c * hw + i] = 0.0;
  return t;
}

BinaryMask threshold_probs(const Tensor& probs) {
  if (probs.rank() != 3 || probs.extent(0) != 1)
    throw std::invalid_argument("threshold_probs: expected a [1,H,W] tensor");
  BinaryMask mask;
  mask.height = probs.extent(1);
  mask.width = probs.extent(2);
  mask.fg.resize(static_cast<std::size_t>(mask.height * mask.width));
  const auto v = probs.data();
  for (std::size_t i = 0; i < mask.fg.size(); ++i) mask.fg[i] = v[i] >= 0.5 ? 1 : 0;
  return mask;
}

TwoBranchModel::TwoBranchModel(const ArchConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
  check_arch(cfg_);
  hashing_ = build_hashing(cfg_.hash_seed, cfg_.embedding_len, cfg_.feature_dim() + 1);

  Rng rng(derive_seed(init_seed, kInitStreamTag));
  int cin = 3;
  for (int width : cfg_.cond_widths) {
    cond_kernels_.push_back(he_kernel(width, cin, rng));
    cond_biases_.push_back(Tensor::zeros({width}, true));
    cin = width;
  }
  // small head keeps initial classifier params near zero, so early
  // predictions stay close to p = 0.5 instead of saturating the loss
  head_weight_ = Tensor::randn({cfg_.embedding_len, cfg_.cond_widths.back()}, 0.05, rng, true);
  head_bias_ = Tensor::zeros({cfg_.embedding_len}, true);

  cin = 3;
  for (int width : cfg_.seg_widths) {
    seg_kernels_.push_back(he_kernel(width, cin, rng));
    seg_biases_.push_back(Tensor::zeros({width}, true));
    cin = width;
  }
}

TwoBranchModel::TwoBranchModel(TwoBranchModel&& other) noexcept
    : cfg_(std::move(other.cfg_)),
      hashing_(std::move(other.hashing_)),
      cond_kernels_(std::move(other.cond_kernels_)),
      cond_biases_(std::move(other.cond_biases_)),
      head_weight_(std::move(other.head_weight_)),
      head_bias_(std::move(other.head_bias_)),
      seg_kernels_(std::move(other.seg_kernels_)),
      seg_biases_(std::move(other.seg_biases_)),
      feature_forwards_(other.feature_forwards_.load()) {}

TwoBranchModel& TwoBranchModel::operator=(TwoBranchModel&& other) noexcept {
  cfg_ = std::move(other.cfg_);
  hashing_ = std::move(other.hashing_);
  cond_kernels_ = std::move(other.cond_kernels_);
  cond_biases_ = std::move(other.cond_biases_);
  head_weight_ = std::move(other.head_weight_);
  head_bias_ = std::move(other.head_bias_);
  seg_kernels_ = std::move(other.seg_kernels_);
  seg_biases_ = std::move(other.seg_biases_);
  feature_forwards_.store(other.feature_forwards_.load());
  return *this;
}

std::vector<std::pair<Tensor, double>> TwoBranchModel::trainable_params() const {
  std::vector<std::pair<Tensor, double>> out;
  for (std::size_t i = 0; i < cond_kernels_.size(); ++i) {
    out.emplace_back(cond_kernels_[i], 0.1);
    out.emplace_back(cond_biases_[i], 0.1);
  }
  out.emplace_back(head_weight_, 0.1);
  out.emplace_back(head_bias_, 0.1);
  for (std::size_t i = 0; i < seg_kernels_.size(); ++i) {
    out.emplace_back(seg_kernels_[i], 1.0);
    out.emplace_back(seg_biases_[i], 1.0);
  }
  return out;
}

Tensor TwoBranchModel::condition_vector(Tape& tape, const Tensor& masked_support) const {
  check_image_tensor(masked_support, cfg_.min_input_side(), "condition");
  Tensor h = masked_support;
  for (std::size_t i = 0; i < cond_kernels_.size(); ++i) {
    h = relu(tape, conv2d(tape, h, cond_kernels_[i], cond_biases_[i], 1, 1));
    h = maxpool2(tape, h);
  }
  Tensor pooled = global_avg_pool(tape, h);
  return linear(tape, pooled, head_weight_, head_bias_);
}

ClassifierParams TwoBranchModel::condition(Tape& tape, const SegImage& support_image,
                                           const BinaryMask& support_mask) const {
  Tensor x = condition_vector(tape, mask_support(support_image, support_mask));
  Tensor theta = hash_forward(tape, x, hashing_);
  ClassifierParams params;
  params.w = slice1d(tape, theta, 0, cfg_.feature_dim());
  params.b = slice1d(tape, theta, cfg_.feature_dim(), 1);
  return params;
}

Tensor TwoBranchModel::extract_features(Tape& tape, const Tensor& image) const {
  check_image_tensor(image, 4, "extract_features");
  feature_forwards_.fetch_add(1);
  Tensor h = image;
  for (std::size_t i = 0; i < seg_kernels_.size(); ++i) {
    h = relu(tape, conv2d(tape, h, seg_kernels_[i], seg_biases_[i], 1, 1));
    if (i < 2) h = maxpool2(tape, h);
  }
  return h;
}

Tensor TwoBranchModel::classify_logits(Tape& tape, const Tensor& features,
                                       const ClassifierParams& params) const {
  if (features.rank() != 3 || features.extent(0) != cfg_.feature_dim())
    throw std::invalid_argument("classify_logits: features do not match the architecture");
  Tensor kernel = reshape(tape, params.w, {1, cfg_.feature_dim(), 1, 1});
  return conv2d(tape, features, kernel, params.b, 1, 0);
}

Tensor TwoBranchModel::classify(Tape& tape, const Tensor& features,
                                const ClassifierParams& params) const {
  return sigmoid(tape, classify_logits(tape, features, params));
}

BinaryMask TwoBranchModel::predict(const SegImage& query,
                                   const std::vector<SegImage>& support_images,
                                   const std::vector<BinaryMask>& support_masks) const {
  if (support_images.empty() || support_images.size() != support_masks.size())
    throw std::invalid_argument("predict: need one mask per support image, at least one pair");
  Tape tape(false);
  const Tensor features = extract_features(tape, to_input_tensor(query));

  BinaryMask out;
  out.height = query.height;
  out.width = query.width;
  out.fg.assign(static_cast<std::size_t>(query.height * query.width), 0);
  for (std::size_t s = 0; s < support_images.size(); ++s) {
    const ClassifierParams params = condition(tape, support_images[s], support_masks[s]);
    const Tensor probs = classify(tape, features, params);
    const Tensor up = bilinear_upsample(tape, probs, query.height, query.width);
    const BinaryMask m = threshold_probs(up);
    for (std::size_t i = 0; i < out.fg.size(); ++i) out.fg[i] |= m.fg[i];
  }
  return out;
}

// ---- serialization ------------------------------------------------------------

Checkpoint TwoBranchModel::to_checkpoint(std::uint64_t run_seed) const {
  Checkpoint ck;
  ck.rng_seed = run_seed;
  ck.model_kind = "ours";
  ck.config.emplace_back("embedding_len", static_cast<double>(cfg_.embedding_len));
  // 64-bit seed split into exactly representable 32-bit halves
  ck.config.emplace_back("hash_seed_lo", static_cast<double>(cfg_.hash_seed & 0xffffffffull));
  ck.config.emplace_back("hash_seed_hi", static_cast<double>(cfg_.hash_seed >> 32));
  ck.config.emplace_back("cond_depth", static_cast<double>(cfg_.cond_widths.size()));
  for (std::size_t i = 0; i < cfg_.cond_widths.size(); ++i)
    ck.config.emplace_back("cond_width_" + std::to_string(i),
                           static_cast<double>(cfg_.cond_widths[i]));
  ck.config.emplace_back("seg_depth", static_cast<double>(cfg_.seg_widths.size()));
  for (std::size_t i = 0; i < cfg_.seg_widths.size(); ++i)
    ck.config.emplace_back("seg_width_" + std::to_string(i),
                           static_cast<double>(cfg_.seg_widths[i]));

  for (std::size_t i = 0; i < cond_kernels_.size(); ++i) {
    ck.tensors.emplace_back("cond" + std::to_string(i) + ".kernel", cond_kernels_[i]);
    ck.tensors.emplace_back("cond" + std::to_string(i) + ".bias", cond_biases_[i]);
  }
  ck.tensors.emplace_back("head.weight", head_weight_);
  ck.tensors.emplace_back("head.bias", head_bias_);
  for (std::size_t i = 0; i < seg_kernels_.size(); ++i) {
    ck.tensors.emplace_back("seg" + std::to_string(i) + ".kernel", seg_kernels_[i]);
    ck.tensors.emplace_back("seg" + std::to_string(i) + ".bias", seg_biases_[i]);
  }
  return ck;
}

TwoBranchModel TwoBranchModel::from_checkpoint(const Checkpoint& ck) {
  if (ck.model_kind != "ours")
    throw std::runtime_error("model: checkpoint holds a '" + ck.model_kind +
                             "' model, not the two-branch network");
  ArchConfig cfg;
  cfg.embedding_len = static_cast<int>(checkpoint_config(ck, "embedding_len"));
  cfg.hash_seed = static_cast<std::uint64_t>(checkpoint_config(ck, "hash_seed_lo")) |
                  (static_cast<std::uint64_t>(checkpoint_config(ck, "hash_seed_hi")) << 32);
  cfg.cond_widths.clear();
  const int cond_depth = static_cast<int>(checkpoint_config(ck, "cond_depth"));
  for (int i = 0; i < cond_depth; ++i)
    cfg.cond_widths.push_back(
        static_cast<int>(checkpoint_config(ck, "cond_width_" + std::to_string(i))));
  cfg.seg_widths.clear();
  const int seg_depth = static_cast<int>(checkpoint_config(ck, "seg_depth"));
  for (int i = 0; i < seg_depth; ++i)
    cfg.seg_widths.push_back(
        static_cast<int>(checkpoint_config(ck, "seg_width_" + std::to_string(i))));

  TwoBranchModel model(cfg, /*init_seed=*/0);
  auto restore = [&](Tensor& dst, const std::string& name) {
    Tensor src = checkpoint_tensor(ck, name);
    if (src.shape() != dst.shape())
      throw std::runtime_error("model: checkpoint tensor '" + name + "' has shape " +
                               shape_str(src.shape()) + ", expected " + shape_str(dst.shape()));
    std::copy(src.data().begin(), src.data().end(), dst.data().begin());
  };
  for (std::size_t i = 0; i < model.cond_kernels_.size(); ++i) {
    restore(model.cond_kernels_[i], "cond" + std::to_string(i) + ".kernel");
    restore(model.cond_biases_[i], "cond" + std::to_string(i) + ".bias");
  }
  restore(model.head_weight_, "head.weight");
  restore(model.head_bias_, "head.bias");
  for (std::size_t i = 0; i < model.seg_kernels_.size(); ++i) {
    restore(model.seg_kernels_[i], "seg" + std::to_string(i) + ".kernel");
    restore(model.seg_biases_[i], "seg" + std::to_string(i) + ".bias");
  }
  return model;
}

}  // namespace episeg
