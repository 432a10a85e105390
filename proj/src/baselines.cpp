#include "episeg/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "episeg/model.hpp"
#include "episeg/rng.hpp"
#include "episeg/training.hpp"

namespace episeg {

namespace {

constexpr std::uint64_t kInitStreamTag = 0x696e6974u;      // "init"
constexpr std::uint64_t kBaseTrainStreamTag = 0x62617365u;  // "base"
constexpr std::uint64_t kSiamTrainStreamTag = 0x7369616du;  // "siam"

[[noreturn]] void fail(const std::string& why) { throw std::runtime_error(why); }

void check_widths(const std::vector<int>& widths) {
  if (widths.empty()) throw std::invalid_argument("encoder: widths must be non-empty");
  for (int w : widths)
    if (w <= 0) throw std::invalid_argument("encoder: widths must be positive");
}

Tensor he_kernel(int cout, int cin, Rng& rng) {
  const double stddev = std::sqrt(2.0 / (static_cast<double>(cin) * 9.0));
  return Tensor::randn({cout, cin, 3, 3}, stddev, rng, true);
}

void check_image_tensor(const Tensor& t, const char* what) {
  if (t.rank() != 3 || t.extent(0) != 3)
    throw std::invalid_argument(std::string(what) + ": expected a [3,H,W] tensor");
  if (t.extent(1) < 4 || t.extent(2) < 4)
    throw std::invalid_argument(std::string(what) + ": input smaller than 4 pixels per side");
}

// Shared topology of every encoder here: 3x3 conv + relu per layer, 2x2
// maxpool after each of the first two layers.
Tensor encode(Tape& tape, const Tensor& image, const std::vector<Tensor>& kernels,
              const std::vector<Tensor>& biases, const char* what) {
  check_image_tensor(image, what);
  Tensor h = image;
  for (std::size_t i = 0; i < kernels.size(); ++i) {
    h = relu(tape, conv2d(tape, h, kernels[i], biases[i], 1, 1));
    if (i < 2) h = maxpool2(tape, h);
  }
  return h;
}

void restore_tensor(const Checkpoint& ck, Tensor& dst, const std::string& name) {
  Tensor src = checkpoint_tensor(ck, name);
  if (src.shape() != dst.shape())
    fail("checkpoint tensor '" + name + "' has shape " + shape_str(src.shape()) + ", expected " +
         shape_str(dst.shape()));
  std::copy(src.data().begin(), src.data().end(), dst.data().begin());
}

// Support feature pixels of an episode, pooled across all k images in order:
// contiguous per-pixel rows plus the area-majority label of each pixel.
struct PooledSupport {
  std::int64_t dim = 0;
  std::int64_t count = 0;
  std::vector<double> rows;           // count x dim, row-major
  std::vector<std::uint8_t> labels;   // count
};

template <typename FeatureFn>
PooledSupport pool_support_pixels(const Episode& ep, std::int64_t dim, FeatureFn&& features_of) {
  PooledSupport pool;
  pool.dim = dim;
  for (std::size_t s = 0; s < ep.support_images.size(); ++s) {
    const Tensor f = features_of(ep.support_images[s]);
    const std::int64_t h = f.extent(1), w = f.extent(2), hw = h * w;
    const BinaryMask lab = downsample_mask(ep.support_masks[s], h, w);
    const double* fv = f.data().data();
    const std::size_t base = pool.rows.size();
    pool.rows.resize(base + static_cast<std::size_t>(hw * dim));
    for (std::int64_t p = 0; p < hw; ++p)
      for (std::int64_t c = 0; c < dim; ++c)
        pool.rows[base + p * dim + c] = fv[c * hw + p];
    pool.labels.insert(pool.labels.end(), lab.fg.begin(), lab.fg.end());
    pool.count += hw;
  }
  return pool;
}

// Bilinear-upsample a [1,h,w] probability map to the query size and apply
// the 0.5 threshold — the same tail the two-branch model uses, so every
// predictor crosses from feature grid to pixels identically.
BinaryMask lift_probs(Tape& tape, const Tensor& probs, std::int64_t height, std::int64_t width) {
  return threshold_probs(bilinear_upsample(tape, probs, height, width));
}

BinaryMask constant_mask(std::int64_t height, std::int64_t width, std::uint8_t value) {
  BinaryMask m;
  m.height = height;
  m.width = width;
  m.fg.assign(static_cast<std::size_t>(height * width), value);
  return m;
}

}  // namespace

// ---- feature-grid label reduction -------------------------------------------

std::vector<int> downsample_labels(const LabelRaster& labels, std::int64_t h, std::int64_t w) {
  const std::int64_t H = labels.height;
  const std::int64_t W = labels.width;
  if (H <= 0 || W <= 0 || labels.class_ids.size() != static_cast<std::size_t>(H * W))
    fail("downsample_labels: raster storage does not match its dimensions");
  if (h < 1 || h > H || w < 1 || w > W)
    fail("downsample_labels: target size must satisfy 1 <= h <= H and 1 <= w <= W");

  std::vector<int> out(static_cast<std::size_t>(h * w));
  for (std::int64_t i = 0; i < h; ++i) {
    const std::int64_t r0 = i * H / h, r1 = (i + 1) * H / h;
    for (std::int64_t j = 0; j < w; ++j) {
      const std::int64_t c0 = j * W / w, c1 = (j + 1) * W / w;
      std::map<int, std::int64_t> votes;
      for (std::int64_t r = r0; r < r1; ++r)
        for (std::int64_t c = c0; c < c1; ++c) ++votes[labels.class_ids[r * W + c]];
      int winner = 0;
      std::int64_t best = -1;
      for (const auto& [id, n] : votes) {
        // Strictly-greater keeps the smallest id on ties (map iterates
        // ascending).
        if (n > best) {
          best = n;
          winner = id;
        }
      }
      out[i * w + j] = winner;
    }
  }
  return out;
}

// ---- supervised base encoder -------------------------------------------------

BaseFeatureNet::BaseFeatureNet(std::vector<int> widths, int num_labels, std::uint64_t init_seed)
    : widths_(std::move(widths)), num_labels_(num_labels) {
  check_widths(widths_);
  if (num_labels_ < 2)
    throw std::invalid_argument("base net: need background plus at least one class");
  Rng rng(derive_seed(init_seed, kInitStreamTag));
  int cin = 3;
  for (int w : widths_) {
    kernels_.push_back(he_kernel(w, cin, rng));
    biases_.push_back(Tensor::zeros({w}, true));
    cin = w;
  }
  head_kernel_ = Tensor::randn({num_labels_, feature_dim(), 1, 1}, 0.05, rng, true);
  head_bias_ = Tensor::zeros({num_labels_}, true);
}

Tensor BaseFeatureNet::features(Tape& tape, const Tensor& image) const {
  return encode(tape, image, kernels_, biases_, "base features");
}

Tensor BaseFeatureNet::label_logits(Tape& tape, const Tensor& feats) const {
  if (feats.rank() != 3 || feats.extent(0) != feature_dim())
    throw std::invalid_argument("label_logits: features do not match the architecture");
  return conv2d(tape, feats, head_kernel_, head_bias_, 1, 0);
}

std::vector<std::pair<Tensor, double>> BaseFeatureNet::trainable_params() const {
  std::vector<std::pair<Tensor, double>> out;
  for (std::size_t i = 0; i < kernels_.size(); ++i) {
    out.emplace_back(kernels_[i], 1.0);
    out.emplace_back(biases_[i], 1.0);
  }
  out.emplace_back(head_kernel_, 1.0);
  out.emplace_back(head_bias_, 1.0);
  return out;
}

std::vector<std::pair<Tensor, double>> BaseFeatureNet::tail_params(int layers) const {
  if (layers < 1 || layers > static_cast<int>(kernels_.size()))
    throw std::invalid_argument("tail_params: layer count out of range");
  std::vector<std::pair<Tensor, double>> out;
  for (std::size_t i = kernels_.size() - static_cast<std::size_t>(layers); i < kernels_.size();
       ++i) {
    out.emplace_back(kernels_[i], 1.0);
    out.emplace_back(biases_[i], 1.0);
  }
  return out;
}

BaseFeatureNet BaseFeatureNet::clone() const {
  BaseFeatureNet copy;
  copy.widths_ = widths_;
  copy.num_labels_ = num_labels_;
  for (const Tensor& k : kernels_) copy.kernels_.push_back(k.clone());
  for (const Tensor& b : biases_) copy.biases_.push_back(b.clone());
  copy.head_kernel_ = head_kernel_.clone();
  copy.head_bias_ = head_bias_.clone();
  return copy;
}

Checkpoint BaseFeatureNet::to_checkpoint(std::uint64_t run_seed) const {
  Checkpoint ck;
  ck.rng_seed = run_seed;
  ck.model_kind = "basenet";
  ck.config.emplace_back("num_labels", static_cast<double>(num_labels_));
  ck.config.emplace_back("depth", static_cast<double>(widths_.size()));
  for (std::size_t i = 0; i < widths_.size(); ++i)
    ck.config.emplace_back("width_" + std::to_string(i), static_cast<double>(widths_[i]));
  for (std::size_t i = 0; i < kernels_.size(); ++i) {
    ck.tensors.emplace_back("enc" + std::to_string(i) + ".kernel", kernels_[i]);
    ck.tensors.emplace_back("enc" + std::to_string(i) + ".bias", biases_[i]);
  }
  ck.tensors.emplace_back("head.kernel", head_kernel_);
  ck.tensors.emplace_back("head.bias", head_bias_);
  return ck;
}

BaseFeatureNet BaseFeatureNet::from_checkpoint(const Checkpoint& ck) {
  if (ck.model_kind != "basenet")
    fail("base net: checkpoint holds a '" + ck.model_kind + "' model, not a base encoder");
  std::vector<int> widths;
  const int depth = static_cast<int>(checkpoint_config(ck, "depth"));
  for (int i = 0; i < depth; ++i)
    widths.push_back(static_cast<int>(checkpoint_config(ck, "width_" + std::to_string(i))));
  BaseFeatureNet net(widths, static_cast<int>(checkpoint_config(ck, "num_labels")),
                     /*init_seed=*/0);
  for (std::size_t i = 0; i < net.kernels_.size(); ++i) {
    restore_tensor(ck, net.kernels_[i], "enc" + std::to_string(i) + ".kernel");
    restore_tensor(ck, net.biases_[i], "enc" + std::to_string(i) + ".bias");
  }
  restore_tensor(ck, net.head_kernel_, "head.kernel");
  restore_tensor(ck, net.head_bias_, "head.bias");
  return net;
}

BaseFeatureNet train_base_classifier(const SegDataset& ds, const std::vector<int>& train_classes,
                                     const BaseTrainConfig& cfg) {
  if (train_classes.empty())
    throw std::invalid_argument("train_base_classifier: no training classes");
  if (!(cfg.learning_rate > 0.0))
    throw std::invalid_argument("train_base_classifier: learning_rate must be positive");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0))
    throw std::invalid_argument("train_base_classifier: momentum must lie in [0, 1)");
  if (cfg.iterations < 0)
    throw std::invalid_argument("train_base_classifier: iterations must be non-negative");
  if (ds.images.empty()) throw std::invalid_argument("train_base_classifier: empty dataset");

  std::vector<int> sorted = train_classes;
  std::sort(sorted.begin(), sorted.end());
  std::map<int, int> channel;  // class id -> head channel
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (sorted[i] <= 0 || (i > 0 && sorted[i] == sorted[i - 1]))
      throw std::invalid_argument("train_base_classifier: class list must be positive and unique");
    channel[sorted[i]] = static_cast<int>(i) + 1;
  }

  BaseFeatureNet net(cfg.widths, static_cast<int>(sorted.size()) + 1, cfg.seed);
  Rng rng(derive_seed(cfg.seed, kBaseTrainStreamTag));
  SgdState sgd = make_sgd(net.trainable_params(), cfg.learning_rate, cfg.momentum);

  for (std::int64_t iter = 0; iter < cfg.iterations; ++iter) {
    const std::size_t idx =
        static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(ds.images.size())));
    Tape tape;
    const Tensor feats = net.features(tape, to_input_tensor(ds.images[idx]));
    const std::vector<int> cells =
        downsample_labels(ds.labels[idx], feats.extent(1), feats.extent(2));
    std::vector<int> targets(cells.size());
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (cells[i] == 0) {
        targets[i] = 0;
      } else {
        const auto it = channel.find(cells[i]);
        if (it == channel.end())
          fail("train_base_classifier: label " + std::to_string(cells[i]) +
               " is not a training class — dataset not remapped?");
        targets[i] = it->second;
      }
    }
    const Tensor loss = softmax_xent_mean(tape, net.label_logits(tape, feats), targets);
    tape.backward(loss);
    sgd_step(sgd);
  }
  return net;
}

// ---- 1-nearest-neighbor --------------------------------------------------------

BinaryMask nn1_predict(const BaseFeatureNet& net, const Episode& ep) {
  Tape tape(false);
  const Tensor qf = net.features(tape, to_input_tensor(ep.query_image));
  const std::int64_t dim = qf.extent(0), qh = qf.extent(1), qw = qf.extent(2), qhw = qh * qw;
  const PooledSupport pool = pool_support_pixels(
      ep, dim, [&](const SegImage& im) { return net.features(tape, to_input_tensor(im)); });

  const double* qv = qf.data().data();
  std::vector<double> fg(static_cast<std::size_t>(qhw));
  for (std::int64_t p = 0; p < qhw; ++p) {
    double best = std::numeric_limits<double>::infinity();
    std::uint8_t label = 0;
    for (std::int64_t j = 0; j < pool.count; ++j) {
      const double* row = pool.rows.data() + j * dim;
      double d2 = 0.0;
      for (std::int64_t c = 0; c < dim; ++c) {
        const double diff = qv[c * qhw + p] - row[c];
        d2 += diff * diff;
      }
      // Strictly-less keeps the lowest pooled index on exact ties.
      if (d2 < best) {
        best = d2;
        label = pool.labels[j];
      }
    }
    fg[static_cast<std::size_t>(p)] = label ? 1.0 : 0.0;
  }
  const Tensor probs = Tensor::from_data({1, qh, qw}, std::move(fg));
  return lift_probs(tape, probs, ep.query_image.height, ep.query_image.width);
}

// ---- logistic regression -------------------------------------------------------

namespace {

double stable_softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

double logistic_objective(const std::vector<double>& x, std::int64_t n, std::int64_t d,
                          const std::vector<std::uint8_t>& y, double reg,
                          const std::vector<double>& w, double b) {
  double loss = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    double z = b;
    const double* row = x.data() + i * d;
    for (std::int64_t c = 0; c < d; ++c) z += w[c] * row[c];
    loss += stable_softplus(z) - (y[i] ? z : 0.0);
  }
  loss /= static_cast<double>(n);
  double wsq = 0.0;
  for (double v : w) wsq += v * v;
  return loss + 0.5 * reg * wsq;
}

// In-place Cholesky solve of A t = rhs for symmetric positive definite A
// (m x m row-major). Returns false when a pivot fails.
bool cholesky_solve(std::vector<double> a, std::int64_t m, std::vector<double> rhs,
                    std::vector<double>& out) {
  for (std::int64_t k = 0; k < m; ++k) {
    double pivot = a[k * m + k];
    for (std::int64_t j = 0; j < k; ++j) pivot -= a[k * m + j] * a[k * m + j];
    if (!(pivot > 0.0)) return false;
    const double lkk = std::sqrt(pivot);
    a[k * m + k] = lkk;
    for (std::int64_t i = k + 1; i < m; ++i) {
      double v = a[i * m + k];
      for (std::int64_t j = 0; j < k; ++j) v -= a[i * m + j] * a[k * m + j];
      a[i * m + k] = v / lkk;
    }
  }
  for (std::int64_t i = 0; i < m; ++i) {  // L z = rhs
    double v = rhs[i];
    for (std::int64_t j = 0; j < i; ++j) v -= a[i * m + j] * rhs[j];
    rhs[i] = v / a[i * m + i];
  }
  out.assign(static_cast<std::size_t>(m), 0.0);
  for (std::int64_t i = m - 1; i >= 0; --i) {  // L^T out = z
    double v = rhs[i];
    for (std::int64_t j = i + 1; j < m; ++j) v -= a[j * m + i] * out[j];
    out[i] = v / a[i * m + i];
  }
  return true;
}

}  // namespace

LogregFit fit_logistic(const std::vector<double>& x, std::int64_t n, std::int64_t d,
                       const std::vector<std::uint8_t>& y, double reg, int max_iters) {
  if (n <= 0 || d <= 0) throw std::invalid_argument("fit_logistic: need n > 0 and d > 0");
  if (x.size() != static_cast<std::size_t>(n * d) || y.size() != static_cast<std::size_t>(n))
    throw std::invalid_argument("fit_logistic: data sizes disagree with n and d");
  if (!(reg >= 0.0)) throw std::invalid_argument("fit_logistic: reg must be non-negative");
  if (max_iters < 1) throw std::invalid_argument("fit_logistic: max_iters must be positive");

  const std::int64_t m = d + 1;  // parameters: w then b
  std::vector<double> w(static_cast<std::size_t>(d), 0.0);
  double b = 0.0;
  std::vector<double> grad(static_cast<std::size_t>(m));
  std::vector<double> hess(static_cast<std::size_t>(m * m));
  std::vector<double> step;
  const double tol = 1e-10;

  for (int iter = 0; iter < max_iters; ++iter) {
    std::fill(grad.begin(), grad.end(), 0.0);
    std::fill(hess.begin(), hess.end(), 0.0);
    for (std::int64_t i = 0; i < n; ++i) {
      const double* row = x.data() + i * d;
      double z = b;
      for (std::int64_t c = 0; c < d; ++c) z += w[c] * row[c];
      const double p = 1.0 / (1.0 + std::exp(-z));
      const double r = p - (y[i] ? 1.0 : 0.0);
      const double s = p * (1.0 - p);
      for (std::int64_t c = 0; c < d; ++c) grad[c] += r * row[c];
      grad[d] += r;
      for (std::int64_t a_ = 0; a_ < d; ++a_) {
        const double sa = s * row[a_];
        for (std::int64_t c = a_; c < d; ++c) hess[a_ * m + c] += sa * row[c];
        hess[a_ * m + d] += sa;
      }
      hess[d * m + d] += s;
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    double gmax = 0.0;
    for (std::int64_t c = 0; c < m; ++c) {
      grad[c] *= inv_n;
      if (c < d) grad[c] += reg * w[c];
      gmax = std::max(gmax, std::abs(grad[c]));
    }
    if (gmax < tol) return {std::move(w), b, iter};

    for (std::int64_t a_ = 0; a_ < m; ++a_)
      for (std::int64_t c = a_; c < m; ++c) {
        double v = hess[a_ * m + c] * inv_n;
        if (a_ == c && a_ < d) v += reg;
        hess[a_ * m + c] = v;
        hess[c * m + a_] = v;
      }

    std::vector<double> rhs(grad);
    for (double& v : rhs) v = -v;
    double damping = 0.0;
    std::vector<double> damped;
    for (int attempt = 0;; ++attempt) {
      if (attempt > 20) fail("fit_logistic: Hessian never became positive definite");
      damped = hess;
      if (damping > 0.0)
        for (std::int64_t c = 0; c < m; ++c) damped[c * m + c] += damping;
      if (cholesky_solve(std::move(damped), m, rhs, step)) break;
      damping = damping == 0.0 ? 1e-8 : damping * 10.0;
    }

    // Backtrack until the objective stops getting worse; Newton steps on a
    // logistic loss occasionally overshoot when probabilities saturate. The
    // few-ulp slack matters: near the optimum the exact Newton step can raise
    // the objective by one rounding error while still shrinking the gradient.
    const double before = logistic_objective(x, n, d, y, reg, w, b);
    const double slack = 1e-14 * (1.0 + std::abs(before));
    double t = 1.0;
    for (int halvings = 0; halvings < 60; ++halvings, t *= 0.5) {
      std::vector<double> w2(w);
      for (std::int64_t c = 0; c < d; ++c) w2[c] += t * step[c];
      const double b2 = b + t * step[d];
      if (logistic_objective(x, n, d, y, reg, w2, b2) <= before + slack) {
        w = std::move(w2);
        b = b2;
        break;
      }
      if (halvings == 59) fail("fit_logistic: line search failed to improve the objective");
    }
  }
  fail("fit_logistic: gradient did not vanish within the iteration cap");
}

BinaryMask logreg_predict(const BaseFeatureNet& net, const Episode& ep, double reg,
                          int max_iters) {
  Tape tape(false);
  const Tensor qf = net.features(tape, to_input_tensor(ep.query_image));
  const std::int64_t dim = qf.extent(0), qh = qf.extent(1), qw = qf.extent(2), qhw = qh * qw;
  const PooledSupport pool = pool_support_pixels(
      ep, dim, [&](const SegImage& im) { return net.features(tape, to_input_tensor(im)); });

  bool any_fg = false, any_bg = false;
  for (std::uint8_t v : pool.labels) (v ? any_fg : any_bg) = true;
  if (!any_fg || !any_bg) {
    // One-class support: nothing to separate, predict the class we saw.
    return constant_mask(ep.query_image.height, ep.query_image.width, any_fg ? 1 : 0);
  }

  const LogregFit fit = fit_logistic(pool.rows, pool.count, dim, pool.labels, reg, max_iters);

  const double* qv = qf.data().data();
  std::vector<double> probs(static_cast<std::size_t>(qhw));
  for (std::int64_t p = 0; p < qhw; ++p) {
    double z = fit.b;
    for (std::int64_t c = 0; c < dim; ++c) z += fit.w[c] * qv[c * qhw + p];
    probs[static_cast<std::size_t>(p)] = 1.0 / (1.0 + std::exp(-z));
  }
  const Tensor pmap = Tensor::from_data({1, qh, qw}, std::move(probs));
  return lift_probs(tape, pmap, ep.query_image.height, ep.query_image.width);
}

// ---- per-episode fine-tuning ----------------------------------------------------

BinaryMask finetune_predict(const BaseFeatureNet& net, const Episode& ep, int steps, double lr,
                            std::vector<double>* loss_trace) {
  if (steps < 0) throw std::invalid_argument("finetune_predict: steps must be non-negative");
  if (!(lr > 0.0)) throw std::invalid_argument("finetune_predict: lr must be positive");

  BaseFeatureNet local = net.clone();
  const std::int64_t dim = local.feature_dim();
  Tensor head_w = Tensor::zeros({1, dim, 1, 1}, true);
  Tensor head_b = Tensor::zeros({1}, true);

  auto params = local.tail_params(std::min<int>(2, static_cast<int>(net.trainable_params().size() / 2)));
  params.emplace_back(head_w, 1.0);
  params.emplace_back(head_b, 1.0);
  SgdState sgd = make_sgd(params, lr, 0.0);  // plain full-batch gradient steps

  // Per-support pixel targets at feature resolution, fixed across steps.
  std::vector<Tensor> support_inputs;
  std::vector<double> target_values;
  {
    Tape probe(false);
    for (std::size_t s = 0; s < ep.support_images.size(); ++s) {
      support_inputs.push_back(to_input_tensor(ep.support_images[s]));
      const Tensor f = local.features(probe, support_inputs.back());
      const BinaryMask lab = downsample_mask(ep.support_masks[s], f.extent(1), f.extent(2));
      for (std::uint8_t v : lab.fg) target_values.push_back(v ? 1.0 : 0.0);
    }
  }
  const std::int64_t total = static_cast<std::int64_t>(target_values.size());
  const Tensor target = Tensor::from_data({1, 1, total}, std::move(target_values));

  auto support_columns = [&](Tape& tape) {
    std::vector<Tensor> parts;
    for (const Tensor& input : support_inputs) {
      const Tensor f = local.features(tape, input);
      const std::int64_t h = f.extent(1), w = f.extent(2);
      std::vector<std::pair<std::int64_t, std::int64_t>> all;
      all.reserve(static_cast<std::size_t>(h * w));
      for (std::int64_t r = 0; r < h; ++r)
        for (std::int64_t c = 0; c < w; ++c) all.emplace_back(r, c);
      parts.push_back(gather_columns(tape, f, all));
    }
    return parts.size() == 1 ? parts[0] : concat_columns(tape, parts);
  };

  for (int step = 0; step < steps; ++step) {
    Tape tape;
    const Tensor cols = batchnorm_columns(tape, support_columns(tape));
    const Tensor as_row = reshape(tape, cols, {dim, 1, total});
    const Tensor logits = conv2d(tape, as_row, head_w, head_b, 1, 0);
    const Tensor probs = sigmoid(tape, logits);
    const Tensor loss =
        scale(tape, bce_loss_sum(tape, probs, target), 1.0 / static_cast<double>(total));
    if (loss_trace) loss_trace->push_back(loss.item());
    tape.backward(loss);
    sgd_step(sgd);
  }

  // Freeze the support statistics and classify the query with them, the way
  // a batchnorm layer runs in inference mode.
  Tape tape(false);
  const Tensor final_cols = support_columns(tape);
  std::vector<double> mean(static_cast<std::size_t>(dim), 0.0);
  std::vector<double> var(static_cast<std::size_t>(dim), 0.0);
  {
    const double* cv = final_cols.data().data();
    for (std::int64_t c = 0; c < dim; ++c) {
      double m = 0.0;
      for (std::int64_t p = 0; p < total; ++p) m += cv[c * total + p];
      m /= static_cast<double>(total);
      double v = 0.0;
      for (std::int64_t p = 0; p < total; ++p) {
        const double diff = cv[c * total + p] - m;
        v += diff * diff;
      }
      mean[static_cast<std::size_t>(c)] = m;
      var[static_cast<std::size_t>(c)] = v / static_cast<double>(total);
    }
  }

  const Tensor qf = local.features(tape, to_input_tensor(ep.query_image));
  const std::int64_t qh = qf.extent(1), qw = qf.extent(2), qhw = qh * qw;
  const double* qv = qf.data().data();
  const double* hw_ = head_w.data().data();
  const double hb = head_b.data()[0];
  std::vector<double> probs(static_cast<std::size_t>(qhw));
  for (std::int64_t p = 0; p < qhw; ++p) {
    double z = hb;
    for (std::int64_t c = 0; c < dim; ++c) {
      const double normalized =
          (qv[c * qhw + p] - mean[static_cast<std::size_t>(c)]) /
          std::sqrt(var[static_cast<std::size_t>(c)] + 1e-8);
      z += hw_[c] * normalized;
    }
    probs[static_cast<std::size_t>(p)] = 1.0 / (1.0 + std::exp(-z));
  }
  const Tensor pmap = Tensor::from_data({1, qh, qw}, std::move(probs));
  return lift_probs(tape, pmap, ep.query_image.height, ep.query_image.width);
}

// ---- siamese matcher -------------------------------------------------------------

SiameseMatcher::SiameseMatcher(std::vector<int> widths, std::uint64_t init_seed)
    : widths_(std::move(widths)) {
  check_widths(widths_);
  Rng rng(derive_seed(init_seed, kInitStreamTag));
  int cin = 3;
  for (int w : widths_) {
    kernels_.push_back(he_kernel(w, cin, rng));
    biases_.push_back(Tensor::zeros({w}, true));
    cin = w;
  }
  alpha_ = Tensor::full({feature_dim()}, -1.0 / static_cast<double>(feature_dim()), true);
  beta_ = Tensor::zeros({1}, true);
}

Tensor SiameseMatcher::features(Tape& tape, const Tensor& image) const {
  return encode(tape, image, kernels_, biases_, "siamese features");
}

std::vector<std::pair<Tensor, double>> SiameseMatcher::trainable_params() const {
  std::vector<std::pair<Tensor, double>> out;
  for (std::size_t i = 0; i < kernels_.size(); ++i) {
    out.emplace_back(kernels_[i], 1.0);
    out.emplace_back(biases_[i], 1.0);
  }
  out.emplace_back(alpha_, 1.0);
  out.emplace_back(beta_, 1.0);
  return out;
}

BinaryMask SiameseMatcher::predict(const Episode& ep) const {
  Tape tape(false);
  const Tensor qf = features(tape, to_input_tensor(ep.query_image));
  const std::int64_t dim = qf.extent(0), qh = qf.extent(1), qw = qf.extent(2), qhw = qh * qw;
  const PooledSupport pool = pool_support_pixels(
      ep, dim, [&](const SegImage& im) { return features(tape, to_input_tensor(im)); });

  // sigmoid and the +beta shift are monotone, so ranking the weighted L1
  // distances ranks the similarities.
  const double* av = alpha_.data().data();
  const double* qv = qf.data().data();
  std::vector<double> fg(static_cast<std::size_t>(qhw));
  for (std::int64_t p = 0; p < qhw; ++p) {
    double best = -std::numeric_limits<double>::infinity();
    std::uint8_t label = 0;
    for (std::int64_t j = 0; j < pool.count; ++j) {
      const double* row = pool.rows.data() + j * dim;
      double logit = 0.0;
      for (std::int64_t c = 0; c < dim; ++c) logit += av[c] * std::abs(qv[c * qhw + p] - row[c]);
      // Strictly-greater keeps the lowest pooled index on exact ties.
      if (logit > best) {
        best = logit;
        label = pool.labels[j];
      }
    }
    fg[static_cast<std::size_t>(p)] = label ? 1.0 : 0.0;
  }
  const Tensor probs = Tensor::from_data({1, qh, qw}, std::move(fg));
  return lift_probs(tape, probs, ep.query_image.height, ep.query_image.width);
}

Checkpoint SiameseMatcher::to_checkpoint(std::uint64_t run_seed) const {
  Checkpoint ck;
  ck.rng_seed = run_seed;
  ck.model_kind = "siamese";
  ck.config.emplace_back("depth", static_cast<double>(widths_.size()));
  for (std::size_t i = 0; i < widths_.size(); ++i)
    ck.config.emplace_back("width_" + std::to_string(i), static_cast<double>(widths_[i]));
  for (std::size_t i = 0; i < kernels_.size(); ++i) {
    ck.tensors.emplace_back("enc" + std::to_string(i) + ".kernel", kernels_[i]);
    ck.tensors.emplace_back("enc" + std::to_string(i) + ".bias", biases_[i]);
  }
  ck.tensors.emplace_back("alpha", alpha_);
  ck.tensors.emplace_back("beta", beta_);
  return ck;
}

SiameseMatcher SiameseMatcher::from_checkpoint(const Checkpoint& ck) {
  if (ck.model_kind != "siamese")
    fail("siamese: checkpoint holds a '" + ck.model_kind + "' model, not a matcher");
  std::vector<int> widths;
  const int depth = static_cast<int>(checkpoint_config(ck, "depth"));
  for (int i = 0; i < depth; ++i)
    widths.push_back(static_cast<int>(checkpoint_config(ck, "width_" + std::to_string(i))));
  SiameseMatcher m(widths, /*init_seed=*/0);
  for (std::size_t i = 0; i < m.kernels_.size(); ++i) {
    restore_tensor(ck, m.kernels_[i], "enc" + std::to_string(i) + ".kernel");
    restore_tensor(ck, m.biases_[i], "enc" + std::to_string(i) + ".bias");
  }
  restore_tensor(ck, m.alpha_, "alpha");
  restore_tensor(ck, m.beta_, "beta");
  return m;
}

namespace {

std::vector<std::pair<std::int64_t, std::int64_t>> sample_positions(std::int64_t h, std::int64_t w,
                                                                    double fraction, Rng& rng) {
  const std::int64_t total = h * w;
  std::int64_t count = static_cast<std::int64_t>(std::llround(fraction * static_cast<double>(total)));
  count = std::clamp<std::int64_t>(count, 1, total);
  std::vector<std::int64_t> pixels(static_cast<std::size_t>(total));
  for (std::int64_t i = 0; i < total; ++i) pixels[static_cast<std::size_t>(i)] = i;
  std::vector<std::pair<std::int64_t, std::int64_t>> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    const std::int64_t j =
        i + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(total - i)));
    std::swap(pixels[static_cast<std::size_t>(i)], pixels[static_cast<std::size_t>(j)]);
    out.emplace_back(pixels[static_cast<std::size_t>(i)] / w, pixels[static_cast<std::size_t>(i)] % w);
  }
  return out;
}

}  // namespace

SiameseMatcher siamese_train(const SegDataset& ds, const std::vector<int>& train_classes,
                             const SiameseConfig& cfg) {
  if (train_classes.empty()) throw std::invalid_argument("siamese_train: no training classes");
  if (!(cfg.learning_rate > 0.0))
    throw std::invalid_argument("siamese_train: learning_rate must be positive");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0))
    throw std::invalid_argument("siamese_train: momentum must lie in [0, 1)");
  if (cfg.iterations < 0)
    throw std::invalid_argument("siamese_train: iterations must be non-negative");
  if (!(cfg.sample_fraction > 0.0 && cfg.sample_fraction <= 1.0))
    throw std::invalid_argument("siamese_train: sample_fraction must lie in (0, 1]");

  SiameseMatcher m(cfg.widths, cfg.seed);
  Rng rng(derive_seed(cfg.seed, kSiamTrainStreamTag));
  SgdState sgd = make_sgd(m.trainable_params(), cfg.learning_rate, cfg.momentum);

  for (std::int64_t iter = 0; iter < cfg.iterations; ++iter) {
    // A k=1 episode is exactly an image pair sharing a class.
    const Episode pair = sample_episode(ds, train_classes, 1, rng);
    Tape tape;
    const Tensor fa = m.features(tape, to_input_tensor(pair.support_images[0]));
    const Tensor fb = m.features(tape, to_input_tensor(pair.query_image));
    const BinaryMask la = downsample_mask(pair.support_masks[0], fa.extent(1), fa.extent(2));
    const BinaryMask lb = downsample_mask(pair.query_mask, fb.extent(1), fb.extent(2));

    const auto pos_a = sample_positions(fa.extent(1), fa.extent(2), cfg.sample_fraction, rng);
    const auto pos_b = sample_positions(fb.extent(1), fb.extent(2), cfg.sample_fraction, rng);
    const Tensor ca = gather_columns(tape, fa, pos_a);
    const Tensor cb = gather_columns(tape, fb, pos_b);

    std::vector<std::uint8_t> same;
    same.reserve(pos_a.size() * pos_b.size());
    for (const auto& [ra, caa] : pos_a) {
      const std::uint8_t va = la.fg[ra * la.width + caa];
      for (const auto& [rb, cbb] : pos_b)
        same.push_back(va == lb.fg[rb * lb.width + cbb] ? 1 : 0);
    }

    const Tensor loss = l1_similarity_bce(tape, ca, cb, m.alpha(), m.beta(), same);
    tape.backward(loss);
    sgd_step(sgd);
  }
  return m;
}

}  // namespace episeg
