#include "episeg/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "episeg/checkpoint.hpp"
#include "episeg/metrics.hpp"
#include "episeg/rng.hpp"

namespace episeg {

namespace {

constexpr std::uint64_t kEpisodeStreamTag = 0x74726169u;  // "trai"
constexpr std::uint64_t kValStreamTag = 0x76616c00u;      // "val"

[[noreturn]] void fail(const std::string& why) { throw std::runtime_error(why); }

std::string fmt_double(double v) {
  std::ostringstream out;
  out << std::setprecision(17) << v;
  return out.str();
}

}  // namespace

BinaryMask downsample_mask(const BinaryMask& mask, std::int64_t h, std::int64_t w) {
  const std::int64_t H = mask.height;
  const std::int64_t W = mask.width;
  if (H <= 0 || W <= 0 || mask.fg.size() != static_cast<std::size_t>(H * W))
    fail("downsample_mask: mask storage does not match its dimensions");
  if (h < 1 || h > H || w < 1 || w > W)
    fail("downsample_mask: target size must satisfy 1 <= h <= H and 1 <= w <= W");

  BinaryMask out;
  out.height = h;
  out.width = w;
  out.fg.resize(static_cast<std::size_t>(h * w));
  for (std::int64_t i = 0; i < h; ++i) {
    const std::int64_t r0 = i * H / h;
    const std::int64_t r1 = (i + 1) * H / h;
    for (std::int64_t j = 0; j < w; ++j) {
      const std::int64_t c0 = j * W / w;
      const std::int64_t c1 = (j + 1) * W / w;
      std::int64_t fg_count = 0;
      for (std::int64_t r = r0; r < r1; ++r)
        for (std::int64_t c = c0; c < c1; ++c) fg_count += mask.fg[r * W + c] ? 1 : 0;
      const std::int64_t block = (r1 - r0) * (c1 - c0);
      // Foreground wins ties so thin structures survive the reduction.
      out.fg[i * w + j] = 2 * fg_count >= block ? 1 : 0;
    }
  }
  return out;
}

Tensor episode_loss(Tape& tape, const TwoBranchModel& model, const Episode& ep) {
  if (ep.k() != 1) fail("episode_loss: training episodes use exactly one support");
  const ClassifierParams cls = model.condition(tape, ep.support_images[0], ep.support_masks[0]);
  const Tensor query = to_input_tensor(ep.query_image);
  const Tensor feats = model.extract_features(tape, query);
  // Stay in logit space: a saturated sigmoid would zero the gradient exactly
  // and freeze the run, while sigmoid(z)-y keeps pulling saturated pixels back.
  const Tensor logits = model.classify_logits(tape, feats, cls);  // [1, h, w]
  const BinaryMask small = downsample_mask(ep.query_mask, logits.shape()[1], logits.shape()[2]);
  const Tensor target = to_target_tensor(small);
  return bce_with_logits_mean(tape, logits, target);
}

TrainResult train_model(TwoBranchModel& model, const SegDataset& ds,
                        const std::vector<int>& train_classes, const TrainConfig& cfg,
                        const std::string& checkpoint_path, const std::string& log_path,
                        const std::function<void(const TrainLogRow&)>& on_row) {
  if (cfg.iterations < 0)
    throw std::invalid_argument("train_model: iterations must be non-negative");
  if (!(cfg.learning_rate > 0.0))
    throw std::invalid_argument("train_model: learning_rate must be positive");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0))
    throw std::invalid_argument("train_model: momentum must lie in [0, 1)");
  if (cfg.eval_every < 0 || cfg.val_episodes < 0)
    throw std::invalid_argument("train_model: cadence and val_episodes must be non-negative");
  if (train_classes.empty()) throw std::invalid_argument("train_model: no training classes");

  std::vector<EpisodeKey> val_keys;
  if (cfg.val_episodes > 0)
    val_keys = build_benchmark(ds, train_classes, 1, cfg.val_episodes,
                               derive_seed(cfg.seed, kValStreamTag));

  std::ofstream log_file;
  if (!log_path.empty()) {
    log_file.open(log_path, std::ios::trunc);
    if (!log_file) fail("train_model: cannot open " + log_path);
    log_file << "iteration,loss,val_mean_iou,seconds\n" << std::flush;
  }

  Rng episode_rng(derive_seed(cfg.seed, kEpisodeStreamTag));
  SgdState sgd = make_sgd(model.trainable_params(), cfg.learning_rate, cfg.momentum);

  TrainResult result;
  const auto start = std::chrono::steady_clock::now();
  double window_loss = 0.0;
  std::int64_t window_count = 0;

  const auto emit_row = [&](std::int64_t iteration) {
    TrainLogRow row;
    row.iteration = iteration;
    row.loss = window_count > 0 ? window_loss / static_cast<double>(window_count) : 0.0;
    window_loss = 0.0;
    window_count = 0;
    if (!val_keys.empty()) {
      const PredictFn predict = [&model](const Episode& ep) {
        return model.predict(ep.query_image, ep.support_images, ep.support_masks);
      };
      row.val_mean_iou = run_benchmark(ds, val_keys, predict).iou.mean_iou;
    }
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!checkpoint_path.empty()) save_checkpoint(model.to_checkpoint(cfg.seed), checkpoint_path);
    if (log_file.is_open()) {
      log_file << row.iteration << ',' << fmt_double(row.loss) << ',' << fmt_double(row.val_mean_iou)
               << ',' << fmt_double(row.seconds) << "\n"
               << std::flush;
    }
    if (on_row) on_row(row);
    result.log.push_back(row);
  };

  for (std::int64_t i = 1; i <= cfg.iterations; ++i) {
    try {
      const Episode ep = sample_episode(ds, train_classes, 1, episode_rng);
      Tape tape;
      const Tensor loss = episode_loss(tape, model, ep);
      const double value = loss.item();
      if (!std::isfinite(value)) fail("non-finite loss");
      tape.backward(loss);
      sgd_step(sgd);
      window_loss += value;
      ++window_count;
    } catch (const std::exception& e) {
      // Leave the last saved checkpoint in place rather than persisting a
      // poisoned model.
      result.aborted = true;
      result.abort_reason = "iteration " + std::to_string(i) + ": " + e.what();
      return result;
    }
    result.iterations_run = i;
    const bool on_cadence = cfg.eval_every > 0 && i % cfg.eval_every == 0;
    if (on_cadence || i == cfg.iterations) emit_row(i);
  }
  // A zero-iteration run still persists the (unchanged) model.
  if (cfg.iterations == 0 && !checkpoint_path.empty())
    save_checkpoint(model.to_checkpoint(cfg.seed), checkpoint_path);
  return result;
}

}  // namespace episeg
