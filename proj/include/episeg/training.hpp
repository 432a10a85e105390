#pragma once

// Episodic SGD training for the two-branch model.
//
// Each iteration samples one episode (a support/query pair of the same
// class), conditions the pixel classifier on the masked support, scores the
// query at feature resolution against an area-majority downsampled target,
// and applies one momentum-SGD step to every trainable parameter. Progress
// is validated on a fixed set of episodes drawn once up front.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "episeg/dataset.hpp"
#include "episeg/model.hpp"
#include "episeg/tensor.hpp"

namespace episeg {

struct TrainConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::int64_t iterations = 20000;
  std::int64_t eval_every = 1000;  // validation/checkpoint cadence; 0 = only at the end
  std::int64_t val_episodes = 40;  // 0 disables validation (rows report 0)
  std::uint64_t seed = 0;          // drives episode sampling and the validation draw
};

struct TrainLogRow {
  std::int64_t iteration = 0;   // 1-based; rows land on the cadence and at the end
  double loss = 0.0;            // mean per-episode loss since the previous row
  double val_mean_iou = 0.0;    // on the fixed validation episodes
  double seconds = 0.0;         // wall clock since training started
};

struct TrainResult {
  std::vector<TrainLogRow> log;
  std::int64_t iterations_run = 0;
  bool aborted = false;         // a non-finite value surfaced mid-training
  std::string abort_reason;
};

// Area-majority reduction to h x w: output pixel (i,j) covers the input
// block rows [i*H/h, (i+1)*H/h) x cols [j*W/w, (j+1)*W/w) and is foreground
// when at least half the block is. Requires 1 <= h <= H and 1 <= w <= W.
BinaryMask downsample_mask(const BinaryMask& mask, std::int64_t h, std::int64_t w);

// Mean pixel cross-entropy of the conditioned classifier on the episode's
// query, evaluated in logit space at feature resolution. The episode must
// carry exactly one support.
Tensor episode_loss(Tape& tape, const TwoBranchModel& model, const Episode& ep);

// Runs cfg.iterations episodic updates on `model`, sampling episodes of the
// listed classes from `ds`. When checkpoint_path is nonempty the model is
// saved at every log row; an abort leaves the most recent save untouched.
// When log_path is nonempty rows are appended (and flushed) to a csv as
// they are produced. on_row, if set, observes each row.
TrainResult train_model(TwoBranchModel& model, const SegDataset& ds,
                        const std::vector<int>& train_classes, const TrainConfig& cfg,
                        const std::string& checkpoint_path = {},
                        const std::string& log_path = {},
                        const std::function<void(const TrainLogRow&)>& on_row = {});

}  // namespace episeg
