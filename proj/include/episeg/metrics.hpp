#pragma once

// Intersection-over-union scoring for episodic benchmarks.
//
// Counts are pooled per class across every episode of the run (a single
// tp/fp/fn triple per class), each class then contributes tp/(tp+fp+fn),
// and the final score is the unweighted mean over classes whose
// denominator is nonzero. Classes that never show a foreground pixel on
// either side are excluded from the mean and flagged instead of silently
// scoring 0 or 1.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "episeg/dataset.hpp"

namespace episeg {

struct ClassCounts {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
  std::int64_t episodes = 0;  // how many episodes fed this class
};

// Pools pixel counts per class id. Merging two accumulators adds their
// counts, so a benchmark can be split across threads and combined without
// changing the result.
struct IoUAccumulator {
  std::map<int, ClassCounts> per_class;

  // pred and truth must have identical dimensions.
  void add(int class_id, const BinaryMask& pred, const BinaryMask& truth);
  void merge(const IoUAccumulator& other);
};

struct ClassIoU {
  int class_id = 0;
  ClassCounts counts;
  double iou = 0.0;      // meaningless when !defined
  bool defined = false;  // tp + fp + fn > 0
};

struct MeanIoUResult {
  double mean_iou = 0.0;  // unweighted mean over defined classes
  std::vector<ClassIoU> classes;          // ascending class id, all classes
  std::vector<int> undefined_classes;     // excluded from the mean
};

// Throws when not a single class has a nonzero denominator: a mean over
// nothing would have to invent a value.
MeanIoUResult finalize_iou(const IoUAccumulator& acc);

// A predictor maps an episode to a foreground mask at query resolution.
// Implementations must be safe to call concurrently from several threads.
using PredictFn = std::function<BinaryMask(const Episode&)>;

// Reference predictors used to sanity-check the metric itself.
PredictFn oracle_truth();    // returns the query's ground-truth mask
PredictFn oracle_all_fg();   // everything foreground
PredictFn oracle_all_bg();   // everything background

struct EvalReport {
  MeanIoUResult iou;
  std::int64_t episodes = 0;       // episodes in the benchmark
  std::int64_t scored = 0;         // episodes that contributed counts
  std::int64_t failed = 0;         // episodes whose prediction threw
  int k = 0;                       // supports per episode
  bool partial = false;            // scored < episodes
  std::vector<std::string> errors;           // one message per failure
  std::vector<std::pair<std::string, std::string>> config;  // echoed settings
  double seconds = 0.0;                      // wall clock; never serialized
  double mean_seconds_per_episode = 0.0;     // seconds / scored; never serialized
};

// Materializes and scores the episode keys, which must all carry the same
// number of supports. threads <= 1 runs inline; larger values split the key
// list into contiguous chunks. A prediction failure stops its worker — the
// remaining episodes of that chunk are left unscored and the report comes
// back flagged partial. On clean runs the pooled counts (and therefore the
// report) do not depend on the thread count.
EvalReport run_benchmark(const SegDataset& ds, const std::vector<EpisodeKey>& keys,
                         const PredictFn& predict, int threads = 1);

// Writes the report as key,value rows followed by a per-class table.
// Deliberately omits wall-clock time so identical runs produce identical
// bytes.
void write_report_csv(const EvalReport& report, const std::string& path);
std::string report_csv_string(const EvalReport& report);

// Seconds spent predicting `keys`, excluding the first `warmup` episodes
// (which are still executed, just not timed).
double time_predictor(const SegDataset& ds, const std::vector<EpisodeKey>& keys,
                      const PredictFn& predict, std::int64_t warmup = 0);

// Mean prediction seconds per episode, one row per predictor and one column
// per support count.
struct TimeTable {
  std::vector<int> ks;                            // column order
  std::vector<std::string> predictor_names;       // row order
  std::vector<std::vector<double>> mean_seconds;  // [row][column]
};

// For every (predictor, k) cell: one untimed warm-up pass over the episodes,
// then `repeats` timed passes averaged per episode. repeats == 0 yields an
// empty table.
TimeTable time_report(const SegDataset& ds,
                      const std::vector<std::pair<int, std::vector<EpisodeKey>>>& keys_by_k,
                      const std::vector<std::pair<std::string, PredictFn>>& predictors,
                      int repeats);

std::string time_table_csv(const TimeTable& table);

}  // namespace episeg
