#include "episeg/metrics.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace episeg {

namespace {

[[noreturn]] void fail(const std::string& why) { throw std::runtime_error(why); }

// Shortest-round-trip style formatting would be ideal, but 17 significant
// digits also reconstructs any double exactly and keeps output portable.
std::string fmt_double(double v) {
  std::ostringstream out;
  out << std::setprecision(17) << v;
  return out.str();
}

}  // namespace

void IoUAccumulator::add(int class_id, const BinaryMask& pred, const BinaryMask& truth) {
  if (pred.height != truth.height || pred.width != truth.width)
    fail("IoUAccumulator::add: prediction and truth dimensions differ");
  if (pred.fg.size() != static_cast<std::size_t>(pred.height * pred.width))
    fail("IoUAccumulator::add: mask storage does not match its dimensions");
  ClassCounts& c = per_class[class_id];
  ++c.episodes;
  for (std::size_t i = 0; i < pred.fg.size(); ++i) {
    const bool p = pred.fg[i] != 0;
    const bool t = truth.fg[i] != 0;
    if (p && t)
      ++c.tp;
    else if (p && !t)
      ++c.fp;
    else if (!p && t)
      ++c.fn;
  }
}

void IoUAccumulator::merge(const IoUAccumulator& other) {
  for (const auto& [class_id, counts] : other.per_class) {
    ClassCounts& c = per_class[class_id];
    c.tp += counts.tp;
    c.fp += counts.fp;
    c.fn += counts.fn;
    c.episodes += counts.episodes;
  }
}

MeanIoUResult finalize_iou(const IoUAccumulator& acc) {
  MeanIoUResult result;
  double sum = 0.0;
  std::int64_t defined = 0;
  for (const auto& [class_id, counts] : acc.per_class) {
    ClassIoU entry;
    entry.class_id = class_id;
    entry.counts = counts;
    const std::int64_t denom = counts.tp + counts.fp + counts.fn;
    entry.defined = denom > 0;
    if (entry.defined) {
      entry.iou = static_cast<double>(counts.tp) / static_cast<double>(denom);
      sum += entry.iou;
      ++defined;
    } else {
      result.undefined_classes.push_back(class_id);
    }
    result.classes.push_back(entry);
  }
  if (defined == 0) fail("finalize_iou: every class has a zero denominator");
  result.mean_iou = sum / static_cast<double>(defined);
  return result;
}

PredictFn oracle_truth() {
  return [](const Episode& ep) { return ep.query_mask; };
}

PredictFn oracle_all_fg() {
  return [](const Episode& ep) {
    BinaryMask m;
    m.height = ep.query_mask.height;
    m.width = ep.query_mask.width;
    m.fg.assign(static_cast<std::size_t>(m.height * m.width), 1);
    return m;
  };
}

PredictFn oracle_all_bg() {
  return [](const Episode& ep) {
    BinaryMask m;
    m.height = ep.query_mask.height;
    m.width = ep.query_mask.width;
    m.fg.assign(static_cast<std::size_t>(m.height * m.width), 0);
    return m;
  };
}

namespace {

struct ChunkResult {
  IoUAccumulator acc;
  std::int64_t scored = 0;
  std::int64_t failed = 0;
  std::vector<std::string> errors;
};

// Stops at the first failure: everything after it in the chunk stays
// unscored and the overall report is flagged partial.
void score_range(const SegDataset& ds, const std::vector<EpisodeKey>& keys, std::size_t begin,
                 std::size_t end, const PredictFn& predict, ChunkResult& out) {
  for (std::size_t i = begin; i < end; ++i) {
    try {
      const Episode ep = materialize_episode(ds, keys[i]);
      const BinaryMask pred = predict(ep);
      out.acc.add(keys[i].class_id, pred, ep.query_mask);
      ++out.scored;
    } catch (const std::exception& e) {
      ++out.failed;
      out.errors.push_back("episode " + std::to_string(i) + ": " + e.what());
      return;
    }
  }
}

}  // namespace

EvalReport run_benchmark(const SegDataset& ds, const std::vector<EpisodeKey>& keys,
                         const PredictFn& predict, int threads) {
  if (!predict) fail("run_benchmark: predictor is empty");
  if (threads < 1) threads = 1;

  EvalReport report;
  report.episodes = static_cast<std::int64_t>(keys.size());
  if (!keys.empty()) {
    const std::size_t k0 = keys.front().support_indices.size();
    for (const EpisodeKey& key : keys)
      if (key.support_indices.size() != k0)
        fail("run_benchmark: all episodes must carry the same number of supports");
    report.k = static_cast<int>(k0);
  }

  const auto start = std::chrono::steady_clock::now();
  const std::size_t n = keys.size();
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), std::max<std::size_t>(n, 1));
  std::vector<ChunkResult> chunks(workers);

  if (workers <= 1) {
    score_range(ds, keys, 0, n, predict, chunks[0]);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t begin = n * w / workers;
      const std::size_t end = n * (w + 1) / workers;
      pool.emplace_back(score_range, std::cref(ds), std::cref(keys), begin, end,
                        std::cref(predict), std::ref(chunks[w]));
    }
    for (std::thread& t : pool) t.join();
  }

  IoUAccumulator merged;
  for (const ChunkResult& chunk : chunks) {
    merged.merge(chunk.acc);
    report.scored += chunk.scored;
    report.failed += chunk.failed;
    report.errors.insert(report.errors.end(), chunk.errors.begin(), chunk.errors.end());
  }
  report.partial = report.scored < report.episodes;
  bool any_defined = false;
  for (const auto& [class_id, counts] : merged.per_class)
    any_defined = any_defined || counts.tp + counts.fp + counts.fn > 0;
  if (any_defined) {
    report.iou = finalize_iou(merged);
  } else {
    // Nothing scored a single foreground pixel (e.g. every episode failed);
    // keep the counts visible but report no mean.
    for (const auto& [class_id, counts] : merged.per_class) {
      ClassIoU entry;
      entry.class_id = class_id;
      entry.counts = counts;
      report.iou.classes.push_back(entry);
      report.iou.undefined_classes.push_back(class_id);
    }
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  report.mean_seconds_per_episode =
      report.scored > 0 ? report.seconds / static_cast<double>(report.scored) : 0.0;
  return report;
}

std::string report_csv_string(const EvalReport& report) {
  std::ostringstream out;
  out << "key,value\n";
  out << "episodes," << report.episodes << "\n";
  out << "scored," << report.scored << "\n";
  out << "failed," << report.failed << "\n";
  out << "k," << report.k << "\n";
  out << "partial," << (report.partial ? 1 : 0) << "\n";
  for (const auto& [key, value] : report.config) {
    if (key.find(',') != std::string::npos || key.find('\n') != std::string::npos ||
        value.find(',') != std::string::npos || value.find('\n') != std::string::npos)
      fail("report_csv_string: config entries must not contain commas or newlines");
    out << key << "," << value << "\n";
  }
  out << "mean_iou," << fmt_double(report.iou.mean_iou) << "\n";
  out << "class_id,episodes,tp,fp,fn,iou\n";
  for (const ClassIoU& c : report.iou.classes) {
    out << c.class_id << "," << c.counts.episodes << "," << c.counts.tp << "," << c.counts.fp
        << "," << c.counts.fn << ",";
    if (c.defined)
      out << fmt_double(c.iou);
    else
      out << "undefined";
    out << "\n";
  }
  return out.str();
}

void write_report_csv(const EvalReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("write_report_csv: cannot open " + path);
  const std::string body = report_csv_string(report);
  out.write(body.data(), static_cast<std::streamsize>(body.size()));
  if (!out) fail("write_report_csv: write failed for " + path);
}

double time_predictor(const SegDataset& ds, const std::vector<EpisodeKey>& keys,
                      const PredictFn& predict, std::int64_t warmup) {
  if (!predict) fail("time_predictor: predictor is empty");
  if (warmup < 0) fail("time_predictor: warmup must be non-negative");
  double seconds = 0.0;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    const Episode ep = materialize_episode(ds, keys[i]);
    const auto start = std::chrono::steady_clock::now();
    const BinaryMask pred = predict(ep);
    const auto stop = std::chrono::steady_clock::now();
    if (pred.height != ep.query_mask.height || pred.width != ep.query_mask.width)
      fail("time_predictor: prediction dimensions differ from the query");
    if (static_cast<std::int64_t>(i) >= warmup)
      seconds += std::chrono::duration<double>(stop - start).count();
  }
  return seconds;
}

TimeTable time_report(const SegDataset& ds,
                      const std::vector<std::pair<int, std::vector<EpisodeKey>>>& keys_by_k,
                      const std::vector<std::pair<std::string, PredictFn>>& predictors,
                      int repeats) {
  if (repeats < 0) fail("time_report: repeats must be non-negative");
  TimeTable table;
  if (repeats == 0) return table;
  for (const auto& [k, keys] : keys_by_k) {
    if (keys.empty()) fail("time_report: empty episode list for k=" + std::to_string(k));
    table.ks.push_back(k);
  }
  for (const auto& [name, predict] : predictors) {
    table.predictor_names.push_back(name);
    std::vector<double> row;
    for (const auto& [k, keys] : keys_by_k) {
      // Full untimed pass first so one-time costs (page faults, lazy
      // allocations) do not land in the measurement.
      time_predictor(ds, keys, predict, static_cast<std::int64_t>(keys.size()));
      double total = 0.0;
      for (int r = 0; r < repeats; ++r) total += time_predictor(ds, keys, predict, 0);
      row.push_back(total / (static_cast<double>(repeats) * static_cast<double>(keys.size())));
    }
    table.mean_seconds.push_back(std::move(row));
  }
  return table;
}

std::string time_table_csv(const TimeTable& table) {
  std::ostringstream out;
  out << "predictor";
  for (int k : table.ks) out << ",k=" << k;
  out << "\n";
  for (std::size_t r = 0; r < table.predictor_names.size(); ++r) {
    out << table.predictor_names[r];
    for (double v : table.mean_seconds[r]) out << "," << fmt_double(v);
    out << "\n";
  }
  return out.str();
}

}  // namespace episeg
