#pragma once

// Command orchestration shared by the C API and the command-line tool: the
// key=value run configuration, artifact loading for every model kind, and
// one function per command that performs the whole run and leaves a
// replayable `resolved_config.txt` next to its outputs.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "episeg/baselines.hpp"
#include "episeg/metrics.hpp"
#include "episeg/model.hpp"

namespace episeg {

// Assignments in file order, one "key = value" per line. '#' starts a
// comment, blank lines are skipped, values may contain anything but a
// newline. Throws std::invalid_argument naming the offending line.
using KeyValues = std::vector<std::pair<std::string, std::string>>;
KeyValues parse_key_values(const std::string& text);

// Configuration after merging defaults <- file <- overrides (later wins).
// Keys outside the default set are rejected, so a typo cannot silently fall
// back to a default. The resolved text is accepted back by parse_key_values,
// which is what makes runs replayable.
class RunConfig {
 public:
  RunConfig(std::map<std::string, std::string> defaults, const KeyValues& file_values,
            const KeyValues& overrides);

  const std::string& str(const std::string& key) const;
  std::int64_t integer(const std::string& key) const;    // full-string parse
  double real(const std::string& key) const;
  std::uint64_t seed(const std::string& key) const;

  bool explicitly_set(const std::string& key) const;
  // Pins the final value of a key (used for computed defaults); the key must
  // already exist.
  void pin(const std::string& key, const std::string& value);
  // Removes a key that does not apply to the chosen mode, so the resolved
  // text lists exactly the knobs the run used and replays without rejection.
  void drop(const std::string& key);

  std::string resolved_text() const;  // sorted "key = value" lines

 private:
  std::map<std::string, std::string> values_;
  std::map<std::string, bool> explicit_;
};

// What a command run hands back to its caller: the text a CLI would print,
// plus the resolved configuration (already written to disk by the run).
struct CommandResult {
  std::string output;
  std::string resolved_config;
};

// A loaded checkpoint of whichever model family the file holds.
struct AnyModel {
  std::string kind;  // "ours" | "basenet" | "siamese"
  std::optional<TwoBranchModel> ours;
  std::optional<BaseFeatureNet> basenet;
  std::optional<SiameseMatcher> siamese;
};
AnyModel load_any_model(const std::string& path);

// Episode -> mask closure for a predictor name. "ours" needs an "ours"
// model; "nn1"/"logreg"/"finetune" need a "basenet"; "siamese" needs a
// "siamese"; "oracle-gt" ignores the model (pass nullptr). Unknown names and
// kind mismatches throw std::invalid_argument listing what is valid.
PredictFn make_predictor(const std::string& name, const AnyModel* model);

// gen: synthesize a dataset into out_dir (catalog.txt, images/, labels/).
// Keys: classes(10) images(600) size(64) seed(7) classes_per_fold(2).
CommandResult run_gen(const std::string& out_dir, const KeyValues& file_values,
                      const KeyValues& overrides);

// train: fit one model on the training view of a fold; writes model.ck,
// train_log.csv and resolved_config.txt into out_dir. Keys: target(ours)
// fold(0) classes_per_fold(2) learning_rate(0.01) momentum(0.9)
// iterations(auto: 20000 ours / 2000 others) eval_every(1000)
// val_episodes(40) sample_fraction(0.5, siamese only) seed(0).
CommandResult run_train(const std::string& data_dir, const std::string& out_dir,
                        const KeyValues& file_values, const KeyValues& overrides);

// eval: score one predictor on a fresh test-fold benchmark; writes
// report.csv and resolved_config.txt into out_dir (and masks/ when
// dump_masks=1). Keys: model("") baseline("") oracle("") fold(0)
// classes_per_fold(2) k(1) n(1000) seed(0) threads(1) dump_masks(0).
CommandResult run_eval(const std::string& data_dir, const std::string& out_dir,
                       const KeyValues& file_values, const KeyValues& overrides);

// time: per-episode wall clock for every predictor at each k; writes
// timing.csv and resolved_config.txt into out_dir. Keys: model basenet
// siamese (all required) fold(0) classes_per_fold(2) k("1,5") n(20)
// repeats(3) seed(0).
CommandResult run_time(const std::string& data_dir, const std::string& out_dir,
                       const KeyValues& file_values, const KeyValues& overrides);

}  // namespace episeg
