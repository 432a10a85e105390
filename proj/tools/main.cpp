// Command-line front end. All behavior lives behind the C API; this file
// only turns flags into override lines, reads the optional config file, and
// maps statuses onto the exit-code contract (0 ok, 1 usage, 2 runtime).

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "episeg.h"

namespace {

// One CLI flag mirrored into a config override when the user passes it.
struct MappedFlag {
  CLI::Option* option = nullptr;
  std::string key;
  const std::string* value = nullptr;
};

struct Command {
  CLI::App* sub = nullptr;
  std::string data_dir;
  std::string out_dir;
  std::string config_file;
  std::vector<MappedFlag> flags;
  // Storage for flag values; deque-like stability comes from reserving up
  // front (flags keep pointers into this vector).
  std::vector<std::string> storage;

  explicit Command(CLI::App* s) : sub(s) { storage.reserve(16); }

  void map(const std::string& flag, const std::string& key, const std::string& help) {
    storage.emplace_back();
    std::string& slot = storage.back();
    CLI::Option* opt = sub->add_option(flag, slot, help);
    flags.push_back({opt, key, &slot});
  }

  // Override lines in precedence order: EPISEG_SEED first, explicit flags
  // after it, so a --seed flag beats the environment.
  std::string overrides() const {
    std::string text;
    if (const char* env = std::getenv("EPISEG_SEED")) text += "seed = " + std::string(env) + "\n";
    for (const MappedFlag& f : flags)
      if (f.option->count() > 0) text += f.key + " = " + *f.value + "\n";
    return text;
  }
};

int finish(episeg_status status, char* output) {
  if (status == EPISEG_OK) {
    if (output) std::fputs(output, stdout);
    episeg_string_free(output);
    return 0;
  }
  std::fprintf(stderr, "error: %s\n", episeg_last_error());
  return status == EPISEG_INVALID_ARGUMENT ? 1 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"episodic one-/k-shot segmentation toolkit"};
  app.require_subcommand(1);

  Command gen(app.add_subcommand("gen", "synthesize a labeled toy dataset"));
  gen.sub->add_option("--out", gen.out_dir, "dataset directory to create")->required();
  gen.map("--classes", "classes", "number of foreground classes");
  gen.map("--images", "images", "corpus size");
  gen.map("--size", "size", "image side length in pixels");
  gen.map("--seed", "seed", "generator seed");
  gen.map("--classes-per-fold", "classes_per_fold", "held-out classes per fold");

  Command train(app.add_subcommand("train", "fit a model on the training view of a fold"));
  train.sub->add_option("--data", train.data_dir, "dataset directory")->required();
  train.sub->add_option("--out", train.out_dir, "run directory for checkpoint/log")->required();
  train.sub->add_option("--config", train.config_file, "key = value configuration file");
  train.map("--target", "target", "ours | basenet | siamese");
  train.map("--fold", "fold", "fold whose test classes are held out");
  train.map("--classes-per-fold", "classes_per_fold", "held-out classes per fold");
  train.map("--iterations", "iterations", "episodic SGD steps");
  train.map("--learning-rate", "learning_rate", "SGD learning rate");
  train.map("--momentum", "momentum", "SGD momentum");
  train.map("--eval-every", "eval_every", "validation/checkpoint cadence (ours only)");
  train.map("--val-episodes", "val_episodes", "validation episodes (ours only)");
  train.map("--sample-fraction", "sample_fraction", "pixel sample share (siamese only)");
  train.map("--seed", "seed", "training seed");

  Command eval(app.add_subcommand("eval", "score a predictor on a test-fold benchmark"));
  eval.sub->add_option("--data", eval.data_dir, "dataset directory")->required();
  eval.out_dir = "eval_out";
  eval.sub->add_option("--out", eval.out_dir, "directory for report.csv (default eval_out)");
  eval.map("--model", "model", "checkpoint path");
  eval.map("--baseline", "baseline", "nn1 | logreg | finetune | siamese");
  eval.map("--oracle", "oracle", "gt: score the ground truth against itself");
  eval.map("--fold", "fold", "fold whose test classes are evaluated");
  eval.map("--classes-per-fold", "classes_per_fold", "held-out classes per fold");
  eval.map("--k", "k", "supports per episode");
  eval.map("--n", "n", "benchmark episodes");
  eval.map("--seed", "seed", "benchmark seed");
  eval.map("--threads", "threads", "worker cap for scoring");
  CLI::Option* dump = eval.sub->add_flag("--dump-masks", "write query/truth/pred rasters");

  Command time(app.add_subcommand("time", "per-episode inference timing table"));
  time.sub->add_option("--data", time.data_dir, "dataset directory")->required();
  time.out_dir = "time_out";
  time.sub->add_option("--out", time.out_dir, "directory for timing.csv (default time_out)");
  time.map("--model", "model", "two-branch checkpoint");
  time.map("--basenet", "basenet", "base encoder checkpoint");
  time.map("--siamese", "siamese", "siamese matcher checkpoint");
  time.map("--fold", "fold", "fold whose test classes are timed");
  time.map("--classes-per-fold", "classes_per_fold", "held-out classes per fold");
  time.map("--k", "k", "comma-separated support counts, e.g. 1,5");
  time.map("--n", "n", "episodes per timing pass");
  time.map("--repeats", "repeats", "timed passes per cell (0: empty table)");
  time.map("--seed", "seed", "benchmark seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  // The command must run before finish() reads `output` (argument evaluation
  // order is unspecified), so every branch sequences the call explicitly.
  char* output = nullptr;
  if (app.got_subcommand(gen.sub)) {
    const episeg_status status =
        episeg_cmd_gen(gen.out_dir.c_str(), nullptr, gen.overrides().c_str(), &output);
    return finish(status, output);
  }

  if (app.got_subcommand(train.sub)) {
    std::string config_text;
    if (!train.config_file.empty()) {
      std::ifstream in(train.config_file, std::ios::binary);
      if (!in) {
        std::fprintf(stderr, "error: cannot read config file %s\n", train.config_file.c_str());
        return 1;
      }
      std::ostringstream buf;
      buf << in.rdbuf();
      config_text = buf.str();
    }
    const episeg_status status = episeg_cmd_train(
        train.data_dir.c_str(), train.out_dir.c_str(), config_text.c_str(),
        train.overrides().c_str(), &output);
    return finish(status, output);
  }

  if (app.got_subcommand(eval.sub)) {
    std::string overrides = eval.overrides();
    if (dump->count() > 0) overrides += "dump_masks = 1\n";
    const episeg_status status = episeg_cmd_eval(eval.data_dir.c_str(), eval.out_dir.c_str(),
                                                 nullptr, overrides.c_str(), &output);
    return finish(status, output);
  }

  const episeg_status status = episeg_cmd_time(time.data_dir.c_str(), time.out_dir.c_str(),
                                               nullptr, time.overrides().c_str(), &output);
  return finish(status, output);
}
