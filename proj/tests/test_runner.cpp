#include "doctest.h"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "episeg/baselines.hpp"
#include "episeg/metrics.hpp"
#include "episeg/runner.hpp"

using doctest::Contains;
using episeg::AnyModel;
using episeg::CommandResult;
using episeg::KeyValues;
using episeg::PredictFn;
using episeg::RunConfig;
using episeg::parse_key_values;

namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

bool has(const std::string& text, const std::string& needle) {
  return text.find(needle) != std::string::npos;
}

KeyValues kv(std::initializer_list<std::pair<std::string, std::string>> pairs) {
  return KeyValues(pairs.begin(), pairs.end());
}

// One small corpus shared by the command tests; generating it through
// run_gen keeps the fixture on the same code path users take.
const fs::path& corpus_dir() {
  static const fs::path dir = [] {
    const fs::path p = temp_dir("episeg_runner_corpus");
    episeg::run_gen(p.string(), {},
                    kv({{"classes", "4"}, {"images", "40"}, {"size", "24"}, {"seed", "5"}}));
    return p;
  }();
  return dir;
}

// A basenet checkpoint trained once; several eval/time tests reuse it.
const fs::path& basenet_run_dir() {
  static const fs::path dir = [] {
    const fs::path p = temp_dir("episeg_runner_basenet");
    episeg::run_train(corpus_dir().string(), p.string(), {},
                      kv({{"target", "basenet"}, {"iterations", "40"}}));
    return p;
  }();
  return dir;
}

}  // namespace

// ---------------------------------------------------------------------------
// key = value parsing

TEST_CASE("config text: comments, blanks, and embedded '=' parse as expected") {
  const KeyValues kvs = parse_key_values(
      "# leading comment\n"
      "\n"
      "  alpha = 1  \n"
      "beta = a = b   # trailing comment\n"
      "gamma =\n");
  REQUIRE(kvs.size() == 3);
  CHECK(kvs[0] == std::pair<std::string, std::string>("alpha", "1"));
  CHECK(kvs[1] == std::pair<std::string, std::string>("beta", "a = b"));
  CHECK(kvs[2] == std::pair<std::string, std::string>("gamma", ""));
}

TEST_CASE("config text: malformed lines are reported with their line number") {
  CHECK_THROWS_WITH_AS(parse_key_values("a = 1\nnot a pair\n"), Contains("line 2"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_key_values("= orphan value\n"), Contains("empty key"),
                       std::invalid_argument);
}

// ---------------------------------------------------------------------------
// merged run configuration

TEST_CASE("run config: overrides beat file values beat defaults, later line wins") {
  const RunConfig cfg({{"a", "1"}, {"b", "2"}, {"c", "3"}},
                      kv({{"a", "10"}, {"b", "20"}, {"b", "21"}}), kv({{"a", "100"}}));
  CHECK(cfg.str("a") == "100");
  CHECK(cfg.str("b") == "21");
  CHECK(cfg.str("c") == "3");
  CHECK(cfg.explicitly_set("a"));
  CHECK(cfg.explicitly_set("b"));
  CHECK_FALSE(cfg.explicitly_set("c"));
}

TEST_CASE("run config: unknown keys are rejected naming the valid set") {
  CHECK_THROWS_WITH_AS(RunConfig({{"alpha", "1"}, {"beta", "2"}}, kv({{"gamma", "3"}}), {}),
                       Contains("unknown config key 'gamma' (valid: alpha, beta)"),
                       std::invalid_argument);
  // The same guard applies to overrides, not just the file.
  CHECK_THROWS_AS(RunConfig({{"alpha", "1"}}, {}, kv({{"alhpa", "2"}})), std::invalid_argument);
}

TEST_CASE("run config: typed getters name the offending key") {
  const RunConfig cfg({{"n", "12x"}, {"lr", "fast"}, {"seed", "-3"}}, {}, {});
  CHECK_THROWS_WITH_AS(cfg.integer("n"), Contains("'n'"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(cfg.real("lr"), Contains("'lr'"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(cfg.seed("seed"), Contains("unsigned"), std::invalid_argument);
}

TEST_CASE("run config: resolved text replays to an identical configuration") {
  RunConfig cfg({{"a", "1"}, {"b", "2"}, {"mode_only", "x"}}, kv({{"a", "7"}}), {});
  cfg.pin("b", "computed");
  cfg.drop("mode_only");
  const std::string text = cfg.resolved_text();
  CHECK(text == "a = 7\nb = computed\n");

  const RunConfig replay({{"a", "1"}, {"b", "2"}, {"mode_only", "x"}}, parse_key_values(text), {});
  CHECK(replay.str("a") == "7");
  CHECK(replay.str("b") == "computed");
}

// ---------------------------------------------------------------------------
// gen

TEST_CASE("gen: produces a loadable dataset and is byte-identical across runs") {
  const fs::path a = temp_dir("episeg_runner_gen_a");
  const fs::path b = temp_dir("episeg_runner_gen_b");
  const KeyValues over = kv({{"classes", "4"}, {"images", "12"}, {"size", "16"}, {"seed", "9"}});
  const CommandResult ra = episeg::run_gen(a.string(), {}, over);
  episeg::run_gen(b.string(), {}, over);

  const episeg::SegDataset ds = episeg::load_dataset(a.string());
  CHECK(ds.num_images() == 12);
  CHECK(ds.num_classes() == 4);
  CHECK(has(ra.output, "12 images"));

  CHECK(slurp(a / "catalog.txt") == slurp(b / "catalog.txt"));
  CHECK(slurp(a / "images" / "0000.ppm") == slurp(b / "images" / "0000.ppm"));
  CHECK(slurp(a / "labels" / "0011.pgm") == slurp(b / "labels" / "0011.pgm"));
  // Only the out path differs between the two resolved configurations.
  CHECK(ra.resolved_config == slurp(a / "resolved_config.txt"));
}

TEST_CASE("gen: class count must respect the fold layout") {
  const fs::path out = temp_dir("episeg_runner_gen_bad");
  CHECK_THROWS_WITH_AS(episeg::run_gen(out.string(), {}, kv({{"classes", "3"}})),
                       Contains("multiple of classes_per_fold"), std::invalid_argument);
  CHECK_THROWS_AS(episeg::run_gen(out.string(), {}, kv({{"size", "8"}})), std::invalid_argument);
  CHECK_THROWS_AS(episeg::run_gen(out.string(), {}, kv({{"images", "3"}})), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// train

TEST_CASE("train: basenet writes a checkpoint whose resolved config replays exactly") {
  const fs::path& run = basenet_run_dir();
  REQUIRE(fs::exists(run / "model.ck"));
  REQUIRE(fs::exists(run / "train_log.csv"));

  const AnyModel m = episeg::load_any_model((run / "model.ck").string());
  CHECK(m.kind == "basenet");
  REQUIRE(m.basenet.has_value());

  // iterations was pinned from "auto"; keys for other targets were dropped.
  const std::string resolved = slurp(run / "resolved_config.txt");
  CHECK(has(resolved, "iterations = 40"));
  CHECK_FALSE(has(resolved, "sample_fraction"));
  CHECK_FALSE(has(resolved, "eval_every"));

  // Feeding the resolved text back reproduces the checkpoint byte for byte.
  const fs::path replay = temp_dir("episeg_runner_basenet_replay");
  episeg::run_train(corpus_dir().string(), replay.string(), parse_key_values(resolved), {});
  CHECK(slurp(replay / "model.ck") == slurp(run / "model.ck"));
}

TEST_CASE("train: ours smoke run logs validation rows and reloads as 'ours'") {
  const fs::path out = temp_dir("episeg_runner_ours");
  const CommandResult r = episeg::run_train(
      corpus_dir().string(), out.string(), {},
      kv({{"target", "ours"}, {"iterations", "6"}, {"eval_every", "3"}, {"val_episodes", "2"}}));
  CHECK(has(r.output, "iter"));
  const AnyModel m = episeg::load_any_model((out / "model.ck").string());
  CHECK(m.kind == "ours");
  const std::string log = slurp(out / "train_log.csv");
  CHECK(has(log, "iteration,loss,val_mean_iou,seconds"));
  CHECK(has(log, "\n3,"));
  CHECK(has(log, "\n6,"));
}

TEST_CASE("train: siamese smoke run reloads as 'siamese'") {
  const fs::path out = temp_dir("episeg_runner_siamese");
  episeg::run_train(corpus_dir().string(), out.string(), {},
                    kv({{"target", "siamese"}, {"iterations", "8"}, {"sample_fraction", "0.4"}}));
  const AnyModel m = episeg::load_any_model((out / "model.ck").string());
  CHECK(m.kind == "siamese");
}

TEST_CASE("train: option/target mismatches and bad folds are rejected up front") {
  const fs::path out = temp_dir("episeg_runner_train_bad");
  CHECK_THROWS_WITH_AS(episeg::run_train(corpus_dir().string(), out.string(), {},
                                         kv({{"target", "basenet"}, {"eval_every", "5"}})),
                       Contains("only apply to target ours"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(episeg::run_train(corpus_dir().string(), out.string(), {},
                                         kv({{"target", "ours"}, {"sample_fraction", "0.2"}})),
                       Contains("only applies to target siamese"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      episeg::run_train(corpus_dir().string(), out.string(), {}, kv({{"target", "resnet"}})),
      Contains("unknown train target"), std::invalid_argument);
  CHECK_THROWS_AS(
      episeg::run_train(corpus_dir().string(), out.string(), {}, kv({{"fold", "2"}})),
      std::invalid_argument);
  CHECK_FALSE(fs::exists(out / "model.ck"));
}

TEST_CASE("train: a missing dataset leaves no partial run directory behind") {
  const fs::path out = fs::temp_directory_path() / "episeg_runner_no_ds_out";
  fs::remove_all(out);
  CHECK_THROWS_AS(episeg::run_train("/nonexistent/episeg_ds", out.string(), {}, {}),
                  std::runtime_error);
  CHECK_FALSE(fs::exists(out));
}

// ---------------------------------------------------------------------------
// predictor wiring

TEST_CASE("predictors: name/kind mismatches are explained") {
  const AnyModel base = episeg::load_any_model((basenet_run_dir() / "model.ck").string());
  CHECK_THROWS_WITH_AS(episeg::make_predictor("ours", &base),
                       Contains("needs a 'ours' checkpoint, but the file holds a 'basenet'"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(episeg::make_predictor("nn1", nullptr), Contains("none was supplied"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(episeg::make_predictor("knn", &base),
                       Contains("valid: ours, nn1, logreg, finetune, siamese, oracle-gt"),
                       std::invalid_argument);
  CHECK(episeg::make_predictor("oracle-gt", nullptr));  // needs no model
  CHECK(episeg::make_predictor("logreg", &base));
}

// ---------------------------------------------------------------------------
// eval

TEST_CASE("eval: the ground-truth oracle scores a perfect mean IoU") {
  const fs::path out = temp_dir("episeg_runner_eval_gt");
  const CommandResult r = episeg::run_eval(corpus_dir().string(), out.string(), {},
                                           kv({{"oracle", "gt"}, {"n", "10"}}));
  CHECK(has(r.output, "mean IoU 1.0000"));
  CHECK(has(r.output, "scored 10/10"));
  REQUIRE(fs::exists(out / "report.csv"));
  REQUIRE(fs::exists(out / "benchmark.txt"));
  CHECK(has(slurp(out / "report.csv"), "mean_iou,1\n"));
}

TEST_CASE("eval: identical configurations produce byte-identical artifacts") {
  const KeyValues over = kv({{"baseline", "nn1"},
                             {"model", (basenet_run_dir() / "model.ck").string()},
                             {"n", "8"},
                             {"seed", "3"}});
  const fs::path a = temp_dir("episeg_runner_eval_a");
  const fs::path b = temp_dir("episeg_runner_eval_b");
  const CommandResult ra = episeg::run_eval(corpus_dir().string(), a.string(), {}, over);
  const CommandResult rb = episeg::run_eval(corpus_dir().string(), b.string(), {}, over);
  CHECK(ra.output == rb.output);
  CHECK(slurp(a / "report.csv") == slurp(b / "report.csv"));
  CHECK(slurp(a / "benchmark.txt") == slurp(b / "benchmark.txt"));
  CHECK(has(slurp(a / "report.csv"), "predictor,nn1"));
}

TEST_CASE("eval: mask dumps write one raster triple per episode") {
  const fs::path out = temp_dir("episeg_runner_eval_dump");
  episeg::run_eval(corpus_dir().string(), out.string(), {},
                   kv({{"oracle", "gt"}, {"n", "3"}, {"dump_masks", "1"}}));
  for (const char* stem : {"ep0000", "ep0001", "ep0002"}) {
    CHECK(fs::exists(out / "masks" / (std::string(stem) + "_query.ppm")));
    CHECK(fs::exists(out / "masks" / (std::string(stem) + "_truth.pgm")));
    CHECK(fs::exists(out / "masks" / (std::string(stem) + "_pred.pgm")));
  }
}

TEST_CASE("eval: predictor selection rules are enforced") {
  const fs::path out = temp_dir("episeg_runner_eval_bad");
  const std::string model = (basenet_run_dir() / "model.ck").string();
  CHECK_THROWS_WITH_AS(episeg::run_eval(corpus_dir().string(), out.string(), {}, {}),
                       Contains("needs one of"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      episeg::run_eval(corpus_dir().string(), out.string(), {}, kv({{"baseline", "nn1"}})),
      Contains("needs a trained base encoder checkpoint"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      episeg::run_eval(corpus_dir().string(), out.string(), {}, kv({{"baseline", "svm"}})),
      Contains("valid: nn1, logreg, finetune, siamese"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(episeg::run_eval(corpus_dir().string(), out.string(), {},
                                        kv({{"oracle", "gt"}, {"model", model}})),
                       Contains("neither a model nor a baseline"), std::invalid_argument);
  CHECK_THROWS_AS(episeg::run_eval(corpus_dir().string(), out.string(), {},
                                   kv({{"oracle", "gt"}, {"k", "0"}})),
                  std::invalid_argument);
  // The model checkpoint is the wrong kind for the default 'ours' predictor.
  CHECK_THROWS_WITH_AS(
      episeg::run_eval(corpus_dir().string(), out.string(), {}, kv({{"model", model}})),
      Contains("'ours' checkpoint"), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// time

TEST_CASE("time: repeats = 0 keeps the table empty; bad k lists are rejected") {
  const std::string base = (basenet_run_dir() / "model.ck").string();
  const fs::path ours_run = temp_dir("episeg_runner_time_ours");
  episeg::run_train(corpus_dir().string(), ours_run.string(), {},
                    kv({{"target", "ours"}, {"iterations", "2"}, {"eval_every", "2"},
                        {"val_episodes", "1"}}));
  const fs::path siam_run = temp_dir("episeg_runner_time_siam");
  episeg::run_train(corpus_dir().string(), siam_run.string(), {},
                    kv({{"target", "siamese"}, {"iterations", "2"}}));

  const KeyValues artifacts = kv({{"model", (ours_run / "model.ck").string()},
                                  {"basenet", base},
                                  {"siamese", (siam_run / "model.ck").string()}});

  const fs::path out = temp_dir("episeg_runner_time_empty");
  KeyValues over = artifacts;
  over.emplace_back("repeats", "0");
  over.emplace_back("n", "2");
  const CommandResult r = episeg::run_time(corpus_dir().string(), out.string(), {}, over);
  CHECK(slurp(out / "timing.csv") == "predictor\n");
  CHECK(has(r.output, "no timed passes requested"));

  auto with_k = [&](const std::string& k) {
    KeyValues o = artifacts;
    o.emplace_back("k", k);
    return o;
  };
  CHECK_THROWS_WITH_AS(episeg::run_time(corpus_dir().string(), out.string(), {}, with_k("1,1")),
                       Contains("duplicate k"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(episeg::run_time(corpus_dir().string(), out.string(), {}, with_k("1,,2")),
                       Contains("comma-separated"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(episeg::run_time(corpus_dir().string(), out.string(), {}, with_k("2,-1")),
                       Contains("comma-separated"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(episeg::run_time(corpus_dir().string(), out.string(), {}, {}),
                       Contains("missing model=PATH"), std::invalid_argument);
}
