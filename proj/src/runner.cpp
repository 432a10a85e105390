#include "episeg/runner.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "episeg/image_io.hpp"
#include "episeg/training.hpp"

namespace episeg {

namespace {

[[noreturn]] void fail(const std::string& why) { throw std::runtime_error(why); }
[[noreturn]] void reject(const std::string& why) { throw std::invalid_argument(why); }

std::string trim(const std::string& s) {
  const auto from = s.find_first_not_of(" \t\r");
  if (from == std::string::npos) return "";
  const auto to = s.find_last_not_of(" \t\r");
  return s.substr(from, to - from + 1);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("cannot open " + path + " for writing");
  out << text;
  if (!out.flush()) fail("write failed for " + path);
}

}  // namespace

// ---- run configuration ----------------------------------------------------

KeyValues parse_key_values(const std::string& text) {
  KeyValues out;
  std::istringstream in(text);
  std::string line;
  for (int number = 1; std::getline(in, line); ++number) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      reject("config line " + std::to_string(number) + ": expected 'key = value', got '" + line +
             "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) reject("config line " + std::to_string(number) + ": empty key");
    out.emplace_back(key, value);
  }
  return out;
}

RunConfig::RunConfig(std::map<std::string, std::string> defaults, const KeyValues& file_values,
                     const KeyValues& overrides)
    : values_(std::move(defaults)) {
  auto apply = [this](const KeyValues& kvs) {
    for (const auto& [key, value] : kvs) {
      const auto it = values_.find(key);
      if (it == values_.end()) {
        std::string valid;
        for (const auto& [k, v] : values_) valid += (valid.empty() ? "" : ", ") + k;
        reject("unknown config key '" + key + "' (valid: " + valid + ")");
      }
      it->second = value;
      explicit_[key] = true;
    }
  };
  apply(file_values);
  apply(overrides);
}

const std::string& RunConfig::str(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) fail("RunConfig: no key '" + key + "'");
  return it->second;
}

std::int64_t RunConfig::integer(const std::string& key) const {
  const std::string& v = str(key);
  try {
    std::size_t used = 0;
    const long long parsed = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing characters");
    return parsed;
  } catch (const std::exception&) {
    reject("config key '" + key + "' wants an integer, got '" + v + "'");
  }
}

double RunConfig::real(const std::string& key) const {
  const std::string& v = str(key);
  try {
    std::size_t used = 0;
    const double parsed = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing characters");
    return parsed;
  } catch (const std::exception&) {
    reject("config key '" + key + "' wants a number, got '" + v + "'");
  }
}

std::uint64_t RunConfig::seed(const std::string& key) const {
  const std::string& v = str(key);
  try {
    std::size_t used = 0;
    const unsigned long long parsed = std::stoull(v, &used);
    if (used != v.size() || v[0] == '-') throw std::invalid_argument("trailing characters");
    return parsed;
  } catch (const std::exception&) {
    reject("config key '" + key + "' wants an unsigned integer, got '" + v + "'");
  }
}

bool RunConfig::explicitly_set(const std::string& key) const {
  const auto it = explicit_.find(key);
  return it != explicit_.end() && it->second;
}

void RunConfig::pin(const std::string& key, const std::string& value) {
  const auto it = values_.find(key);
  if (it == values_.end()) fail("RunConfig: cannot pin unknown key '" + key + "'");
  it->second = value;
}

void RunConfig::drop(const std::string& key) {
  values_.erase(key);
  explicit_.erase(key);
}

std::string RunConfig::resolved_text() const {
  std::string out;
  for (const auto& [key, value] : values_) out += key + " = " + value + "\n";
  return out;
}

// ---- artifacts --------------------------------------------------------------

AnyModel load_any_model(const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  AnyModel m;
  m.kind = ck.model_kind;
  if (ck.model_kind == "ours") {
    m.ours.emplace(TwoBranchModel::from_checkpoint(ck));
  } else if (ck.model_kind == "basenet") {
    m.basenet.emplace(BaseFeatureNet::from_checkpoint(ck));
  } else if (ck.model_kind == "siamese") {
    m.siamese.emplace(SiameseMatcher::from_checkpoint(ck));
  } else {
    fail(path + ": unrecognized model kind '" + ck.model_kind + "'");
  }
  return m;
}

PredictFn make_predictor(const std::string& name, const AnyModel* model) {
  if (name == "oracle-gt") return oracle_truth();
  auto need = [&](const char* kind) -> const AnyModel& {
    if (!model)
      reject("predictor '" + name + "' needs a trained checkpoint and none was supplied");
    if (model->kind != kind)
      reject("predictor '" + name + "' needs a '" + std::string(kind) +
             "' checkpoint, but the file holds a '" + model->kind + "' model");
    return *model;
  };
  if (name == "ours") {
    const TwoBranchModel& m = *need("ours").ours;
    return [&m](const Episode& ep) {
      return m.predict(ep.query_image, ep.support_images, ep.support_masks);
    };
  }
  if (name == "nn1") {
    const BaseFeatureNet& net = *need("basenet").basenet;
    return [&net](const Episode& ep) { return nn1_predict(net, ep); };
  }
  if (name == "logreg") {
    const BaseFeatureNet& net = *need("basenet").basenet;
    return [&net](const Episode& ep) { return logreg_predict(net, ep); };
  }
  if (name == "finetune") {
    const BaseFeatureNet& net = *need("basenet").basenet;
    return [&net](const Episode& ep) { return finetune_predict(net, ep); };
  }
  if (name == "siamese") {
    const SiameseMatcher& m = *need("siamese").siamese;
    return [&m](const Episode& ep) { return m.predict(ep); };
  }
  reject("unknown predictor '" + name +
         "' (valid: ours, nn1, logreg, finetune, siamese, oracle-gt)");
}

// ---- gen ---------------------------------------------------------------------

CommandResult run_gen(const std::string& out_dir, const KeyValues& file_values,
                      const KeyValues& overrides) {
  RunConfig cfg({{"command", "gen"},
                 {"out", ""},
                 {"classes", "10"},
                 {"images", "600"},
                 {"size", "64"},
                 {"seed", "7"},
                 {"classes_per_fold", "2"}},
                file_values, overrides);
  cfg.pin("command", "gen");
  cfg.pin("out", out_dir);

  const std::int64_t classes = cfg.integer("classes");
  const std::int64_t images = cfg.integer("images");
  const std::int64_t size = cfg.integer("size");
  const std::int64_t cpf = cfg.integer("classes_per_fold");
  if (cpf < 1) reject("classes_per_fold must be at least 1");
  if (classes < 1 || classes % cpf != 0)
    reject("classes (" + std::to_string(classes) + ") must be a positive multiple of " +
           "classes_per_fold (" + std::to_string(cpf) + ") so every fold has the same size");
  if (classes < 4) reject("need at least 4 classes for a meaningful train/test split");
  if (size < 16 || size > 512) reject("size must lie in [16, 512]");
  if (images < 2 * classes) reject("need at least two images per class");

  SynthConfig synth;
  synth.num_classes = classes;
  synth.num_images = images;
  synth.height = size;
  synth.width = size;
  synth.seed = cfg.seed("seed");
  const SegDataset ds = generate_synthetic(synth);

  std::filesystem::create_directories(out_dir);
  save_dataset(ds, out_dir);
  write_text((std::filesystem::path(out_dir) / "resolved_config.txt").string(),
             cfg.resolved_text());

  std::ostringstream out;
  out << "generated " << ds.num_images() << " images, " << ds.num_classes() << " classes, "
      << size << "x" << size << ", seed " << cfg.str("seed") << " -> " << out_dir << "\n";
  for (std::int64_t c = 1; c <= ds.num_classes(); ++c)
    out << "  " << std::setw(2) << c << "  " << ds.class_names[c - 1] << "\n";
  return {out.str(), cfg.resolved_text()};
}

// ---- train -------------------------------------------------------------------

CommandResult run_train(const std::string& data_dir, const std::string& out_dir,
                        const KeyValues& file_values, const KeyValues& overrides) {
  RunConfig cfg({{"command", "train"},
                 {"data", ""},
                 {"out", ""},
                 {"target", "ours"},
                 {"fold", "0"},
                 {"classes_per_fold", "2"},
                 {"learning_rate", "0.01"},
                 {"momentum", "0.9"},
                 {"iterations", "auto"},
                 {"eval_every", "1000"},
                 {"val_episodes", "40"},
                 {"sample_fraction", "0.5"},
                 {"seed", "0"}},
                file_values, overrides);
  cfg.pin("command", "train");
  cfg.pin("data", data_dir);
  cfg.pin("out", out_dir);

  const std::string target = cfg.str("target");
  if (target != "ours" && target != "basenet" && target != "siamese")
    reject("unknown train target '" + target + "' (valid: ours, basenet, siamese)");
  if (target != "ours" && (cfg.explicitly_set("eval_every") || cfg.explicitly_set("val_episodes")))
    reject("eval_every/val_episodes only apply to target ours; the baseline trainers do not "
           "validate during training");
  if (target != "siamese" && cfg.explicitly_set("sample_fraction"))
    reject("sample_fraction only applies to target siamese");
  if (cfg.str("iterations") == "auto")
    cfg.pin("iterations", target == "ours" ? "20000" : "2000");
  if (target != "ours") {
    cfg.drop("eval_every");
    cfg.drop("val_episodes");
  }
  if (target != "siamese") cfg.drop("sample_fraction");

  const SegDataset ds = load_dataset(data_dir);
  const FoldSpec fold = build_folds(ds.num_classes(), static_cast<int>(cfg.integer("classes_per_fold")),
                                    static_cast<int>(cfg.integer("fold")));
  const SegDataset view = remap_to_training_view(ds, fold);
  const std::uint64_t seed = cfg.seed("seed");

  std::filesystem::create_directories(out_dir);
  const std::string ck_path = (std::filesystem::path(out_dir) / "model.ck").string();
  const std::string log_path = (std::filesystem::path(out_dir) / "train_log.csv").string();
  write_text((std::filesystem::path(out_dir) / "resolved_config.txt").string(),
             cfg.resolved_text());

  std::ostringstream out;
  out << "training " << target << " on fold " << cfg.str("fold") << " (test classes";
  for (int c : fold.test_classes) out << " " << c;
  out << " held out), seed " << seed << "\n";

  if (target == "ours") {
    ArchConfig arch;
    arch.hash_seed = seed;
    TwoBranchModel model(arch, seed);
    TrainConfig tcfg;
    tcfg.learning_rate = cfg.real("learning_rate");
    tcfg.momentum = cfg.real("momentum");
    tcfg.iterations = cfg.integer("iterations");
    tcfg.eval_every = cfg.integer("eval_every");
    tcfg.val_episodes = cfg.integer("val_episodes");
    tcfg.seed = seed;
    const TrainResult result = train_model(
        model, view, fold.train_classes, tcfg, ck_path, log_path, [&out](const TrainLogRow& row) {
          out << "  iter " << std::setw(7) << row.iteration << "  loss " << std::fixed
              << std::setprecision(4) << row.loss << "  val " << row.val_mean_iou << "  "
              << std::setprecision(1) << row.seconds << "s\n"
              << std::defaultfloat << std::setprecision(6);
        });
    if (result.aborted) fail("training aborted (" + result.abort_reason +
                             "); the last good checkpoint is retained at " + ck_path);
  } else if (target == "basenet") {
    BaseTrainConfig bcfg;
    bcfg.learning_rate = cfg.real("learning_rate");
    bcfg.momentum = cfg.real("momentum");
    bcfg.iterations = cfg.integer("iterations");
    bcfg.seed = seed;
    const BaseFeatureNet net = train_base_classifier(view, fold.train_classes, bcfg);
    save_checkpoint(net.to_checkpoint(seed), ck_path);
    write_text(log_path, "iteration,loss,val_mean_iou,seconds\n");
  } else {
    SiameseConfig scfg;
    scfg.learning_rate = cfg.real("learning_rate");
    scfg.momentum = cfg.real("momentum");
    scfg.iterations = cfg.integer("iterations");
    scfg.sample_fraction = cfg.real("sample_fraction");
    scfg.seed = seed;
    const SiameseMatcher m = siamese_train(view, fold.train_classes, scfg);
    save_checkpoint(m.to_checkpoint(seed), ck_path);
    write_text(log_path, "iteration,loss,val_mean_iou,seconds\n");
  }

  out << "wrote " << ck_path << " and " << log_path << "\n";
  return {out.str(), cfg.resolved_text()};
}

// ---- eval --------------------------------------------------------------------

namespace {

std::string format_report(const std::string& predictor, const RunConfig& cfg,
                          const EvalReport& report) {
  std::ostringstream out;
  out << "predictor " << predictor << "  fold " << cfg.str("fold") << "  k " << report.k << "  n "
      << report.episodes << "  seed " << cfg.str("seed") << "\n";
  out << "scored " << report.scored << "/" << report.episodes << " episodes";
  if (report.partial) out << "  [PARTIAL: " << report.failed << " failed]";
  out << "\n";
  out << "class  episodes        tp        fp        fn     iou\n";
  for (const ClassIoU& c : report.iou.classes) {
    out << std::setw(5) << c.class_id << "  " << std::setw(8) << c.counts.episodes << "  "
        << std::setw(8) << c.counts.tp << "  " << std::setw(8) << c.counts.fp << "  "
        << std::setw(8) << c.counts.fn << "  ";
    if (c.defined)
      out << std::fixed << std::setprecision(4) << c.iou << std::defaultfloat
          << std::setprecision(6);
    else
      out << "undefined";
    out << "\n";
  }
  out << "mean IoU " << std::fixed << std::setprecision(4) << report.iou.mean_iou
      << std::defaultfloat << std::setprecision(6) << "\n";
  return out.str();
}

void dump_episode_rasters(const SegDataset& ds, const std::vector<EpisodeKey>& keys,
                          const PredictFn& predict, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const std::size_t count = std::min<std::size_t>(keys.size(), 16);
  for (std::size_t i = 0; i < count; ++i) {
    const Episode ep = materialize_episode(ds, keys[i]);
    std::ostringstream stem;
    stem << "ep" << std::setw(4) << std::setfill('0') << i;
    const std::filesystem::path base = std::filesystem::path(dir) / stem.str();

    RgbBuffer rgb{ep.query_image.height, ep.query_image.width, ep.query_image.rgb};
    write_ppm(base.string() + "_query.ppm", rgb);
    auto as_gray = [](const BinaryMask& m) {
      GrayBuffer g{m.height, m.width, {}};
      g.values.reserve(m.fg.size());
      for (std::uint8_t v : m.fg) g.values.push_back(v ? 255 : 0);
      return g;
    };
    write_pgm(base.string() + "_truth.pgm", as_gray(ep.query_mask));
    write_pgm(base.string() + "_pred.pgm", as_gray(predict(ep)));
  }
}

}  // namespace

CommandResult run_eval(const std::string& data_dir, const std::string& out_dir,
                       const KeyValues& file_values, const KeyValues& overrides) {
  RunConfig cfg({{"command", "eval"},
                 {"data", ""},
                 {"out", ""},
                 {"model", ""},
                 {"baseline", ""},
                 {"oracle", ""},
                 {"fold", "0"},
                 {"classes_per_fold", "2"},
                 {"k", "1"},
                 {"n", "1000"},
                 {"seed", "0"},
                 {"threads", "1"},
                 {"dump_masks", "0"}},
                file_values, overrides);
  cfg.pin("command", "eval");
  cfg.pin("data", data_dir);
  cfg.pin("out", out_dir);

  const std::string model_path = cfg.str("model");
  const std::string baseline = cfg.str("baseline");
  const std::string oracle = cfg.str("oracle");

  std::string predictor;
  if (!oracle.empty()) {
    if (oracle != "gt") reject("unknown oracle '" + oracle + "' (valid: gt)");
    if (!baseline.empty() || !model_path.empty())
      reject("oracle runs take neither a model nor a baseline");
    predictor = "oracle-gt";
  } else if (!baseline.empty()) {
    if (baseline != "nn1" && baseline != "logreg" && baseline != "finetune" &&
        baseline != "siamese")
      reject("unknown baseline '" + baseline + "' (valid: nn1, logreg, finetune, siamese)");
    if (model_path.empty())
      reject("baseline '" + baseline + "' needs a trained " +
             (baseline == "siamese" ? std::string("siamese matcher") : std::string("base encoder")) +
             " checkpoint (set model=PATH)");
    predictor = baseline;
  } else if (!model_path.empty()) {
    predictor = "ours";
  } else {
    reject("evaluation needs one of: model=PATH, baseline=NAME (with model=PATH), oracle=gt");
  }

  const int k = static_cast<int>(cfg.integer("k"));
  const std::int64_t n = cfg.integer("n");
  const int threads = static_cast<int>(cfg.integer("threads"));
  if (k < 1) reject("k must be at least 1");
  if (n < 1) reject("n must be at least 1");
  if (threads < 1) reject("threads must be at least 1");

  const SegDataset ds = load_dataset(data_dir);
  const FoldSpec fold = build_folds(ds.num_classes(), static_cast<int>(cfg.integer("classes_per_fold")),
                                    static_cast<int>(cfg.integer("fold")));

  AnyModel model;
  const AnyModel* model_ptr = nullptr;
  if (!model_path.empty()) {
    model = load_any_model(model_path);
    model_ptr = &model;
  }
  const PredictFn predict = make_predictor(predictor, model_ptr);

  const std::vector<EpisodeKey> keys =
      build_benchmark(ds, fold.test_classes, k, n, cfg.seed("seed"));

  std::filesystem::create_directories(out_dir);
  write_text((std::filesystem::path(out_dir) / "resolved_config.txt").string(),
             cfg.resolved_text());
  save_benchmark(keys, (std::filesystem::path(out_dir) / "benchmark.txt").string());

  EvalReport report = run_benchmark(ds, keys, predict, threads);
  report.config = {{"predictor", predictor},
                   {"fold", cfg.str("fold")},
                   {"classes_per_fold", cfg.str("classes_per_fold")},
                   {"seed", cfg.str("seed")}};
  write_report_csv(report, (std::filesystem::path(out_dir) / "report.csv").string());

  if (cfg.integer("dump_masks") != 0)
    dump_episode_rasters(ds, keys, predict,
                         (std::filesystem::path(out_dir) / "masks").string());

  return {format_report(predictor, cfg, report), cfg.resolved_text()};
}

// ---- time --------------------------------------------------------------------

CommandResult run_time(const std::string& data_dir, const std::string& out_dir,
                       const KeyValues& file_values, const KeyValues& overrides) {
  RunConfig cfg({{"command", "time"},
                 {"data", ""},
                 {"out", ""},
                 {"model", ""},
                 {"basenet", ""},
                 {"siamese", ""},
                 {"fold", "0"},
                 {"classes_per_fold", "2"},
                 {"k", "1,5"},
                 {"n", "20"},
                 {"repeats", "3"},
                 {"seed", "0"}},
                file_values, overrides);
  cfg.pin("command", "time");
  cfg.pin("data", data_dir);
  cfg.pin("out", out_dir);

  for (const char* key : {"model", "basenet", "siamese"})
    if (cfg.str(key).empty())
      reject(std::string("timing needs every predictor trained; missing ") + key + "=PATH");

  std::vector<int> ks;
  {
    std::istringstream in(cfg.str("k"));
    std::string piece;
    while (std::getline(in, piece, ',')) {
      piece = trim(piece);
      int k = 0;
      std::size_t used = 0;
      bool ok = !piece.empty();
      if (ok) {
        try {
          k = std::stoi(piece, &used);
        } catch (const std::exception&) {
          ok = false;
        }
        ok = ok && used == piece.size() && k >= 1;
      }
      if (!ok)
        reject("k wants a comma-separated list of positive integers, got '" + cfg.str("k") + "'");
      if (std::find(ks.begin(), ks.end(), k) != ks.end()) reject("duplicate k value " + piece);
      ks.push_back(k);
    }
    if (ks.empty()) reject("k list is empty");
  }
  const std::int64_t n = cfg.integer("n");
  const int repeats = static_cast<int>(cfg.integer("repeats"));
  if (n < 1) reject("n must be at least 1");
  if (repeats < 0) reject("repeats must be non-negative");

  const SegDataset ds = load_dataset(data_dir);
  const FoldSpec fold = build_folds(ds.num_classes(), static_cast<int>(cfg.integer("classes_per_fold")),
                                    static_cast<int>(cfg.integer("fold")));

  const AnyModel ours = load_any_model(cfg.str("model"));
  const AnyModel base = load_any_model(cfg.str("basenet"));
  const AnyModel siam = load_any_model(cfg.str("siamese"));
  const std::vector<std::pair<std::string, PredictFn>> predictors = {
      {"ours", make_predictor("ours", &ours)},
      {"nn1", make_predictor("nn1", &base)},
      {"logreg", make_predictor("logreg", &base)},
      {"finetune", make_predictor("finetune", &base)},
      {"siamese", make_predictor("siamese", &siam)},
  };

  std::vector<std::pair<int, std::vector<EpisodeKey>>> keys_by_k;
  for (int k : ks)
    keys_by_k.emplace_back(k, build_benchmark(ds, fold.test_classes, k, n, cfg.seed("seed")));

  const TimeTable table = time_report(ds, keys_by_k, predictors, repeats);

  std::filesystem::create_directories(out_dir);
  write_text((std::filesystem::path(out_dir) / "resolved_config.txt").string(),
             cfg.resolved_text());
  write_text((std::filesystem::path(out_dir) / "timing.csv").string(), time_table_csv(table));

  std::ostringstream out;
  out << "mean seconds per episode (" << n << " episodes, " << repeats << " timed passes)\n";
  out << std::left << std::setw(10) << "predictor";
  for (int k : table.ks) out << std::right << std::setw(12) << ("k=" + std::to_string(k));
  out << "\n";
  for (std::size_t r = 0; r < table.predictor_names.size(); ++r) {
    out << std::left << std::setw(10) << table.predictor_names[r];
    for (double v : table.mean_seconds[r])
      out << std::right << std::setw(12) << std::fixed << std::setprecision(6) << v;
    out << std::defaultfloat << std::setprecision(6) << "\n";
  }
  if (table.predictor_names.empty()) out << "(no timed passes requested)\n";
  return {out.str(), cfg.resolved_text()};
}

}  // namespace episeg
