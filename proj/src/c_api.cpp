#include "episeg.h"

#include <cstring>
#include <filesystem>
#include <memory>
#include <new>
#include <stdexcept>
#include <string>

#include "episeg/runner.hpp"

// Opaque handle definitions. Each wraps one core object; the extra
// indirection keeps C++ types out of the public header entirely.
struct episeg_dataset {
  episeg::SegDataset ds;
};
struct episeg_model {
  episeg::AnyModel model;
};
struct episeg_report {
  episeg::EvalReport report;
};

namespace {

thread_local std::string t_last_error;

// Runs `fn`, translating exceptions into status codes and the thread-local
// message. Every exported fallible function funnels through here.
template <typename Fn>
episeg_status guarded(Fn&& fn) {
  try {
    fn();
    t_last_error.clear();
    return EPISEG_OK;
  } catch (const std::invalid_argument& e) {
    t_last_error = e.what();
    return EPISEG_INVALID_ARGUMENT;
  } catch (const std::filesystem::filesystem_error& e) {
    t_last_error = e.what();
    return EPISEG_IO_ERROR;
  } catch (const std::ios_base::failure& e) {
    t_last_error = e.what();
    return EPISEG_IO_ERROR;
  } catch (const std::bad_alloc&) {
    t_last_error = "out of memory";
    return EPISEG_RUNTIME_ERROR;
  } catch (const std::exception& e) {
    t_last_error = e.what();
    return EPISEG_RUNTIME_ERROR;
  }
}

void require_c(bool cond, const char* what) {
  if (!cond) throw std::invalid_argument(what);
}

char* copy_string(const std::string& s) {
  char* out = new char[s.size() + 1];
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

episeg::KeyValues parse_or_empty(const char* text) {
  return text ? episeg::parse_key_values(text) : episeg::KeyValues{};
}

using CommandFn = episeg::CommandResult (*)(const std::string&, const std::string&,
                                            const episeg::KeyValues&, const episeg::KeyValues&);

episeg_status run_command(CommandFn fn, const char* data_dir, const char* out_dir,
                          const char* config_text, const char* overrides_text,
                          char** output_out) {
  return guarded([&] {
    require_c(data_dir != nullptr, "data directory must not be NULL");
    require_c(out_dir != nullptr, "output directory must not be NULL");
    const episeg::CommandResult result =
        fn(data_dir, out_dir, parse_or_empty(config_text), parse_or_empty(overrides_text));
    if (output_out) *output_out = copy_string(result.output);
  });
}

}  // namespace

extern "C" {

const char* episeg_last_error(void) { return t_last_error.c_str(); }

void episeg_string_free(char* text) { delete[] text; }

// ---- datasets -----------------------------------------------------------------

episeg_status episeg_dataset_generate(int64_t num_classes, int64_t num_images, int64_t height,
                                      int64_t width, uint64_t seed, episeg_dataset** out) {
  return guarded([&] {
    require_c(out != nullptr, "out handle must not be NULL");
    episeg::SynthConfig cfg;
    cfg.num_classes = num_classes;
    cfg.num_images = num_images;
    cfg.height = height;
    cfg.width = width;
    cfg.seed = seed;
    auto handle = std::make_unique<episeg_dataset>();
    handle->ds = episeg::generate_synthetic(cfg);
    *out = handle.release();
  });
}

episeg_status episeg_dataset_load(const char* dir, episeg_dataset** out) {
  return guarded([&] {
    require_c(dir != nullptr, "dataset directory must not be NULL");
    require_c(out != nullptr, "out handle must not be NULL");
    auto handle = std::make_unique<episeg_dataset>();
    handle->ds = episeg::load_dataset(dir);
    *out = handle.release();
  });
}

episeg_status episeg_dataset_save(const episeg_dataset* ds, const char* dir) {
  return guarded([&] {
    require_c(ds != nullptr, "dataset handle must not be NULL");
    require_c(dir != nullptr, "dataset directory must not be NULL");
    std::filesystem::create_directories(dir);
    episeg::save_dataset(ds->ds, dir);
  });
}

int64_t episeg_dataset_num_images(const episeg_dataset* ds) {
  return ds ? ds->ds.num_images() : 0;
}

int64_t episeg_dataset_num_classes(const episeg_dataset* ds) {
  return ds ? ds->ds.num_classes() : 0;
}

void episeg_dataset_free(episeg_dataset* ds) { delete ds; }

// ---- models ---------------------------------------------------------------------

episeg_status episeg_model_load(const char* path, episeg_model** out) {
  return guarded([&] {
    require_c(path != nullptr, "model path must not be NULL");
    require_c(out != nullptr, "out handle must not be NULL");
    auto handle = std::make_unique<episeg_model>();
    handle->model = episeg::load_any_model(path);
    *out = handle.release();
  });
}

const char* episeg_model_kind(const episeg_model* model) {
  return model ? model->model.kind.c_str() : "";
}

void episeg_model_free(episeg_model* model) { delete model; }

// ---- evaluation -------------------------------------------------------------------

episeg_status episeg_evaluate(const episeg_dataset* ds, const episeg_model* model,
                              const char* predictor, int fold, int classes_per_fold, int k,
                              int64_t episodes, uint64_t seed, int threads,
                              episeg_report** out) {
  return guarded([&] {
    require_c(ds != nullptr, "dataset handle must not be NULL");
    require_c(predictor != nullptr, "predictor name must not be NULL");
    require_c(out != nullptr, "out handle must not be NULL");
    require_c(k >= 1, "k must be at least 1");
    require_c(episodes >= 1, "episodes must be at least 1");
    require_c(threads >= 1, "threads must be at least 1");

    const episeg::FoldSpec spec =
        episeg::build_folds(ds->ds.num_classes(), classes_per_fold, fold);
    const episeg::PredictFn predict =
        episeg::make_predictor(predictor, model ? &model->model : nullptr);
    const std::vector<episeg::EpisodeKey> keys =
        episeg::build_benchmark(ds->ds, spec.test_classes, k, episodes, seed);

    auto handle = std::make_unique<episeg_report>();
    handle->report = episeg::run_benchmark(ds->ds, keys, predict, threads);
    handle->report.config = {{"predictor", predictor},
                             {"fold", std::to_string(fold)},
                             {"classes_per_fold", std::to_string(classes_per_fold)},
                             {"seed", std::to_string(seed)}};
    *out = handle.release();
  });
}

double episeg_report_mean_iou(const episeg_report* report) {
  return report ? report->report.iou.mean_iou : 0.0;
}

int64_t episeg_report_episodes(const episeg_report* report) {
  return report ? report->report.episodes : 0;
}

int64_t episeg_report_scored(const episeg_report* report) {
  return report ? report->report.scored : 0;
}

int episeg_report_partial(const episeg_report* report) {
  return report && report->report.partial ? 1 : 0;
}

episeg_status episeg_report_csv(const episeg_report* report, char** csv_out) {
  return guarded([&] {
    require_c(report != nullptr, "report handle must not be NULL");
    require_c(csv_out != nullptr, "csv out pointer must not be NULL");
    *csv_out = copy_string(episeg::report_csv_string(report->report));
  });
}

void episeg_report_free(episeg_report* report) { delete report; }

// ---- whole commands -----------------------------------------------------------------

episeg_status episeg_cmd_gen(const char* out_dir, const char* config_text,
                             const char* overrides_text, char** output_out) {
  return guarded([&] {
    require_c(out_dir != nullptr, "output directory must not be NULL");
    const episeg::CommandResult result =
        episeg::run_gen(out_dir, parse_or_empty(config_text), parse_or_empty(overrides_text));
    if (output_out) *output_out = copy_string(result.output);
  });
}

episeg_status episeg_cmd_train(const char* data_dir, const char* out_dir,
                               const char* config_text, const char* overrides_text,
                               char** output_out) {
  return run_command(&episeg::run_train, data_dir, out_dir, config_text, overrides_text,
                     output_out);
}

episeg_status episeg_cmd_eval(const char* data_dir, const char* out_dir, const char* config_text,
                              const char* overrides_text, char** output_out) {
  return run_command(&episeg::run_eval, data_dir, out_dir, config_text, overrides_text,
                     output_out);
}

episeg_status episeg_cmd_time(const char* data_dir, const char* out_dir, const char* config_text,
                              const char* overrides_text, char** output_out) {
  return run_command(&episeg::run_time, data_dir, out_dir, config_text, overrides_text,
                     output_out);
}

}  // extern "C"
