#include "filo/filo.h"

#include "filo/config.hpp"
#include "filo/dataset.hpp"
#include "filo/error.hpp"
#include "filo/evaluation.hpp"
#include "filo/image_io.hpp"
#include "filo/llm.hpp"
#include "filo/model.hpp"
#include "filo/pipeline.hpp"
#include "filo/training.hpp"

#include <json.hpp>
#include <spdlog/spdlog.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <memory>
#include <sstream>
#include <string>

struct filo_config {
  filo::Config config;
};
struct filo_dataset {
  std::vector<filo::SampleRecord> records;
};
struct filo_model {
  std::unique_ptr<filo::Model> model;
};
struct filo_report {
  filo::EvalReport report;
};

namespace {

thread_local std::string g_last_error;

filo_status fail(filo_status status, std::string message) {
  g_last_error = std::move(message);
  return status;
}

filo_status status_of(filo::ErrorKind kind) {
  switch (kind) {
    case filo::ErrorKind::kInput: return FILO_ERR_INPUT;
    case filo::ErrorKind::kConfig: return FILO_ERR_CONFIG;
    case filo::ErrorKind::kFormat: return FILO_ERR_FORMAT;
    case filo::ErrorKind::kMetric: return FILO_ERR_METRIC;
    case filo::ErrorKind::kIo: return FILO_ERR_IO;
    case filo::ErrorKind::kTraining: return FILO_ERR_TRAINING;
  }
  return FILO_ERR_INTERNAL;
}

template <typename F>
filo_status guarded(F&& body) {
  g_last_error.clear();
  try {
    body();
    return FILO_OK;
  } catch (const filo::Error& e) {
    return fail(status_of(e.kind()), e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail(FILO_ERR_FORMAT, e.what());
  } catch (const std::bad_alloc&) {
    return fail(FILO_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(FILO_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(FILO_ERR_INTERNAL, "unknown error");
  }
}

#define FILO_REQUIRE(ptr, name) \
  if ((ptr) == nullptr) return fail(FILO_ERR_ARGUMENT, std::string(name) + " must not be null")

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out == nullptr) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

std::vector<std::string> split_list(const char* text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

filo::PipelineOptions resolve(const filo::Config& config, const filo_run_options* o) {
  filo::PipelineOptions p = filo::PipelineOptions::from_config(config);
  if (o == nullptr) return p;
  if (o->lambda >= 0) p.lambda = o->lambda;
  if (o->sigma >= 0) p.sigma = o->sigma;
  if (o->kernels != nullptr) {
    p.kernels = split_list(o->kernels);
    if (p.kernels.empty()) throw filo::ConfigError("kernel list is empty");
  }
  if (o->template_mode != nullptr) p.template_mode = filo::template_mode_from_string(o->template_mode);
  if (o->include_class_name >= 0) p.include_class_name = o->include_class_name != 0;
  if (o->filtering >= 0) p.filtering = o->filtering != 0;
  if (o->suppression >= 0) p.suppression = o->suppression != 0;
  if (o->positions >= 0) p.positions = o->positions != 0;
  return p;
}

// Pipeline plus the optional LLM client and cache it borrows.
struct Session {
  std::unique_ptr<filo::OpenAiClient> llm;
  std::unique_ptr<filo::ResponseCache> cache;
  std::unique_ptr<filo::Pipeline> pipeline;
};

Session open_session(const filo::Model& model, const filo_run_options* o) {
  const filo::Config& cfg = model.config();
  Session s;
  if (cfg.llm.enabled) {
    s.llm = std::make_unique<filo::OpenAiClient>(cfg.llm.base_url, cfg.llm.model, cfg.llm.api_key_env);
    s.cache = std::make_unique<filo::ResponseCache>(cfg.llm.cache_dir);
  }
  const std::filesystem::path sidecars = (o && o->sidecar_dir) ? o->sidecar_dir : "";
  s.pipeline = std::make_unique<filo::Pipeline>(model, resolve(cfg, o),
                                                filo::make_grounding_provider(cfg, sidecars),
                                                s.llm.get(), s.cache.get());
  if (o != nullptr && o->trace != nullptr) {
    auto fn = o->trace;
    void* user = o->trace_user;
    s.pipeline->set_trace([fn, user](std::string_view step) { fn(std::string(step).c_str(), user); });
  }
  return s;
}

nlohmann::json result_json(const filo::SampleResult& r) {
  nlohmann::json boxes = nlohmann::json::array();
  for (size_t i = 0; i < r.boxes.boxes.size(); ++i) {
    const auto& b = r.boxes.boxes[i];
    boxes.push_back({{"box", {b.x0, b.y0, b.x1, b.y1}}, {"confidence", r.boxes.confidences[i]}});
  }
  nlohmann::json expl = nlohmann::json::array();
  for (const auto& e : r.explanation) {
    expl.push_back({{"anomaly", e.anomaly_class},
                    {"position", e.position ? nlohmann::json(*e.position) : nlohmann::json(nullptr)},
                    {"text", e.text},
                    {"similarity", e.similarity}});
  }
  return {{"score", r.score},
          {"prob_normal", r.prob[0]},
          {"prob_abnormal", r.prob[1]},
          {"map_max", r.map.maxCoeff()},
          {"boxes", boxes},
          {"positions", r.positions},
          {"explanation", expl}};
}

}  // namespace

extern "C" {

const char* filo_status_name(filo_status status) {
  switch (status) {
    case FILO_OK: return "ok";
    case FILO_ERR_INPUT: return "input error";
    case FILO_ERR_CONFIG: return "configuration error";
    case FILO_ERR_FORMAT: return "format error";
    case FILO_ERR_METRIC: return "metric error";
    case FILO_ERR_IO: return "i/o error";
    case FILO_ERR_TRAINING: return "training error";
    case FILO_ERR_ARGUMENT: return "invalid argument";
    case FILO_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* filo_last_error(void) { return g_last_error.c_str(); }

const char* filo_version(void) { return "0.1.0"; }

void filo_set_log_level(int level) {
  if (level < 0) level = 0;
  if (level > 6) level = 6;
  spdlog::set_level(static_cast<spdlog::level::level_enum>(level));
}

void filo_string_free(char* s) { std::free(s); }

// --- configuration

filo_status filo_config_default(filo_config** out) {
  FILO_REQUIRE(out, "out");
  return guarded([&] { *out = new filo_config{}; });
}

filo_status filo_config_load(const char* path, filo_config** out) {
  FILO_REQUIRE(path, "path");
  FILO_REQUIRE(out, "out");
  return guarded([&] { *out = new filo_config{filo::Config::load(path)}; });
}

filo_status filo_config_from_json(const char* json, filo_config** out) {
  FILO_REQUIRE(json, "json");
  FILO_REQUIRE(out, "out");
  return guarded([&] { *out = new filo_config{filo::Config::from_json(json)}; });
}

filo_status filo_config_to_json(const filo_config* config, char** out) {
  FILO_REQUIRE(config, "config");
  FILO_REQUIRE(out, "out");
  return guarded([&] { *out = dup_string(config->config.to_json()); });
}

filo_status filo_config_save(const filo_config* config, const char* path) {
  FILO_REQUIRE(config, "config");
  FILO_REQUIRE(path, "path");
  return guarded([&] { config->config.save(path); });
}

filo_status filo_config_set_seed(filo_config* config, uint64_t seed) {
  FILO_REQUIRE(config, "config");
  config->config.seed = seed;
  config->config.training.seed = seed;
  config->config.dataset.seed = seed;
  return FILO_OK;
}

void filo_config_free(filo_config* config) { delete config; }

// --- datasets

filo_status filo_dataset_generate(const filo_config* config, filo_dataset** out) {
  FILO_REQUIRE(config, "config");
  FILO_REQUIRE(out, "out");
  return guarded([&] {
    const auto& c = config->config;
    *out = new filo_dataset{filo::generate_dataset(c.dataset, c.vision.image_size)};
  });
}

filo_status filo_dataset_load(const char* dir, filo_dataset** out) {
  FILO_REQUIRE(dir, "dir");
  FILO_REQUIRE(out, "out");
  return guarded([&] { *out = new filo_dataset{filo::load_dataset(dir)}; });
}

filo_status filo_dataset_save(const filo_dataset* dataset, const char* dir) {
  FILO_REQUIRE(dataset, "dataset");
  FILO_REQUIRE(dir, "dir");
  return guarded([&] { filo::save_dataset(dataset->records, dir); });
}

size_t filo_dataset_count(const filo_dataset* dataset, const char* split) {
  if (dataset == nullptr) return 0;
  if (split == nullptr) return dataset->records.size();
  size_t n = 0;
  for (const auto& r : dataset->records) n += std::strcmp(filo::to_string(r.split), split) == 0;
  return n;
}

void filo_dataset_free(filo_dataset* dataset) { delete dataset; }

// --- models

filo_status filo_model_create(const filo_config* config, filo_model** out) {
  FILO_REQUIRE(config, "config");
  FILO_REQUIRE(out, "out");
  return guarded([&] { *out = new filo_model{std::make_unique<filo::Model>(config->config)}; });
}

filo_status filo_model_load(const char* dir, filo_model** out) {
  FILO_REQUIRE(dir, "dir");
  FILO_REQUIRE(out, "out");
  return guarded([&] { *out = new filo_model{filo::Model::load(dir)}; });
}

filo_status filo_model_save(filo_model* model, const char* dir) {
  FILO_REQUIRE(model, "model");
  FILO_REQUIRE(dir, "dir");
  return guarded([&] { model->model->save(dir); });
}

filo_status filo_model_config(const filo_model* model, filo_config** out) {
  FILO_REQUIRE(model, "model");
  FILO_REQUIRE(out, "out");
  return guarded([&] { *out = new filo_config{model->model->config()}; });
}

void filo_model_free(filo_model* model) { delete model; }

filo_status filo_train(filo_model* model, const filo_dataset* dataset, const char* log_path,
                       filo_epoch_callback callback, void* user) {
  FILO_REQUIRE(model, "model");
  FILO_REQUIRE(dataset, "dataset");
  return guarded([&] {
    filo::TrainOptions opts;
    if (log_path != nullptr) opts.log_path = log_path;
    if (callback != nullptr) {
      opts.on_epoch = [callback, user](const filo::EpochMetrics& m) {
        const double nan = std::numeric_limits<double>::quiet_NaN();
        filo_epoch_metrics c{m.phase,
                             m.epoch,
                             m.loss_global,
                             m.loss_local,
                             m.image_auroc.value_or(nan),
                             m.pixel_auroc.value_or(nan),
                             m.seconds};
        callback(&c, user);
      };
    }
    filo::train(*model->model, dataset->records, opts);
  });
}

// --- inference and evaluation

void filo_run_options_init(filo_run_options* o) {
  if (o == nullptr) return;
  *o = filo_run_options{};
  o->lambda = -1;
  o->sigma = -1;
  o->include_class_name = -1;
  o->filtering = -1;
  o->suppression = -1;
  o->positions = -1;
}

filo_status filo_eval(const filo_model* model, const filo_dataset* dataset, const filo_run_options* options,
                      filo_report** out) {
  FILO_REQUIRE(model, "model");
  FILO_REQUIRE(dataset, "dataset");
  FILO_REQUIRE(out, "out");
  return guarded([&] {
    if (options && options->shots < 0) throw filo::InputError("shots must be >= 0");
    Session s = open_session(*model->model, options);
    filo::EvalOptions eo;
    eo.shots = options ? options->shots : 0;
    eo.threads = options ? options->threads : 0;
    if (eo.threads <= 0) eo.threads = model->model->config().threads;
    if (options && options->heatmap_dir) eo.heatmap_dir = options->heatmap_dir;
    const auto test = filo::filter_split(dataset->records, filo::Split::kTest);
    if (test.empty()) throw filo::InputError("dataset has no test samples");
    const auto refs = filo::filter_split(dataset->records, filo::Split::kReference);
    *out = new filo_report{filo::run_eval(*s.pipeline, test, refs, eo)};
  });
}

double filo_report_image_auroc(const filo_report* report) {
  return report ? report->report.image_auroc : std::numeric_limits<double>::quiet_NaN();
}

double filo_report_pixel_auroc(const filo_report* report) {
  return report ? report->report.pixel_auroc : std::numeric_limits<double>::quiet_NaN();
}

filo_status filo_report_to_jsonl(const filo_report* report, char** out) {
  FILO_REQUIRE(report, "report");
  FILO_REQUIRE(out, "out");
  return guarded([&] { *out = dup_string(report->report.to_jsonl()); });
}

filo_status filo_report_write(const filo_report* report, const char* path) {
  FILO_REQUIRE(report, "report");
  FILO_REQUIRE(path, "path");
  return guarded([&] { report->report.write(path); });
}

void filo_report_free(filo_report* report) { delete report; }

filo_status filo_infer(const filo_model* model, const char* image_path, const char* class_name,
                       const filo_run_options* options, const char* heatmap_path, double* score_out,
                       char** json_out) {
  FILO_REQUIRE(model, "model");
  FILO_REQUIRE(image_path, "image_path");
  FILO_REQUIRE(class_name, "class_name");
  return guarded([&] {
    Session s = open_session(*model->model, options);
    const filo::Image image = filo::read_ppm(image_path);
    const int shots = options ? options->shots : 0;
    if (shots > 0) {
      if (options->references == nullptr || options->reference_count < static_cast<size_t>(shots)) {
        throw filo::InputError("class '" + std::string(class_name) + "' needs " + std::to_string(shots) +
                               " reference images");
      }
      std::vector<filo::Image> refs;
      for (int i = 0; i < shots; ++i) refs.push_back(filo::read_ppm(options->references[i]));
      s.pipeline->enroll(class_name, refs);
    }
    const filo::SampleResult r = s.pipeline->infer(image, class_name);
    if (heatmap_path != nullptr) filo::write_heatmap(r.map, heatmap_path);
    if (score_out != nullptr) *score_out = r.score;
    if (json_out != nullptr) {
      nlohmann::json j = result_json(r);
      j["image"] = image_path;
      j["class_name"] = class_name;
      j["shots"] = shots;
      *json_out = dup_string(j.dump());
    }
  });
}

filo_status filo_export_features(const filo_model* model, const char* image_path, const char* out_path) {
  FILO_REQUIRE(model, "model");
  FILO_REQUIRE(image_path, "image_path");
  FILO_REQUIRE(out_path, "out_path");
  return guarded([&] {
    const filo::Image image = filo::read_ppm(image_path);
    filo::save_feature_pyramid(model->model->vision.encode(image), out_path);
  });
}

filo_status filo_describe(const filo_config* config, const char* class_name, char** json_out) {
  FILO_REQUIRE(config, "config");
  FILO_REQUIRE(class_name, "class_name");
  FILO_REQUIRE(json_out, "json_out");
  return guarded([&] {
    const auto& llm_cfg = config->config.llm;
    std::unique_ptr<filo::OpenAiClient> llm;
    std::unique_ptr<filo::ResponseCache> cache;
    if (llm_cfg.enabled) {
      llm = std::make_unique<filo::OpenAiClient>(llm_cfg.base_url, llm_cfg.model, llm_cfg.api_key_env);
      cache = std::make_unique<filo::ResponseCache>(llm_cfg.cache_dir);
    }
    const filo::AnomalyVocabulary v = filo::fetch_anomaly_vocabulary(class_name, llm.get(), cache.get());
    nlohmann::json j = {{"class_name", v.class_name},
                        {"anomaly_types", v.anomaly_types},
                        {"source", filo::to_string(v.source)},
                        {"warning", v.warning},
                        {"prompt", filo::anomaly_query_prompt(class_name)}};
    *json_out = dup_string(j.dump());
  });
}

}  // extern "C"
