// Command-line front end; talks to the library only through the C interface.

#include "filo/filo.h"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

// Runtime failures exit with 10 + status so scripts can tell categories apart.
struct Failure {
  filo_status status;
  std::string message;
};

void check(filo_status s) {
  if (s != FILO_OK) throw Failure{s, filo_last_error()};
}

template <typename T, void (*Free)(T*)>
struct Handle {
  T* ptr = nullptr;
  Handle() = default;
  Handle(const Handle&) = delete;
  Handle& operator=(const Handle&) = delete;
  ~Handle() {
    if (ptr) Free(ptr);
  }
  T** out() { return &ptr; }
  T* get() const { return ptr; }
};

using Config = Handle<filo_config, filo_config_free>;
using Dataset = Handle<filo_dataset, filo_dataset_free>;
using Model = Handle<filo_model, filo_model_free>;
using Report = Handle<filo_report, filo_report_free>;

struct OwnedString {
  char* s = nullptr;
  ~OwnedString() { filo_string_free(s); }
};

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string output;
  int log_level = 3;
};

void load_config(const Globals& g, Config& cfg) {
  if (g.config_path.empty()) {
    check(filo_config_default(cfg.out()));
  } else {
    check(filo_config_load(g.config_path.c_str(), cfg.out()));
  }
  if (g.seed) check(filo_config_set_seed(cfg.get(), *g.seed));
}

void require_path(const std::string& path, const char* what) {
  if (!fs::exists(path)) throw Failure{FILO_ERR_IO, std::string(what) + " '" + path + "' does not exist"};
}

// Data comes from --data when given, otherwise it is generated from the config.
void open_dataset(const std::string& data, const filo_config* cfg, Dataset& ds) {
  if (!data.empty()) {
    require_path(data, "dataset path");
    check(filo_dataset_load(data.c_str(), ds.out()));
  } else {
    check(filo_dataset_generate(cfg, ds.out()));
  }
}

void open_model(const std::string& dir, Model& model) {
  require_path(dir, "model bundle");
  check(filo_model_load(dir.c_str(), model.out()));
}

struct Ablations {
  int shots = 0;
  double lambda = -1;
  double sigma = -1;
  std::string kernels;
  std::string template_mode;
  bool no_class_name = false;
  bool no_filtering = false;
  bool no_grounding = false;
  bool no_position = false;
  int threads = 0;
  std::vector<std::string> references;

  void add_to(CLI::App* app) {
    app->add_option("--shots", shots, "Reference images per class (0: zero-shot)")->check(CLI::NonNegativeNumber);
    app->add_option("--lambda", lambda, "Suppression factor outside boxes")->check(CLI::Range(0.0, 1.0));
    app->add_option("--sigma", sigma, "Gaussian smoothing sigma")->check(CLI::NonNegativeNumber);
    app->add_option("--kernels", kernels, "Comma-separated kernel subset, e.g. 3x3,1x5");
    app->add_option("--template-mode", template_mode, "Prompt templates")
        ->check(CLI::IsMember({"fixed", "learnable", "both"}));
    app->add_flag("--no-class-name", no_class_name, "Use the generic word 'object' in prompts");
    app->add_flag("--no-filtering", no_filtering, "Disable runtime prompt filtering");
    app->add_flag("--no-grounding", no_grounding, "Disable box suppression");
    app->add_flag("--no-position", no_position, "Disable position-enhanced prompts");
    app->add_option("--threads", threads, "Worker threads (0: all cores)")->check(CLI::NonNegativeNumber);
  }

  filo_run_options options() const {
    filo_run_options o;
    filo_run_options_init(&o);
    o.shots = shots;
    o.lambda = lambda;
    o.sigma = sigma;
    o.kernels = kernels.empty() ? nullptr : kernels.c_str();
    o.template_mode = template_mode.empty() ? nullptr : template_mode.c_str();
    if (no_class_name) o.include_class_name = 0;
    if (no_filtering) o.filtering = 0;
    if (no_grounding) o.suppression = 0;
    if (no_position) o.positions = 0;
    o.threads = threads;
    return o;
  }
};

void print_epoch(const filo_epoch_metrics* m, void*) {
  std::printf("phase %d epoch %d  L_global %.4f  L_local %.4f", m->phase, m->epoch, m->loss_global, m->loss_local);
  if (!std::isnan(m->image_auroc)) std::printf("  holdout image-AUROC %.4f", m->image_auroc);
  if (!std::isnan(m->pixel_auroc)) std::printf("  pixel-AUROC %.4f", m->pixel_auroc);
  std::printf("  (%.1fs)\n", m->seconds);
  std::fflush(stdout);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"filo: zero- and few-shot anomaly detection with fused text prompts and deformable localization"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "Configuration file (JSON)");
  app.add_option("--seed", g.seed, "Seed for encoders, training and synthetic data");
  app.add_option("--output", g.output, "Output path (directory or file, per subcommand)");
  app.add_option("--log-level", g.log_level, "0 trace .. 6 off")->check(CLI::Range(0, 6));

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset to a directory");

  auto* describe = app.add_subcommand("describe", "Fetch (or load cached) anomaly vocabularies");
  std::vector<std::string> describe_classes;
  describe->add_option("classes", describe_classes, "Class names")->required();

  auto* train = app.add_subcommand("train", "Train prompts, MDCI and adapter; write a model bundle");
  std::string train_data, train_log;
  train->add_option("--data", train_data, "Dataset directory (default: generate from config)");
  train->add_option("--log", train_log, "Metric log path (default: <output>/train_log.jsonl)");

  auto* eval = app.add_subcommand("eval", "Evaluate a bundle on the test split; write a report");
  std::string eval_model, eval_data, heatmap_dir;
  Ablations eval_ab;
  eval->add_option("--model", eval_model, "Model bundle directory")->required();
  eval->add_option("--data", eval_data, "Dataset directory (default: generate from config)");
  eval->add_option("--heatmaps", heatmap_dir, "Write per-sample heatmaps here");
  eval_ab.add_to(eval);

  auto* infer = app.add_subcommand("infer", "Score one image and write its heatmap");
  std::string infer_model, infer_image, infer_class;
  Ablations infer_ab;
  infer->add_option("--model", infer_model, "Model bundle directory")->required();
  infer->add_option("--image", infer_image, "PPM image")->required();
  infer->add_option("--class", infer_class, "Class name")->required();
  infer->add_option("--reference", infer_ab.references, "Normal reference images (few-shot)");
  infer_ab.add_to(infer);

  auto* exportf = app.add_subcommand("export-features", "Encode images into tensor containers");
  std::string export_model;
  std::vector<std::string> export_images;
  exportf->add_option("--model", export_model, "Model bundle (default: encoder from config)");
  exportf->add_option("images", export_images, "PPM images")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: %s\n\n%s", e.what(), app.help().c_str());
    return 2;
  }

  filo_set_log_level(g.log_level);
  try {
    if (*gen) {
      Config cfg;
      load_config(g, cfg);
      Dataset ds;
      check(filo_dataset_generate(cfg.get(), ds.out()));
      const std::string out = g.output.empty() ? "data" : g.output;
      check(filo_dataset_save(ds.get(), out.c_str()));
      std::printf("wrote %zu samples (train %zu, test %zu, reference %zu) to %s\n", filo_dataset_count(ds.get(), nullptr),
                  filo_dataset_count(ds.get(), "train"), filo_dataset_count(ds.get(), "test"),
                  filo_dataset_count(ds.get(), "reference"), out.c_str());
    } else if (*describe) {
      Config cfg;
      load_config(g, cfg);
      std::string lines;
      for (const auto& c : describe_classes) {
        OwnedString json;
        check(filo_describe(cfg.get(), c.c_str(), &json.s));
        lines += std::string(json.s) + "\n";
      }
      std::fputs(lines.c_str(), stdout);
      if (!g.output.empty()) {
        std::FILE* f = std::fopen(g.output.c_str(), "w");
        if (!f) throw Failure{FILO_ERR_IO, "cannot write '" + g.output + "'"};
        std::fputs(lines.c_str(), f);
        std::fclose(f);
      }
    } else if (*train) {
      Config cfg;
      load_config(g, cfg);
      Dataset ds;
      open_dataset(train_data, cfg.get(), ds);
      Model model;
      check(filo_model_create(cfg.get(), model.out()));
      const std::string out = g.output.empty() ? "model" : g.output;
      fs::create_directories(out);
      const std::string log = train_log.empty() ? (fs::path(out) / "train_log.jsonl").string() : train_log;
      check(filo_train(model.get(), ds.get(), log.c_str(), print_epoch, nullptr));
      check(filo_model_save(model.get(), out.c_str()));
      std::printf("model bundle written to %s\n", out.c_str());
    } else if (*eval) {
      Model model;
      open_model(eval_model, model);
      Config cfg;
      if (g.config_path.empty()) {
        // --seed here reseeds generated data only; weights stay as saved.
        check(filo_model_config(model.get(), cfg.out()));
        if (g.seed) check(filo_config_set_seed(cfg.get(), *g.seed));
      } else {
        load_config(g, cfg);
      }
      Dataset ds;
      open_dataset(eval_data, cfg.get(), ds);
      filo_run_options o = eval_ab.options();
      if (!heatmap_dir.empty()) o.heatmap_dir = heatmap_dir.c_str();
      Report report;
      check(filo_eval(model.get(), ds.get(), &o, report.out()));
      const std::string out = g.output.empty() ? "report.jsonl" : g.output;
      check(filo_report_write(report.get(), out.c_str()));
      std::printf("shots %d  image-AUROC %.4f  pixel-AUROC %.4f  report %s\n", o.shots,
                  filo_report_image_auroc(report.get()), filo_report_pixel_auroc(report.get()), out.c_str());
    } else if (*infer) {
      Model model;
      open_model(infer_model, model);
      require_path(infer_image, "image");
      filo_run_options o = infer_ab.options();
      std::vector<const char*> refs;
      for (const auto& r : infer_ab.references) refs.push_back(r.c_str());
      o.references = refs.data();
      o.reference_count = refs.size();
      const std::string heatmap = g.output.empty() ? "heatmap.ppm" : g.output;
      double score = 0;
      OwnedString json;
      check(filo_infer(model.get(), infer_image.c_str(), infer_class.c_str(), &o, heatmap.c_str(), &score, &json.s));
      std::printf("%s\n", json.s);
    } else if (*exportf) {
      Model model;
      if (!export_model.empty()) {
        open_model(export_model, model);
      } else {
        Config cfg;
        load_config(g, cfg);
        check(filo_model_create(cfg.get(), model.out()));
      }
      const fs::path out = g.output.empty() ? fs::path("features") : fs::path(g.output);
      fs::create_directories(out);
      for (const auto& img : export_images) {
        require_path(img, "image");
        const std::string dst = (out / fs::path(img).filename().replace_extension(".fpk")).string();
        check(filo_export_features(model.get(), img.c_str(), dst.c_str()));
        std::printf("%s -> %s\n", img.c_str(), dst.c_str());
      }
    }
  } catch (const Failure& f) {
    std::fprintf(stderr, "error [%s]: %s\n", filo_status_name(f.status), f.message.c_str());
    return 10 + static_cast<int>(f.status);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error [%s]: %s\n", filo_status_name(FILO_ERR_INTERNAL), e.what());
    return 10 + static_cast<int>(FILO_ERR_INTERNAL);
  }
  return 0;
}
