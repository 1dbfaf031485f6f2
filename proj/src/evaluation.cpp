#include "filo/evaluation.hpp"

#include "filo/error.hpp"
#include "filo/image_io.hpp"
#include "filo/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <thread>

namespace filo {

namespace {

struct Pool {
  std::vector<double> image_scores;
  std::vector<std::uint8_t> image_labels;
  std::vector<double> pixel_scores;
  std::vector<std::uint8_t> pixel_labels;
  int samples = 0;

  void add(const SampleRecord& s, const SampleResult& r) {
    ++samples;
    image_scores.push_back(r.score);
    image_labels.push_back(static_cast<std::uint8_t>(s.label));
    pixel_scores.insert(pixel_scores.end(), r.map.data(), r.map.data() + r.map.size());
    pixel_labels.insert(pixel_labels.end(), s.mask.bits.begin(), s.mask.bits.end());
  }
};

double checked_auroc(const std::vector<double>& s, const std::vector<std::uint8_t>& l,
                     const std::string& what) {
  try {
    return auroc(s, l);
  } catch (const MetricError& e) {
    throw MetricError(what + ": " + e.what());
  }
}

}  // namespace

EvalReport summarize(const std::vector<SampleRecord>& samples, const std::vector<SampleResult>& results,
                     int shots) {
  if (samples.size() != results.size()) throw InputError("one result per sample required");
  if (samples.empty()) throw InputError("nothing to evaluate");
  EvalReport report;
  report.shots = shots;
  Pool all;
  std::map<std::string, Pool> by_class;
  // Pool in id order so pooled arrays do not depend on input order.
  std::vector<size_t> order(samples.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return samples[a].id < samples[b].id; });
  for (size_t i : order) {
    const auto& s = samples[i];
    const auto& r = results[i];
    if (r.map.rows() != s.mask.height || r.map.cols() != s.mask.width) {
      throw InputError("sample '" + s.id + "': map resolution differs from mask");
    }
    all.add(s, r);
    by_class[s.class_name].add(s, r);
    SampleScore sc;
    sc.id = s.id;
    sc.class_name = s.class_name;
    sc.label = s.label;
    sc.score = r.score;
    sc.prob_abnormal = r.prob[1];
    sc.positions = r.positions;
    if (!r.explanation.empty()) sc.top_anomaly = r.explanation.front().anomaly_class;
    report.samples.push_back(std::move(sc));
  }
  for (auto& [cls, pool] : by_class) {
    ClassMetrics m;
    m.class_name = cls;
    m.samples = pool.samples;
    m.image_auroc = checked_auroc(pool.image_scores, pool.image_labels, "class '" + cls + "' image AUROC");
    m.pixel_auroc = checked_auroc(pool.pixel_scores, pool.pixel_labels, "class '" + cls + "' pixel AUROC");
    report.mean_image_auroc += m.image_auroc;
    report.mean_pixel_auroc += m.pixel_auroc;
    report.per_class.push_back(m);
  }
  report.mean_image_auroc /= static_cast<double>(report.per_class.size());
  report.mean_pixel_auroc /= static_cast<double>(report.per_class.size());
  report.image_auroc = checked_auroc(all.image_scores, all.image_labels, "image AUROC");
  report.pixel_auroc = checked_auroc(all.pixel_scores, all.pixel_labels, "pixel AUROC");
  return report;
}

EvalReport run_eval(Pipeline& pipeline, const std::vector<SampleRecord>& test,
                    const std::vector<SampleRecord>& references, const EvalOptions& options) {
  if (options.shots < 0) throw InputError("shots must be >= 0");
  if (test.empty()) throw InputError("test split is empty");
  if (options.shots > 0) {
    std::map<std::string, std::vector<const SampleRecord*>> refs;
    for (const auto& r : references) {
      if (r.label == 0) refs[r.class_name].push_back(&r);
    }
    std::vector<std::string> classes;
    for (const auto& t : test) classes.push_back(t.class_name);
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    for (const auto& cls : classes) {
      auto& list = refs[cls];
      if (static_cast<int>(list.size()) < options.shots) {
        throw InputError("class '" + cls + "' has " + std::to_string(list.size()) +
                         " normal references but " + std::to_string(options.shots) + " shots were requested");
      }
      std::sort(list.begin(), list.end(), [](const auto* a, const auto* b) { return a->id < b->id; });
      std::vector<Image> imgs;
      for (int k = 0; k < options.shots; ++k) imgs.push_back(list[static_cast<size_t>(k)]->image);
      pipeline.enroll(cls, imgs);
    }
  }

  std::vector<SampleResult> results(test.size());
  int threads = options.threads;
  if (threads <= 0) threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  threads = std::min<int>(threads, static_cast<int>(test.size()));
  std::atomic<size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto work = [&] {
    for (size_t i = next++; i < test.size(); i = next++) {
      try {
        results[i] = pipeline.infer(test[i].image, test[i].class_name);
        if (options.heatmap_dir) write_heatmap(results[i].map, *options.heatmap_dir / (test[i].id + ".ppm"));
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  if (options.heatmap_dir) std::filesystem::create_directories(*options.heatmap_dir);
  if (threads <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return summarize(test, results, options.shots);
}

std::string EvalReport::to_jsonl() const {
  std::string out;
  for (const auto& s : samples) {
    nlohmann::json j = {{"type", "sample"}, {"id", s.id},       {"class", s.class_name},
                        {"label", s.label},  {"score", s.score}, {"prob_abnormal", s.prob_abnormal},
                        {"positions", s.positions}, {"top_anomaly", s.top_anomaly}};
    out += j.dump() + "\n";
  }
  for (const auto& c : per_class) {
    nlohmann::json j = {{"type", "class"},
                        {"class", c.class_name},
                        {"samples", c.samples},
                        {"image_auroc", c.image_auroc},
                        {"pixel_auroc", c.pixel_auroc}};
    out += j.dump() + "\n";
  }
  nlohmann::json j = {{"type", "summary"},
                      {"shots", shots},
                      {"image_auroc", image_auroc},
                      {"pixel_auroc", pixel_auroc},
                      {"mean_image_auroc", mean_image_auroc},
                      {"mean_pixel_auroc", mean_pixel_auroc}};
  out += j.dump() + "\n";
  return out;
}

void EvalReport::write(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write report '" + path.string() + "'");
  f << to_jsonl();
}

}  // namespace filo
