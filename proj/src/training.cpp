#include "filo/training.hpp"

#include "filo/error.hpp"
#include "filo/metrics.hpp"

#include <json.hpp>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <fstream>
#include <random>

namespace filo {

// ---------------------------------------------------------------------------
// Losses

ad::Var loss_global(const ad::Var& prob, int label) {
  if (prob.rows() != 1 || prob.cols() != 2) throw InputError("loss_global expects a 1x2 probability pair");
  if (label != 0 && label != 1) throw InputError("loss_global label must be 0 or 1");
  return ad::scale(ad::log(ad::clamp(ad::slice_cols(prob, label, 1), 1e-12, 1.0)), -1.0);
}

ad::Var loss_focal(const ad::Var& m_anomaly, const Mat& mask, double gamma) {
  if (m_anomaly.rows() != mask.rows() || m_anomaly.cols() != mask.cols()) {
    throw InputError("loss_focal: map and mask differ in shape");
  }
  const ad::Var p = ad::clamp(m_anomaly, 1e-6, 1.0 - 1e-6);
  const Mat neg = (1.0 - mask.array()).matrix();
  // p_t = p on positives, 1 - p on negatives
  const ad::Var one_minus_p = ad::add_scalar(ad::scale(p, -1.0), 1.0);
  const ad::Var pt = ad::add(ad::mul(p, ad::constant(mask)), ad::mul(one_minus_p, ad::constant(neg)));
  const ad::Var weight = ad::pow(ad::add_scalar(ad::scale(pt, -1.0), 1.0), gamma);
  return ad::scale(ad::mean(ad::mul(weight, ad::log(pt))), -1.0);
}

ad::Var loss_dice(const ad::Var& pred, const Mat& target, double eps) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
    throw InputError("loss_dice: prediction and target differ in shape");
  }
  const ad::Var inter = ad::sum(ad::mul(pred, ad::constant(target)));
  const ad::Var num = ad::add_scalar(ad::scale(inter, 2.0), eps);
  const ad::Var den = ad::add_scalar(ad::sum(pred), target.sum() + eps);
  return ad::add_scalar(ad::scale(ad::mul(num, ad::pow(den, -1.0)), -1.0), 1.0);
}

ad::Var loss_local(const ad::Var& m_normal, const ad::Var& m_anomaly, const Mat& mask, double gamma) {
  const Mat inv = (1.0 - mask.array()).matrix();
  return ad::add(ad::add(loss_focal(m_anomaly, mask, gamma), loss_dice(m_anomaly, mask)),
                 loss_dice(m_normal, inv));
}

// ---------------------------------------------------------------------------
// AdamW

AdamW::AdamW(std::vector<ParamGroup> groups, double weight_decay, double beta1, double beta2, double eps)
    : groups_(std::move(groups)), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& g : groups_) {
    std::vector<State> s;
    for (auto* p : g.params) s.push_back({Mat::Zero(p->rows(), p->cols()), Mat::Zero(p->rows(), p->cols())});
    state_.push_back(std::move(s));
  }
}

void AdamW::zero_grad() {
  for (auto& g : groups_) {
    for (auto* p : g.params) p->zero_grad();
  }
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t gi = 0; gi < groups_.size(); ++gi) {
    const double lr = groups_[gi].lr;
    if (lr == 0.0) continue;
    for (size_t pi = 0; pi < groups_[gi].params.size(); ++pi) {
      ad::Var* p = groups_[gi].params[pi];
      const Mat g = p->grad();
      State& s = state_[gi][pi];
      s.m = beta1_ * s.m + (1 - beta1_) * g;
      s.v = beta2_ * s.v + (1 - beta2_) * g.cwiseProduct(g);
      Mat& w = p->mutable_value();
      w *= (1.0 - lr * weight_decay_);
      w.array() -= lr * (s.m.array() / bc1) / ((s.v.array() / bc2).sqrt() + eps_);
    }
  }
}

// ---------------------------------------------------------------------------
// Two-phase schedule

bool in_holdout(const std::string& sample_id, std::uint64_t seed, double fraction) {
  std::uint64_t h = 1469598103934665603ULL ^ (seed * 0x9e3779b97f4a7c15ULL);
  for (unsigned char c : sample_id) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  h ^= h >> 33;
  h *= 0xff51afd7ed558ccdULL;
  h ^= h >> 33;
  return static_cast<double>(h >> 11) / 9007199254740992.0 < fraction;
}

namespace {

struct Prepared {
  const SampleRecord* record;
  PreparedSample sample;
  Mat mask;
};

Mat mask_column(const GroundTruthMask& m) {
  Mat c(static_cast<Eigen::Index>(m.bits.size()), 1);
  for (size_t i = 0; i < m.bits.size(); ++i) c(static_cast<Eigen::Index>(i), 0) = m.bits[i] ? 1.0 : 0.0;
  return c;
}

void check_finite(double v, int phase, int epoch, const std::string& id) {
  if (!std::isfinite(v)) {
    throw TrainingError("loss diverged (non-finite) in phase " + std::to_string(phase) + " epoch " +
                        std::to_string(epoch) + " on sample '" + id + "'");
  }
}

std::vector<size_t> shuffled(size_t n, std::mt19937_64& rng) {
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  for (size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
  return idx;
}

void holdout_metrics(const Pipeline& pipe, const std::vector<const SampleRecord*>& holdout, EpochMetrics& m) {
  if (holdout.empty()) return;
  std::vector<double> img_s, px_s;
  std::vector<std::uint8_t> img_l, px_l;
  for (const auto* r : holdout) {
    const SampleResult res = pipe.infer(r->image, r->class_name);
    img_s.push_back(res.score);
    img_l.push_back(static_cast<std::uint8_t>(r->label));
    px_s.insert(px_s.end(), res.map.data(), res.map.data() + res.map.size());
    px_l.insert(px_l.end(), r->mask.bits.begin(), r->mask.bits.end());
  }
  try {
    m.image_auroc = auroc(img_s, img_l);
    m.pixel_auroc = auroc(px_s, px_l);
  } catch (const MetricError&) {
  }
}

}  // namespace

std::vector<EpochMetrics> train(Model& model, const std::vector<SampleRecord>& data,
                                const TrainOptions& options) {
  const Config& cfg = model.config();
  const TrainConfig& tc = cfg.training;
  std::vector<const SampleRecord*> fit, holdout;
  for (const auto& r : data) {
    if (r.split != Split::kTrain) continue;
    (in_holdout(r.id, tc.seed, tc.holdout_fraction) ? holdout : fit).push_back(&r);
  }
  if (fit.empty() && !holdout.empty()) {
    fit.swap(holdout);
  }
  if (fit.empty()) throw InputError("training split is empty");

  std::vector<EpochMetrics> log;
  std::ofstream log_file;
  if (options.log_path) {
    if (options.log_path->has_parent_path()) std::filesystem::create_directories(options.log_path->parent_path());
    log_file.open(*options.log_path, std::ios::trunc);
    if (!log_file) throw IoError("cannot write metric log '" + options.log_path->string() + "'");
  }
  if (tc.epochs_phase1 == 0 && tc.epochs_phase2 == 0) return log;

  // Runtime prompt filtering is a test-time step; the fit pipeline keeps every prompt.
  const auto provider = make_grounding_provider(cfg);
  PipelineOptions fit_options = PipelineOptions::from_config(cfg);
  fit_options.filtering = false;
  Pipeline pipe(model, fit_options, provider);
  Pipeline eval_pipe(model, PipelineOptions::from_config(cfg), provider);
  std::vector<Prepared> samples;
  for (const auto* r : fit) samples.push_back({r, pipe.prepare(r->image, r->class_name), mask_column(r->mask)});

  auto emit = [&](EpochMetrics m) {
    if (options.evaluate_holdout) holdout_metrics(eval_pipe, holdout, m);
    nlohmann::json j = {{"phase", m.phase},
                        {"epoch", m.epoch},
                        {"loss_global", m.loss_global},
                        {"loss_local", m.loss_local},
                        {"image_auroc", m.image_auroc ? nlohmann::json(*m.image_auroc) : nlohmann::json()},
                        {"pixel_auroc", m.pixel_auroc ? nlohmann::json(*m.pixel_auroc) : nlohmann::json()}};
    if (log_file) log_file << j.dump() << "\n" << std::flush;
    spdlog::info("phase {} epoch {}: L_global {:.4f} L_local {:.4f}", m.phase, m.epoch, m.loss_global,
                 m.loss_local);
    if (options.on_epoch) options.on_epoch(m);
    log.push_back(m);
  };

  std::mt19937_64 rng(tc.seed ^ 0x545241494eULL);
  const auto all_params = model.named_parameters();
  auto zero_all = [&] {
    for (auto& [n, p] : all_params) p->zero_grad();
  };
  const double inv_batch = 1.0 / tc.batch_size;

  // Phase 1: prompts (+ meta-network) and MDCI (+ aligners).
  {
    std::vector<ad::Var*> prompt_params = model.prompts.parameters();
    AdamW opt({{prompt_params, tc.lr_prompt_vectors}, {model.mdci.parameters(), tc.lr_mdci}},
              tc.weight_decay);
    for (int epoch = 1; epoch <= tc.epochs_phase1; ++epoch) {
      const auto t0 = std::chrono::steady_clock::now();
      EpochMetrics m;
      m.phase = 1;
      m.epoch = epoch;
      const auto order = shuffled(samples.size(), rng);
      zero_all();
      int in_batch = 0;
      for (size_t k = 0; k < order.size(); ++k) {
        const Prepared& s = samples[order[k]];
        const ForwardGraph f = pipe.forward(s.sample);
        const ad::Var lg = loss_global(f.prob, s.record->label);
        const ad::Var ll = loss_local(f.m_normal, f.m_anomaly, s.mask, tc.focal_gamma);
        const double lgv = lg.value()(0, 0), llv = ll.value()(0, 0);
        check_finite(lgv + llv, 1, epoch, s.record->id);
        m.loss_global += lgv;
        m.loss_local += llv;
        ad::backward(ad::scale(ad::add(lg, ll), inv_batch));
        if (++in_batch == tc.batch_size || k + 1 == order.size()) {
          opt.step();
          zero_all();
          in_batch = 0;
        }
      }
      m.loss_global /= static_cast<double>(samples.size());
      m.loss_local /= static_cast<double>(samples.size());
      m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      emit(m);
    }
  }

  // Phase 2: adapter only, global loss, frozen text embeddings.
  if (tc.epochs_phase2 > 0) {
    std::vector<std::pair<Mat, Mat>> text;
    for (const auto& s : samples) {
      auto [n, a] = model.prompts.encode(model.text, s.sample.bank, s.sample.pyramid->global);
      text.emplace_back(n.value(), a.value());
    }
    AdamW opt({{{&model.adapter.w1, &model.adapter.b1, &model.adapter.w2, &model.adapter.b2}, tc.lr_adapter}},
              tc.weight_decay);
    for (int epoch = 1; epoch <= tc.epochs_phase2; ++epoch) {
      const auto t0 = std::chrono::steady_clock::now();
      EpochMetrics m;
      m.phase = 2;
      m.epoch = epoch;
      const auto order = shuffled(samples.size(), rng);
      zero_all();
      int in_batch = 0;
      for (size_t k = 0; k < order.size(); ++k) {
        const size_t i = order[k];
        const ForwardGraph f = pipe.forward_with_text(samples[i].sample, text[i].first, text[i].second, false);
        const ad::Var lg = loss_global(f.prob, samples[i].record->label);
        check_finite(lg.value()(0, 0), 2, epoch, samples[i].record->id);
        m.loss_global += lg.value()(0, 0);
        ad::backward(ad::scale(lg, inv_batch));
        if (++in_batch == tc.batch_size || k + 1 == order.size()) {
          opt.step();
          zero_all();
          in_batch = 0;
        }
      }
      m.loss_global /= static_cast<double>(samples.size());
      m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      emit(m);
    }
  }
  zero_all();
  model.round_parameters_to_float();
  return log;
}

// ---------------------------------------------------------------------------
// Gradient checks

namespace {

Mat random_mat(Eigen::Index r, Eigen::Index c, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = u(rng);
  }
  return m;
}

double compare(const std::function<ad::Var()>& f, const std::vector<ad::Var*>& params, int trials,
               std::mt19937_64& rng) {
  for (auto* p : params) p->zero_grad();
  ad::backward(f());
  std::vector<Mat> grads;
  Eigen::Index total = 0;
  for (auto* p : params) {
    grads.push_back(p->grad());
    total += p->value().size();
  }
  constexpr double h = 1e-6;
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    Eigen::Index flat = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(total));
    size_t pi = 0;
    while (flat >= params[pi]->value().size()) flat -= params[pi++]->value().size();
    double& x = params[pi]->mutable_value().data()[flat];
    const double x0 = x;
    x = x0 + h;
    const double fp = f().value()(0, 0);
    x = x0 - h;
    const double fm = f().value()(0, 0);
    x = x0;
    const double numeric = (fp - fm) / (2 * h);
    const double analytic = grads[pi].data()[flat];
    const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
    worst = std::max(worst, std::abs(numeric - analytic) / denom);
  }
  return worst;
}

ad::Var weighted_sum(const ad::Var& v, const Mat& w) { return ad::sum(ad::mul(v, ad::constant(w))); }

}  // namespace

const std::vector<std::string>& grad_check_components() {
  static const std::vector<std::string> c = {"adapter",   "text_prefix", "deformable_aggregate",
                                             "stage_interaction", "loss_focal", "loss_dice",
                                             "loss_global"};
  return c;
}

double grad_check(const std::string& component, int trials, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x47524144ULL);
  if (component == "adapter") {
    AdapterWeights w = AdapterWeights::init(8, 2, seed);
    ad::Var x = ad::leaf(random_mat(1, 8, -1, 1, rng));
    const Mat r = random_mat(1, 8, -1, 1, rng);
    return compare([&] { return weighted_sum(adapter_forward(x, w), r); },
                   {&x, &w.w1, &w.b1, &w.w2, &w.b2}, trials, rng);
  }
  if (component == "text_prefix") {
    TextConfig tc;
    tc.width = 16;
    tc.layers = 2;
    tc.heads = 2;
    tc.max_length = 32;
    TextEncoder enc(tc, 8, seed);
    const TokenSequence seq = Tokenizer::encode("damaged bottle.", 4, tc.max_length);
    ad::Var prefix = ad::leaf(random_mat(4, 16, -0.5, 0.5, rng));
    ad::Var offset = ad::leaf(random_mat(1, 16, -0.2, 0.2, rng));
    const Mat r = random_mat(1, 8, -1, 1, rng);
    return compare(
        [&] {
          const TokenSequence seqs[] = {seq};
          const ad::Var pre[] = {prefix};
          return weighted_sum(enc.encode(seqs, pre, &offset), r);
        },
        {&prefix, &offset}, trials, rng);
  }
  if (component == "deformable_aggregate") {
    const int h = 5, w = 5, c = 4;
    ad::Var grid = ad::leaf(random_mat(h * w, c, -1, 1, rng));
    DeformableKernelSpec k = DeformableKernelSpec::create("3x3", c);
    k.proj.mutable_value() = random_mat(c, c, -1, 1, rng);
    k.tap_weights.mutable_value() = random_mat(1, k.tap_count(), 0, 1, rng);
    k.offset_w.mutable_value() = random_mat(9 * c, 2 * k.tap_count(), -0.05, 0.05, rng);
    k.offset_b.mutable_value() = random_mat(1, 2 * k.tap_count(), -0.9, 0.9, rng);
    const Mat r = random_mat(h * w, c, -1, 1, rng);
    std::vector<ad::Var*> params{&grid};
    for (auto* p : k.parameters()) params.push_back(p);
    return compare([&] { return weighted_sum(deformable_aggregate(grid, k, h, w), r); }, params, trials, rng);
  }
  if (component == "stage_interaction") {
    const int h = 4, w = 4, c = 4;
    ad::Var grid = ad::leaf(random_mat(h * w, c, -1, 1, rng));
    std::vector<DeformableKernelSpec> ks = {DeformableKernelSpec::create("3x3", c),
                                            DeformableKernelSpec::create("1x3", c)};
    std::vector<ad::Var*> params{&grid};
    for (auto& k : ks) {
      k.proj.mutable_value() = random_mat(c, c, -1, 1, rng);
      k.tap_weights.mutable_value() = random_mat(1, k.tap_count(), 0, 1, rng);
      k.offset_w.mutable_value() = random_mat(9 * c, 2 * k.tap_count(), -0.05, 0.05, rng);
      k.offset_b.mutable_value() = random_mat(1, 2 * k.tap_count(), -0.9, 0.9, rng);
      for (auto* p : k.parameters()) params.push_back(p);
    }
    ad::Var tn = ad::leaf(random_mat(1, c, -1, 1, rng));
    ad::Var ta = ad::leaf(random_mat(1, c, -1, 1, rng));
    params.push_back(&tn);
    params.push_back(&ta);
    const Mat r1 = random_mat(36, 1, -1, 1, rng), r2 = random_mat(36, 1, -1, 1, rng);
    return compare(
        [&] {
          const StageMaps m = stage_interaction(grid, h, w, tn, ta, ks, 6, 6, 2.0);
          return ad::add(weighted_sum(m.normal, r1), weighted_sum(m.anomaly, r2));
        },
        params, trials, rng);
  }
  if (component == "loss_focal" || component == "loss_dice") {
    ad::Var m = ad::leaf(random_mat(36, 1, 0.05, 0.95, rng));
    Mat mask = random_mat(36, 1, 0, 1, rng);
    mask = (mask.array() > 0.6).cast<double>().matrix();
    if (component == "loss_focal") return compare([&] { return loss_focal(m, mask, 2.0); }, {&m}, trials, rng);
    return compare([&] { return loss_dice(m, mask); }, {&m}, trials, rng);
  }
  if (component == "loss_global") {
    ad::Var logits = ad::leaf(random_mat(1, 2, -2, 2, rng));
    double worst = 0.0;
    for (int label : {0, 1}) {
      worst = std::max(worst, compare([&] { return loss_global(ad::softmax_rows(logits), label); }, {&logits},
                                      (trials + 1) / 2, rng));
    }
    return worst;
  }
  throw ConfigError("no gradient check registered for '" + component + "'");
}

}  // namespace filo
