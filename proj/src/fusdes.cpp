#include "filo/fusdes.hpp"

#include "filo/error.hpp"

#include <json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>

namespace filo {

namespace detail {
extern const char* const kBundledVocabularyJson;
}

const char* to_string(VocabularySource s) {
  switch (s) {
    case VocabularySource::kLlm: return "llm";
    case VocabularySource::kStaticFallback: return "static-fallback";
    case VocabularySource::kUser: return "user";
  }
  return "static-fallback";
}

// ---------------------------------------------------------------------------
// Vocabulary

std::string anomaly_query_prompt(const std::string& class_name) {
  return "Based on your knowledge, what anomalies might occur on " + class_name + "?";
}

namespace {

std::string trim(const std::string& s) {
  size_t b = 0;
  size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::string strip_list_marker(std::string line) {
  line = trim(line);
  size_t i = 0;
  while (i < line.size() && (line[i] == '-' || line[i] == '*' || line[i] == '#' ||
                             line[i] == '>' || std::isspace(static_cast<unsigned char>(line[i])))) {
    ++i;
  }
  line = line.substr(i);
  // "1." / "2)" / "3 -"
  size_t d = 0;
  while (d < line.size() && std::isdigit(static_cast<unsigned char>(line[d]))) ++d;
  if (d > 0 && d < line.size() && (line[d] == '.' || line[d] == ')' || line[d] == ':')) {
    line = line.substr(d + 1);
  }
  std::string out;
  for (char c : line) {
    if (c != '*' && c != '`' && c != '"') out.push_back(c);
  }
  return trim(out);
}

const nlohmann::json& bundled_vocabulary() {
  static const nlohmann::json j = nlohmann::json::parse(detail::kBundledVocabularyJson);
  return j;
}

}  // namespace

std::vector<std::string> normalize_anomaly_types(const std::vector<std::string>& types) {
  std::vector<std::string> out;
  for (const auto& t : types) {
    std::string s = lower(trim(t));
    while (!s.empty() && (s.back() == '.' || s.back() == ',' || s.back() == ';')) s.pop_back();
    s = trim(s);
    if (s.empty()) continue;
    if (std::find(out.begin(), out.end(), s) == out.end()) out.push_back(s);
  }
  return out;
}

std::vector<std::string> parse_anomaly_list(const std::string& text) {
  std::vector<std::string> items;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::string item = strip_list_marker(line);
    if (item.empty()) continue;
    // Drop explanations after a colon or dash separator.
    for (const char* sep : {":", " - ", " – "}) {
      const auto pos = item.find(sep);
      if (pos != std::string::npos && pos > 0) item = item.substr(0, pos);
    }
    item = trim(item);
    size_t words = 0;
    std::istringstream ws(item);
    for (std::string w; ws >> w;) ++words;
    if (words == 0 || words > 6) continue;
    items.push_back(item);
  }
  return normalize_anomaly_types(items);
}

AnomalyVocabulary static_vocabulary(const std::string& class_name) {
  const auto& j = bundled_vocabulary();
  AnomalyVocabulary v;
  v.class_name = class_name;
  v.source = VocabularySource::kStaticFallback;
  const std::string key = lower(class_name);
  const auto& list = j.contains(key) ? j.at(key) : j.at("_generic");
  v.anomaly_types = normalize_anomaly_types(list.get<std::vector<std::string>>());
  return v;
}

AnomalyVocabulary user_vocabulary(const std::string& class_name, const std::vector<std::string>& types) {
  AnomalyVocabulary v;
  v.class_name = class_name;
  v.source = VocabularySource::kUser;
  v.anomaly_types = normalize_anomaly_types(types);
  if (v.anomaly_types.empty()) throw InputError("user vocabulary for '" + class_name + "' is empty");
  return v;
}

AnomalyVocabulary fetch_anomaly_vocabulary(const std::string& class_name, LlmClient* client,
                                           ResponseCache* cache) {
  if (class_name.empty()) throw InputError("class name must not be empty");
  if (client == nullptr) return static_vocabulary(class_name);

  const std::string prompt = anomaly_query_prompt(class_name);
  std::optional<std::string> response;
  if (cache) response = cache->get(client->model(), prompt);
  if (!response) {
    try {
      response = client->complete(prompt);
      if (cache) cache->put(client->model(), prompt, *response);
    } catch (const std::exception& e) {
      spdlog::warn("LLM unavailable for '{}' ({}); using bundled vocabulary", class_name, e.what());
      return static_vocabulary(class_name);
    }
  }
  AnomalyVocabulary v;
  v.class_name = class_name;
  v.source = VocabularySource::kLlm;
  v.anomaly_types = parse_anomaly_list(*response);
  if (v.anomaly_types.empty()) {
    spdlog::warn("LLM answer for '{}' had no parsable anomaly types; using bundled vocabulary",
                 class_name);
    v = static_vocabulary(class_name);
    v.warning = true;
  }
  return v;
}

// ---------------------------------------------------------------------------
// Prompt assembly

TextFeatureBank assemble_prompts(const std::string& class_name, const AnomalyVocabulary& vocabulary,
                                 std::span<const std::string> positions, TemplateMode mode,
                                 bool include_class_name, const PromptConfig& config,
                                 int max_length) {
  if (vocabulary.anomaly_types.empty()) throw InputError("anomaly vocabulary is empty");
  std::string cls = include_class_name ? class_name : "object";
  std::replace(cls.begin(), cls.end(), '_', ' ');

  std::vector<std::optional<std::string>> pos_variants;
  if (positions.empty()) {
    pos_variants.emplace_back(std::nullopt);
  } else {
    for (const auto& p : positions) pos_variants.emplace_back(p);
  }

  TextFeatureBank bank;
  auto emit = [&](bool learnable) {
    const int slots = learnable ? config.prefix_length : 0;
    const std::string lead = learnable ? "" : "a " + config.domain + " photo of ";
    for (const auto& state : config.normal_states) {
      PromptRecord r;
      r.role = PromptRole::kNormal;
      r.learnable = learnable;
      r.text = lead + state + " " + cls + ".";
      r.tokens = Tokenizer::encode(r.text, slots, max_length);
      bank.normal.push_back(std::move(r));
    }
    for (const auto& anomaly : vocabulary.anomaly_types) {
      for (const auto& pos : pos_variants) {
        PromptRecord r;
        r.role = PromptRole::kAbnormal;
        r.learnable = learnable;
        r.anomaly_class = anomaly;
        r.position = pos;
        r.text = lead + config.abnormal_state + " " + cls + " with " + anomaly;
        if (pos) r.text += " at " + *pos;
        r.text += ".";
        r.tokens = Tokenizer::encode(r.text, slots, max_length);
        bank.abnormal.push_back(std::move(r));
      }
    }
  };
  if (mode == TemplateMode::kFixed || mode == TemplateMode::kBoth) emit(false);
  if (mode == TemplateMode::kLearnable || mode == TemplateMode::kBoth) emit(true);
  return bank;
}

// ---------------------------------------------------------------------------
// Runtime filtering

FilterResult filter_by_distances(std::span<const double> dn, std::span<const double> da) {
  if (dn.empty() || da.empty()) throw InputError("runtime filter needs non-empty prompt sets");
  FilterResult r;
  const auto [dn_min, dn_max] = std::minmax_element(dn.begin(), dn.end());
  const auto [da_min, da_max] = std::minmax_element(da.begin(), da.end());
  r.lower = std::max(*dn_min, *da_min);
  r.upper = std::min(*dn_max, *da_max);
  r.interval_empty = r.lower > r.upper;

  auto keep = [&](std::span<const double> d, std::vector<size_t>& out) {
    for (size_t i = 0; i < d.size(); ++i) {
      if (r.interval_empty || d[i] < r.lower || d[i] > r.upper) out.push_back(i);
    }
    if (out.empty()) {
      // min_element returns the first minimum, giving the stable tie rule.
      out.push_back(static_cast<size_t>(std::min_element(d.begin(), d.end()) - d.begin()));
    }
  };
  keep(dn, r.normal);
  keep(da, r.abnormal);
  return r;
}

std::vector<double> cosine_distances(const Vec& feature, std::span<const PromptRecord> records) {
  const double fn = feature.norm();
  std::vector<double> d;
  d.reserve(records.size());
  for (const auto& r : records) {
    const double denom = std::max(fn * r.embedding.norm(), 1e-12);
    d.push_back(1.0 - feature.dot(r.embedding) / denom);
  }
  return d;
}

TextFeatureBank runtime_prompt_filter(const Vec& image_feature, const TextFeatureBank& bank) {
  const auto dn = cosine_distances(image_feature, bank.normal);
  const auto da = cosine_distances(image_feature, bank.abnormal);
  const FilterResult f = filter_by_distances(dn, da);
  TextFeatureBank out;
  for (size_t i : f.normal) out.normal.push_back(bank.normal[i]);
  for (size_t i : f.abnormal) out.abnormal.push_back(bank.abnormal[i]);
  return out;
}

Vec mean_direction(std::span<const PromptRecord> records) {
  if (records.empty()) throw InputError("mean_direction of an empty prompt set");
  Vec m = Vec::Zero(records.front().embedding.size());
  for (const auto& r : records) m += r.embedding;
  m /= static_cast<double>(records.size());
  return m / std::max(m.norm(), 1e-12);
}

// ---------------------------------------------------------------------------
// Adapter and global score

AdapterWeights AdapterWeights::init(int channels, int bottleneck, std::uint64_t seed) {
  if (bottleneck >= channels) throw ConfigError("adapter bottleneck must be smaller than C");
  std::mt19937_64 rng(seed ^ 0x41444150ULL);
  auto uniform = [&rng](int rows, int cols, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    Mat m(rows, cols);
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) m(r, c) = u(rng);
    }
    return m;
  };
  AdapterWeights w;
  w.w1 = ad::leaf(uniform(channels, bottleneck, channels));
  w.b1 = ad::leaf(uniform(1, bottleneck, channels));
  w.w2 = ad::leaf(uniform(bottleneck, channels, bottleneck));
  w.b2 = ad::leaf(uniform(1, channels, bottleneck));
  return w;
}

AdapterWeights AdapterWeights::zeros(int channels, int bottleneck) {
  if (bottleneck >= channels) throw ConfigError("adapter bottleneck must be smaller than C");
  AdapterWeights w;
  w.w1 = ad::leaf(Mat::Zero(channels, bottleneck));
  w.b1 = ad::leaf(Mat::Zero(1, bottleneck));
  w.w2 = ad::leaf(Mat::Zero(bottleneck, channels));
  w.b2 = ad::leaf(Mat::Zero(1, channels));
  return w;
}

ad::Var adapter_forward(const ad::Var& x, const AdapterWeights& w) {
  if (x.rows() != 1 || x.cols() != w.w1.rows()) throw InputError("adapter input shape mismatch");
  ad::Var h = ad::relu(ad::add_row(ad::matmul(x, w.w1), w.b1));
  return ad::silu(ad::add_row(ad::matmul(h, w.w2), w.b2));
}

Vec adapter_forward(const Vec& x, const AdapterWeights& w) {
  return adapter_forward(ad::constant(Mat(x.transpose())), w).value().row(0).transpose();
}

ad::Var global_probabilities(const ad::Var& g, const ad::Var& t_normal, const ad::Var& t_abnormal,
                             double temperature) {
  std::vector<ad::Var> texts{t_normal, t_abnormal};
  ad::Var t = ad::concat_rows(texts);  // 2 x C
  return ad::softmax_rows(ad::scale(ad::matmul(g, ad::transpose(t)), temperature));
}

GlobalScore global_score(const Vec& global_raw, const AdapterWeights& adapter,
                         const TextFeatureBank& filtered, const AnomalyMap& anomaly_map,
                         double temperature) {
  Vec g = adapter_forward(global_raw, adapter);
  g /= std::max(g.norm(), 1e-12);
  const Vec tn = mean_direction(filtered.normal);
  const Vec ta = mean_direction(filtered.abnormal);
  const double ln = temperature * g.dot(tn);
  const double la = temperature * g.dot(ta);
  const double m = std::max(ln, la);
  const double en = std::exp(ln - m);
  const double ea = std::exp(la - m);
  GlobalScore s;
  s.prob = {en / (en + ea), ea / (en + ea)};
  const double map_max = anomaly_map.size() > 0 ? anomaly_map.maxCoeff() : 0.0;
  s.score = s.prob[1] + map_max;
  return s;
}

std::vector<Explanation> explain(const Vec& image_feature, const TextFeatureBank& bank) {
  if (bank.abnormal.empty()) throw InputError("explain needs abnormal prompts");
  const double fn = std::max(image_feature.norm(), 1e-12);
  std::vector<Explanation> out;
  for (const auto& r : bank.abnormal) {
    Explanation e;
    e.anomaly_class = r.anomaly_class.value_or("");
    e.position = r.position;
    e.text = r.text;
    e.similarity = image_feature.dot(r.embedding) / (fn * std::max(r.embedding.norm(), 1e-12));
    out.push_back(std::move(e));
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const Explanation& a, const Explanation& b) { return a.similarity > b.similarity; });
  return out;
}

// ---------------------------------------------------------------------------
// PromptLearner

PromptLearner::PromptLearner(int prefix_length, int text_width, int feature_dim,
                             PromptLearning method, std::uint64_t seed)
    : prefix_length_(prefix_length), method_(method) {
  std::mt19937_64 rng(seed ^ 0x50524f4dULL);
  std::normal_distribution<double> ctx(0.0, 0.02);
  auto randn = [&](int r, int c) {
    Mat m(r, c);
    for (int i = 0; i < r; ++i) {
      for (int j = 0; j < c; ++j) m(i, j) = ctx(rng);
    }
    return m;
  };
  normal_prefix = ad::leaf(randn(prefix_length, text_width));
  abnormal_prefix = ad::leaf(randn(prefix_length, text_width));
  const int hidden = std::max(feature_dim / 4, 1);
  auto uniform = [&rng](int rows, int cols, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    Mat m(rows, cols);
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) m(r, c) = u(rng);
    }
    return m;
  };
  meta_w1 = ad::leaf(uniform(feature_dim, hidden, feature_dim));
  meta_b1 = ad::leaf(uniform(1, hidden, feature_dim));
  meta_w2 = ad::leaf(uniform(hidden, text_width, hidden));
  meta_b2 = ad::leaf(uniform(1, text_width, hidden));
}

std::vector<ad::Var*> PromptLearner::parameters() {
  std::vector<ad::Var*> p{&normal_prefix, &abnormal_prefix};
  if (method_ == PromptLearning::kCoCoOp) {
    for (auto* v : {&meta_w1, &meta_b1, &meta_w2, &meta_b2}) p.push_back(v);
  }
  return p;
}

ad::Var PromptLearner::meta_offset(const Vec& global_raw) const {
  if (method_ == PromptLearning::kCoOp) return {};
  Vec g = global_raw / std::max(global_raw.norm(), 1e-12);
  ad::Var x = ad::constant(Mat(g.transpose()));
  ad::Var h = ad::relu(ad::add_row(ad::matmul(x, meta_w1), meta_b1));
  return ad::add_row(ad::matmul(h, meta_w2), meta_b2);
}

Vec PromptLearner::fixed_embedding(const TextEncoder& encoder, const PromptRecord& record) const {
  {
    std::shared_lock lock(cache_mu_);
    auto it = fixed_cache_.find(record.text);
    if (it != fixed_cache_.end()) return it->second;
  }
  Vec e = encoder.encode_one(record.tokens, Mat());
  std::unique_lock lock(cache_mu_);
  fixed_cache_.emplace(record.text, e);
  return e;
}

std::pair<ad::Var, ad::Var> PromptLearner::encode(const TextEncoder& encoder,
                                                  const TextFeatureBank& bank,
                                                  const Vec& global_raw) const {
  // Learnable records are encoded in one batch; fixed ones come from the cache.
  std::vector<TokenSequence> seqs;
  std::vector<ad::Var> prefixes;
  struct Slot {
    bool learnable;
    Eigen::Index index;  // into learnable batch or fixed rows
  };
  std::vector<Slot> slots;
  std::vector<Vec> fixed_rows;
  auto visit = [&](const std::vector<PromptRecord>& records, const ad::Var& prefix) {
    for (const auto& r : records) {
      if (r.learnable) {
        if (r.tokens.prefix_slots != prefix_length_) {
          throw ConfigError("prompt reserves " + std::to_string(r.tokens.prefix_slots) +
                            " slots but the learner holds " + std::to_string(prefix_length_));
        }
        slots.push_back({true, static_cast<Eigen::Index>(seqs.size())});
        seqs.push_back(r.tokens);
        prefixes.push_back(prefix);
      } else {
        slots.push_back({false, static_cast<Eigen::Index>(fixed_rows.size())});
        fixed_rows.push_back(fixed_embedding(encoder, r));
      }
    }
  };
  visit(bank.normal, normal_prefix);
  visit(bank.abnormal, abnormal_prefix);

  std::vector<ad::Var> blocks;
  const auto n_learn = static_cast<Eigen::Index>(seqs.size());
  if (!seqs.empty()) {
    ad::Var offset = meta_offset(global_raw);
    blocks.push_back(encoder.encode(seqs, prefixes, offset.valid() ? &offset : nullptr));
  }
  if (!fixed_rows.empty()) {
    Mat f(static_cast<Eigen::Index>(fixed_rows.size()), encoder.out_dim());
    for (size_t i = 0; i < fixed_rows.size(); ++i) f.row(static_cast<Eigen::Index>(i)) = fixed_rows[i].transpose();
    blocks.push_back(ad::constant(std::move(f)));
  }
  ad::Var all = blocks.size() == 1 ? blocks.front() : ad::concat_rows(blocks);
  std::vector<Eigen::Index> order;
  order.reserve(slots.size());
  for (const auto& s : slots) order.push_back(s.learnable ? s.index : n_learn + s.index);
  const auto n_normal = bank.normal.size();
  std::span<const Eigen::Index> ord(order);
  return {ad::gather_rows(all, ord.subspan(0, n_normal)), ad::gather_rows(all, ord.subspan(n_normal))};
}

void PromptLearner::embed(const TextEncoder& encoder, TextFeatureBank& bank,
                          const Vec& global_raw) const {
  auto [n, a] = encode(encoder, bank, global_raw);
  for (size_t i = 0; i < bank.normal.size(); ++i) {
    bank.normal[i].embedding = n.value().row(static_cast<Eigen::Index>(i)).transpose();
  }
  for (size_t i = 0; i < bank.abnormal.size(); ++i) {
    bank.abnormal[i].embedding = a.value().row(static_cast<Eigen::Index>(i)).transpose();
  }
}

}  // namespace filo
