#include "filo/encoders.hpp"

#include "filo/error.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

namespace filo {

namespace {

Mat randn(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = dist(rng);
  }
  return m;
}

BlockWeights make_block(int width, int mlp_ratio, std::mt19937_64& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(width));
  const int hidden = width * mlp_ratio;
  BlockWeights b;
  b.ln1_g = ad::constant(Mat::Ones(1, width));
  b.ln1_b = ad::constant(Mat::Zero(1, width));
  b.w_qkv = ad::constant(randn(width, 3 * width, s, rng));
  b.b_qkv = ad::constant(Mat::Zero(1, 3 * width));
  b.w_out = ad::constant(randn(width, width, s, rng));
  b.b_out = ad::constant(Mat::Zero(1, width));
  b.ln2_g = ad::constant(Mat::Ones(1, width));
  b.ln2_b = ad::constant(Mat::Zero(1, width));
  b.w_fc1 = ad::constant(randn(width, hidden, s, rng));
  b.b_fc1 = ad::constant(Mat::Zero(1, hidden));
  b.w_fc2 = ad::constant(randn(hidden, width, 1.0 / std::sqrt(static_cast<double>(hidden)), rng));
  b.b_fc2 = ad::constant(Mat::Zero(1, width));
  return b;
}

// Multi-head attention over the rows of one sequence. qkv is L x 3C. With
// value_value set, weights come from softmax(V V^T) instead of softmax(Q K^T).
ad::Var attend(const ad::Var& qkv, int width, int heads, const ad::Var* mask, bool value_value) {
  const int hd = width / heads;
  const double s = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<ad::Var> outs;
  outs.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    ad::Var v = ad::slice_cols(qkv, 2 * width + h * hd, hd);
    ad::Var scores;
    if (value_value) {
      scores = ad::scale(ad::matmul(v, ad::transpose(v)), s);
    } else {
      ad::Var q = ad::slice_cols(qkv, h * hd, hd);
      ad::Var k = ad::slice_cols(qkv, width + h * hd, hd);
      scores = ad::scale(ad::matmul(q, ad::transpose(k)), s);
    }
    if (mask) scores = ad::add(scores, *mask);
    outs.push_back(ad::matmul(ad::softmax_rows(scores), v));
  }
  return heads == 1 ? outs.front() : ad::concat_cols(outs);
}

ad::Var mlp(const ad::Var& x, const BlockWeights& b) {
  ad::Var h = ad::quick_gelu(ad::add_row(ad::matmul(x, b.w_fc1), b.b_fc1));
  return ad::add_row(ad::matmul(h, b.w_fc2), b.b_fc2);
}

Mat round_to_float(const Mat& m) { return m.cast<float>().cast<double>(); }

}  // namespace

// ---------------------------------------------------------------------------
// FeaturePyramid

bool FeaturePyramid::operator==(const FeaturePyramid& o) const {
  if (image_height != o.image_height || image_width != o.image_width) return false;
  if (global.size() != o.global.size() || global != o.global) return false;
  if (stages.size() != o.stages.size()) return false;
  for (size_t i = 0; i < stages.size(); ++i) {
    const auto& a = stages[i];
    const auto& b = o.stages[i];
    if (a.layer != b.layer || a.qkv.height != b.qkv.height || a.qkv.width != b.qkv.width ||
        a.vv.height != b.vv.height || a.vv.width != b.vv.width) {
      return false;
    }
    if (a.qkv.features.rows() != b.qkv.features.rows() ||
        a.qkv.features.cols() != b.qkv.features.cols() || a.qkv.features != b.qkv.features) {
      return false;
    }
    if (a.vv.features.rows() != b.vv.features.rows() ||
        a.vv.features.cols() != b.vv.features.cols() || a.vv.features != b.vv.features) {
      return false;
    }
  }
  return true;
}

TensorContainer pyramid_to_container(const FeaturePyramid& p) {
  TensorContainer c;
  std::vector<double> manifest = {static_cast<double>(p.stages.size()),
                                  static_cast<double>(p.image_height),
                                  static_cast<double>(p.image_width),
                                  static_cast<double>(p.channels())};
  for (const auto& s : p.stages) {
    manifest.push_back(s.layer);
    manifest.push_back(s.qkv.height);
    manifest.push_back(s.qkv.width);
  }
  c.add_vector("pyramid.manifest", manifest);
  std::vector<double> g(p.global.data(), p.global.data() + p.global.size());
  c.add_vector("pyramid.global", g);
  for (size_t i = 0; i < p.stages.size(); ++i) {
    c.add_matrix("pyramid.stage" + std::to_string(i) + ".qkv", p.stages[i].qkv.features);
    c.add_matrix("pyramid.stage" + std::to_string(i) + ".vv", p.stages[i].vv.features);
  }
  return c;
}

FeaturePyramid pyramid_from_container(const TensorContainer& c) {
  if (!c.contains("pyramid.manifest")) throw FormatError("missing field 'pyramid.manifest'");
  auto manifest = c.vector("pyramid.manifest");
  if (manifest.size() < 4) throw FormatError("field 'pyramid.manifest' too short");
  const auto stage_count = static_cast<size_t>(manifest[0]);
  if (manifest.size() != 4 + 3 * stage_count) {
    throw FormatError("field 'pyramid.manifest' length does not match its stage count");
  }
  size_t payload = 0;
  for (const auto& t : c.tensors()) {
    if (t.name.rfind("pyramid.stage", 0) == 0) ++payload;
  }
  if (payload != 2 * stage_count) {
    throw FormatError("field 'pyramid.manifest' declares " + std::to_string(stage_count) +
                      " stages but payload holds " + std::to_string(payload) + " stage tensors");
  }
  FeaturePyramid p;
  p.image_height = static_cast<int>(manifest[1]);
  p.image_width = static_cast<int>(manifest[2]);
  const auto channels = static_cast<Eigen::Index>(manifest[3]);
  auto g = c.vector("pyramid.global");
  if (static_cast<Eigen::Index>(g.size()) != channels) {
    throw FormatError("field 'pyramid.global' length does not match channel count");
  }
  p.global = Eigen::Map<const Vec>(g.data(), static_cast<Eigen::Index>(g.size()));
  for (size_t i = 0; i < stage_count; ++i) {
    FeatureStage s;
    s.layer = static_cast<int>(manifest[4 + 3 * i]);
    const int h = static_cast<int>(manifest[5 + 3 * i]);
    const int w = static_cast<int>(manifest[6 + 3 * i]);
    const std::string base = "pyramid.stage" + std::to_string(i);
    s.qkv = {h, w, c.matrix(base + ".qkv")};
    s.vv = {h, w, c.matrix(base + ".vv")};
    for (const auto* grid : {&s.qkv, &s.vv}) {
      if (grid->features.rows() != static_cast<Eigen::Index>(h) * w ||
          grid->features.cols() != channels) {
        throw FormatError("field '" + base + "' shape does not match manifest");
      }
    }
    p.stages.push_back(std::move(s));
  }
  return p;
}

void save_feature_pyramid(const FeaturePyramid& pyramid, const std::filesystem::path& path) {
  pyramid_to_container(pyramid).save(path);
}

FeaturePyramid load_feature_pyramid(const std::filesystem::path& path) {
  return pyramid_from_container(TensorContainer::load(path));
}

// ---------------------------------------------------------------------------
// VisionEncoder

VisionEncoder::VisionEncoder(const VisionConfig& config, std::uint64_t seed) : config_(config) {
  std::mt19937_64 rng(seed ^ 0x5649534fULL);
  const int c = config_.width;
  const int in = 3 * config_.patch_size * config_.patch_size;
  patch_embed_ = ad::constant(randn(in, c, 1.0 / std::sqrt(static_cast<double>(in)), rng));
  class_token_ = randn(1, c, 1.0, rng);
  ln_pre_g_ = ad::constant(Mat::Ones(1, c));
  ln_pre_b_ = ad::constant(Mat::Zero(1, c));
  ln_post_g_ = ad::constant(Mat::Ones(1, c));
  ln_post_b_ = ad::constant(Mat::Zero(1, c));
  proj_ = ad::constant(randn(c, c, 1.0 / std::sqrt(static_cast<double>(c)), rng));
  for (int l = 0; l < config_.layers; ++l) blocks_.push_back(make_block(c, config_.mlp_ratio, rng));
}

Mat VisionEncoder::embed(const Image& image) const {
  const int p = config_.patch_size;
  if (image.height <= 0 || image.width <= 0 || image.height % p != 0 || image.width % p != 0) {
    throw InputError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                     " is not divisible by patch size " + std::to_string(p));
  }
  if (image.pixels.size() != static_cast<size_t>(image.height) * image.width * 3) {
    throw InputError("image pixel buffer does not match its dimensions");
  }
  const int gh = image.height / p;
  const int gw = image.width / p;
  const int c = config_.width;
  Mat patches(gh * gw, 3 * p * p);
  for (int y = 0; y < gh; ++y) {
    for (int x = 0; x < gw; ++x) {
      int k = 0;
      for (int dy = 0; dy < p; ++dy) {
        for (int dx = 0; dx < p; ++dx) {
          for (int ch = 0; ch < 3; ++ch) {
            patches(y * gw + x, k++) = (image.at(y * p + dy, x * p + dx, ch) - 0.5) / 0.25;
          }
        }
      }
    }
  }
  Mat tokens(gh * gw + 1, c);
  tokens.row(0) = class_token_;
  tokens.bottomRows(gh * gw) = patches * patch_embed_.value();
  // Fixed 2-D sinusoidal positions so any grid size is accepted.
  for (int y = 0; y < gh; ++y) {
    for (int x = 0; x < gw; ++x) {
      for (int j = 0; j < c; ++j) {
        const int quarter = c / 4;
        const int band = j % std::max(quarter, 1);
        const double freq = std::pow(100.0, -static_cast<double>(band) / std::max(quarter, 1));
        const double pos = (j < c / 2 ? y : x) * freq;
        tokens(1 + y * gw + x, j) += 0.5 * (((j / std::max(quarter, 1)) % 2 == 0) ? std::sin(pos) : std::cos(pos));
      }
    }
  }
  return tokens;
}

FeaturePyramid VisionEncoder::encode(const Image& image) const {
  const int c = config_.width;
  const int p = config_.patch_size;
  const int gh = image.height / p;
  const int gw = image.width / p;
  ad::Var x = ad::layer_norm_rows(ad::constant(embed(image)), ln_pre_g_, ln_pre_b_);
  ad::Var vv;
  const Eigen::Index n_patch = static_cast<Eigen::Index>(gh) * gw;

  auto project = [&](const ad::Var& tokens) {
    ad::Var patches = ad::slice_rows(tokens, 1, n_patch);
    return round_to_float(
        ad::matmul(ad::layer_norm_rows(patches, ln_post_g_, ln_post_b_), proj_).value());
  };

  FeaturePyramid out;
  out.image_height = image.height;
  out.image_width = image.width;
  for (int l = 1; l <= config_.layers; ++l) {
    const BlockWeights& b = blocks_[l - 1];
    if (l == config_.vv_start) vv = x;
    if (l >= config_.vv_start) {
      ad::Var h = ad::layer_norm_rows(vv, b.ln1_g, b.ln1_b);
      ad::Var qkv = ad::add_row(ad::matmul(h, b.w_qkv), b.b_qkv);
      ad::Var a = attend(qkv, c, config_.heads, nullptr, true);
      vv = ad::add(vv, ad::add_row(ad::matmul(a, b.w_out), b.b_out));
    }
    ad::Var h = ad::layer_norm_rows(x, b.ln1_g, b.ln1_b);
    ad::Var qkv = ad::add_row(ad::matmul(h, b.w_qkv), b.b_qkv);
    ad::Var a = attend(qkv, c, config_.heads, nullptr, false);
    x = ad::add(x, ad::add_row(ad::matmul(a, b.w_out), b.b_out));
    x = ad::add(x, mlp(ad::layer_norm_rows(x, b.ln2_g, b.ln2_b), b));

    if (std::find(config_.taps.begin(), config_.taps.end(), l) != config_.taps.end()) {
      FeatureStage s;
      s.layer = l;
      s.qkv = {gh, gw, project(x)};
      s.vv = {gh, gw, l >= config_.vv_start ? project(vv) : s.qkv.features};
      out.stages.push_back(std::move(s));
    }
  }
  Mat g = ad::matmul(ad::layer_norm_rows(ad::slice_rows(x, 0, 1), ln_post_g_, ln_post_b_), proj_)
              .value();
  out.global = round_to_float(g).row(0).transpose();
  return out;
}

Mat VisionEncoder::vv_attention_weights(const Mat& tokens, int layer, int head) const {
  if (layer < 1 || layer > config_.layers) throw ConfigError("layer out of range");
  if (head < 0 || head >= config_.heads) throw ConfigError("head out of range");
  const BlockWeights& b = blocks_[layer - 1];
  const int c = config_.width;
  const int hd = c / config_.heads;
  ad::Var h = ad::layer_norm_rows(ad::constant(tokens), b.ln1_g, b.ln1_b);
  ad::Var qkv = ad::add_row(ad::matmul(h, b.w_qkv), b.b_qkv);
  ad::Var v = ad::slice_cols(qkv, 2 * c + head * hd, hd);
  return ad::softmax_rows(ad::scale(ad::matmul(v, ad::transpose(v)), 1.0 / std::sqrt(hd))).value();
}

// ---------------------------------------------------------------------------
// Tokenizer

namespace {
constexpr std::string_view kAlphabet = "abcdefghijklmnopqrstuvwxyz0123456789 -_.,'/()";
}

int Tokenizer::vocab_size() { return 4 + static_cast<int>(kAlphabet.size()); }

int Tokenizer::token_for(char c) {
  if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  const auto pos = kAlphabet.find(c);
  return pos == std::string_view::npos ? kUnk : 4 + static_cast<int>(pos);
}

TokenSequence Tokenizer::encode(const std::string& text, int prefix_slots, int max_length) {
  TokenSequence seq;
  seq.prefix_slots = prefix_slots;
  seq.token_ids.push_back(kBos);
  for (int i = 0; i < prefix_slots; ++i) seq.token_ids.push_back(kPad);
  const int budget = max_length - 2 - prefix_slots;
  if (budget < 0) throw ConfigError("prefix slots exceed the maximum sequence length");
  int used = 0;
  for (char ch : text) {
    if (used == budget) break;
    seq.token_ids.push_back(token_for(ch));
    ++used;
  }
  seq.token_ids.push_back(kEos);
  return seq;
}

// ---------------------------------------------------------------------------
// TextEncoder

TextEncoder::TextEncoder(const TextConfig& config, int out_dim, std::uint64_t seed)
    : config_(config), out_dim_(out_dim) {
  std::mt19937_64 rng(seed ^ 0x54455854ULL);
  const int w = config_.width;
  token_embed_ = randn(Tokenizer::vocab_size(), w, 0.02, rng);
  pos_embed_ = randn(config_.max_length, w, 0.01, rng);
  ln_final_g_ = ad::constant(Mat::Ones(1, w));
  ln_final_b_ = ad::constant(Mat::Zero(1, w));
  proj_ = ad::constant(randn(w, out_dim, 1.0 / std::sqrt(static_cast<double>(w)), rng));
  for (int l = 0; l < config_.layers; ++l) blocks_.push_back(make_block(w, config_.mlp_ratio, rng));
}

ad::Var TextEncoder::encode(std::span<const TokenSequence> seqs, std::span<const ad::Var> prefixes,
                            const ad::Var* meta_offset) const {
  if (seqs.empty()) throw InputError("encode: empty batch");
  if (prefixes.size() != seqs.size()) throw ConfigError("encode: one prefix entry per sequence");
  const int w = config_.width;
  if (meta_offset && (meta_offset->rows() != 1 || meta_offset->cols() != w)) {
    throw ConfigError("encode: meta offset must be 1 x text width");
  }

  std::vector<ad::Var> pieces;
  std::vector<Eigen::Index> starts;
  std::vector<Eigen::Index> lengths;
  std::vector<Eigen::Index> eos_rows;
  Eigen::Index at = 0;
  for (size_t i = 0; i < seqs.size(); ++i) {
    const auto& seq = seqs[i];
    const auto len = static_cast<Eigen::Index>(seq.token_ids.size());
    if (len > config_.max_length) throw InputError("token sequence exceeds max length");
    if (seq.prefix_slots < 0 || seq.prefix_slots + 2 > len) {
      throw InputError("token sequence has inconsistent prefix slots");
    }
    Mat emb(len, w);
    for (Eigen::Index t = 0; t < len; ++t) {
      const int id = seq.token_ids[t];
      if (id < 0 || id >= Tokenizer::vocab_size()) {
        throw InputError("token id " + std::to_string(id) + " outside vocabulary");
      }
      emb.row(t) = token_embed_.row(id) + pos_embed_.row(t);
    }
    if (seq.prefix_slots > 0) {
      const ad::Var& pre = prefixes[i];
      if (!pre.valid() || pre.rows() != seq.prefix_slots || pre.cols() != w) {
        throw ConfigError("prefix vectors have " + std::to_string(pre.valid() ? pre.rows() : 0) +
                          " rows but the sequence reserves " + std::to_string(seq.prefix_slots) +
                          " slots");
      }
      ad::Var slots = meta_offset ? ad::add_row(pre, *meta_offset) : pre;
      slots = ad::add(slots, ad::constant(pos_embed_.middleRows(1, seq.prefix_slots)));
      pieces.push_back(ad::constant(emb.topRows(1)));
      pieces.push_back(slots);
      pieces.push_back(ad::constant(emb.bottomRows(len - 1 - seq.prefix_slots)));
    } else {
      pieces.push_back(ad::constant(std::move(emb)));
    }
    starts.push_back(at);
    lengths.push_back(len);
    at += len;
    eos_rows.push_back(at - 1);
  }
  ad::Var x = ad::concat_rows(pieces);

  std::map<Eigen::Index, ad::Var> masks;
  auto causal = [&](Eigen::Index len) -> const ad::Var& {
    auto it = masks.find(len);
    if (it != masks.end()) return it->second;
    Mat m = Mat::Zero(len, len);
    for (Eigen::Index r = 0; r < len; ++r) {
      for (Eigen::Index c = r + 1; c < len; ++c) m(r, c) = -1e9;
    }
    return masks.emplace(len, ad::constant(std::move(m))).first->second;
  };

  for (const auto& b : blocks_) {
    ad::Var h = ad::layer_norm_rows(x, b.ln1_g, b.ln1_b);
    ad::Var qkv = ad::add_row(ad::matmul(h, b.w_qkv), b.b_qkv);
    std::vector<ad::Var> outs;
    outs.reserve(seqs.size());
    for (size_t i = 0; i < seqs.size(); ++i) {
      const ad::Var& m = causal(lengths[i]);
      outs.push_back(attend(ad::slice_rows(qkv, starts[i], lengths[i]), w, config_.heads, &m, false));
    }
    ad::Var a = outs.size() == 1 ? outs.front() : ad::concat_rows(outs);
    x = ad::add(x, ad::add_row(ad::matmul(a, b.w_out), b.b_out));
    x = ad::add(x, mlp(ad::layer_norm_rows(x, b.ln2_g, b.ln2_b), b));
  }
  ad::Var last = ad::gather_rows(x, eos_rows);
  ad::Var feat = ad::matmul(ad::layer_norm_rows(last, ln_final_g_, ln_final_b_), proj_);
  return ad::l2_normalize_rows(feat);
}

Vec TextEncoder::encode_one(const TokenSequence& seq, const Mat& prefix,
                            const std::optional<RowVec>& meta_offset) const {
  std::vector<TokenSequence> seqs{seq};
  std::vector<ad::Var> pre{seq.prefix_slots > 0 || prefix.size() > 0 ? ad::constant(prefix)
                                                                      : ad::Var()};
  if (seq.prefix_slots == 0 && prefix.rows() != 0) {
    throw ConfigError("prefix vectors given for a sequence without prefix slots");
  }
  ad::Var off;
  if (meta_offset) off = ad::constant(Mat(*meta_offset));
  return encode(seqs, pre, meta_offset ? &off : nullptr).value().row(0).transpose();
}

}  // namespace filo
