#pragma once

// Frozen toy encoders standing in for a CLIP-style backbone.
//
// VisionEncoder: patch-embedding transformer whose tap layers expose two patch
// grids each: the standard query-key attention stream and a value-value
// attention stream that branches off at `vv_start`. TextEncoder: causal
// byte-level transformer with reserved slots for learnable prefix vectors.

#include "filo/autodiff.hpp"
#include "filo/config.hpp"
#include "filo/tensor_io.hpp"
#include "filo/types.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace filo {

struct FeatureStage {
  int layer = 0;  // 1-based encoder layer the stage was tapped from
  PatchGrid qkv;
  PatchGrid vv;
};

struct FeaturePyramid {
  std::vector<FeatureStage> stages;
  Vec global;  // class-token feature of the standard path
  int image_height = 0;
  int image_width = 0;

  int channels() const { return static_cast<int>(global.size()); }
  bool operator==(const FeaturePyramid& other) const;
};

TensorContainer pyramid_to_container(const FeaturePyramid& pyramid);
FeaturePyramid pyramid_from_container(const TensorContainer& container);
void save_feature_pyramid(const FeaturePyramid& pyramid, const std::filesystem::path& path);
FeaturePyramid load_feature_pyramid(const std::filesystem::path& path);

// Frozen transformer block; weights are graph constants shared across calls.
struct BlockWeights {
  ad::Var ln1_g, ln1_b;
  ad::Var w_qkv, b_qkv;  // C x 3C, 1 x 3C
  ad::Var w_out, b_out;
  ad::Var ln2_g, ln2_b;
  ad::Var w_fc1, b_fc1;
  ad::Var w_fc2, b_fc2;
};

class VisionEncoder {
 public:
  VisionEncoder(const VisionConfig& config, std::uint64_t seed);

  FeaturePyramid encode(const Image& image) const;

  // Value-value attention weights (tokens x tokens) of one head of a layer,
  // evaluated on the given pre-layer token matrix. Exposed for inspection.
  Mat vv_attention_weights(const Mat& tokens, int layer, int head) const;

  const VisionConfig& config() const { return config_; }
  int channels() const { return config_.width; }

 private:
  Mat embed(const Image& image) const;

  VisionConfig config_;
  ad::Var patch_embed_;  // (3*P*P) x C
  Mat class_token_;      // 1 x C
  ad::Var ln_pre_g_, ln_pre_b_;
  ad::Var ln_post_g_, ln_post_b_;
  ad::Var proj_;  // C x C
  std::vector<BlockWeights> blocks_;
};

struct TokenSequence {
  std::vector<int> token_ids;  // BOS, prefix placeholders, text bytes, EOS
  int prefix_slots = 0;        // placeholders occupy positions 1..prefix_slots
};

class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  static int vocab_size();
  static int token_for(char c);
  static TokenSequence encode(const std::string& text, int prefix_slots, int max_length);
};

class TextEncoder {
 public:
  TextEncoder(const TextConfig& config, int out_dim, std::uint64_t seed);

  // Encodes a batch. prefixes[i] must hold seqs[i].prefix_slots rows of width
  // config.width (or be invalid when the sequence has no prefix slots). The
  // optional meta_offset (1 x width) is added to every prefix row. Returns a
  // (batch x out_dim) matrix of unit rows, differentiable w.r.t. the prefixes
  // and the offset.
  ad::Var encode(std::span<const TokenSequence> seqs, std::span<const ad::Var> prefixes,
                 const ad::Var* meta_offset = nullptr) const;

  // Single-sequence convenience form.
  Vec encode_one(const TokenSequence& seq, const Mat& prefix,
                 const std::optional<RowVec>& meta_offset = std::nullopt) const;

  int width() const { return config_.width; }
  int out_dim() const { return out_dim_; }
  const TextConfig& config() const { return config_; }

 private:
  TextConfig config_;
  int out_dim_;
  Mat token_embed_;  // vocab x width
  Mat pos_embed_;    // max_length x width
  ad::Var ln_final_g_, ln_final_b_;
  ad::Var proj_;  // width x out_dim
  std::vector<BlockWeights> blocks_;
};

}  // namespace filo
