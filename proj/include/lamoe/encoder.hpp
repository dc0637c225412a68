#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lamoe/checkpoint.hpp"
#include "lamoe/moe.hpp"
#include "lamoe/tensor.hpp"

namespace lamoe {

struct EncoderConfig {
  std::size_t depth = 2;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t experts = 4;
  std::size_t slots = 8;
  std::size_t moe_dim = 64;  // token width inside the MoE layer
  std::size_t patch_size = 8;
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t embed_dim = 32;
  std::optional<MoeVariant> variant;  // absent = vanilla block

  std::size_t head_dim() const { return d_model / heads; }
  std::size_t patches_per_side() const { return image_size / patch_size; }
  std::size_t tokens() const { return patches_per_side() * patches_per_side() + 1; }
  void validate() const;
};

// ---- prompts ---------------------------------------------------------------

/// Prompt templates with a single <CLASS> placeholder, filled with "live" or
/// "fake". The default set is T-1..T-8.
struct PromptSet {
  std::vector<std::string> templates;

  const std::string& at_id(std::size_t template_id) const;  // 1-based (T-1..)
  std::size_t count() const { return templates.size(); }
};

PromptSet default_prompts();
PromptSet load_prompts(const std::string& path);
std::string render_prompt(const std::string& tmpl, bool live);

/// Lowercases, splits on non-alphanumeric bytes and hashes each token with
/// 64-bit FNV-1a into one of 4096 buckets.
std::vector<std::size_t> hash_tokens(const std::string& text);

constexpr std::size_t kTextVocab = 4096;

// ---- model -----------------------------------------------------------------

struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct BlockParams {
  Tensor ln1_gain, ln1_bias;
  AttentionParams attn;
  Tensor ln2_gain, ln2_bias;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  std::optional<SoftMoeParams> moe;
};

/// Dual-encoder model: ViT-style image tower (optionally with a soft-mixture
/// branch per block), hashed bag-of-tokens text tower, and a learnable
/// log-temperature for the similarity logits.
struct ClipModel {
  EncoderConfig cfg;
  Tensor patch_w, patch_b;  // [p*p*ch x d_model], [d_model]
  Tensor class_token;       // [1 x d_model]
  Tensor pos_embed;         // [n x d_model]
  std::vector<BlockParams> blocks;
  Tensor final_gain, final_bias;
  Tensor img_proj_w, img_proj_b;  // [d_model x embed_dim], [embed_dim]
  Tensor text_table;              // [4096 x d_model]
  Tensor text_proj_w, text_proj_b;
  Tensor log_temp;  // temperature = exp(log_temp), kept <= 100

  static ClipModel init(const EncoderConfig& cfg, std::uint64_t seed);
  /// Stable name -> tensor view used by the optimizer and checkpoints.
  NamedTensors named_params();
  void zero_grad();
};

constexpr double kMaxTemperature = 100.0;
constexpr double kLayerNormEps = 1e-5;

// ---- forward ops -----------------------------------------------------------

/// Non-overlapping patch extraction + projection + class token + positional
/// embedding. Output is [(image_size/patch)^2 + 1, d_model].
Tensor patch_embed(const Tensor& image, const ClipModel& model);

/// Multi-head scaled dot-product attention with learned projections.
Tensor attention(const Tensor& x, const AttentionParams& p, std::size_t heads);

/// Residual block: x + attn(LN(x)), then the normalized stream feeds the MLP
/// and (when present) the MoE branch, both summed into one residual.
Tensor encoder_block(const Tensor& x, const BlockParams& p);

/// Full image tower; returns a unit-norm embedding of length embed_dim.
Tensor image_encode(const Tensor& image, const ClipModel& model);

/// Hashed bag-of-tokens text tower; returns a unit-norm embedding.
Tensor text_encode(const ClipModel& model, const PromptSet& prompts, std::size_t template_id,
                   bool live);

/// Symmetric cross-entropy over the scaled similarity matrix of a batch of
/// paired image/text embeddings (rows unit-norm).
Tensor clip_loss(const Tensor& image_emb, const Tensor& text_emb, const Tensor& temperature);

struct Classification {
  double score;  // probability of "live"
  bool live;
};

/// Two-class zero-shot rule over the live/fake prompt pair.
Classification classify(const Tensor& image, const ClipModel& model, const PromptSet& prompts,
                        std::size_t template_id);

}  // namespace lamoe
