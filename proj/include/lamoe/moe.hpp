#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lamoe/tensor.hpp"

namespace lamoe {

/// How the per-token combine weights over slot outputs are produced:
/// a row softmax of the mixing logits, or denominator-free linear attention
/// followed by a row-wise instance-norm squash into (0, 1).
enum class MoeVariant { SoftMax, LinearAttn };

std::string to_string(MoeVariant v);

/// Feed-forward expert: affine(d -> 4d), GELU, affine(4d -> d).
struct ExpertNet {
  Tensor w1, b1, w2, b2;

  static ExpertNet init(std::size_t d, std::uint64_t seed, const std::string& name);
  Tensor forward(const Tensor& x) const;
};

/// Parameters of one soft-mixture layer: slot matrix phi [d x (e*s)],
/// e experts over s slots each, and the linear projections that bracket the
/// layer (d_model -> d on entry, d -> d_model on exit).
struct SoftMoeParams {
  Tensor in_w, in_b;   // [d_model x d], [d]
  Tensor phi;          // [d x (e*s)]
  std::vector<ExpertNet> experts;
  Tensor out_w, out_b;  // [d x d_model], [d_model]
  std::size_t slots_per_expert = 0;
  MoeVariant variant = MoeVariant::SoftMax;
  double norm_eps = 1e-5;

  std::size_t num_experts() const { return experts.size(); }
  std::size_t num_slots() const { return experts.size() * slots_per_expert; }

  static SoftMoeParams init(std::size_t d_model, std::size_t d, std::size_t experts,
                            std::size_t slots, MoeVariant variant, std::uint64_t seed,
                            const std::string& name);
  void validate() const;
};

/// Dispatch weights D [n x (e*s)]: softmax of x phi over the token axis, so
/// every column is a convex weighting of the tokens.
Tensor dispatch_weights(const Tensor& x, const Tensor& phi);

/// Slot inputs: transpose(D) x, one convex token mixture per slot.
Tensor mix_slots(const Tensor& x, const Tensor& d_weights);

/// Runs expert i over its contiguous group of s slot rows.
Tensor apply_experts(const Tensor& slots, const std::vector<ExpertNet>& experts);

/// Row-stochastic combine: softmax of x phi over the slot axis, then C y_tilde.
Tensor combine_softmax(const Tensor& x, const Tensor& phi, const Tensor& y_tilde);

/// Row-softmax combine weights alone (for inspection and property tests).
Tensor combine_weights_softmax(const Tensor& logits);

/// Denominator-free linear attention with Q = K = V = z and the feature map
/// phi(v) = elu(v) + 1: out = phi(z) (phi(z)^T z). Rows are sequence
/// positions; there is no normalizing term.
Tensor linear_attention(const Tensor& z);

/// Per-row standardization followed by a logistic sigmoid; every output lies
/// strictly in (0, 1).
Tensor instance_norm_squash(const Tensor& c_raw, double eps);

/// Full layer: in_proj, dispatch, slot mixing, experts, combine (softmax or
/// linear-attention route), out_proj. Token count is preserved.
Tensor soft_moe_forward(const Tensor& x, const SoftMoeParams& params);

}  // namespace lamoe
