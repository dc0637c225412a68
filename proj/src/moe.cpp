#include "lamoe/moe.hpp"

#include <cmath>

#include "lamoe/error.hpp"

namespace lamoe {

std::string to_string(MoeVariant v) {
  return v == MoeVariant::SoftMax ? "softmax" : "linear_attention";
}

ExpertNet ExpertNet::init(std::size_t d, std::uint64_t seed, const std::string& name) {
  const std::size_t hidden = 4 * d;
  ExpertNet net;
  Rng r1 = Rng::stream(seed, name + ".w1");
  Rng r2 = Rng::stream(seed, name + ".w2");
  net.w1 = Tensor::randn({d, hidden}, r1, 1.0 / std::sqrt(static_cast<double>(d)), true);
  net.b1 = Tensor::zeros({hidden}, true);
  net.w2 = Tensor::randn({hidden, d}, r2, 1.0 / std::sqrt(static_cast<double>(hidden)), true);
  net.b2 = Tensor::zeros({d}, true);
  return net;
}

Tensor ExpertNet::forward(const Tensor& x) const {
  return affine(gelu(affine(x, w1, b1)), w2, b2);
}

SoftMoeParams SoftMoeParams::init(std::size_t d_model, std::size_t d, std::size_t experts,
                                  std::size_t slots, MoeVariant variant, std::uint64_t seed,
                                  const std::string& name) {
  if (experts < 1 || slots < 1 || d < 1)
    throw ConfigError("soft moe: experts, slots and width must be at least 1");
  SoftMoeParams p;
  p.slots_per_expert = slots;
  p.variant = variant;
  Rng rin = Rng::stream(seed, name + ".in_w");
  Rng rphi = Rng::stream(seed, name + ".phi");
  Rng rout = Rng::stream(seed, name + ".out_w");
  p.in_w = Tensor::randn({d_model, d}, rin, 1.0 / std::sqrt(static_cast<double>(d_model)), true);
  p.in_b = Tensor::zeros({d}, true);
  // N(0, 1/d) keeps the dispatch logits near zero at init, so the token/slot
  // softmaxes start close to uniform.
  p.phi = Tensor::randn({d, experts * slots}, rphi, 1.0 / std::sqrt(static_cast<double>(d)), true);
  for (std::size_t i = 0; i < experts; ++i)
    p.experts.push_back(ExpertNet::init(d, seed, name + ".expert" + std::to_string(i)));
  p.out_w = Tensor::randn({d, d_model}, rout, 1.0 / std::sqrt(static_cast<double>(d)), true);
  p.out_b = Tensor::zeros({d_model}, true);
  return p;
}

void SoftMoeParams::validate() const {
  if (experts.empty() || slots_per_expert == 0)
    throw ContractError("soft moe: no experts or no slots");
  const std::size_t d = phi.extent(0);
  if (phi.extent(1) != num_slots())
    throw ContractError("soft moe: phi " + shape_str(phi.shape()) + " does not provide " +
                        std::to_string(num_slots()) + " slot columns");
  for (const ExpertNet& e : experts)
    if (e.w1.extent(0) != d || e.w2.extent(1) != d)
      throw ContractError("soft moe: expert width does not match phi width " + std::to_string(d));
}

Tensor dispatch_weights(const Tensor& x, const Tensor& phi) {
  // Columns of x*phi are normalized over tokens (axis 0).
  return softmax(matmul(x, phi), 0);
}

Tensor mix_slots(const Tensor& x, const Tensor& d_weights) {
  if (d_weights.extent(0) != x.extent(0))
    throw DimensionError("mix_slots: weights " + shape_str(d_weights.shape()) +
                         " do not match tokens " + shape_str(x.shape()));
  return matmul(transpose(d_weights), x);
}

Tensor apply_experts(const Tensor& slots, const std::vector<ExpertNet>& experts) {
  if (experts.empty()) throw ContractError("apply_experts: empty expert list");
  const std::size_t total = slots.extent(0);
  if (total % experts.size() != 0)
    throw ContractError("apply_experts: " + std::to_string(total) +
                        " slot rows do not split into " + std::to_string(experts.size()) +
                        " contiguous groups");
  const std::size_t per_expert = total / experts.size();
  std::vector<Tensor> outputs;
  outputs.reserve(experts.size());
  for (std::size_t i = 0; i < experts.size(); ++i)
    outputs.push_back(experts[i].forward(rows(slots, i * per_expert, per_expert)));
  return concat_rows(outputs);
}

Tensor combine_weights_softmax(const Tensor& logits) { return softmax(logits, 1); }

Tensor combine_softmax(const Tensor& x, const Tensor& phi, const Tensor& y_tilde) {
  return matmul(combine_weights_softmax(matmul(x, phi)), y_tilde);
}

Tensor linear_attention(const Tensor& z) {
  Tensor features = add_scalar(elu(z), 1.0);
  return matmul(features, matmul(transpose(features), z));
}

Tensor instance_norm_squash(const Tensor& c_raw, double eps) {
  const std::size_t d = c_raw.extent(1);
  return sigmoid(layer_norm(c_raw, Tensor::ones({d}), Tensor::zeros({d}), eps));
}

Tensor soft_moe_forward(const Tensor& x, const SoftMoeParams& params) {
  params.validate();
  Tensor h = affine(x, params.in_w, params.in_b);
  Tensor logits = matmul(h, params.phi);
  Tensor d_weights = softmax(logits, 0);
  Tensor slots = matmul(transpose(d_weights), h);
  Tensor y_tilde = apply_experts(slots, params.experts);
  Tensor combine;
  if (params.variant == MoeVariant::SoftMax) {
    combine = combine_weights_softmax(logits);
  } else {
    combine = instance_norm_squash(linear_attention(logits), params.norm_eps);
  }
  Tensor y = matmul(combine, y_tilde);
  return affine(y, params.out_w, params.out_b);
}

}  // namespace lamoe
