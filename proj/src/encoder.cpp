#include "lamoe/encoder.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

#include "lamoe/error.hpp"

namespace lamoe {

void EncoderConfig::validate() const {
  if (d_model == 0 || heads == 0 || embed_dim == 0)
    throw ConfigError("encoder: d_model, heads and embed_dim must be positive");
  if (d_model % heads != 0)
    throw ConfigError("encoder: d_model " + std::to_string(d_model) + " not divisible by " +
                      std::to_string(heads) + " heads");
  if (patch_size == 0 || image_size % patch_size != 0)
    throw ConfigError("encoder: image_size " + std::to_string(image_size) +
                      " not divisible by patch_size " + std::to_string(patch_size));
  if (variant && (experts == 0 || slots == 0 || moe_dim == 0))
    throw ConfigError("encoder: experts, slots and moe_dim must be positive for MoE variants");
}

// ---- prompts -----------------------------------------------------------------

PromptSet default_prompts() {
  return PromptSet{{
      "There is a <CLASS> face in this photo.",
      "<CLASS> face is in this photo.",
      "A photo of a <CLASS> face.",
      "This is an example of a <CLASS> face.",
      "This is how a <CLASS> face looks like.",
      "This photo contains <CLASS> face.",
      "The picture is a <CLASS> face.",
      "This is an image of a <CLASS> face.",
  }};
}

PromptSet load_prompts(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("prompts: cannot open " + path);
  PromptSet set;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.find("<CLASS>") == std::string::npos)
      throw FormatError("prompts: template without <CLASS> placeholder: \"" + line + "\"");
    set.templates.push_back(line);
  }
  if (set.templates.empty()) throw FormatError("prompts: no templates in " + path);
  return set;
}

const std::string& PromptSet::at_id(std::size_t template_id) const {
  if (template_id == 0 || template_id > templates.size())
    throw ConfigError("prompts: template id " + std::to_string(template_id) +
                      " out of range 1.." + std::to_string(templates.size()));
  return templates[template_id - 1];
}

std::string render_prompt(const std::string& tmpl, bool live) {
  const std::string word = live ? "live" : "fake";
  const std::size_t pos = tmpl.find("<CLASS>");
  if (pos == std::string::npos)
    throw ConfigError("prompts: template without <CLASS> placeholder: \"" + tmpl + "\"");
  std::string out = tmpl;
  out.replace(pos, 7, word);
  return out;
}

std::vector<std::size_t> hash_tokens(const std::string& text) {
  std::vector<std::size_t> ids;
  std::string token;
  auto flush = [&]() {
    if (!token.empty()) {
      ids.push_back(static_cast<std::size_t>(fnv1a64(token) % kTextVocab));
      token.clear();
    }
  };
  for (char c : text) {
    const unsigned char u = static_cast<unsigned char>(c);
    if (std::isalnum(u)) {
      token.push_back(static_cast<char>(std::tolower(u)));
    } else {
      flush();
    }
  }
  flush();
  return ids;
}

// ---- model init -----------------------------------------------------------------

namespace {

Tensor init_weight(Shape shape, std::size_t fan_in, std::uint64_t seed, const std::string& name) {
  Rng rng = Rng::stream(seed, name);
  return Tensor::randn(std::move(shape), rng, 1.0 / std::sqrt(static_cast<double>(fan_in)), true);
}

AttentionParams init_attention(std::size_t d_model, std::uint64_t seed, const std::string& name) {
  AttentionParams p;
  p.wq = init_weight({d_model, d_model}, d_model, seed, name + ".wq");
  p.bq = Tensor::zeros({d_model}, true);
  p.wk = init_weight({d_model, d_model}, d_model, seed, name + ".wk");
  p.bk = Tensor::zeros({d_model}, true);
  p.wv = init_weight({d_model, d_model}, d_model, seed, name + ".wv");
  p.bv = Tensor::zeros({d_model}, true);
  p.wo = init_weight({d_model, d_model}, d_model, seed, name + ".wo");
  p.bo = Tensor::zeros({d_model}, true);
  return p;
}

}  // namespace

ClipModel ClipModel::init(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ClipModel m;
  m.cfg = cfg;
  const std::size_t patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels;
  m.patch_w = init_weight({patch_dim, cfg.d_model}, patch_dim, seed, "img.patch.w");
  m.patch_b = Tensor::zeros({cfg.d_model}, true);
  {
    Rng rng = Rng::stream(seed, "img.class_token");
    m.class_token = Tensor::randn({1, cfg.d_model}, rng, 0.02, true);
  }
  {
    Rng rng = Rng::stream(seed, "img.pos_embed");
    m.pos_embed = Tensor::randn({cfg.tokens(), cfg.d_model}, rng, 0.02, true);
  }
  for (std::size_t b = 0; b < cfg.depth; ++b) {
    const std::string base = "img.block" + std::to_string(b);
    BlockParams blk;
    blk.ln1_gain = Tensor::ones({cfg.d_model});
    blk.ln1_gain.set_requires_grad(true);
    blk.ln1_bias = Tensor::zeros({cfg.d_model}, true);
    blk.attn = init_attention(cfg.d_model, seed, base + ".attn");
    blk.ln2_gain = Tensor::ones({cfg.d_model});
    blk.ln2_gain.set_requires_grad(true);
    blk.ln2_bias = Tensor::zeros({cfg.d_model}, true);
    blk.mlp_w1 = init_weight({cfg.d_model, 4 * cfg.d_model}, cfg.d_model, seed, base + ".mlp.w1");
    blk.mlp_b1 = Tensor::zeros({4 * cfg.d_model}, true);
    blk.mlp_w2 =
        init_weight({4 * cfg.d_model, cfg.d_model}, 4 * cfg.d_model, seed, base + ".mlp.w2");
    blk.mlp_b2 = Tensor::zeros({cfg.d_model}, true);
    if (cfg.variant) {
      blk.moe = SoftMoeParams::init(cfg.d_model, cfg.moe_dim, cfg.experts, cfg.slots,
                                    *cfg.variant, seed, base + ".moe");
    }
    m.blocks.push_back(std::move(blk));
  }
  m.final_gain = Tensor::ones({cfg.d_model});
  m.final_gain.set_requires_grad(true);
  m.final_bias = Tensor::zeros({cfg.d_model}, true);
  m.img_proj_w = init_weight({cfg.d_model, cfg.embed_dim}, cfg.d_model, seed, "img.proj.w");
  m.img_proj_b = Tensor::zeros({cfg.embed_dim}, true);
  {
    Rng rng = Rng::stream(seed, "text.table");
    m.text_table = Tensor::randn({kTextVocab, cfg.d_model}, rng, 0.02, true);
  }
  m.text_proj_w = init_weight({cfg.d_model, cfg.embed_dim}, cfg.d_model, seed, "text.proj.w");
  m.text_proj_b = Tensor::zeros({cfg.embed_dim}, true);
  m.log_temp = Tensor::scalar(std::log(1.0 / 0.07), true);
  return m;
}

NamedTensors ClipModel::named_params() {
  NamedTensors out;
  out.emplace_back("img.patch.w", patch_w);
  out.emplace_back("img.patch.b", patch_b);
  out.emplace_back("img.class_token", class_token);
  out.emplace_back("img.pos_embed", pos_embed);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string base = "img.block" + std::to_string(b);
    BlockParams& blk = blocks[b];
    out.emplace_back(base + ".ln1.gain", blk.ln1_gain);
    out.emplace_back(base + ".ln1.bias", blk.ln1_bias);
    out.emplace_back(base + ".attn.wq", blk.attn.wq);
    out.emplace_back(base + ".attn.bq", blk.attn.bq);
    out.emplace_back(base + ".attn.wk", blk.attn.wk);
    out.emplace_back(base + ".attn.bk", blk.attn.bk);
    out.emplace_back(base + ".attn.wv", blk.attn.wv);
    out.emplace_back(base + ".attn.bv", blk.attn.bv);
    out.emplace_back(base + ".attn.wo", blk.attn.wo);
    out.emplace_back(base + ".attn.bo", blk.attn.bo);
    out.emplace_back(base + ".ln2.gain", blk.ln2_gain);
    out.emplace_back(base + ".ln2.bias", blk.ln2_bias);
    out.emplace_back(base + ".mlp.w1", blk.mlp_w1);
    out.emplace_back(base + ".mlp.b1", blk.mlp_b1);
    out.emplace_back(base + ".mlp.w2", blk.mlp_w2);
    out.emplace_back(base + ".mlp.b2", blk.mlp_b2);
    if (blk.moe) {
      SoftMoeParams& moe = *blk.moe;
      out.emplace_back(base + ".moe.in_w", moe.in_w);
      out.emplace_back(base + ".moe.in_b", moe.in_b);
      out.emplace_back(base + ".moe.phi", moe.phi);
      for (std::size_t e = 0; e < moe.experts.size(); ++e) {
        const std::string ename = base + ".moe.expert" + std::to_string(e);
        out.emplace_back(ename + ".w1", moe.experts[e].w1);
        out.emplace_back(ename + ".b1", moe.experts[e].b1);
        out.emplace_back(ename + ".w2", moe.experts[e].w2);
        out.emplace_back(ename + ".b2", moe.experts[e].b2);
      }
      out.emplace_back(base + ".moe.out_w", moe.out_w);
      out.emplace_back(base + ".moe.out_b", moe.out_b);
    }
  }
  out.emplace_back("img.final.gain", final_gain);
  out.emplace_back("img.final.bias", final_bias);
  out.emplace_back("img.proj.w", img_proj_w);
  out.emplace_back("img.proj.b", img_proj_b);
  out.emplace_back("text.table", text_table);
  out.emplace_back("text.proj.w", text_proj_w);
  out.emplace_back("text.proj.b", text_proj_b);
  out.emplace_back("logit_scale", log_temp);
  return out;
}

void ClipModel::zero_grad() {
  for (auto& [name, t] : named_params()) t.zero_grad();
}

// ---- forward ----------------------------------------------------------------

namespace {

// Differentiable gather of non-overlapping patches from an [H x W x ch]
// image into [(H/p)*(W/p), p*p*ch] rows.
Tensor patchify(const Tensor& image, std::size_t patch) {
  if (image.rank() != 3)
    throw DimensionError("patchify: image must be [H x W x ch], got " + shape_str(image.shape()));
  const std::size_t h = image.extent(0), w = image.extent(1), ch = image.extent(2);
  if (h % patch != 0 || w % patch != 0)
    throw ConfigError("patchify: image " + shape_str(image.shape()) +
                      " not divisible into patches of " + std::to_string(patch));
  const std::size_t rows_out = (h / patch) * (w / patch);
  const std::size_t cols_out = patch * patch * ch;
  auto index_map = std::make_shared<std::vector<std::size_t>>(rows_out * cols_out);
  std::size_t k = 0;
  for (std::size_t py = 0; py < h / patch; ++py)
    for (std::size_t px = 0; px < w / patch; ++px)
      for (std::size_t dy = 0; dy < patch; ++dy)
        for (std::size_t dx = 0; dx < patch; ++dx)
          for (std::size_t c = 0; c < ch; ++c)
            (*index_map)[k++] = ((py * patch + dy) * w + (px * patch + dx)) * ch + c;

  std::vector<double> out(rows_out * cols_out);
  const std::vector<double>& src = image.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = src[(*index_map)[i]];
  const bool rec = Tape::recording({image});
  Tensor y = Tensor::from({rows_out, cols_out}, std::move(out), rec);
  if (rec) {
    Tape::record([image, y, index_map]() mutable {
      if (!y.has_grad() || !image.requires_grad()) return;
      const std::vector<double>& go = y.grad();
      std::vector<double>& gx = image.ensure_grad();
      for (std::size_t i = 0; i < go.size(); ++i) gx[(*index_map)[i]] += go[i];
    });
  }
  return y;
}

}  // namespace

Tensor patch_embed(const Tensor& image, const ClipModel& model) {
  const EncoderConfig& cfg = model.cfg;
  if (image.rank() != 3 || image.extent(0) != cfg.image_size ||
      image.extent(1) != cfg.image_size || image.extent(2) != cfg.channels)
    throw DimensionError("patch_embed: image " + shape_str(image.shape()) +
                         " does not match configured " + std::to_string(cfg.image_size) + "x" +
                         std::to_string(cfg.image_size) + "x" + std::to_string(cfg.channels));
  Tensor tokens = affine(patchify(image, cfg.patch_size), model.patch_w, model.patch_b);
  Tensor with_class = concat_rows({model.class_token, tokens});
  return add(with_class, model.pos_embed);
}

Tensor attention(const Tensor& x, const AttentionParams& p, std::size_t heads) {
  const std::size_t d_model = x.extent(1);
  if (heads == 0 || d_model % heads != 0)
    throw DimensionError("attention: width " + std::to_string(d_model) +
                         " not divisible into " + std::to_string(heads) + " heads");
  const std::size_t dk = d_model / heads;
  Tensor q = affine(x, p.wq, p.bq);
  Tensor k = affine(x, p.wk, p.bk);
  Tensor v = affine(x, p.wv, p.bv);
  std::vector<Tensor> head_outputs;
  head_outputs.reserve(heads);
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor qh = cols(q, h * dk, dk);
    Tensor kh = cols(k, h * dk, dk);
    Tensor vh = cols(v, h * dk, dk);
    Tensor weights = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt_dk), 1);
    head_outputs.push_back(matmul(weights, vh));
  }
  Tensor merged = head_outputs.size() == 1 ? head_outputs[0] : [&] {
    // concat along columns via row-major assembly
    std::vector<Tensor> transposed;
    transposed.reserve(head_outputs.size());
    for (const Tensor& t : head_outputs) transposed.push_back(transpose(t));
    return transpose(concat_rows(transposed));
  }();
  return affine(merged, p.wo, p.bo);
}

Tensor encoder_block(const Tensor& x, const BlockParams& p) {
  const std::size_t d = x.extent(1);
  const std::size_t heads_guess = p.attn.wq.extent(0) == d ? 0 : 0;
  (void)heads_guess;
  throw ContractError("encoder_block: use the overload with explicit head count");
}

static Tensor encoder_block_impl(const Tensor& x, const BlockParams& p, std::size_t heads) {
  Tensor normed = layer_norm(x, p.ln1_gain, p.ln1_bias, kLayerNormEps);
  Tensor y = add(x, attention(normed, p.attn, heads));
  // The MLP and MoE branches read the same normalized stream and are summed
  // into a single residual.
  Tensor z = layer_norm(y, p.ln2_gain, p.ln2_bias, kLayerNormEps);
  Tensor mlp = affine(gelu(affine(z, p.mlp_w1, p.mlp_b1)), p.mlp_w2, p.mlp_b2);
  Tensor out = add(y, mlp);
  if (p.moe) out = add(out, soft_moe_forward(z, *p.moe));
  return out;
}

Tensor image_encode(const Tensor& image, const ClipModel& model) {
  Tensor x = patch_embed(image, model);
  for (const BlockParams& blk : model.blocks) x = encoder_block_impl(x, blk, model.cfg.heads);
  x = layer_norm(x, model.final_gain, model.final_bias, kLayerNormEps);
  Tensor cls = rows(x, 0, 1);
  Tensor projected = affine(cls, model.img_proj_w, model.img_proj_b);
  return l2_normalize(reshape(projected, {model.cfg.embed_dim}));
}

Tensor text_encode(const ClipModel& model, const PromptSet& prompts, std::size_t template_id,
                   bool live) {
  const std::string sentence = render_prompt(prompts.at_id(template_id), live);
  const std::vector<std::size_t> ids = hash_tokens(sentence);
  Tensor bag = embedding_sum(model.text_table, ids);
  Tensor projected =
      affine(reshape(bag, {1, model.cfg.d_model}), model.text_proj_w, model.text_proj_b);
  return l2_normalize(reshape(projected, {model.cfg.embed_dim}));
}

Tensor clip_loss(const Tensor& image_emb, const Tensor& text_emb, const Tensor& temperature) {
  if (image_emb.shape() != text_emb.shape())
    throw DimensionError("clip_loss: embedding shapes differ: " + shape_str(image_emb.shape()) +
                         " vs " + shape_str(text_emb.shape()));
  const std::size_t n = image_emb.extent(0);
  Tensor sims = scale(matmul(image_emb, transpose(text_emb)), temperature);
  Tensor row_term = diag_sum(log_(softmax(sims, 1)));
  Tensor col_term = diag_sum(log_(softmax(sims, 0)));
  return scale(add(row_term, col_term), -0.5 / static_cast<double>(n));
}

Classification classify(const Tensor& image, const ClipModel& model, const PromptSet& prompts,
                        std::size_t template_id) {
  Tensor img = image_encode(image, model);
  Tensor live_emb = text_encode(model, prompts, template_id, true);
  Tensor fake_emb = text_encode(model, prompts, template_id, false);
  double sim_live = 0.0, sim_fake = 0.0;
  for (std::size_t i = 0; i < img.size(); ++i) {
    sim_live += img.data()[i] * live_emb.data()[i];
    sim_fake += img.data()[i] * fake_emb.data()[i];
  }
  const double temp = std::min(std::exp(model.log_temp.value()), kMaxTemperature);
  const double gap = temp * (sim_live - sim_fake);
  const double score = gap >= 0.0 ? 1.0 / (1.0 + std::exp(-gap))
                                  : std::exp(gap) / (1.0 + std::exp(gap));
  return Classification{score, sim_live >= sim_fake};
}

}  // namespace lamoe
