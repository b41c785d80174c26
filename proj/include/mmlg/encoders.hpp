#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mmlg/autodiff.hpp"
#include "mmlg/bank.hpp"
#include "mmlg/plain_model.hpp"
#include "mmlg/synth.hpp"

namespace mmlg {

inline constexpr double kMinLogitScale = 1.0;
inline constexpr double kMaxLogitScale = 100.0;

// Patchified images: [(count * patches) x patch_dim].
template <typename T>
struct ImageBatch {
  Tensor<T> patches;
  std::size_t count = 0;
};

struct TextBatch {
  std::vector<int> ids;  // count * context_length
  std::size_t count = 0;
};

// B x proj_dim rows of unit L2 norm.
template <typename T>
using FeatureBatch = Tensor<T>;

template <typename T>
ImageBatch<T> image_batch(const SynthCorpus& corpus, std::span<const std::size_t> indices, const EncoderConfig& cfg) {
  if (corpus.spec.image_size != cfg.vision.image_size || corpus.spec.channels != cfg.vision.channels) {
    throw ValidationError("image batch: corpus images are " + std::to_string(corpus.spec.image_size) + "px x " +
                          std::to_string(corpus.spec.channels) + " channels, model expects " +
                          std::to_string(cfg.vision.image_size) + "px x " + std::to_string(cfg.vision.channels));
  }
  return {patchify<T>(corpus, indices, cfg.vision.patch_size), indices.size()};
}

inline TextBatch text_batch(const SynthCorpus& corpus, std::span<const std::size_t> indices) {
  return {token_batch(corpus, indices), indices.size()};
}

struct LayerVars {
  Var ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
  std::array<Var, kBlockFields.size()> w;
};

// Plain mode: every layer reads its own materialized parameters.
template <typename T>
class PlainBinding {
 public:
  explicit PlainBinding(PlainModel<T>& model) : model_(model) {}

  const EncoderConfig& config() const { return model_.config; }
  std::size_t depth() const { return model_.depth(); }
  bool has(Encoder e) const { return model_.has(e); }
  ParamStore<T>& store() { return model_.params; }

  LayerVars layer(Graph<T>& g, Encoder e, std::size_t i) {
    const std::string p = layer_prefix(e, i);
    auto& s = model_.params;
    LayerVars v{g.param(s.at(p + "ln1.gamma")), g.param(s.at(p + "ln1.beta")), g.param(s.at(p + "ln2.gamma")),
                g.param(s.at(p + "ln2.beta")), {}};
    for (std::size_t f = 0; f < kBlockFields.size(); ++f) v.w[f] = g.param(s.at(p + std::string(kBlockFields[f])));
    return v;
  }

 private:
  PlainModel<T>& model_;
};

// Auxiliary mode: layer parameters are composed from the bank on the fly,
// so gradients reach the shared blocks and coefficients.
template <typename T>
class AuxBinding {
 public:
  AuxBinding(LearngeneBank<T>& bank, std::size_t depth)
      : bank_(bank), plan_(sharing_plan(depth)) {
    require(depth <= 2 * bank.pairs(), "auxiliary depth exceeds the bank's coefficient length");
  }
  explicit AuxBinding(LearngeneBank<T>& bank) : AuxBinding(bank, bank.config().depth) {}

  const EncoderConfig& config() const { return bank_.config(); }
  std::size_t depth() const { return plan_.depth; }
  bool has(Encoder) const { return true; }
  ParamStore<T>& store() { return bank_.params(); }
  const SharingPlan& plan() const { return plan_; }

  LayerVars layer(Graph<T>& g, Encoder e, std::size_t i) {
    const auto [pair, group] = plan_.entries.at(i);
    auto& s = bank_.params();
    const auto ln1 = LearngeneBank<T>::shared_ln_name(e, 1);
    const auto ln2 = LearngeneBank<T>::shared_ln_name(e, 2);
    LayerVars v{g.param(s.at(ln1 + ".gamma")), g.param(s.at(ln1 + ".beta")), g.param(s.at(ln2 + ".gamma")),
                g.param(s.at(ln2 + ".beta")), {}};
    Var cu = ad::select(g, g.param(s.at(LearngeneBank<T>::coeff_name(unimodal_coeff(e)))), pair);
    Var cm = ad::select(g, g.param(s.at(LearngeneBank<T>::coeff_name(multimodal_coeff(e)))), pair);
    for (std::size_t f = 0; f < kBlockFields.size(); ++f) {
      Var uni = g.param(bank_.block_param(group, unimodal_block(e), f));
      Var mm = g.param(bank_.block_param(group, BlockKind::multimodal, f));
      v.w[f] = ad::weighted_sum(g, cu, uni, cm, mm);
    }
    return v;
  }

 private:
  LearngeneBank<T>& bank_;
  SharingPlan plan_;
};

// Pre-LN transformer layer: x + MSA(LN1(x)), then h + MLP(LN2(h)).
// The key bias adds q_i . b_k to every score of query row i, which the row
// softmax cancels exactly, so it is stored but never applied.
template <typename T>
Var transformer_layer(Graph<T>& g, Var x, const LayerVars& p, std::size_t batch, std::size_t heads) {
  using namespace ad;
  const std::size_t d = g.value(x).cols();
  const T inv_sqrt_dh = T(1) / std::sqrt(T(d / heads));
  Var y = layer_norm(g, x, p.ln1_gamma, p.ln1_beta);
  Var q = add_row(g, matmul(g, y, p.w[kWq]), p.w[kBq]);
  Var k = matmul(g, y, p.w[kWk]);
  Var v = add_row(g, matmul(g, y, p.w[kWv]), p.w[kBv]);
  Var scores = scale(g, attention_scores(g, q, k, batch, heads), inv_sqrt_dh);
  Var mixed = attention_mix(g, softmax_rows(g, scores), v, batch, heads);
  Var h = add(g, x, add_row(g, matmul(g, mixed, p.w[kWo]), p.w[kBo]));
  Var z = layer_norm(g, h, p.ln2_gamma, p.ln2_beta);
  Var hidden = gelu(g, add_row(g, matmul(g, z, p.w[kW1]), p.w[kB1]));
  return add(g, h, add_row(g, matmul(g, hidden, p.w[kW2]), p.w[kB2]));
}

template <typename T, typename Binding>
Var run_layers(Graph<T>& g, Binding& model, Encoder e, Var x, std::size_t batch) {
  for (std::size_t i = 0; i < model.depth(); ++i) {
    x = transformer_layer(g, x, model.layer(g, e, i), batch, model.config().heads);
  }
  return x;
}

// Class-token state after the final LayerNorm: [B x d].
template <typename T, typename Binding>
Var vision_pooled(Graph<T>& g, Binding& model, const ImageBatch<T>& images) {
  using namespace ad;
  const auto& cfg = model.config();
  require(model.has(Encoder::vision), "encode_image: model has no vision encoder");
  if (images.count == 0 || images.patches.cols() != cfg.vision.patch_dim() ||
      images.patches.rows() != images.count * cfg.vision.patches()) {
    throw ValidationError("encode_image: image batch " + shape_string(images.patches.shape()) +
                          " does not match " + std::to_string(cfg.vision.patches()) + " patches of dim " +
                          std::to_string(cfg.vision.patch_dim()));
  }
  auto& s = model.store();
  Var x = add_row(g, matmul(g, g.constant(images.patches), g.param(s.at("vision.embed.patch_w"))),
                  g.param(s.at("vision.embed.patch_b")));
  x = prepend_rows(g, x, g.param(s.at("vision.embed.cls")), images.count);
  x = add_tiled(g, x, g.param(s.at("vision.embed.pos")));
  x = run_layers(g, model, Encoder::vision, x, images.count);
  std::vector<std::size_t> rows(images.count);
  for (std::size_t b = 0; b < images.count; ++b) rows[b] = b * cfg.vision.tokens();
  return layer_norm(g, gather_rows(g, x, std::move(rows)), g.param(s.at("vision.ln_final.gamma")),
                    g.param(s.at("vision.ln_final.beta")));
}

// Final-position (EOS) token state after the final LayerNorm: [B x d].
// Attention is bidirectional.
template <typename T, typename Binding>
Var text_pooled(Graph<T>& g, Binding& model, const TextBatch& texts) {
  using namespace ad;
  const auto& cfg = model.config();
  require(model.has(Encoder::language), "encode_text: model has no text encoder");
  const std::size_t ctx = cfg.text.context_length;
  if (texts.count == 0 || texts.ids.size() != texts.count * ctx) {
    throw ValidationError("encode_text: " + std::to_string(texts.ids.size()) + " token ids for " +
                          std::to_string(texts.count) + " sequences of length " + std::to_string(ctx));
  }
  auto& s = model.store();
  Var x = embedding(g, g.param(s.at("text.embed.token")), texts.ids);
  x = add_tiled(g, x, g.param(s.at("text.embed.pos")));
  x = run_layers(g, model, Encoder::language, x, texts.count);
  std::vector<std::size_t> rows(texts.count);
  for (std::size_t b = 0; b < texts.count; ++b) rows[b] = b * ctx + ctx - 1;
  return layer_norm(g, gather_rows(g, x, std::move(rows)), g.param(s.at("text.ln_final.gamma")),
                    g.param(s.at("text.ln_final.beta")));
}

template <typename T, typename Binding>
Var project_features(Graph<T>& g, Binding& model, Encoder e, Var pooled) {
  Var proj = g.param(model.store().at(std::string(to_string(e)) + ".proj"));
  return ad::l2_normalize_rows(g, ad::matmul(g, pooled, proj));
}

template <typename T, typename Binding>
Var logit_scale_var(Graph<T>& g, Binding& model) {
  return ad::exp_clamp(g, g.param(model.store().at("logit_scale")), T(kMinLogitScale), T(kMaxLogitScale));
}

template <typename T>
struct PairVars {
  Var images, texts, tau;
};

template <typename T, typename Binding>
PairVars<T> pair_features(Graph<T>& g, Binding& model, const ImageBatch<T>& images, const TextBatch& texts) {
  if (images.count != texts.count) {
    throw ValidationError("forward_pair: " + std::to_string(images.count) + " images vs " +
                          std::to_string(texts.count) + " texts");
  }
  Var v = project_features(g, model, Encoder::vision, vision_pooled(g, model, images));
  Var s = project_features(g, model, Encoder::language, text_pooled(g, model, texts));
  return {v, s, logit_scale_var(g, model)};
}

template <typename T>
PlainBinding<T> binding(PlainModel<T>& m) {
  return PlainBinding<T>(m);
}
template <typename T>
AuxBinding<T> binding(LearngeneBank<T>& b) {
  return AuxBinding<T>(b);
}

// Eager entry points accept either a PlainModel (plain mode) or a
// LearngeneBank (auxiliary mode, full depth).
template <typename T, template <typename> class Model>
FeatureBatch<T> encode_image(Model<T>& model, const ImageBatch<T>& images) {
  Graph<T> g;
  auto b = binding(model);
  return g.value(project_features(g, b, Encoder::vision, vision_pooled(g, b, images)));
}

template <typename T, template <typename> class Model>
FeatureBatch<T> encode_text(Model<T>& model, const TextBatch& texts) {
  Graph<T> g;
  auto b = binding(model);
  return g.value(project_features(g, b, Encoder::language, text_pooled(g, b, texts)));
}

template <typename T>
struct PairOutput {
  FeatureBatch<T> images;
  FeatureBatch<T> texts;
  T tau = 0;
};

template <typename T, template <typename> class Model>
PairOutput<T> forward_pair(Model<T>& model, const ImageBatch<T>& images, const TextBatch& texts) {
  Graph<T> g;
  auto b = binding(model);
  auto out = pair_features(g, b, images, texts);
  return {g.value(out.images), g.value(out.texts), g.value(out.tau).item()};
}

}  // namespace mmlg
