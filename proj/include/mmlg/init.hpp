#pragma once

#include <cmath>
#include <string>

#include "mmlg/autodiff.hpp"
#include "mmlg/model_config.hpp"
#include "mmlg/rng.hpp"

namespace mmlg {

inline constexpr double kInitStd = 0.02;
// log(1 / 0.07)
inline const double kDefaultLogitScale = std::log(1.0 / 0.07);

template <typename T>
void add_layer_norm(ParamStore<T>& store, const std::string& name, std::size_t d) {
  store.add(name + ".gamma", Tensor<T>({d}, T(1)));
  store.add(name + ".beta", Tensor<T>({d}, T(0)));
}

// Block fields under `prefix`: weights truncated-normal, biases zero.
template <typename T>
void add_block_fields(ParamStore<T>& store, const std::string& prefix, const EncoderConfig& cfg, Rng& rng) {
  for (std::size_t f = 0; f < kBlockFields.size(); ++f) {
    const auto shape = block_field_shape(f, cfg.width, cfg.mlp_ratio);
    const std::string name = prefix + std::string(kBlockFields[f]);
    if (block_field_is_weight(f)) {
      store.add(name, truncated_normal<T>(shape, kInitStd, rng), true);
    } else {
      store.add(name, Tensor<T>(shape, T(0)));
    }
  }
}

// Embeddings, final LayerNorm and projection of one encoder. These are never
// decomposed into blocks.
template <typename T>
void add_encoder_shared(ParamStore<T>& store, Encoder e, const EncoderConfig& cfg, Rng& rng) {
  const std::size_t d = cfg.width;
  const std::string p = std::string(to_string(e)) + ".";
  if (e == Encoder::vision) {
    store.add(p + "embed.patch_w", truncated_normal<T>({cfg.vision.patch_dim(), d}, kInitStd, rng), true);
    store.add(p + "embed.patch_b", Tensor<T>({d}, T(0)));
    store.add(p + "embed.cls", truncated_normal<T>({1, d}, kInitStd, rng));
    store.add(p + "embed.pos", truncated_normal<T>({cfg.vision.tokens(), d}, kInitStd / 2, rng));
  } else {
    store.add(p + "embed.token", truncated_normal<T>({cfg.text.vocab_size, d}, kInitStd, rng));
    store.add(p + "embed.pos", truncated_normal<T>({cfg.text.context_length, d}, kInitStd / 2, rng));
  }
  add_layer_norm(store, p + "ln_final", d);
  store.add(p + "proj", truncated_normal<T>({d, cfg.proj_dim}, 1.0 / std::sqrt(double(d)), rng), true);
}

template <typename T>
void add_logit_scale(ParamStore<T>& store, double log_scale = kDefaultLogitScale) {
  store.add("logit_scale", Tensor<T>::scalar(static_cast<T>(log_scale)));
}

// Names of the non-layer parameters of one encoder (the parts copied verbatim
// from a bank into a descendant).
inline std::vector<std::string> encoder_shared_names(Encoder e) {
  const std::string p = std::string(to_string(e)) + ".";
  std::vector<std::string> names;
  if (e == Encoder::vision) {
    names = {p + "embed.patch_w", p + "embed.patch_b", p + "embed.cls", p + "embed.pos"};
  } else {
    names = {p + "embed.token", p + "embed.pos"};
  }
  names.push_back(p + "ln_final.gamma");
  names.push_back(p + "ln_final.beta");
  names.push_back(p + "proj");
  return names;
}

}  // namespace mmlg
