#pragma once

#include <string>

#include "mmlg/autodiff.hpp"
#include "mmlg/init.hpp"
#include "mmlg/model_config.hpp"

namespace mmlg {

// A materialized, unshared encoder or dual encoder. Optionally carries a
// linear classification head on the pooled vision feature.
template <typename T>
struct PlainModel {
  EncoderConfig config;  // config.depth is the layer count
  ModelModality modality = ModelModality::dual;
  std::size_t classes = 0;
  ParamStore<T> params;

  std::size_t depth() const noexcept { return config.depth; }
  bool has(Encoder e) const noexcept { return has_encoder(modality, e); }
  bool has_head() const noexcept { return classes > 0; }

  // Freshly initialized model; deterministic in `seed`.
  static PlainModel create(const EncoderConfig& cfg, ModelModality modality, std::uint64_t seed) {
    cfg.validate();
    PlainModel m{cfg, modality, 0, {}};
    Rng rng(derive_seed(seed, hash_tag("plain.init")));
    for (auto e : {Encoder::vision, Encoder::language}) {
      if (!m.has(e)) continue;
      for (std::size_t i = 0; i < cfg.depth; ++i) {
        const std::string p = layer_prefix(e, i);
        add_layer_norm(m.params, p + "ln1", cfg.width);
        add_layer_norm(m.params, p + "ln2", cfg.width);
        add_block_fields(m.params, p, cfg, rng);
      }
      add_encoder_shared(m.params, e, cfg, rng);
    }
    if (modality == ModelModality::dual) add_logit_scale(m.params);
    return m;
  }

  void attach_head(std::size_t num_classes, std::uint64_t seed) {
    require(num_classes >= 2, "attach_head: need at least 2 classes");
    require(has(Encoder::vision), "attach_head: model has no vision encoder");
    require(!has_head(), "attach_head: model already has a head");
    Rng rng(derive_seed(seed, hash_tag("head.init")));
    params.add("head.w", truncated_normal<T>({config.width, num_classes}, kInitStd, rng), true);
    params.add("head.b", Tensor<T>({num_classes}, T(0)));
    classes = num_classes;
  }

  // Vision branch (plus head, when present) of a dual model.
  PlainModel vision_branch() const {
    require(has(Encoder::vision), "vision_branch: model has no vision encoder");
    PlainModel out{config, ModelModality::vision, classes, {}};
    for (const auto& [name, p] : params) {
      if (name.rfind("vision.", 0) == 0 || name.rfind("head.", 0) == 0) out.params.add(name, p.value, p.decay);
    }
    return out;
  }
};

}  // namespace mmlg
