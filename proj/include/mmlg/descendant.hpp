#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mmlg/bank.hpp"
#include "mmlg/extraction.hpp"
#include "mmlg/plain_model.hpp"

namespace mmlg {

using LayerPlan = std::vector<SharingEntry>;

// Descendant of depth n from a bank with P coefficient pairs: P layers use
// each pair once, and for n > P the first n - P pairs are used twice in a
// row. Pair p always takes block group (p mod 2) + 1.
inline LayerPlan descendant_layer_plan(std::size_t n, std::size_t pairs = 6) {
  if (pairs == 0 || n < pairs || n > 2 * pairs) {
    throw UnsupportedDepthError("unsupported descendant depth " + std::to_string(n) + ": supported depths are " +
                                std::to_string(pairs) + ".." + std::to_string(2 * pairs));
  }
  LayerPlan plan;
  plan.reserve(n);
  for (std::size_t p = 0; p < pairs; ++p) {
    const SharingEntry e{p, p % 2 + 1};
    plan.push_back(e);
    if (p < n - pairs) plan.push_back(e);
  }
  return plan;
}

// Plain model of depth n initialized from the bank: layer t is the masked
// composition at plan[t], every per-layer LayerNorm copies the encoder's
// shared one, and embeddings, projections and the logit scale are copied.
// Scratch mode ignores the bank values and draws everything from `seed`.
template <typename T>
PlainModel<T> init_descendant(const LearngeneBank<T>& bank, std::size_t n, ModelModality modality, InitMode mode,
                              std::uint64_t seed) {
  const auto plan = descendant_layer_plan(n, bank.pairs());
  EncoderConfig cfg = bank.config();
  cfg.depth = n;
  auto model = PlainModel<T>::create(cfg, modality, seed);
  if (mode == InitMode::scratch) return model;
  const auto& src = bank.params();
  for (auto e : {Encoder::vision, Encoder::language}) {
    if (!model.has(e)) continue;
    for (std::size_t t = 0; t < n; ++t) {
      const std::string p = layer_prefix(e, t);
      const auto layer = compose_layer_masked(bank, e, plan[t].pair, plan[t].group, mode);
      for (std::size_t f = 0; f < kBlockFields.size(); ++f) {
        model.params.at(p + std::string(kBlockFields[f])).value = layer.fields[f];
      }
      for (int which : {1, 2}) {
        const auto shared = LearngeneBank<T>::shared_ln_name(e, which);
        const std::string local = p + (which == 1 ? "ln1" : "ln2");
        model.params.at(local + ".gamma").value = src.at(shared + ".gamma").value;
        model.params.at(local + ".beta").value = src.at(shared + ".beta").value;
      }
    }
    for (const auto& name : encoder_shared_names(e)) model.params.at(name).value = src.at(name).value;
  }
  if (modality == ModelModality::dual) model.params.at("logit_scale").value = src.at("logit_scale").value;
  return model;
}

// Indices of a seeded subset of floor(fraction * n) items.
inline std::vector<std::size_t> activation_subset(std::size_t n, double fraction, std::uint64_t seed) {
  require(fraction > 0.0 && fraction <= 1.0, "activate: fraction must be in (0, 1]");
  const auto k = static_cast<std::size_t>(std::floor(fraction * double(n) + 1e-9));
  if (k == 0) {
    throw ValidationError("activate: fraction " + std::to_string(fraction) + " of " + std::to_string(n) +
                          " samples is an empty subset");
  }
  Rng rng(derive_seed(seed, hash_tag("activate.subset")));
  auto perm = permutation(n, rng);
  perm.resize(k);
  return perm;
}

struct ActivateOptions {
  double fraction = 0.10;
  std::size_t epochs = 1;
};

// Brief CLIP-loss pass over a subset of the pretraining data.
template <typename T>
TrainResult activate(PlainModel<T>& model, const SynthCorpus& data, const ActivateOptions& ao, TrainSchedule s,
                     MetricsSink* metrics = nullptr) {
  require(model.modality == ModelModality::dual, "activate: model must be a dual encoder");
  s.epochs = ao.epochs;
  auto subset = activation_subset(data.size(), ao.fraction, s.seed);
  TrainOptions<T> opt;
  opt.stage = "activate";
  opt.metrics = metrics;
  return train_contrastive(model, data, std::move(subset), s, opt);
}

}  // namespace mmlg
