#pragma once

#include <array>
#include <string>
#include <vector>

#include "mmlg/autodiff.hpp"
#include "mmlg/init.hpp"
#include "mmlg/model_config.hpp"

namespace mmlg {

// One transformer layer's attention and MLP linear parameters, in
// kBlockFields order.
template <typename T>
struct ParameterBlock {
  std::size_t width = 0;
  std::size_t ratio = 0;
  std::array<Tensor<T>, kBlockFields.size()> fields;

  static ParameterBlock zeros(std::size_t d, std::size_t r) {
    ParameterBlock b{d, r, {}};
    for (std::size_t f = 0; f < kBlockFields.size(); ++f) b.fields[f] = Tensor<T>(block_field_shape(f, d, r));
    return b;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : fields) n += t.size();
    return n;
  }

  bool operator==(const ParameterBlock&) const = default;
};

// Materialized parameters of one layer; same layout as a block.
template <typename T>
using ComposedLayerParams = ParameterBlock<T>;

struct SharingEntry {
  std::size_t pair = 0;   // coefficient index
  std::size_t group = 1;  // block group, 1 or 2
  bool operator==(const SharingEntry&) const = default;
};

struct SharingPlan {
  std::size_t depth = 0;
  std::vector<SharingEntry> entries;
};

// Layer i (0-based) uses coefficient pair floor(i/2) and block group
// (pair mod 2) + 1: each coefficient covers two consecutive layers and each
// group is used twice before switching.
inline SharingPlan sharing_plan(std::size_t depth) {
  if (depth < 2 || depth % 2 != 0) {
    throw ValidationError("sharing_plan: depth must be an even integer >= 2, got " + std::to_string(depth));
  }
  SharingPlan plan{depth, {}};
  plan.entries.reserve(depth);
  for (std::size_t i = 0; i < depth; ++i) {
    const std::size_t p = i / 2;
    plan.entries.push_back({p, p % 2 + 1});
  }
  return plan;
}

enum class CoeffKind { vision, language, mm_vision, mm_language };

inline std::string_view to_string(CoeffKind k) {
  switch (k) {
    case CoeffKind::vision: return "vision";
    case CoeffKind::language: return "language";
    case CoeffKind::mm_vision: return "mm_vision";
    case CoeffKind::mm_language: return "mm_language";
  }
  return "?";
}

// Unimodal and multimodal coefficient kinds feeding an encoder.
inline CoeffKind unimodal_coeff(Encoder e) { return e == Encoder::vision ? CoeffKind::vision : CoeffKind::language; }
inline CoeffKind multimodal_coeff(Encoder e) {
  return e == Encoder::vision ? CoeffKind::mm_vision : CoeffKind::mm_language;
}
inline BlockKind unimodal_block(Encoder e) { return e == Encoder::vision ? BlockKind::vision : BlockKind::language; }

template <typename T>
struct CoefficientSet {
  Tensor<T> vision, language, mm_vision, mm_language;
};

// The extracted learngene: two groups of {vision, language, multimodal}
// blocks, four coefficient vectors of length depth/2, per-encoder shared
// LayerNorms, embeddings, projections and the log logit scale.
template <typename T>
class LearngeneBank {
 public:
  static std::string block_prefix(std::size_t group, BlockKind kind) {
    return "block.g" + std::to_string(group) + "." + std::string(to_string(kind)) + ".";
  }
  static std::string block_name(std::size_t group, BlockKind kind, std::size_t field) {
    return block_prefix(group, kind) + std::string(kBlockFields.at(field));
  }
  static std::string coeff_name(CoeffKind k) { return "coeff." + std::string(to_string(k)); }
  static std::string shared_ln_name(Encoder e, int which) {
    return std::string(to_string(e)) + (which == 1 ? ".ln1" : ".ln2");
  }

  // Fresh bank: blocks truncated-normal(0.02), coefficients 0.5.
  static LearngeneBank create(const EncoderConfig& cfg, std::uint64_t seed) {
    cfg.validate(true);
    Rng rng(derive_seed(seed, hash_tag("bank.init")));
    ParamStore<T> store;
    for (std::size_t group = 1; group <= 2; ++group) {
      for (auto kind : {BlockKind::vision, BlockKind::language, BlockKind::multimodal}) {
        add_block_fields(store, block_prefix(group, kind), cfg, rng);
      }
    }
    const std::size_t pairs = cfg.depth / 2;
    for (auto k : {CoeffKind::vision, CoeffKind::language, CoeffKind::mm_vision, CoeffKind::mm_language}) {
      store.add(coeff_name(k), Tensor<T>({pairs}, T(0.5)));
    }
    for (auto e : {Encoder::vision, Encoder::language}) {
      add_layer_norm(store, shared_ln_name(e, 1), cfg.width);
      add_layer_norm(store, shared_ln_name(e, 2), cfg.width);
      add_encoder_shared(store, e, cfg, rng);
    }
    add_logit_scale(store);
    return LearngeneBank(cfg, std::move(store));
  }

  LearngeneBank(EncoderConfig cfg, ParamStore<T> params) : config_(cfg), params_(std::move(params)) {
    config_.validate(true);
    validate_layout();
  }

  const EncoderConfig& config() const noexcept { return config_; }
  std::size_t pairs() const noexcept { return config_.depth / 2; }
  ParamStore<T>& params() noexcept { return params_; }
  const ParamStore<T>& params() const noexcept { return params_; }

  const Tensor<T>& block_field(std::size_t group, BlockKind kind, std::size_t field) const {
    return params_.at(block_name(group, kind, field)).value;
  }
  Parameter<T>& block_param(std::size_t group, BlockKind kind, std::size_t field) {
    return params_.at(block_name(group, kind, field));
  }

  ParameterBlock<T> block(std::size_t group, BlockKind kind) const {
    ParameterBlock<T> b{config_.width, config_.mlp_ratio, {}};
    for (std::size_t f = 0; f < kBlockFields.size(); ++f) b.fields[f] = block_field(group, kind, f);
    return b;
  }

  const Tensor<T>& coeffs(CoeffKind k) const { return params_.at(coeff_name(k)).value; }
  Tensor<T>& coeffs(CoeffKind k) { return params_.at(coeff_name(k)).value; }

  CoefficientSet<T> coefficients() const {
    return {coeffs(CoeffKind::vision), coeffs(CoeffKind::language), coeffs(CoeffKind::mm_vision),
            coeffs(CoeffKind::mm_language)};
  }

 private:
  void validate_layout() const {
    const std::size_t d = config_.width, r = config_.mlp_ratio;
    std::size_t expected = 0;
    auto check = [&](const std::string& name, const Shape& shape) {
      if (!params_.contains(name)) throw ValidationError("bank: missing tensor '" + name + "'");
      if (params_.at(name).value.shape() != shape) {
        throw DimensionError("bank: tensor '" + name + "' has shape " +
                             shape_string(params_.at(name).value.shape()) + ", expected " + shape_string(shape));
      }
      ++expected;
    };
    for (std::size_t group = 1; group <= 2; ++group)
      for (auto kind : {BlockKind::vision, BlockKind::language, BlockKind::multimodal})
        for (std::size_t f = 0; f < kBlockFields.size(); ++f)
          check(block_name(group, kind, f), block_field_shape(f, d, r));
    for (auto k : {CoeffKind::vision, CoeffKind::language, CoeffKind::mm_vision, CoeffKind::mm_language})
      check(coeff_name(k), {pairs()});
    for (auto e : {Encoder::vision, Encoder::language}) {
      for (int which : {1, 2}) {
        check(shared_ln_name(e, which) + ".gamma", {d});
        check(shared_ln_name(e, which) + ".beta", {d});
      }
      for (const auto& name : encoder_shared_names(e)) {
        if (!params_.contains(name)) throw ValidationError("bank: missing tensor '" + name + "'");
        ++expected;
      }
    }
    check("logit_scale", {1});
    if (params_.size() != expected) {
      throw ValidationError("bank: unexpected extra tensors (" + std::to_string(params_.size()) + " present, " +
                            std::to_string(expected) + " expected)");
    }
  }

  EncoderConfig config_;
  ParamStore<T> params_;
};

namespace detail {

template <typename T>
void check_compose_indices(const LearngeneBank<T>& bank, std::size_t pair, std::size_t group) {
  if (pair >= bank.pairs()) {
    throw ValidationError("compose_layer: pair " + std::to_string(pair) + " out of range [0, " +
                          std::to_string(bank.pairs()) + ")");
  }
  if (group != 1 && group != 2) {
    throw ValidationError("compose_layer: group must be 1 or 2, got " + std::to_string(group));
  }
}

}  // namespace detail

// Layer parameters for `encoder` at (pair, group) under an init mode:
//   full    : c[pair] * theta_unimodal + c_m[pair] * theta_multimodal
//   no_mm   : c[pair] * theta_unimodal
//   only_mm : c_m[pair] * theta_multimodal
template <typename T>
ComposedLayerParams<T> compose_layer_masked(const LearngeneBank<T>& bank, Encoder encoder, std::size_t pair,
                                            std::size_t group, InitMode mode) {
  detail::check_compose_indices(bank, pair, group);
  require(mode != InitMode::scratch, "compose_layer: scratch mode has no composition");
  T cu = bank.coeffs(unimodal_coeff(encoder))[pair];
  T cm = bank.coeffs(multimodal_coeff(encoder))[pair];
  if (mode == InitMode::no_mm) cm = T(0);
  if (mode == InitMode::only_mm) cu = T(0);
  auto out = ComposedLayerParams<T>::zeros(bank.config().width, bank.config().mlp_ratio);
  for (std::size_t f = 0; f < kBlockFields.size(); ++f) {
    const auto& uni = bank.block_field(group, unimodal_block(encoder), f);
    const auto& mm = bank.block_field(group, BlockKind::multimodal, f);
    if (mode == InitMode::full) {
      weighted_sum_into<T>(out.fields[f].data(), cu, uni.data(), cm, mm.data());
    } else {
      // Single term; the dropped block contributes nothing, not even 0 * NaN.
      const auto& src = mode == InitMode::no_mm ? uni : mm;
      const T c = mode == InitMode::no_mm ? cu : cm;
      auto dst = out.fields[f].data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = c * src[i];
    }
  }
  return out;
}

template <typename T>
ComposedLayerParams<T> compose_layer(const LearngeneBank<T>& bank, Encoder encoder, std::size_t pair,
                                     std::size_t group) {
  return compose_layer_masked(bank, encoder, pair, group, InitMode::full);
}

}  // namespace mmlg
