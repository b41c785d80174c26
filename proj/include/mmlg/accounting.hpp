#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "mmlg/descendant.hpp"
#include "mmlg/metrics.hpp"
#include "mmlg/model_config.hpp"

namespace mmlg {

struct ComponentCounts {
  std::size_t layers = 0;        // transformer layer weights and biases
  std::size_t coefficients = 0;
  std::size_t layer_norms = 0;
  std::size_t embeddings = 0;
  std::size_t projections = 0;
  std::size_t temperature = 0;

  std::size_t total() const { return layers + coefficients + layer_norms + embeddings + projections + temperature; }
};

struct DescendantCount {
  std::size_t depth = 0;
  ComponentCounts parts;
};

struct StorageReport {
  ComponentCounts learngene;
  std::vector<DescendantCount> descendants;
  std::size_t descendants_total = 0;
  double ratio = 0;
  // Shared block-layers against materialized layers, ignoring everything else.
  std::size_t block_params = 0;
  std::size_t materialized_block_params = 0;
  double block_ratio = 0;
};

inline std::size_t embedding_count(const EncoderConfig& c) {
  const std::size_t d = c.width;
  const std::size_t vision = c.vision.patch_dim() * d + d + d + c.vision.tokens() * d;
  const std::size_t text = c.text.vocab_size * d + c.text.context_length * d;
  return vision + text;
}

// Learngene: 6 blocks, 4 coefficient vectors, 2 shared LayerNorms plus a final
// LayerNorm per encoder, embeddings, projections and the logit scale.
// Dual descendant of depth n: 2n materialized layers with their own
// LayerNorms, plus the same embeddings, projections and logit scale.
inline StorageReport storage_report(const EncoderConfig& bank_cfg, const std::vector<std::size_t>& depths) {
  bank_cfg.validate(true);
  require(!depths.empty(), "storage_report: no descendant depths given");
  const std::size_t d = bank_cfg.width, r = bank_cfg.mlp_ratio, pairs = bank_cfg.depth / 2;
  const std::size_t layer = layer_param_count(d, r);
  const std::size_t ln = 2 * d;
  StorageReport rep;
  auto& lg = rep.learngene;
  lg.layers = 6 * layer;
  lg.coefficients = 4 * pairs;
  lg.layer_norms = 2 * (2 * ln) + 2 * ln;
  lg.embeddings = embedding_count(bank_cfg);
  lg.projections = 2 * d * bank_cfg.proj_dim;
  lg.temperature = 1;
  rep.block_params = lg.layers;
  for (auto n : depths) {
    descendant_layer_plan(n, pairs);
    DescendantCount dc{n, {}};
    dc.parts.layers = 2 * n * layer;
    dc.parts.layer_norms = 2 * n * (2 * ln) + 2 * ln;
    dc.parts.embeddings = lg.embeddings;
    dc.parts.projections = lg.projections;
    dc.parts.temperature = 1;
    rep.descendants_total += dc.parts.total();
    rep.materialized_block_params += dc.parts.layers;
    rep.descendants.push_back(dc);
  }
  rep.ratio = double(lg.total()) / double(rep.descendants_total);
  rep.block_ratio = double(rep.block_params) / double(rep.materialized_block_params);
  return rep;
}

inline std::string format_report(const StorageReport& rep) {
  char buf[160];
  std::string out;
  auto row = [&](const char* name, const ComponentCounts& c) {
    std::snprintf(buf, sizeof buf, "%-14s %12zu %8zu %8zu %10zu %8zu %3zu %12zu\n", name, c.layers, c.coefficients,
                  c.layer_norms, c.embeddings, c.projections, c.temperature, c.total());
    out += buf;
  };
  std::snprintf(buf, sizeof buf, "%-14s %12s %8s %8s %10s %8s %3s %12s\n", "model", "layers", "coeffs", "norms",
                "embed", "proj", "tau", "total");
  out += buf;
  row("learngene", rep.learngene);
  for (const auto& dc : rep.descendants) row(("descendant-" + std::to_string(dc.depth)).c_str(), dc.parts);
  std::snprintf(buf, sizeof buf, "descendants total %zu\nratio %.4f\nblock-only ratio %zu / %zu = %.4f\n",
                rep.descendants_total, rep.ratio, rep.block_params, rep.materialized_block_params, rep.block_ratio);
  out += buf;
  return out;
}

inline void emit_report(MetricsSink& sink, const StorageReport& rep, std::uint64_t seed = 0) {
  sink.emit("storage", 0, "learngene_params", double(rep.learngene.total()), seed);
  for (const auto& dc : rep.descendants) {
    sink.emit("storage", dc.depth, "descendant_params", double(dc.parts.total()), seed);
  }
  sink.emit("storage", 0, "descendants_total", double(rep.descendants_total), seed);
  sink.emit("storage", 0, "ratio", rep.ratio, seed);
  sink.emit("storage", 0, "block_ratio", rep.block_ratio, seed);
}

}  // namespace mmlg
