#pragma once

#include <cmath>
#include <vector>

#include "mmlg/encoders.hpp"
#include "mmlg/grad_check.hpp"
#include "mmlg/objectives.hpp"

namespace mmlg {

// d=16, 2 heads, depth 4 auxiliary model on 8x8 images and 6-token captions.
inline EncoderConfig tiny_aux_config() {
  EncoderConfig c;
  c.width = 16;
  c.heads = 2;
  c.mlp_ratio = 4;
  c.depth = 4;
  c.proj_dim = 8;
  c.vision = {8, 4, 3};
  c.text = {16, 6};
  return c;
}

struct GradSuiteCase {
  double lambda = 0;
  GradCheckResult result;
  bool passed = false;
};

// Finite-difference check of L_CLIP + lambda * L_dist with respect to every
// bank parameter, at lambda = 1 and lambda = 0, batch 4, float64, using the
// fourth-order central stencil. The bank
// is drawn with generic coefficients and LayerNorm scales so no gradient is
// structurally symmetric.
inline std::vector<GradSuiteCase> run_grad_suite(std::uint64_t seed = 21, double tolerance = 1e-4,
                                                 double eps = 1e-3) {
  const auto cfg = tiny_aux_config();
  auto bank = LearngeneBank<double>::create(cfg, seed);
  Rng rng(derive_seed(seed, hash_tag("gradcheck.bank")));
  for (auto& [name, p] : bank.params()) {
    if (name == "logit_scale") {
      p.value[0] = std::log(8.0);
    } else if (name.rfind("coeff.", 0) == 0) {
      p.value = uniform<double>(p.value.shape(), 0.2, 1.2, rng);
    } else if (name.find("gamma") != std::string::npos) {
      p.value = uniform<double>(p.value.shape(), 0.7, 1.3, rng);
    } else {
      p.value = uniform<double>(p.value.shape(), -0.1, 0.1, rng);
    }
  }
  const std::size_t batch = 4;
  ImageBatch<double> images{uniform<double>({batch * cfg.vision.patches(), cfg.vision.patch_dim()}, 0, 1, rng),
                            batch};
  TextBatch texts{{}, batch};
  for (std::size_t i = 0; i < batch * cfg.text.context_length; ++i) {
    texts.ids.push_back(static_cast<int>(rng() % cfg.text.vocab_size));
  }
  Graph<double> tg;
  const auto tv = tg.value(ad::l2_normalize_rows(tg, tg.constant(uniform<double>({batch, cfg.proj_dim}, -1, 1, rng))));
  const auto ts = tg.value(ad::l2_normalize_rows(tg, tg.constant(uniform<double>({batch, cfg.proj_dim}, -1, 1, rng))));
  const auto teacher = logits(tv, ts, 12.0, LogitSource::teacher).values;

  std::vector<GradSuiteCase> out;
  for (double lambda : {1.0, 0.0}) {
    auto loss = [&](Graph<double>& g) {
      AuxBinding<double> aux(bank);
      auto f = pair_features(g, aux, images, texts);
      return ad::train_loss(g, ad::logits(g, f.images, f.texts, f.tau), teacher, lambda).total;
    };
    GradSuiteCase c{lambda, grad_check(loss, all_params(bank.params()), eps, 64, seed, true), false};
    c.passed = c.result.max_rel_error <= tolerance;
    out.push_back(c);
  }
  return out;
}

}  // namespace mmlg
