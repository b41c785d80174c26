#pragma once

#include "mmlg/encoders.hpp"
#include "mmlg/optim.hpp"
#include "mmlg/rng.hpp"
#include "mmlg/synth.hpp"

namespace mmlg::testing {

// d=16, 2 heads, 4 layers; 8x8 images in 4x4 patches; 6-token captions.
inline EncoderConfig tiny_config(std::size_t depth = 4) {
  EncoderConfig c;
  c.width = 16;
  c.heads = 2;
  c.mlp_ratio = 4;
  c.depth = depth;
  c.proj_dim = 8;
  c.vision = {8, 4, 3};
  c.text = {16, 6};
  return c;
}

// Synthetic scenes sized for tiny_config: 8x8 images on a 2x2 grid with one
// object each, captions of 6 tokens. 64 distinct scenes.
inline SynthSpec tiny_synth_spec() {
  SynthSpec s;
  s.image_size = 8;
  s.grid = 2;
  s.shapes = 4;
  s.colors = 4;
  s.min_objects = 1;
  s.max_objects = 1;
  s.context_length = 6;
  return s;
}

inline SynthCorpus tiny_corpus(std::size_t n, std::uint64_t seed = 1) {
  return generate(tiny_synth_spec(), seed, n);
}

inline TrainSchedule tiny_schedule(std::size_t epochs = 2, std::uint64_t seed = 1) {
  TrainSchedule s;
  s.epochs = epochs;
  s.batch_size = 8;
  s.lr = 1e-3;
  s.warmup_steps = 2;
  s.seed = seed;
  return s;
}

template <typename T>
ImageBatch<T> random_images(const EncoderConfig& cfg, std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  return {uniform<T>({count * cfg.vision.patches(), cfg.vision.patch_dim()}, 0.0, 1.0, rng), count};
}

inline TextBatch random_texts(const EncoderConfig& cfg, std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  TextBatch t{{}, count};
  for (std::size_t i = 0; i < count * cfg.text.context_length; ++i) {
    t.ids.push_back(static_cast<int>(rng() % cfg.text.vocab_size));
  }
  return t;
}

// Random bank with generic (non-0.5) coefficients and non-trivial shared parts.
template <typename T>
LearngeneBank<T> random_bank(const EncoderConfig& cfg, std::uint64_t seed, double block_std = 0.3) {
  auto bank = LearngeneBank<T>::create(cfg, seed);
  Rng rng(derive_seed(seed, 77));
  for (auto& [name, p] : bank.params()) {
    if (name == "logit_scale") continue;
    if (name.rfind("coeff.", 0) == 0) {
      p.value = uniform<T>(p.value.shape(), 0.2, 1.2, rng);
    } else if (name.find("gamma") != std::string::npos) {
      p.value = uniform<T>(p.value.shape(), 0.7, 1.3, rng);
    } else {
      p.value = uniform<T>(p.value.shape(), -block_std, block_std, rng);
    }
  }
  return bank;
}

}  // namespace mmlg::testing
