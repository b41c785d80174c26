#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "mmlg/errors.hpp"
#include "mmlg/rng.hpp"
#include "mmlg/tensor.hpp"

namespace mmlg {

inline constexpr int kPadToken = 0;
inline constexpr int kEosToken = 1;

// Procedural scenes: up to `max_objects` filled shapes placed in distinct
// cells of a grid x grid layout. Captions list objects in row-major cell
// order as (color, shape, cell) tokens, padded, with EOS in the final slot.
struct SynthSpec {
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t grid = 2;
  std::size_t shapes = 4;
  std::size_t colors = 4;
  std::size_t min_objects = 1;
  std::size_t max_objects = 3;
  std::size_t context_length = 12;

  static constexpr std::size_t kMaxShapes = 4;
  static constexpr std::size_t kMaxColors = 6;

  std::size_t cells() const { return grid * grid; }
  std::size_t color_token(std::size_t c) const { return 2 + c; }
  std::size_t shape_token(std::size_t s) const { return 2 + colors + s; }
  std::size_t cell_token(std::size_t cell) const { return 2 + colors + shapes + cell; }
  std::size_t vocab_size() const { return 2 + colors + shapes + cells(); }
  std::size_t num_classes() const { return shapes; }

  void validate() const {
    require(image_size > 0 && grid > 0 && image_size % grid == 0,
            "synth: image_size must be a positive multiple of grid");
    require(channels == 3, "synth: only 3-channel rendering is supported");
    require(shapes >= 1 && shapes <= kMaxShapes, "synth: shapes must be in [1, 4]");
    require(colors >= 1 && colors <= kMaxColors, "synth: colors must be in [1, 6]");
    require(min_objects >= 1 && min_objects <= max_objects && max_objects <= cells(),
            "synth: need 1 <= min_objects <= max_objects <= grid*grid");
    require(3 * max_objects + 1 <= context_length,
            "synth: context_length too short for 3 tokens per object plus EOS");
    require(image_size / grid >= 4, "synth: grid cells must be at least 4 pixels wide");
  }

  // Number of distinct scenes: sum_k C(g^2, k) (shapes*colors)^k.
  std::uint64_t scene_count() const {
    std::uint64_t total = 0;
    const std::uint64_t sc = shapes * colors;
    for (std::size_t k = min_objects; k <= max_objects; ++k) {
      std::uint64_t choose = 1;
      for (std::size_t i = 0; i < k; ++i) choose = choose * (cells() - i) / (i + 1);
      std::uint64_t pw = 1;
      for (std::size_t i = 0; i < k; ++i) pw *= sc;
      total += choose * pw;
    }
    return total;
  }
};

// One cell per entry: 0 = empty, else 1 + color * shapes + shape.
using Scene = std::vector<std::uint8_t>;

struct Sample {
  Scene scene;
  std::vector<std::uint8_t> pixels;  // channels x size x size, value/255
  std::vector<int> tokens;
  int label = 0;
};

enum class Split { pretrain, downstream_train, downstream_test, all };

inline std::string_view split_name(Split s) {
  switch (s) {
    case Split::pretrain: return "pretrain";
    case Split::downstream_train: return "downstream-train";
    case Split::downstream_test: return "downstream-test";
    case Split::all: return "all";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  if (s == "pretrain") return Split::pretrain;
  if (s == "downstream-train") return Split::downstream_train;
  if (s == "downstream-test") return Split::downstream_test;
  if (s == "all") return Split::all;
  throw ValidationError("unknown data split '" + std::string(s) + "'");
}

struct SynthCorpus {
  SynthSpec spec;
  Split split = Split::all;
  std::uint64_t seed = 0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
};

namespace synth_detail {

struct Rgb {
  std::uint8_t r, g, b;
};

inline constexpr std::array<Rgb, SynthSpec::kMaxColors> kPalette{{
    {230, 40, 40},    // red
    {40, 200, 60},    // green
    {50, 80, 230},    // blue
    {235, 215, 40},   // yellow
    {200, 60, 220},   // magenta
    {40, 210, 220},   // cyan
}};

// Whether pixel (x, y), measured from the cell origin, is inside shape s.
inline bool inside(std::size_t shape, double x, double y, double cell) {
  const double m = cell * 0.15;
  const double lo = m, hi = cell - m;
  if (x < lo || x > hi || y < lo || y > hi) return false;
  const double c = cell / 2.0;
  const double half = (hi - lo) / 2.0;
  switch (shape) {
    case 0:  // square
      return true;
    case 1: {  // disc
      const double dx = x - c, dy = y - c;
      return dx * dx + dy * dy <= half * half;
    }
    case 2: {  // upward triangle
      const double t = (y - lo) / (hi - lo);
      return std::abs(x - c) <= t * half;
    }
    default: {  // plus sign
      const double w = half * 0.35;
      return std::abs(x - c) <= w || std::abs(y - c) <= w;
    }
  }
}

}  // namespace synth_detail

inline std::vector<std::uint8_t> render(const SynthSpec& spec, const Scene& scene) {
  const std::size_t n = spec.image_size;
  const std::size_t cell = n / spec.grid;
  std::vector<std::uint8_t> px(spec.channels * n * n, 0);
  for (std::size_t k = 0; k < scene.size(); ++k) {
    if (scene[k] == 0) continue;
    const std::size_t code = scene[k] - 1u;
    const std::size_t color = code / spec.shapes;
    const std::size_t shape = code % spec.shapes;
    const auto rgb = synth_detail::kPalette[color];
    const std::size_t oy = (k / spec.grid) * cell;
    const std::size_t ox = (k % spec.grid) * cell;
    for (std::size_t y = 0; y < cell; ++y) {
      for (std::size_t x = 0; x < cell; ++x) {
        if (!synth_detail::inside(shape, x + 0.5, y + 0.5, static_cast<double>(cell))) continue;
        const std::size_t at = (oy + y) * n + (ox + x);
        px[at] = rgb.r;
        px[n * n + at] = rgb.g;
        px[2 * n * n + at] = rgb.b;
      }
    }
  }
  return px;
}

inline std::vector<int> caption(const SynthSpec& spec, const Scene& scene) {
  std::vector<int> t;
  for (std::size_t k = 0; k < scene.size(); ++k) {
    if (scene[k] == 0) continue;
    const std::size_t code = scene[k] - 1u;
    t.push_back(static_cast<int>(spec.color_token(code / spec.shapes)));
    t.push_back(static_cast<int>(spec.shape_token(code % spec.shapes)));
    t.push_back(static_cast<int>(spec.cell_token(k)));
  }
  t.resize(spec.context_length - 1, kPadToken);
  t.push_back(kEosToken);
  return t;
}

// Shape of the first occupied cell in row-major order.
inline int class_label(const SynthSpec& spec, const Scene& scene) {
  for (auto v : scene) {
    if (v != 0) return static_cast<int>((v - 1u) % spec.shapes);
  }
  throw ValidationError("class_label: empty scene");
}

// All valid scenes in canonical order (odometer over cell states).
inline std::vector<Scene> enumerate_scenes(const SynthSpec& spec) {
  spec.validate();
  const std::size_t states = 1 + spec.shapes * spec.colors;
  std::vector<Scene> out;
  out.reserve(static_cast<std::size_t>(spec.scene_count()));
  Scene s(spec.cells(), 0);
  while (true) {
    std::size_t occupied = 0;
    for (auto v : s) occupied += v != 0;
    if (occupied >= spec.min_objects && occupied <= spec.max_objects) out.push_back(s);
    std::size_t k = 0;
    while (k < s.size() && ++s[k] == states) s[k++] = 0;
    if (k == s.size()) break;
  }
  return out;
}

inline Sample make_sample(const SynthSpec& spec, Scene scene) {
  Sample smp;
  smp.pixels = render(spec, scene);
  smp.tokens = caption(spec, scene);
  smp.label = class_label(spec, scene);
  smp.scene = std::move(scene);
  return smp;
}

// n distinct scenes drawn without replacement.
inline SynthCorpus generate(const SynthSpec& spec, std::uint64_t seed, std::size_t n) {
  spec.validate();
  if (n > spec.scene_count()) {
    throw ValidationError("generate: requested " + std::to_string(n) + " scenes but only " +
                          std::to_string(spec.scene_count()) + " exist");
  }
  auto scenes = enumerate_scenes(spec);
  Rng rng(derive_seed(seed, hash_tag("synth.generate")));
  // Partial Fisher-Yates: the first n slots become the sample.
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng() % (scenes.size() - i));
    std::swap(scenes[i], scenes[j]);
  }
  SynthCorpus c;
  c.spec = spec;
  c.seed = seed;
  c.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) c.samples.push_back(make_sample(spec, std::move(scenes[i])));
  return c;
}

// Split sizes: floor(f_i * n), then leftover items go one at a time to the
// splits with the largest fractional remainders (lower index wins ties).
inline std::array<std::size_t, 3> split_sizes(std::size_t n, const std::array<double, 3>& fractions) {
  double sum = 0;
  for (double f : fractions) {
    require(f >= 0.0 && std::isfinite(f), "split: fractions must be non-negative");
    sum += f;
  }
  require(std::abs(sum - 1.0) <= 1e-9, "split: fractions must sum to 1");
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> rem{};
  std::size_t used = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double exact = fractions[i] * static_cast<double>(n);
    sizes[i] = static_cast<std::size_t>(std::floor(exact));
    rem[i] = exact - static_cast<double>(sizes[i]);
    used += sizes[i];
  }
  while (used < n) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < 3; ++i) {
      if (rem[i] > rem[best]) best = i;
    }
    ++sizes[best];
    rem[best] = -1.0;
    ++used;
  }
  for (std::size_t i = 0; i < 3; ++i) {
    if (fractions[i] > 0.0 && sizes[i] == 0) {
      throw ValidationError("split: split " + std::to_string(i) + " has a positive fraction but no items");
    }
  }
  return sizes;
}

inline std::array<SynthCorpus, 3> split(const SynthCorpus& corpus, const std::array<double, 3>& fractions,
                                        std::uint64_t seed) {
  const auto sizes = split_sizes(corpus.size(), fractions);
  Rng rng(derive_seed(seed, hash_tag("synth.split")));
  const auto perm = permutation(corpus.size(), rng);
  std::array<SynthCorpus, 3> out;
  const std::array<Split, 3> tags{Split::pretrain, Split::downstream_train, Split::downstream_test};
  std::size_t at = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    out[i].spec = corpus.spec;
    out[i].split = tags[i];
    out[i].seed = seed;
    for (std::size_t k = 0; k < sizes[i]; ++k) out[i].samples.push_back(corpus.samples[perm[at++]]);
  }
  return out;
}

// Pixels of samples[indices] as [(B * patches) x (C * p * p)] rows, patches in
// row-major order and each patch flattened as (channel, y, x).
template <typename T>
Tensor<T> patchify(const SynthCorpus& corpus, std::span<const std::size_t> indices, std::size_t patch) {
  const auto& spec = corpus.spec;
  const std::size_t n = spec.image_size;
  require(n % patch == 0, "patchify: patch size must divide image size");
  const std::size_t per_side = n / patch;
  const std::size_t per_image = per_side * per_side;
  const std::size_t dim = spec.channels * patch * patch;
  Tensor<T> out({indices.size() * per_image, dim});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& px = corpus.samples.at(indices[b]).pixels;
    for (std::size_t py = 0; py < per_side; ++py) {
      for (std::size_t pxi = 0; pxi < per_side; ++pxi) {
        T* row = &out[((b * per_image) + py * per_side + pxi) * dim];
        std::size_t k = 0;
        for (std::size_t c = 0; c < spec.channels; ++c)
          for (std::size_t y = 0; y < patch; ++y)
            for (std::size_t x = 0; x < patch; ++x)
              row[k++] = static_cast<T>(px[c * n * n + (py * patch + y) * n + pxi * patch + x]) / T(255);
      }
    }
  }
  return out;
}

inline std::vector<int> token_batch(const SynthCorpus& corpus, std::span<const std::size_t> indices) {
  std::vector<int> ids;
  ids.reserve(indices.size() * corpus.spec.context_length);
  for (auto i : indices) {
    const auto& t = corpus.samples.at(i).tokens;
    ids.insert(ids.end(), t.begin(), t.end());
  }
  return ids;
}

}  // namespace mmlg
