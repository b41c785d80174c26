#pragma once

#include <array>
#include <cstdio>
#include <string>
#include <string_view>

#include "mmlg/errors.hpp"
#include "mmlg/tensor.hpp"

namespace mmlg {

// Which encoder a computation belongs to.
enum class Encoder { vision, language };

// Block kinds inside one group of the learngene.
enum class BlockKind { vision, language, multimodal };

enum class ModelModality { vision, language, dual };

enum class InitMode { full, no_mm, only_mm, scratch };

inline std::string_view to_string(Encoder e) { return e == Encoder::vision ? "vision" : "text"; }

inline std::string_view to_string(BlockKind k) {
  switch (k) {
    case BlockKind::vision: return "vision";
    case BlockKind::language: return "language";
    case BlockKind::multimodal: return "multimodal";
  }
  return "?";
}

inline std::string_view to_string(ModelModality m) {
  switch (m) {
    case ModelModality::vision: return "vision";
    case ModelModality::language: return "language";
    case ModelModality::dual: return "dual";
  }
  return "?";
}

inline std::string_view to_string(InitMode m) {
  switch (m) {
    case InitMode::full: return "full";
    case InitMode::no_mm: return "no_mm";
    case InitMode::only_mm: return "only_mm";
    case InitMode::scratch: return "scratch";
  }
  return "?";
}

inline ModelModality parse_modality(std::string_view s) {
  if (s == "vision") return ModelModality::vision;
  if (s == "language") return ModelModality::language;
  if (s == "dual") return ModelModality::dual;
  throw ValidationError("unknown modality '" + std::string(s) + "'");
}

inline InitMode parse_init_mode(std::string_view s) {
  if (s == "full") return InitMode::full;
  if (s == "no_mm") return InitMode::no_mm;
  if (s == "only_mm") return InitMode::only_mm;
  if (s == "scratch") return InitMode::scratch;
  throw ValidationError("unknown init mode '" + std::string(s) + "'");
}

inline bool has_encoder(ModelModality m, Encoder e) {
  return m == ModelModality::dual || (e == Encoder::vision ? m == ModelModality::vision
                                                           : m == ModelModality::language);
}

struct VisionShape {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t channels = 3;

  std::size_t patches() const { return (image_size / patch_size) * (image_size / patch_size); }
  std::size_t tokens() const { return patches() + 1; }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  bool operator==(const VisionShape&) const = default;
};

struct TextShape {
  std::size_t vocab_size = 64;
  std::size_t context_length = 12;
  bool operator==(const TextShape&) const = default;
};

// Shape of a dual encoder. Both encoders share width, heads, MLP ratio and depth.
struct EncoderConfig {
  std::size_t width = 32;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t depth = 12;
  std::size_t proj_dim = 32;
  VisionShape vision;
  TextShape text;

  bool operator==(const EncoderConfig&) const = default;

  void validate(bool auxiliary = false) const {
    require(width > 0 && heads > 0 && mlp_ratio > 0 && depth > 0 && proj_dim > 0,
            "encoder config: width, heads, mlp_ratio, depth and proj_dim must be positive");
    require(width % heads == 0, "encoder config: width " + std::to_string(width) +
                                    " is not divisible by heads " + std::to_string(heads));
    require(!auxiliary || depth % 2 == 0, "encoder config: auxiliary depth must be even");
    require(vision.patch_size > 0 && vision.image_size % vision.patch_size == 0,
            "encoder config: patch_size must divide image_size");
    require(vision.channels > 0, "encoder config: channels must be positive");
    require(text.vocab_size > 0 && text.context_length > 0,
            "encoder config: vocab_size and context_length must be positive");
  }
};

// The weights and biases of one transformer layer's attention and MLP linear
// maps; the unit of sharing.
inline constexpr std::array<std::string_view, 12> kBlockFields{
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "w1", "b1", "w2", "b2"};

enum BlockField : std::size_t { kWq, kBq, kWk, kBk, kWv, kBv, kWo, kBo, kW1, kB1, kW2, kB2 };

inline Shape block_field_shape(std::size_t field, std::size_t d, std::size_t r) {
  switch (field) {
    case kW1: return {d, r * d};
    case kB1: return {r * d};
    case kW2: return {r * d, d};
    case kWq: case kWk: case kWv: case kWo: return {d, d};
    default: return {d};
  }
}

inline bool block_field_is_weight(std::size_t field) { return field % 2 == 0; }

// (4 + 2r) d^2 + (5 + r) d
inline std::size_t layer_param_count(std::size_t d, std::size_t r) {
  require(d >= 1 && r >= 1, "layer_param_count: d and r must be >= 1");
  return (4 + 2 * r) * d * d + (5 + r) * d;
}

inline std::string layer_prefix(Encoder e, std::size_t layer) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%02zu", layer);
  return std::string(to_string(e)) + ".layer." + buf + ".";
}

}  // namespace mmlg
