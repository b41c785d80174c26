#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "mmlg/bank.hpp"
#include "mmlg/checkpoint.hpp"
#include "mmlg/plain_model.hpp"
#include "mmlg/synth.hpp"

namespace mmlg {

using MetaMap = std::map<std::string, std::string>;

// Weight matrices get decoupled weight decay; biases, LayerNorms, embeddings,
// coefficients and the logit scale do not.
inline bool decays(const std::string& name) {
  auto ends_with = [&](std::string_view s) {
    return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
  };
  for (std::string_view s : {".wq", ".wk", ".wv", ".wo", ".w1", ".w2", ".proj", ".patch_w"}) {
    if (ends_with(s)) return true;
  }
  return name == "head.w";
}

namespace io_detail {

inline std::size_t meta_size(const Checkpoint& ck, const std::string& key) {
  const auto& v = ck.meta_at(key);
  std::size_t pos = 0;
  unsigned long long out = 0;
  try {
    out = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = std::string::npos;
  }
  if (pos != v.size()) throw FormatError("meta " + key, "expected an unsigned integer, got '" + v + "'");
  return static_cast<std::size_t>(out);
}

inline void put_config(MetaMap& meta, const EncoderConfig& c) {
  meta["config.width"] = std::to_string(c.width);
  meta["config.heads"] = std::to_string(c.heads);
  meta["config.mlp_ratio"] = std::to_string(c.mlp_ratio);
  meta["config.depth"] = std::to_string(c.depth);
  meta["config.proj_dim"] = std::to_string(c.proj_dim);
  meta["config.image_size"] = std::to_string(c.vision.image_size);
  meta["config.patch_size"] = std::to_string(c.vision.patch_size);
  meta["config.channels"] = std::to_string(c.vision.channels);
  meta["config.vocab_size"] = std::to_string(c.text.vocab_size);
  meta["config.context_length"] = std::to_string(c.text.context_length);
}

inline EncoderConfig get_config(const Checkpoint& ck) {
  EncoderConfig c;
  c.width = meta_size(ck, "config.width");
  c.heads = meta_size(ck, "config.heads");
  c.mlp_ratio = meta_size(ck, "config.mlp_ratio");
  c.depth = meta_size(ck, "config.depth");
  c.proj_dim = meta_size(ck, "config.proj_dim");
  c.vision.image_size = meta_size(ck, "config.image_size");
  c.vision.patch_size = meta_size(ck, "config.patch_size");
  c.vision.channels = meta_size(ck, "config.channels");
  c.text.vocab_size = meta_size(ck, "config.vocab_size");
  c.text.context_length = meta_size(ck, "config.context_length");
  return c;
}

inline void expect_role(const Checkpoint& ck, std::string_view role) {
  const auto& r = ck.meta_at("role");
  if (r != role) throw FormatError("meta role", "expected a " + std::string(role) + " checkpoint, found '" + r + "'");
}

template <typename T>
ParamStore<T> params_from(const Checkpoint& ck) {
  ParamStore<T> store;
  for (const auto& [name, raw] : ck.tensors) {
    if (raw.dtype != DType::f32 && raw.dtype != DType::f64) {
      throw FormatError("tensor " + name, "parameters must be floating point");
    }
    store.add(name, ck.get<T>(name), decays(name));
  }
  return store;
}

template <typename T>
void put_params(Checkpoint& ck, const ParamStore<T>& store) {
  for (const auto& [name, p] : store) ck.put(name, p.value);
}

}  // namespace io_detail

template <typename T>
Checkpoint to_checkpoint(const LearngeneBank<T>& bank, const MetaMap& extra = {}) {
  Checkpoint ck;
  ck.meta = extra;
  ck.meta["role"] = "bank";
  io_detail::put_config(ck.meta, bank.config());
  io_detail::put_params(ck, bank.params());
  return ck;
}

template <typename T>
LearngeneBank<T> bank_from_checkpoint(const Checkpoint& ck) {
  io_detail::expect_role(ck, "bank");
  try {
    return LearngeneBank<T>(io_detail::get_config(ck), io_detail::params_from<T>(ck));
  } catch (const FormatError&) {
    throw;
  } catch (const ValidationError& e) {
    throw FormatError("tensors", e.what());
  }
}

template <typename T>
void save_bank(const LearngeneBank<T>& bank, const std::filesystem::path& path, const MetaMap& extra = {}) {
  save_checkpoint(to_checkpoint(bank, extra), path);
}

template <typename T>
LearngeneBank<T> load_bank(const std::filesystem::path& path) {
  return bank_from_checkpoint<T>(load_checkpoint(path));
}

template <typename T>
Checkpoint to_checkpoint(const PlainModel<T>& m, const MetaMap& extra = {}) {
  Checkpoint ck;
  ck.meta = extra;
  ck.meta["role"] = "model";
  ck.meta["modality"] = std::string(to_string(m.modality));
  ck.meta["classes"] = std::to_string(m.classes);
  io_detail::put_config(ck.meta, m.config);
  io_detail::put_params(ck, m.params);
  return ck;
}

template <typename T>
PlainModel<T> model_from_checkpoint(const Checkpoint& ck) {
  io_detail::expect_role(ck, "model");
  PlainModel<T> m;
  m.config = io_detail::get_config(ck);
  try {
    m.config.validate();
    m.modality = parse_modality(ck.meta_at("modality"));
  } catch (const FormatError&) {
    throw;
  } catch (const ValidationError& e) {
    throw FormatError("meta", e.what());
  }
  m.classes = io_detail::meta_size(ck, "classes");
  m.params = io_detail::params_from<T>(ck);
  // Layout check against a freshly built model of the same shape.
  auto ref = PlainModel<T>::create(m.config, m.modality, 0);
  if (m.classes > 0) ref.attach_head(m.classes, 0);
  for (const auto& [name, p] : ref.params) {
    if (!m.params.contains(name)) throw FormatError("tensor " + name, "missing");
    if (m.params.at(name).value.shape() != p.value.shape()) throw FormatError("tensor " + name, "wrong shape");
  }
  if (m.params.size() != ref.params.size()) throw FormatError("tensors", "unexpected extra tensors");
  return m;
}

template <typename T>
void save_model(const PlainModel<T>& m, const std::filesystem::path& path, const MetaMap& extra = {}) {
  save_checkpoint(to_checkpoint(m, extra), path);
}

template <typename T>
PlainModel<T> load_model(const std::filesystem::path& path) {
  return model_from_checkpoint<T>(load_checkpoint(path));
}

// Corpus export: scenes, pixels, tokens and labels as integer tensors.
inline Checkpoint to_checkpoint(const SynthCorpus& c) {
  require(c.size() > 0, "corpus export: empty corpus");
  const auto& s = c.spec;
  Checkpoint ck;
  ck.meta["role"] = "corpus";
  ck.meta["split"] = std::string(split_name(c.split));
  ck.meta["seed"] = std::to_string(c.seed);
  for (auto [k, v] : {std::pair{"image_size", s.image_size}, {"channels", s.channels}, {"grid", s.grid},
                      {"shapes", s.shapes}, {"colors", s.colors}, {"min_objects", s.min_objects},
                      {"max_objects", s.max_objects}, {"context_length", s.context_length}}) {
    ck.meta[std::string("synth.") + k] = std::to_string(v);
  }
  const std::size_t n = c.size(), px = s.channels * s.image_size * s.image_size;
  std::vector<std::uint8_t> scenes, pixels;
  std::vector<std::int32_t> tokens, labels;
  for (const auto& smp : c.samples) {
    scenes.insert(scenes.end(), smp.scene.begin(), smp.scene.end());
    pixels.insert(pixels.end(), smp.pixels.begin(), smp.pixels.end());
    tokens.insert(tokens.end(), smp.tokens.begin(), smp.tokens.end());
    labels.push_back(smp.label);
  }
  ck.put_raw<std::uint8_t>("scenes", {n, s.cells()}, scenes);
  ck.put_raw<std::uint8_t>("pixels", {n, px}, pixels);
  ck.put_raw<std::int32_t>("tokens", {n, s.context_length}, tokens);
  ck.put_raw<std::int32_t>("labels", {n}, labels);
  return ck;
}

inline SynthCorpus corpus_from_checkpoint(const Checkpoint& ck) {
  io_detail::expect_role(ck, "corpus");
  SynthCorpus c;
  auto& s = c.spec;
  s.image_size = io_detail::meta_size(ck, "synth.image_size");
  s.channels = io_detail::meta_size(ck, "synth.channels");
  s.grid = io_detail::meta_size(ck, "synth.grid");
  s.shapes = io_detail::meta_size(ck, "synth.shapes");
  s.colors = io_detail::meta_size(ck, "synth.colors");
  s.min_objects = io_detail::meta_size(ck, "synth.min_objects");
  s.max_objects = io_detail::meta_size(ck, "synth.max_objects");
  s.context_length = io_detail::meta_size(ck, "synth.context_length");
  try {
    s.validate();
    c.split = parse_split(ck.meta_at("split"));
  } catch (const FormatError&) {
    throw;
  } catch (const ValidationError& e) {
    throw FormatError("meta", e.what());
  }
  c.seed = io_detail::meta_size(ck, "seed");
  const auto scenes = ck.get<std::uint8_t>("scenes");
  const std::size_t n = scenes.rows();
  if (scenes.cols() != s.cells()) throw FormatError("tensor scenes", "wrong shape");
  if (ck.get<std::uint8_t>("pixels").shape() != Shape{n, s.channels * s.image_size * s.image_size} ||
      ck.get<std::int32_t>("tokens").shape() != Shape{n, s.context_length} ||
      ck.get<std::int32_t>("labels").shape() != Shape{n}) {
    throw FormatError("tensors", "corpus tensor shapes disagree");
  }
  // Samples are regenerated from their scenes and checked against the stored
  // pixels and tokens.
  const auto pixels = ck.get<std::uint8_t>("pixels");
  const auto tokens = ck.get<std::int32_t>("tokens");
  for (std::size_t i = 0; i < n; ++i) {
    Scene scene(scenes.data().begin() + i * s.cells(), scenes.data().begin() + (i + 1) * s.cells());
    for (auto code : scene) {
      if (code > s.shapes * s.colors) throw FormatError("tensor scenes", "invalid cell code");
    }
    auto smp = make_sample(s, std::move(scene));
    const auto px = pixels.data().subspan(i * smp.pixels.size(), smp.pixels.size());
    const auto tk = tokens.data().subspan(i * s.context_length, s.context_length);
    if (!std::equal(px.begin(), px.end(), smp.pixels.begin()) || !std::equal(tk.begin(), tk.end(), smp.tokens.begin())) {
      throw FormatError("tensors", "sample " + std::to_string(i) + " does not match its scene");
    }
    c.samples.push_back(std::move(smp));
  }
  return c;
}

}  // namespace mmlg
