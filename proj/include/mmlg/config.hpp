#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "mmlg/descendant.hpp"
#include "mmlg/model_config.hpp"
#include "mmlg/optim.hpp"
#include "mmlg/synth.hpp"

namespace mmlg {

struct DataConfig {
  SynthSpec spec;
  std::uint64_t seed = 7;
  std::size_t patch_size = 8;
  std::size_t vocab_size = 64;  // token ids past the synthetic vocabulary stay unused
  std::size_t pretrain = 3000;
  std::size_t downstream_train = 500;
  std::size_t downstream_test = 500;

  std::size_t total() const { return pretrain + downstream_train + downstream_test; }

  // The three disjoint splits, in (pretrain, downstream-train,
  // downstream-test) order.
  std::array<SynthCorpus, 3> build() const {
    const auto corpus = generate(spec, seed, total());
    const double n = double(total());
    return split(corpus, {double(pretrain) / n, double(downstream_train) / n, double(downstream_test) / n}, seed);
  }

  SynthCorpus build(Split s) const {
    require(s != Split::all, "data: choose one of pretrain, downstream-train, downstream-test");
    auto parts = build();
    return std::move(parts[static_cast<std::size_t>(s)]);
  }
};

struct RunConfig {
  DataConfig data;
  EncoderConfig ancestor;
  EncoderConfig learngene;
  TrainSchedule pretrain;
  TrainSchedule extract;
  bool tau_from_teacher = true;
  TrainSchedule activate;
  ActivateOptions activation;
  TrainSchedule retrieval;
  TrainSchedule classify;
  // Each task fine-tunes on at most this many leading downstream-train
  // samples; 0 takes the whole split.
  std::size_t retrieval_train = 250;
  std::size_t classify_train = 250;
  std::vector<std::size_t> depths{6, 8, 12};

  std::size_t task_train_size(std::size_t limit) const {
    return limit == 0 ? data.downstream_train : std::min(limit, data.downstream_train);
  }

  // Downstream-train samples for one task, from an already built split.
  SynthCorpus task_train(const SynthCorpus& downstream_train, std::size_t limit) const {
    SynthCorpus out = downstream_train;
    if (limit != 0 && limit < out.size()) out.samples.resize(limit);
    return out;
  }

  // Completes the encoder input shapes from the data section.
  void sync_shapes() {
    for (auto* c : {&ancestor, &learngene}) {
      c->vision = {data.spec.image_size, data.patch_size, data.spec.channels};
      c->text = {data.vocab_size, data.spec.context_length};
    }
  }

  void validate() const {
    data.spec.validate();
    require(data.vocab_size >= data.spec.vocab_size(),
            "data: vocab_size " + std::to_string(data.vocab_size) + " is below the " +
                std::to_string(data.spec.vocab_size()) + " tokens the scenes use");
    require(data.pretrain > 0 && data.downstream_train > 0 && data.downstream_test >= 5,
            "data: pretrain and downstream_train must be positive and downstream_test at least 5");
    require(data.total() <= data.spec.scene_count(),
            "data: " + std::to_string(data.total()) + " samples requested but only " +
                std::to_string(data.spec.scene_count()) + " distinct scenes exist");
    ancestor.validate();
    learngene.validate(true);
    require(ancestor.proj_dim == learngene.proj_dim, "ancestor and learngene proj_dim must match");
    for (auto n : depths) descendant_layer_plan(n, learngene.depth / 2);
    auto check = [](const TrainSchedule& s, std::size_t n, const std::string& section) {
      try {
        s.validate_for(n);
      } catch (const ValidationError& e) {
        throw ValidationError("[" + section + "] " + e.what());
      }
    };
    check(pretrain, data.pretrain, "pretrain");
    check(extract, data.pretrain, "extract");
    require(activation.fraction > 0 && activation.fraction <= 1, "[activate] fraction must be in (0, 1]");
    TrainSchedule act = activate;
    act.epochs = activation.epochs;
    check(act, activation_subset(data.pretrain, activation.fraction, activate.seed).size(), "activate");
    check(retrieval, task_train_size(retrieval_train), "retrieval");
    check(classify, task_train_size(classify_train), "classify");
  }
};

namespace config_detail {

namespace pt = boost::property_tree;

template <typename V>
void read(const pt::ptree& sec, const std::string& section, const std::string& key, V& out) {
  auto child = sec.get_child_optional(key);
  if (!child) return;
  const std::string raw = child->get_value<std::string>();
  std::istringstream in(raw);
  V v{};
  bool ok = true;
  if constexpr (std::is_unsigned_v<V>) ok = raw.find('-') == std::string::npos;
  if constexpr (std::is_same_v<V, bool>) {
    if (raw == "true" || raw == "1") v = true;
    else if (raw == "false" || raw == "0") v = false;
    else ok = false;
  } else {
    std::string rest;
    ok = ok && static_cast<bool>(in >> v) && !(in >> rest);
  }
  if (!ok) throw ValidationError("config: [" + section + "] " + key + " = '" + raw + "' is not a valid value");
  out = v;
}

inline std::vector<std::size_t> parse_depths(const std::string& raw) {
  std::vector<std::size_t> out;
  std::stringstream ss(raw);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(item, &pos);
    } catch (const std::exception&) {
      pos = std::string::npos;
    }
    while (pos < item.size() && item[pos] == ' ') ++pos;
    if (pos != item.size() || item.find('-') != std::string::npos) {
      throw ValidationError("depth list '" + raw + "' is not a comma-separated list of integers");
    }
    out.push_back(v);
  }
  if (out.empty()) throw ValidationError("depth list is empty");
  return out;
}

inline const std::set<std::string> kScheduleKeys{"epochs", "batch_size", "lr", "warmup_steps",
                                                 "weight_decay", "seed", "grad_clip"};

inline void read_schedule(const pt::ptree& sec, const std::string& name, TrainSchedule& s) {
  read(sec, name, "epochs", s.epochs);
  read(sec, name, "batch_size", s.batch_size);
  read(sec, name, "lr", s.lr);
  read(sec, name, "warmup_steps", s.warmup_steps);
  read(sec, name, "weight_decay", s.weight_decay);
  read(sec, name, "seed", s.seed);
  read(sec, name, "grad_clip", s.grad_clip);
}

inline void read_model(const pt::ptree& sec, const std::string& name, EncoderConfig& c) {
  read(sec, name, "width", c.width);
  read(sec, name, "heads", c.heads);
  read(sec, name, "mlp_ratio", c.mlp_ratio);
  read(sec, name, "depth", c.depth);
  read(sec, name, "proj_dim", c.proj_dim);
}

}  // namespace config_detail

// Built-in desk defaults before any file is applied.
inline RunConfig default_run_config() {
  RunConfig c;
  c.ancestor.width = 64;
  c.learngene.width = 32;
  for (auto* s : {&c.pretrain, &c.extract}) {
    s->epochs = 12;
    s->warmup_steps = 100;
  }
  c.activate.epochs = c.activation.epochs;
  c.activate.warmup_steps = 0;
  c.activate.lr = 5e-5;
  c.retrieval.epochs = 20;
  c.retrieval.warmup_steps = 10;
  c.retrieval.lr = 1e-4;
  c.classify.epochs = 30;
  c.classify.warmup_steps = 60;
  c.classify.lr = 1e-3;
  c.sync_shapes();
  return c;
}

// INI document with sections data, ancestor, learngene, pretrain, extract,
// activate, retrieval, classify and descendant. Missing keys keep their
// defaults; unknown sections or keys are rejected.
inline RunConfig parse_config(std::istream& in, const std::string& source = "config") {
  namespace pt = boost::property_tree;
  using namespace config_detail;
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ValidationError(source + ": " + e.what());
  }
  const auto sched = kScheduleKeys;
  auto with = [](std::set<std::string> base, std::initializer_list<std::string> more) {
    base.insert(more);
    return base;
  };
  const std::set<std::string> model_keys{"width", "heads", "mlp_ratio", "depth", "proj_dim"};
  const std::map<std::string, std::set<std::string>> known{
      {"data",
       {"seed", "image_size", "patch_size", "grid", "shapes", "colors", "min_objects", "max_objects",
        "context_length", "vocab_size", "pretrain", "downstream_train", "downstream_test"}},
      {"ancestor", model_keys},
      {"learngene", model_keys},
      {"pretrain", sched},
      {"extract", with(sched, {"lambda", "tau_from_teacher"})},
      {"activate", with(sched, {"fraction"})},
      {"retrieval", with(sched, {"train_size"})},
      {"classify", with(sched, {"train_size"})},
      {"descendant", {"depths"}},
  };
  for (const auto& [section, body] : tree) {
    auto it = known.find(section);
    if (it == known.end()) throw ValidationError(source + ": unknown section [" + section + "]");
    if (!body.data().empty()) throw ValidationError(source + ": key '" + section + "' outside any section");
    for (const auto& [key, _] : body) {
      if (!it->second.count(key)) throw ValidationError(source + ": unknown key '" + key + "' in [" + section + "]");
    }
  }
  RunConfig c = default_run_config();
  const pt::ptree empty;
  auto sec = [&](const char* name) -> const pt::ptree& {
    auto child = tree.get_child_optional(name);
    return child ? *child : empty;
  };
  const auto& data = sec("data");
  read(data, "data", "seed", c.data.seed);
  read(data, "data", "image_size", c.data.spec.image_size);
  read(data, "data", "patch_size", c.data.patch_size);
  read(data, "data", "grid", c.data.spec.grid);
  read(data, "data", "shapes", c.data.spec.shapes);
  read(data, "data", "colors", c.data.spec.colors);
  read(data, "data", "min_objects", c.data.spec.min_objects);
  read(data, "data", "max_objects", c.data.spec.max_objects);
  read(data, "data", "context_length", c.data.spec.context_length);
  read(data, "data", "vocab_size", c.data.vocab_size);
  read(data, "data", "pretrain", c.data.pretrain);
  read(data, "data", "downstream_train", c.data.downstream_train);
  read(data, "data", "downstream_test", c.data.downstream_test);
  read_model(sec("ancestor"), "ancestor", c.ancestor);
  read_model(sec("learngene"), "learngene", c.learngene);
  read_schedule(sec("pretrain"), "pretrain", c.pretrain);
  read_schedule(sec("extract"), "extract", c.extract);
  read(sec("extract"), "extract", "lambda", c.extract.lambda);
  read(sec("extract"), "extract", "tau_from_teacher", c.tau_from_teacher);
  read_schedule(sec("activate"), "activate", c.activate);
  read(sec("activate"), "activate", "fraction", c.activation.fraction);
  c.activation.epochs = c.activate.epochs;
  read_schedule(sec("retrieval"), "retrieval", c.retrieval);
  read(sec("retrieval"), "retrieval", "train_size", c.retrieval_train);
  read_schedule(sec("classify"), "classify", c.classify);
  read(sec("classify"), "classify", "train_size", c.classify_train);
  if (auto d = sec("descendant").get_optional<std::string>("depths")) c.depths = parse_depths(*d);
  c.sync_shapes();
  c.validate();
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config " + path.string());
  return parse_config(in, path.string());
}

}  // namespace mmlg
