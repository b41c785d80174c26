#pragma once

#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "mmlg/bank.hpp"
#include "mmlg/encoders.hpp"
#include "mmlg/metrics.hpp"
#include "mmlg/objectives.hpp"
#include "mmlg/optim.hpp"
#include "mmlg/plain_model.hpp"

namespace mmlg {

template <typename T>
ParamStore<T>& params_of(PlainModel<T>& m) {
  return m.params;
}
template <typename T>
ParamStore<T>& params_of(LearngeneBank<T>& b) {
  return b.params();
}
template <typename T>
const EncoderConfig& config_of(const PlainModel<T>& m) {
  return m.config;
}
template <typename T>
const EncoderConfig& config_of(const LearngeneBank<T>& b) {
  return b.config();
}

// Frozen teacher outputs for every sample of a corpus. Encoders see each
// example independently, so per-sample features equal in-batch features.
template <typename T>
struct TeacherTargets {
  Tensor<T> images;  // N x proj_dim
  Tensor<T> texts;   // N x proj_dim
  T tau = 0;
};

template <typename T>
TeacherTargets<T> teacher_targets(PlainModel<T> teacher, const SynthCorpus& data, std::size_t chunk = 256) {
  require(teacher.modality == ModelModality::dual, "teacher must be a dual encoder");
  require(data.size() > 0, "teacher targets: empty corpus");
  const std::size_t n = data.size(), k = teacher.config.proj_dim;
  TeacherTargets<T> out{Tensor<T>({n, k}), Tensor<T>({n, k}), 0};
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += chunk) {
    idx.resize(std::min(chunk, n - start));
    std::iota(idx.begin(), idx.end(), start);
    auto res = forward_pair(teacher, image_batch<T>(data, idx, teacher.config), text_batch(data, idx));
    std::copy(res.images.data().begin(), res.images.data().end(), out.images.data().begin() + start * k);
    std::copy(res.texts.data().begin(), res.texts.data().end(), out.texts.data().begin() + start * k);
    out.tau = res.tau;
  }
  return out;
}

template <typename T>
Tensor<T> take_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  const std::size_t k = x.cols();
  Tensor<T> out({rows.size(), k});
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(x.data().begin() + rows[i] * k, k, out.data().begin() + i * k);
  return out;
}

struct EpochStats {
  std::size_t epoch = 0;
  std::size_t steps = 0;
  double clip = 0, dist = 0, total = 0, tau = 0;
};

struct TrainResult {
  std::vector<EpochStats> epochs;
  std::size_t steps = 0;
  double final_loss() const { return epochs.empty() ? std::nan("") : epochs.back().total; }
};

template <typename T>
struct TrainOptions {
  std::string stage = "train";
  const TeacherTargets<T>* teacher = nullptr;  // enables the distillation term
  std::function<bool(const std::string&)> frozen;
  MetricsSink* metrics = nullptr;
};

// Epoch order for `n` items: a fresh seeded permutation per epoch, full
// batches only (one short batch when n < batch size).
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, const TrainSchedule& s,
                                                           std::size_t epoch) {
  Rng rng(derive_seed(derive_seed(s.seed, hash_tag("batches")), epoch));
  const auto perm = permutation(n, rng);
  const std::size_t per = s.batches_per_epoch(n);
  const std::size_t bs = std::min(n, s.batch_size);
  std::vector<std::vector<std::size_t>> out(per);
  for (std::size_t b = 0; b < per; ++b) out[b].assign(perm.begin() + b * bs, perm.begin() + (b + 1) * bs);
  return out;
}

// Contrastive training of a dual encoder (plain or auxiliary) on
// data[subset]. With a teacher the objective is L_CLIP + lambda * L_dist.
template <typename T, template <typename> class Model>
TrainResult train_contrastive(Model<T>& model, const SynthCorpus& data, std::vector<std::size_t> subset,
                              const TrainSchedule& s, const TrainOptions<T>& opt = {}) {
  if (subset.empty()) {
    subset.resize(data.size());
    std::iota(subset.begin(), subset.end(), 0);
  }
  require(!subset.empty(), opt.stage + ": no training data");
  s.validate_for(subset.size());
  const auto& cfg = config_of(model);
  auto& params = params_of(model);
  const std::size_t per = s.batches_per_epoch(subset.size());
  const std::size_t total_steps = s.epochs * per;
  AdamW<T> adam(s);
  TrainResult result;
  std::vector<std::size_t> idx;
  for (std::size_t epoch = 0; epoch < s.epochs; ++epoch) {
    EpochStats st{epoch, 0, 0, 0, 0, 0};
    for (const auto& batch : epoch_batches(subset.size(), s, epoch)) {
      idx.resize(batch.size());
      for (std::size_t i = 0; i < batch.size(); ++i) idx[i] = subset[batch[i]];
      Graph<T> g;
      auto bind = binding(model);
      auto pv = pair_features(g, bind, image_batch<T>(data, idx, cfg), text_batch(data, idx));
      Var lg = ad::logits(g, pv.images, pv.texts, pv.tau);
      Var clip = ad::clip_loss(g, lg);
      Var loss = clip;
      double dist_value = 0;
      if (opt.teacher) {
        const auto& t = *opt.teacher;
        auto tl = logits(take_rows(t.images, idx), take_rows(t.texts, idx), t.tau, LogitSource::teacher);
        auto parts = ad::train_loss(g, lg, tl.values, static_cast<T>(s.lambda));
        clip = parts.clip;
        loss = parts.total;
        dist_value = g.value(parts.dist).item();
      }
      const double loss_value = g.value(loss).item();
      if (!std::isfinite(loss_value)) {
        throw NumericError(opt.stage + ": non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(result.steps));
      }
      params.zero_grad();
      g.backward(loss);
      if (s.grad_clip > 0) clip_grad_norm(params, s.grad_clip);
      adam.step(params, learning_rate(s, result.steps, total_steps), opt.frozen);
      ++result.steps;
      ++st.steps;
      st.clip += g.value(clip).item();
      st.dist += dist_value;
      st.total += loss_value;
    }
    st.clip /= double(st.steps);
    st.dist /= double(st.steps);
    st.total /= double(st.steps);
    st.tau = std::clamp(std::exp(double(params.at("logit_scale").value.item())), kMinLogitScale, kMaxLogitScale);
    if (opt.metrics) {
      auto& m = *opt.metrics;
      m.emit(opt.stage, epoch, "L_CLIP", st.clip, s.seed);
      if (opt.teacher) {
        m.emit(opt.stage, epoch, "L_dist", st.dist, s.seed);
        m.emit(opt.stage, epoch, "L_train", st.total, s.seed);
      }
      m.emit(opt.stage, epoch, "tau", st.tau, s.seed);
    }
    result.epochs.push_back(st);
  }
  params.zero_grad();
  return result;
}

template <typename T>
struct AncestorRun {
  PlainModel<T> model;
  TrainResult log;
};

// Unshared dual encoder trained with the CLIP loss only.
template <typename T>
AncestorRun<T> pretrain_ancestor(const EncoderConfig& cfg, const SynthCorpus& data, const TrainSchedule& s,
                                 MetricsSink* metrics = nullptr) {
  auto model = PlainModel<T>::create(cfg, ModelModality::dual, s.seed);
  TrainOptions<T> opt;
  opt.stage = "pretrain";
  opt.metrics = metrics;
  auto log = train_contrastive(model, data, {}, s, opt);
  return {std::move(model), std::move(log)};
}

struct ExtractOptions {
  bool tau_from_teacher = true;
  std::uint64_t init_seed = 0;
};

template <typename T>
struct ExtractRun {
  LearngeneBank<T> bank;
  TrainResult log;
};

// Trains the weight-shared auxiliary model against a frozen teacher.
template <typename T>
ExtractRun<T> extract(const PlainModel<T>& teacher, const EncoderConfig& bank_cfg, const SynthCorpus& data,
                      const TrainSchedule& s, const ExtractOptions& eo = {}, MetricsSink* metrics = nullptr,
                      std::function<bool(const std::string&)> frozen = {}) {
  require(teacher.modality == ModelModality::dual, "extract: teacher must be a dual encoder");
  if (teacher.config.proj_dim != bank_cfg.proj_dim) {
    throw ValidationError("extract: teacher proj_dim " + std::to_string(teacher.config.proj_dim) +
                          " differs from auxiliary proj_dim " + std::to_string(bank_cfg.proj_dim));
  }
  require(teacher.config.vision == bank_cfg.vision && teacher.config.text == bank_cfg.text,
          "extract: teacher and auxiliary input shapes differ");
  auto bank = LearngeneBank<T>::create(bank_cfg, eo.init_seed);
  if (eo.tau_from_teacher) bank.params().at("logit_scale").value = teacher.params.at("logit_scale").value;
  const auto targets = teacher_targets(teacher, data);
  TrainOptions<T> opt;
  opt.stage = "extract";
  opt.teacher = &targets;
  opt.metrics = metrics;
  opt.frozen = std::move(frozen);
  auto log = train_contrastive(bank, data, {}, s, opt);
  return {std::move(bank), std::move(log)};
}

}  // namespace mmlg
