#pragma once

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "mmlg/descendant.hpp"
#include "mmlg/encoders.hpp"
#include "mmlg/extraction.hpp"

namespace mmlg {

struct RetrievalReport {
  double i2t_r1 = 0, i2t_r5 = 0;
  double t2i_r1 = 0, t2i_r5 = 0;
  std::size_t n_queries = 0;
};

struct ClassifyReport {
  double accuracy = 0;
  std::size_t n_examples = 0;
  std::size_t classes = 0;
};

// Zero-based rank of column `target` in row `row` of `scores`: items scoring
// higher, plus equal-scoring items with a lower index, come first.
template <typename T>
std::size_t rank_of(const Tensor<T>& scores, std::size_t row, std::size_t target) {
  const std::size_t g = scores.cols();
  const T s = scores(row, target);
  std::size_t rank = 0;
  for (std::size_t j = 0; j < g; ++j) {
    if (scores(row, j) > s || (scores(row, j) == s && j < target)) ++rank;
  }
  return rank;
}

// Recall@1/@5 from a square image-by-text score matrix whose diagonal holds
// the true pairs. With fewer than 5 items recall@5 is trivially 100.
template <typename T>
RetrievalReport retrieval_from_scores(const Tensor<T>& scores) {
  require(scores.rank() == 2 && scores.rows() == scores.cols(), "eval_retrieval: score matrix must be square");
  const std::size_t g = scores.rows();
  const auto t = transposed(scores);
  RetrievalReport r;
  r.n_queries = g;
  for (std::size_t i = 0; i < g; ++i) {
    const auto ri = rank_of(scores, i, i);
    const auto rt = rank_of(t, i, i);
    r.i2t_r1 += ri < 1;
    r.i2t_r5 += ri < 5;
    r.t2i_r1 += rt < 1;
    r.t2i_r5 += rt < 5;
  }
  for (double* v : {&r.i2t_r1, &r.i2t_r5, &r.t2i_r1, &r.t2i_r5}) *v = 100.0 * *v / double(g);
  return r;
}

// Image and text features of every sample, in corpus order.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> corpus_features(PlainModel<T>& model, const SynthCorpus& data,
                                                std::size_t chunk = 256) {
  const std::size_t n = data.size(), k = model.config.proj_dim;
  require(n > 0, "corpus features: empty corpus");
  Tensor<T> images({n, k}), texts({n, k});
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += chunk) {
    idx.resize(std::min(chunk, n - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto v = encode_image(model, image_batch<T>(data, idx, model.config));
    const auto s = encode_text(model, text_batch(data, idx));
    std::copy(v.data().begin(), v.data().end(), images.data().begin() + start * k);
    std::copy(s.data().begin(), s.data().end(), texts.data().begin() + start * k);
  }
  return {std::move(images), std::move(texts)};
}

template <typename T>
RetrievalReport eval_retrieval(PlainModel<T> model, const SynthCorpus& gallery) {
  require(model.modality == ModelModality::dual, "eval_retrieval: model must be a dual encoder");
  const auto [v, s] = corpus_features(model, gallery);
  // Ranking is unaffected by the positive logit scale, so plain cosine
  // similarities are ranked.
  return retrieval_from_scores(logits(v, s, T(1)).values);
}

template <typename T>
TrainResult finetune_retrieval(PlainModel<T>& model, const SynthCorpus& train, const TrainSchedule& s,
                               MetricsSink* metrics = nullptr) {
  require(model.modality == ModelModality::dual, "finetune_retrieval: model must be a dual encoder");
  TrainOptions<T> opt;
  opt.stage = "finetune-retrieval";
  opt.metrics = metrics;
  return train_contrastive(model, train, {}, s, opt);
}

// Vision branch of a dual model with a freshly initialized linear head.
template <typename T>
PlainModel<T> classifier_from(const PlainModel<T>& model, std::size_t classes, std::uint64_t seed) {
  auto out = model.vision_branch();
  out.params.erase_prefix("head.");
  out.classes = 0;
  out.attach_head(classes, seed);
  return out;
}

template <typename T>
Var class_logits(Graph<T>& g, PlainModel<T>& model, const ImageBatch<T>& images) {
  require(model.has_head(), "classifier: model has no head");
  auto b = binding(model);
  Var pooled = vision_pooled(g, b, images);
  return ad::add_row(g, ad::matmul(g, pooled, g.param(model.params.at("head.w"))), g.param(model.params.at("head.b")));
}

inline void check_labels(const SynthCorpus& data, std::size_t classes) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    const int y = data.samples[i].label;
    if (y < 0 || std::size_t(y) >= classes) {
      throw ValidationError("classify: label " + std::to_string(y) + " of sample " + std::to_string(i) +
                            " is outside [0, " + std::to_string(classes) + ")");
    }
  }
}

// Softmax cross-entropy training of a vision model with a linear head.
template <typename T>
TrainResult finetune_classify(PlainModel<T>& model, const SynthCorpus& train, const TrainSchedule& s,
                              MetricsSink* metrics = nullptr) {
  require(model.has_head(), "finetune_classify: model has no head");
  require(train.size() > 0, "finetune_classify: no training data");
  check_labels(train, model.classes);
  s.validate_for(train.size());
  const std::size_t total_steps = s.epochs * s.batches_per_epoch(train.size());
  AdamW<T> adam(s);
  TrainResult result;
  for (std::size_t epoch = 0; epoch < s.epochs; ++epoch) {
    EpochStats st{epoch, 0, 0, 0, 0, 0};
    for (const auto& idx : epoch_batches(train.size(), s, epoch)) {
      Graph<T> g;
      Var lg = class_logits(g, model, image_batch<T>(train, idx, model.config));
      Tensor<T> targets({idx.size(), model.classes});
      for (std::size_t i = 0; i < idx.size(); ++i) targets(i, std::size_t(train.samples[idx[i]].label)) = T(1);
      Var loss = ad::cross_entropy_rows(g, lg, targets);
      const double value = g.value(loss).item();
      if (!std::isfinite(value)) {
        throw NumericError("finetune-classify: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(result.steps));
      }
      model.params.zero_grad();
      g.backward(loss);
      if (s.grad_clip > 0) clip_grad_norm(model.params, s.grad_clip);
      adam.step(model.params, learning_rate(s, result.steps, total_steps));
      ++result.steps;
      ++st.steps;
      st.total += value;
    }
    st.total /= double(st.steps);
    st.clip = st.total;
    if (metrics) metrics->emit("finetune-classify", epoch, "L_CE", st.total, s.seed);
    result.epochs.push_back(st);
  }
  model.params.zero_grad();
  return result;
}

// Top-1 accuracy; ties go to the lowest class index.
template <typename T>
ClassifyReport accuracy_from_logits(const Tensor<T>& logits, std::span<const int> labels) {
  require(logits.rows() == labels.size() && logits.rows() > 0, "eval_accuracy: need one label per logit row");
  const std::size_t c = logits.cols();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (logits(i, j) > logits(i, best)) best = j;
    }
    correct += int(best) == labels[i];
  }
  return {100.0 * double(correct) / double(logits.rows()), logits.rows(), c};
}

template <typename T>
ClassifyReport eval_accuracy(PlainModel<T> model, const SynthCorpus& test, std::size_t chunk = 256) {
  require(test.size() > 0, "eval_accuracy: empty test set");
  check_labels(test, model.classes);
  Tensor<T> all({test.size(), model.classes});
  std::vector<int> labels(test.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < test.size(); start += chunk) {
    idx.resize(std::min(chunk, test.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    Graph<T> g;
    const auto& out = g.value(class_logits(g, model, image_batch<T>(test, idx, model.config)));
    std::copy(out.data().begin(), out.data().end(), all.data().begin() + start * model.classes);
  }
  for (std::size_t i = 0; i < test.size(); ++i) labels[i] = test.samples[i].label;
  return accuracy_from_logits(all, labels);
}

}  // namespace mmlg
