#pragma once

#include <cmath>

#include "mmlg/autodiff.hpp"

namespace mmlg {

enum class LogitSource { student, teacher };

// B x B temperature-scaled cosine similarities.
template <typename T>
struct LogitMatrix {
  Tensor<T> values;
  LogitSource source = LogitSource::student;
};

template <typename T>
void check_unit_rows(const Tensor<T>& x, const char* what, double tol = 1e-4) {
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double ss = 0;
    for (std::size_t c = 0; c < n; ++c) ss += double(x[r * n + c]) * double(x[r * n + c]);
    if (std::abs(std::sqrt(ss) - 1.0) > tol) {
      throw ValidationError(std::string(what) + ": row " + std::to_string(r) + " has norm " +
                            std::to_string(std::sqrt(ss)) + ", expected unit norm");
    }
  }
}

template <typename T>
Tensor<T> identity_targets(std::size_t n) {
  Tensor<T> eye({n, n});
  for (std::size_t i = 0; i < n; ++i) eye(i, i) = T(1);
  return eye;
}

template <typename T>
Tensor<T> transposed(const Tensor<T>& x) {
  Tensor<T> out({x.cols(), x.rows()});
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) out(c, r) = x(r, c);
  return out;
}

// out[i][j] = tau * <V_i, S_j>. tau is the multiplicative logit scale.
// Each entry is a sequential dot product, so logits(V,S)^T == logits(S,V).
template <typename T>
LogitMatrix<T> logits(const Tensor<T>& images, const Tensor<T>& texts, T tau,
                      LogitSource source = LogitSource::student) {
  if (images.rank() != 2 || texts.rank() != 2 || images.shape() != texts.shape()) {
    throw DimensionError("logits: feature batches " + shape_string(images.shape()) + " and " +
                         shape_string(texts.shape()) + " differ");
  }
  if (!(tau > T(0))) throw ValidationError("logits: tau must be positive");
  check_unit_rows(images, "logits (images)");
  check_unit_rows(texts, "logits (texts)");
  const std::size_t b = images.rows(), k = images.cols();
  Tensor<T> out({b, b});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      T dot = 0;
      for (std::size_t c = 0; c < k; ++c) dot += images(i, c) * texts(j, c);
      out(i, j) = tau * dot;
    }
  }
  return {std::move(out), source};
}

namespace detail {
template <typename T>
void require_square(const Tensor<T>& x, const char* op) {
  if (x.rank() != 2 || x.rows() != x.cols()) {
    throw ValidationError(std::string(op) + ": logit matrix must be square, got " + shape_string(x.shape()));
  }
}
}  // namespace detail

// 1/2 [CE(logit, I) + CE(logit^T, I)]
template <typename T>
T clip_loss(const LogitMatrix<T>& logit) {
  detail::require_square(logit.values, "clip_loss");
  const auto eye = identity_targets<T>(logit.values.rows());
  return T(0.5) * (ad::cross_entropy_rows(logit.values, eye) + ad::cross_entropy_rows(transposed(logit.values), eye));
}

// 1/2 [CE(student, softmax(teacher)) + CE(student^T, softmax(teacher^T))]
template <typename T>
T dist_loss(const LogitMatrix<T>& student, const LogitMatrix<T>& teacher) {
  if (student.values.shape() != teacher.values.shape()) {
    throw ValidationError("dist_loss: student " + shape_string(student.values.shape()) + " vs teacher " +
                          shape_string(teacher.values.shape()));
  }
  detail::require_square(student.values, "dist_loss");
  const T i2t = ad::cross_entropy_rows(student.values, ad::softmax_rows(teacher.values));
  const T t2i = ad::cross_entropy_rows(transposed(student.values), ad::softmax_rows(transposed(teacher.values)));
  return T(0.5) * (i2t + t2i);
}

template <typename T>
T train_loss(const LogitMatrix<T>& student, const LogitMatrix<T>& teacher, T lambda) {
  if (!(lambda >= T(0))) throw ValidationError("train_loss: lambda must be >= 0");
  return clip_loss(student) + lambda * dist_loss(student, teacher);
}

namespace ad {

// tau * V S^T as a graph node.
template <typename T>
Var logits(Graph<T>& g, Var images, Var texts, Var tau) {
  return mul_scalar(g, matmul(g, images, transpose(g, texts)), tau);
}

template <typename T>
Var clip_loss(Graph<T>& g, Var logit) {
  mmlg::detail::require_square(g.value(logit), "clip_loss");
  const std::size_t b = g.value(logit).rows();
  Var i2t = cross_entropy_rows(g, logit, identity_targets<T>(b));
  Var t2i = cross_entropy_rows(g, transpose(g, logit), identity_targets<T>(b));
  return scale(g, add(g, i2t, t2i), T(0.5));
}

// Teacher logits enter only as soft targets; no gradient reaches them.
template <typename T>
Var dist_loss(Graph<T>& g, Var student, const Tensor<T>& teacher) {
  if (g.value(student).shape() != teacher.shape()) {
    throw ValidationError("dist_loss: student " + shape_string(g.value(student).shape()) + " vs teacher " +
                          shape_string(teacher.shape()));
  }
  mmlg::detail::require_square(teacher, "dist_loss");
  Var i2t = cross_entropy_rows(g, student, softmax_rows(teacher));
  Var t2i = cross_entropy_rows(g, transpose(g, student), softmax_rows(transposed(teacher)));
  return scale(g, add(g, i2t, t2i), T(0.5));
}

template <typename T>
Var dist_loss(Graph<T>& g, Var student, Var teacher) {
  return dist_loss(g, student, g.value(teacher));
}

template <typename T>
struct TrainLossVars {
  Var clip, dist, total;
};

// L_CLIP + lambda * L_dist
template <typename T>
TrainLossVars<T> train_loss(Graph<T>& g, Var student, const Tensor<T>& teacher, T lambda) {
  if (!(lambda >= T(0))) throw ValidationError("train_loss: lambda must be >= 0");
  Var clip = clip_loss(g, student);
  Var dist = dist_loss(g, student, teacher);
  return {clip, dist, add(g, clip, scale(g, dist, lambda))};
}

}  // namespace ad
}  // namespace mmlg
