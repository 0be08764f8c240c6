#pragma once

// Classification losses fused with their logit gradients. Every KL here is
// KL(prediction || target) with the target held constant: gradients never
// flow through target distributions.

#include <cmath>
#include <vector>

#include "oaat/tensor.hpp"

namespace oaat {

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& z) {
  const int64_t n = z.shape[0], k = z.shape[1];
  Tensor<T> p(z.shape);
  for (int64_t i = 0; i < n; ++i) {
    T m = z.at(i, int64_t(0));
    for (int64_t j = 1; j < k; ++j) m = std::max(m, z.at(i, j));
    T s = 0;
    for (int64_t j = 0; j < k; ++j) {
      T e = std::exp(z.at(i, j) - m);
      p.at(i, j) = e;
      s += e;
    }
    for (int64_t j = 0; j < k; ++j) p.at(i, j) /= s;
  }
  return p;
}

template <typename T>
struct LossGrad {
  double value = 0;        // mean over the batch
  Tensor<T> dlogits;       // gradient of the mean
};

template <typename T>
std::vector<double> ce_per_sample(const Tensor<T>& logits, const std::vector<int>& y) {
  const int64_t n = logits.shape[0], k = logits.shape[1];
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    T m = logits.at(i, int64_t(0));
    for (int64_t j = 1; j < k; ++j) m = std::max(m, logits.at(i, j));
    double lse = 0;
    for (int64_t j = 0; j < k; ++j) lse += std::exp(static_cast<double>(logits.at(i, j) - m));
    lse = std::log(lse) + static_cast<double>(m);
    out[static_cast<size_t>(i)] = lse - static_cast<double>(logits.at(i, y[static_cast<size_t>(i)]));
  }
  return out;
}

// Cross entropy with optional label smoothing; dlogits = (p - t) / B.
template <typename T>
LossGrad<T> ce_with_grad(const Tensor<T>& logits, const std::vector<int>& y,
                         double smoothing = 0.0) {
  const int64_t n = logits.shape[0], k = logits.shape[1];
  LossGrad<T> out;
  out.dlogits = softmax_rows(logits);
  const double off = smoothing / static_cast<double>(k);
  const double on = 1.0 - smoothing + off;
  double loss = 0;
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < k; ++j) {
      const double t = (j == y[static_cast<size_t>(i)]) ? on : off;
      const double p = std::max(static_cast<double>(out.dlogits.at(i, j)), 1e-30);
      if (t > 0) loss -= t * std::log(p);
      out.dlogits.at(i, j) =
          static_cast<T>((static_cast<double>(out.dlogits.at(i, j)) - t) / static_cast<double>(n));
    }
  }
  out.value = loss / static_cast<double>(n);
  return out;
}

// Mean over the batch of KL(p || q) for prob rows, no gradient.
template <typename T>
double kl_value(const Tensor<T>& p, const Tensor<T>& q) {
  const int64_t n = p.shape[0], k = p.shape[1];
  double s = 0;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < k; ++j) {
      const double pi = static_cast<double>(p.at(i, j));
      if (pi <= 0) continue;
      const double qi = std::max(static_cast<double>(q.at(i, j)), 1e-30);
      s += pi * (std::log(pi) - std::log(qi));
    }
  return s / static_cast<double>(n);
}

// Mean KL(softmax(z) || target) with constant target probabilities.
// d/dz = (p .* m - p * dot(p, m)) / B with m = log p - log target.
template <typename T>
LossGrad<T> kl_const_target(const Tensor<T>& logits, const Tensor<T>& target_probs) {
  const int64_t n = logits.shape[0], k = logits.shape[1];
  LossGrad<T> out;
  Tensor<T> p = softmax_rows(logits);
  out.dlogits = Tensor<T>(logits.shape);
  double loss = 0;
  for (int64_t i = 0; i < n; ++i) {
    double dot = 0;
    for (int64_t j = 0; j < k; ++j) {
      const double pi = std::max(static_cast<double>(p.at(i, j)), 1e-30);
      const double qi = std::max(static_cast<double>(target_probs.at(i, j)), 1e-30);
      const double m = std::log(pi) - std::log(qi);
      loss += pi * m;
      out.dlogits.at(i, j) = static_cast<T>(m);  // stash m, finish below
      dot += pi * m;
    }
    for (int64_t j = 0; j < k; ++j) {
      const double pi = static_cast<double>(p.at(i, j));
      const double m = static_cast<double>(out.dlogits.at(i, j));
      out.dlogits.at(i, j) = static_cast<T>(pi * (m - dot) / static_cast<double>(n));
    }
  }
  out.value = loss / static_cast<double>(n);
  return out;
}

// Binary cross entropy on a single logit per sample; labels in {0,1}.
template <typename T>
LossGrad<T> bce_with_grad(const Tensor<T>& logits, const std::vector<int>& labels) {
  const int64_t n = logits.numel();
  LossGrad<T> out;
  out.dlogits = Tensor<T>(logits.shape);
  double loss = 0;
  for (int64_t i = 0; i < n; ++i) {
    const double z = static_cast<double>(logits[i]);
    const double yy = labels[static_cast<size_t>(i)] ? 1.0 : 0.0;
    // log(1+exp(z)) computed stably
    const double softplus = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
    loss += softplus - yy * z;
    const double sig = 1.0 / (1.0 + std::exp(-z));
    out.dlogits[i] = static_cast<T>((sig - yy) / static_cast<double>(n));
  }
  out.value = loss / static_cast<double>(n);
  return out;
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  const int64_t n = logits.shape[0], k = logits.shape[1];
  std::vector<int> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    int best = 0;
    for (int64_t j = 1; j < k; ++j)
      if (logits.at(i, j) > logits.at(i, best)) best = static_cast<int>(j);
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

}  // namespace oaat
