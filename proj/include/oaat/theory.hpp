#pragma once

// Closed-form synthetic model: label y uniform on {-1,+1}; feature 1 equals
// y with probability p (else -y, magnitude 1); spurious features 2..d+1 are
// N(alpha*y, 1). Linear classifiers on this distribution have exact clean
// and l-inf robust accuracies, which the Monte-Carlo helpers cross-check.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "oaat/rng.hpp"
#include "oaat/tensor.hpp"

namespace oaat {

struct SyntheticDistribution {
  double p = 0.95;
  double alpha = 0.3;
  int d = 100;  // spurious feature count; samples live in R^{d+1}
};

struct TheorySample {
  Tensor<double> x;    // [n, d+1]
  std::vector<int> y;  // in {-1,+1}
};

inline TheorySample sample(const SyntheticDistribution& dist, int64_t n, uint64_t seed) {
  if (dist.p < 0.5 || dist.p > 1.0) throw std::invalid_argument("p must lie in [0.5, 1]");
  if (dist.d < 1) throw std::invalid_argument("d must be positive");
  auto g = make_stream(seed, "theory");
  TheorySample s;
  s.x = Tensor<double>({n, dist.d + 1});
  s.y.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const int y = uniform01(g) < 0.5 ? -1 : 1;
    s.y[static_cast<size_t>(i)] = y;
    s.x.at(i, int64_t(0)) = uniform01(g) < dist.p ? y : -y;
    for (int j = 1; j <= dist.d; ++j)
      s.x.at(i, j) = dist.alpha * y + normal01(g);
  }
  return s;
}

inline double phi(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// Averaging classifier w = (0, 1/d, ..., 1/d).
inline double spurious_classifier_accuracy(const SyntheticDistribution& d) {
  return phi(d.alpha * std::sqrt(static_cast<double>(d.d)));
}
inline double spurious_classifier_robust_accuracy(const SyntheticDistribution& d, double eps) {
  return phi((d.alpha - eps) * std::sqrt(static_cast<double>(d.d)));
}

// Feature-1 classifier g = sign(x_1).
inline double oracle_accuracy(const SyntheticDistribution& d) { return d.p; }
inline double oracle_robust_accuracy(const SyntheticDistribution& d, double eps) {
  // |x_1| = 1, so budgets below 1 cannot flip the sign.
  return eps < 1.0 ? d.p : 0.0;
}

// Robust-accuracy ceiling for any classifier with standard accuracy 1-gamma.
inline double tsipras_bound(double p, double gamma) {
  if (p <= 0.5 || p >= 1.0) throw std::invalid_argument("tsipras_bound: p must lie in (0.5, 1)");
  if (gamma < 0.0 || gamma > 1.0) throw std::invalid_argument("tsipras_bound: gamma in [0,1]");
  return p / (1.0 - p) * gamma;
}

// ------------------------------------------------------ linear classifiers --
struct LinearClassifier {
  std::vector<double> w;  // [d+1]
  double b = 0;
};

inline LinearClassifier case1_classifier(const SyntheticDistribution& d) {
  LinearClassifier c;
  c.w.assign(static_cast<size_t>(d.d + 1), 1.0 / d.d);
  c.w[0] = 0.0;
  return c;
}
inline LinearClassifier oracle_classifier(const SyntheticDistribution& d) {
  LinearClassifier c;
  c.w.assign(static_cast<size_t>(d.d + 1), 0.0);
  c.w[0] = 1.0;
  return c;
}

inline double margin(const LinearClassifier& c, const Tensor<double>& x, int64_t i, int y) {
  double z = c.b;
  for (size_t j = 0; j < c.w.size(); ++j) z += c.w[j] * x.at(i, static_cast<int64_t>(j));
  return y * z;
}

inline double l1_norm(const LinearClassifier& c) {
  double s = 0;
  for (double v : c.w) s += std::abs(v);
  return s;
}

inline double mc_accuracy(const LinearClassifier& c, const SyntheticDistribution& d, int64_t n,
                          uint64_t seed) {
  TheorySample s = sample(d, n, seed);
  int64_t ok = 0;
  for (int64_t i = 0; i < n; ++i)
    if (margin(c, s.x, i, s.y[static_cast<size_t>(i)]) > 0) ++ok;
  return static_cast<double>(ok) / static_cast<double>(n);
}

// Exact worst case under the l-inf ball: margin drops by eps * ||w||_1. For a
// linear model this equals the PGD limit.
inline double mc_robust_accuracy(const LinearClassifier& c, const SyntheticDistribution& d,
                                 double eps, int64_t n, uint64_t seed) {
  TheorySample s = sample(d, n, seed);
  const double drop = eps * l1_norm(c);
  int64_t ok = 0;
  for (int64_t i = 0; i < n; ++i)
    if (margin(c, s.x, i, s.y[static_cast<size_t>(i)]) - drop > 0) ++ok;
  return static_cast<double>(ok) / static_cast<double>(n);
}

// Logistic regression by full-batch gradient descent: the desk ERM learner.
inline LinearClassifier train_linear_erm(const SyntheticDistribution& d, int64_t n, uint64_t seed,
                                         int steps = 300, double lr = 1.0) {
  TheorySample s = sample(d, n, seed);
  LinearClassifier c;
  c.w.assign(static_cast<size_t>(d.d + 1), 0.0);
  std::vector<double> gw(c.w.size());
  for (int it = 0; it < steps; ++it) {
    std::fill(gw.begin(), gw.end(), 0.0);
    double gb = 0;
    for (int64_t i = 0; i < n; ++i) {
      const int y = s.y[static_cast<size_t>(i)];
      const double m = margin(c, s.x, i, y);
      const double coef = -y / (1.0 + std::exp(m));  // d/dz log(1+exp(-y z))
      for (size_t j = 0; j < c.w.size(); ++j)
        gw[j] += coef * s.x.at(i, static_cast<int64_t>(j));
      gb += coef;
    }
    for (size_t j = 0; j < c.w.size(); ++j) c.w[j] -= lr * gw[j] / static_cast<double>(n);
    c.b -= lr * gb / static_cast<double>(n);
  }
  return c;
}

// Fraction of the optimal l-inf attack's l1 mass spent on feature 1 versus the
// spurious block. For sign(w x + b) the optimal attack moves every coordinate
// with nonzero weight by eps against the label.
struct MassProfile {
  double feature1 = 0;
  double spurious = 0;
};

inline MassProfile perturbation_mass_profile(const LinearClassifier& c, double eps) {
  double m1 = 0, rest = 0;
  for (size_t j = 0; j < c.w.size(); ++j) {
    const double m = c.w[j] != 0.0 ? eps : 0.0;
    if (j == 0)
      m1 = m;
    else
      rest += m;
  }
  const double tot = m1 + rest;
  if (tot <= 0) return {0, 0};
  return {m1 / tot, rest / tot};
}

}  // namespace oaat
