#pragma once

// Image contrast scoring and contrast-ordered dataset binning. The score is
// a per-pixel statistic: per-channel absolute deviation from the channel
// mean, averaged over channels, then the variance of intensities over the
// top 20% most-deviating pixels. Variance is population variance, computed
// per channel and averaged; a pooled variant flattens channels first.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "oaat/data.hpp"

namespace oaat {

struct ContrastOptions {
  double top_fraction = 0.2;
  bool pooled_variance = false;
};

// image is one [C,H,W] slab given as a flat pointer; hw = H*W.
template <typename T>
double contrast_score_raw(const T* img, int64_t c, int64_t hw, const ContrastOptions& opt = {}) {
  if (c < 1 || hw < 1) throw std::invalid_argument("contrast_score: empty image");

  // Welford running means/variances throughout: on constant input every
  // update adds an exact zero, so a constant image scores exactly 0.
  std::vector<double> mean(c, 0.0);
  for (int64_t ch = 0; ch < c; ++ch) {
    const T* pc = img + ch * hw;
    double m = 0;
    for (int64_t p = 0; p < hw; ++p)
      m += (static_cast<double>(pc[p]) - m) / static_cast<double>(p + 1);
    mean[ch] = m;
  }
  std::vector<double> dev(hw, 0.0);
  for (int64_t ch = 0; ch < c; ++ch) {
    const T* pc = img + ch * hw;
    for (int64_t p = 0; p < hw; ++p) dev[p] += std::abs(static_cast<double>(pc[p]) - mean[ch]);
  }
  for (int64_t p = 0; p < hw; ++p) dev[p] /= static_cast<double>(c);

  const int64_t k = std::min<int64_t>(
      hw, static_cast<int64_t>(std::ceil(opt.top_fraction * static_cast<double>(hw))));
  std::vector<int64_t> order(hw);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int64_t a, int64_t b) { return dev[a] > dev[b]; });
  order.resize(static_cast<size_t>(std::max<int64_t>(k, 1)));

  struct Welford {
    double m = 0, s = 0;
    int64_t n = 0;
    void add(double x) {
      ++n;
      const double d = x - m;
      m += d / static_cast<double>(n);
      s += d * (x - m);
    }
    double var() const { return n > 0 ? s / static_cast<double>(n) : 0.0; }
  };

  if (opt.pooled_variance) {
    Welford w;
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t p : order) w.add(static_cast<double>(img[ch * hw + p]));
    return w.var();
  }

  double v = 0;
  for (int64_t ch = 0; ch < c; ++ch) {
    Welford w;
    for (int64_t p : order) w.add(static_cast<double>(img[ch * hw + p]));
    v += w.var();
  }
  return v / static_cast<double>(c);
}

template <typename T>
double contrast_score(const Tensor<T>& image, const ContrastOptions& opt = {}) {
  if (image.dim() != 3) throw std::invalid_argument("contrast_score: expected [C,H,W]");
  return contrast_score_raw(image.data.data(), image.shape[0], image.shape[1] * image.shape[2],
                            opt);
}

struct ContrastBin {
  int bin_index = 0;
  std::vector<int64_t> sample_indices;
  double mean_contrast = 0;
};

inline std::vector<double> contrast_scores(const Dataset& data, const ContrastOptions& opt = {}) {
  const int64_t n = data.size();
  const int64_t c = data.x.shape[1], hw = data.x.shape[2] * data.x.shape[3];
  std::vector<double> s(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    s[static_cast<size_t>(i)] = contrast_score_raw(data.x.data.data() + i * c * hw, c, hw, opt);
  return s;
}

// Stable ascending sort by score, then n_bins contiguous near-equal bins with
// the remainder spread over the first bins.
inline std::vector<ContrastBin> bin_by_contrast(const Dataset& data, int n_bins = 10,
                                                const ContrastOptions& opt = {}) {
  if (n_bins < 1) throw std::invalid_argument("bin_by_contrast: n_bins must be >= 1");
  const int64_t n = data.size();
  if (n < n_bins) throw std::invalid_argument("bin_by_contrast: fewer images than bins");

  std::vector<double> score = contrast_scores(data, opt);
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    return score[static_cast<size_t>(a)] < score[static_cast<size_t>(b)];
  });

  std::vector<ContrastBin> bins(static_cast<size_t>(n_bins));
  const int64_t base = n / n_bins, rem = n % n_bins;
  int64_t pos = 0;
  for (int b = 0; b < n_bins; ++b) {
    ContrastBin& bin = bins[static_cast<size_t>(b)];
    bin.bin_index = b;
    const int64_t sz = base + (b < rem ? 1 : 0);
    double sum = 0;
    for (int64_t i = 0; i < sz; ++i) {
      const int64_t idx = order[static_cast<size_t>(pos + i)];
      bin.sample_indices.push_back(idx);
      sum += score[static_cast<size_t>(idx)];
    }
    bin.mean_contrast = sz > 0 ? sum / static_cast<double>(sz) : 0.0;
    pos += sz;
  }
  return bins;
}

}  // namespace oaat
