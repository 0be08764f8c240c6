#pragma once

// Dataset ingestion and batching. Three sources share one in-memory Dataset:
//   cifar10_binary : the classic 3073-byte-record binary layout
//                    (data_batch_*.bin / test_batch.bin under root_path)
//   image_folder   : root/<class_name>/<image>.ppm|.pgm (P6/P5, maxval 255)
//   synthetic      : procedural class-patterned images generated in memory
// Pixels are scaled to [0,1] and never whitened. The procedural generator
// also writes CIFAR-format fixture files so the binary path is exercised
// end to end without shipping a dataset.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "oaat/rng.hpp"
#include "oaat/tensor.hpp"

namespace oaat {

template <typename T>
struct ImageBatch {
  Tensor<T> x;         // [B, C, H, W], values in [0,1]
  std::vector<int> y;  // class ids in [0, n_classes)
  int n_classes = 0;

  int64_t size() const { return x.dim() == 4 ? x.shape[0] : 0; }

  void validate() const {
    if (x.dim() != 4) throw std::invalid_argument("image batch must be [B,C,H,W]");
    if (static_cast<int64_t>(y.size()) != x.shape[0])
      throw std::invalid_argument("label count does not match batch size");
    for (int v : y)
      if (v < 0 || v >= n_classes) throw std::invalid_argument("label outside [0, n_classes)");
  }
};

using ImageBatchf = ImageBatch<float>;

enum class DataSource { cifar10_binary, image_folder, synthetic };

struct DatasetSpec {
  DataSource source = DataSource::synthetic;
  std::string root_path;
  int n_train = 0;  // 0 means: everything left after the validation split
  int n_val = 0;
  bool class_balanced_val = true;
  uint64_t seed = 1;
  // synthetic source only
  int synth_n_test = 1000;
  int synth_classes = 10;
  int synth_hw = 32;
};

struct Dataset {
  Tensorf x;  // [N, C, H, W]
  std::vector<int> y;
  int n_classes = 0;

  int64_t size() const { return x.dim() == 4 ? x.shape[0] : 0; }

  ImageBatchf slice(const std::vector<int64_t>& idx) const {
    ImageBatchf b;
    const int64_t chw = x.shape[1] * x.shape[2] * x.shape[3];
    b.x = Tensorf({static_cast<int64_t>(idx.size()), x.shape[1], x.shape[2], x.shape[3]});
    b.y.resize(idx.size());
    b.n_classes = n_classes;
    for (size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(&x.data[static_cast<size_t>(idx[i] * chw)], chw,
                  &b.x.data[i * static_cast<size_t>(chw)]);
      b.y[i] = y[static_cast<size_t>(idx[i])];
    }
    return b;
  }

  ImageBatchf head(int64_t n) const {
    std::vector<int64_t> idx(static_cast<size_t>(std::min(n, size())));
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int64_t>(i);
    return slice(idx);
  }
};

struct DataSplits {
  Dataset train, val, test;
  int n_classes = 0;
};

// ------------------------------------------------------------- synthetic --
// Class-conditional image: three sinusoidal gratings whose frequencies and
// orientations depend on the class, a class color tint, plus per-instance
// phase jitter, amplitude scaling, pixel noise and brightness/contrast
// jitter. Amplitudes are sized so classes are learnable but sit within a few
// multiples of 16/255 of each other, which is what makes robustness at that
// budget a real trade-off.
inline void synth_image(float* img, int hw, int channels, int cls, std::mt19937_64& g) {
  const double pi = 3.14159265358979323846;
  const double theta1 = pi * cls / 10.0;
  const double theta2 = pi * (cls * 3 % 10) / 10.0 + 0.35;
  const double f1 = 2.0 * pi * (1.0 + cls % 3) / hw;
  const double f2 = 2.0 * pi * (2.0 + cls % 4) / hw;
  const double f3 = 2.0 * pi * (1.0 + (cls / 2) % 3) / hw;
  const double p1 = uniform(g, 0, 2 * pi), p2 = uniform(g, 0, 2 * pi), p3 = uniform(g, 0, 2 * pi);
  const double amp = 0.12 * uniform(g, 0.75, 1.25);
  const double bright = uniform(g, -0.06, 0.06);
  const double contrast = uniform(g, 0.85, 1.15);
  for (int c = 0; c < channels; ++c) {
    const double tint = 0.08 * std::cos(2 * pi * (cls / 10.0 + static_cast<double>(c) / 3.0));
    const double chroma = 1.0 + 0.25 * std::cos(2 * pi * (cls / 10.0 - static_cast<double>(c) / 3.0));
    for (int h = 0; h < hw; ++h)
      for (int w = 0; w < hw; ++w) {
        const double u = std::cos(theta1) * w + std::sin(theta1) * h;
        const double v = std::cos(theta2) * w - std::sin(theta2) * h;
        double val = 0.5 + bright + tint;
        val += amp * contrast * std::sin(f1 * u + p1);
        val += amp * contrast * chroma * std::sin(f2 * v + p2);
        val += 0.5 * amp * std::sin(f3 * (h + w) + p3);
        val += 0.06 * normal01(g);
        img[(c * hw + h) * hw + w] = static_cast<float>(std::clamp(val, 0.0, 1.0));
      }
  }
}

inline Dataset make_synthetic_dataset(int64_t n, int n_classes, int hw, uint64_t seed,
                                      std::string_view stream) {
  Dataset d;
  d.n_classes = n_classes;
  d.x = Tensorf({n, 3, hw, hw});
  d.y.resize(static_cast<size_t>(n));
  auto gl = make_stream(seed, "synth_labels", fnv1a64(stream));
  for (int64_t i = 0; i < n; ++i) {
    const int cls = static_cast<int>(i % n_classes);  // balanced
    d.y[static_cast<size_t>(i)] = cls;
  }
  // shuffle label order so file slices stay balanced-ish but not periodic
  for (int64_t i = n - 1; i > 0; --i)
    std::swap(d.y[static_cast<size_t>(i)], d.y[static_cast<size_t>(uniform_int(gl, static_cast<int>(i + 1)))]);
  for (int64_t i = 0; i < n; ++i) {
    auto g = make_stream(seed, "synth_img", fnv1a64(stream), static_cast<uint64_t>(i));
    synth_image(&d.x.data[static_cast<size_t>(i * 3 * hw * hw)], hw, 3,
                d.y[static_cast<size_t>(i)], g);
  }
  return d;
}

// --------------------------------------------------------- CIFAR binaries --
namespace data_detail {

inline void append_cifar_file(const std::string& path, Dataset& out) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open " + path);
  std::fseek(f, 0, SEEK_END);
  const long sz = std::ftell(f);
  std::fseek(f, 0, SEEK_SET);
  constexpr long kRec = 3073;
  if (sz <= 0 || sz % kRec != 0) {
    std::fclose(f);
    throw std::runtime_error(path + ": size is not a multiple of 3073 bytes");
  }
  const int64_t n = sz / kRec;
  std::vector<unsigned char> rec(kRec);
  const int64_t base = out.size();
  Tensorf nx({base + n, 3, 32, 32});
  if (base > 0) std::copy(out.x.data.begin(), out.x.data.end(), nx.data.begin());
  out.x = std::move(nx);
  out.y.resize(static_cast<size_t>(base + n));
  for (int64_t i = 0; i < n; ++i) {
    if (std::fread(rec.data(), 1, kRec, f) != static_cast<size_t>(kRec)) {
      std::fclose(f);
      throw std::runtime_error(path + ": truncated record");
    }
    if (rec[0] > 9) {
      std::fclose(f);
      throw std::runtime_error(path + ": label byte out of range");
    }
    out.y[static_cast<size_t>(base + i)] = rec[0];
    float* dst = &out.x.data[static_cast<size_t>((base + i) * 3072)];
    for (int j = 0; j < 3072; ++j) dst[j] = static_cast<float>(rec[1 + j]) / 255.0f;
  }
  std::fclose(f);
  out.n_classes = 10;
}

}  // namespace data_detail

inline Dataset load_cifar_files(const std::string& root, bool test_set) {
  namespace fs = std::filesystem;
  Dataset d;
  d.n_classes = 10;
  if (test_set) {
    const std::string p = (fs::path(root) / "test_batch.bin").string();
    if (fs::exists(p)) data_detail::append_cifar_file(p, d);
    return d;
  }
  bool any = false;
  for (int i = 1; i <= 5; ++i) {
    const std::string p = (fs::path(root) / ("data_batch_" + std::to_string(i) + ".bin")).string();
    if (fs::exists(p)) {
      data_detail::append_cifar_file(p, d);
      any = true;
    }
  }
  if (!any) throw std::runtime_error(root + ": no data_batch_*.bin files found");
  return d;
}

// Writes a procedural dataset in the CIFAR-10 binary layout. The loader then
// treats it exactly like the real thing.
inline void write_cifar_fixture(const std::string& dir, int64_t n_train, int64_t n_test,
                                uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  auto write_file = [](const std::string& path, const Dataset& d) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw std::runtime_error("cannot write " + path);
    std::vector<unsigned char> rec(3073);
    for (int64_t i = 0; i < d.size(); ++i) {
      rec[0] = static_cast<unsigned char>(d.y[static_cast<size_t>(i)]);
      const float* src = &d.x.data[static_cast<size_t>(i * 3072)];
      for (int j = 0; j < 3072; ++j)
        rec[1 + j] = static_cast<unsigned char>(std::lround(std::clamp(src[j], 0.0f, 1.0f) * 255.0f));
      std::fwrite(rec.data(), 1, 3073, f);
    }
    std::fclose(f);
  };
  const Dataset train = make_synthetic_dataset(n_train, 10, 32, seed, "fixture_train");
  const Dataset test = make_synthetic_dataset(n_test, 10, 32, seed, "fixture_test");
  // spread across up to 5 train files of at most 10000 records, like the original
  int64_t written = 0;
  int file_no = 1;
  while (written < n_train) {
    const int64_t take = std::min<int64_t>(10000, n_train - written);
    std::vector<int64_t> idx(static_cast<size_t>(take));
    for (int64_t i = 0; i < take; ++i) idx[static_cast<size_t>(i)] = written + i;
    Dataset part;
    part.n_classes = 10;
    ImageBatchf b = train.slice(idx);
    part.x = std::move(b.x);
    part.y = std::move(b.y);
    write_file((fs::path(dir) / ("data_batch_" + std::to_string(file_no) + ".bin")).string(), part);
    written += take;
    ++file_no;
  }
  if (n_test > 0) write_file((fs::path(dir) / "test_batch.bin").string(), test);
}

// ------------------------------------------------------------ PPM folder --
namespace data_detail {

inline void skip_ppm_space(std::FILE* f) {
  int c = std::fgetc(f);
  while (c == '#' || std::isspace(c)) {
    if (c == '#')
      while (c != '\n' && c != EOF) c = std::fgetc(f);
    c = std::fgetc(f);
  }
  std::ungetc(c, f);
}

inline long read_ppm_int(std::FILE* f) {
  skip_ppm_space(f);
  long v = 0;
  int c = std::fgetc(f);
  if (!std::isdigit(c)) throw std::runtime_error("ppm: expected integer");
  while (std::isdigit(c)) {
    v = v * 10 + (c - '0');
    c = std::fgetc(f);
  }
  if (c != EOF) std::ungetc(c, f);
  return v;
}

struct PpmImage {
  int w = 0, h = 0, channels = 0;
  std::vector<unsigned char> pix;  // interleaved
};

inline PpmImage read_ppm(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open " + path);
  PpmImage im;
  try {
    const int m0 = std::fgetc(f), m1 = std::fgetc(f);
    if (m0 != 'P' || (m1 != '5' && m1 != '6')) throw std::runtime_error(path + ": not P5/P6");
    im.channels = m1 == '6' ? 3 : 1;
    im.w = static_cast<int>(read_ppm_int(f));
    im.h = static_cast<int>(read_ppm_int(f));
    const long maxval = read_ppm_int(f);
    if (maxval != 255) throw std::runtime_error(path + ": only maxval 255 supported");
    std::fgetc(f);  // single whitespace after header
    im.pix.resize(static_cast<size_t>(im.w) * im.h * im.channels);
    if (std::fread(im.pix.data(), 1, im.pix.size(), f) != im.pix.size())
      throw std::runtime_error(path + ": truncated pixel data");
  } catch (...) {
    std::fclose(f);
    throw;
  }
  std::fclose(f);
  return im;
}

}  // namespace data_detail

inline void write_ppm(const std::string& path, const float* chw, int channels, int h, int w) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("cannot write " + path);
  std::fprintf(f, "P%c\n%d %d\n255\n", channels == 3 ? '6' : '5', w, h);
  std::vector<unsigned char> row(static_cast<size_t>(w) * channels);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c)
        row[static_cast<size_t>(x) * channels + c] = static_cast<unsigned char>(
            std::lround(std::clamp(chw[(c * h + y) * w + x], 0.0f, 1.0f) * 255.0f));
    std::fwrite(row.data(), 1, row.size(), f);
  }
  std::fclose(f);
}

inline Dataset load_image_folder(const std::string& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw std::runtime_error(root + ": not a directory");
  std::vector<std::string> classes;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) classes.push_back(e.path().filename().string());
  std::sort(classes.begin(), classes.end());
  if (classes.empty()) throw std::runtime_error(root + ": no class directories");
  std::vector<std::pair<std::string, int>> files;
  for (size_t c = 0; c < classes.size(); ++c) {
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(fs::path(root) / classes[c])) {
      const std::string ext = e.path().extension().string();
      if (e.is_regular_file() && (ext == ".ppm" || ext == ".pgm"))
        names.push_back(e.path().string());
    }
    std::sort(names.begin(), names.end());
    for (auto& n : names) files.emplace_back(n, static_cast<int>(c));
  }
  if (files.empty()) throw std::runtime_error(root + ": no .ppm/.pgm files");
  Dataset d;
  d.n_classes = static_cast<int>(classes.size());
  for (size_t i = 0; i < files.size(); ++i) {
    auto im = data_detail::read_ppm(files[i].first);
    if (i == 0) d.x = Tensorf({static_cast<int64_t>(files.size()), im.channels, im.h, im.w});
    if (im.channels != d.x.shape[1] || im.h != d.x.shape[2] || im.w != d.x.shape[3])
      throw std::runtime_error(files[i].first + ": image dimensions differ within the folder");
    float* dst = &d.x.data[i * static_cast<size_t>(d.x.shape[1] * d.x.shape[2] * d.x.shape[3])];
    const int hw = im.h * im.w;
    for (int c = 0; c < im.channels; ++c)
      for (int p = 0; p < hw; ++p)
        dst[c * hw + p] = static_cast<float>(im.pix[static_cast<size_t>(p) * im.channels + c]) / 255.0f;
    d.y.push_back(files[i].second);
  }
  return d;
}

// ------------------------------------------------------------- splitting --
inline DataSplits split_train_val(Dataset all, const DatasetSpec& spec) {
  const int64_t total = all.size();
  if (spec.n_val < 0 || spec.n_train < 0) throw std::invalid_argument("negative split size");
  if (spec.n_train + spec.n_val > total)
    throw std::invalid_argument("n_train + n_val exceeds available samples");
  std::vector<int64_t> order(static_cast<size_t>(total));
  for (int64_t i = 0; i < total; ++i) order[static_cast<size_t>(i)] = i;
  auto g = make_stream(spec.seed, "split");
  for (int64_t i = total - 1; i > 0; --i)
    std::swap(order[static_cast<size_t>(i)],
              order[static_cast<size_t>(uniform_int(g, static_cast<int>(i + 1)))]);

  std::vector<int64_t> val_idx, train_idx;
  if (spec.class_balanced_val && spec.n_val > 0) {
    const int k = all.n_classes;
    std::vector<int> quota(static_cast<size_t>(k), spec.n_val / k);
    for (int c = 0; c < spec.n_val % k; ++c) quota[static_cast<size_t>(c)] += 1;
    std::vector<int> have(static_cast<size_t>(k), 0);
    for (int64_t i : order) {
      const int c = all.y[static_cast<size_t>(i)];
      if (have[static_cast<size_t>(c)] < quota[static_cast<size_t>(c)]) {
        val_idx.push_back(i);
        ++have[static_cast<size_t>(c)];
      } else {
        train_idx.push_back(i);
      }
    }
    if (static_cast<int>(val_idx.size()) != spec.n_val)
      throw std::runtime_error("class-balanced validation split is infeasible for this dataset");
  } else {
    val_idx.assign(order.begin(), order.begin() + spec.n_val);
    train_idx.assign(order.begin() + spec.n_val, order.end());
  }
  const int64_t want = spec.n_train == 0 ? static_cast<int64_t>(train_idx.size())
                                         : static_cast<int64_t>(spec.n_train);
  if (want > static_cast<int64_t>(train_idx.size()))
    throw std::invalid_argument("n_train exceeds samples left after validation split");
  train_idx.resize(static_cast<size_t>(want));

  DataSplits out;
  out.n_classes = all.n_classes;
  auto build = [&](const std::vector<int64_t>& idx) {
    Dataset d;
    d.n_classes = all.n_classes;
    ImageBatchf b = all.slice(idx);
    d.x = std::move(b.x);
    d.y = std::move(b.y);
    return d;
  };
  out.train = build(train_idx);
  out.val = build(val_idx);
  return out;
}

inline DataSplits load_dataset(const DatasetSpec& spec) {
  DataSplits out;
  switch (spec.source) {
    case DataSource::cifar10_binary: {
      out = split_train_val(load_cifar_files(spec.root_path, false), spec);
      out.test = load_cifar_files(spec.root_path, true);
      break;
    }
    case DataSource::image_folder: {
      namespace fs = std::filesystem;
      const bool has_sub = fs::is_directory(fs::path(spec.root_path) / "train");
      const std::string train_root =
          has_sub ? (fs::path(spec.root_path) / "train").string() : spec.root_path;
      out = split_train_val(load_image_folder(train_root), spec);
      if (has_sub && fs::is_directory(fs::path(spec.root_path) / "test"))
        out.test = load_image_folder((fs::path(spec.root_path) / "test").string());
      break;
    }
    case DataSource::synthetic: {
      Dataset all = make_synthetic_dataset(spec.n_train + spec.n_val, spec.synth_classes,
                                           spec.synth_hw, spec.seed, "train");
      out = split_train_val(std::move(all), spec);
      out.test = make_synthetic_dataset(spec.synth_n_test, spec.synth_classes, spec.synth_hw,
                                        spec.seed, "test");
      break;
    }
  }
  if (out.train.size() == 0) throw std::runtime_error("empty training split");
  return out;
}

// -------------------------------------------------------------- batching --
// Deterministic epoch iteration: the shuffle order is a pure function of
// (seed, epoch). Epoch 0 means "no shuffle" and is what evaluation uses.
struct BatchStream {
  const Dataset* ds = nullptr;
  int batch_size = 128;
  uint64_t seed = 1;
  uint64_t epoch = 0;
  std::vector<int64_t> order;

  BatchStream(const Dataset& d, int bs, uint64_t seed_, uint64_t epoch_)
      : ds(&d), batch_size(bs), seed(seed_), epoch(epoch_) {
    order.resize(static_cast<size_t>(d.size()));
    for (int64_t i = 0; i < d.size(); ++i) order[static_cast<size_t>(i)] = i;
    if (epoch > 0) {
      auto g = make_stream(seed, "data", epoch);
      for (int64_t i = d.size() - 1; i > 0; --i)
        std::swap(order[static_cast<size_t>(i)],
                  order[static_cast<size_t>(uniform_int(g, static_cast<int>(i + 1)))]);
    }
  }

  int n_batches() const {
    return static_cast<int>((ds->size() + batch_size - 1) / batch_size);
  }

  ImageBatchf get(int bi) const {
    const int64_t lo = static_cast<int64_t>(bi) * batch_size;
    const int64_t hi = std::min<int64_t>(lo + batch_size, ds->size());
    std::vector<int64_t> idx(order.begin() + lo, order.begin() + hi);
    return ds->slice(idx);
  }
};

// ----------------------------------------------------------- augmentation --
struct AugmentOptions {
  int pad = 4;
  double flip_prob = 0.5;
};

// Zero-pad + random crop + horizontal flip; draws come from the named augment
// stream in sample order, so the result is a pure function of (batch, seed).
template <typename T>
void augment(ImageBatch<T>& b, uint64_t seed, const AugmentOptions& opt = {}) {
  if (opt.pad == 0 && opt.flip_prob <= 0) return;
  const int64_t B = b.x.shape[0], C = b.x.shape[1], H = b.x.shape[2], W = b.x.shape[3];
  auto g = make_stream(seed, "augment");
  Tensor<T> out(b.x.shape);
  for (int64_t i = 0; i < B; ++i) {
    const int dy = opt.pad > 0 ? uniform_int(g, 2 * opt.pad + 1) - opt.pad : 0;
    const int dx = opt.pad > 0 ? uniform_int(g, 2 * opt.pad + 1) - opt.pad : 0;
    const bool flip = opt.flip_prob > 0 && uniform01(g) < opt.flip_prob;
    for (int64_t c = 0; c < C; ++c)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w) {
          const int64_t sw = flip ? W - 1 - w : w;
          const int64_t ih = h + dy, iw = sw + dx;
          out.at(i, c, h, w) = (ih >= 0 && ih < H && iw >= 0 && iw < W) ? b.x.at(i, c, ih, iw) : T(0);
        }
  }
  b.x = std::move(out);
}

}  // namespace oaat
