#pragma once

// Labeled image sets: CIFAR binary ingestion and synthetic planted-signal
// benchmarks with a known ground-truth operation family.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "midas/search_space.hpp"
#include "midas/tensor.hpp"

namespace midas {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dataset {
  Tensor images;  // [N, C, H, W]
  std::vector<int> labels;
  int num_classes = 0;
  std::string name;

  int size() const { return static_cast<int>(labels.size()); }
  int channels() const { return images.dim(1); }
  int height() const { return images.dim(2); }
  int width() const { return images.dim(3); }
  std::size_t image_numel() const {
    return static_cast<std::size_t>(channels()) * height() * width();
  }
  const float* image(int i) const { return images.data() + static_cast<std::size_t>(i) * image_numel(); }
};

/// Copies the listed samples into a new dataset.
inline Dataset subset(const Dataset& d, const std::vector<int>& idx) {
  Dataset out;
  out.num_classes = d.num_classes;
  out.name = d.name;
  out.images = Tensor({static_cast<int>(idx.size()), d.channels(), d.height(), d.width()});
  const std::size_t n = d.image_numel();
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= d.size()) throw DataError("subset index out of range");
    std::copy_n(d.image(idx[k]), n, out.images.data() + k * n);
    out.labels.push_back(d.labels[static_cast<std::size_t>(idx[k])]);
  }
  return out;
}

struct ChannelStats {
  std::vector<double> mean, std;
};

inline ChannelStats channel_stats(const Dataset& d) {
  const int C = d.channels();
  const std::size_t hw = static_cast<std::size_t>(d.height()) * d.width();
  ChannelStats s{std::vector<double>(C, 0.0), std::vector<double>(C, 0.0)};
  std::vector<double> sq(C, 0.0);
  for (int i = 0; i < d.size(); ++i)
    for (int c = 0; c < C; ++c) {
      const float* p = d.image(i) + c * hw;
      for (std::size_t k = 0; k < hw; ++k) {
        s.mean[c] += p[k];
        sq[c] += static_cast<double>(p[k]) * p[k];
      }
    }
  const double n = static_cast<double>(d.size()) * hw;
  for (int c = 0; c < C; ++c) {
    s.mean[c] /= n;
    s.std[c] = std::sqrt(std::max(0.0, sq[c] / n - s.mean[c] * s.mean[c]));
  }
  return s;
}

inline void normalize(Dataset& d, const ChannelStats& s) {
  const int C = d.channels();
  const std::size_t hw = static_cast<std::size_t>(d.height()) * d.width();
  for (int i = 0; i < d.size(); ++i)
    for (int c = 0; c < C; ++c) {
      float* p = d.images.data() + (static_cast<std::size_t>(i) * C + c) * hw;
      const double sd = s.std[c] > 0 ? s.std[c] : 1.0;
      for (std::size_t k = 0; k < hw; ++k) p[k] = static_cast<float>((p[k] - s.mean[c]) / sd);
    }
}

// ---------------------------------------------------------------------------
// CIFAR binary batches

enum class CifarVariant { cifar10, cifar100 };

/// Reads one binary batch file. CIFAR-10 rows are <label><3072 bytes>;
/// CIFAR-100 rows are <coarse><fine><3072 bytes> and the fine label is kept.
inline void read_cifar_file(const std::filesystem::path& file, CifarVariant v,
                            std::vector<float>& pixels, std::vector<int>& labels) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw DataError("missing CIFAR file " + file.string());
  const std::size_t label_bytes = v == CifarVariant::cifar10 ? 1 : 2;
  const std::size_t row = label_bytes + 3072;
  is.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::size_t>(is.tellg());
  is.seekg(0);
  if (bytes == 0 || bytes % row != 0)
    throw DataError(file.string() + ": size " + std::to_string(bytes) +
                    " is not a multiple of the " + std::to_string(row) + "-byte row");
  std::vector<unsigned char> buf(row);
  const int max_label = v == CifarVariant::cifar10 ? 10 : 100;
  for (std::size_t r = 0; r < bytes / row; ++r) {
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(row));
    const int label = buf[label_bytes - 1];
    if (label >= max_label) throw DataError(file.string() + ": label out of range");
    labels.push_back(label);
    for (std::size_t k = 0; k < 3072; ++k) pixels.push_back(buf[label_bytes + k] / 255.0f);
  }
}

/// Loads the train (or test) split from a directory of CIFAR binary files.
/// Normalization uses per-channel statistics of `stats` when given, otherwise
/// of the loaded data itself.
inline Dataset ingest_cifar(const std::filesystem::path& dir, CifarVariant v, bool train = true,
                            const ChannelStats* stats = nullptr, ChannelStats* stats_out = nullptr) {
  std::vector<std::filesystem::path> files;
  if (v == CifarVariant::cifar10) {
    if (train)
      for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    else
      files.push_back(dir / "test_batch.bin");
  } else {
    files.push_back(dir / (train ? "train.bin" : "test.bin"));
  }
  std::vector<float> pixels;
  std::vector<int> labels;
  for (const auto& f : files) read_cifar_file(f, v, pixels, labels);
  Dataset d;
  d.num_classes = v == CifarVariant::cifar10 ? 10 : 100;
  d.name = v == CifarVariant::cifar10 ? "cifar10" : "cifar100";
  d.images = Tensor({static_cast<int>(labels.size()), 3, 32, 32}, std::move(pixels));
  d.labels = std::move(labels);
  const auto s = stats ? *stats : channel_stats(d);
  normalize(d, s);
  if (stats_out) *stats_out = s;
  return d;
}

// ---------------------------------------------------------------------------
// Planted benchmark
//
// Every image carries a period-2 grating (rows or columns alternate sign) with
// random phase, polarity and patch placement, buried in smooth low-frequency
// clutter and white noise. The class is the grating orientation. A dense 3x3
// filter resolves the grating; 3x3 pooling averages it away and a dilation-2
// filter samples it at a single phase, so the separable-conv family carries
// the signal. Clutter magnitude is independent of the label.

struct PlantedParams {
  int image_size = 16;
  int channels = 3;
  int num_classes = 2;
  int planted_op = op_id::sep_conv_3x3;
  double signal_strength = 1.0;
  double grating_amplitude = 1.0;
  double noise_std = 0.35;
  double clutter_std = 1.0;
  int grating_extent = 8;  // side of the square region carrying the grating
  bool modulated = false;  // carry the pattern in the noise energy instead of the intensity
};

namespace detail {

inline Tensor smooth_field(int C, int S, double amplitude, std::mt19937_64& rng) {
  // Sum of a few random low-frequency cosines per channel.
  Tensor f({C, S, S});
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> ph(0.0, 2 * M_PI);
  for (int c = 0; c < C; ++c)
    for (int k = 0; k < 3; ++k) {
      const double a = amplitude * nd(rng) / std::sqrt(3.0);
      const double fy = (rng() % 3) * M_PI / S, fx = (rng() % 3) * M_PI / S, p = ph(rng);
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) f.at({c, y, x}) += static_cast<float>(a * std::cos(fy * y + fx * x + p));
    }
  return f;
}

}  // namespace detail

/// Orientation index of class `label` for the planted generator: classes are
/// assigned round-robin to {horizontal rows, vertical columns, checkerboard}.
inline int planted_pattern(int label) { return label % 3; }

inline float grating_value(int pattern, int y, int x) {
  switch (pattern) {
    case 0: return (y % 2) ? 1.0f : -1.0f;
    case 1: return (x % 2) ? 1.0f : -1.0f;
    default: return ((x + y) % 2) ? 1.0f : -1.0f;
  }
}

inline Dataset generate_planted(const PlantedParams& p, int n, std::uint64_t seed) {
  if (p.num_classes < 2 || p.num_classes > 3)
    throw std::invalid_argument("planted benchmark supports 2 or 3 classes");
  if (p.grating_extent < 2 || p.grating_extent > p.image_size)
    throw std::invalid_argument("grating extent out of range");
  std::mt19937_64 rng(seed);
  const int S = p.image_size, C = p.channels, G = p.grating_extent;
  Dataset d;
  d.name = "planted";
  d.num_classes = p.num_classes;
  d.images = Tensor({n, C, S, S});
  std::normal_distribution<double> nd(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  std::uniform_int_distribution<int> cls(0, p.num_classes - 1);
  for (int i = 0; i < n; ++i) {
    const int label = cls(rng);
    // With strength s the image carries its own class pattern with probability s
    // and a pattern drawn independently of the label otherwise.
    const bool informative = std::uniform_real_distribution<double>(0, 1)(rng) < p.signal_strength;
    const int pattern = planted_pattern(informative ? label : cls(rng));
    const int oy = static_cast<int>(rng() % static_cast<unsigned>(S - G + 1));
    const int ox = static_cast<int>(rng() % static_cast<unsigned>(S - G + 1));
    const float sign = coin(rng) ? 1.0f : -1.0f;
    std::vector<float> tint(static_cast<std::size_t>(C));
    for (auto& t : tint) t = static_cast<float>(0.5 + 0.5 * std::abs(nd(rng)));
    const auto clutter = detail::smooth_field(C, S, p.clutter_std, rng);
    float* img = d.images.data() + static_cast<std::size_t>(i) * C * S * S;
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
          double v = clutter.at({c, y, x}) + p.noise_std * nd(rng);
          if (y >= oy && y < oy + G && x >= ox && x < ox + G) {
            if (p.modulated) {
              if (grating_value(pattern, y, x) * sign > 0) v += p.grating_amplitude * nd(rng);
            } else {
              v += p.grating_amplitude * sign * tint[static_cast<std::size_t>(c)] * grating_value(pattern, y, x);
            }
          }
          img[(c * S + y) * S + x] = static_cast<float>(v);
        }
    d.labels.push_back(label);
  }
  return d;
}

/// The generator's own decision rule: the pattern whose matched filter has the
/// largest rectified 2x2 response energy.
inline int planted_oracle_predict(const Dataset& d, int i, int num_classes) {
  const int C = d.channels(), S = d.height();
  const float* img = d.image(i);
  std::array<double, 3> energy{0, 0, 0};
  for (int c = 0; c < C; ++c)
    for (int y = 0; y + 1 < S; ++y)
      for (int x = 0; x + 1 < S; ++x) {
        auto at = [&](int yy, int xx) { return img[(c * S + yy) * S + xx]; };
        const double a = at(y, x), b = at(y, x + 1), e = at(y + 1, x), f = at(y + 1, x + 1);
        const double rows = (e + f) - (a + b);   // horizontal rows alternate in y
        const double cols = (b + f) - (a + e);   // vertical columns alternate in x
        const double check = (b + e) - (a + f);  // checkerboard
        energy[0] += rows * rows;
        energy[1] += cols * cols;
        energy[2] += check * check;
      }
  int best = 0;
  for (int k = 1; k < num_classes; ++k)
    if (energy[static_cast<std::size_t>(k)] > energy[static_cast<std::size_t>(best)]) best = k;
  return best;
}

/// Decision rule for the modulated variant: the sign pattern whose correlation
/// with the per-pixel energy is largest in magnitude.
inline int modulated_oracle_predict(const Dataset& d, int i, int num_classes) {
  const int C = d.channels(), S = d.height();
  const float* img = d.image(i);
  std::array<double, 3> score{0, 0, 0};
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      double e = 0;
      for (int c = 0; c < C; ++c) {
        const double v = img[(c * S + y) * S + x];
        e += v * v;
      }
      for (int k = 0; k < 3; ++k) score[static_cast<std::size_t>(k)] += e * grating_value(k, y, x);
    }
  int best = 0;
  for (int k = 1; k < num_classes; ++k)
    if (std::abs(score[static_cast<std::size_t>(k)]) > std::abs(score[static_cast<std::size_t>(best)])) best = k;
  return best;
}

inline double planted_oracle_accuracy(const Dataset& d) {
  int hit = 0;
  for (int i = 0; i < d.size(); ++i)
    hit += planted_oracle_predict(d, i, d.num_classes) == d.labels[static_cast<std::size_t>(i)];
  return d.size() ? static_cast<double>(hit) / d.size() : 0.0;
}

/// Three-class set for class-similarity checks: classes 0 and 1 share the
/// horizontal grating and differ only in a mild colour tint; class 2 carries
/// the checkerboard pattern over stronger clutter.
inline Dataset generate_similarity_set(int image_size, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int S = image_size, C = 3;
  Dataset d;
  d.name = "similarity3";
  d.num_classes = 3;
  d.images = Tensor({n, C, S, S});
  std::normal_distribution<double> nd(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  for (int i = 0; i < n; ++i) {
    const int label = static_cast<int>(rng() % 3);
    const int pattern = label == 2 ? 2 : 0;
    const float sign = coin(rng) ? 1.0f : -1.0f;
    const std::array<float, 3> tint = label == 0   ? std::array<float, 3>{1.0f, 0.8f, 0.8f}
                                      : label == 1 ? std::array<float, 3>{0.8f, 1.0f, 0.8f}
                                                   : std::array<float, 3>{1.0f, 1.0f, 1.0f};
    const auto clutter = detail::smooth_field(C, S, label == 2 ? 2.0 : 0.7, rng);
    float* img = d.images.data() + static_cast<std::size_t>(i) * C * S * S;
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x)
          img[(c * S + y) * S + x] = static_cast<float>(
              clutter.at({c, y, x}) + 0.3 * nd(rng) + sign * tint[static_cast<std::size_t>(c)] *
                                                          grating_value(pattern, y, x));
    d.labels.push_back(label);
  }
  return d;
}

}  // namespace midas
