#pragma once

// Datasets: CIFAR-10/100 binaries, the pad-and-crop augmentation, and a
// synthetic multi-glyph dataset whose classes are defined by the joint
// presence of several 5x5 glyphs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "cdb/error.hpp"
#include "cdb/random.hpp"
#include "cdb/tensor.hpp"

namespace cdb {

/// Glyph placement recorded by the synthetic generator (top-left corner).
struct GlyphBox {
  std::size_t glyph = 0;
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t size = 0;

  bool contains(double y, double x) const {
    return y >= static_cast<double>(row) && y < static_cast<double>(row + size) &&
           x >= static_cast<double>(col) && x < static_cast<double>(col + size);
  }
};

struct Dataset {
  Tensor<float> images;  // [N, C, H, W]
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
  std::vector<std::vector<GlyphBox>> boxes;  // synthetic only, one list per image

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.extent(1); }
  std::size_t height() const { return images.extent(2); }
  std::size_t width() const { return images.extent(3); }
  std::size_t image_len() const { return channels() * height() * width(); }

  Tensor<float> image(std::size_t i) const {
    const std::size_t len = image_len();
    std::vector<float> d(images.raw() + i * len, images.raw() + (i + 1) * len);
    return Tensor<float>({channels(), height(), width()}, std::move(d));
  }
};

struct DatasetSplit {
  Dataset train;
  Dataset test;
};

// ---------------------------------------------------------------------------
// CIFAR

enum class CifarVariant { C10, C100 };

inline std::size_t cifar_record_bytes(CifarVariant v) { return v == CifarVariant::C10 ? 3073 : 3074; }
inline std::size_t cifar_classes(CifarVariant v) { return v == CifarVariant::C10 ? 10 : 100; }

/// Parses one binary batch file. Pixels are scaled to [0,1]. When
/// `expected_records` is given the file size must match it exactly.
inline Dataset read_cifar_file(const std::filesystem::path& path, CifarVariant variant,
                               std::optional<std::size_t> expected_records = std::nullopt) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const std::size_t rec = cifar_record_bytes(variant);
  if (expected_records) {
    if (bytes.size() != *expected_records * rec)
      throw FormatError(path.string() + ": expected " + std::to_string(*expected_records * rec) +
                        " bytes, found " + std::to_string(bytes.size()));
  } else if (bytes.empty() || bytes.size() % rec != 0) {
    throw FormatError(path.string() + ": expected a multiple of " + std::to_string(rec) + " bytes, found " +
                      std::to_string(bytes.size()));
  }
  const std::size_t n = bytes.size() / rec;
  const std::size_t label_bytes = rec - 3072;
  Dataset ds;
  ds.num_classes = cifar_classes(variant);
  ds.images = Tensor<float>({n, 3, 32, 32});
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* r = bytes.data() + i * rec;
    if (variant == CifarVariant::C100 && r[0] >= 20)
      throw CorruptRecord(path.string() + ": record " + std::to_string(i) + " has coarse label " + std::to_string(r[0]));
    const std::size_t label = r[label_bytes - 1];
    if (label >= ds.num_classes)
      throw CorruptRecord(path.string() + ": record " + std::to_string(i) + " has label " + std::to_string(label));
    ds.labels[i] = label;
    float* dst = ds.images.raw() + i * 3072;
    for (std::size_t j = 0; j < 3072; ++j) dst[j] = static_cast<float>(r[label_bytes + j]) / 255.0f;
  }
  return ds;
}

inline Dataset concat(const std::vector<Dataset>& parts) {
  Dataset out;
  if (parts.empty()) return out;
  std::size_t n = 0;
  for (const auto& p : parts) n += p.size();
  const Dataset& first = parts.front();
  out.num_classes = first.num_classes;
  out.images = Tensor<float>({n, first.channels(), first.height(), first.width()});
  std::size_t at = 0;
  for (const auto& p : parts) {
    std::copy(p.images.data().begin(), p.images.data().end(), out.images.raw() + at * first.image_len());
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    at += p.size();
  }
  return out;
}

/// Loads the standard binary release from `dir` (or its usual subdirectory).
inline DatasetSplit load_cifar(const std::filesystem::path& dir, CifarVariant variant) {
  namespace fs = std::filesystem;
  const char* sub = variant == CifarVariant::C10 ? "cifar-10-batches-bin" : "cifar-100-binary";
  fs::path root = dir;
  if (fs::exists(dir / sub)) root = dir / sub;
  DatasetSplit split;
  if (variant == CifarVariant::C10) {
    std::vector<Dataset> parts;
    for (int b = 1; b <= 5; ++b)
      parts.push_back(read_cifar_file(root / ("data_batch_" + std::to_string(b) + ".bin"), variant, 10000));
    split.train = concat(parts);
    split.test = read_cifar_file(root / "test_batch.bin", variant, 10000);
  } else {
    split.train = read_cifar_file(root / "train.bin", variant, 50000);
    split.test = read_cifar_file(root / "test.bin", variant, 10000);
  }
  return split;
}

// ---------------------------------------------------------------------------
// Normalization, subsets, augmentation

struct NormStats {
  std::vector<float> mean;
  std::vector<float> stddev;
};

inline NormStats channel_stats(const Dataset& ds) {
  const std::size_t c = ds.channels(), hw = ds.height() * ds.width();
  NormStats s{std::vector<float>(c), std::vector<float>(c)};
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0, sq = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const float* p = ds.images.raw() + (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) {
        sum += p[j];
        sq += static_cast<double>(p[j]) * p[j];
      }
    }
    const double m = static_cast<double>(ds.size() * hw);
    const double mean = sum / m;
    const double var = std::max(0.0, sq / m - mean * mean);
    s.mean[ch] = static_cast<float>(mean);
    s.stddev[ch] = static_cast<float>(var > 1e-12 ? std::sqrt(var) : 1.0);
  }
  return s;
}

inline void normalize(Dataset& ds, const NormStats& s) {
  const std::size_t c = ds.channels(), hw = ds.height() * ds.width();
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      float* p = ds.images.raw() + (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) p[j] = (p[j] - s.mean[ch]) / s.stddev[ch];
    }
}

/// Statistics from the train split, applied to both splits.
inline NormStats normalize_split(DatasetSplit& split) {
  NormStats s = channel_stats(split.train);
  normalize(split.train, s);
  normalize(split.test, s);
  return s;
}

inline Dataset select(const Dataset& ds, const std::vector<std::size_t>& idx) {
  Dataset out;
  out.num_classes = ds.num_classes;
  out.images = Tensor<float>({idx.size(), ds.channels(), ds.height(), ds.width()});
  const std::size_t len = ds.image_len();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(ds.images.raw() + idx[i] * len, len, out.images.raw() + i * len);
    out.labels.push_back(ds.labels[idx[i]]);
    if (!ds.boxes.empty()) out.boxes.push_back(ds.boxes[idx[i]]);
  }
  return out;
}

/// First `n` images of a seeded permutation.
inline Dataset subset(const Dataset& ds, std::size_t n, std::uint64_t seed) {
  if (n >= ds.size()) return ds;
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = Rng::substream(seed, "subset");
  rng.shuffle(idx.begin(), idx.end());
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  return select(ds, idx);
}

inline constexpr std::size_t kCropPad = 4;

/// Zero-pad by 4 on every side, then take the HxW window at (oy, ox) in the
/// padded frame. Offset (4,4) returns the input.
inline Tensor<float> crop_with_offset(const Tensor<float>& image, std::size_t oy, std::size_t ox) {
  require_rank(image, 3, "crop_with_offset");
  const std::size_t c = image.extent(0), h = image.extent(1), w = image.extent(2);
  if (oy > 2 * kCropPad || ox > 2 * kCropPad) throw InvalidConfig("crop offset out of range");
  Tensor<float> out(image.shape());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y) {
      const auto sy = static_cast<std::ptrdiff_t>(y + oy) - static_cast<std::ptrdiff_t>(kCropPad);
      if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
      for (std::size_t x = 0; x < w; ++x) {
        const auto sx = static_cast<std::ptrdiff_t>(x + ox) - static_cast<std::ptrdiff_t>(kCropPad);
        if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
        out(ch, y, x) = image(ch, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
      }
    }
  return out;
}

inline Tensor<float> hflip(const Tensor<float>& image) {
  const std::size_t c = image.extent(0), h = image.extent(1), w = image.extent(2);
  Tensor<float> out(image.shape());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out(ch, y, x) = image(ch, y, w - 1 - x);
  return out;
}

/// Random pad-and-crop; horizontal flip only when enabled.
inline Tensor<float> augment(const Tensor<float>& image, Rng& rng, bool flip = false) {
  const auto oy = static_cast<std::size_t>(rng.uniform_index(2 * kCropPad + 1));
  const auto ox = static_cast<std::size_t>(rng.uniform_index(2 * kCropPad + 1));
  Tensor<float> out = crop_with_offset(image, oy, ox);
  if (flip && rng.bernoulli(0.5)) out = hflip(out);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic multi-glyph dataset

struct SyntheticSpec {
  std::size_t num_classes = 8;
  std::size_t patches_per_class = 3;
  std::size_t glyph_pool = 0;  // 0 picks the smallest pool that fits
  std::size_t glyph_size = 5;
  std::size_t image_size = 32;
  double noise = 0.6;
  std::size_t train_per_class = 40;
  std::size_t test_per_class = 40;
  std::uint64_t seed = 1;

  void validate() const {
    if (num_classes < 2) throw SpecError("synthetic data needs at least 2 classes");
    if (patches_per_class < 2) throw SpecError("each class needs at least 2 glyphs");
    if (glyph_size == 0 || glyph_size > image_size) throw SpecError("glyph does not fit the image");
    if (noise < 0) throw SpecError("noise must be nonnegative");
    if (train_per_class == 0 || test_per_class == 0) throw SpecError("empty split");
  }
};

namespace detail {

inline bool next_combination(std::vector<std::size_t>& c, std::size_t n) {
  const std::size_t k = c.size();
  for (std::size_t i = k; i-- > 0;) {
    if (c[i] < n - k + i) {
      ++c[i];
      for (std::size_t j = i + 1; j < k; ++j) c[j] = c[j - 1] + 1;
      return true;
    }
  }
  return false;
}

inline bool intersects(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  for (auto x : a)
    if (std::find(b.begin(), b.end(), x) != b.end()) return true;
  return false;
}

inline std::vector<std::vector<std::size_t>> greedy_family(std::size_t pool, std::size_t k, std::size_t want) {
  std::vector<std::vector<std::size_t>> family;
  if (k > pool) return family;
  std::vector<std::size_t> c(k);
  std::iota(c.begin(), c.end(), 0);
  do {
    if (std::all_of(family.begin(), family.end(), [&](const auto& f) { return intersects(f, c); }))
      family.push_back(c);
  } while (family.size() < want && next_combination(c, pool));
  return family;
}

}  // namespace detail

/// Glyph sets per class: distinct, each of size patches_per_class, every two
/// classes sharing at least one glyph.
inline std::vector<std::vector<std::size_t>> class_glyph_sets(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t k = spec.patches_per_class;
  if (spec.glyph_pool) {
    auto fam = detail::greedy_family(spec.glyph_pool, k, spec.num_classes);
    if (fam.size() < spec.num_classes)
      throw SpecError("glyph pool of " + std::to_string(spec.glyph_pool) + " cannot form " +
                      std::to_string(spec.num_classes) + " pairwise-overlapping classes");
    return fam;
  }
  for (std::size_t pool = k + 1; pool <= 64; ++pool) {
    auto fam = detail::greedy_family(pool, k, spec.num_classes);
    if (fam.size() >= spec.num_classes) return fam;
  }
  throw SpecError("cannot form " + std::to_string(spec.num_classes) + " classes");
}

inline std::size_t glyph_pool_size(const std::vector<std::vector<std::size_t>>& sets) {
  std::size_t m = 0;
  for (const auto& s : sets)
    for (auto g : s) m = std::max(m, g + 1);
  return m;
}

/// Glyph g is a 3 x size x size pattern of +-1 drawn from its own substream.
inline Tensor<float> make_glyph(std::uint64_t seed, std::size_t g, std::size_t size, std::size_t channels = 3) {
  Rng rng = Rng::substream(seed, "glyph", {g});
  Tensor<float> t({channels, size, size});
  for (auto& v : t.data()) v = rng.bernoulli(0.5) ? 1.0f : -1.0f;
  return t;
}

namespace detail {

inline bool overlaps(const GlyphBox& a, std::size_t row, std::size_t col, std::size_t size) {
  return row < a.row + a.size && a.row < row + size && col < a.col + a.size && a.col < col + size;
}

inline Dataset render_split(const SyntheticSpec& spec, const std::vector<std::vector<std::size_t>>& sets,
                            const std::vector<Tensor<float>>& glyphs, std::size_t per_class, std::string_view tag) {
  const std::size_t n = per_class * spec.num_classes, s = spec.image_size, g = spec.glyph_size;
  Dataset ds;
  ds.num_classes = spec.num_classes;
  ds.images = Tensor<float>({n, 3, s, s});
  ds.labels.resize(n);
  ds.boxes.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % spec.num_classes;
    ds.labels[i] = label;
    Rng rng = Rng::substream(spec.seed, tag, {i});
    float* img = ds.images.raw() + i * 3 * s * s;
    for (std::size_t j = 0; j < 3 * s * s; ++j) img[j] = static_cast<float>(rng.normal() * spec.noise);
    auto& boxes = ds.boxes[i];
    for (std::size_t glyph : sets[label]) {
      bool placed = false;
      for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
        const auto row = static_cast<std::size_t>(rng.uniform_index(s - g + 1));
        const auto col = static_cast<std::size_t>(rng.uniform_index(s - g + 1));
        if (std::any_of(boxes.begin(), boxes.end(), [&](const GlyphBox& b) { return overlaps(b, row, col, g); }))
          continue;
        boxes.push_back({glyph, row, col, g});
        placed = true;
      }
      if (!placed) throw SpecError("cannot place " + std::to_string(sets[label].size()) + " glyphs of size " +
                                   std::to_string(g) + " without overlap in a " + std::to_string(s) + "px image");
    }
    for (const auto& b : boxes) {
      const Tensor<float>& pat = glyphs[b.glyph];
      for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t y = 0; y < g; ++y)
          for (std::size_t x = 0; x < g; ++x)
            img[(ch * s + b.row + y) * s + b.col + x] = pat(ch, y, x);
    }
  }
  return ds;
}

}  // namespace detail

/// Deterministic in `spec.seed`. Images are not normalized here.
inline DatasetSplit generate_synthetic(const SyntheticSpec& spec) {
  const auto sets = class_glyph_sets(spec);
  std::vector<Tensor<float>> glyphs;
  for (std::size_t g = 0; g < glyph_pool_size(sets); ++g) glyphs.push_back(make_glyph(spec.seed, g, spec.glyph_size));
  DatasetSplit split;
  split.train = detail::render_split(spec, sets, glyphs, spec.train_per_class, "synthetic-train");
  split.test = detail::render_split(spec, sets, glyphs, spec.test_per_class, "synthetic-test");
  return split;
}

// ---------------------------------------------------------------------------
// Dataset cache: <dir>/<name>.images.cdbt, <name>.labels.cdbt, <name>.manifest

inline void save_dataset_cache(const std::filesystem::path& dir, const std::string& name, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / (name + ".images.cdbt"), std::ios::binary);
    write_tensor(os, ds.images);
  }
  {
    Tensor<double> labels({ds.size()});
    for (std::size_t i = 0; i < ds.size(); ++i) labels[i] = static_cast<double>(ds.labels[i]);
    std::ofstream os(dir / (name + ".labels.cdbt"), std::ios::binary);
    write_tensor(os, labels);
  }
  std::ofstream ms(dir / (name + ".manifest"));
  ms << "num_classes " << ds.num_classes << "\n"
     << "count " << ds.size() << "\n"
     << "images " << shape_str(ds.images.shape()) << "\n";
}

inline Dataset load_dataset_cache(const std::filesystem::path& dir, const std::string& name) {
  Dataset ds;
  std::ifstream ms(dir / (name + ".manifest"));
  if (!ms) throw FormatError("missing dataset manifest for " + name);
  std::string key, value;
  while (ms >> key >> value)
    if (key == "num_classes") ds.num_classes = std::stoull(value);
  std::ifstream is(dir / (name + ".images.cdbt"), std::ios::binary);
  ds.images = read_tensor<float>(is);
  std::ifstream ls(dir / (name + ".labels.cdbt"), std::ios::binary);
  const Tensor<double> labels = read_tensor<double>(ls);
  for (double l : labels.data()) ds.labels.push_back(static_cast<std::size_t>(l));
  if (ds.labels.size() != ds.images.extent(0)) throw FormatError("dataset cache label/image count mismatch");
  return ds;
}

}  // namespace cdb
