#pragma once

// Comparison regularizers: dropout, SpatialDropout, DropBlock on feature maps
// and cutout on input images. All of them are the identity in eval mode.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "cdb/cdb_block.hpp"
#include "cdb/error.hpp"
#include "cdb/random.hpp"
#include "cdb/tensor.hpp"

namespace cdb {

enum class BaselineKind { Dropout, SpatialDropout, Cutout, DropBlock };

inline std::string_view to_string(BaselineKind k) {
  switch (k) {
    case BaselineKind::Dropout: return "dropout";
    case BaselineKind::SpatialDropout: return "spatial_dropout";
    case BaselineKind::Cutout: return "cutout";
    case BaselineKind::DropBlock: return "dropblock";
  }
  return "?";
}

inline BaselineKind parse_baseline_kind(std::string_view s) {
  if (s == "dropout") return BaselineKind::Dropout;
  if (s == "spatial_dropout" || s == "spatialdropout") return BaselineKind::SpatialDropout;
  if (s == "cutout") return BaselineKind::Cutout;
  if (s == "dropblock") return BaselineKind::DropBlock;
  throw ConfigError("unknown regularizer kind '" + std::string(s) + "'");
}

struct BaselineConfig {
  BaselineKind kind = BaselineKind::Dropout;
  double rate = 0.1;
  std::size_t block_size = 3;
  std::vector<std::string> insert_pos{"v2", "v3"};  // ignored by cutout

  bool uses_block() const {
    return kind == BaselineKind::DropBlock || kind == BaselineKind::Cutout;
  }

  void validate() const {
    validate_rate(rate, "reg.rate");
    if (uses_block() && (block_size == 0 || block_size % 2 == 0))
      throw InvalidConfig("reg.block_size must be odd and positive, got " + std::to_string(block_size));
    if (kind != BaselineKind::Cutout) validate_insert_positions(insert_pos);
  }
};

/// Output of a masked regularizer. `mask` is binary with the input's shape;
/// backward multiplies by mask * scale. Eval mode leaves `mask` empty.
template <Real T>
struct MaskedOutput {
  Tensor<T> output;
  Tensor<T> mask;
  T scale = T(1);
};

template <Real T>
Tensor<T> masked_backward(const Tensor<T>& grad_out, const Tensor<T>& mask, T scale) {
  if (grad_out.shape() != mask.shape())
    throw InvalidState("masked_backward: gradient " + shape_str(grad_out.shape()) +
                       " does not match mask " + shape_str(mask.shape()));
  Tensor<T> g(grad_out.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = grad_out[i] * mask[i] * scale;
  return g;
}

namespace detail {

template <Real T>
MaskedOutput<T> apply_mask(const Tensor<T>& x, Tensor<T> mask, T scale) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * mask[i] * scale;
  return {std::move(out), std::move(mask), scale};
}

template <Real T>
void require_nchw(const Tensor<T>& x, const char* op) {
  require_rank(x, 4, op);
}

}  // namespace detail

template <Real T>
MaskedOutput<T> dropout_forward(const Tensor<T>& x, double rate, Mode mode, Rng& rng) {
  validate_rate(rate, "dropout rate");
  if (mode == Mode::Eval) return {x, {}, T(1)};
  Tensor<T> mask(x.shape(), T(1));
  const std::uint64_t key = rng.next_u64();
  const std::size_t n = x.rank() ? x.extent(0) : 1;
  const std::size_t per = n ? x.size() / n : 0;
  for (std::size_t b = 0; b < n; ++b) {
    Rng element = rng.fork(key, b);
    for (std::size_t i = 0; i < per; ++i)
      if (element.bernoulli(rate)) mask[b * per + i] = T(0);
  }
  return detail::apply_mask(x, std::move(mask), normalization_scale<T>(rate));
}

template <Real T>
MaskedOutput<T> spatial_dropout_forward(const Tensor<T>& x, double rate, Mode mode, Rng& rng) {
  detail::require_nchw(x, "spatial_dropout_forward");
  validate_rate(rate, "spatial dropout rate");
  if (mode == Mode::Eval) return {x, {}, T(1)};
  const std::size_t n = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
  Tensor<T> mask(x.shape(), T(1));
  const std::uint64_t key = rng.next_u64();
  for (std::size_t b = 0; b < n; ++b) {
    Rng element = rng.fork(key, b);
    for (std::size_t ch = 0; ch < c; ++ch) {
      if (!element.bernoulli(rate)) continue;
      std::fill_n(mask.raw() + (b * c + ch) * hw, hw, T(0));
    }
  }
  return detail::apply_mask(x, std::move(mask), normalization_scale<T>(rate));
}

/// Per-seed drop probability that makes the expected dropped fraction
/// approximately `rate` when seeds are confined to the valid interior.
inline double dropblock_seed_probability(double rate, std::size_t h, std::size_t w,
                                         std::size_t block) {
  const double valid = static_cast<double>((h - block + 1) * (w - block + 1));
  return rate * static_cast<double>(h * w) / (static_cast<double>(block * block) * valid);
}

inline void check_block_fits(std::size_t block, std::size_t h, std::size_t w, const char* op) {
  if (block == 0 || block % 2 == 0)
    throw InvalidConfig(std::string(op) + ": block size must be odd and positive");
  if (block > std::min(h, w))
    throw InvalidConfig(std::string(op) + ": block size " + std::to_string(block) +
                        " exceeds map " + std::to_string(h) + "x" + std::to_string(w));
}

/// Independent masks per (element, channel). Output scaled by size/count.
template <Real T>
MaskedOutput<T> dropblock_forward(const Tensor<T>& x, double rate, std::size_t block, Mode mode,
                                  Rng& rng) {
  detail::require_nchw(x, "dropblock_forward");
  validate_rate(rate, "dropblock rate");
  const std::size_t n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  check_block_fits(block, h, w, "dropblock_forward");
  if (mode == Mode::Eval) return {x, {}, T(1)};

  const double gamma = dropblock_seed_probability(rate, h, w, block);
  const std::size_t half = block / 2;
  Tensor<T> mask(x.shape(), T(1));
  const std::uint64_t key = rng.next_u64();
  for (std::size_t b = 0; b < n; ++b) {
    Rng element = rng.fork(key, b);
    for (std::size_t ch = 0; ch < c; ++ch) {
      T* plane = mask.raw() + (b * c + ch) * h * w;
      for (std::size_t y = half; y < h - half; ++y) {
        for (std::size_t xx = half; xx < w - half; ++xx) {
          if (!element.bernoulli(gamma)) continue;
          for (std::size_t dy = 0; dy < block; ++dy)
            std::fill_n(plane + (y - half + dy) * w + (xx - half), block, T(0));
        }
      }
    }
  }
  std::size_t kept = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) kept += mask[i] != T(0);
  const T scale = kept ? static_cast<T>(static_cast<double>(mask.size()) / static_cast<double>(kept))
                       : T(0);
  return detail::apply_mask(x, std::move(mask), scale);
}

/// Zero a block x block square centred uniformly over the image, clipped at
/// the borders, across all channels. No rescaling.
template <Real T>
Tensor<T> cutout_apply(const Tensor<T>& image, std::size_t block, Rng& rng) {
  require_rank(image, 3, "cutout_apply");
  const std::size_t c = image.extent(0), h = image.extent(1), w = image.extent(2);
  if (block == 0 || block > std::min(h, w))
    throw InvalidConfig("cutout_apply: block size " + std::to_string(block) + " does not fit " +
                        std::to_string(h) + "x" + std::to_string(w));
  const auto cy = static_cast<std::ptrdiff_t>(rng.uniform_index(h));
  const auto cx = static_cast<std::ptrdiff_t>(rng.uniform_index(w));
  const auto half = static_cast<std::ptrdiff_t>(block / 2);
  const auto b = static_cast<std::ptrdiff_t>(block);
  const std::size_t y0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, cy - half));
  const std::size_t y1 = static_cast<std::size_t>(std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(h), cy - half + b));
  const std::size_t x0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, cx - half));
  const std::size_t x1 = static_cast<std::size_t>(std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(w), cx - half + b));
  Tensor<T> out = image;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = y0; y < y1; ++y)
      for (std::size_t xx = x0; xx < x1; ++xx) out(ch, y, xx) = T(0);
  return out;
}

}  // namespace cdb
