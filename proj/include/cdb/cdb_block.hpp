#pragma once

// Channel DropBlock.
//
// Train mode, per batch element: build the channel correlation matrix from
// that element's feature map, pick an anchor channel, zero the k(gamma, C)
// channels most correlated with it (the anchor included) across every
// spatial position, and scale what survives by 1 / (1 - gamma). Eval mode is
// the identity.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "cdb/correlation.hpp"
#include "cdb/error.hpp"
#include "cdb/random.hpp"
#include "cdb/tensor.hpp"

namespace cdb {

enum class Mode { Train, Eval };
enum class Guidance { Random, Attention };

inline std::string_view to_string(Guidance g) {
  return g == Guidance::Random ? "random" : "attention";
}

inline Guidance parse_guidance(std::string_view s) {
  if (s == "random") return Guidance::Random;
  if (s == "attention") return Guidance::Attention;
  throw ConfigError("unknown guidance '" + std::string(s) + "' (expected random or attention)");
}

inline constexpr double kDefaultGammaMaxActivation = 0.20;
inline constexpr double kDefaultGammaBilinear = 0.05;

inline double default_gamma(Metric m) {
  return m == Metric::MaxActivation ? kDefaultGammaMaxActivation : kDefaultGammaBilinear;
}

/// Size of the dropped group: round-half-up of gamma * C, at least one.
inline std::size_t drop_count(double gamma, std::size_t channels) {
  const auto k = static_cast<std::size_t>(std::floor(gamma * static_cast<double>(channels) + 0.5));
  return std::max<std::size_t>(1, k);
}

/// Survivor scale 1 / (1 - gamma), rounded once into T.
template <Real T>
T normalization_scale(double gamma) {
  return static_cast<T>(1.0 / (1.0 - gamma));
}

inline constexpr int kInsertPoints = 5;

/// "v1".."v5" -> 0..4.
inline std::size_t insert_index(std::string_view name) {
  if (name.size() == 2 && name[0] == 'v' && name[1] >= '1' && name[1] <= '0' + kInsertPoints)
    return static_cast<std::size_t>(name[1] - '1');
  throw ConfigError("unknown insert position '" + std::string(name) + "' (expected v1..v5)");
}

inline void validate_insert_positions(const std::vector<std::string>& names) {
  if (names.empty()) throw InvalidConfig("insert positions must be nonempty");
  std::set<std::string> seen;
  for (const auto& n : names) {
    insert_index(n);
    if (!seen.insert(n).second) throw InvalidConfig("duplicate insert position " + n);
  }
}

inline void validate_rate(double rate, const char* what) {
  if (!(rate > 0.0 && rate < 1.0))
    throw InvalidConfig(std::string(what) + " must lie in (0,1), got " + std::to_string(rate));
}

struct CdbConfig {
  double gamma = kDefaultGammaMaxActivation;
  Metric metric = Metric::MaxActivation;
  Guidance guidance = Guidance::Random;
  std::vector<std::string> insert_pos{"v2", "v3"};

  static CdbConfig defaults(Metric m) {
    CdbConfig c;
    c.metric = m;
    c.gamma = default_gamma(m);
    return c;
  }

  void validate() const {
    validate_rate(gamma, "cdb.gamma");
    validate_insert_positions(insert_pos);
  }
};

struct DropMask {
  std::vector<std::uint8_t> keep;  // 1 keep, 0 drop
  double gamma = 0.0;
  std::size_t anchor = 0;

  std::size_t channels() const { return keep.size(); }
  std::size_t dropped() const {
    std::size_t n = 0;
    for (auto k : keep) n += k == 0;
    return n;
  }
};

template <Real T>
std::size_t select_anchor(const Tensor<T>& f, Guidance guidance, Rng& rng) {
  require_rank(f, 3, "select_anchor");
  const std::size_t c = f.extent(0);
  if (c < 2) throw DegenerateInput("select_anchor: need at least 2 channels");
  if (guidance == Guidance::Random) return static_cast<std::size_t>(rng.uniform_index(c));

  // Spatial-mean importance, ties to the lower channel.
  const std::size_t hw = f.extent(1) * f.extent(2);
  std::size_t best = 0;
  double best_mean = 0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0;
    for (std::size_t i = 0; i < hw; ++i) sum += f[ch * hw + i];
    const double mean = sum / static_cast<double>(hw);
    if (ch == 0 || mean > best_mean) {
      best = ch;
      best_mean = mean;
    }
  }
  return best;
}

inline DropMask build_drop_mask(const CorrelationMatrix& m, std::size_t anchor, double gamma) {
  validate_rate(gamma, "gamma");
  const std::size_t k = drop_count(gamma, m.channels);
  if (k >= m.channels) {
    throw AllDropped("gamma " + std::to_string(gamma) + " drops all " +
                     std::to_string(m.channels) + " channels");
  }
  const auto order = rank_correlated(m, anchor);
  DropMask mask{std::vector<std::uint8_t>(m.channels, 1), gamma, anchor};
  for (std::size_t i = 0; i < k; ++i) mask.keep[order[i]] = 0;
  return mask;
}

template <Real T>
struct CdbOutput {
  Tensor<T> output;
  std::vector<DropMask> masks;  // one per batch element; empty in eval mode
};

namespace detail {

template <Real T>
Tensor<T> batch_item(const Tensor<T>& x, std::size_t n) {
  const std::size_t c = x.extent(1), h = x.extent(2), w = x.extent(3);
  const std::size_t len = c * h * w;
  std::vector<T> data(x.raw() + n * len, x.raw() + (n + 1) * len);
  return Tensor<T>({c, h, w}, std::move(data));
}

template <Real T>
void check_masks(const Tensor<T>& x, const std::vector<DropMask>& masks, const char* op) {
  require_rank(x, 4, op);
  if (masks.size() != x.extent(0))
    throw InvalidState(std::string(op) + ": " + std::to_string(masks.size()) +
                       " masks for batch of " + std::to_string(x.extent(0)));
  for (const auto& m : masks)
    if (m.channels() != x.extent(1))
      throw InvalidState(std::string(op) + ": mask has " + std::to_string(m.channels()) +
                         " channels, tensor has " + std::to_string(x.extent(1)));
}

/// x * mask * scale with the mask broadcast over spatial positions.
template <Real T>
Tensor<T> scale_by_masks(const Tensor<T>& x, const std::vector<DropMask>& masks, double gamma) {
  const std::size_t n = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
  const T scale = normalization_scale<T>(gamma);
  Tensor<T> out(x.shape());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * hw;
      if (!masks[b].keep[ch]) continue;
      for (std::size_t i = 0; i < hw; ++i) out[base + i] = x[base + i] * scale;
    }
  }
  return out;
}

}  // namespace detail

/// Mask-and-scale with masks fixed by the caller (frozen-mask forward).
template <Real T>
Tensor<T> cdb_apply_masks(const Tensor<T>& x, const std::vector<DropMask>& masks, double gamma) {
  detail::check_masks(x, masks, "cdb_apply_masks");
  return detail::scale_by_masks(x, masks, gamma);
}

/// Draws one mask per batch element. Element n uses a substream keyed by a
/// single draw from `rng` and n, so the result is independent of ordering.
template <Real T>
std::vector<DropMask> cdb_sample_masks(const Tensor<T>& x, const CdbConfig& cfg, Rng& rng) {
  require_rank(x, 4, "cdb_forward");
  const std::size_t n = x.extent(0);
  const std::uint64_t key = rng.next_u64();
  std::vector<DropMask> masks;
  masks.reserve(n);
  for (std::size_t b = 0; b < n; ++b) {
    const Tensor<T> f = detail::batch_item(x, b);
    Rng element = rng.fork(key, b);
    const CorrelationMatrix m = correlation_matrix(f, cfg.metric);
    const std::size_t anchor = select_anchor(f, cfg.guidance, element);
    masks.push_back(build_drop_mask(m, anchor, cfg.gamma));
  }
  return masks;
}

template <Real T>
CdbOutput<T> cdb_forward(const Tensor<T>& x, const CdbConfig& cfg, Mode mode, Rng& rng) {
  require_rank(x, 4, "cdb_forward");
  if (mode == Mode::Eval) return {x, {}};
  validate_rate(cfg.gamma, "cdb.gamma");
  auto masks = cdb_sample_masks(x, cfg, rng);
  Tensor<T> out = detail::scale_by_masks(x, masks, cfg.gamma);
  return {std::move(out), std::move(masks)};
}

template <Real T>
Tensor<T> cdb_backward(const Tensor<T>& grad_out, const std::vector<DropMask>& masks,
                       double gamma) {
  detail::check_masks(grad_out, masks, "cdb_backward");
  return detail::scale_by_masks(grad_out, masks, gamma);
}

/// Stateful layer wrapper: keeps the masks of the last train forward for the
/// paired backward, and can be frozen to a fixed mask set.
template <Real T>
class ChannelDropBlock {
 public:
  explicit ChannelDropBlock(CdbConfig cfg) : cfg_(std::move(cfg)) { validate_rate(cfg_.gamma, "cdb.gamma"); }

  const CdbConfig& config() const { return cfg_; }

  Tensor<T> forward(const Tensor<T>& x, Mode mode, Rng& rng) {
    if (mode == Mode::Eval) {
      active_ = false;
      return x;
    }
    if (frozen_) {
      masks_ = *frozen_;
    } else {
      masks_ = cdb_sample_masks(x, cfg_, rng);
    }
    active_ = true;
    return cdb_apply_masks(x, masks_, cfg_.gamma);
  }

  Tensor<T> backward(const Tensor<T>& grad_out) const {
    if (!active_) return grad_out;
    return cdb_backward(grad_out, masks_, cfg_.gamma);
  }

  void freeze(std::vector<DropMask> masks) { frozen_ = std::move(masks); }
  void unfreeze() { frozen_.reset(); }
  const std::vector<DropMask>& last_masks() const { return masks_; }

 private:
  CdbConfig cfg_;
  std::vector<DropMask> masks_;
  std::optional<std::vector<DropMask>> frozen_;
  bool active_ = false;
};

}  // namespace cdb
