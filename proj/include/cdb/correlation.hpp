#pragma once

// Channel correlation matrices for a single feature map F in R^{C x H x W}.
//
// Max activation: smooth each channel with a 3x3 mean filter, take its peak
// coordinates, and score a pair of channels by the squared distance between
// their peaks. Smaller means more correlated.
//
// Bilinear pooling: flatten to X in R^{C x HW}, L2-normalize the rows, and
// take N(X) N(X)^T, i.e. pairwise cosine similarity. Larger means more
// correlated.

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "cdb/error.hpp"
#include "cdb/tensor.hpp"

namespace cdb {

enum class Metric { MaxActivation, BilinearPooling };
enum class Orientation { DistanceAscending, SimilarityDescending };

inline std::string_view to_string(Metric m) {
  return m == Metric::MaxActivation ? "ma" : "bp";
}

inline std::string_view to_string(Orientation o) {
  return o == Orientation::DistanceAscending ? "distance_ascending" : "similarity_descending";
}

inline Metric parse_metric(std::string_view s) {
  if (s == "ma" || s == "max_activation") return Metric::MaxActivation;
  if (s == "bp" || s == "bilinear_pooling") return Metric::BilinearPooling;
  throw ConfigError("unknown metric '" + std::string(s) + "' (expected ma or bp)");
}

inline Orientation parse_orientation(std::string_view s) {
  if (s == "distance_ascending") return Orientation::DistanceAscending;
  if (s == "similarity_descending") return Orientation::SimilarityDescending;
  throw ConfigError("unknown orientation '" + std::string(s) + "'");
}

inline Orientation orientation_of(Metric m) {
  return m == Metric::MaxActivation ? Orientation::DistanceAscending
                                    : Orientation::SimilarityDescending;
}

struct CorrelationMatrix {
  std::size_t channels = 0;
  std::vector<double> values;  // row-major C x C
  Metric metric = Metric::MaxActivation;
  Orientation orientation = Orientation::DistanceAscending;

  double operator()(std::size_t i, std::size_t j) const { return values[i * channels + j]; }
  double& operator()(std::size_t i, std::size_t j) { return values[i * channels + j]; }
};

namespace detail {

template <Real T>
void require_channels(const Tensor<T>& f, const char* op) {
  require_rank(f, 3, op);
  if (f.extent(0) < 2) {
    throw DegenerateInput(std::string(op) + ": need at least 2 channels, got " +
                          std::to_string(f.extent(0)));
  }
  require_nonempty(f, op);
}

}  // namespace detail

template <Real T>
CorrelationMatrix max_activation_matrix(const Tensor<T>& f) {
  detail::require_channels(f, "max_activation_matrix");
  const PositionList peaks = peak_positions(avg_pool_3x3_same(f));
  const std::size_t c = peaks.size();
  CorrelationMatrix m{c, std::vector<double>(c * c, 0.0), Metric::MaxActivation,
                      Orientation::DistanceAscending};
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = i + 1; j < c; ++j) {
      const double dr = static_cast<double>(peaks[i].row) - static_cast<double>(peaks[j].row);
      const double dc = static_cast<double>(peaks[i].col) - static_cast<double>(peaks[j].col);
      m(i, j) = m(j, i) = dr * dr + dc * dc;
    }
  }
  return m;
}

template <Real T>
CorrelationMatrix bilinear_correlation_matrix(const Tensor<T>& f) {
  detail::require_channels(f, "bilinear_correlation_matrix");
  const std::size_t c = f.extent(0);
  const std::size_t hw = f.extent(1) * f.extent(2);
  // Similarities are accumulated in double whatever the feature precision.
  const Tensor<double> normed = l2_normalize_rows(tensor_cast<double>(f).reshaped({c, hw}));
  const Tensor<double> gram = matmul(normed, transpose(normed));
  CorrelationMatrix m{c, std::vector<double>(gram.data().begin(), gram.data().end()),
                      Metric::BilinearPooling, Orientation::SimilarityDescending};
  // Exact symmetry regardless of GEMM summation order.
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = i + 1; j < c; ++j) m(j, i) = m(i, j);
  return m;
}

template <Real T>
CorrelationMatrix correlation_matrix(const Tensor<T>& f, Metric metric) {
  return metric == Metric::MaxActivation ? max_activation_matrix(f)
                                         : bilinear_correlation_matrix(f);
}

/// Channels ordered most-correlated-first relative to `anchor`. The anchor
/// always leads; remaining ties go to the lower channel index.
inline std::vector<std::size_t> rank_correlated(const CorrelationMatrix& m, std::size_t anchor) {
  if (anchor >= m.channels) {
    throw IndexError("anchor " + std::to_string(anchor) + " out of range for " +
                     std::to_string(m.channels) + " channels");
  }
  std::vector<std::size_t> order;
  order.reserve(m.channels);
  for (std::size_t i = 0; i < m.channels; ++i)
    if (i != anchor) order.push_back(i);
  const double* row = m.values.data() + anchor * m.channels;
  if (m.orientation == Orientation::DistanceAscending) {
    std::stable_sort(order.begin(), order.end(),
                     [row](std::size_t a, std::size_t b) { return row[a] < row[b]; });
  } else {
    std::stable_sort(order.begin(), order.end(),
                     [row](std::size_t a, std::size_t b) { return row[a] > row[b]; });
  }
  order.insert(order.begin(), anchor);
  return order;
}

}  // namespace cdb
