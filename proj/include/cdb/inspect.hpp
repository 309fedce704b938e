#pragma once

// Post-hoc inspection of trained networks: Grad-CAM heatmaps, correlation
// matrix dumps and empirical drop frequencies.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "cdb/cdb_block.hpp"
#include "cdb/correlation.hpp"
#include "cdb/error.hpp"
#include "cdb/network.hpp"
#include "cdb/random.hpp"
#include "cdb/tensor.hpp"

namespace cdb {

struct Heatmap {
  Tensor<double> values;  // [H, W], in [0, 1]
  std::string layer;
  std::size_t class_index = 0;
  double raw_max = 0;  // max of the unscaled map

  std::size_t height() const { return values.extent(0); }
  std::size_t width() const { return values.extent(1); }

  /// Row-major-first argmax cell.
  Position peak() const {
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i)
      if (values[i] > values[best]) best = i;
    return {best / width(), best % width()};
  }
};

namespace detail {

template <Real T>
Tensor<T> as_batch(const Tensor<T>& image) {
  require_rank(image, 3, "inspect");
  Shape s{1};
  s.insert(s.end(), image.shape().begin(), image.shape().end());
  return image.reshaped(std::move(s));
}

template <Real T>
Tensor<double> first_item(const Tensor<T>& batch) {
  const std::size_t c = batch.extent(1), h = batch.extent(2), w = batch.extent(3);
  std::vector<double> d(batch.raw(), batch.raw() + c * h * w);
  return Tensor<double>({c, h, w}, std::move(d));
}

}  // namespace detail

/// Grad-CAM at a block output: alpha_k is the spatial mean of d score_c / d A_k
/// and the map is relu(sum_k alpha_k A_k), divided by its maximum.
template <Real T>
Heatmap grad_cam(Network<T>& net, const Tensor<T>& image, std::size_t class_index, const std::string& layer) {
  net.layer_slot(layer);
  if (class_index >= net.spec().num_classes)
    throw ConfigError("class " + std::to_string(class_index) + " outside [0," +
                      std::to_string(net.spec().num_classes) + ")");
  Rng unused(0);
  const Tensor<T> logits = net.forward(detail::as_batch(image), Mode::Eval, unused);
  Tensor<T> seed(logits.shape());
  seed(0, class_index) = T(1);
  net.backward(seed);
  net.zero_grad();

  const Tensor<double> act = detail::first_item(net.activation(layer));
  const Tensor<double> grad = detail::first_item(net.activation_grad(layer));
  const std::size_t c = act.extent(0), h = act.extent(1), w = act.extent(2);
  Tensor<double> map({h, w});
  for (std::size_t k = 0; k < c; ++k) {
    double alpha = 0;
    for (std::size_t i = 0; i < h * w; ++i) alpha += grad[k * h * w + i];
    alpha /= static_cast<double>(h * w);
    if (alpha == 0) continue;
    for (std::size_t i = 0; i < h * w; ++i) map[i] += alpha * act[k * h * w + i];
  }
  double mx = 0;
  for (auto& v : map.data()) {
    v = std::max(0.0, v);
    mx = std::max(mx, v);
  }
  if (mx > 0)
    for (auto& v : map.data()) v /= mx;
  return {std::move(map), layer, class_index, mx};
}

/// 8-bit binary PGM plus "<path>.txt" with the scaling metadata.
inline void write_heatmap(const std::filesystem::path& path, const Heatmap& hm) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + path.string());
  os << "P5\n" << hm.width() << " " << hm.height() << "\n255\n";
  for (double v : hm.values.data()) {
    const auto byte = static_cast<unsigned char>(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
    os.put(static_cast<char>(byte));
  }
  std::ofstream meta(path.string() + ".txt");
  meta << std::setprecision(17) << "layer " << hm.layer << "\nclass " << hm.class_index << "\nheight "
       << hm.height() << "\nwidth " << hm.width() << "\nraw_max " << hm.raw_max << "\nscale max\n";
}

/// First line "metric,orientation,C" as values, then C rows of C values
/// printed with round-trip precision.
inline std::string correlation_csv(const CorrelationMatrix& m) {
  std::ostringstream os;
  os << to_string(m.metric) << "," << to_string(m.orientation) << "," << m.channels << "\n";
  char buf[32];
  for (std::size_t i = 0; i < m.channels; ++i) {
    for (std::size_t j = 0; j < m.channels; ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", m(i, j));
      os << (j ? "," : "") << buf;
    }
    os << "\n";
  }
  return os.str();
}

inline CorrelationMatrix parse_correlation_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw FormatError("empty correlation CSV");
  std::vector<std::string> head;
  {
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) head.push_back(f);
  }
  if (head.size() != 3) throw FormatError("correlation CSV header needs metric,orientation,C");
  CorrelationMatrix m;
  m.metric = parse_metric(head[0]);
  m.orientation = parse_orientation(head[1]);
  m.channels = std::stoull(head[2]);
  m.values.reserve(m.channels * m.channels);
  for (std::size_t i = 0; i < m.channels; ++i) {
    if (!std::getline(is, line)) throw FormatError("correlation CSV has fewer than C rows");
    std::stringstream ss(line);
    std::string f;
    std::size_t cols = 0;
    while (std::getline(ss, f, ',')) {
      m.values.push_back(std::stod(f));
      ++cols;
    }
    if (cols != m.channels) throw FormatError("correlation CSV row " + std::to_string(i) + " has wrong width");
  }
  return m;
}

/// Eval-mode feature map of one image at `layer` ("convK" or "vK").
template <Real T>
Tensor<T> feature_map(Network<T>& net, const Tensor<T>& image, const std::string& layer) {
  net.layer_slot(layer);
  Rng unused(0);
  net.forward(detail::as_batch(image), Mode::Eval, unused);
  const Tensor<T>& a = net.activation(layer);
  Shape s(a.shape().begin() + 1, a.shape().end());
  return a.reshaped(std::move(s));
}

template <Real T>
CorrelationMatrix dump_correlation(Network<T>& net, const Tensor<T>& image, const std::string& layer, Metric metric) {
  return correlation_matrix(feature_map(net, image, layer), metric);
}

struct DropReport {
  std::size_t channels = 0;
  std::size_t trials = 0;
  std::vector<std::vector<double>> per_image;  // drop frequency per channel
  std::vector<double> mean;
};

/// Fraction of `trials` mask draws in which each channel lands in the dropped group.
template <Real T>
DropReport drop_report(Network<T>& net, const std::vector<Tensor<T>>& images, const CdbConfig& cfg,
                       const std::string& layer, std::size_t trials, std::uint64_t seed) {
  if (trials == 0) throw InvalidConfig("drop_report needs at least one trial");
  DropReport rep;
  rep.trials = trials;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Tensor<T> f = feature_map(net, images[i], layer);
    const CorrelationMatrix m = correlation_matrix(f, cfg.metric);
    std::vector<double> freq(m.channels, 0.0);
    Rng rng = Rng::substream(seed, "drop-report", {i});
    for (std::size_t t = 0; t < trials; ++t) {
      const DropMask mask = build_drop_mask(m, select_anchor(f, cfg.guidance, rng), cfg.gamma);
      for (std::size_t c = 0; c < m.channels; ++c) freq[c] += mask.keep[c] == 0;
    }
    for (auto& v : freq) v /= static_cast<double>(trials);
    rep.channels = m.channels;
    rep.per_image.push_back(std::move(freq));
  }
  rep.mean.assign(rep.channels, 0.0);
  for (const auto& row : rep.per_image)
    for (std::size_t c = 0; c < rep.channels; ++c) rep.mean[c] += row[c] / static_cast<double>(rep.per_image.size());
  return rep;
}

inline std::string drop_report_csv(const DropReport& rep) {
  std::ostringstream os;
  os << std::setprecision(10) << "image";
  for (std::size_t c = 0; c < rep.channels; ++c) os << ",c" << c;
  os << "\n";
  for (std::size_t i = 0; i < rep.per_image.size(); ++i) {
    os << i;
    for (double v : rep.per_image[i]) os << "," << v;
    os << "\n";
  }
  os << "mean";
  for (double v : rep.mean) os << "," << v;
  os << "\n";
  return os.str();
}

}  // namespace cdb
