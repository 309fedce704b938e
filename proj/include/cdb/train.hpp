#pragma once

// Training and evaluation loops, run logs, and the ablation grid runner.

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "cdb/baselines.hpp"
#include "cdb/checkpoint.hpp"
#include "cdb/config.hpp"
#include "cdb/data.hpp"
#include "cdb/error.hpp"
#include "cdb/layers.hpp"
#include "cdb/network.hpp"
#include "cdb/optimizer.hpp"
#include "cdb/random.hpp"

namespace cdb {

struct EpochRow {
  std::size_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double train_acc = 0;
  double test_acc = 0;
  double seconds = 0;
};

struct RunRecord {
  std::vector<EpochRow> epochs;
  std::filesystem::path checkpoint;

  double final_test_acc() const { return epochs.empty() ? 0.0 : epochs.back().test_acc; }
};

inline constexpr const char* kLogHeader = "epoch,lr,train_loss,train_acc,test_acc,seconds";

inline std::string format_log(const RunRecord& r) {
  std::ostringstream os;
  os << kLogHeader << "\n" << std::setprecision(10);
  for (const auto& e : r.epochs)
    os << e.epoch << "," << e.lr << "," << e.train_loss << "," << e.train_acc << "," << e.test_acc << ","
       << e.seconds << "\n";
  return os.str();
}

/// Loads (or generates) the configured dataset, applies the train subset and
/// normalizes both splits with train statistics.
inline DatasetSplit prepare_data(const DataConfig& cfg, std::uint64_t seed, NormStats* stats_out = nullptr) {
  DatasetSplit split;
  if (cfg.dataset == "synth") {
    split = generate_synthetic(cfg.synth);
  } else {
    split = load_cifar(cfg.dir, cfg.dataset == "c10" ? CifarVariant::C10 : CifarVariant::C100);
    if (cfg.subset) split.train = subset(split.train, cfg.subset, seed);
  }
  NormStats s = normalize_split(split);
  if (stats_out) *stats_out = s;
  return split;
}

/// Copies images `idx[begin, end)` into a batch tensor of precision T.
template <Real T>
Tensor<T> gather_batch(const Dataset& ds, const std::vector<std::size_t>& idx, std::size_t begin, std::size_t end) {
  const std::size_t len = ds.image_len();
  Tensor<T> x({end - begin, ds.channels(), ds.height(), ds.width()});
  for (std::size_t i = begin; i < end; ++i) {
    const float* src = ds.images.raw() + idx[i] * len;
    T* dst = x.raw() + (i - begin) * len;
    for (std::size_t j = 0; j < len; ++j) dst[j] = static_cast<T>(src[j]);
  }
  return x;
}

inline std::size_t argmax_row(const Tensor<float>& logits, std::size_t row) {
  const std::size_t k = logits.extent(1);
  std::size_t best = 0;
  for (std::size_t j = 1; j < k; ++j)
    if (logits(row, j) > logits(row, best)) best = j;
  return best;
}

/// Top-1 accuracy in eval mode.
inline double evaluate(Network<float>& net, const Dataset& ds, std::size_t batch_size = 256) {
  if (ds.size() == 0) return 0.0;
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng unused(0);
  std::size_t correct = 0;
  for (std::size_t b = 0; b < ds.size(); b += batch_size) {
    const std::size_t e = std::min(ds.size(), b + batch_size);
    const Tensor<float> logits = net.forward(gather_batch<float>(ds, idx, b, e), Mode::Eval, unused);
    for (std::size_t i = b; i < e; ++i) correct += argmax_row(logits, i - b) == ds.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

inline NetworkSpec network_for(const TrainConfig& cfg, const Dataset& train) {
  NetworkSpec spec = cfg.net;
  spec.in_channels = train.channels();
  spec.num_classes = train.num_classes;
  return spec;
}

inline std::vector<std::pair<std::string, Tensor<float>>> norm_extras(const NormStats& s) {
  const std::size_t c = s.mean.size();
  return {{"data.norm_mean", Tensor<float>({c}, s.mean)}, {"data.norm_std", Tensor<float>({c}, s.stddev)}};
}

using EpochCallback = std::function<void(const EpochRow&)>;

/// Trains on prepared (normalized) data. Writes `<out_dir>/model.ckpt` and
/// `<out_dir>/log.csv` when an output directory is configured. `trained`, if
/// given, receives the final network.
inline RunRecord train(const TrainConfig& cfg, const DatasetSplit& data, const NormStats& stats,
                       const EpochCallback& on_epoch = {}, Network<float>* trained = nullptr) {
  cfg.validate();
  Network<float> net(network_for(cfg, data.train), cfg.reg, cfg.seed);
  Sgd<float> opt(cfg.optim.momentum, cfg.optim.weight_decay);
  const BaselineConfig* cutout = nullptr;
  if (const auto* b = std::get_if<BaselineConfig>(&cfg.reg); b && b->kind == BaselineKind::Cutout) cutout = b;

  RunRecord record;
  const Dataset& tr = data.train;
  const std::size_t n = tr.size();
  const std::size_t bs = cfg.optim.batch_size;
  std::vector<std::size_t> order(n);
  auto params = net.params();

  for (std::size_t epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = cosine_lr(epoch, cfg.optim.epochs, cfg.optim.lr0);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle = Rng::substream(cfg.seed, "shuffle", {epoch});
    shuffle.shuffle(order.begin(), order.end());

    double loss_sum = 0;
    std::size_t correct = 0, seen = 0, step = 0;
    for (std::size_t b = 0; b < n; b += bs, ++step) {
      std::size_t e = std::min(n, b + bs);
      if (e - b < 2) break;  // batch-norm needs two samples
      if (n - e < 2 && e < n) e = n;
      Tensor<float> x = gather_batch<float>(tr, order, b, e);
      const std::size_t len = tr.image_len();
      if (cfg.data.augment || cutout) {
        for (std::size_t i = b; i < e; ++i) {
          Tensor<float> img = tr.image(order[i]);
          if (cfg.data.augment) {
            Rng aug = Rng::substream(cfg.seed, "augment", {epoch, order[i]});
            img = augment(img, aug, cfg.data.flip);
          }
          if (cutout) {
            Rng cr = Rng::substream(cfg.seed, "cutout", {epoch, order[i]});
            img = cutout_apply(img, cutout->block_size, cr);
          }
          std::copy(img.data().begin(), img.data().end(), x.raw() + (i - b) * len);
        }
      }
      std::vector<std::size_t> labels(order.begin() + static_cast<std::ptrdiff_t>(b),
                                      order.begin() + static_cast<std::ptrdiff_t>(e));
      for (auto& l : labels) l = tr.labels[l];

      Rng reg_rng = Rng::substream(cfg.seed, "regularizer", {epoch, step});
      net.zero_grad();
      const Tensor<float> logits = net.forward(x, Mode::Train, reg_rng);
      const LossResult<float> loss = softmax_cross_entropy(logits, labels);
      if (!std::isfinite(loss.loss))
        throw DivergedRun("loss is " + std::to_string(loss.loss) + " at epoch " + std::to_string(epoch) +
                          ", step " + std::to_string(step));
      net.backward(loss.dlogits);
      opt.step(params, lr);

      loss_sum += loss.loss * static_cast<double>(e - b);
      for (std::size_t i = 0; i < e - b; ++i) correct += argmax_row(logits, i) == labels[i];
      seen += e - b;
      if (e == n) break;
    }
    EpochRow row;
    row.epoch = epoch + 1;
    row.lr = lr;
    row.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    row.train_acc = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    row.test_acc = evaluate(net, data.test);
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    record.epochs.push_back(row);
    if (on_epoch) on_epoch(row);
  }

  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    record.checkpoint = cfg.out_dir / "model.ckpt";
    save_checkpoint(record.checkpoint, net, norm_extras(stats));
    std::ofstream(cfg.out_dir / "log.csv") << format_log(record);
  }
  if (trained) *trained = std::move(net);
  return record;
}

inline RunRecord train(const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  NormStats stats;
  const DatasetSplit data = prepare_data(cfg.data, cfg.seed, &stats);
  return train(cfg, data, stats, on_epoch);
}

/// Rebuilds a network from a checkpoint.
inline Network<float> network_from_checkpoint(const Checkpoint& ck) {
  Network<float> net(ck.spec);
  load_into(net, ck);
  return net;
}

/// Top-1 accuracy of a saved model. The dataset must already be normalized
/// with the statistics stored in the checkpoint.
inline double evaluate(const std::filesystem::path& checkpoint, const Dataset& ds) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  if (ck.spec.in_channels != ds.channels() || ck.spec.num_classes != ds.num_classes)
    throw CheckpointError("checkpoint expects " + std::to_string(ck.spec.in_channels) + " channels and " +
                          std::to_string(ck.spec.num_classes) + " classes, dataset has " +
                          std::to_string(ds.channels()) + " and " + std::to_string(ds.num_classes));
  Network<float> net = network_from_checkpoint(ck);
  return evaluate(net, ds);
}

/// Normalization statistics saved alongside a model.
inline NormStats checkpoint_norm_stats(const Checkpoint& ck) {
  const Tensor<float> m = ck.get<float>("data.norm_mean");
  const Tensor<float> s = ck.get<float>("data.norm_std");
  return {std::vector<float>(m.data().begin(), m.data().end()), std::vector<float>(s.data().begin(), s.data().end())};
}

/// Loads the raw test split of `data` and normalizes it with the stored statistics.
inline Dataset test_split_for_checkpoint(const Checkpoint& ck, const DataConfig& data) {
  DatasetSplit split;
  if (data.dataset == "synth") {
    split = generate_synthetic(data.synth);
  } else {
    const auto variant = data.dataset == "c10" ? CifarVariant::C10 : CifarVariant::C100;
    const char* sub = variant == CifarVariant::C10 ? "cifar-10-batches-bin" : "cifar-100-binary";
    std::filesystem::path root = std::filesystem::exists(data.dir / sub) ? data.dir / sub : data.dir;
    split.test = read_cifar_file(root / (variant == CifarVariant::C10 ? "test_batch.bin" : "test.bin"), variant, 10000);
  }
  normalize(split.test, checkpoint_norm_stats(ck));
  return split.test;
}

// ---------------------------------------------------------------------------
// Ablation grid

struct GridSpec {
  TrainConfig base;
  std::vector<std::string> methods{"cdb-ma"};  // baseline, cdb-ma, cdb-bp, dropout, spatial_dropout, cutout, dropblock
  std::vector<std::vector<std::string>> insert_positions{{"v2", "v3"}};
  std::vector<Guidance> guidances{Guidance::Random};
  std::vector<std::uint64_t> seeds{0};
  double gamma_ma = kDefaultGammaMaxActivation;
  double gamma_bp = kDefaultGammaBilinear;
  double baseline_rate = 0.1;
  std::size_t baseline_block = 3;
};

inline std::string insert_label(const std::vector<std::string>& pos) {
  std::string s;
  for (std::size_t i = 0; i < pos.size(); ++i) s += (i ? "&" : "") + pos[i];
  return s;
}

inline GridSpec grid_spec_from(const KeyValues& kv) {
  GridSpec g;
  g.base = train_config_from(kv);
  if (auto m = kv.get("grid.methods")) g.methods = split(*m, ';');
  if (auto p = kv.get("grid.insert_pos")) {
    g.insert_positions.clear();
    for (const auto& cell : split(*p, ';')) g.insert_positions.push_back(split(cell, '&'));
  }
  if (auto gd = kv.get("grid.guidance")) {
    g.guidances.clear();
    for (const auto& s : split(*gd, ';')) g.guidances.push_back(parse_guidance(s));
  }
  if (auto s = kv.get("grid.seeds")) {
    g.seeds.clear();
    for (auto v : parse_size_list("grid.seeds", split(*s, ';'))) g.seeds.push_back(v);
  }
  g.gamma_ma = kv.real("grid.gamma_ma", g.gamma_ma);
  g.gamma_bp = kv.real("grid.gamma_bp", g.gamma_bp);
  g.baseline_rate = kv.real("grid.rate", g.baseline_rate);
  g.baseline_block = kv.integer("grid.block_size", g.baseline_block);
  if (g.methods.empty() || g.insert_positions.empty() || g.guidances.empty() || g.seeds.empty())
    throw ConfigError("every grid axis needs at least one value");
  return g;
}

struct GridCell {
  std::string method;
  std::string insert_pos = "-";
  std::string guidance = "-";
  RegularizerSpec reg;
};

struct CellResult {
  GridCell cell;
  std::vector<std::uint64_t> seeds;
  std::vector<double> accuracies;  // final test accuracy per seed
  std::vector<RunRecord> runs;
  std::vector<std::string> errors;

  double mean() const {
    if (accuracies.empty()) return 0.0;
    return std::accumulate(accuracies.begin(), accuracies.end(), 0.0) / static_cast<double>(accuracies.size());
  }
  double stddev() const {
    if (accuracies.size() < 2) return 0.0;
    const double m = mean();
    double s = 0;
    for (double a : accuracies) s += (a - m) * (a - m);
    return std::sqrt(s / static_cast<double>(accuracies.size() - 1));
  }
};

/// Unique cells in grid order. Axes a method ignores collapse to "-".
inline std::vector<GridCell> expand_grid(const GridSpec& g) {
  std::vector<GridCell> cells;
  auto push_unique = [&](GridCell c) {
    for (const auto& e : cells)
      if (e.method == c.method && e.insert_pos == c.insert_pos && e.guidance == c.guidance) return;
    cells.push_back(std::move(c));
  };
  for (const auto& method : g.methods) {
    for (const auto& pos : g.insert_positions) {
      for (Guidance gd : g.guidances) {
        GridCell c;
        c.method = method;
        if (method == "baseline") {
          c.reg = std::monostate{};
        } else if (method == "cdb-ma" || method == "cdb-bp") {
          CdbConfig cfg = CdbConfig::defaults(method == "cdb-ma" ? Metric::MaxActivation : Metric::BilinearPooling);
          cfg.gamma = method == "cdb-ma" ? g.gamma_ma : g.gamma_bp;
          cfg.guidance = gd;
          cfg.insert_pos = pos;
          c.insert_pos = insert_label(pos);
          c.guidance = std::string(to_string(gd));
          c.reg = cfg;
        } else {
          BaselineConfig b;
          b.kind = parse_baseline_kind(method);
          b.rate = g.baseline_rate;
          b.block_size = g.baseline_block;
          b.insert_pos = pos;
          if (b.kind != BaselineKind::Cutout) c.insert_pos = insert_label(pos);
          c.reg = b;
        }
        push_unique(std::move(c));
      }
    }
  }
  return cells;
}

using RunCallback = std::function<void(const GridCell&, std::uint64_t seed, const RunRecord*, const std::string& error)>;

/// Runs every cell for every seed on already prepared data. A failing run is
/// recorded in the cell's errors and the grid continues.
inline std::vector<CellResult> ablate(const GridSpec& g, const DatasetSplit& data, const NormStats& stats,
                                      const RunCallback& on_run = {}) {
  std::vector<CellResult> results;
  for (const GridCell& cell : expand_grid(g)) {
    CellResult r{cell, {}, {}, {}, {}};
    for (std::uint64_t seed : g.seeds) {
      TrainConfig cfg = g.base;
      cfg.reg = cell.reg;
      cfg.seed = seed;
      if (!g.base.out_dir.empty()) {
        std::string name = cell.method + "_" + cell.insert_pos + "_" + cell.guidance + "_s" + std::to_string(seed);
        for (auto& ch : name)
          if (ch == '&') ch = '+';
        cfg.out_dir = g.base.out_dir / "runs" / name;
      }
      try {
        RunRecord rec = train(cfg, data, stats);
        r.seeds.push_back(seed);
        r.accuracies.push_back(rec.final_test_acc());
        if (on_run) on_run(cell, seed, &rec, {});
        r.runs.push_back(std::move(rec));
      } catch (const Error& e) {
        r.errors.push_back("seed " + std::to_string(seed) + ": " + e.what());
        if (on_run) on_run(cell, seed, nullptr, e.what());
      }
    }
    results.push_back(std::move(r));
  }
  return results;
}

inline std::vector<CellResult> ablate(const GridSpec& g) {
  NormStats stats;
  const DatasetSplit data = prepare_data(g.base.data, g.base.seed, &stats);
  return ablate(g, data, stats);
}

/// Long form: one row per cell with per-seed accuracies, mean and stddev.
inline std::string ablation_csv(const std::vector<CellResult>& results, const std::vector<std::uint64_t>& seeds) {
  std::ostringstream os;
  os << std::setprecision(10) << "method,insert_pos,guidance";
  for (auto s : seeds) os << ",acc_seed" << s;
  os << ",mean,stddev,errors\n";
  for (const auto& r : results) {
    os << r.cell.method << "," << r.cell.insert_pos << "," << r.cell.guidance;
    for (auto s : seeds) {
      os << ",";
      for (std::size_t i = 0; i < r.seeds.size(); ++i)
        if (r.seeds[i] == s) os << r.accuracies[i];
    }
    os << "," << r.mean() << "," << r.stddev() << "," << r.errors.size() << "\n";
  }
  return os.str();
}

/// Table form: rows are methods, columns the remaining axis values in grid
/// order. Methods that ignore an axis repeat their value across it.
inline std::string ablation_pivot_csv(const GridSpec& g, const std::vector<CellResult>& results) {
  std::vector<std::string> columns;
  for (const auto& pos : g.insert_positions)
    for (Guidance gd : g.guidances) {
      std::string col;
      if (g.insert_positions.size() > 1) col = insert_label(pos);
      if (g.guidances.size() > 1) col += (col.empty() ? "" : "/") + std::string(to_string(gd));
      if (col.empty()) col = g.base.data.dataset;
      if (std::find(columns.begin(), columns.end(), col) == columns.end()) columns.push_back(col);
    }
  std::ostringstream os;
  os << std::setprecision(10) << "method";
  for (const auto& c : columns) os << "," << c;
  os << "\n";
  for (const auto& method : g.methods) {
    os << method;
    for (const auto& pos : g.insert_positions)
      for (Guidance gd : g.guidances) {
        const CellResult* hit = nullptr;
        for (const auto& r : results) {
          if (r.cell.method != method) continue;
          const bool pos_ok = r.cell.insert_pos == "-" || r.cell.insert_pos == insert_label(pos);
          const bool gd_ok = r.cell.guidance == "-" || r.cell.guidance == to_string(gd);
          if (pos_ok && gd_ok) hit = &r;
        }
        os << ",";
        if (hit && !hit->accuracies.empty()) os << hit->mean();
      }
    os << "\n";
  }
  return os.str();
}

}  // namespace cdb
