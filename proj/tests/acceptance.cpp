// Acceptance runner: one PASS/FAIL line per criterion.
//   acceptance            run all criteria
//   acceptance --only N   run criterion N (exit status reflects it)

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cdb/cdb.hpp"
#include "oracles.hpp"

using namespace cdb;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

/// Desk-scale training setup shared by the learning criteria.
TrainConfig desk_config() {
  TrainConfig c;
  c.net.widths = {16, 32, 64, 64, 64};
  c.optim.epochs = 60;
  c.optim.batch_size = 32;
  c.optim.lr0 = 0.1;
  return c;
}

CdbConfig cdb_ma_v2v3(Guidance g = Guidance::Random) {
  CdbConfig c = CdbConfig::defaults(Metric::MaxActivation);
  c.insert_pos = {"v2", "v3"};
  c.guidance = g;
  return c;
}

// ---------------------------------------------------------------------------

Outcome mask_cardinality() {
  Stopwatch sw;
  std::size_t cases = 0, bad = 0;
  for (std::size_t c : {8, 16, 64, 256, 512})
    for (double gamma : {0.05, 0.2, 0.5}) {
      const auto want = static_cast<std::size_t>(std::max(1.0, std::floor(gamma * double(c) + 0.5)));
      const auto f = oracle::random_tensor<float>({c, 4, 4}, c * 7 + std::size_t(gamma * 100), 0.0, 1.0);
      for (Metric metric : {Metric::MaxActivation, Metric::BilinearPooling}) {
        const auto m = correlation_matrix(f, metric);
        for (std::size_t a = 0; a < c; ++a) {
          const DropMask mask = build_drop_mask(m, a, gamma);
          ++cases;
          bad += mask.dropped() != want || mask.keep[a] != 0 || mask.anchor != a;
        }
      }
      // through the layer: zeroed channels per element match the count
      CdbConfig cfg{gamma, Metric::MaxActivation, Guidance::Random, {"v1"}};
      Rng rng(c);
      const auto x = oracle::random_tensor<float>({2, c, 4, 4}, c + 1, 0.1, 1.0);
      const auto out = cdb_forward(x, cfg, Mode::Train, rng);
      for (std::size_t n = 0; n < 2; ++n) {
        std::size_t zeros = 0;
        for (std::size_t ch = 0; ch < c; ++ch) zeros += out.output(n, ch, 0, 0) == 0.f;
        ++cases;
        bad += zeros != want || out.masks[n].keep[out.masks[n].anchor] != 0;
      }
    }
  const double t = sw.seconds();
  return {bad == 0 && t < 1.0, fmt("%zu/%zu masks correct, %.3fs (limit 1s)", cases - bad, cases, t)};
}

Outcome metric_oracles() {
  Stopwatch sw;
  Rng rng(2024);
  double worst = 0;
  std::size_t invariant_failures = 0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t c = 2 + rng.uniform_index(31), h = 1 + rng.uniform_index(12), w = 1 + rng.uniform_index(12);
    auto f = oracle::random_tensor<double>({c, h, w}, 500 + i);
    if (i % 2) {
      // rectified maps: ties in the peak search and all-zero channels
      for (auto& v : f.data()) v = std::max(v, 0.0);
      for (std::size_t p = 0; p < h * w; ++p) f[p] = 0;
    }
    const auto ma = correlation_matrix(f, Metric::MaxActivation);
    const auto bp = correlation_matrix(f, Metric::BilinearPooling);
    const auto ma_o = oracle::max_activation(f);
    const auto bp_o = oracle::bilinear(f);
    for (std::size_t k = 0; k < c * c; ++k) {
      worst = std::max(worst, std::abs(ma.values[k] - ma_o[k]));
      worst = std::max(worst, std::abs(bp.values[k] - bp_o[k]));
    }
    for (std::size_t a = 0; a < c; ++a) {
      double norm = 0;
      for (std::size_t p = 0; p < h * w; ++p) norm += f[a * h * w + p] * f[a * h * w + p];
      invariant_failures += ma(a, a) != 0.0;
      invariant_failures += std::abs(bp(a, a) - (norm > 0 ? 1.0 : 0.0)) > 1e-12;
      for (std::size_t b = 0; b < c; ++b) {
        invariant_failures += ma(a, b) != ma(b, a) || ma(a, b) < 0;
        invariant_failures += std::abs(bp(a, b) - bp(b, a)) > 1e-12 || std::abs(bp(a, b)) > 1 + 1e-12;
      }
    }
  }
  const double t = sw.seconds();
  return {worst <= 1e-6 && invariant_failures == 0 && t < 10.0,
          fmt("max oracle deviation %.2e (limit 1e-6), %zu invariant violations, %.2fs (limit 10s)", worst,
              invariant_failures, t)};
}

Outcome eval_identity() {
  Stopwatch sw;
  Rng shapes(11);
  std::size_t checks = 0, bad = 0;
  const std::vector<RegularizerSpec> regs = [] {
    std::vector<RegularizerSpec> r;
    for (Metric m : {Metric::MaxActivation, Metric::BilinearPooling}) {
      CdbConfig c = CdbConfig::defaults(m);
      c.insert_pos = {"v1", "v2"};
      r.emplace_back(c);
    }
    for (BaselineKind k :
         {BaselineKind::Dropout, BaselineKind::SpatialDropout, BaselineKind::Cutout, BaselineKind::DropBlock}) {
      BaselineConfig b;
      b.kind = k;
      b.rate = 0.3;
      b.block_size = 3;
      b.insert_pos = {"v1", "v2"};
      r.emplace_back(b);
    }
    return r;
  }();
  for (int i = 0; i < 50; ++i) {
    const std::size_t n = 1 + shapes.uniform_index(4), c = 1 + shapes.uniform_index(16);
    const std::size_t h = 3 + shapes.uniform_index(8), w = 3 + shapes.uniform_index(8);
    const auto x = oracle::random_tensor<float>({n, c, h, w}, 900 + i);
    Rng rng(i);
    for (const auto& reg : regs) {
      FeatureRegularizer<float> op = std::holds_alternative<CdbConfig>(reg)
                                         ? FeatureRegularizer<float>(std::get<CdbConfig>(reg))
                                         : FeatureRegularizer<float>(std::get<BaselineConfig>(reg));
      ++checks;
      bad += !(op.forward(x, Mode::Eval, rng) == x);
    }
    ++checks;
    bad += !(cdb_forward(x, CdbConfig{}, Mode::Eval, rng).output == x);
    ++checks;
    bad += !(dropout_forward(x, 0.5, Mode::Eval, rng).output == x);
    ++checks;
    bad += !(spatial_dropout_forward(x, 0.5, Mode::Eval, rng).output == x);
    ++checks;
    bad += !(dropblock_forward(x, 0.2, 3, Mode::Eval, rng).output == x);

    // whole network: regularized and plain models give identical logits
    const auto img = oracle::random_tensor<float>({2, 3, 8, 8}, 1300 + i);
    Network<float> plain(NetworkSpec{3, {4, 8}, 5}, {}, i);
    const auto want = plain.forward(img, Mode::Eval, rng);
    for (const auto& reg : regs) {
      Network<float> net(NetworkSpec{3, {4, 8}, 5}, reg, i);
      ++checks;
      bad += !(net.forward(img, Mode::Eval, rng) == want);
    }
  }
  const double t = sw.seconds();
  return {bad == 0 && t < 1.0, fmt("%zu/%zu bit-exact identities, %.3fs (limit 1s)", checks - bad, checks, t)};
}

// Gradient suite -------------------------------------------------------------

struct GradCheck {
  std::string name;
  double error;
};

/// Input and parameter gradients of a module against central differences,
/// with loss probe(forward(x), w).
template <typename Module, typename Fwd>
void check_module(std::vector<GradCheck>& out, const std::string& name, Module& m, Tensor<double> x, Fwd fwd,
                  bool has_params) {
  const auto y = fwd(x);
  const auto w = oracle::random_tensor<double>(y.shape(), 77);
  std::vector<Param<double>> params;
  if constexpr (requires { m.params(std::string(), params); })
    if (has_params) m.params(name, params);
  for (auto& p : params) p.grad->fill(0);
  fwd(x);
  const auto dx = m.backward(w);
  auto loss = [&] { return oracle::probe(fwd(x), w); };
  out.push_back({name + " input", oracle::relative_error(dx, oracle::numeric_grad(x, loss))});
  for (auto& p : params) {
    const Tensor<double> analytic = *p.grad;
    out.push_back({p.name, oracle::relative_error(analytic, oracle::numeric_grad(*p.value, loss))});
  }
}

Outcome gradient_suite() {
  Stopwatch sw;
  std::vector<GradCheck> layer;
  {
    Conv2d<double> conv(2, 3);
    Rng rng(1);
    conv.init(rng);
    conv.bias() = oracle::random_tensor<double>({3}, 2);
    check_module(layer, "conv", conv, oracle::random_tensor<double>({2, 2, 5, 4}, 3),
                 [&](const Tensor<double>& x) { return conv.forward(x); }, true);
  }
  {
    BatchNorm2d<double> bn(3);
    bn.scale() = oracle::random_tensor<double>({3}, 4, 0.5, 1.5);
    bn.shift() = oracle::random_tensor<double>({3}, 5);
    check_module(layer, "bn_train", bn, oracle::random_tensor<double>({3, 3, 3, 3}, 6),
                 [&](const Tensor<double>& x) { return bn.forward(x, Mode::Train); }, true);
    bn.running_var() = oracle::random_tensor<double>({3}, 7, 0.5, 2.0);
    check_module(layer, "bn_eval", bn, oracle::random_tensor<double>({2, 3, 3, 3}, 8),
                 [&](const Tensor<double>& x) { return bn.forward(x, Mode::Eval); }, false);
  }
  {
    ReLU<double> relu;
    check_module(layer, "relu", relu, oracle::random_tensor<double>({2, 3, 4, 4}, 9),
                 [&](const Tensor<double>& x) { return relu.forward(x); }, false);
    MaxPool2x2<double> pool;
    check_module(layer, "maxpool", pool, oracle::random_tensor<double>({2, 2, 4, 6}, 10),
                 [&](const Tensor<double>& x) { return pool.forward(x); }, false);
    GlobalAvgPool<double> gap;
    check_module(layer, "gap", gap, oracle::random_tensor<double>({2, 3, 3, 4}, 11),
                 [&](const Tensor<double>& x) { return gap.forward(x); }, false);
  }
  {
    Linear<double> fc(5, 3);
    Rng rng(2);
    fc.init(rng);
    fc.bias() = oracle::random_tensor<double>({3}, 12);
    check_module(layer, "linear", fc, oracle::random_tensor<double>({4, 5}, 13),
                 [&](const Tensor<double>& x) { return fc.forward(x); }, true);
  }
  {
    auto logits = oracle::random_tensor<double>({3, 6}, 14, -3, 3);
    const std::vector<std::size_t> labels{1, 5, 0};
    const auto r = softmax_cross_entropy(logits, labels);
    layer.push_back({"cross_entropy", oracle::relative_error(r.dlogits, oracle::numeric_grad(logits, [&] {
                                                               return softmax_cross_entropy(logits, labels).loss;
                                                             }))});
  }
  for (Metric metric : {Metric::MaxActivation, Metric::BilinearPooling}) {
    ChannelDropBlock<double> cdb(CdbConfig{0.25, metric, Guidance::Random, {"v1"}});
    auto x = oracle::random_tensor<double>({2, 8, 3, 3}, 15);
    Rng rng(3);
    cdb.forward(x, Mode::Train, rng);
    cdb.freeze(cdb.last_masks());
    check_module(layer, std::string("cdb_frozen_") + std::string(to_string(metric)), cdb, x,
                 [&](const Tensor<double>& in) { return cdb.forward(in, Mode::Train, rng); }, false);
  }
  {
    auto x = oracle::random_tensor<double>({2, 3, 5, 5}, 16);
    const auto w = oracle::random_tensor<double>(x.shape(), 17);
    Rng rng(4);
    const std::vector<std::pair<std::string, MaskedOutput<double>>> frozen{
        {"dropout_frozen", dropout_forward(x, 0.3, Mode::Train, rng)},
        {"spatial_dropout_frozen", spatial_dropout_forward(x, 0.3, Mode::Train, rng)},
        {"dropblock_frozen", dropblock_forward(x, 0.2, 3, Mode::Train, rng)}};
    for (const auto& [name, r] : frozen) {
      auto loss = [&] {
        Tensor<double> y(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * r.mask[i] * r.scale;
        return oracle::probe(y, w);
      };
      layer.push_back({name, oracle::relative_error(masked_backward(w, r.mask, r.scale), oracle::numeric_grad(x, loss))});
    }
  }

  // two-block network end to end, CDB frozen at both insert points
  std::vector<GradCheck> net_checks;
  {
    Network<double> net(NetworkSpec{3, {4, 8}, 3}, CdbConfig{0.25, Metric::MaxActivation, Guidance::Random, {"v1", "v2"}},
                        7);
    net.set_need_input_grad(true);
    for (std::size_t b = 0; b < 2; ++b) {
      net.bn(b).scale() = oracle::random_tensor<double>(net.bn(b).scale().shape(), 30 + b, 0.5, 1.5);
      net.bn(b).shift() = oracle::random_tensor<double>(net.bn(b).shift().shape(), 40 + b);
    }
    auto x = oracle::random_tensor<double>({2, 3, 8, 8}, 8);
    const std::vector<std::size_t> labels{0, 2};
    Rng rng(3);
    net.forward(x, Mode::Train, rng);
    for (const char* pos : {"v1", "v2"}) {
      auto* blk = net.channel_drop_block(pos);
      blk->freeze(blk->last_masks());
    }
    auto loss = [&] { return softmax_cross_entropy(net.forward(x, Mode::Train, rng), labels).loss; };
    net.zero_grad();
    const auto r = softmax_cross_entropy(net.forward(x, Mode::Train, rng), labels);
    const auto dx = net.backward(r.dlogits);
    net_checks.push_back({"net input", oracle::relative_error(dx, oracle::numeric_grad(x, loss))});
    for (auto& p : net.params()) {
      const Tensor<double> analytic = *p.grad;
      // a conv bias feeding batch-norm has an exact zero gradient; the floor
      // judges it against the loss scale instead of difference noise
      net_checks.push_back({"net " + p.name, oracle::relative_error(analytic, oracle::numeric_grad(*p.value, loss), 1e-5)});
    }
  }

  auto worst = [](const std::vector<GradCheck>& v) {
    GradCheck w{"-", 0};
    for (const auto& c : v)
      if (!(c.error <= w.error)) w = c;
    return w;
  };
  const GradCheck wl = worst(layer), wn = worst(net_checks);
  const double t = sw.seconds();
  return {wl.error < 1e-6 && wn.error < 1e-4 && t < 60.0,
          fmt("per-layer worst %.2e at %s (limit 1e-6, %zu checks); micro-net worst %.2e at %s (limit 1e-4, %zu "
              "checks); %.1fs (limit 60s)",
              wl.error, wl.name.c_str(), layer.size(), wn.error, wn.name.c_str(), net_checks.size(), t)};
}

Outcome drop_frequency() {
  Stopwatch sw;
  const int draws = 100000;
  std::size_t compared = 0, outside = 0;
  double worst_z = 0;
  for (int map = 0; map < 10; ++map) {
    const std::size_t c = 8 + 2 * std::size_t(map % 5);
    const Metric metric = map % 2 ? Metric::BilinearPooling : Metric::MaxActivation;
    const double gamma = 0.25;
    auto f = oracle::random_tensor<double>({c, 6, 6}, 3000 + map, 0.0, 1.0);
    const auto m = correlation_matrix(f, metric);
    const std::size_t k = static_cast<std::size_t>(std::max(1.0, std::floor(gamma * double(c) + 0.5)));
    const auto want = oracle::anchor_enumeration(metric == Metric::MaxActivation ? oracle::max_activation(f)
                                                                                  : oracle::bilinear(f),
                                                 c, k, metric == Metric::MaxActivation);
    Rng rng(Rng::substream(5, "acceptance-frequency", {std::uint64_t(map)}));
    std::vector<double> hits(c, 0);
    for (int d = 0; d < draws; ++d) {
      const DropMask mask = build_drop_mask(m, select_anchor(f, Guidance::Random, rng), gamma);
      for (std::size_t ch = 0; ch < c; ++ch) hits[ch] += mask.keep[ch] == 0;
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double p = want[ch], got = hits[ch] / draws;
      const double sigma = std::sqrt(p * (1 - p) / draws);
      const double z = sigma > 0 ? std::abs(got - p) / sigma : (got == p ? 0.0 : std::numeric_limits<double>::infinity());
      worst_z = std::max(worst_z, z);
      ++compared;
      outside += z > 3.0;
    }
  }
  const double t = sw.seconds();
  return {outside == 0 && t < 30.0, fmt("%zu/%zu channel frequencies within 3 sigma (worst %.2f sigma), %.1fs (limit 30s)",
                                        compared - outside, compared, worst_z, t)};
}

Outcome constants() {
  std::vector<std::string> failed;
  auto expect = [&](bool ok, const char* what) {
    if (!ok) failed.push_back(what);
  };
  for (double g : {0.05, 0.2, 0.25, 0.5})
    expect(normalization_scale<double>(g) == 1.0 / (1.0 - g), "scale is 1/(1-gamma)");
  {
    Tensor<double> x({1, 20, 2, 2}, 3.0);
    Rng rng(1);
    const auto out = cdb_forward(x, CdbConfig{}, Mode::Train, rng);
    for (std::size_t c = 0; c < 20; ++c)
      if (out.masks[0].keep[c]) expect(out.output(0, c, 1, 1) == 3.0 * (1.0 / (1.0 - 0.2)), "kept channels scaled");
  }
  expect(default_gamma(Metric::MaxActivation) == 0.20, "max-activation gamma 0.20");
  expect(default_gamma(Metric::BilinearPooling) == 0.05, "bilinear gamma 0.05");
  expect(CdbConfig{}.gamma == 0.20 && CdbConfig{}.metric == Metric::MaxActivation, "CdbConfig default");
  expect(CdbConfig::defaults(Metric::BilinearPooling).gamma == 0.05, "bilinear config default");
  const OptimConfig o;
  expect(o.momentum == 0.9, "momentum 0.9");
  expect(o.weight_decay == 5e-4, "weight decay 5e-4");
  expect(o.lr0 == 0.1, "initial rate 0.1");
  expect(cosine_lr(0, 100, o.lr0) == o.lr0, "cosine starts at lr0");
  expect(cosine_lr(100, 100, o.lr0) == 0.0, "cosine ends at zero");
  expect(std::abs(cosine_lr(50, 100, o.lr0) - 0.05) < 1e-15, "cosine midpoint");
  const TrainConfig parsed = train_config_from(KeyValues::parse(""));
  expect(parsed.optim.momentum == 0.9 && parsed.optim.weight_decay == 5e-4, "config file defaults");
  std::string detail = "normalization 1/(1-gamma), gamma 0.20/0.05, momentum 0.9, weight decay 5e-4, cosine to 0";
  if (!failed.empty()) {
    detail = "violated:";
    for (const auto& f : failed) detail += " [" + f + "]";
  }
  return {failed.empty(), detail};
}

// Learning criteria -----------------------------------------------------------

struct ArmResult {
  std::vector<double> acc;
  double mean() const {
    double s = 0;
    for (double a : acc) s += a;
    return acc.empty() ? 0 : s / double(acc.size());
  }
};

std::string list(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : " ") + fmt("%.3f", x);
  return s;
}

Outcome directional(const fs::path& cifar_dir) {
  Stopwatch sw;
  std::vector<std::string> notes;
  bool cifar_ok = false;
  if (!fs::exists(cifar_dir / "data_batch_1.bin")) {
    notes.push_back("CIFAR-10 half not run: no binary batches under " + cifar_dir.string());
  } else {
    TrainConfig base = desk_config();
    base.data.dataset = "c10";
    base.data.dir = cifar_dir;
    base.data.subset = 5000;
    base.optim.epochs = 20;
    base.optim.batch_size = 128;
    NormStats stats;
    const DatasetSplit data = prepare_data(base.data, 0, &stats);
    ArmResult plain, cdb;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      TrainConfig c = base;
      c.seed = seed;
      plain.acc.push_back(train(c, data, stats).final_test_acc());
      c.reg = cdb_ma_v2v3();
      cdb.acc.push_back(train(c, data, stats).final_test_acc());
    }
    cifar_ok = cdb.mean() >= plain.mean() - 0.005;
    notes.push_back(fmt("CIFAR-10 subset: cdb-ma %.4f vs baseline %.4f (need >= baseline - 0.005)", cdb.mean(),
                        plain.mean()));
  }

  TrainConfig base = desk_config();
  NormStats stats;
  const DatasetSplit data = prepare_data(base.data, 0, &stats);
  ArmResult plain, cdb;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    TrainConfig c = base;
    c.seed = seed;
    plain.acc.push_back(train(c, data, stats).final_test_acc());
    c.reg = cdb_ma_v2v3();
    cdb.acc.push_back(train(c, data, stats).final_test_acc());
  }
  const bool synth_ok = cdb.mean() >= plain.mean();
  notes.push_back(fmt("synthetic: cdb-ma mean %.4f [%s] vs baseline mean %.4f [%s]", cdb.mean(),
                      list(cdb.acc).c_str(), plain.mean(), list(plain.acc).c_str()));
  const double t = sw.seconds();
  notes.push_back(fmt("%.0fs (limit 3600s)", t));
  std::string detail;
  for (const auto& n : notes) detail += (detail.empty() ? "" : "; ") + n;
  return {cifar_ok && synth_ok && t <= 3600.0, detail};
}

/// Checks a pivot CSV against the expected header and row labels, with every
/// cell filled.
bool pivot_has_shape(const std::string& csv, const std::string& header, const std::vector<std::string>& rows,
                     std::string& why) {
  std::istringstream is(csv);
  std::string line;
  std::getline(is, line);
  if (line != header) {
    why = "header '" + line + "' != '" + header + "'";
    return false;
  }
  const std::size_t cols = std::count(header.begin(), header.end(), ',');
  for (const auto& r : rows) {
    if (!std::getline(is, line) || line.substr(0, line.find(',')) != r) {
      why = "expected row " + r + ", got '" + line + "'";
      return false;
    }
    if (std::size_t(std::count(line.begin(), line.end(), ',')) != cols || line.find(",,") != std::string::npos ||
        line.back() == ',') {
      why = "row '" + line + "' has missing cells";
      return false;
    }
  }
  if (std::getline(is, line) && !line.empty()) {
    why = "unexpected extra row '" + line + "'";
    return false;
  }
  return true;
}

Outcome ablation_structure() {
  Stopwatch sw;
  // structure: small and short runs, the table shapes are what matters here
  GridSpec g;
  g.base.net.widths = {8, 16, 16, 16, 16};
  g.base.optim.epochs = 2;
  g.base.data.synth.train_per_class = 8;
  g.base.data.synth.test_per_class = 4;
  g.base.optim.batch_size = 16;
  NormStats stats;
  const DatasetSplit data = prepare_data(g.base.data, 0, &stats);

  struct Table {
    const char* name;
    std::vector<std::string> methods;
    std::vector<std::vector<std::string>> positions;
    std::vector<Guidance> guidances;
    std::string header;
  };
  const std::vector<Table> tables{
      {"insert position",
       {"cdb-ma", "cdb-bp"},
       {{"v1"}, {"v2"}, {"v3"}, {"v4"}, {"v5"}, {"v2", "v3"}},
       {Guidance::Random},
       "method,v1,v2,v3,v4,v5,v2&v3"},
      {"guidance",
       {"baseline", "cdb-ma", "cdb-bp"},
       {{"v2", "v3"}},
       {Guidance::Random, Guidance::Attention},
       "method,random,attention"},
      {"regularizers",
       {"baseline", "dropout", "spatial_dropout", "cutout", "dropblock", "cdb-ma", "cdb-bp"},
       {{"v2", "v3"}},
       {Guidance::Random},
       "method,synth"},
  };
  std::vector<std::string> problems;
  for (const auto& tb : tables) {
    GridSpec t = g;
    t.methods = tb.methods;
    t.insert_positions = tb.positions;
    t.guidances = tb.guidances;
    const auto results = ablate(t, data, stats);
    for (const auto& r : results)
      for (const auto& e : r.errors) problems.push_back(std::string(tb.name) + ": " + e);
    std::string why;
    if (!pivot_has_shape(ablation_pivot_csv(t, results), tb.header, tb.methods, why))
      problems.push_back(std::string(tb.name) + ": " + why);
    const std::string long_form = ablation_csv(results, t.seeds);
    if (long_form.rfind("method,insert_pos,guidance,acc_seed0,mean,stddev,errors\n", 0) != 0)
      problems.push_back(std::string(tb.name) + ": long-form header");
  }

  // direction: random vs attention guidance at the desk setup, paired seeds
  GridSpec d;
  d.base = desk_config();
  d.methods = {"cdb-ma"};
  d.guidances = {Guidance::Random, Guidance::Attention};
  d.seeds = {0, 1, 2, 3, 4};
  NormStats dstats;
  const DatasetSplit ddata = prepare_data(d.base.data, 0, &dstats);
  const auto res = ablate(d, ddata, dstats);
  std::size_t wins = 0;
  std::vector<double> rnd, att;
  if (res.size() == 2 && res[0].accuracies.size() == 5 && res[1].accuracies.size() == 5) {
    rnd = res[0].accuracies;
    att = res[1].accuracies;
    for (std::size_t s = 0; s < 5; ++s) wins += rnd[s] >= att[s];
  } else {
    problems.push_back("direction grid did not complete");
  }
  const double t = sw.seconds();
  std::string detail = problems.empty() ? "insert-position, guidance and regularizer table shapes reproduced" : "problems:";
  for (const auto& p : problems) detail += " [" + p + "]";
  detail += fmt("; random >= attention in %zu/5 seeds (need 3): random [%s] attention [%s]; %.0fs", wins,
                list(rnd).c_str(), list(att).c_str(), t);
  return {problems.empty() && wins >= 3, detail};
}

Outcome localization() {
  Stopwatch sw;
  TrainConfig cfg = desk_config();
  cfg.reg = cdb_ma_v2v3();
  NormStats stats;
  const DatasetSplit data = prepare_data(cfg.data, 0, &stats);
  if (data.test.boxes.size() != data.test.size()) return {false, "test split carries no glyph boxes"};
  Network<float> net(NetworkSpec{});
  train(cfg, data, stats, {}, &net);
  // block 3 gives an 8x8 map with 4-pixel cells, fine enough to resolve a
  // 5-pixel glyph; the last block is 2x2 at this input size
  const std::string layer = "conv3";
  std::size_t correct = 0, inside = 0;
  Rng unused(0);
  for (std::size_t i = 0; i < data.test.size(); ++i) {
    const Tensor<float> img = data.test.image(i);
    const Tensor<float> logits = net.forward(detail::as_batch(img), Mode::Eval, unused);
    if (argmax_row(logits, 0) != data.test.labels[i]) continue;
    ++correct;
    const Heatmap hm = grad_cam(net, img, data.test.labels[i], layer);
    const Position p = hm.peak();
    const double stride = double(data.test.height()) / double(hm.height());
    const double y = double(p.row) * stride + (stride - 1) / 2, x = double(p.col) * stride + (stride - 1) / 2;
    for (const GlyphBox& b : data.test.boxes[i])
      if (b.contains(y, x)) {
        ++inside;
        break;
      }
  }
  const double frac = correct ? double(inside) / double(correct) : 0.0;
  return {correct > 0 && frac >= 0.70,
          fmt("peak inside a glyph box for %zu/%zu correctly classified test images (%.1f%%, need 70%%) at %s; %.0fs",
              inside, correct, 100 * frac, layer.c_str(), sw.seconds())};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  int only = 0;
  std::string cifar_dir = "data/cifar-10-batches-bin";
  app.add_option("--only", only, "run a single criterion (1-9)")->check(CLI::Range(1, 9));
  app.add_option("--cifar-dir", cifar_dir, "CIFAR-10 binary batches for the directional check");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"mask cardinality", mask_cardinality},
      {"metric oracle equivalence", metric_oracles},
      {"eval identity", eval_identity},
      {"gradient suite", gradient_suite},
      {"drop-frequency oracle", drop_frequency},
      {"constants and defaults", constants},
      {"directional accuracy check", [&] { return directional(cifar_dir); }},
      {"ablation structure", ablation_structure},
      {"grad-cam localization", localization},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (only && only != int(i + 1)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("criterion %zu %s: %s  %s\n", i + 1, criteria[i].first, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
    failures += !o.pass;
  }
  return failures ? 1 : 0;
}
