// cdb-lab: train, evaluate, ablate and inspect from the command line.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "cdb/cdb.hpp"

namespace fs = std::filesystem;
using namespace cdb;

namespace {

struct DataFlags {
  std::string dataset = "synth";
  std::string data_dir;
  std::string synth_spec;

  DataConfig resolve() const {
    DataConfig d;
    d.dataset = dataset;
    d.dir = data_dir;
    if (!synth_spec.empty()) d.synth = synthetic_spec_from(KeyValues::load(synth_spec));
    return d;
  }
};

void add_data_flags(CLI::App* cmd, DataFlags& f) {
  cmd->add_option("--dataset", f.dataset, "c10, c100 or synth")->check(CLI::IsMember({"c10", "c100", "synth"}));
  cmd->add_option("--data-dir", f.data_dir, "directory holding the CIFAR binary files");
  cmd->add_option("--synth-spec", f.synth_spec, "key-value file with synth.* keys");
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path.string());
  os << text;
}

void print_row(const EpochRow& r) {
  std::printf("epoch %3zu  lr %.5f  loss %.4f  train %.4f  test %.4f  (%.1fs)\n", r.epoch, r.lr, r.train_loss,
              r.train_acc, r.test_acc, r.seconds);
  std::fflush(stdout);
}

int run_train(const std::string& config, std::optional<std::uint64_t> seed, const std::string& out) {
  TrainConfig cfg = train_config_from(KeyValues::load(config));
  if (seed) cfg.seed = *seed;
  if (!out.empty()) cfg.out_dir = out;
  if (cfg.out_dir.empty()) cfg.out_dir = "runs/seed" + std::to_string(cfg.seed);
  const RunRecord rec = train(cfg, print_row);
  std::printf("final test accuracy %.4f\ncheckpoint %s\n", rec.final_test_acc(), rec.checkpoint.string().c_str());
  return 0;
}

int run_eval(const std::string& checkpoint, const DataFlags& flags) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Dataset test = test_split_for_checkpoint(ck, flags.resolve());
  std::printf("accuracy %.6f on %zu images\n", evaluate(checkpoint, test), test.size());
  return 0;
}

int run_ablate(const std::string& grid_file, const std::string& out) {
  GridSpec g = grid_spec_from(KeyValues::load(grid_file));
  if (!out.empty()) g.base.out_dir = out;
  if (g.base.out_dir.empty()) g.base.out_dir = "ablation";
  NormStats stats;
  const DatasetSplit data = prepare_data(g.base.data, g.base.seed, &stats);
  const auto results = ablate(g, data, stats, [](const GridCell& c, std::uint64_t seed, const RunRecord* r,
                                                 const std::string& err) {
    if (r)
      std::printf("%-16s %-8s %-10s seed %llu  acc %.4f\n", c.method.c_str(), c.insert_pos.c_str(),
                  c.guidance.c_str(), static_cast<unsigned long long>(seed), r->final_test_acc());
    else
      std::printf("%-16s %-8s %-10s seed %llu  FAILED: %s\n", c.method.c_str(), c.insert_pos.c_str(),
                  c.guidance.c_str(), static_cast<unsigned long long>(seed), err.c_str());
    std::fflush(stdout);
  });
  write_text(g.base.out_dir / "ablation.csv", ablation_csv(results, g.seeds));
  write_text(g.base.out_dir / "pivot.csv", ablation_pivot_csv(g, results));
  std::printf("wrote %s and %s\n", (g.base.out_dir / "ablation.csv").string().c_str(),
              (g.base.out_dir / "pivot.csv").string().c_str());
  for (const auto& r : results)
    if (!r.errors.empty()) return 3;
  return 0;
}

struct InspectFlags {
  std::string checkpoint;
  DataFlags data;
  std::size_t image_index = 0;
  std::size_t images = 16;
  std::string layer;
  std::string metric = "ma";
  std::string guidance = "random";
  double gamma = 0;
  std::optional<std::size_t> class_index;
  std::size_t trials = 1000;
  std::uint64_t seed = 0;
  std::string out;
};

struct Loaded {
  Network<float> net;
  Dataset test;
};

Loaded load_for_inspect(const InspectFlags& f) {
  const Checkpoint ck = load_checkpoint(f.checkpoint);
  Loaded l{network_from_checkpoint(ck), test_split_for_checkpoint(ck, f.data.resolve())};
  return l;
}

std::string default_layer(const Network<float>& net) { return "conv" + std::to_string(net.spec().blocks()); }

int run_inspect_cam(const InspectFlags& f) {
  Loaded l = load_for_inspect(f);
  if (f.image_index >= l.test.size()) throw IndexError("image index out of range");
  const std::string layer = f.layer.empty() ? default_layer(l.net) : f.layer;
  const std::size_t cls = f.class_index.value_or(l.test.labels[f.image_index]);
  const Heatmap hm = grad_cam(l.net, l.test.image(f.image_index), cls, layer);
  const fs::path out = f.out.empty() ? "cam.pgm" : f.out;
  write_heatmap(out, hm);
  const Position p = hm.peak();
  std::printf("heatmap %zux%zu at %s for class %zu, peak (%zu,%zu), written to %s\n", hm.height(), hm.width(),
              layer.c_str(), cls, p.row, p.col, out.string().c_str());
  return 0;
}

int run_inspect_corr(const InspectFlags& f) {
  Loaded l = load_for_inspect(f);
  if (f.image_index >= l.test.size()) throw IndexError("image index out of range");
  const std::string layer = f.layer.empty() ? "v2" : f.layer;
  const auto m = dump_correlation(l.net, l.test.image(f.image_index), layer, parse_metric(f.metric));
  const std::string csv = correlation_csv(m);
  if (f.out.empty())
    std::cout << csv;
  else
    write_text(f.out, csv);
  return 0;
}

int run_inspect_drops(const InspectFlags& f) {
  Loaded l = load_for_inspect(f);
  CdbConfig cfg = CdbConfig::defaults(parse_metric(f.metric));
  if (f.gamma > 0) cfg.gamma = f.gamma;
  cfg.guidance = parse_guidance(f.guidance);
  const std::string layer = f.layer.empty() ? "v2" : f.layer;
  std::vector<Tensor<float>> imgs;
  for (std::size_t i = 0; i < std::min(f.images, l.test.size()); ++i) imgs.push_back(l.test.image(i));
  const auto rep = drop_report(l.net, imgs, cfg, layer, f.trials, f.seed);
  const std::string csv = drop_report_csv(rep);
  if (f.out.empty())
    std::cout << csv;
  else
    write_text(f.out, csv);
  return 0;
}

void add_inspect_flags(CLI::App* cmd, InspectFlags& f) {
  cmd->add_option("--checkpoint", f.checkpoint, "model checkpoint")->required();
  add_data_flags(cmd, f.data);
  cmd->add_option("--image-index", f.image_index, "test image index");
  cmd->add_option("--layer", f.layer, "convK (block output) or vK (after pooling)");
  cmd->add_option("--out", f.out, "output file");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Channel DropBlock laboratory"};
  app.require_subcommand(1);

  std::string config, grid, checkpoint, out;
  std::optional<std::uint64_t> seed;
  DataFlags eval_data;
  InspectFlags cam, corr, drops;

  auto* train_cmd = app.add_subcommand("train", "train one model from a config file");
  train_cmd->add_option("--config", config, "key-value config file")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--seed", seed, "override the config seed");
  train_cmd->add_option("--out", out, "output directory (overrides out_dir)");

  auto* eval_cmd = app.add_subcommand("eval", "top-1 accuracy of a checkpoint on a test split");
  eval_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  add_data_flags(eval_cmd, eval_data);

  auto* ablate_cmd = app.add_subcommand("ablate", "run a grid of configurations");
  ablate_cmd->add_option("--grid", grid, "grid file")->required()->check(CLI::ExistingFile);
  ablate_cmd->add_option("--out", out, "output directory (overrides out_dir)");

  auto* inspect_cmd = app.add_subcommand("inspect", "look inside a trained model");
  inspect_cmd->require_subcommand(1);
  auto* cam_cmd = inspect_cmd->add_subcommand("cam", "Grad-CAM heatmap as PGM");
  add_inspect_flags(cam_cmd, cam);
  cam_cmd->add_option("--class", cam.class_index, "target class (default: true label)");
  auto* corr_cmd = inspect_cmd->add_subcommand("corr", "channel correlation matrix as CSV");
  add_inspect_flags(corr_cmd, corr);
  corr_cmd->add_option("--metric", corr.metric, "ma or bp");
  auto* drops_cmd = inspect_cmd->add_subcommand("drops", "per-channel drop frequencies as CSV");
  add_inspect_flags(drops_cmd, drops);
  drops_cmd->add_option("--metric", drops.metric, "ma or bp");
  drops_cmd->add_option("--gamma", drops.gamma, "drop rate (default per metric)");
  drops_cmd->add_option("--guidance", drops.guidance, "random or attention");
  drops_cmd->add_option("--images", drops.images, "number of test images");
  drops_cmd->add_option("--trials", drops.trials, "mask draws per image");
  drops_cmd->add_option("--seed", drops.seed, "sampling seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) return run_train(config, seed, out);
    if (*eval_cmd) return run_eval(checkpoint, eval_data);
    if (*ablate_cmd) return run_ablate(grid, out);
    if (*cam_cmd) return run_inspect_cam(cam);
    if (*corr_cmd) return run_inspect_corr(corr);
    if (*drops_cmd) return run_inspect_drops(drops);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
