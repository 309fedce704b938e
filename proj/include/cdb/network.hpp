#pragma once

// The desk-scale CNN: up to five blocks of conv3x3 -> batch-norm -> relu ->
// maxpool2x2, insert points v1..v5 after each block's pooling, then global
// average pooling and a linear classifier.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "cdb/baselines.hpp"
#include "cdb/cdb_block.hpp"
#include "cdb/error.hpp"
#include "cdb/layers.hpp"
#include "cdb/random.hpp"
#include "cdb/tensor.hpp"

namespace cdb {

struct NetworkSpec {
  std::size_t in_channels = 3;
  std::vector<std::size_t> widths{32, 64, 128, 256, 256};
  std::size_t num_classes = 10;

  std::size_t blocks() const { return widths.size(); }

  void validate() const {
    if (widths.empty() || widths.size() > static_cast<std::size_t>(kInsertPoints))
      throw InvalidConfig("network needs 1.." + std::to_string(kInsertPoints) + " blocks, got " +
                          std::to_string(widths.size()));
    if (in_channels == 0 || num_classes == 0) throw InvalidConfig("network channels and classes must be positive");
    for (std::size_t i = 0; i < widths.size(); ++i) {
      if (widths[i] == 0) throw InvalidConfig("block width must be positive");
      if (i && widths[i] < widths[i - 1]) throw InvalidConfig("block widths must be nondecreasing");
    }
  }

  bool operator==(const NetworkSpec&) const = default;
};

/// No regularizer, Channel DropBlock, or one of the baselines.
using RegularizerSpec = std::variant<std::monostate, CdbConfig, BaselineConfig>;

/// A regularizer placed at one insert point.
template <Real T>
class FeatureRegularizer {
 public:
  explicit FeatureRegularizer(CdbConfig cfg) : cdb_(std::in_place, std::move(cfg)) {}
  explicit FeatureRegularizer(BaselineConfig cfg) : baseline_(std::move(cfg)) {}

  Tensor<T> forward(const Tensor<T>& x, Mode mode, Rng& rng) {
    if (cdb_) return cdb_->forward(x, mode, rng);
    if (mode == Mode::Eval) {
      mask_ = Tensor<T>();
      return x;
    }
    MaskedOutput<T> r;
    switch (baseline_->kind) {
      case BaselineKind::Dropout: r = dropout_forward(x, baseline_->rate, mode, rng); break;
      case BaselineKind::SpatialDropout: r = spatial_dropout_forward(x, baseline_->rate, mode, rng); break;
      case BaselineKind::DropBlock:
        r = dropblock_forward(x, baseline_->rate, baseline_->block_size, mode, rng);
        break;
      case BaselineKind::Cutout: return x;  // input-pipeline only
    }
    mask_ = std::move(r.mask);
    scale_ = r.scale;
    return std::move(r.output);
  }

  Tensor<T> backward(const Tensor<T>& g) const {
    if (cdb_) return cdb_->backward(g);
    if (mask_.empty()) return g;
    return masked_backward(g, mask_, scale_);
  }

  ChannelDropBlock<T>* channel_drop_block() { return cdb_ ? &*cdb_ : nullptr; }

 private:
  std::optional<ChannelDropBlock<T>> cdb_;
  std::optional<BaselineConfig> baseline_;
  Tensor<T> mask_;
  T scale_ = T(1);
};

template <Real T>
class Network {
 public:
  explicit Network(NetworkSpec spec, RegularizerSpec reg = {}, std::uint64_t init_seed = 0)
      : spec_(std::move(spec)), reg_(std::move(reg)) {
    spec_.validate();
    std::size_t in = spec_.in_channels;
    for (std::size_t b = 0; b < spec_.blocks(); ++b) {
      blocks_.push_back(Block{Conv2d<T>(in, spec_.widths[b]), BatchNorm2d<T>(spec_.widths[b]), {}, {}, {}});
      in = spec_.widths[b];
    }
    blocks_.front().conv.set_need_input_grad(false);
    head_ = std::make_unique<Linear<T>>(in, spec_.num_classes);
    place_regularizers();
    Rng rng = Rng::substream(init_seed, "init");
    for (auto& blk : blocks_) blk.conv.init(rng);
    head_->init(rng);
    activations_.resize(2 * spec_.blocks());
    activation_grads_.resize(2 * spec_.blocks());
  }

  const NetworkSpec& spec() const { return spec_; }
  const RegularizerSpec& regularizer() const { return reg_; }

  /// Needed when the caller wants dL/dinput (gradient checks).
  void set_need_input_grad(bool v) { blocks_.front().conv.set_need_input_grad(v); }

  Tensor<T> forward(const Tensor<T>& x, Mode mode, Rng& rng) {
    require_rank(x, 4, "network_forward");
    Tensor<T> h = x;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      Block& blk = blocks_[b];
      h = blk.relu.forward(blk.bn.forward(blk.conv.forward(h), mode));
      activations_[2 * b] = h;
      h = blk.pool.forward(h);
      activations_[2 * b + 1] = h;
      if (blk.reg) h = blk.reg->forward(h, mode, rng);
    }
    return head_->forward(gap_.forward(h));
  }

  /// Accumulates parameter gradients; returns dL/dinput when enabled.
  Tensor<T> backward(const Tensor<T>& dlogits) {
    Tensor<T> g = gap_.backward(head_->backward(dlogits));
    for (std::size_t b = blocks_.size(); b-- > 0;) {
      Block& blk = blocks_[b];
      if (blk.reg) g = blk.reg->backward(g);
      activation_grads_[2 * b + 1] = g;
      g = blk.pool.backward(g);
      activation_grads_[2 * b] = g;
      g = blk.conv.backward(blk.bn.backward(blk.relu.backward(g)));
    }
    return g;
  }

  std::vector<Param<T>> params() {
    std::vector<Param<T>> out;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const std::string p = "block" + std::to_string(b + 1);
      blocks_[b].conv.params(p + ".conv", out);
      blocks_[b].bn.params(p + ".bn", out);
    }
    head_->params("fc", out);
    return out;
  }

  std::vector<Buffer<T>> buffers() {
    std::vector<Buffer<T>> out;
    for (std::size_t b = 0; b < blocks_.size(); ++b)
      blocks_[b].bn.buffers("block" + std::to_string(b + 1) + ".bn", out);
    return out;
  }

  void zero_grad() {
    for (auto& p : params()) p.grad->fill(T(0));
  }

  /// Layer names: "convK" is block K after relu, "vK" is block K after pooling.
  std::size_t layer_slot(const std::string& name) const {
    if (name.size() >= 2) {
      const bool conv = name.rfind("conv", 0) == 0 && name.size() == 5;
      const bool ins = name[0] == 'v' && name.size() == 2;
      const char d = name.back();
      if ((conv || ins) && d >= '1' && static_cast<std::size_t>(d - '0') <= blocks_.size())
        return 2 * static_cast<std::size_t>(d - '1') + (ins ? 1 : 0);
    }
    throw ConfigError("unknown layer '" + name + "' for a " + std::to_string(blocks_.size()) + "-block network");
  }

  const Tensor<T>& activation(const std::string& layer) const { return activations_[layer_slot(layer)]; }
  const Tensor<T>& activation_grad(const std::string& layer) const {
    return activation_grads_[layer_slot(layer)];
  }

  ChannelDropBlock<T>* channel_drop_block(const std::string& insert_pos) {
    const std::size_t i = insert_index(insert_pos);
    if (i >= blocks_.size() || !blocks_[i].reg) return nullptr;
    return blocks_[i].reg->channel_drop_block();
  }

  Conv2d<T>& conv(std::size_t block) { return blocks_.at(block).conv; }
  BatchNorm2d<T>& bn(std::size_t block) { return blocks_.at(block).bn; }
  Linear<T>& head() { return *head_; }

 private:
  struct Block {
    Conv2d<T> conv;
    BatchNorm2d<T> bn;
    ReLU<T> relu;
    MaxPool2x2<T> pool;
    std::optional<FeatureRegularizer<T>> reg;
  };

  void place_regularizers() {
    auto place = [&](const std::vector<std::string>& positions, auto cfg) {
      for (const auto& pos : positions) {
        const std::size_t i = insert_index(pos);
        if (i >= blocks_.size())
          throw InvalidConfig("insert position " + pos + " beyond a " + std::to_string(blocks_.size()) +
                              "-block network");
        blocks_[i].reg.emplace(cfg);
      }
    };
    if (const auto* c = std::get_if<CdbConfig>(&reg_)) {
      c->validate();
      place(c->insert_pos, *c);
    } else if (const auto* b = std::get_if<BaselineConfig>(&reg_)) {
      b->validate();
      if (b->kind != BaselineKind::Cutout) place(b->insert_pos, *b);
    }
  }

  NetworkSpec spec_;
  RegularizerSpec reg_;
  std::vector<Block> blocks_;
  GlobalAvgPool<T> gap_;
  std::unique_ptr<Linear<T>> head_;
  std::vector<Tensor<T>> activations_;
  std::vector<Tensor<T>> activation_grads_;
};

}  // namespace cdb
