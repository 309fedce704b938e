#pragma once

// Checkpoint = binary file of named tensors + "<file>.manifest" text file.
//
// Binary: "CDBK", u32 count, then per entry u32 name length, name bytes and
// one serialized tensor. The manifest records the network spec followed by
// one "name shape" line per tensor.

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cdb/error.hpp"
#include "cdb/network.hpp"
#include "cdb/tensor.hpp"

namespace cdb {

struct Checkpoint {
  NetworkSpec spec;
  std::map<std::string, AnyTensor> tensors;

  bool has(const std::string& name) const { return tensors.count(name) != 0; }

  template <Real T>
  Tensor<T> get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw CheckpointError("checkpoint has no tensor '" + name + "'");
    return std::visit([](const auto& t) { return tensor_cast<T>(t); }, it->second);
  }
};

inline std::filesystem::path manifest_path(const std::filesystem::path& ckpt) {
  return ckpt.string() + ".manifest";
}

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      out.push_back(static_cast<std::size_t>(std::stoull(item)));
    } catch (const std::exception&) {
      throw FormatError("bad size list '" + s + "'");
    }
  }
  return out;
}

/// Gathers parameters and buffers of `net` plus caller extras and writes both files.
template <Real T>
void save_checkpoint(const std::filesystem::path& path, Network<T>& net,
                     const std::vector<std::pair<std::string, Tensor<T>>>& extras = {}) {
  std::vector<std::pair<std::string, const Tensor<T>*>> entries;
  for (const auto& p : net.params()) entries.emplace_back(p.name, p.value);
  for (const auto& b : net.buffers()) entries.emplace_back(b.name, b.value);
  for (const auto& [name, t] : extras) entries.emplace_back(name, &t);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot write " + path.string());
  os.write("CDBK", 4);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, *t);
  }
  if (!os) throw CheckpointError("write failed for " + path.string());

  std::ofstream ms(manifest_path(path));
  const NetworkSpec& spec = net.spec();
  ms << "in_channels " << spec.in_channels << "\n"
     << "widths " << join_sizes(spec.widths) << "\n"
     << "num_classes " << spec.num_classes << "\n";
  for (const auto& [name, t] : entries) ms << "tensor " << name << " " << shape_str(t->shape()) << "\n";
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Checkpoint ck;
  std::ifstream ms(manifest_path(path));
  if (!ms) throw CheckpointError("missing manifest " + manifest_path(path).string());
  std::string key, value;
  bool has_widths = false;
  while (ms >> key >> value) {
    if (key == "in_channels") ck.spec.in_channels = std::stoull(value);
    else if (key == "num_classes") ck.spec.num_classes = std::stoull(value);
    else if (key == "widths") ck.spec.widths = parse_sizes(value), has_widths = true;
    else if (key == "tensor") ms >> value;  // name then shape
  }
  if (!has_widths) throw CheckpointError("manifest lacks widths");

  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot read " + path.string());
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "CDBK") throw CheckpointError("bad checkpoint magic in " + path.string());
  try {
    const auto count = detail::read_le<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto len = detail::read_le<std::uint32_t>(is);
      std::string name(len, '\0');
      is.read(name.data(), len);
      ck.tensors.emplace(std::move(name), read_any_tensor(is));
    }
  } catch (const FormatError& e) {
    throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
  }
  return ck;
}

/// Copies checkpoint tensors into `net`; every parameter and buffer must be present with its shape.
template <Real T>
void load_into(Network<T>& net, const Checkpoint& ck) {
  if (!(net.spec() == ck.spec)) throw CheckpointError("checkpoint network spec does not match");
  auto assign = [&](const std::string& name, Tensor<T>* dst) {
    Tensor<T> src = ck.get<T>(name);
    if (src.shape() != dst->shape())
      throw CheckpointError("tensor '" + name + "' has shape " + shape_str(src.shape()) + ", expected " +
                            shape_str(dst->shape()));
    *dst = std::move(src);
  };
  for (auto& p : net.params()) assign(p.name, p.value);
  for (auto& b : net.buffers()) assign(b.name, b.value);
}

}  // namespace cdb
