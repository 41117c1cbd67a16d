// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <cstring>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "xda/config.hpp"
#include "xda/model.hpp"

namespace xda {

// Layout: 8-byte magic, u64 little-endian header length, UTF-8 JSON header,
// then raw little-endian f32 tensor payloads at the offsets the header lists.
constexpr char kCkptMagic[8] = {'X', 'D', 'A', 'C', 'K', 'P', 'T', '1'};

struct Checkpoint {
  Method method = Method::erm;
  uint64_t seed = 0;
  RunConfig config;
  ModelT<float> model;
};

namespace detail {

struct NamedView {
  std::string name;
  Shape shape;
  const float* data;
  size_t numel;
};

inline std::vector<NamedView> collect_views(ModelT<float>& m) {
  std::vector<NamedView> views;
  visit_trainable(m, [&](const std::string& name, TensorT<float>& t) {
    views.push_back({name, t.shape(), t.data(), t.numel()});
  });
  visit_buffers(m, [&](const std::string& name, std::vector<float>& v) {
    views.push_back({name, Shape{static_cast<int>(v.size())}, v.data(), v.size()});
  });
  return views;
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ModelT<float>& model,
                            const RunConfig& config, uint64_t seed) {
  auto views = detail::collect_views(const_cast<ModelT<float>&>(model));
  json tensors = json::array();
  size_t offset = 0;
  for (const auto& v : views) {
    tensors.push_back(json{{"name", v.name},
                           {"shape", v.shape},
                           {"dtype", "f32"},
                           {"offset", offset},
                           {"numel", v.numel}});
    offset += v.numel * sizeof(float);
  }
  json header = {{"format", 1},
                 {"method", method_to_string(model.family)},
                 {"seed", seed},
                 {"config", config},
                 {"tensors", tensors}};
  const std::string hs = header.dump();

  detail::FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw CheckpointError("cannot open '" + path + "' for writing");
  const uint64_t hlen = hs.size();
  if (std::fwrite(kCkptMagic, 1, 8, f.get()) != 8 ||
      std::fwrite(&hlen, sizeof(hlen), 1, f.get()) != 1 ||
      std::fwrite(hs.data(), 1, hs.size(), f.get()) != hs.size())
    throw CheckpointError("write failed on '" + path + "'");
  for (const auto& v : views)
    if (std::fwrite(v.data, sizeof(float), v.numel, f.get()) != v.numel)
      throw CheckpointError("write failed on '" + path + "'");
  if (std::fflush(f.get()) != 0) throw CheckpointError("flush failed on '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  detail::FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw CheckpointError("cannot open '" + path + "'");
  char magic[8];
  uint64_t hlen = 0;
  if (std::fread(magic, 1, 8, f.get()) != 8 || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw CheckpointError("'" + path + "' is not a checkpoint");
  if (std::fread(&hlen, sizeof(hlen), 1, f.get()) != 1 || hlen == 0 || hlen > (1u << 20))
    throw CheckpointError("'" + path + "' has a corrupt header");
  std::string hs(hlen, '\0');
  if (std::fread(hs.data(), 1, hlen, f.get()) != hlen)
    throw CheckpointError("'" + path + "' is truncated");

  json header;
  try {
    header = json::parse(hs);
  } catch (const json::exception& e) {
    throw CheckpointError("'" + path + "' header is not valid JSON: " + e.what());
  }
  Checkpoint ck;
  try {
    if (header.at("format").get<int>() != 1)
      throw CheckpointError("'" + path + "' has an unsupported format version");
    ck.method = method_from_string(header.at("method").get<std::string>());
    ck.seed = header.at("seed").get<uint64_t>();
    header.at("config").get_to(ck.config);
  } catch (const json::exception& e) {
    throw CheckpointError("'" + path + "' header is missing fields: " + e.what());
  }

  ck.model = build_model<float>(ck.config.model, ck.method, /*seed=*/0);

  struct Entry {
    Shape shape;
    size_t offset = 0, numel = 0;
    bool used = false;
  };
  std::unordered_map<std::string, Entry> entries;
  const long payload_start = std::ftell(f.get());
  for (const auto& t : header.at("tensors")) {
    Entry e;
    e.shape = t.at("shape").get<Shape>();
    e.offset = t.at("offset").get<size_t>();
    e.numel = t.at("numel").get<size_t>();
    entries[t.at("name").get<std::string>()] = e;
  }

  auto read_entry = [&](const std::string& name, const Shape& want, float* dst, size_t n) {
    auto it = entries.find(name);
    if (it == entries.end()) throw CheckpointError("'" + path + "' is missing tensor " + name);
    auto& e = it->second;
    if (e.shape != want || e.numel != n)
      throw CheckpointError("'" + path + "' tensor " + name + " has shape " + shape_str(e.shape) +
                            ", expected " + shape_str(want));
    if (std::fseek(f.get(), payload_start + static_cast<long>(e.offset), SEEK_SET) != 0 ||
        std::fread(dst, sizeof(float), n, f.get()) != n)
      throw CheckpointError("'" + path + "' is truncated at tensor " + name);
    e.used = true;
  };

  visit_trainable(ck.model, [&](const std::string& name, TensorT<float>& t) {
    std::vector<float> buf(t.numel());
    read_entry(name, t.shape(), buf.data(), buf.size());
    t = t.with_data(std::move(buf));
  });
  visit_buffers(ck.model, [&](const std::string& name, std::vector<float>& v) {
    read_entry(name, Shape{static_cast<int>(v.size())}, v.data(), v.size());
  });
  for (const auto& [name, e] : entries)
    if (!e.used) throw CheckpointError("'" + path + "' has unexpected tensor " + name);
  return ck;
}

}  // namespace xda
