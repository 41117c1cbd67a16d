// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "xda/config.hpp"
#include "xda/synth.hpp"

namespace xda {

namespace fs = std::filesystem;

inline void write_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw XdaError("cannot open '" + path.string() + "' for writing");
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!f) throw XdaError("write failed on '" + path.string() + "'");
}

inline std::string read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw XdaError("cannot open '" + path.string() + "'");
  std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return s;
}

inline void to_json(json& j, const DomainSpec& d) {
  j = json{{"id", d.id},
           {"rot_deg", d.rot_deg},
           {"hue_shift", d.hue_shift},
           {"brightness", d.brightness},
           {"noise_sigma", d.noise_sigma},
           {"blur_sigma", d.blur_sigma},
           {"noise_seed", d.noise_seed}};
}
inline void from_json(const json& j, DomainSpec& d) {
  j.at("id").get_to(d.id);
  j.at("rot_deg").get_to(d.rot_deg);
  j.at("hue_shift").get_to(d.hue_shift);
  j.at("brightness").get_to(d.brightness);
  j.at("noise_sigma").get_to(d.noise_sigma);
  j.at("blur_sigma").get_to(d.blur_sigma);
  j.at("noise_seed").get_to(d.noise_seed);
}

// ---- eval suite serialization ----
// index.json holds all metadata and labels; images.bin holds raw f32
// little-endian pixels, support block then query block per task, in task
// order. Loading restores the suite bit for bit.

inline void save_suite(const fs::path& dir, const EvalSuite& s) {
  fs::create_directories(dir);
  json tasks = json::array();
  std::string blob;
  for (const auto& t : s.tasks) {
    const auto& ep = t.episode;
    tasks.push_back(json{{"task_id", t.task_id},
                         {"domains", ep.domains},
                         {"query_domain", ep.query_domain},
                         {"support_y", ep.support_y},
                         {"support_domain", ep.support_domain},
                         {"query_y", ep.query_y},
                         {"offset", blob.size()}});
    blob.append(reinterpret_cast<const char*>(ep.support_x.data()),
                ep.support_x.size() * sizeof(float));
    blob.append(reinterpret_cast<const char*>(ep.query_x.data()),
                ep.query_x.size() * sizeof(float));
  }
  json index = {{"split", s.split},
                {"seed", s.seed},
                {"n_domains", s.n_domains},
                {"per_domain", s.per_domain},
                {"n_query", s.n_query},
                {"count", s.tasks.size()},
                {"hw", s.tasks.empty() ? 16 : s.tasks[0].episode.hw},
                {"images_checksum", hex64(fnv1a64(blob.data(), blob.size()))},
                {"tasks", tasks}};
  write_file(dir / "index.json", index.dump(2) + "\n");
  write_file(dir / "images.bin", blob);
}

inline EvalSuite load_suite(const fs::path& dir) {
  json index;
  try {
    index = json::parse(read_file(dir / "index.json"));
  } catch (const json::exception& e) {
    throw XdaError("bad suite index in '" + dir.string() + "': " + e.what());
  }
  const std::string blob = read_file(dir / "images.bin");
  if (index.value("images_checksum", "") != hex64(fnv1a64(blob.data(), blob.size())))
    throw XdaError("suite images in '" + dir.string() + "' do not match their checksum");

  EvalSuite s;
  s.split = index.at("split").get<std::string>();
  s.seed = index.at("seed").get<uint64_t>();
  s.n_domains = index.at("n_domains").get<int>();
  s.per_domain = index.at("per_domain").get<int>();
  s.n_query = index.at("n_query").get<int>();
  const int hw = index.at("hw").get<int>();
  const size_t imsz = static_cast<size_t>(3) * hw * hw;
  for (const auto& jt : index.at("tasks")) {
    EvalTask t;
    t.task_id = jt.at("task_id").get<uint64_t>();
    auto& ep = t.episode;
    ep.hw = hw;
    ep.channels = 3;
    jt.at("domains").get_to(ep.domains);
    ep.query_domain = jt.at("query_domain").get<int>();
    jt.at("support_y").get_to(ep.support_y);
    jt.at("support_domain").get_to(ep.support_domain);
    jt.at("query_y").get_to(ep.query_y);
    ep.n_domains = static_cast<int>(ep.domains.size());
    ep.per_domain = static_cast<int>(ep.support_y.size()) / ep.n_domains;
    ep.n_query = static_cast<int>(ep.query_y.size());
    const size_t off = jt.at("offset").get<size_t>();
    const size_t sup_bytes = ep.support_y.size() * imsz * sizeof(float);
    const size_t qry_bytes = ep.query_y.size() * imsz * sizeof(float);
    if (off + sup_bytes + qry_bytes > blob.size())
      throw XdaError("suite images in '" + dir.string() + "' are truncated");
    ep.support_x.resize(ep.support_y.size() * imsz);
    ep.query_x.resize(ep.query_y.size() * imsz);
    std::memcpy(ep.support_x.data(), blob.data() + off, sup_bytes);
    std::memcpy(ep.query_x.data(), blob.data() + off + sup_bytes, qry_bytes);
    s.tasks.push_back(std::move(t));
  }
  return s;
}

// ---- benchmark directory ----
// bench.json carries the generator config, domain parameters and splits.
// Base images are regenerated from the seed on load and verified against the
// stored checksum. Suites live under val/ and test/.

inline uint64_t base_checksum(const BaseDataset& d) {
  uint64_t h = 14695981039346656037ull;
  for (const auto& s : d.samples) {
    h = fnv1a64(s.img.data(), s.img.size() * sizeof(float), h);
    h = fnv1a64(&s.label, sizeof(s.label), h);
  }
  return h;
}

inline void save_benchmark(const fs::path& dir, const BenchConfig& cfg, const Benchmark& b,
                           const EvalSuite& val, const EvalSuite& test) {
  fs::create_directories(dir);
  json jb = {{"config", cfg},
             {"domains", b.domains},
             {"train_domains", b.train_domains},
             {"val_domains", b.val_domains},
             {"test_domains", b.test_domains},
             {"base_checksum", hex64(base_checksum(b.base))},
             {"class_names", class_names()}};
  write_file(dir / "bench.json", jb.dump(2) + "\n");
  save_suite(dir / "val", val);
  save_suite(dir / "test", test);

  json files = json::object();
  for (const char* rel : {"bench.json", "val/index.json", "val/images.bin", "test/index.json",
                          "test/images.bin"}) {
    const std::string content = read_file(dir / rel);
    files[rel] = hex64(fnv1a64(content.data(), content.size()));
  }
  write_file(dir / "manifest.json", json{{"files", files}}.dump(2) + "\n");
}

struct LoadedBench {
  BenchConfig cfg;
  Benchmark bench;
};

inline LoadedBench load_benchmark(const fs::path& dir) {
  json jb;
  try {
    jb = json::parse(read_file(dir / "bench.json"));
  } catch (const json::exception& e) {
    throw XdaError("bad benchmark file in '" + dir.string() + "': " + e.what());
  }
  LoadedBench out;
  jb.at("config").get_to(out.cfg);
  out.bench = make_benchmark(out.cfg.seed, out.cfg.num_domains, out.cfg.classes,
                             out.cfg.per_class, out.cfg.hw, out.cfg.ranges);
  if (jb.value("base_checksum", "") != hex64(base_checksum(out.bench.base)))
    throw XdaError("benchmark '" + dir.string() +
                   "' was generated by an incompatible builder (base checksum mismatch)");
  // stored domain parameters take precedence; verify they regenerate
  std::vector<DomainSpec> stored;
  jb.at("domains").get_to(stored);
  if (stored.size() != out.bench.domains.size())
    throw XdaError("benchmark '" + dir.string() + "' domain count mismatch");
  for (size_t i = 0; i < stored.size(); ++i) {
    const auto& a = stored[i];
    const auto& b2 = out.bench.domains[i];
    if (a.id != b2.id || a.rot_deg != b2.rot_deg || a.hue_shift != b2.hue_shift ||
        a.brightness != b2.brightness || a.noise_sigma != b2.noise_sigma ||
        a.blur_sigma != b2.blur_sigma || a.noise_seed != b2.noise_seed)
      throw XdaError("benchmark '" + dir.string() + "' domain parameters do not regenerate");
  }
  jb.at("train_domains").get_to(out.bench.train_domains);
  jb.at("val_domains").get_to(out.bench.val_domains);
  jb.at("test_domains").get_to(out.bench.test_domains);
  return out;
}

inline void verify_manifest(const fs::path& dir) {
  json m;
  try {
    m = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw XdaError("bad manifest in '" + dir.string() + "': " + e.what());
  }
  for (const auto& [rel, want] : m.at("files").items()) {
    const std::string content = read_file(dir / rel);
    if (want.get<std::string>() != hex64(fnv1a64(content.data(), content.size())))
      throw XdaError("checksum mismatch for '" + rel + "' in '" + dir.string() + "'");
  }
}

}  // namespace xda
