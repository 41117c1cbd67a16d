// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "xda/rng.hpp"
#include "xda/tensor.hpp"

namespace xda {

constexpr double kPi = 3.14159265358979323846;

// ---- color helpers ----

inline std::array<float, 3> hsv_to_rgb(double h, double s, double v) {
  h -= std::floor(h);
  const double hh = h * 6.0;
  const int i = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1.0 - s), q = v * (1.0 - s * f), t = v * (1.0 - s * (1.0 - f));
  double r = 0, g = 0, b = 0;
  switch (i) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
  return {static_cast<float>(r), static_cast<float>(g), static_cast<float>(b)};
}

// ---- glyph rendering ----
// Ten shape classes chosen to stay distinguishable under horizontal flips
// and rotations of up to roughly +/-55 degrees, so geometric augmentation
// and domain rotation never destroy the label.

inline const std::vector<std::string>& class_names() {
  static const std::vector<std::string> names = {
      "disc",   "ring",       "dot_in_ring", "square",    "hollow_square",
      "triangle", "plus",     "double_bar",  "four_dots", "checkerboard"};
  return names;
}

namespace detail {

inline bool glyph_inside(int cls, double ux, double uy, double phase_x, double phase_y) {
  const double r = std::sqrt(ux * ux + uy * uy);
  const double ax = std::fabs(ux), ay = std::fabs(uy);
  switch (cls) {
    case 0:  // disc
      return r <= 0.62;
    case 1:  // ring
      return r >= 0.38 && r <= 0.66;
    case 2:  // dot_in_ring
      return r <= 0.20 || (r >= 0.44 && r <= 0.68);
    case 3:  // square
      return std::max(ax, ay) <= 0.55;
    case 4:  // hollow_square
      return std::max(ax, ay) >= 0.34 && std::max(ax, ay) <= 0.62;
    case 5: {  // triangle (equilateral, apex up)
      const double k = 0.72;
      if (uy < -k * 0.5 || uy > k) return false;
      return ax <= (k - uy) * 0.577350269;
    }
    case 6:  // plus
      return (ax <= 0.18 && ay <= 0.68) || (ay <= 0.18 && ax <= 0.68);
    case 7:  // double_bar
      return ay <= 0.60 && ax >= 0.18 && ax <= 0.46;
    case 8: {  // four_dots
      const double cx = 0.42, cy = 0.42, rr = 0.24;
      const double dx = ax - cx, dy = ay - cy;
      return dx * dx + dy * dy <= rr * rr;
    }
    default: {  // checkerboard, phase-randomized
      if (ax > 0.64 || ay > 0.64) return false;
      const int ix = static_cast<int>(std::floor((ux + phase_x + 8.0) / 0.32));
      const int iy = static_cast<int>(std::floor((uy + phase_y + 8.0) / 0.32));
      return ((ix + iy) & 1) == 0;
    }
  }
}

}  // namespace detail

// One rendered sample: [C,H,W] floats in [0,1] plus its class label.
struct Sample {
  std::vector<float> img;
  int label = 0;
};

struct BaseDataset {
  int hw = 16, channels = 3, classes = 10;
  std::vector<Sample> samples;
  std::vector<std::vector<int>> by_class;  // sample indices per label
};

// Renders one glyph with per-sample geometry and color jitter.
inline std::vector<float> render_glyph(int cls, int hw, Rng& rng) {
  const double half = hw / 2.0;
  const double cx = half + rng.uniform(-1.5, 1.5);
  const double cy = half + rng.uniform(-1.5, 1.5);
  const double scale = (hw / 16.0) * 5.6 * rng.uniform(0.8, 1.15);
  const double theta = rng.uniform(-6.0, 6.0) * kPi / 180.0;
  const double ct = std::cos(theta), st = std::sin(theta);
  const double phase_x = rng.uniform(0.0, 0.64), phase_y = rng.uniform(0.0, 0.64);

  const double hue = cls / 10.0 + rng.uniform(-0.04, 0.04);
  const auto fg = hsv_to_rgb(hue, rng.uniform(0.7, 1.0), rng.uniform(0.7, 1.0));
  const float bgv = static_cast<float>(rng.uniform(0.25, 0.45));
  std::array<float, 3> bg = {bgv + static_cast<float>(rng.uniform(-0.03, 0.03)),
                             bgv + static_cast<float>(rng.uniform(-0.03, 0.03)),
                             bgv + static_cast<float>(rng.uniform(-0.03, 0.03))};

  std::vector<float> img(static_cast<size_t>(3) * hw * hw);
  constexpr int ss = 3;  // 3x3 supersampling for edge coverage
  for (int y = 0; y < hw; ++y) {
    for (int x = 0; x < hw; ++x) {
      int hits = 0;
      for (int sy = 0; sy < ss; ++sy) {
        for (int sx = 0; sx < ss; ++sx) {
          const double px = x + (sx + 0.5) / ss - cx;
          const double py = y + (sy + 0.5) / ss - cy;
          const double ux = (ct * px + st * py) / scale;
          const double uy = (-st * px + ct * py) / scale;
          if (detail::glyph_inside(cls, ux, uy, phase_x, phase_y)) ++hits;
        }
      }
      const float cov = static_cast<float>(hits) / (ss * ss);
      for (int c = 0; c < 3; ++c)
        img[(static_cast<size_t>(c) * hw + y) * hw + x] =
            bg[static_cast<size_t>(c)] + cov * (fg[static_cast<size_t>(c)] - bg[static_cast<size_t>(c)]);
    }
  }
  return img;
}

inline BaseDataset make_base_dataset(uint64_t seed, int classes, int per_class, int hw) {
  if (classes < 1 || classes > 10) throw ConfigError("base dataset supports 1..10 classes");
  if (per_class < 1) throw ConfigError("per_class must be positive");
  BaseDataset d;
  d.hw = hw;
  d.classes = classes;
  d.by_class.resize(static_cast<size_t>(classes));
  Rng rng(mix_seed(seed ^ 0xBA5EDA7Aull));
  d.samples.reserve(static_cast<size_t>(classes) * per_class);
  for (int k = 0; k < classes; ++k) {
    for (int i = 0; i < per_class; ++i) {
      d.by_class[static_cast<size_t>(k)].push_back(static_cast<int>(d.samples.size()));
      d.samples.push_back(Sample{render_glyph(k, hw, rng), k});
    }
  }
  return d;
}

// ---- image transforms ----

inline std::vector<float> rotate_image(const std::vector<float>& img, int hw, double deg) {
  const double a = deg * kPi / 180.0;
  const double ct = std::cos(a), st = std::sin(a);
  const double c0 = (hw - 1) / 2.0;
  std::vector<float> out(img.size());
  for (int y = 0; y < hw; ++y) {
    for (int x = 0; x < hw; ++x) {
      // inverse map, bilinear sample with edge clamp
      const double dx = x - c0, dy = y - c0;
      const double sx = ct * dx + st * dy + c0;
      const double sy = -st * dx + ct * dy + c0;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const double wx = sx - fx, wy = sy - fy;
      const int x0 = std::clamp(static_cast<int>(fx), 0, hw - 1);
      const int x1 = std::clamp(static_cast<int>(fx) + 1, 0, hw - 1);
      const int y0 = std::clamp(static_cast<int>(fy), 0, hw - 1);
      const int y1 = std::clamp(static_cast<int>(fy) + 1, 0, hw - 1);
      for (int c = 0; c < 3; ++c) {
        const float* p = img.data() + static_cast<size_t>(c) * hw * hw;
        const double v0 = p[y0 * hw + x0] * (1 - wx) + p[y0 * hw + x1] * wx;
        const double v1 = p[y1 * hw + x0] * (1 - wx) + p[y1 * hw + x1] * wx;
        out[(static_cast<size_t>(c) * hw + y) * hw + x] = static_cast<float>(v0 * (1 - wy) + v1 * wy);
      }
    }
  }
  return out;
}

inline void blur_image(std::vector<float>& img, int hw, double sigma) {
  const int rad = std::min(5, static_cast<int>(std::ceil(3.0 * sigma)));
  if (rad < 1) return;
  std::vector<double> w(static_cast<size_t>(rad) + 1);
  double norm = 0.0;
  for (int i = 0; i <= rad; ++i) {
    w[static_cast<size_t>(i)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    norm += (i == 0 ? 1.0 : 2.0) * w[static_cast<size_t>(i)];
  }
  for (auto& v : w) v /= norm;
  std::vector<float> tmp(img.size());
  for (int c = 0; c < 3; ++c) {
    const float* src = img.data() + static_cast<size_t>(c) * hw * hw;
    float* dst = tmp.data() + static_cast<size_t>(c) * hw * hw;
    for (int y = 0; y < hw; ++y)
      for (int x = 0; x < hw; ++x) {
        double acc = w[0] * src[y * hw + x];
        for (int i = 1; i <= rad; ++i) {
          acc += w[static_cast<size_t>(i)] * (src[y * hw + std::clamp(x - i, 0, hw - 1)] +
                                              src[y * hw + std::clamp(x + i, 0, hw - 1)]);
        }
        dst[y * hw + x] = static_cast<float>(acc);
      }
  }
  for (int c = 0; c < 3; ++c) {
    const float* src = tmp.data() + static_cast<size_t>(c) * hw * hw;
    float* dst = img.data() + static_cast<size_t>(c) * hw * hw;
    for (int y = 0; y < hw; ++y)
      for (int x = 0; x < hw; ++x) {
        double acc = w[0] * src[y * hw + x];
        for (int i = 1; i <= rad; ++i) {
          acc += w[static_cast<size_t>(i)] * (src[std::clamp(y - i, 0, hw - 1) * hw + x] +
                                              src[std::clamp(y + i, 0, hw - 1) * hw + x]);
        }
        dst[y * hw + x] = static_cast<float>(acc);
      }
  }
}

// ---- latent domains ----

struct DomainSpec {
  int id = 0;
  double rot_deg = 0.0;      // geometric rotation
  double hue_shift = 0.0;    // turns, rotation of RGB about the gray axis
  double brightness = 0.0;   // additive offset
  double noise_sigma = 0.0;  // per-pixel gaussian noise
  double blur_sigma = 0.0;   // gaussian blur radius, pixels
  uint64_t noise_seed = 0;
};

struct DomainRanges {
  double rot = 25.0;
  double hue = 1.0;
  double brightness = 0.22;
  double noise = 0.05;
  double blur = 1.0;
};

inline DomainSpec make_domain(uint64_t bench_seed, int domain_id,
                              const DomainRanges& rg = DomainRanges{}) {
  Rng rng(mix_seed(bench_seed ^ 0xD0AA11D5ull) ^ mix_seed(static_cast<uint64_t>(domain_id) + 1));
  DomainSpec s;
  s.id = domain_id;
  s.rot_deg = rng.uniform(-rg.rot, rg.rot);
  s.hue_shift = rng.uniform(0.0, rg.hue);
  s.brightness = rng.uniform(-rg.brightness, rg.brightness);
  s.noise_sigma = rng.uniform(0.0, rg.noise);
  s.blur_sigma = rng.uniform(0.0, rg.blur);
  s.noise_seed = mix_seed(bench_seed ^ (static_cast<uint64_t>(domain_id) * 0x9E3779B9ull + 17));
  return s;
}

// Deterministic domain shift. The identity spec returns the input bytes
// unchanged; noise is seeded from the image content so replays match.
inline std::vector<float> apply_domain(const DomainSpec& d, const std::vector<float>& img, int hw) {
  std::vector<float> out = img;
  if (std::fabs(d.rot_deg) > 1e-12) out = rotate_image(out, hw, d.rot_deg);
  const double hue_angle = 2.0 * kPi * d.hue_shift;
  if (std::fabs(d.hue_shift) > 1e-12) {
    // rotation about the (1,1,1) axis in RGB space
    const double c = std::cos(hue_angle), s = std::sin(hue_angle);
    const double oc = (1.0 - c) / 3.0, ss = s * 0.57735026918962576451;
    const double m[3][3] = {{c + oc, oc - ss, oc + ss},
                            {oc + ss, c + oc, oc - ss},
                            {oc - ss, oc + ss, c + oc}};
    const size_t plane = static_cast<size_t>(hw) * hw;
    for (size_t i = 0; i < plane; ++i) {
      const double r = out[i], g = out[plane + i], b = out[2 * plane + i];
      out[i] = static_cast<float>(m[0][0] * r + m[0][1] * g + m[0][2] * b);
      out[plane + i] = static_cast<float>(m[1][0] * r + m[1][1] * g + m[1][2] * b);
      out[2 * plane + i] = static_cast<float>(m[2][0] * r + m[2][1] * g + m[2][2] * b);
    }
  }
  if (std::fabs(d.brightness) > 1e-12)
    for (auto& v : out) v += static_cast<float>(d.brightness);
  if (d.blur_sigma >= 0.05) blur_image(out, hw, d.blur_sigma);
  if (d.noise_sigma > 1e-12) {
    Rng nrng(fnv1a64(out.data(), out.size() * sizeof(float)) ^ d.noise_seed);
    for (auto& v : out) v += static_cast<float>(d.noise_sigma * nrng.normal());
  }
  if (std::fabs(d.rot_deg) > 1e-12 || std::fabs(d.hue_shift) > 1e-12 ||
      std::fabs(d.brightness) > 1e-12 || d.blur_sigma >= 0.05 || d.noise_sigma > 1e-12)
    for (auto& v : out) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

// ---- benchmark ----

struct Benchmark {
  uint64_t seed = 0;
  int num_domains = 60, classes = 10, per_class = 200, hw = 16;
  DomainRanges ranges;
  BaseDataset base;
  std::vector<DomainSpec> domains;
  std::vector<int> train_domains, val_domains, test_domains;
};

// Domain split is 4:1:1 by id order: train, then val, then test.
inline Benchmark make_benchmark(uint64_t seed, int num_domains, int classes, int per_class, int hw,
                                const DomainRanges& rg = DomainRanges{}) {
  if (num_domains < 6) throw ConfigError("need at least 6 domains for a 4:1:1 split");
  Benchmark b;
  b.seed = seed;
  b.num_domains = num_domains;
  b.classes = classes;
  b.per_class = per_class;
  b.hw = hw;
  b.ranges = rg;
  b.base = make_base_dataset(seed, classes, per_class, hw);
  for (int i = 0; i < num_domains; ++i) b.domains.push_back(make_domain(seed, i, rg));
  const int held = num_domains / 6;
  const int train_n = num_domains - 2 * held;
  for (int i = 0; i < num_domains; ++i) {
    if (i < train_n) b.train_domains.push_back(i);
    else if (i < train_n + held) b.val_domains.push_back(i);
    else b.test_domains.push_back(i);
  }
  return b;
}

// ---- augmentation (training only, applied before the domain shift) ----

inline std::vector<float> augment_base(const std::vector<float>& img, int hw, Rng& rng) {
  std::vector<float> out = img;
  if (rng.bernoulli(0.5)) {
    // pad 2 with edge replication, random 16x16 crop
    const int pad = 2, pw = hw + 2 * pad;
    std::vector<float> padded(static_cast<size_t>(3) * pw * pw);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < pw; ++y)
        for (int x = 0; x < pw; ++x)
          padded[(static_cast<size_t>(c) * pw + y) * pw + x] =
              out[(static_cast<size_t>(c) * hw + std::clamp(y - pad, 0, hw - 1)) * hw +
                  std::clamp(x - pad, 0, hw - 1)];
    const int oy = rng.uniform_int(2 * pad + 1), ox = rng.uniform_int(2 * pad + 1);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < hw; ++y)
        for (int x = 0; x < hw; ++x)
          out[(static_cast<size_t>(c) * hw + y) * hw + x] =
              padded[(static_cast<size_t>(c) * pw + y + oy) * pw + x + ox];
  }
  if (rng.bernoulli(0.5)) {
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < hw; ++y)
        for (int x = 0; x < hw / 2; ++x)
          std::swap(out[(static_cast<size_t>(c) * hw + y) * hw + x],
                    out[(static_cast<size_t>(c) * hw + y) * hw + hw - 1 - x]);
  }
  if (rng.bernoulli(0.5)) out = rotate_image(out, hw, rng.uniform(-30.0, 30.0));
  return out;
}

// ---- episodes ----

struct Episode {
  int hw = 16, channels = 3;
  int n_domains = 0, per_domain = 0, n_query = 0;
  std::vector<int> domains;         // support domains, block order
  int query_domain = -1;
  std::vector<float> support_x;     // [Ns,C,H,W] flattened, grouped by domain
  std::vector<int> support_y;
  std::vector<int> support_domain;  // per support example
  std::vector<float> query_x;       // [Nq,C,H,W]
  std::vector<int> query_y;

  int n_support() const { return n_domains * per_domain; }

  std::vector<uint8_t> same_domain_flags() const {
    std::vector<uint8_t> f(support_domain.size());
    for (size_t i = 0; i < f.size(); ++i)
      f[i] = support_domain[i] == query_domain ? 1 : 0;
    return f;
  }

  template <typename T>
  TensorT<T> support_tensor() const {
    std::vector<T> v(support_x.begin(), support_x.end());
    return TensorT<T>({n_support(), channels, hw, hw}, std::move(v));
  }

  template <typename T>
  TensorT<T> query_tensor() const {
    std::vector<T> v(query_x.begin(), query_x.end());
    return TensorT<T>({n_query, channels, hw, hw}, std::move(v));
  }
};

// Samples one episode: n_domains distinct domains from the pool, per_domain
// support examples rendered under each, and n_query queries from one of the
// support domains. Augmentation happens before the domain shift.
inline Episode sample_episode(const Benchmark& b, const std::vector<int>& domain_pool, Rng& rng,
                              int n_domains, int per_domain, int n_query, bool augment) {
  if (n_domains < 1 || per_domain < 1 || n_query < 1)
    throw ContractError("episode shape must be positive");
  if (static_cast<int>(domain_pool.size()) < n_domains)
    throw SamplerError("domain pool smaller than requested episode domains");
  const int base_n = static_cast<int>(b.base.samples.size());
  if (base_n < per_domain || base_n < n_query)
    throw SamplerError("base dataset smaller than requested episode size");

  Episode ep;
  ep.hw = b.hw;
  ep.channels = 3;
  ep.n_domains = n_domains;
  ep.per_domain = per_domain;
  ep.n_query = n_query;

  auto picks = rng.sample_indices(static_cast<int>(domain_pool.size()), n_domains);
  for (int i : picks) ep.domains.push_back(domain_pool[static_cast<size_t>(i)]);
  ep.query_domain = ep.domains[static_cast<size_t>(rng.uniform_int(n_domains))];

  const size_t imsz = static_cast<size_t>(3) * b.hw * b.hw;
  ep.support_x.reserve(static_cast<size_t>(ep.n_support()) * imsz);
  for (int d : ep.domains) {
    const auto& spec = b.domains[static_cast<size_t>(d)];
    auto idx = rng.sample_indices(base_n, per_domain);
    for (int i : idx) {
      const auto& s = b.base.samples[static_cast<size_t>(i)];
      std::vector<float> img = augment ? augment_base(s.img, b.hw, rng) : s.img;
      img = apply_domain(spec, img, b.hw);
      ep.support_x.insert(ep.support_x.end(), img.begin(), img.end());
      ep.support_y.push_back(s.label);
      ep.support_domain.push_back(d);
    }
  }
  {
    const auto& spec = b.domains[static_cast<size_t>(ep.query_domain)];
    auto idx = rng.sample_indices(base_n, n_query);
    ep.query_x.reserve(static_cast<size_t>(n_query) * imsz);
    for (int i : idx) {
      const auto& s = b.base.samples[static_cast<size_t>(i)];
      std::vector<float> img = augment ? augment_base(s.img, b.hw, rng) : s.img;
      img = apply_domain(spec, img, b.hw);
      ep.query_x.insert(ep.query_x.end(), img.begin(), img.end());
      ep.query_y.push_back(s.label);
    }
  }
  return ep;
}

// ---- eval suites ----

struct EvalTask {
  uint64_t task_id = 0;
  Episode episode;
};

struct EvalSuite {
  std::string split;  // "val" or "test"
  uint64_t seed = 0;
  int n_domains = 5, per_domain = 20, n_query = 20;
  std::vector<EvalTask> tasks;
};

// Frozen, augmentation-free task collection over the given domain pool.
inline EvalSuite make_eval_suite(const Benchmark& b, const std::vector<int>& pool,
                                 const std::string& split, uint64_t seed, int n_tasks,
                                 int n_domains, int per_domain, int n_query) {
  if (n_tasks < 1) throw ConfigError("eval suite needs at least one task");
  EvalSuite s;
  s.split = split;
  s.seed = seed;
  s.n_domains = n_domains;
  s.per_domain = per_domain;
  s.n_query = n_query;
  Rng rng(mix_seed(seed ^ fnv1a64(split.data(), split.size())));
  for (int t = 0; t < n_tasks; ++t) {
    EvalTask task;
    task.task_id = mix_seed(seed ^ static_cast<uint64_t>(t + 1));
    task.episode = sample_episode(b, pool, rng, n_domains, per_domain, n_query, /*augment=*/false);
    s.tasks.push_back(std::move(task));
  }
  return s;
}

}  // namespace xda
