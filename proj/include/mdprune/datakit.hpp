#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "mdprune/rng.hpp"
#include "mdprune/serialize.hpp"
#include "mdprune/tensor.hpp"

namespace mdprune {

struct DomainDataset {
  std::string domain;
  std::string split;  // "train" | "val" | "test"
  int classes = 0;
  int channels = 3, height = 32, width = 32;
  std::vector<std::uint8_t> images;  // [n, C, H, W]
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_bytes() const {
    return static_cast<std::size_t>(channels) * height * width;
  }
};

struct DomainSplits {
  DomainDataset train, val, test;
};

struct DomainGenSpec {
  std::string name;
  std::string generator;  // shapes | stripes | glyphs | colors
  int classes = 0;        // 0: generator default
  int samples = 400;
};

struct SuiteSpec {
  std::vector<DomainGenSpec> domains;
};

// ---------------------------------------------------------------------------
// Generators. All domains share the 3x32x32 input shape so a single backbone
// serves every one of them, but each needs different low-level features.
// ---------------------------------------------------------------------------

namespace gen {

constexpr int kH = 32, kW = 32, kC = 3;

inline std::uint8_t clamp_u8(double v) {
  return static_cast<std::uint8_t>(std::min(255.0, std::max(0.0, v)));
}

inline void noisy_fill(Rng& rng, std::vector<std::uint8_t>& px, double lo, double hi) {
  for (auto& p : px) p = clamp_u8(rng.uniform(lo, hi));
}

// class = geometric shape (circle, square, triangle, cross)
inline void shapes(Rng& rng, int cls, std::vector<std::uint8_t>& px) {
  noisy_fill(rng, px, 0, 45);
  const double cx = rng.uniform(11, 21), cy = rng.uniform(11, 21);
  const double r = rng.uniform(6, 11);
  const double base = rng.uniform(160, 250);
  for (int y = 0; y < kH; ++y)
    for (int x = 0; x < kW; ++x) {
      const double dx = x - cx, dy = y - cy;
      bool inside = false;
      switch (cls % 4) {
        case 0: inside = dx * dx + dy * dy <= r * r; break;
        case 1: inside = std::abs(dx) <= r * 0.85 && std::abs(dy) <= r * 0.85; break;
        case 2: inside = dy >= -r && dy <= r && std::abs(dx) <= (dy + r) * 0.5; break;
        case 3: inside = (std::abs(dx) <= r * 0.3 || std::abs(dy) <= r * 0.3) &&
                         std::abs(dx) <= r && std::abs(dy) <= r;
          break;
      }
      if (!inside) continue;
      for (int c = 0; c < kC; ++c) {
        const std::size_t i = (static_cast<std::size_t>(c) * kH + y) * kW + x;
        px[i] = clamp_u8(base + rng.uniform(-12, 12));
      }
    }
}

// class = stripe orientation bucket (0/45/90/135 degrees)
inline void stripes(Rng& rng, int cls, std::vector<std::uint8_t>& px) {
  const double theta =
      (cls % 4) * std::numbers::pi / 4.0 + rng.uniform(-0.12, 0.12);
  const double freq = rng.uniform(2.5, 5.0);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double amp = rng.uniform(55, 95) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
  const double ct = std::cos(theta), st = std::sin(theta);
  for (int y = 0; y < kH; ++y)
    for (int x = 0; x < kW; ++x) {
      const double t = (x * ct + y * st) / kW;
      const double v = 128.0 + amp * std::sin(2.0 * std::numbers::pi * freq * t + phase);
      for (int c = 0; c < kC; ++c) {
        const std::size_t i = (static_cast<std::size_t>(c) * kH + y) * kW + x;
        px[i] = clamp_u8(v + rng.uniform(-18, 18));
      }
    }
}

// class = digit-like glyph
inline void glyphs(Rng& rng, int cls, std::vector<std::uint8_t>& px) {
  static constexpr std::array<std::array<const char*, 7>, 4> kGlyphs = {{
      {"01110", "10001", "10011", "10101", "11001", "10001", "01110"},   // 0
      {"00100", "01100", "00100", "00100", "00100", "00100", "01110"},   // 1
      {"01110", "10001", "00001", "00110", "01000", "10000", "11111"},   // 2
      {"11111", "00001", "00010", "00100", "01000", "01000", "01000"},   // 7
  }};
  noisy_fill(rng, px, 0, 50);
  const auto& glyph = kGlyphs[static_cast<std::size_t>(cls % 4)];
  const int scale = 4;
  const int ox = 6 + static_cast<int>(rng.below(3)) - 1;
  const int oy = 2 + static_cast<int>(rng.below(3));
  const double fg = rng.uniform(190, 255);
  for (int gy = 0; gy < 7; ++gy)
    for (int gx = 0; gx < 5; ++gx) {
      if (glyph[static_cast<std::size_t>(gy)][gx] != '1') continue;
      for (int sy = 0; sy < scale; ++sy)
        for (int sx = 0; sx < scale; ++sx) {
          const int y = oy + gy * scale + sy, x = ox + gx * scale + sx;
          if (y < 0 || y >= kH || x < 0 || x >= kW) continue;
          for (int c = 0; c < kC; ++c)
            px[(static_cast<std::size_t>(c) * kH + y) * kW + x] =
                clamp_u8(fg + rng.uniform(-10, 10));
        }
    }
}

// class = dominant color channel
inline void colors(Rng& rng, int cls, std::vector<std::uint8_t>& px) {
  std::array<double, 3> mean{};
  for (int c = 0; c < kC; ++c) mean[static_cast<std::size_t>(c)] = rng.uniform(40, 110);
  mean[static_cast<std::size_t>(cls % 3)] = rng.uniform(160, 220);
  for (int c = 0; c < kC; ++c) {
    const double m = mean[static_cast<std::size_t>(c)];
    for (int y = 0; y < kH; ++y)
      for (int x = 0; x < kW; ++x)
        px[(static_cast<std::size_t>(c) * kH + y) * kW + x] =
            clamp_u8(m + rng.uniform(-45, 45));
  }
}

inline int default_classes(const std::string& generator) {
  if (generator == "colors") return 3;
  return 4;
}

}  // namespace gen

inline DomainDataset generate_domain(const DomainGenSpec& spec, Rng rng) {
  DomainDataset ds;
  ds.domain = spec.name;
  ds.classes = spec.classes > 0 ? spec.classes : gen::default_classes(spec.generator);
  if (spec.samples <= 0) throw config_error("domain '" + spec.name + "': samples must be > 0");

  void (*fn)(Rng&, int, std::vector<std::uint8_t>&) = nullptr;
  if (spec.generator == "shapes") fn = gen::shapes;
  else if (spec.generator == "stripes") fn = gen::stripes;
  else if (spec.generator == "glyphs") fn = gen::glyphs;
  else if (spec.generator == "colors") fn = gen::colors;
  else throw config_error("domain '" + spec.name + "': unknown generator '" + spec.generator +
                          "'");

  ds.images.resize(static_cast<std::size_t>(spec.samples) * ds.sample_bytes());
  ds.labels.resize(static_cast<std::size_t>(spec.samples));
  std::vector<std::uint8_t> px(ds.sample_bytes());
  for (int i = 0; i < spec.samples; ++i) {
    const int cls = i % ds.classes;
    Rng sample_rng = rng.split(static_cast<std::uint64_t>(i));
    fn(sample_rng, cls, px);
    std::copy(px.begin(), px.end(),
              ds.images.begin() + static_cast<std::ptrdiff_t>(i * ds.sample_bytes()));
    ds.labels[static_cast<std::size_t>(i)] = cls;
  }
  return ds;
}

// 70/15/15 split by sample index; class labels cycle, so splits stay balanced.
inline DomainSplits split_dataset(const DomainDataset& full) {
  const auto n = full.size();
  const std::size_t n_train = n * 70 / 100;
  const std::size_t n_val = n * 15 / 100;
  auto slice = [&](std::size_t begin, std::size_t count, const char* tag) {
    DomainDataset out;
    out.domain = full.domain;
    out.split = tag;
    out.classes = full.classes;
    out.channels = full.channels;
    out.height = full.height;
    out.width = full.width;
    out.images.assign(full.images.begin() + static_cast<std::ptrdiff_t>(begin *
                                                                        full.sample_bytes()),
                      full.images.begin() +
                          static_cast<std::ptrdiff_t>((begin + count) * full.sample_bytes()));
    out.labels.assign(full.labels.begin() + static_cast<std::ptrdiff_t>(begin),
                      full.labels.begin() + static_cast<std::ptrdiff_t>(begin + count));
    return out;
  };
  DomainSplits s;
  s.train = slice(0, n_train, "train");
  s.val = slice(n_train, n_val, "val");
  s.test = slice(n_train + n_val, n - n_train - n_val, "test");
  return s;
}

inline std::vector<DomainSplits> generate_synthetic_suite(std::uint64_t seed,
                                                          const SuiteSpec& spec) {
  if (spec.domains.empty()) throw config_error("suite spec lists no domains");
  std::vector<DomainSplits> out;
  Rng root(seed);
  for (const auto& d : spec.domains)
    out.push_back(split_dataset(generate_domain(d, root.split("domain." + d.name))));
  return out;
}

// ---------------------------------------------------------------------------
// Dataset file format, little-endian:
//   magic "MDDS0001" | name_len u32 | name | split u8 | classes u32
//   | n,c,h,w u32 | pixels u8[n*c*h*w] | labels u32[n]
// ---------------------------------------------------------------------------

inline std::string dataset_to_bytes(const DomainDataset& ds) {
  std::string out = "MDDS0001";
  detail::put_u32le(out, static_cast<std::uint32_t>(ds.domain.size()));
  out += ds.domain;
  const std::uint8_t split_tag = ds.split == "train" ? 0 : ds.split == "val" ? 1 : 2;
  out.push_back(static_cast<char>(split_tag));
  detail::put_u32le(out, static_cast<std::uint32_t>(ds.classes));
  detail::put_u32le(out, static_cast<std::uint32_t>(ds.size()));
  detail::put_u32le(out, static_cast<std::uint32_t>(ds.channels));
  detail::put_u32le(out, static_cast<std::uint32_t>(ds.height));
  detail::put_u32le(out, static_cast<std::uint32_t>(ds.width));
  out.append(reinterpret_cast<const char*>(ds.images.data()), ds.images.size());
  for (int label : ds.labels) detail::put_u32le(out, static_cast<std::uint32_t>(label));
  return out;
}

inline DomainDataset dataset_from_bytes(const std::string& in, const std::string& origin) {
  if (in.size() < 8 || in.compare(0, 8, "MDDS0001") != 0)
    throw config_error(origin + ": bad dataset magic at byte 0 (expected MDDS0001)");
  std::size_t pos = 8;
  DomainDataset ds;
  const std::uint32_t name_len = detail::get_u32le(in, pos);
  if (pos + name_len > in.size())
    throw config_error(origin + ": truncated at byte " + std::to_string(pos));
  ds.domain = in.substr(pos, name_len);
  pos += name_len;
  if (pos + 1 > in.size()) throw config_error(origin + ": truncated at byte " +
                                              std::to_string(pos));
  const auto split_tag = static_cast<std::uint8_t>(in[pos++]);
  if (split_tag > 2) throw config_error(origin + ": bad split tag");
  ds.split = split_tag == 0 ? "train" : split_tag == 1 ? "val" : "test";
  ds.classes = static_cast<int>(detail::get_u32le(in, pos));
  const std::uint32_t n = detail::get_u32le(in, pos);
  ds.channels = static_cast<int>(detail::get_u32le(in, pos));
  ds.height = static_cast<int>(detail::get_u32le(in, pos));
  ds.width = static_cast<int>(detail::get_u32le(in, pos));
  if (ds.classes <= 0 || ds.channels <= 0 || ds.height <= 0 || ds.width <= 0)
    throw config_error(origin + ": non-positive dimension in header");
  const std::size_t pixel_bytes = static_cast<std::size_t>(n) * ds.sample_bytes();
  const std::size_t expected = pos + pixel_bytes + static_cast<std::size_t>(n) * 4;
  if (in.size() != expected)
    throw config_error(origin + ": expected " + std::to_string(expected) + " bytes, have " +
                       std::to_string(in.size()));
  ds.images.assign(in.begin() + static_cast<std::ptrdiff_t>(pos),
                   in.begin() + static_cast<std::ptrdiff_t>(pos + pixel_bytes));
  pos += pixel_bytes;
  ds.labels.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto label = detail::get_u32le(in, pos);
    if (label >= static_cast<std::uint32_t>(ds.classes))
      throw config_error(origin + ": label " + std::to_string(label) + " out of class range [0," +
                         std::to_string(ds.classes) + ") at sample " + std::to_string(i));
    ds.labels[i] = static_cast<int>(label);
  }
  return ds;
}

inline void save_dataset(const DomainDataset& ds, const std::string& path) {
  write_file(path, dataset_to_bytes(ds));
}

inline DomainDataset load_dataset(const std::string& path) {
  return dataset_from_bytes(read_file(path), path);
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

// Pixels are normalized to [0,1]; an optional horizontal flip (p = 0.5 per
// sample) is the only augmentation.
inline Tensor make_batch(const DomainDataset& ds, const std::vector<std::size_t>& indices,
                         std::vector<int>& labels_out, Rng* flip_rng = nullptr) {
  const int c = ds.channels, h = ds.height, w = ds.width;
  std::vector<double> data(indices.size() * ds.sample_bytes());
  labels_out.resize(indices.size());
  for (std::size_t bi = 0; bi < indices.size(); ++bi) {
    const std::size_t si = indices[bi];
    if (si >= ds.size()) throw std::invalid_argument("batch index out of range");
    labels_out[bi] = ds.labels[si];
    const std::uint8_t* src = &ds.images[si * ds.sample_bytes()];
    double* dst = &data[bi * ds.sample_bytes()];
    const bool flip = flip_rng && flip_rng->uniform() < 0.5;
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const int sx = flip ? w - 1 - x : x;
          dst[(static_cast<std::size_t>(ci) * h + y) * w + x] =
              src[(static_cast<std::size_t>(ci) * h + y) * w + sx] / 255.0;
        }
  }
  return Tensor::from_data({static_cast<int>(indices.size()), c, h, w}, std::move(data));
}

// Deterministic epoch order derived from (seed, epoch, domain).
inline std::vector<std::size_t> epoch_order(const DomainDataset& ds, std::uint64_t seed,
                                            int epoch) {
  std::vector<std::size_t> idx(ds.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng r = Rng(seed).split("shuffle." + ds.domain).split(static_cast<std::uint64_t>(epoch));
  r.shuffle(idx);
  return idx;
}

}  // namespace mdprune
