#pragma once

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mdprune/tensor.hpp"

namespace mdprune {

// Architecture descriptor: one layer per line, in execution order.
//
//   conv in=<C> out=<O> k=<K> stride=<S> pad=<P> masked=<0|1> [residual=<layer index>]
//   bn
//   relu
//   maxpool k=<K> [stride=<S>]
//   gap
//   linear
//
// '#' starts a comment; blank lines are ignored. `residual=j` adds the output
// of layer j (0-based, before this one) to the conv output. `bn` binds to the
// current channel count; `linear` consumes the gap features and is realized
// as one head per domain.

enum class LayerKind { Conv, BatchNorm, Relu, MaxPool, GlobalAvgPool, Linear };

struct LayerDesc {
  LayerKind kind{};
  // conv
  int in_ch = 0, out_ch = 0, kernel = 0, stride = 1, pad = 0;
  bool masked = false;
  int residual_from = -1;
  // maxpool
  int pool_k = 0, pool_stride = 0;
  // bn: resolved during validation
  int channels = 0;
};

struct ArchDescriptor {
  std::vector<LayerDesc> layers;

  static ArchDescriptor parse(const std::string& text);
  std::string to_text() const;
  // Checks channel chaining, residual shapes and layer ordering; fills the
  // resolved channel counts. Throws config_error naming the layer index.
  void validate();

  int feature_channels() const {  // channels entering the linear head
    for (auto it = layers.rbegin(); it != layers.rend(); ++it)
      if (it->kind == LayerKind::GlobalAvgPool) return it->channels;
    throw config_error("architecture has no gap layer before the head");
  }
};

namespace detail {

inline std::map<std::string, std::string> parse_fields(std::istringstream& ss, int line_no) {
  std::map<std::string, std::string> out;
  std::string tok;
  while (ss >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == tok.size())
      throw config_error("descriptor line " + std::to_string(line_no) + ": bad field '" + tok +
                         "'");
    out[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return out;
}

inline int field_int(const std::map<std::string, std::string>& f, const std::string& key,
                     int line_no, int fallback, bool required) {
  auto it = f.find(key);
  if (it == f.end()) {
    if (required)
      throw config_error("descriptor line " + std::to_string(line_no) + ": missing field '" +
                         key + "'");
    return fallback;
  }
  try {
    std::size_t used = 0;
    int v = std::stoi(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw config_error("descriptor line " + std::to_string(line_no) + ": field '" + key +
                       "' is not an integer: '" + it->second + "'");
  }
}

}  // namespace detail

inline ArchDescriptor ArchDescriptor::parse(const std::string& text) {
  ArchDescriptor arch;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream ss(line);
    std::string kind;
    if (!(ss >> kind)) continue;
    LayerDesc l;
    if (kind == "conv") {
      auto f = detail::parse_fields(ss, line_no);
      l.kind = LayerKind::Conv;
      l.in_ch = detail::field_int(f, "in", line_no, 0, true);
      l.out_ch = detail::field_int(f, "out", line_no, 0, true);
      l.kernel = detail::field_int(f, "k", line_no, 0, true);
      l.stride = detail::field_int(f, "stride", line_no, 1, false);
      l.pad = detail::field_int(f, "pad", line_no, 0, false);
      l.masked = detail::field_int(f, "masked", line_no, 0, false) != 0;
      l.residual_from = detail::field_int(f, "residual", line_no, -1, false);
    } else if (kind == "bn") {
      l.kind = LayerKind::BatchNorm;
    } else if (kind == "relu") {
      l.kind = LayerKind::Relu;
    } else if (kind == "maxpool") {
      auto f = detail::parse_fields(ss, line_no);
      l.kind = LayerKind::MaxPool;
      l.pool_k = detail::field_int(f, "k", line_no, 0, true);
      l.pool_stride = detail::field_int(f, "stride", line_no, l.pool_k, false);
    } else if (kind == "gap") {
      l.kind = LayerKind::GlobalAvgPool;
    } else if (kind == "linear") {
      l.kind = LayerKind::Linear;
    } else {
      throw config_error("descriptor line " + std::to_string(line_no) + ": unknown layer '" +
                         kind + "'");
    }
    arch.layers.push_back(l);
  }
  arch.validate();
  return arch;
}

inline void ArchDescriptor::validate() {
  if (layers.empty()) throw config_error("descriptor has no layers");
  int channels = -1;  // -1: take from the first conv's in=
  bool seen_gap = false, seen_linear = false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    LayerDesc& l = layers[i];
    const std::string at = "layer " + std::to_string(i);
    if (seen_linear) throw config_error(at + ": nothing may follow the linear head");
    switch (l.kind) {
      case LayerKind::Conv: {
        if (seen_gap) throw config_error(at + ": conv after gap");
        if (l.in_ch <= 0 || l.out_ch <= 0 || l.kernel <= 0)
          throw config_error(at + ": conv needs positive in/out/k");
        if (channels >= 0 && l.in_ch != channels)
          throw config_error(at + ": conv expects in=" + std::to_string(l.in_ch) +
                             " but the running channel count is " + std::to_string(channels));
        if (l.residual_from >= 0) {
          if (l.residual_from >= static_cast<int>(i))
            throw config_error(at + ": residual source " + std::to_string(l.residual_from) +
                               " is not an earlier layer");
          const LayerDesc& src = layers[static_cast<std::size_t>(l.residual_from)];
          if (src.channels != l.out_ch)
            throw config_error(at + ": residual source channels " +
                               std::to_string(src.channels) + " != conv out " +
                               std::to_string(l.out_ch));
        }
        channels = l.out_ch;
        break;
      }
      case LayerKind::BatchNorm:
      case LayerKind::Relu:
        if (channels < 0) throw config_error(at + ": no channel count yet");
        if (seen_gap) throw config_error(at + ": channel op after gap");
        break;
      case LayerKind::MaxPool:
        if (channels < 0) throw config_error(at + ": no channel count yet");
        if (seen_gap) throw config_error(at + ": maxpool after gap");
        if (l.pool_k <= 0 || l.pool_stride <= 0)
          throw config_error(at + ": maxpool needs positive k/stride");
        break;
      case LayerKind::GlobalAvgPool:
        if (channels < 0) throw config_error(at + ": no channel count yet");
        if (seen_gap) throw config_error(at + ": duplicate gap");
        seen_gap = true;
        break;
      case LayerKind::Linear:
        if (!seen_gap) throw config_error(at + ": linear head requires a gap layer first");
        seen_linear = true;
        break;
    }
    l.channels = channels;
  }
  if (!seen_linear) throw config_error("descriptor must end in a linear head");
}

inline std::string ArchDescriptor::to_text() const {
  std::ostringstream out;
  for (const LayerDesc& l : layers) {
    switch (l.kind) {
      case LayerKind::Conv:
        out << "conv in=" << l.in_ch << " out=" << l.out_ch << " k=" << l.kernel
            << " stride=" << l.stride << " pad=" << l.pad << " masked=" << (l.masked ? 1 : 0);
        if (l.residual_from >= 0) out << " residual=" << l.residual_from;
        out << "\n";
        break;
      case LayerKind::BatchNorm:
        out << "bn\n";
        break;
      case LayerKind::Relu:
        out << "relu\n";
        break;
      case LayerKind::MaxPool:
        out << "maxpool k=" << l.pool_k << " stride=" << l.pool_stride << "\n";
        break;
      case LayerKind::GlobalAvgPool:
        out << "gap\n";
        break;
      case LayerKind::Linear:
        out << "linear\n";
        break;
    }
  }
  return out.str();
}

// Desk-scale reference backbone: three masked convs, one residual add,
// per-domain bn and head.
inline std::string micronet_descriptor() {
  return
      "conv in=3 out=16 k=3 stride=1 pad=1 masked=1\n"
      "bn\n"
      "relu\n"
      "maxpool k=2\n"
      "conv in=16 out=32 k=3 stride=1 pad=1 masked=1\n"
      "bn\n"
      "relu\n"
      "conv in=32 out=32 k=3 stride=1 pad=1 masked=1 residual=6\n"
      "bn\n"
      "relu\n"
      "gap\n"
      "linear\n";
}

}  // namespace mdprune
