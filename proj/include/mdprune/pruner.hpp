#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdprune/metrics.hpp"
#include "mdprune/model.hpp"

namespace mdprune {

struct LayerPruneInfo {
  int conv_ordinal = 0;
  int layer_index = 0;
  std::vector<int> kept;  // input-feature channel indices that survive
  int removed = 0;
};

struct PruneReport {
  std::vector<LayerPruneInfo> layers;
  long long switches_removed = 0;      // per-domain slots, summed over domains
  long long kernel_values_removed = 0;
  double params_ratio = 1.0;           // compact model vs reference backbone
  double mac_ratio = 1.0;              // mean over domains
  std::vector<double> equivalence_max_abs;  // per domain

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["schema"] = "mdprune-prune-report-v1";
    nlohmann::json ls = nlohmann::json::array();
    for (const auto& l : layers)
      ls.push_back({{"conv", l.conv_ordinal},
                    {"layer", l.layer_index},
                    {"kept", l.kept},
                    {"removed", l.removed}});
    j["layers"] = ls;
    j["switches_removed"] = switches_removed;
    j["kernel_values_removed"] = kernel_values_removed;
    j["params_ratio"] = params_ratio;
    j["mac_ratio"] = mac_ratio;
    j["equivalence_max_abs"] = equivalence_max_abs;
    return j;
  }
};

struct PruneOptions {
  // Also remove producer-side output channels that feed only pruned slices.
  // Off by default: the baseline accounting removes exactly the kernel input
  // slices whose switch is zero for every domain.
  bool cascade = false;
  int verify_inputs = 16;
  double verify_tolerance = 1e-9;
};

// Keep-index lists per masked conv (in binarize_masks layer order): index c
// survives iff any domain's binary switch is 1 at (layer, c).
inline std::vector<std::vector<int>> compute_union(const BinaryMasks& bm) {
  if (bm.masks.empty()) throw std::invalid_argument("compute_union: no domains");
  const std::size_t layers = bm.masks[0].size();
  for (const auto& dom : bm.masks) {
    if (dom.size() != layers)
      throw std::invalid_argument("compute_union: mask layer count mismatch across domains");
    for (std::size_t l = 0; l < layers; ++l)
      if (dom[l].size() != bm.masks[0][l].size())
        throw std::invalid_argument("compute_union: mask shape mismatch at layer " +
                                    std::to_string(l));
  }
  std::vector<std::vector<int>> keep(layers);
  for (std::size_t l = 0; l < layers; ++l)
    for (std::size_t c = 0; c < bm.masks[0][l].size(); ++c) {
      bool used = false;
      for (const auto& dom : bm.masks)
        if (dom[l][c]) {
          used = true;
          break;
        }
      if (used) keep[l].push_back(static_cast<int>(c));
    }
  return keep;
}

// Max |logit difference| per domain between two models in eval mode over
// n random inputs. A logit-shape mismatch is a prune bookkeeping bug.
inline std::vector<double> verify_equivalence(MultiDomainModel& a, MultiDomainModel& b,
                                              int n_inputs, std::uint64_t seed, int input_h = 32,
                                              int input_w = 32) {
  if (a.num_domains() != b.num_domains())
    throw std::runtime_error("verify_equivalence: domain count mismatch");
  int in_ch = -1;
  for (const LayerDesc& l : a.arch.layers)
    if (l.kind == LayerKind::Conv) {
      in_ch = l.in_ch;
      break;
    }
  if (in_ch <= 0) throw std::runtime_error("verify_equivalence: no conv layer");
  Rng rng = Rng(seed).split("verify-equivalence");
  std::vector<double> out(static_cast<std::size_t>(a.num_domains()), 0.0);
  for (int i = 0; i < n_inputs; ++i) {
    std::vector<double> px(static_cast<std::size_t>(in_ch) * input_h * input_w);
    for (double& v : px) v = rng.uniform();
    Tensor x = Tensor::from_data({1, in_ch, input_h, input_w}, px);
    for (int d = 0; d < a.num_domains(); ++d) {
      Tensor la = forward(a, d, x, Mode::Eval);
      Tensor lb = forward(b, d, x, Mode::Eval);
      if (la.shape() != lb.shape())
        throw std::runtime_error("verify_equivalence: logit shape mismatch for domain " +
                                 std::to_string(d) + ": " + shape_str(la.shape()) + " vs " +
                                 shape_str(lb.shape()));
      for (std::size_t j = 0; j < la.numel(); ++j)
        out[static_cast<std::size_t>(d)] = std::max(
            out[static_cast<std::size_t>(d)], std::abs(la.values()[j] - lb.values()[j]));
    }
  }
  return out;
}

namespace detail {

// Ordinals of the masked convs, in binarize_masks layer order.
inline std::vector<int> masked_conv_ordinals(const MultiDomainModel& m) {
  std::vector<int> out;
  for (std::size_t c = 0; c < m.convs.size(); ++c)
    if (!m.convs[c].switches.empty()) out.push_back(static_cast<int>(c));
  return out;
}

inline int layer_index_of_conv(const MultiDomainModel& m, int conv_ordinal) {
  for (std::size_t i = 0; i < m.conv_at_layer.size(); ++i)
    if (m.conv_at_layer[i] == conv_ordinal) return static_cast<int>(i);
  throw std::runtime_error("conv ordinal out of range");
}

// Removes output channels of producer convs whose feature map is consumed,
// through channel-wise layers only, by a single conv that drops them.
inline void cascade_prune(MultiDomainModel& m, PruneReport& report) {
  for (std::size_t ci = 0; ci < m.convs.size(); ++ci) {
    const int layer_i = layer_index_of_conv(m, static_cast<int>(ci));
    // Walk the span of channel-preserving layers after this conv.
    std::size_t j = static_cast<std::size_t>(layer_i) + 1;
    while (j < m.arch.layers.size() &&
           (m.arch.layers[j].kind == LayerKind::BatchNorm ||
            m.arch.layers[j].kind == LayerKind::Relu ||
            m.arch.layers[j].kind == LayerKind::MaxPool))
      ++j;
    if (j >= m.arch.layers.size() || m.arch.layers[j].kind != LayerKind::Conv)
      continue;  // consumed by gap/head: every channel is needed
    // A residual source inside the span pins all channels.
    bool pinned = false;
    for (const LayerDesc& l : m.arch.layers)
      if (l.kind == LayerKind::Conv && l.residual_from >= layer_i &&
          l.residual_from < static_cast<int>(j))
        pinned = true;
    if (pinned) continue;

    ConvLayer& consumer = m.convs[static_cast<std::size_t>(m.conv_at_layer[j])];
    const int ambient = m.arch.layers[static_cast<std::size_t>(layer_i)].out_ch;
    std::vector<int> needed;
    if (consumer.keep_map.empty()) continue;  // consumer reads every channel
    needed = consumer.keep_map;               // sorted by construction
    if (static_cast<int>(needed.size()) == ambient) continue;
    if (needed.empty())
      throw std::runtime_error("cascade prune: conv " + std::to_string(ci) +
                               " would lose every output channel");

    // Shrink producer kernel rows.
    ConvLayer& producer = m.convs[ci];
    const Shape ks = producer.kernel.shape();
    const std::size_t row = static_cast<std::size_t>(ks[1]) * ks[2] * ks[3];
    std::vector<double> kept_rows(needed.size() * row);
    for (std::size_t r = 0; r < needed.size(); ++r)
      std::copy_n(producer.kernel.values().begin() +
                      static_cast<std::ptrdiff_t>(static_cast<std::size_t>(needed[r]) * row),
                  row, kept_rows.begin() + static_cast<std::ptrdiff_t>(r * row));
    report.kernel_values_removed +=
        static_cast<long long>(producer.kernel.numel() - kept_rows.size());
    producer.kernel = Tensor::from_data({static_cast<int>(needed.size()), ks[1], ks[2], ks[3]},
                                        std::move(kept_rows), false);

    // Shrink the per-domain batch-norm sets that live in the span.
    for (std::size_t s = static_cast<std::size_t>(layer_i) + 1; s < j; ++s) {
      if (m.arch.layers[s].kind != LayerKind::BatchNorm) continue;
      BnLayer& bn = m.bns[static_cast<std::size_t>(m.bn_at_layer[s])];
      for (std::size_t d = 0; d < bn.gamma.size(); ++d) {
        auto gather_t = [&](Tensor& t) {
          std::vector<double> v(needed.size());
          for (std::size_t r = 0; r < needed.size(); ++r)
            v[r] = t.values()[static_cast<std::size_t>(needed[r])];
          t = Tensor::from_data({static_cast<int>(needed.size())}, std::move(v),
                                t.requires_grad());
        };
        auto gather_v = [&](std::vector<double>& src) {
          std::vector<double> v(needed.size());
          for (std::size_t r = 0; r < needed.size(); ++r)
            v[r] = src[static_cast<std::size_t>(needed[r])];
          src = std::move(v);
        };
        gather_t(bn.gamma[d]);
        gather_t(bn.beta[d]);
        gather_v(bn.run_mean[d]);
        gather_v(bn.run_var[d]);
      }
    }

    // The consumer now reads a compacted ambient space in order.
    consumer.keep_map.clear();
    m.arch.layers[static_cast<std::size_t>(layer_i)].out_ch = static_cast<int>(needed.size());
    m.arch.layers[j].in_ch = static_cast<int>(needed.size());
  }
  m.arch.validate();
}

}  // namespace detail

// Physically removes the kernel input slices listed as dropped by the keep
// lists, shrinking every domain's switch vectors alongside. Eval outputs are
// preserved for every domain (removed slices had switch 0 everywhere); the
// report carries the verification results and the prune refuses to emit a
// model whose layer lost all channels.
inline std::pair<MultiDomainModel, PruneReport> prune(MultiDomainModel& original,
                                                      const std::vector<std::vector<int>>& keeps,
                                                      const PruneOptions& opts = {}) {
  MultiDomainModel compact = clone(original);
  PruneReport report;
  const std::vector<int> ordinals = detail::masked_conv_ordinals(compact);
  if (keeps.size() != ordinals.size())
    throw std::invalid_argument("prune: got keep lists for " + std::to_string(keeps.size()) +
                                " layers, model has " + std::to_string(ordinals.size()) +
                                " masked convs");

  for (std::size_t l = 0; l < ordinals.size(); ++l) {
    ConvLayer& cl = compact.convs[static_cast<std::size_t>(ordinals[l])];
    const int layer_i = detail::layer_index_of_conv(compact, ordinals[l]);
    const int slices = cl.in_slices();
    const std::vector<int>& keep = keeps[l];
    if (keep.empty())
      throw std::runtime_error("prune: layer " + std::to_string(layer_i) + " (conv " +
                               std::to_string(ordinals[l]) +
                               "): no input channel is used by any domain; refusing to emit a "
                               "degenerate model");
    for (int c : keep)
      if (c < 0 || c >= slices)
        throw std::invalid_argument("prune: keep index " + std::to_string(c) +
                                    " out of range for layer " + std::to_string(layer_i));

    LayerPruneInfo info;
    info.conv_ordinal = ordinals[l];
    info.layer_index = layer_i;
    info.removed = slices - static_cast<int>(keep.size());
    report.switches_removed += static_cast<long long>(info.removed) * compact.num_domains();

    // Original-coordinate kept indices (compose with any previous prune).
    for (int c : keep)
      info.kept.push_back(cl.keep_map.empty() ? c : cl.keep_map[static_cast<std::size_t>(c)]);

    if (info.removed > 0) {
      const Shape ks = cl.kernel.shape();
      const std::size_t kk = static_cast<std::size_t>(ks[2]) * ks[3];
      std::vector<double> kv(static_cast<std::size_t>(ks[0]) * keep.size() * kk);
      for (int o = 0; o < ks[0]; ++o)
        for (std::size_t r = 0; r < keep.size(); ++r)
          std::copy_n(cl.kernel.values().begin() +
                          static_cast<std::ptrdiff_t>(
                              (static_cast<std::size_t>(o) * ks[1] +
                               static_cast<std::size_t>(keep[r])) *
                              kk),
                      kk,
                      kv.begin() + static_cast<std::ptrdiff_t>(
                                       (static_cast<std::size_t>(o) * keep.size() + r) * kk));
      report.kernel_values_removed +=
          static_cast<long long>(cl.kernel.numel() - kv.size());
      cl.kernel = Tensor::from_data({ks[0], static_cast<int>(keep.size()), ks[2], ks[3]},
                                    std::move(kv), false);
      for (auto& s : cl.switches) {
        std::vector<double> sv(keep.size());
        for (std::size_t r = 0; r < keep.size(); ++r)
          sv[r] = s.values()[static_cast<std::size_t>(keep[r])];
        s = Tensor::from_data({static_cast<int>(keep.size())}, std::move(sv), true);
      }
      cl.keep_map = info.kept;
      // An identity map back to the full ambient space means no compaction.
      if (static_cast<int>(cl.keep_map.size()) ==
          compact.arch.layers[static_cast<std::size_t>(layer_i)].in_ch) {
        bool identity = true;
        for (std::size_t r = 0; r < cl.keep_map.size(); ++r)
          if (cl.keep_map[r] != static_cast<int>(r)) identity = false;
        if (identity) cl.keep_map.clear();
      }
    }
    report.layers.push_back(std::move(info));
  }

  if (opts.cascade) detail::cascade_prune(compact, report);

  report.params_ratio = param_ratio(compact);
  const auto ratios = mac_ratios(compact);
  double sum = 0.0;
  for (double r : ratios) sum += r;
  report.mac_ratio = ratios.empty() ? 1.0 : sum / static_cast<double>(ratios.size());

  report.equivalence_max_abs =
      verify_equivalence(original, compact, opts.verify_inputs, original.seed ^ 0x70727565ULL);
  for (std::size_t d = 0; d < report.equivalence_max_abs.size(); ++d)
    if (report.equivalence_max_abs[d] > opts.verify_tolerance)
      throw std::runtime_error("prune: eval outputs changed for domain " + std::to_string(d) +
                               " by " + std::to_string(report.equivalence_max_abs[d]) +
                               " (tolerance " + std::to_string(opts.verify_tolerance) + ")");
  return {std::move(compact), std::move(report)};
}

// Union-of-masks prune at the model's own threshold.
inline std::pair<MultiDomainModel, PruneReport> prune(MultiDomainModel& model,
                                                      const PruneOptions& opts = {}) {
  return prune(model, compute_union(binarize_masks(model)), opts);
}

}  // namespace mdprune
