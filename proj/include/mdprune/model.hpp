#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdprune/arch.hpp"
#include "mdprune/ops.hpp"
#include "mdprune/rng.hpp"
#include "mdprune/serialize.hpp"
#include "mdprune/tensor.hpp"

namespace mdprune {

// One convolution of the shared backbone. The kernel belongs to the frozen
// shared weights; masked layers additionally carry one real-valued switch
// vector (length = kernel input channels) per registered domain.
struct ConvLayer {
  Tensor kernel;                 // [O, C, kh, kw]
  std::vector<Tensor> switches;  // per domain, shape [C]; empty when unmasked
  // Compact (pruned) layers: input-feature channel read by kernel slice c.
  // Empty means the identity map.
  std::vector<int> keep_map;

  int in_slices() const { return kernel.dim(1); }
};

struct BnLayer {
  std::vector<Tensor> gamma, beta;                       // per domain, shape [C]
  std::vector<std::vector<double>> run_mean, run_var;    // per domain
};

struct Head {
  Tensor weight;  // [features, classes]
  Tensor bias;    // [classes]
};

struct DomainInfo {
  std::string name;
  int classes = 0;
};

enum class Mode { Train, Eval };

// Shared frozen backbone plus per-domain switch masks, batch-norm parameter
// sets and classifier heads.
struct MultiDomainModel {
  ArchDescriptor arch;
  // Original backbone this model derives from; differs from `arch` only
  // after a cascade prune. Cost ratios are taken against this reference.
  ArchDescriptor arch_ref;
  std::vector<ConvLayer> convs;  // by conv ordinal
  std::vector<BnLayer> bns;      // by bn ordinal
  std::vector<int> conv_at_layer, bn_at_layer;  // layer index -> ordinal or -1
  std::vector<DomainInfo> domains;
  std::vector<Head> heads;  // per domain

  double tau = 0.0;       // binarization threshold
  double ste_clip = 1.0;  // straight-through pass-band
  std::uint64_t seed = 0;

  // Training state carried into checkpoints.
  double beta_budget = 1.0;
  double lambda_ps = 0.0;
  std::vector<double> lambda;  // per domain
  int rounds_completed = 0;

  int domain_index(const std::string& name) const {
    for (std::size_t i = 0; i < domains.size(); ++i)
      if (domains[i].name == name) return static_cast<int>(i);
    std::string known;
    for (const auto& d : domains) known += (known.empty() ? "" : ", ") + d.name;
    throw config_error("unknown domain '" + name + "' (registered: " + known + ")");
  }

  int num_domains() const { return static_cast<int>(domains.size()); }

  // Total switch count M per domain.
  int switch_count() const {
    int m = 0;
    for (const auto& cl : convs)
      if (!cl.switches.empty()) m += cl.in_slices();
    return m;
  }

  std::vector<Tensor> domain_parameters(int d) {  // BN + head, SGD path
    std::vector<Tensor> ps;
    for (auto& bn : bns) {
      ps.push_back(bn.gamma[static_cast<std::size_t>(d)]);
      ps.push_back(bn.beta[static_cast<std::size_t>(d)]);
    }
    ps.push_back(heads[static_cast<std::size_t>(d)].weight);
    ps.push_back(heads[static_cast<std::size_t>(d)].bias);
    return ps;
  }

  std::vector<Tensor> all_switches() {  // every domain, Adam path
    std::vector<Tensor> ps;
    for (auto& cl : convs)
      for (auto& s : cl.switches) ps.push_back(s);
    return ps;
  }

  std::vector<Tensor> domain_switches(int d) {
    std::vector<Tensor> ps;
    for (auto& cl : convs)
      if (!cl.switches.empty()) ps.push_back(cl.switches[static_cast<std::size_t>(d)]);
    return ps;
  }

  std::vector<Tensor> backbone_kernels() {
    std::vector<Tensor> ps;
    for (auto& cl : convs) ps.push_back(cl.kernel);
    return ps;
  }
};

inline MultiDomainModel build_from_descriptor(const ArchDescriptor& arch_in,
                                              const std::vector<DomainInfo>& domains,
                                              std::uint64_t seed,
                                              bool trainable_backbone = false) {
  MultiDomainModel m;
  m.arch = arch_in;
  m.arch.validate();
  m.arch_ref = m.arch;
  m.domains = domains;
  m.seed = seed;
  m.lambda.assign(domains.size(), 0.0);
  Rng root(seed);
  Rng init = root.split("init");

  const int feat = m.arch.feature_channels();
  m.conv_at_layer.assign(m.arch.layers.size(), -1);
  m.bn_at_layer.assign(m.arch.layers.size(), -1);
  for (std::size_t i = 0; i < m.arch.layers.size(); ++i) {
    const LayerDesc& l = m.arch.layers[i];
    if (l.kind == LayerKind::Conv) {
      ConvLayer cl;
      const int fan_in = l.in_ch * l.kernel * l.kernel;
      Rng kr = init.split("conv" + std::to_string(m.convs.size()));
      cl.kernel = Tensor::randn({l.out_ch, l.in_ch, l.kernel, l.kernel}, kr,
                                std::sqrt(2.0 / fan_in), trainable_backbone);
      if (l.masked) {
        for (std::size_t d = 0; d < domains.size(); ++d)
          cl.switches.push_back(Tensor::full({l.in_ch}, 1e-3, true));
      }
      m.conv_at_layer[i] = static_cast<int>(m.convs.size());
      m.convs.push_back(std::move(cl));
    } else if (l.kind == LayerKind::BatchNorm) {
      BnLayer bn;
      for (std::size_t d = 0; d < domains.size(); ++d) {
        bn.gamma.push_back(Tensor::full({l.channels}, 1.0, true));
        bn.beta.push_back(Tensor::zeros({l.channels}, true));
        bn.run_mean.emplace_back(static_cast<std::size_t>(l.channels), 0.0);
        bn.run_var.emplace_back(static_cast<std::size_t>(l.channels), 1.0);
      }
      m.bn_at_layer[i] = static_cast<int>(m.bns.size());
      m.bns.push_back(std::move(bn));
    } else if (l.kind == LayerKind::Linear) {
      for (std::size_t d = 0; d < domains.size(); ++d) {
        Rng hr = init.split("head." + domains[d].name);
        Head h;
        h.weight = Tensor::randn({feat, domains[d].classes}, hr, std::sqrt(1.0 / feat), true);
        h.bias = Tensor::zeros({domains[d].classes}, true);
        m.heads.push_back(std::move(h));
      }
    }
  }
  return m;
}

inline void freeze_backbone(MultiDomainModel& m) {
  for (auto& cl : m.convs) cl.kernel.set_requires_grad(false);
}

// Deep copy: parameter tensors are cloned, not shared.
inline MultiDomainModel clone(const MultiDomainModel& src) {
  MultiDomainModel m = src;
  auto copy = [](const Tensor& t) {
    return Tensor::from_data(t.shape(), t.values(), t.requires_grad());
  };
  for (auto& cl : m.convs) {
    cl.kernel = copy(cl.kernel);
    for (auto& s : cl.switches) s = copy(s);
  }
  for (auto& bn : m.bns) {
    for (auto& g : bn.gamma) g = copy(g);
    for (auto& b : bn.beta) b = copy(b);
  }
  for (auto& h : m.heads) {
    h.weight = copy(h.weight);
    h.bias = copy(h.bias);
  }
  return m;
}

// Runs the network for one domain. Train mode scales channel contributions by
// the real switch values; eval mode thresholds them to binary first and uses
// batch-norm running statistics.
inline Tensor forward(MultiDomainModel& m, int domain, const Tensor& batch, Mode mode) {
  if (domain < 0 || domain >= m.num_domains())
    throw config_error("domain index " + std::to_string(domain) + " out of range");
  const bool train = mode == Mode::Train;
  const auto d = static_cast<std::size_t>(domain);
  std::vector<Tensor> outputs(m.arch.layers.size());
  Tensor x = batch;
  for (std::size_t i = 0; i < m.arch.layers.size(); ++i) {
    const LayerDesc& l = m.arch.layers[i];
    switch (l.kind) {
      case LayerKind::Conv: {
        ConvLayer& cl = m.convs[static_cast<std::size_t>(m.conv_at_layer[i])];
        const std::vector<int>* idx = cl.keep_map.empty() ? nullptr : &cl.keep_map;
        if (!cl.switches.empty()) {
          Tensor s = cl.switches[d];
          if (!train) {
            std::vector<double> bin(s.values().size());
            for (std::size_t j = 0; j < bin.size(); ++j)
              bin[j] = s.values()[j] > m.tau ? 1.0 : 0.0;
            s = Tensor::from_data(s.shape(), std::move(bin), false);
          }
          x = masked_conv2d(x, cl.kernel, s, l.stride, l.pad, idx);
        } else {
          x = conv2d(x, cl.kernel, l.stride, l.pad, idx);
        }
        if (l.residual_from >= 0)
          x = add(x, outputs[static_cast<std::size_t>(l.residual_from)]);
        break;
      }
      case LayerKind::BatchNorm: {
        BnLayer& bn = m.bns[static_cast<std::size_t>(m.bn_at_layer[i])];
        x = batchnorm2d(x, bn.gamma[d], bn.beta[d], bn.run_mean[d], bn.run_var[d], train);
        break;
      }
      case LayerKind::Relu:
        x = relu(x);
        break;
      case LayerKind::MaxPool:
        x = maxpool2d(x, l.pool_k, l.pool_stride);
        break;
      case LayerKind::GlobalAvgPool:
        x = global_avg_pool(x);
        break;
      case LayerKind::Linear:
        x = linear(x, m.heads[d].weight, m.heads[d].bias);
        break;
    }
    outputs[i] = x;
  }
  return x;
}

inline Tensor forward(MultiDomainModel& m, const std::string& domain, const Tensor& batch,
                      Mode mode) {
  return forward(m, m.domain_index(domain), batch, mode);
}

// Per-domain binary masks: [domain][masked conv ordinal][kernel slice].
struct BinaryMasks {
  std::vector<std::vector<std::vector<std::uint8_t>>> masks;
  std::vector<double> active_fraction;  // mean of binary switches per domain
};

inline BinaryMasks binarize_masks(const MultiDomainModel& m, double tau) {
  BinaryMasks out;
  out.masks.resize(static_cast<std::size_t>(m.num_domains()));
  out.active_fraction.assign(static_cast<std::size_t>(m.num_domains()), 0.0);
  for (int d = 0; d < m.num_domains(); ++d) {
    int total = 0, active = 0;
    for (const auto& cl : m.convs) {
      if (cl.switches.empty()) continue;
      const auto& sv = cl.switches[static_cast<std::size_t>(d)].values();
      std::vector<std::uint8_t> bits(sv.size());
      for (std::size_t i = 0; i < sv.size(); ++i) {
        bits[i] = sv[i] > tau ? 1 : 0;
        active += bits[i];
      }
      total += static_cast<int>(sv.size());
      out.masks[static_cast<std::size_t>(d)].push_back(std::move(bits));
    }
    out.active_fraction[static_cast<std::size_t>(d)] =
        total == 0 ? 0.0 : static_cast<double>(active) / total;
  }
  return out;
}

inline BinaryMasks binarize_masks(const MultiDomainModel& m) { return binarize_masks(m, m.tau); }

// ---------------------------------------------------------------------------
// Checkpoint container: a directory holding meta.json, arch.txt and
// weights.bin (named tensor blobs, f32 payloads).
// ---------------------------------------------------------------------------

inline void save_checkpoint(const MultiDomainModel& m, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  nlohmann::json meta;
  meta["format_version"] = 1;
  meta["arch_file"] = "arch.txt";
  meta["weights_file"] = "weights.bin";
  meta["seed"] = m.seed;
  meta["tau"] = m.tau;
  meta["ste_clip"] = m.ste_clip;
  nlohmann::json doms = nlohmann::json::array();
  for (const auto& d : m.domains) doms.push_back({{"name", d.name}, {"classes", d.classes}});
  meta["domains"] = doms;
  nlohmann::json keeps = nlohmann::json::array();
  for (const auto& cl : m.convs) keeps.push_back(cl.keep_map);
  meta["keep_maps"] = keeps;
  meta["training"] = {{"beta", m.beta_budget},
                      {"lambda_ps", m.lambda_ps},
                      {"lambda", m.lambda},
                      {"rounds_completed", m.rounds_completed}};
  write_file((dir / "meta.json").string(), meta.dump(2) + "\n");
  write_file((dir / "arch.txt").string(), m.arch.to_text());
  write_file((dir / "arch_ref.txt").string(), m.arch_ref.to_text());

  std::string blobs;
  for (std::size_t c = 0; c < m.convs.size(); ++c) {
    const ConvLayer& cl = m.convs[c];
    const std::string base = "conv" + std::to_string(c);
    append_named_blob(blobs, base + ".kernel", cl.kernel.shape(), cl.kernel.values());
    for (std::size_t d = 0; d < cl.switches.size(); ++d)
      append_named_blob(blobs, base + ".switch." + m.domains[d].name, cl.switches[d].shape(),
                        cl.switches[d].values());
  }
  for (std::size_t b = 0; b < m.bns.size(); ++b) {
    const BnLayer& bn = m.bns[b];
    const std::string base = "bn" + std::to_string(b);
    for (std::size_t d = 0; d < m.domains.size(); ++d) {
      const std::string dom = "." + m.domains[d].name;
      append_named_blob(blobs, base + ".gamma" + dom, bn.gamma[d].shape(), bn.gamma[d].values());
      append_named_blob(blobs, base + ".beta" + dom, bn.beta[d].shape(), bn.beta[d].values());
      const int c = static_cast<int>(bn.run_mean[d].size());
      append_named_blob(blobs, base + ".run_mean" + dom, {c}, bn.run_mean[d]);
      append_named_blob(blobs, base + ".run_var" + dom, {c}, bn.run_var[d]);
    }
  }
  for (std::size_t d = 0; d < m.domains.size(); ++d) {
    const std::string base = "head." + m.domains[d].name;
    append_named_blob(blobs, base + ".weight", m.heads[d].weight.shape(),
                      m.heads[d].weight.values());
    append_named_blob(blobs, base + ".bias", m.heads[d].bias.shape(), m.heads[d].bias.values());
  }
  write_file((dir / "weights.bin").string(), blobs);
}

inline MultiDomainModel load_checkpoint(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_file((dir / "meta.json").string()));
  } catch (const nlohmann::json::exception& e) {
    throw config_error("checkpoint meta.json is not valid json: " + std::string(e.what()));
  }

  std::vector<DomainInfo> domains;
  for (const auto& d : meta.at("domains"))
    domains.push_back({d.at("name").get<std::string>(), d.at("classes").get<int>()});

  ArchDescriptor arch = ArchDescriptor::parse(
      read_file((dir / meta.at("arch_file").get<std::string>()).string()));
  MultiDomainModel m =
      build_from_descriptor(arch, domains, meta.at("seed").get<std::uint64_t>());
  if (std::filesystem::exists(dir / "arch_ref.txt"))
    m.arch_ref = ArchDescriptor::parse(read_file((dir / "arch_ref.txt").string()));
  m.tau = meta.at("tau").get<double>();
  m.ste_clip = meta.at("ste_clip").get<double>();
  const auto& tr = meta.at("training");
  m.beta_budget = tr.at("beta").get<double>();
  m.lambda_ps = tr.at("lambda_ps").get<double>();
  m.lambda = tr.at("lambda").get<std::vector<double>>();
  m.rounds_completed = tr.at("rounds_completed").get<int>();
  const auto keeps = meta.at("keep_maps");
  if (keeps.size() != m.convs.size()) throw config_error("checkpoint keep_maps size mismatch");

  auto blobs = read_named_blobs(read_file((dir / meta.at("weights_file").get<std::string>())
                                              .string()));
  auto take = [&](const std::string& name, const Shape& want) -> std::vector<double> {
    auto it = blobs.find(name);
    if (it == blobs.end()) throw config_error("checkpoint missing tensor '" + name + "'");
    if (it->second.shape != want)
      throw config_error("checkpoint tensor '" + name + "' has shape " +
                         shape_str(it->second.shape) + ", expected " + shape_str(want));
    return std::move(it->second.data);
  };

  for (std::size_t c = 0; c < m.convs.size(); ++c) {
    ConvLayer& cl = m.convs[c];
    cl.keep_map = keeps[c].get<std::vector<int>>();
    if (!cl.keep_map.empty()) {
      // Compact layer: kernel slices cover only the kept input channels.
      const Shape ks = cl.kernel.shape();
      const int kept = static_cast<int>(cl.keep_map.size());
      cl.kernel = Tensor::zeros({ks[0], kept, ks[2], ks[3]});
      for (auto& s : cl.switches) s = Tensor::zeros({kept}, true);
    }
    const std::string base = "conv" + std::to_string(c);
    cl.kernel.values() = take(base + ".kernel", cl.kernel.shape());
    for (std::size_t d = 0; d < cl.switches.size(); ++d)
      cl.switches[d].values() =
          take(base + ".switch." + m.domains[d].name, cl.switches[d].shape());
  }
  for (std::size_t b = 0; b < m.bns.size(); ++b) {
    BnLayer& bn = m.bns[b];
    const std::string base = "bn" + std::to_string(b);
    for (std::size_t d = 0; d < m.domains.size(); ++d) {
      const std::string dom = "." + m.domains[d].name;
      bn.gamma[d].values() = take(base + ".gamma" + dom, bn.gamma[d].shape());
      bn.beta[d].values() = take(base + ".beta" + dom, bn.beta[d].shape());
      const int ch = static_cast<int>(bn.run_mean[d].size());
      bn.run_mean[d] = take(base + ".run_mean" + dom, {ch});
      bn.run_var[d] = take(base + ".run_var" + dom, {ch});
    }
  }
  for (std::size_t d = 0; d < m.domains.size(); ++d) {
    const std::string base = "head." + m.domains[d].name;
    m.heads[d].weight.values() = take(base + ".weight", m.heads[d].weight.shape());
    m.heads[d].bias.values() = take(base + ".bias", m.heads[d].bias.shape());
  }
  freeze_backbone(m);
  return m;
}

}  // namespace mdprune
