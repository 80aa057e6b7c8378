#pragma once

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdprune/model.hpp"

namespace mdprune {

// ---------------------------------------------------------------------------
// MAC counting. Convention: one MAC per multiply-add; convolutions count
// H'*W'*O*|active input channels|*kh*kw, linear layers in*out; batch norm,
// activations and pooling are excluded. Masked layers count only the
// channels whose binarized switch is active for the requested domain.
// ---------------------------------------------------------------------------

namespace detail {

struct MacWalk {
  long long macs = 0;
  int h = 0, w = 0, channels = 0;
};

inline void mac_conv(MacWalk& s, const LayerDesc& l, int active_slices) {
  const int oh = (s.h + 2 * l.pad - l.kernel) / l.stride + 1;
  const int ow = (s.w + 2 * l.pad - l.kernel) / l.stride + 1;
  s.macs += static_cast<long long>(oh) * ow * l.out_ch * active_slices * l.kernel * l.kernel;
  s.h = oh;
  s.w = ow;
  s.channels = l.out_ch;
}

inline void mac_pool(MacWalk& s, const LayerDesc& l) {
  s.h = (s.h - l.pool_k) / l.pool_stride + 1;
  s.w = (s.w - l.pool_k) / l.pool_stride + 1;
}

}  // namespace detail

// MACs of one eval-mode pass for one domain at the given input size.
inline long long count_macs(const MultiDomainModel& m, int domain, int input_h = 32,
                            int input_w = 32) {
  detail::MacWalk s{0, input_h, input_w, 0};
  for (std::size_t i = 0; i < m.arch.layers.size(); ++i) {
    const LayerDesc& l = m.arch.layers[i];
    switch (l.kind) {
      case LayerKind::Conv: {
        const ConvLayer& cl = m.convs[static_cast<std::size_t>(m.conv_at_layer[i])];
        int active = cl.in_slices();
        if (!cl.switches.empty()) {
          active = 0;
          for (double v : cl.switches[static_cast<std::size_t>(domain)].values())
            if (v > m.tau) ++active;
        }
        detail::mac_conv(s, l, active);
        break;
      }
      case LayerKind::MaxPool:
        detail::mac_pool(s, l);
        break;
      case LayerKind::GlobalAvgPool:
        break;
      case LayerKind::Linear:
        s.macs += static_cast<long long>(l.channels) *
                  m.domains[static_cast<std::size_t>(domain)].classes;
        break;
      case LayerKind::BatchNorm:
      case LayerKind::Relu:
        break;
    }
  }
  return s.macs;
}

// MACs of the unmasked reference backbone (all channels) with one head.
inline long long count_macs_backbone(const ArchDescriptor& arch, int classes, int input_h = 32,
                                     int input_w = 32) {
  detail::MacWalk s{0, input_h, input_w, 0};
  for (const LayerDesc& l : arch.layers) {
    switch (l.kind) {
      case LayerKind::Conv:
        detail::mac_conv(s, l, l.in_ch);
        break;
      case LayerKind::MaxPool:
        detail::mac_pool(s, l);
        break;
      case LayerKind::Linear:
        s.macs += static_cast<long long>(l.channels) * classes;
        break;
      default:
        break;
    }
  }
  return s.macs;
}

// Per-domain MAC ratio vs the unpruned, unmasked backbone, and its mean.
inline std::vector<double> mac_ratios(const MultiDomainModel& m, int input_h = 32,
                                      int input_w = 32) {
  std::vector<double> out;
  for (int d = 0; d < m.num_domains(); ++d) {
    const long long full = count_macs_backbone(
        m.arch_ref, m.domains[static_cast<std::size_t>(d)].classes, input_h, input_w);
    out.push_back(static_cast<double>(count_macs(m, d, input_h, input_w)) /
                  static_cast<double>(full));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameter memory. Counting rule: shared backbone floats at 4 bytes; each
// domain adds its batch-norm floats (gamma, beta, running mean, running var)
// at 4 bytes and its switches at 1 bit, rounded up to whole bytes per switch
// vector. Classifier heads are excluded. The reference is the unmasked
// single-domain backbone: original backbone floats plus one batch-norm set
// (models with no registered domain are compared to the bare backbone).
// ---------------------------------------------------------------------------

struct ParamBytes {
  long long backbone = 0;     // shared kernels
  long long bn_per_domain = 0;
  long long mask_per_domain = 0;
  int domains = 0;

  long long total() const { return backbone + domains * (bn_per_domain + mask_per_domain); }
};

inline ParamBytes count_param_bytes(const MultiDomainModel& m) {
  ParamBytes pb;
  pb.domains = m.num_domains();
  for (const auto& cl : m.convs)
    pb.backbone += static_cast<long long>(cl.kernel.numel()) * 4;
  for (const auto& bn : m.bns) {
    if (bn.gamma.empty()) continue;
    pb.bn_per_domain += static_cast<long long>(bn.gamma[0].numel()) * 4 * 4;
  }
  for (const auto& cl : m.convs) {
    if (cl.switches.empty()) continue;
    pb.mask_per_domain += (cl.in_slices() + 7) / 8;
  }
  return pb;
}

inline long long count_param_bytes_backbone(const ArchDescriptor& arch, bool with_bn_set) {
  long long bytes = 0;
  for (const LayerDesc& l : arch.layers) {
    if (l.kind == LayerKind::Conv)
      bytes += static_cast<long long>(l.out_ch) * l.in_ch * l.kernel * l.kernel * 4;
    else if (l.kind == LayerKind::BatchNorm && with_bn_set)
      bytes += static_cast<long long>(l.channels) * 4 * 4;
  }
  return bytes;
}

inline double param_ratio(const MultiDomainModel& m) {
  const ParamBytes pb = count_param_bytes(m);
  const long long denom = count_param_bytes_backbone(m.arch_ref, pb.domains > 0);
  return static_cast<double>(pb.total()) / static_cast<double>(denom);
}

// ---------------------------------------------------------------------------
// S-score family. S = sum_d alpha_d * max(0, err_max_d - err_d)^gamma_d with
// alpha_d * err_max_d^gamma_d = 1000 per domain, so each domain contributes
// at most 1000 points (10 domains -> 10000 max).
// ---------------------------------------------------------------------------

struct SScoreDomain {
  double baseline_err = 0.5;
  double err_max = 0.0;  // 0: default 2 * baseline
  double gamma = 2.0;
  double alpha = 0.0;  // 0: forced by the 1000-point invariant
};

struct SScoreConfig {
  std::vector<SScoreDomain> domains;

  static SScoreConfig from_baselines(const std::vector<double>& baseline_errs) {
    SScoreConfig cfg;
    for (double b : baseline_errs) cfg.domains.push_back({b, 0.0, 2.0, 0.0});
    cfg.resolve();
    return cfg;
  }

  void resolve() {
    for (auto& d : domains) {
      if (d.err_max <= 0.0) d.err_max = 2.0 * d.baseline_err;
      if (d.err_max <= 0.0) throw std::invalid_argument("s_score: err_max must be positive");
      if (d.alpha <= 0.0) d.alpha = 1000.0 / std::pow(d.err_max, d.gamma);
      const double budget = d.alpha * std::pow(d.err_max, d.gamma);
      if (std::abs(budget - 1000.0) > 1e-6 * 1000.0)
        throw std::invalid_argument(
            "s_score: alpha * err_max^gamma must equal 1000 per domain, got " +
            std::to_string(budget));
    }
  }
};

inline double s_score(const std::vector<double>& errors, const SScoreConfig& cfg) {
  if (errors.size() != cfg.domains.size())
    throw std::invalid_argument("s_score: " + std::to_string(errors.size()) + " errors for " +
                                std::to_string(cfg.domains.size()) + " domains");
  double s = 0.0;
  for (std::size_t d = 0; d < errors.size(); ++d) {
    const double err = errors[d];
    if (err < 0.0 || err > 1.0)
      throw std::invalid_argument("s_score: error " + std::to_string(err) + " outside [0,1]");
    const auto& dc = cfg.domains[d];
    s += dc.alpha * std::pow(std::max(0.0, dc.err_max - err), dc.gamma);
  }
  return s;
}

struct SPerCost {
  double s_o = 0.0;  // S per operation  (S / mac_ratio)
  double s_p = 0.0;  // S per parameter  (S / param_ratio)
};

inline SPerCost s_per_cost(double s, double mac_ratio, double param_ratio) {
  if (mac_ratio <= 0.0 || param_ratio <= 0.0)
    throw std::invalid_argument("s_per_cost: ratios must be positive");
  return {s / mac_ratio, s / param_ratio};
}

// ---------------------------------------------------------------------------
// CostReport
// ---------------------------------------------------------------------------

struct CostReport {
  double beta = 0.0;
  double lambda_ps = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::string> domain_names;
  std::vector<double> accuracies;
  std::vector<long long> macs;
  long long param_bytes = 0;
  double mac_ratio = 0.0;  // mean over domains
  double param_ratio = 0.0;
  double s = 0.0, s_o = 0.0, s_p = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["schema"] = "mdprune-cost-report-v1";
    j["beta"] = beta;
    j["lambda_ps"] = lambda_ps;
    j["seed"] = seed;
    j["domains"] = domain_names;
    j["accuracy"] = accuracies;
    j["macs"] = macs;
    j["param_bytes"] = param_bytes;
    j["mac_ratio"] = mac_ratio;
    j["param_ratio"] = param_ratio;
    j["s"] = s;
    j["s_o"] = s_o;
    j["s_p"] = s_p;
    return j;
  }

  // One row per model; the header carries the per-domain accuracy columns.
  std::string csv_header() const {
    std::string h = "beta,lambda_ps,seed";
    for (const auto& d : domain_names) h += ",acc_" + d;
    return h + ",mac_ratio,param_ratio,S,S_O,S_P";
  }

  std::string csv_row() const {
    std::ostringstream os;
    os.precision(10);
    os << beta << "," << lambda_ps << "," << seed;
    for (double a : accuracies) os << "," << a;
    os << "," << mac_ratio << "," << param_ratio << "," << s << "," << s_o << "," << s_p;
    return os.str();
  }
};

// Fills the cost side of the report (accuracy and scores are the caller's).
inline CostReport cost_report(const MultiDomainModel& m, int input_h = 32, int input_w = 32) {
  CostReport r;
  r.beta = m.beta_budget;
  r.lambda_ps = m.lambda_ps;
  r.seed = m.seed;
  for (const auto& d : m.domains) r.domain_names.push_back(d.name);
  for (int d = 0; d < m.num_domains(); ++d) r.macs.push_back(count_macs(m, d, input_h, input_w));
  const auto ratios = mac_ratios(m, input_h, input_w);
  double sum = 0.0;
  for (double x : ratios) sum += x;
  r.mac_ratio = ratios.empty() ? 1.0 : sum / static_cast<double>(ratios.size());
  r.param_bytes = count_param_bytes(m).total();
  r.param_ratio = param_ratio(m);
  return r;
}

}  // namespace mdprune
