#pragma once

#include <algorithm>
#include <vector>

#include "mdprune/model.hpp"
#include "mdprune/ops.hpp"
#include "mdprune/tensor.hpp"

namespace mdprune {

// One domain's switch vectors in layer order, as used by the budget and
// sharing losses. The tensors are shared with the owning model.
struct DomainMaskSet {
  int domain = -1;
  std::vector<Tensor> switch_vectors;
  double tau = 0.0;
  double ste_clip = 1.0;

  int total_switches() const {
    int m = 0;
    for (const auto& s : switch_vectors) m += static_cast<int>(s.numel());
    return m;
  }
};

inline DomainMaskSet mask_set(MultiDomainModel& model, int domain) {
  DomainMaskSet ms;
  ms.domain = domain;
  ms.switch_vectors = model.domain_switches(domain);
  ms.tau = model.tau;
  ms.ste_clip = model.ste_clip;
  return ms;
}

inline std::vector<DomainMaskSet> all_mask_sets(MultiDomainModel& model) {
  std::vector<DomainMaskSet> out;
  for (int d = 0; d < model.num_domains(); ++d) out.push_back(mask_set(model, d));
  return out;
}

// Budget state of Eq.-4 style training: one non-negative KKT multiplier per
// domain, driven by dual ascent on the constraint mean(active) <= beta.
struct BudgetLossState {
  double beta = 1.0;
  std::vector<double> lambda;
  double lambda_lr = 0.01;

  BudgetLossState() = default;
  BudgetLossState(double beta_, int num_domains, double lr = 0.01)
      : beta(beta_), lambda(static_cast<std::size_t>(num_domains), 0.0), lambda_lr(lr) {
    if (beta <= 0.0 || beta > 1.0)
      throw std::invalid_argument("budget beta must be in (0,1], got " + std::to_string(beta));
  }
};

struct SharingLossConfig {
  double lambda_ps = 1.0;
  int switch_count = 0;  // M
  double tau = 0.0;
  double ste_clip = 1.0;

  void validate() const {
    if (lambda_ps < 0.0) throw std::invalid_argument("lambda_ps must be non-negative");
    if (switch_count <= 0) throw std::invalid_argument("switch count M must be positive");
  }
};

inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  return softmax_cross_entropy(logits, labels);
}

// Mean of the hard-binarized switches over every layer of one domain, with
// straight-through gradients so the budget can push real switches.
inline Tensor active_fraction(const DomainMaskSet& ms) {
  if (ms.switch_vectors.empty())
    throw std::invalid_argument("active_fraction: mask set has no switch vectors");
  const int m = ms.total_switches();
  Tensor acc;
  for (const auto& s : ms.switch_vectors) {
    Tensor part = sum(ste_binarize(s, ms.tau, ms.ste_clip));
    acc = acc.defined() ? add(acc, part) : part;
  }
  return mul_scalar(acc, 1.0 / static_cast<double>(m));
}

// L_B = max(0, lambda * (theta_bar - beta)).
inline Tensor budget_loss(const Tensor& theta_bar, double lambda, double beta) {
  return relu(mul_scalar(add_scalar(theta_bar, -beta), lambda));
}

inline Tensor budget_loss(const DomainMaskSet& ms, const BudgetLossState& state) {
  return budget_loss(active_fraction(ms), state.lambda.at(static_cast<std::size_t>(ms.domain)),
                     state.beta);
}

// Projected dual ascent: lambda <- max(0, lambda + lr * (theta_bar - beta)).
inline double update_multiplier(BudgetLossState& state, int domain, double theta_bar) {
  double& l = state.lambda.at(static_cast<std::size_t>(domain));
  l = std::max(0.0, l + state.lambda_lr * (theta_bar - state.beta));
  return l;
}

// |theta_1 ∩ ... ∩ theta_N|: per position, the product of every domain's
// binarized switch, summed over all positions and layers.
inline Tensor mask_intersection(const std::vector<DomainMaskSet>& sets) {
  if (sets.empty()) throw std::invalid_argument("mask_intersection: no domains");
  const std::size_t layers = sets[0].switch_vectors.size();
  for (const auto& ms : sets)
    if (ms.switch_vectors.size() != layers)
      throw std::invalid_argument("mask_intersection: mask sets differ in layer count");
  Tensor acc;
  for (std::size_t l = 0; l < layers; ++l) {
    Tensor inter = ste_binarize(sets[0].switch_vectors[l], sets[0].tau, sets[0].ste_clip);
    for (std::size_t d = 1; d < sets.size(); ++d) {
      const Tensor& s = sets[d].switch_vectors[l];
      if (s.shape() != inter.shape())
        throw std::invalid_argument("mask_intersection: switch shape mismatch at layer " +
                                    std::to_string(l) + ": " + shape_str(inter.shape()) +
                                    " vs " + shape_str(s.shape()));
      inter = mul(inter, ste_binarize(s, sets[d].tau, sets[d].ste_clip));
    }
    Tensor part = sum(inter);
    acc = acc.defined() ? add(acc, part) : part;
  }
  return acc;
}

// L_PS = max(0, lambda_PS * (1 - |∩| / (M * beta))). Callable with a single
// domain, in which case the caller is expected to flag the run as degenerate.
inline Tensor sharing_loss(const std::vector<DomainMaskSet>& sets, const SharingLossConfig& cfg,
                           double beta) {
  cfg.validate();
  Tensor inter = mask_intersection(sets);
  Tensor ratio_shortfall =
      add_scalar(mul_scalar(inter, -1.0 / (static_cast<double>(cfg.switch_count) * beta)), 1.0);
  return relu(mul_scalar(ratio_shortfall, cfg.lambda_ps));
}

inline Tensor total_loss(const Tensor& ce, const Tensor& lb, const Tensor& lps) {
  return add(add(ce, lb), lps);
}

}  // namespace mdprune
