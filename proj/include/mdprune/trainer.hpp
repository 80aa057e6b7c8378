#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <iostream>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdprune/datakit.hpp"
#include "mdprune/model.hpp"
#include "mdprune/objective.hpp"
#include "mdprune/optim.hpp"

namespace mdprune {

struct TrainConfig {
  double beta = 0.5;
  double lambda_ps = 1.0;
  int rounds = 10;  // epochs per domain
  int batch_size = 16;
  double classifier_lr = 1e-3;
  double mask_lr = 1e-4;
  std::vector<int> lr_decay_rounds = {7};  // 1-based round at whose start lr drops
  double lr_decay_factor = 10.0;
  double momentum = 0.9;
  double lambda_lr = 0.01;
  std::uint64_t seed = 0;
  std::vector<std::string> hflip_domains;  // horizontal flip augmentation, off by default
  bool train_backbone = false;             // test convenience; the protocol keeps it frozen

  void validate() const {
    if (beta <= 0.0 || beta > 1.0)
      throw config_error("beta must be in (0,1], got " + std::to_string(beta));
    if (lambda_ps < 0.0) throw config_error("lambda_ps must be non-negative");
    if (rounds < 1) throw config_error("rounds must be >= 1, got " + std::to_string(rounds));
    if (batch_size < 1) throw config_error("batch_size must be >= 1");
    if (classifier_lr <= 0.0 || mask_lr <= 0.0) throw config_error("learning rates must be > 0");
    if (lr_decay_factor <= 0.0) throw config_error("lr_decay_factor must be > 0");
    if (momentum < 0.0 || momentum >= 1.0) throw config_error("momentum must be in [0,1)");
  }
};

struct StepRecord {
  int step = 0;
  int round = 0;
  std::string domain;
  double ce = 0, lb = 0, lps = 0, total = 0;
  std::vector<double> lambda;
  std::vector<double> theta_bar;
  double intersection_fraction = 0;

  nlohmann::json to_json() const {
    return {{"type", "step"},          {"step", step},
            {"round", round},          {"domain", domain},
            {"ce", ce},                {"lb", lb},
            {"lps", lps},              {"total", total},
            {"lambda", lambda},        {"theta_bar", theta_bar},
            {"intersection_fraction", intersection_fraction}};
  }
};

struct TrainResult {
  std::vector<StepRecord> history;
};

namespace detail {

inline std::vector<double> fresh_theta_bars(const MultiDomainModel& m) {
  return binarize_masks(m).active_fraction;
}

inline double fresh_intersection_fraction(const MultiDomainModel& m) {
  const BinaryMasks bm = binarize_masks(m);
  const int total = m.switch_count();
  if (total == 0 || bm.masks.empty()) return 0.0;
  int inter = 0;
  const auto& first = bm.masks[0];
  for (std::size_t l = 0; l < first.size(); ++l)
    for (std::size_t i = 0; i < first[l].size(); ++i) {
      bool all = true;
      for (const auto& dom : bm.masks)
        if (!dom[l][i]) {
          all = false;
          break;
        }
      inter += all ? 1 : 0;
    }
  return static_cast<double>(inter) / total;
}

}  // namespace detail

// Round-robin simultaneous training: every round shuffles the domain order
// and runs one epoch per domain. Masks (all domains, since the sharing loss
// reaches them all) take adaptive steps; the current domain's batch-norm and
// head take momentum-SGD steps; the current domain's multiplier is updated
// after the parameter step from the fresh active fraction.
inline TrainResult train(MultiDomainModel& model, const std::vector<DomainSplits>& data,
                         const TrainConfig& cfg, std::ostream* log = nullptr,
                         const std::function<void(int, MultiDomainModel&)>& on_round_end = {}) {
  cfg.validate();
  const int num_domains = model.num_domains();
  if (static_cast<int>(data.size()) != num_domains)
    throw config_error("got datasets for " + std::to_string(data.size()) + " domains, model has " +
                       std::to_string(num_domains));
  for (int d = 0; d < num_domains; ++d) {
    if (data[static_cast<std::size_t>(d)].train.domain != model.domains[static_cast<std::size_t>(d)].name)
      throw config_error("dataset order does not match domain registry at index " +
                         std::to_string(d));
    if (data[static_cast<std::size_t>(d)].train.size() == 0)
      throw config_error("empty train split for domain '" +
                         model.domains[static_cast<std::size_t>(d)].name + "'");
  }
  if (num_domains < 2)
    std::cerr << "[mdprune] warning: sharing loss is degenerate with fewer than 2 domains\n";

  if (cfg.train_backbone)
    for (auto& cl : model.convs) cl.kernel.set_requires_grad(true);

  model.beta_budget = cfg.beta;
  model.lambda_ps = cfg.lambda_ps;
  model.seed = cfg.seed;

  BudgetLossState budget(cfg.beta, num_domains, cfg.lambda_lr);
  budget.lambda = model.lambda;  // resume if the checkpoint carried multipliers
  const bool has_masks = model.switch_count() > 0;
  SharingLossConfig sharing{cfg.lambda_ps, std::max(1, model.switch_count()), model.tau,
                            model.ste_clip};

  Adam mask_opt(model.all_switches(), cfg.mask_lr);
  std::vector<SgdMomentum> domain_opts;
  for (int d = 0; d < num_domains; ++d) {
    auto params = model.domain_parameters(d);
    if (cfg.train_backbone) {
      auto ks = model.backbone_kernels();
      params.insert(params.end(), ks.begin(), ks.end());
    }
    domain_opts.emplace_back(std::move(params), cfg.classifier_lr, cfg.momentum);
  }

  if (log) {
    nlohmann::json meta = {{"type", "meta"},
                           {"beta", cfg.beta},
                           {"lambda_ps", cfg.lambda_ps},
                           {"seed", cfg.seed},
                           {"rounds", cfg.rounds},
                           {"batch_size", cfg.batch_size},
                           {"degenerate_sharing", num_domains < 2}};
    nlohmann::json doms = nlohmann::json::array();
    for (const auto& d : model.domains) doms.push_back(d.name);
    meta["domains"] = doms;
    *log << meta.dump() << "\n";
  }

  TrainResult result;
  Rng root(cfg.seed);
  int global_step = 0;
  for (int round = 1; round <= cfg.rounds; ++round) {
    if (std::find(cfg.lr_decay_rounds.begin(), cfg.lr_decay_rounds.end(), round) !=
        cfg.lr_decay_rounds.end()) {
      mask_opt.set_lr(mask_opt.lr() / cfg.lr_decay_factor);
      for (auto& opt : domain_opts) opt.set_lr(opt.lr() / cfg.lr_decay_factor);
    }

    std::vector<int> order(static_cast<std::size_t>(num_domains));
    for (int d = 0; d < num_domains; ++d) order[static_cast<std::size_t>(d)] = d;
    Rng order_rng = root.split("order").split(static_cast<std::uint64_t>(round));
    order_rng.shuffle(order);

    for (int d : order) {
      const DomainDataset& train_ds = data[static_cast<std::size_t>(d)].train;
      const std::string& dom_name = model.domains[static_cast<std::size_t>(d)].name;
      const bool flip = std::find(cfg.hflip_domains.begin(), cfg.hflip_domains.end(),
                                  dom_name) != cfg.hflip_domains.end();
      Rng flip_rng =
          root.split("flip." + dom_name).split(static_cast<std::uint64_t>(round));
      const std::vector<std::size_t> idx = epoch_order(train_ds, cfg.seed, round);

      for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t stop = std::min(idx.size(), start + static_cast<std::size_t>(cfg.batch_size));
        std::vector<std::size_t> batch_idx(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                           idx.begin() + static_cast<std::ptrdiff_t>(stop));
        std::vector<int> labels;
        Tensor batch = make_batch(train_ds, batch_idx, labels, flip ? &flip_rng : nullptr);

        mask_opt.zero_grad();
        domain_opts[static_cast<std::size_t>(d)].zero_grad();

        Tensor logits = forward(model, d, batch, Mode::Train);
        Tensor ce = cross_entropy(logits, labels);
        Tensor lb = Tensor::scalar(0.0);
        Tensor lps = Tensor::scalar(0.0);
        if (has_masks) {
          const auto sets = all_mask_sets(model);
          lb = budget_loss(sets[static_cast<std::size_t>(d)], budget);
          lps = sharing_loss(sets, sharing, cfg.beta);
        }
        Tensor total = total_loss(ce, lb, lps);

        StepRecord rec;
        rec.step = global_step;
        rec.round = round;
        rec.domain = dom_name;
        rec.ce = ce.item();
        rec.lb = lb.item();
        rec.lps = lps.item();
        rec.total = total.item();
        if (!std::isfinite(rec.total)) {
          rec.lambda = budget.lambda;
          rec.theta_bar = detail::fresh_theta_bars(model);
          rec.intersection_fraction = detail::fresh_intersection_fraction(model);
          const std::string dump = rec.to_json().dump();
          if (log) *log << dump << "\n";
          std::cerr << "[mdprune] non-finite loss, last step: " << dump << "\n";
          throw std::runtime_error("training diverged: non-finite loss at step " +
                                   std::to_string(global_step));
        }

        total.backward();
        mask_opt.step();
        domain_opts[static_cast<std::size_t>(d)].step();

        rec.theta_bar = detail::fresh_theta_bars(model);
        update_multiplier(budget, d, rec.theta_bar[static_cast<std::size_t>(d)]);
        rec.lambda = budget.lambda;
        rec.intersection_fraction = detail::fresh_intersection_fraction(model);

        if (log) *log << rec.to_json().dump() << "\n";
        result.history.push_back(std::move(rec));
        ++global_step;
      }
    }

    model.lambda = budget.lambda;
    model.rounds_completed = round;
    if (on_round_end) on_round_end(round, model);
  }
  return result;
}

// Top-1 accuracy in eval mode (binarized switches, running batch-norm stats).
inline double evaluate(MultiDomainModel& model, const DomainDataset& ds, int domain,
                       int batch_size = 64) {
  if (ds.size() == 0) throw config_error("evaluate: empty dataset for domain index " +
                                         std::to_string(domain));
  std::size_t correct = 0;
  for (std::size_t start = 0; start < ds.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t stop = std::min(ds.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<std::size_t> idx(stop - start);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    std::vector<int> labels;
    Tensor batch = make_batch(ds, idx, labels);
    Tensor logits = forward(model, domain, batch, Mode::Eval);
    const int k = logits.dim(1);
    const auto& lv = logits.values();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      int best = 0;
      const double* row = &lv[i * static_cast<std::size_t>(k)];
      for (int j = 1; j < k; ++j)
        if (row[j] > row[best]) best = j;  // first maximum wins
      if (best == labels[i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

inline double evaluate(MultiDomainModel& model, const DomainDataset& ds,
                       const std::string& domain, int batch_size = 64) {
  return evaluate(model, ds, model.domain_index(domain), batch_size);
}

}  // namespace mdprune
