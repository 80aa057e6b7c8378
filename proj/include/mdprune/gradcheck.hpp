#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mdprune/model.hpp"
#include "mdprune/objective.hpp"
#include "mdprune/ops.hpp"

namespace mdprune {

// Central finite differences against the recorded gradients. Probes re-run
// the forward closure with perturbed leaf values, so the check is blind to
// the backward implementation.
struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t checks = 0;
};

inline double fd_rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

inline GradCheckResult finite_difference_check(const std::string& name,
                                               const std::function<Tensor()>& f,
                                               std::vector<Tensor> params, double h = 1e-6) {
  for (auto& p : params) p.zero_grad();
  f().backward();
  GradCheckResult r{name, 0.0, 0};
  for (auto& p : params) {
    const std::vector<double> ad = p.grad();
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double keep = p.values()[i];
      p.values()[i] = keep + h;
      const double fp = f().item();
      p.values()[i] = keep - h;
      const double fm = f().item();
      p.values()[i] = keep;
      r.max_rel_err = std::max(r.max_rel_err, fd_rel_err(ad[i], (fp - fm) / (2.0 * h)));
      ++r.checks;
    }
  }
  return r;
}

// The standard sweep run by the `gradcheck` CLI command: every differentiable
// operation plus the composite training loss. The straight-through stages are
// non-differentiable by construction, so the composite is probed through the
// parameters where the true derivative exists (heads, batch norm, inputs, and
// the cross-entropy path of the switches with the hinge terms inactive).
inline std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t seed, int instances = 50) {
  std::vector<GradCheckResult> out;
  Rng root(seed);

  auto rand_tensor = [](Shape shape, Rng& rng, double margin = 0.0) {
    std::vector<double> d(shape_numel(shape));
    for (double& v : d) {
      do {
        v = rng.uniform(-1.0, 1.0);
      } while (margin > 0.0 && std::abs(v) < margin);
    }
    return Tensor::from_data(std::move(shape), std::move(d), true);
  };

  for (int inst = 0; inst < instances; ++inst) {
    Rng rng = root.split(static_cast<std::uint64_t>(inst));
    const std::string tag = "#" + std::to_string(inst);
    const int c = 1 + static_cast<int>(rng.below(3));
    const int n = 1 + static_cast<int>(rng.below(2));
    const int hw = 4 + static_cast<int>(rng.below(3));

    switch (inst % 6) {
      case 0: {
        Tensor in = rand_tensor({n, c, hw, hw}, rng);
        Tensor k = rand_tensor({2, c, 3, 3}, rng);
        Tensor sw = rand_tensor({c}, rng, 0.05);
        out.push_back(finite_difference_check(
            "masked_conv2d" + tag, [&] { return sum(masked_conv2d(in, k, sw, 1, 1)); },
            {in, k, sw}));
        break;
      }
      case 1: {
        Tensor in = rand_tensor({n, c, hw, hw}, rng);
        Tensor gamma = rand_tensor({c}, rng, 0.2);
        Tensor beta = rand_tensor({c}, rng);
        std::vector<double> rm(static_cast<std::size_t>(c), 0.1);
        std::vector<double> rv(static_cast<std::size_t>(c), 0.9);
        const bool training = inst % 2 == 0;
        out.push_back(finite_difference_check(
            std::string("batchnorm2d.") + (training ? "train" : "eval") + tag,
            [&] {
              auto rmc = rm;
              auto rvc = rv;
              return mean(batchnorm2d(in, gamma, beta, rmc, rvc, training));
            },
            {in, gamma, beta}));
        break;
      }
      case 2: {
        Tensor a = rand_tensor({3, 4}, rng);
        Tensor b = rand_tensor({4, 2}, rng);
        Tensor bias = rand_tensor({2}, rng);
        out.push_back(finite_difference_check(
            "matmul+linear" + tag, [&] { return sum(linear(matmul(a, b), b, bias)); },
            {a, b, bias}));
        break;
      }
      case 3: {
        Tensor x = rand_tensor({n, c, 4, 4}, rng, 0.02);
        out.push_back(finite_difference_check(
            "pool+relu" + tag, [&] { return sum(global_avg_pool(maxpool2d(relu(x), 2))); },
            {x}));
        break;
      }
      case 4: {
        Tensor logits = rand_tensor({3, 4}, rng);
        std::vector<int> labels{static_cast<int>(rng.below(4)), static_cast<int>(rng.below(4)),
                                static_cast<int>(rng.below(4))};
        out.push_back(finite_difference_check(
            "softmax_cross_entropy" + tag,
            [&] { return softmax_cross_entropy(logits, labels); }, {logits}));
        break;
      }
      case 5: {
        // composite L_total on a tiny two-domain masked model
        const std::string tiny =
            "conv in=2 out=3 k=3 stride=1 pad=1 masked=1\n"
            "bn\nrelu\ngap\nlinear\n";
        MultiDomainModel m = build_from_descriptor(ArchDescriptor::parse(tiny),
                                                   {{"p", 2}, {"q", 3}}, rng.next_u64());
        for (auto& cl : m.convs)
          for (auto& s : cl.switches)
            for (double& v : s.values()) v = rng.uniform(0.1, 0.9);
        Tensor batch = rand_tensor({2, 2, 4, 4}, rng);
        batch.set_requires_grad(true);
        std::vector<int> labels{0, 1};
        BudgetLossState budget(0.5, 2);
        budget.lambda = {0.7, 0.4};
        SharingLossConfig sharing{0.8, m.switch_count(), m.tau, m.ste_clip};

        auto composite = [&] {
          Tensor ce = cross_entropy(forward(m, 0, batch, Mode::Train), labels);
          auto sets = all_mask_sets(m);
          return total_loss(ce, budget_loss(sets[0], budget),
                            sharing_loss(sets, sharing, budget.beta));
        };
        std::vector<Tensor> smooth_params{batch, m.heads[0].weight, m.heads[0].bias,
                                          m.bns[0].gamma[0], m.bns[0].beta[0]};
        out.push_back(
            finite_difference_check("L_total.smooth-params" + tag, composite, smooth_params));

        // switch gradients through the cross-entropy path alone
        budget.lambda = {0.0, 0.0};
        sharing.lambda_ps = 0.0;
        out.push_back(finite_difference_check("L_total.switch-ce-path" + tag, composite,
                                              {m.convs[0].switches[0]}));
        break;
      }
    }
  }
  return out;
}

}  // namespace mdprune
