#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <vector>

#include "mdprune/tensor.hpp"

namespace mdprune {

namespace detail {

struct ConvDims {
  int n, c, h, w;    // input
  int o, kh, kw;     // kernel
  int oh, ow;        // output
};

// Validates shapes and the exact-division output-size rule.
inline ConvDims conv_dims(const Tensor& input, const Tensor& kernel, int stride, int padding,
                          const std::vector<int>* in_index) {
  if (input.shape().size() != 4 || kernel.shape().size() != 4) {
    throw std::invalid_argument("conv2d: expected 4-d input and kernel, got " +
                                shape_str(input.shape()) + " and " + shape_str(kernel.shape()));
  }
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be positive");
  if (padding < 0) throw std::invalid_argument("conv2d: padding must be non-negative");
  ConvDims d{};
  d.n = input.dim(0);
  d.c = kernel.dim(1);
  d.h = input.dim(2);
  d.w = input.dim(3);
  d.o = kernel.dim(0);
  d.kh = kernel.dim(2);
  d.kw = kernel.dim(3);
  if (in_index) {
    if (static_cast<int>(in_index->size()) != d.c) {
      throw std::invalid_argument("conv2d: channel index map size " +
                                  std::to_string(in_index->size()) + " vs kernel " +
                                  shape_str(kernel.shape()));
    }
    for (int ci : *in_index)
      if (ci < 0 || ci >= input.dim(1))
        throw std::invalid_argument("conv2d: channel index " + std::to_string(ci) +
                                    " out of range for input " + shape_str(input.shape()));
  } else if (input.dim(1) != d.c) {
    throw std::invalid_argument("conv2d: input channels mismatch: input " +
                                shape_str(input.shape()) + " vs kernel " +
                                shape_str(kernel.shape()));
  }
  const int eh = d.h + 2 * padding - d.kh;
  const int ew = d.w + 2 * padding - d.kw;
  if (eh < 0 || ew < 0 || eh % stride != 0 || ew % stride != 0) {
    throw std::invalid_argument("conv2d: non-integral output size for input " +
                                shape_str(input.shape()) + ", kernel " + shape_str(kernel.shape()) +
                                ", stride " + std::to_string(stride) + ", padding " +
                                std::to_string(padding));
  }
  d.oh = eh / stride + 1;
  d.ow = ew / stride + 1;
  return d;
}

// Shared direct-loop convolution. Per output element the per-channel
// contribution phi_c is accumulated over the taps first and then scaled by
// the channel switch, so that summation order matches the per-channel form
// m = sum_c s_c * phi_c exactly in f64.
//
// `switches` may be null (plain convolution) and `in_index` may be null
// (identity channel map); in_index[c] names the input-feature channel read
// by kernel slice c, which is how compact pruned layers address their
// original inputs.
inline Tensor conv2d_impl(const Tensor& input, const Tensor& kernel, const Tensor* switches,
                          int stride, int padding, const std::vector<int>* in_index) {
  if (switches) {
    if (switches->shape().size() != 1 || switches->dim(0) != kernel.dim(1)) {
      throw std::invalid_argument("conv2d: switch vector " + shape_str(switches->shape()) +
                                  " does not match kernel input channels " +
                                  shape_str(kernel.shape()));
    }
  }
  const ConvDims d = conv_dims(input, kernel, stride, padding, in_index);
  const int in_c = input.dim(1);
  const auto& iv = input.values();
  const auto& kv = kernel.values();
  const double* sv = switches ? switches->values().data() : nullptr;

  std::vector<double> out(static_cast<std::size_t>(d.n) * d.o * d.oh * d.ow);
  std::size_t oi = 0;
  for (int n = 0; n < d.n; ++n)
    for (int o = 0; o < d.o; ++o)
      for (int oy = 0; oy < d.oh; ++oy)
        for (int ox = 0; ox < d.ow; ++ox, ++oi) {
          const int iy0 = oy * stride - padding;
          const int ix0 = ox * stride - padding;
          double acc = 0.0;
          for (int c = 0; c < d.c; ++c) {
            const int ci = in_index ? (*in_index)[static_cast<std::size_t>(c)] : c;
            const double* kbase = &kv[(static_cast<std::size_t>(o) * d.c + c) *
                                      static_cast<std::size_t>(d.kh) * d.kw];
            const double* ibase =
                &iv[(static_cast<std::size_t>(n) * in_c + ci) * static_cast<std::size_t>(d.h) *
                    d.w];
            double phi = 0.0;
            for (int ky = 0; ky < d.kh; ++ky) {
              const int iy = iy0 + ky;
              if (iy < 0 || iy >= d.h) continue;
              const double* krow = kbase + static_cast<std::size_t>(ky) * d.kw;
              const double* irow = ibase + static_cast<std::size_t>(iy) * d.w;
              for (int kx = 0; kx < d.kw; ++kx) {
                const int ix = ix0 + kx;
                if (ix < 0 || ix >= d.w) continue;
                phi += krow[kx] * irow[ix];
              }
            }
            acc += sv ? sv[c] * phi : phi;
          }
          out[oi] = acc;
        }

  std::vector<std::shared_ptr<detail::Node>> parents = {input.node(), kernel.node()};
  if (switches) parents.push_back(switches->node());
  std::vector<int> index_copy = in_index ? *in_index : std::vector<int>{};
  const bool has_switch = switches != nullptr;
  auto backprop = [d, in_c, stride, padding, has_switch,
                   index = std::move(index_copy)](detail::Node& node) {
    auto& pin = *node.parents[0];
    auto& pker = *node.parents[1];
    detail::Node* psw = has_switch ? node.parents[2].get() : nullptr;
    const bool need_in = pin.requires_grad;
    const bool need_ker = pker.requires_grad;
    const bool need_sw = psw && psw->requires_grad;
    if (!need_in && !need_ker && !need_sw) return;
    const double* sv = has_switch ? psw->value.data() : nullptr;

    std::size_t oi = 0;
    for (int n = 0; n < d.n; ++n)
      for (int o = 0; o < d.o; ++o)
        for (int oy = 0; oy < d.oh; ++oy)
          for (int ox = 0; ox < d.ow; ++ox, ++oi) {
            const double g = node.grad[oi];
            if (g == 0.0) continue;
            const int iy0 = oy * stride - padding;
            const int ix0 = ox * stride - padding;
            for (int c = 0; c < d.c; ++c) {
              const int ci = index.empty() ? c : index[static_cast<std::size_t>(c)];
              const double s = sv ? sv[c] : 1.0;
              const std::size_t kbase =
                  (static_cast<std::size_t>(o) * d.c + c) * static_cast<std::size_t>(d.kh) * d.kw;
              const std::size_t ibase = (static_cast<std::size_t>(n) * in_c + ci) *
                                        static_cast<std::size_t>(d.h) * d.w;
              double phi = 0.0;
              for (int ky = 0; ky < d.kh; ++ky) {
                const int iy = iy0 + ky;
                if (iy < 0 || iy >= d.h) continue;
                const std::size_t krow = kbase + static_cast<std::size_t>(ky) * d.kw;
                const std::size_t irow = ibase + static_cast<std::size_t>(iy) * d.w;
                for (int kx = 0; kx < d.kw; ++kx) {
                  const int ix = ix0 + kx;
                  if (ix < 0 || ix >= d.w) continue;
                  const double kval = pker.value[krow + kx];
                  const double ival = pin.value[irow + ix];
                  if (need_sw) phi += kval * ival;
                  if (need_ker) pker.grad[krow + kx] += g * s * ival;
                  if (need_in) pin.grad[irow + ix] += g * s * kval;
                }
              }
              if (need_sw) psw->grad[c] += g * phi;
            }
          }
  };
  return detail::make_op({d.n, d.o, d.oh, d.ow},
                         std::move(out), std::move(parents), std::move(backprop));
}

}  // namespace detail

inline Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride = 1, int padding = 0,
                     const std::vector<int>* in_index = nullptr) {
  return detail::conv2d_impl(input, kernel, nullptr, stride, padding, in_index);
}

// Convolution with one learnable switch per input channel, shared across all
// output channels: m = g-independent sum_c s_c * phi_c.
inline Tensor masked_conv2d(const Tensor& input, const Tensor& kernel, const Tensor& switches,
                            int stride = 1, int padding = 0,
                            const std::vector<int>* in_index = nullptr) {
  return detail::conv2d_impl(input, kernel, &switches, stride, padding, in_index);
}

inline Tensor maxpool2d(const Tensor& input, int k, int stride = 0) {
  if (input.shape().size() != 4)
    throw std::invalid_argument("maxpool2d: expected 4-d input, got " + shape_str(input.shape()));
  if (k < 1) throw std::invalid_argument("maxpool2d: window must be positive");
  if (stride == 0) stride = k;
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h < k || w < k || (h - k) % stride != 0 || (w - k) % stride != 0) {
    throw std::invalid_argument("maxpool2d: non-integral output size for input " +
                                shape_str(input.shape()) + ", window " + std::to_string(k) +
                                ", stride " + std::to_string(stride));
  }
  const int oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
  const auto& iv = input.values();
  std::vector<double> out(static_cast<std::size_t>(n) * c * oh * ow);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  std::size_t oi = 0;
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const std::size_t plane = (static_cast<std::size_t>(ni) * c + ci) *
                                static_cast<std::size_t>(h) * w;
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox, ++oi) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_idx = 0;
          for (int ky = 0; ky < k; ++ky) {
            const std::size_t row = plane + static_cast<std::size_t>(oy * stride + ky) * w;
            for (int kx = 0; kx < k; ++kx) {
              const std::size_t idx = row + static_cast<std::size_t>(ox * stride + kx);
              if (iv[idx] > best) {  // first maximum wins on ties
                best = iv[idx];
                best_idx = idx;
              }
            }
          }
          out[oi] = best;
          (*argmax)[oi] = best_idx;
        }
    }
  return detail::make_op({n, c, oh, ow}, std::move(out), {input.node()},
                         [argmax](detail::Node& node) {
                           auto& p = *node.parents[0];
                           for (std::size_t i = 0; i < node.grad.size(); ++i)
                             p.grad[(*argmax)[i]] += node.grad[i];
                         });
}

inline Tensor global_avg_pool(const Tensor& input) {
  if (input.shape().size() != 4)
    throw std::invalid_argument("global_avg_pool: expected 4-d input, got " +
                                shape_str(input.shape()));
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  const double inv = 1.0 / static_cast<double>(hw);
  const auto& iv = input.values();
  std::vector<double> out(static_cast<std::size_t>(n) * c);
  for (std::size_t p = 0; p < out.size(); ++p) {
    double s = 0.0;
    const double* base = &iv[p * hw];
    for (std::size_t i = 0; i < hw; ++i) s += base[i];
    out[p] = s * inv;
  }
  return detail::make_op({n, c}, std::move(out), {input.node()}, [hw, inv](detail::Node& node) {
    auto& p = *node.parents[0];
    for (std::size_t j = 0; j < node.grad.size(); ++j) {
      const double g = node.grad[j] * inv;
      double* base = &p.grad[j * hw];
      for (std::size_t i = 0; i < hw; ++i) base[i] += g;
    }
  });
}

// Per-channel batch normalization over (N, H, W). In train mode batch
// statistics normalize the input and the running buffers are updated in
// place with the given momentum; in eval mode the running buffers are used.
// Variance is the biased (population) estimate in both paths.
inline Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta_shift,
                          std::vector<double>& running_mean, std::vector<double>& running_var,
                          bool training, double momentum = 0.1, double eps = 1e-5) {
  if (input.shape().size() != 4)
    throw std::invalid_argument("batchnorm2d: expected 4-d input, got " +
                                shape_str(input.shape()));
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (gamma.shape() != Shape{c} || beta_shift.shape() != Shape{c} ||
      running_mean.size() != static_cast<std::size_t>(c) ||
      running_var.size() != static_cast<std::size_t>(c)) {
    throw std::invalid_argument("batchnorm2d: parameter size does not match " +
                                std::to_string(c) + " channels (input " +
                                shape_str(input.shape()) + ")");
  }
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  const std::size_t count = static_cast<std::size_t>(n) * hw;
  const auto& iv = input.values();
  const auto& gv = gamma.values();
  const auto& bv = beta_shift.values();

  auto mean_c = std::make_shared<std::vector<double>>(c);
  auto inv_std = std::make_shared<std::vector<double>>(c);
  for (int ci = 0; ci < c; ++ci) {
    double m, v;
    if (training) {
      double s = 0.0;
      for (int ni = 0; ni < n; ++ni) {
        const double* base = &iv[(static_cast<std::size_t>(ni) * c + ci) * hw];
        for (std::size_t i = 0; i < hw; ++i) s += base[i];
      }
      m = s / static_cast<double>(count);
      double sq = 0.0;
      for (int ni = 0; ni < n; ++ni) {
        const double* base = &iv[(static_cast<std::size_t>(ni) * c + ci) * hw];
        for (std::size_t i = 0; i < hw; ++i) {
          const double d = base[i] - m;
          sq += d * d;
        }
      }
      v = sq / static_cast<double>(count);
      running_mean[ci] = (1.0 - momentum) * running_mean[ci] + momentum * m;
      running_var[ci] = (1.0 - momentum) * running_var[ci] + momentum * v;
    } else {
      m = running_mean[ci];
      v = running_var[ci];
    }
    (*mean_c)[ci] = m;
    (*inv_std)[ci] = 1.0 / std::sqrt(v + eps);
  }

  std::vector<double> out(iv.size());
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const std::size_t base = (static_cast<std::size_t>(ni) * c + ci) * hw;
      const double m = (*mean_c)[ci], is = (*inv_std)[ci], g = gv[ci], b = bv[ci];
      for (std::size_t i = 0; i < hw; ++i) out[base + i] = g * (iv[base + i] - m) * is + b;
    }

  auto backprop = [n, c, hw, count, training, mean_c, inv_std](detail::Node& node) {
    auto& pin = *node.parents[0];
    auto& pg = *node.parents[1];
    auto& pb = *node.parents[2];
    for (int ci = 0; ci < c; ++ci) {
      const double m = (*mean_c)[ci], is = (*inv_std)[ci];
      const double gamma_v = pg.value[ci];
      double sum_g = 0.0, sum_gx = 0.0;
      for (int ni = 0; ni < n; ++ni) {
        const std::size_t base = (static_cast<std::size_t>(ni) * c + ci) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const double g = node.grad[base + i];
          sum_g += g;
          sum_gx += g * (pin.value[base + i] - m) * is;
        }
      }
      if (pg.requires_grad) pg.grad[ci] += sum_gx;
      if (pb.requires_grad) pb.grad[ci] += sum_g;
      if (!pin.requires_grad) continue;
      if (training) {
        const double inv_count = 1.0 / static_cast<double>(count);
        for (int ni = 0; ni < n; ++ni) {
          const std::size_t base = (static_cast<std::size_t>(ni) * c + ci) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            const double g = node.grad[base + i];
            const double xhat = (pin.value[base + i] - m) * is;
            pin.grad[base + i] +=
                gamma_v * is * (g - inv_count * sum_g - xhat * inv_count * sum_gx);
          }
        }
      } else {
        for (int ni = 0; ni < n; ++ni) {
          const std::size_t base = (static_cast<std::size_t>(ni) * c + ci) * hw;
          for (std::size_t i = 0; i < hw; ++i)
            pin.grad[base + i] += node.grad[base + i] * gamma_v * is;
        }
      }
    }
  };
  return detail::make_op(input.shape(), std::move(out),
                         {input.node(), gamma.node(), beta_shift.node()}, std::move(backprop));
}

// Mean negative log-likelihood of integer labels under softmax(logits).
inline Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.shape().size() != 2)
    throw std::invalid_argument("softmax_cross_entropy: expected 2-d logits, got " +
                                shape_str(logits.shape()));
  const int n = logits.dim(0), k = logits.dim(1);
  if (static_cast<int>(labels.size()) != n)
    throw std::invalid_argument("softmax_cross_entropy: " + std::to_string(labels.size()) +
                                " labels for " + std::to_string(n) + " rows");
  for (int label : labels)
    if (label < 0 || label >= k)
      throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(label) +
                                  " out of range [0," + std::to_string(k) + ")");
  const auto& lv = logits.values();
  auto probs = std::make_shared<std::vector<double>>(lv.size());
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    const double* row = &lv[static_cast<std::size_t>(i) * k];
    double* prow = &(*probs)[static_cast<std::size_t>(i) * k];
    double mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < k; ++j) {
      prow[j] = std::exp(row[j] - mx);
      z += prow[j];
    }
    for (int j = 0; j < k; ++j) prow[j] /= z;
    loss -= std::log(prow[labels[static_cast<std::size_t>(i)]]);
  }
  loss /= static_cast<double>(n);
  auto labels_copy = std::make_shared<std::vector<int>>(labels);
  return detail::make_op({}, {loss}, {logits.node()},
                         [n, k, probs, labels_copy](detail::Node& node) {
                           auto& p = *node.parents[0];
                           const double g = node.grad[0] / static_cast<double>(n);
                           for (int i = 0; i < n; ++i) {
                             const std::size_t base = static_cast<std::size_t>(i) * k;
                             for (int j = 0; j < k; ++j) {
                               double d = (*probs)[base + j];
                               if (j == (*labels_copy)[static_cast<std::size_t>(i)]) d -= 1.0;
                               p.grad[base + j] += g * d;
                             }
                           }
                         });
}

}  // namespace mdprune
