#pragma once

// Gradient checks on tiny Painter networks, shared by the unit tests and the
// acceptance runner.

#include <stereoid/painter.hpp>

#include <algorithm>
#include <cmath>

namespace stereoid::checks {

inline torch::Tensor rand_signed(std::vector<std::int64_t> shape, std::uint64_t seed, torch::Dtype dtype = torch::kFloat32) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return (torch::rand(shape, gen, torch::TensorOptions().dtype(dtype)) * 2 - 1);
}

inline PainterModel tiny_model(std::uint64_t seed = 0, int critic_iterations = 5, int batch = 2) {
  TrainConfig t;
  t.batch_size = batch;
  t.critic_iterations = critic_iterations;
  t.seed = seed;
  t.max_steps = 3;
  return PainterModel(GeneratorConfig{4, 2, 9, 3}, CriticConfig{4, 2, 0.2, 12}, LossWeights{}, t);
}

/// Re-runs the generator and critic forward passes, recording every ReLU sign
/// and max-pool argmax. Finite differences are only trusted when this pattern
/// is the same at both ends of the stencil.
struct KinkPattern {
  std::vector<torch::Tensor> parts;
  torch::Tensor output;
  bool operator==(const KinkPattern& o) const {
    if (parts.size() != o.parts.size()) return false;
    for (std::size_t i = 0; i < parts.size(); ++i)
      if (!torch::equal(parts[i], o.parts[i])) return false;
    return true;
  }
};

inline KinkPattern kink_pattern(PainterModel& m, const torch::Tensor& cond) {
  torch::NoGradGuard ng;
  KinkPattern k;
  auto dc = [&](DoubleConv& b, torch::Tensor x) {
    auto n = [&](const torch::Tensor& t) { return b->normalize ? nn_detail::instance_norm(t) : t; };
    auto a = n(b->conv1->forward(x));
    k.parts.push_back(a > 0);
    auto c = n(b->conv2->forward(torch::relu(a)));
    k.parts.push_back(c > 0);
    return torch::relu(c);
  };
  auto& g = *m.generator;
  auto x = cond;
  std::vector<torch::Tensor> skips;
  for (auto& b : g.down) {
    x = dc(b, x);
    skips.push_back(x);
    auto [pooled, idx] = torch::max_pool2d_with_indices(x, 2, 2);
    k.parts.push_back(idx);
    x = pooled;
  }
  x = dc(g.bottleneck, x);
  for (std::size_t i = 0; i < g.up.size(); ++i) {
    x = torch::cat({skips[skips.size() - 1 - i], g.up[i]->forward(x)}, 1);
    x = dc(g.dec[i], x);
  }
  auto fake = torch::tanh(g.head->forward(x));
  auto y = torch::cat({cond, fake}, 1);
  for (auto& b : m.critic->blocks) {
    auto a = nn_detail::instance_norm(b->forward(y));
    k.parts.push_back(a > 0);
    y = torch::leaky_relu(a, m.critic_cfg.leaky_slope);
  }
  k.output = fake;
  return k;
}

struct GradientCheckResult {
  double worst_relative = 0;
  int checked = 0;
  int skipped = 0;           // stencils straddling a ReLU or max-pool switch
  double library_gap = 0;    // |library loss - frozen-map objective|
  bool output_matches = false;
};

/// Central differences (step h) of the total generator loss against autograd
/// on a tiny double-precision generator and critic with 16x16 inputs.
inline GradientCheckResult total_loss_gradient_check(std::uint64_t seed = 3, double h = 1e-3, int per_tensor = 4) {
  PainterModel m = tiny_model(seed);
  m.to(torch::kFloat64);
  auto cond = rand_signed({1, 9, 16, 16}, 21, torch::kFloat64);
  // Targets above the tanh range keep |real - fake| away from its kink.
  auto real = 1.2 + 0.3 * rand_signed({1, 3, 16, 16}, 22, torch::kFloat64);
  for (auto& p : m.critic->parameters()) p.requires_grad_(false);

  // The weight map is held constant by design, so the finite-difference
  // objective freezes it at the base parameters.
  torch::Tensor w0;
  {
    torch::NoGradGuard ng;
    w0 = weight_map(m.generator->forward(cond), real);
  }
  auto objective = [&] {
    auto fake = m.generator->forward(cond);
    auto adv = generator_adversarial_loss(m.critic->forward(cond, fake));
    auto wmse = (w0 * (real - fake).square()).mean();
    return total_generator_loss(adv, loss_l1(fake, real), wmse, m.loss);
  };

  GradientCheckResult r;
  m.generator->zero_grad();
  auto fake = m.generator->forward(cond);
  auto lib = total_generator_loss(generator_adversarial_loss(m.critic->forward(cond, fake)), loss_l1(fake, real),
                                  loss_wmse(fake, real), m.loss);
  lib.backward();
  r.library_gap = std::abs(lib.item<double>() - objective().item<double>());
  r.output_matches = torch::equal(kink_pattern(m, cond).output, fake.detach());

  Rng rng(17);
  for (auto& p : m.generator->parameters()) {
    auto grad = p.grad().flatten();
    auto flat = p.data().view({-1});
    for (int k = 0; k < per_tensor; ++k) {
      const auto i = static_cast<std::int64_t>(rng.index(static_cast<std::uint64_t>(flat.numel())));
      const double orig = flat[i].item<double>();
      double lp, lm;
      bool smooth;
      {
        torch::NoGradGuard ng;
        const KinkPattern base = kink_pattern(m, cond);
        flat[i] = orig + h;
        lp = objective().item<double>();
        smooth = kink_pattern(m, cond) == base;
        flat[i] = orig - h;
        lm = objective().item<double>();
        smooth = smooth && kink_pattern(m, cond) == base;
        flat[i] = orig;
      }
      if (!smooth) {
        ++r.skipped;
        continue;
      }
      const double numeric = (lp - lm) / (2 * h);
      const double analytic = grad[i].item<double>();
      const double rel = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-6});
      r.worst_relative = std::max(r.worst_relative, rel);
      ++r.checked;
    }
  }
  return r;
}

/// Penalty of a linear critic whose input gradient has norm `scale` everywhere.
inline double linear_critic_penalty(double scale) {
  auto w = rand_signed({1, 3, 6, 6}, 9, torch::kFloat64);
  w = w / w.norm();
  CriticFn linear = [w, scale](const torch::Tensor&, const torch::Tensor& x) {
    return (scale * x * w).sum({1, 2, 3}).reshape({-1, 1});
  };
  auto gen = at::make_generator<at::CPUGeneratorImpl>(1);
  auto cond = torch::zeros({4, 9, 6, 6}, torch::kFloat64);
  return gradient_penalty(linear, cond, rand_signed({4, 3, 6, 6}, 1, torch::kFloat64),
                          rand_signed({4, 3, 6, 6}, 2, torch::kFloat64), gen)
      .item<double>();
}

/// Penalty of a critic that ignores its input.
inline double constant_critic_penalty() {
  CriticFn constant = [](const torch::Tensor& c, const torch::Tensor&) { return torch::zeros({c.size(0), 1, 2, 2}); };
  auto gen = at::make_generator<at::CPUGeneratorImpl>(1);
  return gradient_penalty(constant, torch::zeros({3, 9, 4, 4}), rand_signed({3, 3, 4, 4}, 1), rand_signed({3, 3, 4, 4}, 2),
                          gen)
      .item<double>();
}

}  // namespace stereoid::checks
