#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dpo/detector.hpp"

namespace dpo {

/// Gradients with a smaller 2-norm are treated as degenerate.
inline constexpr double kDegenerateGradNorm = 1e-12;

double l2_norm(std::span<const double> v);

/// rho * g / ||g||_2, the maximizer of <eps, g> over the rho-ball.
/// nullopt when ||g||_2 < kDegenerateGradNorm.
std::optional<std::vector<double>> weight_perturbation(std::span<const double> grad_params, double rho);

struct InputPerturbation {
    std::vector<BevFeature> eps;        // one mask per batch element
    std::vector<bool> degenerate;       // element had a vanishing gradient; its mask is zero
};

/// Same dual-norm maximizer applied to each batch element separately.
InputPerturbation input_perturbation(std::span<const BevFeature> grad_inputs, double rho);

struct Perturbation {
    std::vector<double> epsilon_w;      // empty when weights are not perturbed or degenerate
    std::vector<BevFeature> epsilon_z;  // empty when inputs are not perturbed
    double rho_w = 0.0;
    double rho_z = 0.0;
    bool weight_degenerate = false;
    std::vector<bool> input_degenerate;
};

struct StepRecord {
    double loss_clean = 0.0;
    double loss_perturbed = 0.0;
    double grad_norm = 0.0;
    bool skipped = false;
    std::string skip_reason;
};

struct PerturbConfig {
    double rho_w = 1e-4;
    double rho_z = 1e-4;
    bool perturb_weights = true;
    bool perturb_inputs = true;
};

/// Clean loss/gradients plus the worst-case perturbations they induce.
struct PerturbationResult {
    double loss_clean = 0.0;
    Perturbation perturbation;
};

/// nullopt when the targets carry no supervision.
std::optional<PerturbationResult> compute_perturbation(const Params& params, std::span<const BevFeature> batch,
                                                       std::span<const TargetMap> targets,
                                                       const PerturbConfig& cfg, const LossConfig& loss = {});

Params apply_weight_perturbation(const Params& params, const Perturbation& p);
std::vector<BevFeature> apply_input_perturbation(std::span<const BevFeature> batch, const Perturbation& p);

/// Gradient of the loss at (Z + eps_z, Theta + eps_w) with respect to the
/// parameters; nullopt on no supervision.
std::optional<BatchLossGrad> perturbed_gradient(const Params& params, std::span<const BevFeature> batch,
                                                std::span<const TargetMap> targets, const Perturbation& p,
                                                const LossConfig& loss = {});

Params sgd_update(const Params& params, std::span<const double> grad, double eta);

/// One dual-perturbation step: perturbations from the clean gradient, then a
/// descent step with the gradient taken at the doubly perturbed point. The
/// returned parameters are never perturbed persistently.
std::pair<Params, StepRecord> dpo_step(const Params& params, std::span<const BevFeature> batch,
                                       std::span<const TargetMap> targets, const PerturbConfig& cfg, double eta,
                                       const LossConfig& loss = {});

/// L(Theta + eps_w) - L(Theta) with eps_w the first-order maximizer. Zero on
/// a degenerate gradient, rho = 0, or no supervision.
double sharpness_probe(const Params& params, std::span<const BevFeature> batch, std::span<const TargetMap> targets,
                       double rho, const LossConfig& loss = {});

/// Sharpness-aware step for any differentiable model given as a gradient
/// callback: theta - eta * grad(theta + rho * g / ||g||). Used directly by
/// scalar harnesses; dpo_step is the detector instance.
template <class GradFn>
std::vector<double> sharpness_aware_step(std::span<const double> theta, double rho, double eta, GradFn&& grad) {
    const std::vector<double> g0 = grad(theta);
    std::vector<double> probe(theta.begin(), theta.end());
    if (auto eps = weight_perturbation(g0, rho)) {
        for (std::size_t i = 0; i < probe.size(); ++i) probe[i] += (*eps)[i];
    }
    const std::vector<double> g = grad(std::span<const double>(probe));
    std::vector<double> out(theta.begin(), theta.end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= eta * g[i];
    return out;
}

template <class LossFn, class GradFn>
double sharpness_gap(std::span<const double> theta, double rho, LossFn&& loss, GradFn&& grad) {
    if (!(rho > 0.0)) return 0.0;
    const auto eps = weight_perturbation(grad(theta), rho);
    if (!eps) return 0.0;
    std::vector<double> probe(theta.begin(), theta.end());
    for (std::size_t i = 0; i < probe.size(); ++i) probe[i] += (*eps)[i];
    return loss(std::span<const double>(probe)) - loss(theta);
}

}  // namespace dpo
