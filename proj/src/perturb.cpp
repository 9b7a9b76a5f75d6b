#include "dpo/perturb.hpp"

#include <stdexcept>

namespace dpo {

double l2_norm(std::span<const double> v) {
    double acc = 0.0;
    for (double x : v) acc += x * x;
    return std::sqrt(acc);
}

std::optional<std::vector<double>> weight_perturbation(std::span<const double> grad_params, double rho) {
    if (!(rho > 0.0)) throw std::invalid_argument("weight_perturbation: rho must be > 0");
    const double n = l2_norm(grad_params);
    if (!(n >= kDegenerateGradNorm) || !std::isfinite(n)) return std::nullopt;
    std::vector<double> eps(grad_params.size());
    const double s = rho / n;
    for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = s * grad_params[i];
    return eps;
}

InputPerturbation input_perturbation(std::span<const BevFeature> grad_inputs, double rho) {
    if (!(rho > 0.0)) throw std::invalid_argument("input_perturbation: rho must be > 0");
    InputPerturbation out;
    out.eps.reserve(grad_inputs.size());
    for (const auto& g : grad_inputs) {
        BevFeature e(g.meta());
        if (auto w = weight_perturbation(g.values(), rho)) {
            std::copy(w->begin(), w->end(), e.values().begin());
            out.degenerate.push_back(false);
        } else {
            out.degenerate.push_back(true);
        }
        out.eps.push_back(std::move(e));
    }
    return out;
}

std::optional<PerturbationResult> compute_perturbation(const Params& params, std::span<const BevFeature> batch,
                                                       std::span<const TargetMap> targets,
                                                       const PerturbConfig& cfg, const LossConfig& loss) {
    auto clean = backward_batch(params, batch, targets, loss, cfg.perturb_inputs);
    if (!clean) return std::nullopt;
    PerturbationResult res;
    res.loss_clean = clean->loss;
    Perturbation& p = res.perturbation;
    p.rho_w = cfg.rho_w;
    p.rho_z = cfg.rho_z;
    if (cfg.perturb_weights) {
        if (auto e = weight_perturbation(clean->grad_params, cfg.rho_w)) {
            p.epsilon_w = std::move(*e);
        } else {
            p.weight_degenerate = true;
        }
    }
    if (cfg.perturb_inputs) {
        auto in = input_perturbation(clean->grad_inputs, cfg.rho_z);
        p.epsilon_z = std::move(in.eps);
        p.input_degenerate = std::move(in.degenerate);
    }
    return res;
}

Params apply_weight_perturbation(const Params& params, const Perturbation& p) {
    Params out = params;
    if (p.epsilon_w.empty()) return out;
    auto flat = out.flat();
    for (std::size_t i = 0; i < flat.size(); ++i) flat[i] += p.epsilon_w[i];
    return out;
}

std::vector<BevFeature> apply_input_perturbation(std::span<const BevFeature> batch, const Perturbation& p) {
    std::vector<BevFeature> out(batch.begin(), batch.end());
    if (p.epsilon_z.empty()) return out;
    if (p.epsilon_z.size() != out.size()) {
        throw std::invalid_argument("apply_input_perturbation: batch size mismatch");
    }
    for (std::size_t k = 0; k < out.size(); ++k) {
        auto v = out[k].values();
        const auto e = p.epsilon_z[k].values();
        for (std::size_t i = 0; i < v.size(); ++i) v[i] += e[i];
    }
    return out;
}

std::optional<BatchLossGrad> perturbed_gradient(const Params& params, std::span<const BevFeature> batch,
                                                std::span<const TargetMap> targets, const Perturbation& p,
                                                const LossConfig& loss) {
    const Params theta = apply_weight_perturbation(params, p);
    if (p.epsilon_z.empty()) return backward_batch(theta, batch, targets, loss, false);
    const auto z = apply_input_perturbation(batch, p);
    return backward_batch(theta, z, targets, loss, false);
}

Params sgd_update(const Params& params, std::span<const double> grad, double eta) {
    if (grad.size() != params.size()) throw std::invalid_argument("sgd_update: gradient size mismatch");
    Params out = params;
    auto flat = out.flat();
    for (std::size_t i = 0; i < flat.size(); ++i) flat[i] -= eta * grad[i];
    return out;
}

std::pair<Params, StepRecord> dpo_step(const Params& params, std::span<const BevFeature> batch,
                                       std::span<const TargetMap> targets, const PerturbConfig& cfg, double eta,
                                       const LossConfig& loss) {
    if (!(eta > 0.0)) throw std::invalid_argument("dpo_step: eta must be > 0");
    StepRecord rec;
    auto pert = compute_perturbation(params, batch, targets, cfg, loss);
    if (!pert) {
        rec.skipped = true;
        rec.skip_reason = "no supervision";
        return {params, rec};
    }
    rec.loss_clean = pert->loss_clean;
    auto g = perturbed_gradient(params, batch, targets, pert->perturbation, loss);
    if (!g) {
        rec.skipped = true;
        rec.skip_reason = "no supervision";
        return {params, rec};
    }
    rec.loss_perturbed = g->loss;
    rec.grad_norm = l2_norm(g->grad_params);
    return {sgd_update(params, g->grad_params, eta), rec};
}

double sharpness_probe(const Params& params, std::span<const BevFeature> batch, std::span<const TargetMap> targets,
                       double rho, const LossConfig& loss) {
    if (!(rho > 0.0)) return 0.0;
    auto clean = backward_batch(params, batch, targets, loss, false);
    if (!clean) return 0.0;
    auto eps = weight_perturbation(clean->grad_params, rho);
    if (!eps) return 0.0;
    Params theta = params;
    auto flat = theta.flat();
    for (std::size_t i = 0; i < flat.size(); ++i) flat[i] += (*eps)[i];
    const auto up = batch_loss(theta, batch, targets, loss);
    return up ? *up - clean->loss : 0.0;
}

}  // namespace dpo
