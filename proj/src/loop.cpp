#include "dpo/loop.hpp"

#include <cmath>

#include "dpo/parallel.hpp"

namespace dpo {

std::optional<double> batch_mean_cost(const MatchResult& result) {
    return batch_mean_cost(std::span<const MatchResult>(&result, 1));
}

std::optional<double> batch_mean_cost(std::span<const MatchResult> results) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& r : results) {
        for (double c : r.per_box_cost) {
            sum += std::isinf(c) ? kSentinelCost : c;
            ++n;
        }
    }
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
}

EmaState update_ema(EmaState state, double c_box) {
    if (state.stopped) throw std::logic_error("update_ema: adaptation already stopped");
    // Increment form: a constant stream is an exact fixed point for every gamma.
    if (state.t == 0 || state.gamma == 1.0) {
        state.c_ema = c_box;
    } else {
        state.c_ema += state.gamma * (c_box - state.c_ema);
    }
    ++state.t;
    return state;
}

bool should_stop(const EmaState& state) {
    if (state.t < 1) throw std::logic_error("should_stop: no cost observed yet");
    return state.c_ema <= state.c_stop;
}

namespace {

struct Decoded {
    std::vector<ScoredBox> eval;
    std::vector<Box3D> pseudo;
};

std::vector<Decoded> predict_batch(const Params& params, std::span<const BevFeature> inputs,
                                   const DecodeConfig& eval_cfg, const DecodeConfig* pseudo_cfg) {
    std::vector<Decoded> out(inputs.size());
    parallel_for(inputs.size(), [&](std::size_t k) {
        const RawPrediction raw = forward(params, inputs[k]);
        out[k].eval = decode(raw, eval_cfg);
        if (pseudo_cfg) {
            for (const auto& sb : decode(raw, *pseudo_cfg)) out[k].pseudo.push_back(sb.box);
        }
    });
    return out;
}

std::vector<BevFeature> batch_inputs(const Batch& batch) {
    std::vector<BevFeature> in;
    in.reserve(batch.size());
    for (const auto& s : batch) in.push_back(s.bev);
    return in;
}

void record_predictions(AdaptReport& report, const Batch& batch, std::size_t first_id,
                        const std::vector<Decoded>& decoded) {
    for (std::size_t k = 0; k < batch.size(); ++k) {
        for (const auto& sb : decoded[k].eval) report.predictions.push_back({first_id + k, sb});
        for (const auto& g : batch[k].gt_boxes) report.ground_truth.push_back({first_id + k, g});
    }
}

}  // namespace

AdaptResult adapt_stream(const Params& theta_s, std::span<const Batch> stream, const AdaptConfig& cfg) {
    if (cfg.adapt && !(cfg.eta > 0.0)) throw std::invalid_argument("adapt_stream: eta must be > 0");
    if (!(cfg.gamma > 0.0 && cfg.gamma <= 1.0)) throw std::invalid_argument("adapt_stream: gamma must lie in (0, 1]");

    AdaptResult res{theta_s, {}};
    Params& theta = res.params;
    AdaptReport& report = res.report;
    CostHistory history;
    EmaState ema;
    ema.gamma = cfg.gamma;
    ema.c_stop = cfg.c_stop;
    const bool perturbs = cfg.perturb.perturb_weights || cfg.perturb.perturb_inputs;

    std::size_t scene_id = 0;
    for (std::size_t bt = 0; bt < stream.size(); ++bt) {
        const Batch& batch = stream[bt];
        const std::vector<BevFeature> inputs = batch_inputs(batch);
        BatchRecord rec;
        rec.t = static_cast<int>(bt) + 1;

        const bool active = cfg.adapt && !ema.stopped;
        const auto decoded = predict_batch(theta, inputs, cfg.eval_decode, active ? &cfg.pseudo_decode : nullptr);
        record_predictions(report, batch, scene_id, decoded);
        scene_id += batch.size();
        if (!active) {
            rec.inference_only = true;
            rec.step.skipped = true;
            rec.step.skip_reason = "inference only";
            report.records.push_back(std::move(rec));
            continue;
        }

        std::vector<std::vector<Box3D>> pseudo(batch.size());
        for (std::size_t k = 0; k < batch.size(); ++k) {
            pseudo[k] = decoded[k].pseudo;
            rec.pseudo_count += pseudo[k].size();
        }
        if (rec.pseudo_count == 0) {
            rec.step.skipped = true;
            rec.step.skip_reason = "no pseudo-labels";
            report.records.push_back(std::move(rec));
            continue;
        }

        // Worst-case perturbations from the loss against the raw pseudo-labels.
        std::vector<TargetMap> pre_targets;
        pre_targets.reserve(batch.size());
        for (std::size_t k = 0; k < batch.size(); ++k) {
            pre_targets.push_back(assign_targets_all_high(pseudo[k], inputs[k].meta()));
        }
        Perturbation pert;
        std::vector<std::vector<Box3D>> perturbed = pseudo;
        if (perturbs) {
            auto pr = compute_perturbation(theta, inputs, pre_targets, cfg.perturb, cfg.loss);
            if (pr) {
                rec.step.loss_clean = pr->loss_clean;
                pert = std::move(pr->perturbation);
                if (!pert.epsilon_w.empty()) rec.eps_w_norm = l2_norm(pert.epsilon_w);
                for (std::size_t k = 0; k < pert.epsilon_z.size(); ++k) {
                    if (!pert.input_degenerate[k]) rec.eps_z_norms.push_back(pert.epsilon_z[k].norm());
                }
                const Params theta_p = apply_weight_perturbation(theta, pert);
                const auto z_p = apply_input_perturbation(inputs, pert);
                const auto dec_p = predict_batch(theta_p, z_p, cfg.pseudo_decode, &cfg.pseudo_decode);
                for (std::size_t k = 0; k < batch.size(); ++k) perturbed[k] = dec_p[k].pseudo;
            }
        }

        std::vector<MatchResult> matches(batch.size());
        for (std::size_t k = 0; k < batch.size(); ++k) {
            matches[k] = match_predictions(pseudo[k], perturbed[k], cfg.cost_weights);
            rec.perturbed_count += perturbed[k].size();
            rec.costs.insert(rec.costs.end(), matches[k].per_box_cost.begin(), matches[k].per_box_cost.end());
        }

        std::vector<TargetMap> targets;
        targets.reserve(batch.size());
        if (cfg.use_matcher) {
            const auto th = update_thresholds(history, rec.costs, cfg.thresholds);
            for (std::size_t k = 0; k < batch.size(); ++k) {
                const auto tiered = tier_boxes(pseudo[k], matches[k], th);
                for (const auto& tb : tiered) {
                    if (tb.tier == Tier::High) ++rec.high;
                    else if (tb.tier == Tier::Medium) ++rec.medium;
                    else ++rec.low;
                }
                targets.push_back(assign_targets(tiered, inputs[k].meta()));
            }
        } else {
            rec.high = rec.pseudo_count;
            targets = std::move(pre_targets);
        }

        if (cfg.use_matcher && rec.high == 0 && rec.low == 0) {
            rec.step.skipped = true;
            rec.step.skip_reason = "no supervision";
        } else {
            auto g = perturbs ? perturbed_gradient(theta, inputs, targets, pert, cfg.loss)
                              : backward_batch(theta, inputs, targets, cfg.loss, false);
            if (!g) {
                rec.step.skipped = true;
                rec.step.skip_reason = "no supervision";
            } else {
                if (!std::isfinite(g->loss)) throw NumericalError("adapt_stream: non-finite loss at batch " + std::to_string(rec.t));
                if (perturbs) {
                    rec.step.loss_perturbed = g->loss;
                } else {
                    rec.step.loss_clean = g->loss;
                    rec.step.loss_perturbed = g->loss;
                }
                rec.step.grad_norm = l2_norm(g->grad_params);
                theta = sgd_update(theta, g->grad_params, cfg.eta);
                if (!theta.all_finite()) throw NumericalError("adapt_stream: non-finite parameters at batch " + std::to_string(rec.t));
                rec.updated = true;
            }
        }

        rec.mean_cost = batch_mean_cost(matches);
        if (rec.mean_cost) {
            ema = update_ema(ema, *rec.mean_cost);
            rec.c_ema = ema.c_ema;
            if (should_stop(ema)) {
                ema.stopped = true;
                report.stop_batch = rec.t;
            }
        }
        report.records.push_back(std::move(rec));
    }
    report.metrics = evaluate(report.predictions, report.ground_truth);
    return res;
}

AdaptReport predict_only(const Params& params, std::span<const Batch> stream, const DecodeConfig& decode_cfg) {
    AdaptReport report;
    std::size_t scene_id = 0;
    for (std::size_t bt = 0; bt < stream.size(); ++bt) {
        const auto inputs = batch_inputs(stream[bt]);
        const auto decoded = predict_batch(params, inputs, decode_cfg, nullptr);
        record_predictions(report, stream[bt], scene_id, decoded);
        scene_id += stream[bt].size();
        BatchRecord rec;
        rec.t = static_cast<int>(bt) + 1;
        rec.inference_only = true;
        rec.step.skipped = true;
        rec.step.skip_reason = "inference only";
        report.records.push_back(std::move(rec));
    }
    report.metrics = evaluate(report.predictions, report.ground_truth);
    return report;
}

}  // namespace dpo
