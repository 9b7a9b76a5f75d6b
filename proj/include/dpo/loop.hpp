#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpo/detector.hpp"
#include "dpo/eval.hpp"
#include "dpo/matcher.hpp"
#include "dpo/perturb.hpp"
#include "dpo/scene_gen.hpp"

namespace dpo {

/// Raised when a loss or parameter becomes non-finite.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct EmaState {
    double c_ema = 0.0;
    double gamma = 0.5;
    double c_stop = -1.0;
    int t = 0;  // number of costs folded in so far
    bool stopped = false;
};

/// Mean per-box cost with infinite costs counted as kSentinelCost.
/// nullopt when there are no boxes.
std::optional<double> batch_mean_cost(const MatchResult& result);
std::optional<double> batch_mean_cost(std::span<const MatchResult> results);

/// c_ema <- gamma * c + (1 - gamma) * c_ema; the first cost initializes c_ema.
/// Throws std::logic_error once stopped.
EmaState update_ema(EmaState state, double c_box);

/// Inclusive: c_ema <= c_stop. Requires at least one folded cost.
bool should_stop(const EmaState& state);

struct AdaptConfig {
    PerturbConfig perturb;
    bool use_matcher = true;
    ThresholdConfig thresholds;
    CostWeights cost_weights;
    double gamma = 0.5;
    double eta = 1e-3;
    double c_stop = -1.0;  // negative: never stops
    bool adapt = true;     // false: inference only
    DecodeConfig pseudo_decode{0.5, 0.1, 512};
    DecodeConfig eval_decode{0.05, 0.1, 512};
    LossConfig loss;
};

struct BatchRecord {
    int t = 0;  // 1-based batch index
    std::size_t pseudo_count = 0;
    std::size_t perturbed_count = 0;
    std::optional<double> mean_cost;
    std::optional<double> c_ema;
    std::size_t high = 0, medium = 0, low = 0;
    std::vector<double> costs;  // per pseudo-label, infinite where unmatched
    // Norms of the perturbations actually applied; absent when degenerate or off.
    std::optional<double> eps_w_norm;
    std::vector<double> eps_z_norms;
    StepRecord step;
    bool updated = false;
    bool inference_only = false;
};

struct AdaptReport {
    std::vector<BatchRecord> records;
    std::optional<int> stop_batch;
    EvalResult metrics;  // online predictions over the whole stream
    std::vector<ScenePrediction> predictions;
    std::vector<SceneGroundTruth> ground_truth;
};

struct AdaptResult {
    Params params;
    AdaptReport report;
};

/// Single pass over the stream. For each batch: pseudo-label, perturb,
/// re-predict, match and tier, take the perturbed-gradient SGD step, then
/// update the cost EMA and check the cutoff. Predictions used for evaluation
/// come from the parameters in effect before each batch's update.
AdaptResult adapt_stream(const Params& theta_s, std::span<const Batch> stream, const AdaptConfig& cfg);

/// Inference-only predictions of a fixed model over labelled scenes.
AdaptReport predict_only(const Params& params, std::span<const Batch> stream, const DecodeConfig& decode);

}  // namespace dpo
