#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "dpo/bev.hpp"
#include "dpo/geom3d.hpp"
#include "dpo/scene_gen.hpp"

namespace dpo {

// Per-cell head outputs.
inline constexpr int kOutputs = 8;
inline constexpr int kOutLogit = 0;
inline constexpr int kRegOutputs = 7;  // dcx, dcy, dcz, log dx, log dy, log dz, yaw

using RegTarget = std::array<double, kRegOutputs>;

/// Flat parameter vector of the per-cell two-layer head with named views:
/// W1 (C x Hh, index c * Hh + h), b1 (Hh), W2 (Hh x 8, index h * 8 + o), b2 (8).
class Params {
public:
    Params() = default;
    Params(int channels, int hidden);
    Params(int channels, int hidden, std::vector<double> values);

    static std::size_t size_for(int channels, int hidden) {
        return static_cast<std::size_t>(channels) * hidden + hidden + static_cast<std::size_t>(hidden) * kOutputs +
               kOutputs;
    }

    int channels() const { return channels_; }
    int hidden() const { return hidden_; }
    std::size_t size() const { return values_.size(); }

    std::span<double> flat() { return values_; }
    std::span<const double> flat() const { return values_; }
    const std::vector<double>& vector() const { return values_; }

    std::span<double> w1() { return flat().subspan(0, w1_size()); }
    std::span<double> b1() { return flat().subspan(w1_size(), hidden_); }
    std::span<double> w2() { return flat().subspan(w1_size() + hidden_, w2_size()); }
    std::span<double> b2() { return flat().subspan(w1_size() + hidden_ + w2_size(), kOutputs); }
    std::span<const double> w1() const { return flat().subspan(0, w1_size()); }
    std::span<const double> b1() const { return flat().subspan(w1_size(), hidden_); }
    std::span<const double> w2() const { return flat().subspan(w1_size() + hidden_, w2_size()); }
    std::span<const double> b2() const { return flat().subspan(w1_size() + hidden_ + w2_size(), kOutputs); }

    bool all_finite() const;

    bool operator==(const Params&) const = default;

private:
    std::size_t w1_size() const { return static_cast<std::size_t>(channels_) * hidden_; }
    std::size_t w2_size() const { return static_cast<std::size_t>(hidden_) * kOutputs; }

    int channels_ = 0;
    int hidden_ = 0;
    std::vector<double> values_;
};

/// Head output grid (H x W x 8) plus the hidden activations kept for backward.
struct RawPrediction {
    GridMeta meta;
    int hidden = 0;
    std::vector<double> out;         // cells * 8
    std::vector<double> activation;  // cells * hidden, tanh outputs

    std::span<const double> cell(std::size_t i) const {
        return std::span<const double>(out).subspan(i * kOutputs, kOutputs);
    }
    std::span<double> cell(std::size_t i) { return std::span<double>(out).subspan(i * kOutputs, kOutputs); }
};

enum class CellClass : std::uint8_t { Negative, Positive, Ignore };
enum class Tier : std::uint8_t { High, Medium, Low };

const char* tier_name(Tier t);

struct TieredBox {
    Box3D box;
    Tier tier = Tier::High;
};

/// Dense supervision derived from tiered boxes.
struct TargetMap {
    GridMeta meta;
    std::vector<CellClass> cls;
    std::vector<RegTarget> reg;  // meaningful only where cls == Positive

    std::size_t positives() const;
    std::size_t negatives() const;
    std::size_t supervised() const { return positives() + negatives(); }

    bool operator==(const TargetMap&) const = default;
};

struct DecodeConfig {
    double score_thresh = 0.5;
    double nms_thresh = 0.1;
    std::size_t pre_nms_top_k = 512;
};

struct LossConfig {
    double lambda_reg = 1.0;
    double smooth_l1_beta = 1.0 / 9.0;
};

struct GradPair {
    std::vector<double> grad_params;
    BevFeature grad_input;
};

struct LossGrad {
    double loss = 0.0;
    GradPair grads;
};

/// Batch loss pools cells across scenes: BCE is averaged over all supervised
/// cells of the batch, regression over all positive cells.
struct BatchLossGrad {
    double loss = 0.0;
    std::vector<double> grad_params;
    std::vector<BevFeature> grad_inputs;  // empty unless requested
};

double sigmoid(double x);

/// Regression target of a box seen from the cell whose center is (x, y).
RegTarget encode_box(const Box3D& b, double x, double y, double cell_size);
/// Inverse of encode_box; log-dims are clamped to [-8, 8].
Box3D decode_box(std::span<const double, kRegOutputs> reg, double x, double y, double cell_size);

/// Throws std::invalid_argument when the channel counts disagree.
RawPrediction forward(const Params& params, const BevFeature& bev);

std::vector<ScoredBox> decode(const RawPrediction& raw, const DecodeConfig& cfg);

TargetMap assign_targets(std::span<const TieredBox> boxes, const GridMeta& meta);
/// Every box treated as High (ground truth or unfiltered pseudo-labels).
TargetMap assign_targets_all_high(std::span<const Box3D> boxes, const GridMeta& meta);

/// nullopt signals "no supervision": no positive or negative cells.
std::optional<double> detection_loss(const RawPrediction& raw, const TargetMap& targets,
                                     const LossConfig& cfg = {});

std::optional<LossGrad> backward(const Params& params, const BevFeature& bev, const TargetMap& targets,
                                 const LossConfig& cfg = {});

std::optional<double> batch_loss(const Params& params, std::span<const BevFeature> inputs,
                                 std::span<const TargetMap> targets, const LossConfig& cfg = {});

std::optional<BatchLossGrad> backward_batch(const Params& params, std::span<const BevFeature> inputs,
                                            std::span<const TargetMap> targets, const LossConfig& cfg,
                                            bool want_input_grads);

struct TrainConfig {
    int hidden = 32;
    int epochs = 30;
    int batch_size = 8;
    double learning_rate = 0.5;
    double final_lr_fraction = 0.02;  // linear decay to learning_rate * this
    double init_scale = 0.3;
    double prior_prob = 0.01;  // initial objectness bias
    std::uint64_t seed = 0;
    LossConfig loss;
};

Params init_params(int channels, const TrainConfig& cfg);

/// Plain mini-batch SGD on ground-truth targets. Deterministic given cfg.seed.
/// Throws std::invalid_argument on an empty dataset.
Params pretrain(std::span<const Scene> dataset, const TrainConfig& cfg);
/// Same, continuing from `init`.
Params pretrain_from(Params init, std::span<const Scene> dataset, const TrainConfig& cfg);

}  // namespace dpo
