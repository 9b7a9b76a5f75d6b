#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "dpo/geom3d.hpp"

namespace dpo {

inline constexpr int kRecallPositions = 40;
inline constexpr double kDefaultIouThresh = 0.7;

struct ScenePrediction {
    std::size_t scene_id = 0;
    ScoredBox det;
};

struct SceneGroundTruth {
    std::size_t scene_id = 0;
    Box3D box;
};

using IouFn = std::function<double(const Box3D&, const Box3D&)>;

struct ApResult {
    double ap = 0.0;
    // Interpolated precision at recall r = k / 40, k = 1..40.
    std::array<double, kRecallPositions> precision{};
    std::size_t tp = 0, fp = 0, fn = 0;
};

struct EvalResult {
    double ap_3d = 0.0;
    double ap_bev = 0.0;
    ApResult detail_3d;
    ApResult detail_bev;
};

/// Greedy one-to-one matching in descending score order, then 40-point
/// interpolated AP. With no ground truth, AP is 1 when there are also no
/// predictions and 0 otherwise.
ApResult average_precision(std::span<const ScenePrediction> preds, std::span<const SceneGroundTruth> gts,
                           const IouFn& iou, double iou_thresh);

EvalResult evaluate(std::span<const ScenePrediction> preds, std::span<const SceneGroundTruth> gts,
                    double iou_thresh = kDefaultIouThresh);

/// (method - noadapt) / (oracle - noadapt) * 100. Throws std::domain_error
/// when oracle == noadapt.
double closed_gap(double ap_method, double ap_noadapt, double ap_oracle);

}  // namespace dpo
