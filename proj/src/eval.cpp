#include "dpo/eval.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <stdexcept>

namespace dpo {

ApResult average_precision(std::span<const ScenePrediction> preds, std::span<const SceneGroundTruth> gts,
                           const IouFn& iou, double iou_thresh) {
    if (!(iou_thresh > 0.0 && iou_thresh < 1.0)) {
        throw std::invalid_argument("average_precision: iou_thresh must lie in (0, 1)");
    }
    ApResult res;
    if (gts.empty()) {
        res.fp = preds.size();
        res.ap = preds.empty() ? 1.0 : 0.0;
        res.precision.fill(res.ap);
        return res;
    }

    std::map<std::size_t, std::vector<std::size_t>> gt_by_scene;
    for (std::size_t i = 0; i < gts.size(); ++i) gt_by_scene[gts[i].scene_id].push_back(i);

    // Sorting on (score desc, scene, box) makes the result independent of input order.
    std::vector<std::size_t> order(preds.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const auto& pa = preds[a];
        const auto& pb = preds[b];
        if (pa.det.score != pb.det.score) return pa.det.score > pb.det.score;
        if (pa.scene_id != pb.scene_id) return pa.scene_id < pb.scene_id;
        return pa.det.box.as_array() < pb.det.box.as_array();
    });

    std::vector<char> taken(gts.size(), 0);
    std::vector<double> recall, precision;
    recall.reserve(preds.size());
    precision.reserve(preds.size());
    std::size_t tp = 0, fp = 0;
    for (std::size_t idx : order) {
        const auto& p = preds[idx];
        std::size_t best = gts.size();
        double best_iou = iou_thresh;
        if (auto it = gt_by_scene.find(p.scene_id); it != gt_by_scene.end()) {
            for (std::size_t g : it->second) {
                if (taken[g]) continue;
                const double v = iou(p.det.box, gts[g].box);
                if (v >= best_iou) {
                    if (best == gts.size() || v > best_iou) {
                        best = g;
                        best_iou = v;
                    }
                }
            }
        }
        if (best < gts.size()) {
            taken[best] = 1;
            ++tp;
        } else {
            ++fp;
        }
        recall.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    }
    res.tp = tp;
    res.fp = fp;
    res.fn = gts.size() - tp;

    // Interpolated precision: best precision at any recall >= r.
    std::vector<double> best_from(precision.size() + 1, 0.0);
    for (std::size_t i = precision.size(); i-- > 0;) best_from[i] = std::max(best_from[i + 1], precision[i]);
    double acc = 0.0;
    for (int k = 1; k <= kRecallPositions; ++k) {
        const double r = static_cast<double>(k) / kRecallPositions;
        const auto it = std::lower_bound(recall.begin(), recall.end(), r - 1e-12);
        const double p = it == recall.end() ? 0.0 : best_from[static_cast<std::size_t>(it - recall.begin())];
        res.precision[k - 1] = p;
        acc += p;
    }
    res.ap = acc / kRecallPositions;
    return res;
}

EvalResult evaluate(std::span<const ScenePrediction> preds, std::span<const SceneGroundTruth> gts,
                    double iou_thresh) {
    EvalResult r;
    r.detail_3d = average_precision(preds, gts, iou_3d, iou_thresh);
    r.detail_bev = average_precision(preds, gts, bev_iou, iou_thresh);
    r.ap_3d = r.detail_3d.ap;
    r.ap_bev = r.detail_bev.ap;
    return r;
}

double closed_gap(double ap_method, double ap_noadapt, double ap_oracle) {
    const double denom = ap_oracle - ap_noadapt;
    if (denom == 0.0) throw std::domain_error("closed_gap: oracle and no-adapt AP coincide");
    return (ap_method - ap_noadapt) / denom * 100.0;
}

}  // namespace dpo
