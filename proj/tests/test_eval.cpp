#include <algorithm>
#include <random>
#include <stdexcept>

#include "doctest.h"
#include "dpo/eval.hpp"
#include "support.hpp"

using namespace dpo;
using dpo::testing::random_box;

namespace {

const Box3D kCar(10, 10, 0.8, 4.0, 1.8, 1.6, 0.2);

// Independent reference: prefix precision/recall, max precision over every
// prefix reaching recall k/40.
double reference_ap(std::vector<ScenePrediction> preds, std::span<const SceneGroundTruth> gts, double thresh) {
    std::stable_sort(preds.begin(), preds.end(),
                     [](const auto& a, const auto& b) { return a.det.score > b.det.score; });
    std::vector<char> taken(gts.size(), 0);
    std::vector<std::pair<double, double>> pr;  // recall, precision
    int tp = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        int best = -1;
        double bv = 0.0;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (taken[g] || gts[g].scene_id != preds[i].scene_id) continue;
            const double v = iou_3d(preds[i].det.box, gts[g].box);
            if (v >= thresh && v > bv) {
                bv = v;
                best = static_cast<int>(g);
            }
        }
        if (best >= 0) {
            taken[best] = 1;
            ++tp;
        }
        pr.emplace_back(static_cast<double>(tp) / gts.size(), static_cast<double>(tp) / (i + 1));
    }
    double ap = 0.0;
    for (int k = 1; k <= 40; ++k) {
        double p = 0.0;
        for (const auto& [r, q] : pr) {
            if (r >= k / 40.0 - 1e-12) p = std::max(p, q);
        }
        ap += p / 40.0;
    }
    return ap;
}

}  // namespace

TEST_CASE("perfect predictions give AP 1") {
    std::vector<SceneGroundTruth> g{{0, kCar}, {1, kCar}, {1, Box3D(30, 30, 0.8, 4, 2, 1.6, 1.0)}};
    std::vector<ScenePrediction> p;
    for (const auto& x : g) p.push_back({x.scene_id, ScoredBox(x.box, 1.0)});
    const EvalResult r = evaluate(p, g);
    CHECK(r.ap_3d == 1.0);
    CHECK(r.ap_bev == 1.0);
    CHECK(r.detail_3d.tp == 3);
    CHECK(r.detail_3d.fp == 0);
    CHECK(r.detail_3d.fn == 0);
}

TEST_CASE("empty cases") {
    const std::vector<SceneGroundTruth> g{{0, kCar}};
    CHECK(evaluate({}, g).ap_3d == 0.0);
    CHECK(evaluate({}, g).detail_3d.fn == 1);
    CHECK(evaluate({}, {}).ap_3d == 1.0);
    const std::vector<ScenePrediction> p{{0, ScoredBox(kCar, 0.9)}};
    CHECK(evaluate(p, {}).ap_3d == 0.0);
    CHECK_THROWS_AS(average_precision(p, g, iou_3d, 1.0), std::invalid_argument);
}

TEST_CASE("one gt, the lower-scored of two predictions matches") {
    const std::vector<SceneGroundTruth> g{{0, kCar}};
    const std::vector<ScenePrediction> p{{0, ScoredBox(Box3D(40, 40, 0.8, 4, 2, 1.6, 0), 0.9)},
                                         {0, ScoredBox(kCar, 0.6)}};
    const ApResult r = average_precision(p, g, iou_3d, 0.7);
    CHECK(r.ap == doctest::Approx(0.5).epsilon(1e-15));
    for (double q : r.precision) CHECK(q == 0.5);
    CHECK(r.tp == 1);
    CHECK(r.fp == 1);
}

TEST_CASE("duplicates count once; predictions in another scene never match") {
    const std::vector<SceneGroundTruth> g{{0, kCar}, {1, kCar}};
    const std::vector<ScenePrediction> p{{0, ScoredBox(kCar, 0.9)}, {0, ScoredBox(kCar, 0.8)},
                                         {2, ScoredBox(kCar, 0.7)}};
    const ApResult r = average_precision(p, g, iou_3d, 0.7);
    CHECK(r.tp == 1);
    CHECK(r.fp == 2);
    CHECK(r.fn == 1);
    // Recall 1/2 reached at precision 1: the first 20 positions score 1.
    CHECK(r.ap == doctest::Approx(0.5));
}

TEST_CASE("AP matches an independent reference, is order invariant, and FP removal never hurts") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> s(0.0, 1.0), jitter(-0.3, 0.3);
    for (int trial = 0; trial < 40; ++trial) {
        std::vector<SceneGroundTruth> g;
        std::vector<ScenePrediction> p;
        for (std::size_t scene = 0; scene < 4; ++scene) {
            for (int i = 0; i < 3; ++i) {
                const Box3D b(10.0 + 15 * i, 10.0 + 15 * static_cast<double>(scene), 0.8, 4.0, 1.8, 1.6, 0.0);
                g.push_back({scene, b});
                if (s(rng) < 0.8) {
                    const Box3D d(b.cx + jitter(rng), b.cy + jitter(rng), b.cz, b.dx, b.dy, b.dz, jitter(rng));
                    p.push_back({scene, ScoredBox(d, s(rng))});
                }
            }
            for (int i = 0; i < 2; ++i) p.push_back({scene, ScoredBox(random_box(rng, 60.0), s(rng))});
        }
        const ApResult r = average_precision(p, g, iou_3d, 0.7);
        CHECK(r.ap == doctest::Approx(reference_ap(p, g, 0.7)).epsilon(1e-12));
        CHECK(r.tp + r.fn == g.size());

        std::vector<ScenePrediction> q = p;
        std::shuffle(q.begin(), q.end(), rng);
        CHECK(average_precision(q, g, iou_3d, 0.7).ap == r.ap);

        // Drop every false positive the reference would count.
        std::vector<ScenePrediction> kept;
        for (const auto& x : p) {
            bool hit = false;
            for (const auto& y : g) hit = hit || (y.scene_id == x.scene_id && iou_3d(x.det.box, y.box) >= 0.7);
            if (hit) kept.push_back(x);
        }
        CHECK(average_precision(kept, g, iou_3d, 0.7).ap >= r.ap);
    }
}

TEST_CASE("closed_gap") {
    CHECK(closed_gap(0.5, 0.2, 0.5) == 100.0);
    CHECK(closed_gap(0.2, 0.2, 0.5) == 0.0);
    CHECK(closed_gap(55.74, 27.48, 73.45) == doctest::Approx(61.47).epsilon(0.01 / 61.47));
    CHECK(closed_gap(0.1, 0.2, 0.5) < 0.0);
    CHECK_THROWS_AS(closed_gap(0.3, 0.4, 0.4), std::domain_error);
}
