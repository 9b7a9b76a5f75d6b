#pragma once

#include <random>
#include <vector>

#include "dpo/bev.hpp"
#include "dpo/detector.hpp"
#include "dpo/geom3d.hpp"
#include "dpo/scene_gen.hpp"

namespace dpo::testing {

inline Box3D random_box(std::mt19937_64& rng, double spread = 3.0) {
    std::uniform_real_distribution<double> c(-spread, spread), d(0.5, 4.0), z(-1.0, 1.0), y(-kPi, kPi);
    return Box3D(c(rng), c(rng), z(rng), d(rng), d(rng), d(rng), y(rng));
}

// Monte Carlo BEV IoU: uniform samples over the union's bounding square.
inline double mc_bev_iou(const Box3D& a, const Box3D& b, int samples, std::uint64_t seed) {
    double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
    for (const auto* box : {&a, &b}) {
        for (const auto& p : bev_corners(*box)) {
            x0 = std::min(x0, p.x);
            x1 = std::max(x1, p.x);
            y0 = std::min(y0, p.y);
            y1 = std::max(y1, p.y);
        }
    }
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> ux(x0, x1), uy(y0, y1);
    long in_a = 0, in_b = 0, both = 0;
    for (int i = 0; i < samples; ++i) {
        const double x = ux(rng), y = uy(rng);
        const bool ia = footprint_contains(a, x, y), ib = footprint_contains(b, x, y);
        in_a += ia;
        in_b += ib;
        both += ia && ib;
    }
    const long uni = in_a + in_b - both;
    return uni == 0 ? 0.0 : static_cast<double>(both) / static_cast<double>(uni);
}

inline BevFeature random_feature(const GridMeta& meta, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    std::vector<double> v(meta.size());
    for (auto& x : v) x = n(rng);
    return BevFeature(meta, std::move(v));
}

inline Params random_params(int channels, int hidden, std::mt19937_64& rng, double scale = 0.5) {
    std::normal_distribution<double> n(0.0, scale);
    Params p(channels, hidden);
    for (auto& x : p.flat()) x = n(rng);
    return p;
}

// Random labels: each cell positive, negative or ignored, with random targets.
inline TargetMap random_targets(const GridMeta& meta, std::mt19937_64& rng) {
    TargetMap t;
    t.meta = meta;
    std::uniform_int_distribution<int> k(0, 2);
    std::normal_distribution<double> n(0.0, 0.5);
    for (std::size_t i = 0; i < meta.cells(); ++i) {
        const int c = k(rng);
        t.cls.push_back(c == 0 ? CellClass::Negative : c == 1 ? CellClass::Positive : CellClass::Ignore);
        RegTarget r{};
        for (auto& x : r) x = n(rng);
        t.reg.push_back(r);
    }
    return t;
}

// Small grid and a briefly trained head: cheap stand-in for a pretrained model.
inline GenConfig small_gen() {
    GenConfig g;
    g.grid = GridMeta{24, 24, 8, 1.0};
    g.max_objects = 3;
    return g;
}

inline const Params& small_pretrained() {
    static const Params p = [] {
        TrainConfig t;
        t.hidden = 8;
        t.epochs = 60;
        return pretrain(make_dataset(100, small_gen(), 21), t);
    }();
    return p;
}

}  // namespace dpo::testing
