#include <cmath>
#include <stdexcept>

#include "doctest.h"
#include "dpo/scene_gen.hpp"

using namespace dpo;

namespace {

double cell_energy(const BevFeature& f, std::size_t cell) {
    double e = 0.0;
    for (double v : f.cell(cell)) e += v * v;
    return e;
}

bool cell_zeroed(const BevFeature& f, std::size_t cell) {
    for (double v : f.cell(cell)) {
        if (v != 0.0) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("generate_scene is deterministic and finite") {
    const GenConfig cfg;
    const Scene a = generate_scene(42, cfg), b = generate_scene(42, cfg);
    CHECK(a == b);
    CHECK(a.bev.all_finite());
    CHECK_FALSE(a == generate_scene(43, cfg));
    CHECK(a.bev.meta() == cfg.grid);
    CHECK_FALSE(a.shift_applied.has_value());
}

TEST_CASE("max_objects = 1 gives exactly one box") {
    GenConfig cfg;
    cfg.max_objects = 1;
    for (std::uint64_t s = 0; s < 50; ++s) CHECK(generate_scene(s, cfg).gt_boxes.size() == 1);
}

TEST_CASE("object counts over 1000 scenes stay in range, centers inside the grid") {
    const GenConfig cfg;
    int lo = 100, hi = 0;
    double mean = 0.0;
    for (std::uint64_t s = 0; s < 1000; ++s) {
        const Scene sc = generate_scene(derive_seed(9, 0, s), cfg);
        const int n = static_cast<int>(sc.gt_boxes.size());
        lo = std::min(lo, n);
        hi = std::max(hi, n);
        mean += n / 1000.0;
        for (const auto& b : sc.gt_boxes) {
            CHECK(b.cx > 0.0);
            CHECK(b.cx < cfg.grid.extent_x());
            CHECK(b.cy > 0.0);
            CHECK(b.cy < cfg.grid.extent_y());
        }
    }
    CHECK(lo == 1);
    CHECK(hi == 10);
    CHECK(mean == doctest::Approx(5.5).epsilon(0.05));
}

TEST_CASE("invalid generator configs are rejected") {
    GenConfig cfg;
    cfg.edge_margin = 40.0;
    CHECK_THROWS_AS(generate_scene(0, cfg), std::invalid_argument);
    cfg = GenConfig{};
    cfg.min_objects = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = GenConfig{};
    cfg.grid.channels = 4;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    ShiftSpec bad;
    bad.dropout_prob = 1.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = ShiftSpec{};
    bad.scale_factor = 0.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("identity shift re-renders the same scene") {
    const GenConfig cfg;
    const Scene s = generate_scene(5, cfg);
    const Scene t = apply_shift(s, ShiftSpec::identity(), 77, cfg);
    CHECK(t.gt_boxes == s.gt_boxes);
    CHECK(t.bev == s.bev);
    REQUIRE(t.shift_applied.has_value());
    CHECK(t.shift_applied->is_identity());
}

TEST_CASE("scale shift multiplies every dim by the factor and keeps the bottom") {
    const GenConfig cfg;
    const Scene s = generate_scene(6, cfg);
    ShiftSpec spec;
    spec.scale_factor = 1.3;
    const Scene t = apply_shift(s, spec, 1, cfg);
    REQUIRE(t.gt_boxes.size() == s.gt_boxes.size());
    for (std::size_t i = 0; i < s.gt_boxes.size(); ++i) {
        const Box3D &a = s.gt_boxes[i], &b = t.gt_boxes[i];
        CHECK(b.dx == doctest::Approx(1.3 * a.dx).epsilon(1e-15));
        CHECK(b.dy == doctest::Approx(1.3 * a.dy).epsilon(1e-15));
        CHECK(b.dz == doctest::Approx(1.3 * a.dz).epsilon(1e-15));
        CHECK(b.z_min() == doctest::Approx(a.z_min()));
        CHECK(b.cx == a.cx);
        CHECK(b.yaw == a.yaw);
    }
    CHECK_FALSE(t.bev == s.bev);
}

TEST_CASE("shifts are deterministic and cannot be applied twice") {
    const GenConfig cfg;
    const Scene s = generate_scene(8, cfg);
    ShiftSpec spec;
    spec.noise_sigma = 0.2;
    spec.dropout_prob = 0.1;
    spec.blur_width = 1;
    spec.intensity_offset = 0.05;
    const Scene a = apply_shift(s, spec, 3, cfg);
    CHECK(a == apply_shift(s, spec, 3, cfg));
    CHECK_FALSE(a.bev == apply_shift(s, spec, 4, cfg).bev);
    CHECK(a.bev.all_finite());
    CHECK_THROWS_AS(apply_shift(a, spec, 3, cfg), std::logic_error);

    Scene loaded = s;
    loaded.objects.clear();
    CHECK_THROWS_AS(apply_shift(loaded, spec, 3, cfg), std::logic_error);
}

TEST_CASE("dropout 0.5 zeroes about half of the cells") {
    // 4 scenes x 4096 cells: binomial sd about 0.004.
    const GenConfig cfg;
    ShiftSpec spec;
    spec.noise_sigma = 0.1;
    spec.dropout_prob = 0.5;
    std::size_t zero = 0, total = 0;
    for (std::uint64_t s = 0; s < 4; ++s) {
        const Scene t = apply_shift(generate_scene(s, cfg), spec, 100 + s, cfg);
        for (std::size_t c = 0; c < t.bev.meta().cells(); ++c) zero += cell_zeroed(t.bev, c);
        total += t.bev.meta().cells();
    }
    const double frac = static_cast<double>(zero) / static_cast<double>(total);
    CHECK(frac >= 0.49);
    CHECK(frac <= 0.51);
}

TEST_CASE("object footprints carry at least 5x the background energy") {
    const GenConfig cfg;
    for (std::uint64_t s = 0; s < 20; ++s) {
        const Scene sc = generate_scene(derive_seed(1, 2, s), cfg);
        const GridMeta& m = sc.bev.meta();
        double in = 0.0, out = 0.0;
        int n_in = 0, n_out = 0;
        for (int r = 0; r < m.height; ++r) {
            for (int c = 0; c < m.width; ++c) {
                const double x = m.cell_center_x(c), y = m.cell_center_y(r);
                const std::size_t cell = static_cast<std::size_t>(r) * m.width + c;
                bool inside = false, near = false;
                for (const auto& b : sc.gt_boxes) {
                    inside = inside || footprint_contains(b, x, y);
                    near = near || std::hypot(x - b.cx, y - b.cy) < 5.0;
                }
                for (const auto& d : sc.distractors) near = near || std::hypot(x - d.box.cx, y - d.box.cy) < 5.0;
                if (inside) {
                    in += cell_energy(sc.bev, cell);
                    ++n_in;
                } else if (!near) {
                    out += cell_energy(sc.bev, cell);
                    ++n_out;
                }
            }
        }
        REQUIRE(n_in > 0);
        REQUIRE(n_out > 0);
        CHECK(in / n_in >= 5.0 * out / n_out);
    }
}

TEST_CASE("make_stream") {
    const GenConfig cfg;
    ShiftSpec spec;
    spec.scale_factor = 1.3;
    spec.noise_sigma = 0.2;
    CHECK_THROWS_AS(make_stream(0, 8, cfg, spec, 1), std::invalid_argument);
    CHECK_THROWS_AS(make_stream(2, 0, cfg, spec, 1), std::invalid_argument);

    const auto a = make_stream(3, 8, cfg, spec, 1);
    REQUIRE(a.size() == 3);
    for (const auto& b : a) {
        CHECK(b.size() == 8);
        for (const auto& s : b) CHECK(s.shift_applied == spec);
    }
    CHECK(a == make_stream(3, 8, cfg, spec, 1));
    CHECK_FALSE(a == make_stream(3, 8, cfg, spec, 2));
    // Scenes within a stream are distinct.
    CHECK_FALSE(a[0][0].gt_boxes == a[0][1].gt_boxes);
}

TEST_CASE("derive_seed separates substreams") {
    CHECK(derive_seed(1, 2, 3) == derive_seed(1, 2, 3));
    CHECK(derive_seed(1, 2, 3) != derive_seed(1, 2, 4));
    CHECK(derive_seed(1, 2, 3) != derive_seed(1, 3, 3));
    CHECK(derive_seed(1, 2, 3) != derive_seed(2, 2, 3));
}
