#include <cmath>
#include <stdexcept>

#include "doctest.h"
#include "dpo/loop.hpp"
#include "support.hpp"

using namespace dpo;
using namespace dpo::testing;

namespace {

MatchResult with_costs(std::vector<double> costs) {
    MatchResult m;
    m.per_box_cost = std::move(costs);
    m.assignment.assign(m.per_box_cost.size(), 0);
    m.perturbed_count = m.per_box_cost.size();
    return m;
}

std::vector<Batch> small_stream(int batches, std::uint64_t seed) {
    ShiftSpec spec;
    spec.scale_factor = 1.2;
    spec.noise_sigma = 0.1;
    return make_stream(batches, 4, small_gen(), spec, seed);
}

AdaptConfig small_config() {
    AdaptConfig cfg;
    cfg.eta = 0.5;
    cfg.perturb.rho_w = 1e-3;
    cfg.perturb.rho_z = 0.5;
    cfg.loss.lambda_reg = 0.0;
    return cfg;
}

}  // namespace

TEST_CASE("batch_mean_cost") {
    CHECK(batch_mean_cost(with_costs({1, 2, 3})).value() == 2.0);
    CHECK(batch_mean_cost(with_costs({kInfiniteCost, kInfiniteCost})).value() == kSentinelCost);
    CHECK(batch_mean_cost(with_costs({0.25})).value() == 0.25);
    CHECK(batch_mean_cost(with_costs({1.0, kInfiniteCost})).value() == doctest::Approx((1.0 + kSentinelCost) / 2));
    CHECK_FALSE(batch_mean_cost(with_costs({})).has_value());
    const std::vector<MatchResult> two{with_costs({1.0}), with_costs({2.0, 6.0})};
    CHECK(batch_mean_cost(two).value() == 3.0);
}

TEST_CASE("update_ema") {
    EmaState s;
    s.gamma = 0.5;
    s = update_ema(s, 4.0);
    CHECK(s.c_ema == 4.0);
    CHECK(s.t == 1);
    s = update_ema(s, 2.0);
    CHECK(s.c_ema == 3.0);

    for (double g : {0.1, 0.3, 0.5, 0.9, 1.0}) {
        for (double v : {0.37, 0.731, 1e9, 3.3e-5}) {
            EmaState c;
            c.gamma = g;
            for (int t = 0; t < 50; ++t) {
                c = update_ema(c, v);
                CHECK(c.c_ema == v);
            }
        }
    }
    s.stopped = true;
    CHECK_THROWS_AS(update_ema(s, 1.0), std::logic_error);
}

TEST_CASE("should_stop is inclusive") {
    EmaState s;
    CHECK_THROWS_AS(should_stop(s), std::logic_error);
    s.c_stop = 2.0;
    s = update_ema(s, 2.0);
    CHECK(should_stop(s));
    s.c_stop = std::nextafter(2.0, 0.0);
    CHECK_FALSE(should_stop(s));
    s.c_stop = -1.0;
    s = update_ema(s, 0.0);
    CHECK_FALSE(should_stop(s));
    s.c_stop = kSentinelCost;
    CHECK(should_stop(s));
}

TEST_CASE("adapt_stream: report shape and determinism") {
    const auto stream = small_stream(5, 1);
    const AdaptConfig cfg = small_config();
    const auto a = adapt_stream(small_pretrained(), stream, cfg);
    const auto b = adapt_stream(small_pretrained(), stream, cfg);
    CHECK(a.report.records.size() == 5);
    CHECK(a.params == b.params);
    CHECK(a.report.metrics.ap_3d == b.report.metrics.ap_3d);
    REQUIRE(a.report.records.size() == b.report.records.size());
    for (std::size_t i = 0; i < a.report.records.size(); ++i) {
        const auto &x = a.report.records[i], &y = b.report.records[i];
        CHECK(x.t == static_cast<int>(i) + 1);
        CHECK(x.costs == y.costs);
        CHECK(x.c_ema == y.c_ema);
        CHECK(x.step.loss_perturbed == y.step.loss_perturbed);
        CHECK(x.high + x.medium + x.low == (x.inference_only ? 0 : x.pseudo_count));
    }
    CHECK_FALSE(a.report.stop_batch.has_value());
    CHECK_FALSE(a.params == small_pretrained());
}

TEST_CASE("adapt_stream: perturbation norms are exact") {
    const auto stream = small_stream(3, 2);
    const AdaptConfig cfg = small_config();
    const auto r = adapt_stream(small_pretrained(), stream, cfg);
    int seen = 0;
    for (const auto& rec : r.report.records) {
        if (rec.eps_w_norm) {
            CHECK(std::abs(*rec.eps_w_norm / cfg.perturb.rho_w - 1.0) < 1e-9);
            ++seen;
        }
        for (double n : rec.eps_z_norms) CHECK(std::abs(n / cfg.perturb.rho_z - 1.0) < 1e-9);
    }
    CHECK(seen > 0);
}

TEST_CASE("adapt_stream: stop freezes parameters") {
    const auto stream = small_stream(6, 3);
    AdaptConfig cfg = small_config();
    cfg.c_stop = kSentinelCost;  // any observed cost stops
    const auto r = adapt_stream(small_pretrained(), stream, cfg);
    REQUIRE(r.report.stop_batch.has_value());
    const int k = *r.report.stop_batch;
    for (const auto& rec : r.report.records) {
        if (rec.t > k) {
            CHECK(rec.inference_only);
            CHECK_FALSE(rec.updated);
            CHECK_FALSE(rec.c_ema.has_value());
        }
    }
    // The frozen model equals an adaptation over the first k batches.
    const auto head = adapt_stream(small_pretrained(), std::span(stream).first(k), small_config());
    CHECK(r.params == head.params);
}

TEST_CASE("adapt_stream: no adaptation and skipped batches leave parameters unchanged") {
    const auto stream = small_stream(3, 4);
    AdaptConfig cfg = small_config();
    cfg.adapt = false;
    const auto r = adapt_stream(small_pretrained(), stream, cfg);
    CHECK(r.params == small_pretrained());
    const auto p = predict_only(small_pretrained(), stream, cfg.eval_decode);
    CHECK(r.report.metrics.ap_3d == p.metrics.ap_3d);
    CHECK(r.report.predictions.size() == p.predictions.size());

    // A threshold no detection reaches: every batch skips, nothing moves.
    cfg = small_config();
    cfg.pseudo_decode.score_thresh = 0.999999;
    const auto s = adapt_stream(small_pretrained(), stream, cfg);
    CHECK(s.params == small_pretrained());
    for (const auto& rec : s.report.records) {
        CHECK(rec.step.skipped);
        CHECK(rec.pseudo_count == 0);
        CHECK_FALSE(rec.c_ema.has_value());
    }
}

TEST_CASE("adapt_stream: the first batch has no thresholds, so finite costs tier Medium") {
    ShiftSpec spec;
    spec.scale_factor = 1.2;
    const auto stream = make_stream(1, 2, small_gen(), spec, 5);
    const auto r = adapt_stream(small_pretrained(), stream, small_config());
    const auto& rec = r.report.records.front();
    REQUIRE(rec.pseudo_count > 0);
    REQUIRE(rec.pseudo_count < 13);  // fewer than ceil(1 / 0.08) costs observed
    std::size_t inf = 0;
    for (double c : rec.costs) inf += std::isinf(c);
    CHECK(rec.high == 0);
    CHECK(rec.low == inf);
    CHECK(rec.medium == rec.pseudo_count - inf);
}

TEST_CASE("adapt_stream: config checks") {
    const auto stream = small_stream(1, 6);
    AdaptConfig cfg = small_config();
    cfg.eta = 0.0;
    CHECK_THROWS_AS(adapt_stream(small_pretrained(), stream, cfg), std::invalid_argument);
    cfg = small_config();
    cfg.gamma = 0.0;
    CHECK_THROWS_AS(adapt_stream(small_pretrained(), stream, cfg), std::invalid_argument);
}
