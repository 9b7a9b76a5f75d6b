// Acceptance run: one PASS/FAIL line per criterion. Exit status is nonzero
// when any line fails. The heavy criteria share one set of pretrained seeds.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dpo/experiment.hpp"
#include "dpo/matcher.hpp"
#include "dpo/perturb.hpp"
#include "support.hpp"

using namespace dpo;
using namespace dpo::testing;

namespace {

// Tolerances and budgets.
constexpr double kFdStep = 1e-5;
constexpr double kFdTol = 1e-4;
constexpr double kNormTol = 1e-9;
constexpr double kDominanceRho = 1e-3;
constexpr double kDominanceShare = 0.95;
constexpr double kMcTol = 0.01;
constexpr double kQuarterTurnTol = 1e-6;
constexpr double kTierTol = 0.01;
constexpr double kMinDpoGain = 0.05;
constexpr double kMinRetained = 0.90;
constexpr double kGapTol = 0.01;
constexpr double kMinSourceAp = 0.8;

int failures = 0;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

void report(const std::string& id, const std::string& name, bool pass, const std::string& detail, double secs) {
    if (!pass) ++failures;
    std::printf("%s  %-3s %-28s %s (%.1f s)\n", pass ? "PASS" : "FAIL", id.c_str(), name.c_str(), detail.c_str(),
                secs);
    std::fflush(stdout);
}

template <class... T>
std::string fmt(const char* f, T... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

void gradient_check() {
    const auto t0 = Clock::now();
    // Full-width head on a small crop: every coordinate gets its own difference.
    const GridMeta meta{6, 6, 8, 1.0};
    std::mt19937_64 rng(101);
    const int hidden = load_preset("composite-heavy").train.hidden;
    double worst_p = 0.0, worst_z = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        Params p = random_params(meta.channels, hidden, rng);
        BevFeature z = random_feature(meta, rng);
        const TargetMap t = random_targets(meta, rng);
        const auto lg = backward(p, z, t);
        if (!lg) {
            --trial;
            continue;
        }
        auto loss = [&] { return detection_loss(forward(p, z), t).value(); };
        for (std::size_t k = 0; k < p.size(); ++k) {
            const double v = p.flat()[k];
            p.flat()[k] = v + kFdStep;
            const double up = loss();
            p.flat()[k] = v - kFdStep;
            const double dn = loss();
            p.flat()[k] = v;
            worst_p = std::max(worst_p, rel_err((up - dn) / (2 * kFdStep), lg->grads.grad_params[k]));
        }
        auto zv = z.values();
        const auto gz = lg->grads.grad_input.values();
        for (std::size_t k = 0; k < zv.size(); ++k) {
            const double v = zv[k];
            zv[k] = v + kFdStep;
            const double up = loss();
            zv[k] = v - kFdStep;
            const double dn = loss();
            zv[k] = v;
            worst_z = std::max(worst_z, rel_err((up - dn) / (2 * kFdStep), gz[k]));
        }
    }
    const double secs = seconds_since(t0);
    report("1", "gradient vs finite diff", worst_p < kFdTol && worst_z < kFdTol && secs < 30.0,
           fmt("20 triples, hidden %d, worst rel err params %.2e inputs %.2e", hidden, worst_p, worst_z), secs);
}

void norm_check(const SeedSetup& s, const RunConfig& cfg) {
    const auto t0 = Clock::now();
    const auto run = adapt_stream(s.theta_s, s.stream, cfg.adapt);
    double worst_w = 0.0, worst_z = 0.0;
    int batches = 0;
    std::size_t elements = 0;
    for (const auto& r : run.report.records) {
        if (r.eps_w_norm) {
            worst_w = std::max(worst_w, std::abs(*r.eps_w_norm / cfg.adapt.perturb.rho_w - 1.0));
            ++batches;
        }
        for (double n : r.eps_z_norms) worst_z = std::max(worst_z, std::abs(n / cfg.adapt.perturb.rho_z - 1.0));
        elements += r.eps_z_norms.size();
    }
    report("2", "perturbation norms", batches > 0 && elements > 0 && worst_w < kNormTol && worst_z < kNormTol,
           fmt("%d batches, %zu inputs, worst rel dev w %.1e z %.1e", batches, elements, worst_w, worst_z),
           seconds_since(t0));
}

std::vector<double> random_direction(std::size_t n, double rho, std::mt19937_64& rng) {
    std::normal_distribution<double> d(0.0, 1.0);
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    const double s = rho / l2_norm(v);
    for (auto& x : v) x *= s;
    return v;
}

void dominance_check(const SeedSetup& s, const RunConfig& cfg) {
    const auto t0 = Clock::now();
    PerturbConfig pc;
    pc.rho_w = pc.rho_z = kDominanceRho;
    const LossConfig& lc = cfg.adapt.loss;
    std::mt19937_64 rng(303);
    int used = 0, wins_w = 0, wins_z = 0, trials = 0;
    for (const auto& batch : s.stream) {
        if (used == 20) break;
        std::vector<BevFeature> inputs;
        std::vector<TargetMap> targets;
        for (const auto& sc : batch) {
            std::vector<Box3D> boxes;
            for (const auto& sb : decode(forward(s.theta_s, sc.bev), cfg.adapt.pseudo_decode)) boxes.push_back(sb.box);
            targets.push_back(assign_targets_all_high(boxes, sc.bev.meta()));
            inputs.push_back(sc.bev);
        }
        const auto pr = compute_perturbation(s.theta_s, inputs, targets, pc, lc);
        if (!pr || pr->perturbation.weight_degenerate) continue;
        ++used;
        const auto& e = pr->perturbation;
        const double lw = batch_loss(apply_weight_perturbation(s.theta_s, e), inputs, targets, lc).value();
        Perturbation zonly = e;
        zonly.epsilon_w.clear();
        const double lz = batch_loss(s.theta_s, apply_input_perturbation(inputs, zonly), targets, lc).value();
        for (int i = 0; i < 50; ++i, ++trials) {
            Perturbation rw;
            rw.epsilon_w = random_direction(s.theta_s.size(), kDominanceRho, rng);
            wins_w += lw >= batch_loss(apply_weight_perturbation(s.theta_s, rw), inputs, targets, lc).value();
            Perturbation rz;
            for (const auto& z : inputs) rz.epsilon_z.emplace_back(z.meta(), random_direction(z.meta().size(), kDominanceRho, rng));
            wins_z += lz >= batch_loss(s.theta_s, apply_input_perturbation(inputs, rz), targets, lc).value();
        }
    }
    const double fw = trials ? static_cast<double>(wins_w) / trials : 0.0;
    const double fz = trials ? static_cast<double>(wins_z) / trials : 0.0;
    const double secs = seconds_since(t0);
    report("3", "first-order dominance",
           used == 20 && fw >= kDominanceShare && fz >= kDominanceShare && secs < 120.0,
           fmt("%d batches x 50 directions, rho %.0e: w wins %.3f, z wins %.3f", used, kDominanceRho, fw, fz), secs);
}

double brute_force_min(const CostMatrix& c) {
    std::vector<std::size_t> perm(c.rows());
    std::iota(perm.begin(), perm.end(), 0);
    double best = INFINITY;
    do {
        best = std::min(best, assignment_cost(c, perm));
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

void hungarian_check() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(404);
    std::uniform_real_distribution<double> real(0.0, 10.0);
    std::uniform_int_distribution<int> small(0, 5);
    int mismatches = 0, total = 0;
    for (std::size_t n = 2; n <= 7; ++n) {
        for (int trial = 0; trial < 200; ++trial, ++total) {
            CostMatrix c(n, n);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j) c(i, j) = trial % 2 ? real(rng) : small(rng);
            }
            mismatches += assignment_cost(c, hungarian(c)) != brute_force_min(c);
        }
    }
    const double secs = seconds_since(t0);
    report("4", "hungarian optimality", mismatches == 0 && secs < 60.0,
           fmt("%d matrices n=2..7, %d differ from exhaustive minimum", total, mismatches), secs);
}

void iou_check() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(505);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
        // Centers within 1.5 m so most pairs overlap.
        const Box3D a = random_box(rng, 1.5), b = random_box(rng, 1.5);
        worst = std::max(worst, std::abs(bev_iou(a, b) - mc_bev_iou(a, b, 1000000, 1000 + i)));
    }
    const double quarter = bev_iou(Box3D(0, 0, 0, 2, 2, 2, 0), Box3D(0, 0, 0, 2, 2, 2, kPi / 4));
    const double qerr = std::abs(quarter - 1.0 / std::sqrt(2.0));
    const double secs = seconds_since(t0);
    report("5", "rotated IoU oracle", worst < kMcTol && qerr < kQuarterTurnTol && secs < 120.0,
           fmt("100 pairs, worst |closed - MC| %.4f; pi/4 square error %.1e", worst, qerr), secs);
}

void ema_stop_check(const SeedSetup& s, const RunConfig& cfg) {
    const auto t0 = Clock::now();
    bool fixed = true;
    for (double g : {0.1, 0.5, 0.9, 1.0}) {
        EmaState e;
        e.gamma = g;
        for (int t = 0; t < 100; ++t) {
            e = update_ema(e, 0.731);
            fixed = fixed && e.c_ema == 0.731;
        }
    }
    EmaState e;
    e.c_stop = 2.0;
    e = update_ema(e, 2.0);
    const bool inclusive = should_stop(e);

    // Integration: cut at the EMA value the uncut run reaches at batch 3.
    const std::span<const Batch> head = std::span(s.stream).first(std::min<std::size_t>(8, s.stream.size()));
    AdaptConfig full = cfg.adapt;
    full.c_stop = -1.0;
    const auto uncut = adapt_stream(s.theta_s, head, full);
    std::optional<double> target;
    int expected = 0;
    for (const auto& r : uncut.report.records) {
        if (r.t == 3) target = r.c_ema;
    }
    bool frozen = false;
    int stop = 0;
    if (target) {
        for (const auto& r : uncut.report.records) {
            if (r.c_ema && *r.c_ema <= *target) {
                expected = r.t;
                break;
            }
        }
        AdaptConfig cut = full;
        cut.c_stop = *target;
        const auto run = adapt_stream(s.theta_s, head, cut);
        stop = run.report.stop_batch.value_or(0);
        const auto prefix = adapt_stream(s.theta_s, head.first(static_cast<std::size_t>(stop)), full);
        frozen = stop > 0 && run.params == prefix.params;
        for (const auto& r : run.report.records) {
            if (r.t > stop) frozen = frozen && r.inference_only && !r.updated;
        }
    }
    report("6", "EMA and stop contracts", fixed && inclusive && frozen && stop == expected,
           fmt("fixed point %s, inclusive %s, stop at batch %d (expected %d), frozen %s", fixed ? "exact" : "off",
               inclusive ? "yes" : "no", stop, expected, frozen ? "bitwise" : "no"),
           seconds_since(t0));
}

void tier_check() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(707);
    std::lognormal_distribution<double> d(0.0, 1.0);
    std::vector<double> v(10000);
    for (auto& x : v) x = d(rng);
    CostHistory h;
    const auto th = update_thresholds(h, v, ThresholdConfig{0.08, true}).value();
    std::size_t high = 0;
    for (double c : v) high += tier_of(c, th) == Tier::High;
    const double frac = high / 10000.0;

    // Infinity is Low under any thresholds, even ones that are themselves infinite.
    CostHistory mostly_inf;
    std::vector<double> w(100, kInfiniteCost);
    w[0] = 0.5;
    const auto th_inf = update_thresholds(mostly_inf, w, ThresholdConfig{0.08, true}).value();
    const bool inf_low = tier_of(kInfiniteCost, th) == Tier::Low && tier_of(kInfiniteCost, th_inf) == Tier::Low &&
                         tier_of(kInfiniteCost, std::nullopt) == Tier::Low;
    report("7", "quantile tiering", std::abs(frac - 0.08) <= kTierTol && inf_low,
           fmt("High fraction %.4f of 10000 lognormal costs; infinite costs Low: %s", frac, inf_low ? "yes" : "no"),
           seconds_since(t0));
}

std::string ablation_csv(const AblationTable& t) { return metrics_csv(ablation_rows(t)); }

void closed_gap_check() {
    const auto t0 = Clock::now();
    const double g = closed_gap(55.74, 27.48, 73.45);
    report("10", "closed gap arithmetic", std::abs(g - 61.47) <= kGapTol, fmt("%.4f", g), seconds_since(t0));
}

}  // namespace

int main() {
    const auto start = Clock::now();
    gradient_check();
    hungarian_check();
    iou_check();
    tier_check();
    closed_gap_check();

    const RunConfig cfg = load_preset("composite-heavy");
    auto t0 = Clock::now();
    std::vector<SeedSetup> setups;
    for (auto seed : cfg.seeds) setups.push_back(prepare_seed(cfg, seed));
    const double setup_secs = seconds_since(t0);
    {
        bool ok = true;
        std::ostringstream d;
        for (const auto& s : setups) {
            ok = ok && s.source_metrics.ap_3d >= kMinSourceAp;
            d << " seed " << s.seed << ' ' << fmt("%.3f", s.source_metrics.ap_3d);
        }
        report("pre", "source model AP3D >= 0.8", ok, "held-out unshifted:" + d.str(), setup_secs);
    }

    norm_check(setups.front(), cfg);
    dominance_check(setups.front(), cfg);
    ema_stop_check(setups.front(), cfg);

    t0 = Clock::now();
    const AblationTable table = run_ablation(cfg, setups, true);
    const double ablation_secs = seconds_since(t0) + setup_secs;
    {
        const double dpo = table.at("dpo").mean_3d(), wz = table.at("pert_wz").mean_3d(),
                     w = table.at("pert_w").mean_3d(), none = table.at("no_adapt").mean_3d();
        const double per_seed = ablation_secs / static_cast<double>(setups.size());
        const bool ok = dpo >= wz && wz >= w && w >= none && dpo - none >= kMinDpoGain && per_seed < 300.0;
        report("8", "ablation ordering", ok,
               fmt("mean AP3D dpo %.4f >= pert_wz %.4f >= pert_w %.4f >= no_adapt %.4f, gain %.4f; %.0f s/seed", dpo,
                   wz, w, none, dpo - none, per_seed),
               ablation_secs);
        for (const auto& v : table.variants) {
            std::printf("      %-16s AP3D %.4f +- %.4f  BEV %.4f +- %.4f\n", v.name.c_str(), v.mean_3d(), v.sd_3d(),
                        v.mean_bev(), v.sd_bev());
        }
        if (table.oracle) {
            std::printf("      %-16s AP3D %.4f +- %.4f  BEV %.4f +- %.4f\n", "oracle", table.oracle->mean_3d(),
                        table.oracle->sd_3d(), table.oracle->mean_bev(), table.oracle->sd_bev());
        }
    }

    t0 = Clock::now();
    {
        const EarlyStopStudy es = run_early_stop(cfg, setups);
        const double kept = es.retained_gain();
        std::ostringstream d;
        for (const auto& s : es.seeds) {
            d << fmt(" [seed %llu: stop %d/%d, AP3D none %.4f full %.4f stopped %.4f]",
                     static_cast<unsigned long long>(s.seed), s.stop_batch.value_or(0), s.batches, s.ap_noadapt,
                     s.ap_full, s.ap_stopped);
        }
        report("9", "early stop keeps the gain", es.all_stopped_before_half() && kept >= kMinRetained,
               fmt("retained gain %.3f;", kept) + d.str(), seconds_since(t0));
    }

    t0 = Clock::now();
    {
        std::vector<SeedSetup> again;
        for (auto seed : cfg.seeds) again.push_back(prepare_seed(cfg, seed));
        const std::string a = ablation_csv(table), b = ablation_csv(run_ablation(cfg, again, true));
        report("11", "determinism", a == b, fmt("two full runs, CSV bodies of %zu bytes %s", a.size(),
                                                a == b ? "identical" : "differ"),
               seconds_since(t0));
    }

    std::printf("%d failing line(s), total %.0f s\n", failures, seconds_since(start));
    return failures == 0 ? 0 : 1;
}
