#include "dpo/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace dpo {

namespace {

using nlohmann::json;

double mean(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Sample standard deviation; 0 for a single seed.
double sd(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

TrainConfig train_config(const RunConfig& cfg, std::uint64_t seed, std::uint64_t stream) {
    TrainConfig t = cfg.train;
    t.seed = derive_seed(seed, stream, 0);
    return t;
}

void push(VariantResult& r, const AdaptReport& rep) {
    r.ap_3d.push_back(rep.metrics.ap_3d);
    r.ap_bev.push_back(rep.metrics.ap_bev);
    r.stop_batch.push_back(rep.stop_batch);
}

std::string number_label(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

}  // namespace

std::vector<Scene> source_dataset(const RunConfig& cfg, std::uint64_t seed) {
    return make_dataset(cfg.source_scenes, cfg.gen, derive_seed(seed, kSeedSource, 0));
}

std::vector<Scene> source_eval_dataset(const RunConfig& cfg, std::uint64_t seed) {
    return make_dataset(cfg.eval_scenes, cfg.gen, derive_seed(seed, kSeedSourceEval, 0));
}

std::vector<Batch> target_stream(const RunConfig& cfg, std::uint64_t seed) {
    return make_stream(cfg.batches, cfg.batch_size, cfg.gen, cfg.shift, derive_seed(seed, kSeedTarget, 0));
}

std::vector<Scene> oracle_dataset(const RunConfig& cfg, std::uint64_t seed) {
    return make_shifted_dataset(cfg.oracle_scenes, cfg.gen, cfg.shift, derive_seed(seed, kSeedOracle, 0));
}

std::vector<Batch> to_batches(std::vector<Scene> scenes, int batch_size) {
    if (batch_size < 1) throw std::invalid_argument("to_batches: batch_size must be >= 1");
    std::vector<Batch> out;
    for (std::size_t i = 0; i < scenes.size(); i += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(scenes.size(), i + static_cast<std::size_t>(batch_size));
        out.emplace_back(std::make_move_iterator(scenes.begin() + static_cast<std::ptrdiff_t>(i)),
                         std::make_move_iterator(scenes.begin() + static_cast<std::ptrdiff_t>(end)));
    }
    return out;
}

std::vector<Scene> flatten(std::span<const Batch> stream) {
    std::vector<Scene> out;
    for (const auto& b : stream) out.insert(out.end(), b.begin(), b.end());
    return out;
}

Params pretrain_source(const RunConfig& cfg, std::span<const Scene> source, std::uint64_t seed) {
    return pretrain(source, train_config(cfg, seed, kSeedTrain));
}

Params pretrain_oracle(const RunConfig& cfg, std::span<const Scene> shifted, std::uint64_t seed) {
    return pretrain(shifted, train_config(cfg, seed, kSeedOracleTrain));
}

EvalResult evaluate_params(const Params& params, std::span<const Scene> scenes, const AdaptConfig& cfg) {
    const auto batches = to_batches(std::vector<Scene>(scenes.begin(), scenes.end()), 8);
    return predict_only(params, batches, cfg.eval_decode).metrics;
}

std::vector<Variant> ablation_variants() {
    return {
        {"no_adapt", false, false, false, false},
        {"self_training", true, false, false, false},
        {"pert_w", true, true, false, false},
        {"pert_wz", true, true, true, false},
        {"pert_w_matcher", true, true, false, true},
        {"dpo", true, true, true, true},
    };
}

AdaptConfig variant_config(const AdaptConfig& base, const Variant& v) {
    AdaptConfig c = base;
    c.adapt = v.adapt;
    c.perturb.perturb_weights = v.perturb_weights;
    c.perturb.perturb_inputs = v.perturb_inputs;
    c.use_matcher = v.matcher;
    return c;
}

SeedSetup prepare_seed(const RunConfig& cfg, std::uint64_t seed) {
    SeedSetup s;
    s.seed = seed;
    s.theta_s = pretrain_source(cfg, source_dataset(cfg, seed), seed);
    s.source_metrics = evaluate_params(s.theta_s, source_eval_dataset(cfg, seed), cfg.adapt);
    s.stream = target_stream(cfg, seed);
    return s;
}

double VariantResult::mean_3d() const { return mean(ap_3d); }
double VariantResult::mean_bev() const { return mean(ap_bev); }
double VariantResult::sd_3d() const { return sd(ap_3d); }
double VariantResult::sd_bev() const { return sd(ap_bev); }

const VariantResult& AblationTable::at(const std::string& name) const {
    for (const auto& v : variants) {
        if (v.name == name) return v;
    }
    if (oracle && oracle->name == name) return *oracle;
    throw std::out_of_range("ablation table has no row '" + name + "'");
}

AblationTable run_ablation(const RunConfig& cfg, std::span<const SeedSetup> setups, bool with_oracle) {
    AblationTable table;
    const auto variants = ablation_variants();
    for (const auto& v : variants) table.variants.push_back({v.name, {}, {}, {}});
    if (with_oracle) table.oracle = VariantResult{"oracle", {}, {}, {}};

    for (const auto& s : setups) {
        table.seeds.push_back(s.seed);
        table.source_metrics.push_back(s.source_metrics);
        for (std::size_t i = 0; i < variants.size(); ++i) {
            push(table.variants[i], adapt_stream(s.theta_s, s.stream, variant_config(cfg.adapt, variants[i])).report);
        }
        if (with_oracle) {
            const Params oracle = pretrain_oracle(cfg, oracle_dataset(cfg, s.seed), s.seed);
            push(*table.oracle, predict_only(oracle, s.stream, cfg.adapt.eval_decode));
        }
    }
    return table;
}

AblationTable run_ablation(const RunConfig& cfg, bool with_oracle) {
    std::vector<SeedSetup> setups;
    for (auto seed : cfg.seeds) setups.push_back(prepare_seed(cfg, seed));
    return run_ablation(cfg, setups, with_oracle);
}

std::vector<MetricsRow> ablation_rows(const AblationTable& table) {
    std::vector<MetricsRow> rows;
    const auto& base = table.at("no_adapt");
    const bool gap = table.oracle && table.oracle->mean_3d() != base.mean_3d() &&
                     table.oracle->mean_bev() != base.mean_bev();
    auto row = [&](const VariantResult& v) {
        MetricsRow r{v.name, v.mean_3d(), v.mean_bev(), std::nullopt, std::nullopt, std::nullopt};
        if (gap) {
            r.closed_gap_3d = closed_gap(v.mean_3d(), base.mean_3d(), table.oracle->mean_3d());
            r.closed_gap_bev = closed_gap(v.mean_bev(), base.mean_bev(), table.oracle->mean_bev());
        }
        // Only reported when every seed agrees on it.
        if (!v.stop_batch.empty() && v.stop_batch.front() &&
            std::all_of(v.stop_batch.begin(), v.stop_batch.end(), [&](const auto& b) { return b == v.stop_batch.front(); })) {
            r.stop_batch = v.stop_batch.front();
        }
        return r;
    };
    for (const auto& v : table.variants) rows.push_back(row(v));
    if (table.oracle) rows.push_back(row(*table.oracle));
    return rows;
}

std::string ablation_json(const AblationTable& table) {
    auto one = [](const VariantResult& v) {
        json stops = json::array();
        for (const auto& b : v.stop_batch) stops.push_back(b ? json(*b) : json(nullptr));
        return json{{"name", v.name},
                    {"ap_3d", v.ap_3d},
                    {"ap_bev", v.ap_bev},
                    {"mean_3d", v.mean_3d()},
                    {"sd_3d", v.sd_3d()},
                    {"mean_bev", v.mean_bev()},
                    {"sd_bev", v.sd_bev()},
                    {"stop_batch", stops}};
    };
    json rows = json::array();
    for (const auto& v : table.variants) rows.push_back(one(v));
    json source = json::array();
    for (const auto& m : table.source_metrics) source.push_back({{"ap_3d", m.ap_3d}, {"ap_bev", m.ap_bev}});
    json j{{"seeds", table.seeds}, {"variants", rows}, {"source", source}};
    j["oracle"] = table.oracle ? one(*table.oracle) : json(nullptr);
    return j.dump(2);
}

const std::vector<std::string>& sweep_params() {
    static const std::vector<std::string> names{"rho", "alpha", "gamma", "c_stop", "eta"};
    return names;
}

AdaptConfig with_sweep_value(AdaptConfig cfg, const std::string& param, double value) {
    auto require = [&](bool ok, const char* range) {
        if (!ok || !std::isfinite(value)) {
            throw ConfigError("sweep value " + number_label(value) + " for '" + param + "' outside " + range);
        }
    };
    if (param == "rho") {
        require(value > 0.0, "(0, inf)");
        cfg.perturb.rho_w = cfg.perturb.rho_z = value;
    } else if (param == "alpha") {
        require(value > 0.0 && value < 0.5, "(0, 0.5)");
        cfg.thresholds.alpha = value;
    } else if (param == "gamma") {
        require(value > 0.0 && value <= 1.0, "(0, 1]");
        cfg.gamma = value;
    } else if (param == "c_stop") {
        require(true, "");
        cfg.c_stop = value;
    } else if (param == "eta") {
        require(value > 0.0, "(0, inf)");
        cfg.eta = value;
    } else {
        throw ConfigError("unknown sweep parameter '" + param + "' (expected rho, alpha, gamma, c_stop or eta)");
    }
    return cfg;
}

std::vector<MetricsRow> run_sweep(const RunConfig& cfg, const SeedSetup& setup, const std::string& param,
                                  std::span<const double> values) {
    std::vector<AdaptConfig> configs;
    for (double v : values) configs.push_back(with_sweep_value(cfg.adapt, param, v));
    std::vector<MetricsRow> rows;
    for (std::size_t i = 0; i < configs.size(); ++i) {
        const auto rep = adapt_stream(setup.theta_s, setup.stream, configs[i]).report;
        rows.push_back({number_label(values[i]), rep.metrics.ap_3d, rep.metrics.ap_bev, std::nullopt, std::nullopt,
                        rep.stop_batch});
    }
    return rows;
}

std::optional<Plateau> first_plateau(std::span<const BatchRecord> records, double rel_tol) {
    std::optional<double> prev;
    for (const auto& r : records) {
        if (!r.c_ema) continue;
        if (prev && std::abs(*r.c_ema - *prev) <= rel_tol * std::abs(*prev)) return Plateau{r.t, *r.c_ema};
        prev = r.c_ema;
    }
    return std::nullopt;
}

double EarlyStopStudy::retained_gain() const {
    std::vector<double> none, full, stopped;
    for (const auto& s : seeds) {
        none.push_back(s.ap_noadapt);
        full.push_back(s.ap_full);
        stopped.push_back(s.ap_stopped);
    }
    const double gain = mean(full) - mean(none);
    if (gain == 0.0) return 0.0;
    return (mean(stopped) - mean(none)) / gain;
}

bool EarlyStopStudy::all_stopped_before_half() const {
    if (seeds.empty()) return false;
    return std::all_of(seeds.begin(), seeds.end(),
                       [](const EarlyStopSeed& s) { return s.stop_batch && 2 * *s.stop_batch < s.batches; });
}

EarlyStopStudy run_early_stop(const RunConfig& cfg, std::span<const SeedSetup> setups, double rel_tol) {
    EarlyStopStudy study;
    for (const auto& s : setups) {
        EarlyStopSeed e;
        e.seed = s.seed;
        e.batches = static_cast<int>(s.stream.size());
        AdaptConfig full = cfg.adapt;
        full.c_stop = -1.0;
        AdaptConfig none = full;
        none.adapt = false;
        e.ap_noadapt = adapt_stream(s.theta_s, s.stream, none).report.metrics.ap_3d;
        const auto run = adapt_stream(s.theta_s, s.stream, full).report;
        e.ap_full = run.metrics.ap_3d;
        e.plateau = first_plateau(run.records, rel_tol);
        if (e.plateau) {
            AdaptConfig cut = full;
            cut.c_stop = e.plateau->c_ema;
            const auto stopped = adapt_stream(s.theta_s, s.stream, cut).report;
            e.ap_stopped = stopped.metrics.ap_3d;
            e.stop_batch = stopped.stop_batch;
        } else {
            e.ap_stopped = e.ap_full;
        }
        study.seeds.push_back(e);
    }
    return study;
}

}  // namespace dpo
