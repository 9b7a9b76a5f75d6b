#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dpo/config.hpp"
#include "dpo/io.hpp"
#include "dpo/loop.hpp"

namespace dpo {

// Substream ids under a run seed. Everything a seed produces is derived from
// these, so any single artifact can be regenerated on its own.
inline constexpr std::uint64_t kSeedSource = 1;
inline constexpr std::uint64_t kSeedSourceEval = 2;
inline constexpr std::uint64_t kSeedTarget = 3;
inline constexpr std::uint64_t kSeedOracle = 4;
inline constexpr std::uint64_t kSeedTrain = 5;
inline constexpr std::uint64_t kSeedOracleTrain = 6;

std::vector<Scene> source_dataset(const RunConfig& cfg, std::uint64_t seed);
std::vector<Scene> source_eval_dataset(const RunConfig& cfg, std::uint64_t seed);
std::vector<Batch> target_stream(const RunConfig& cfg, std::uint64_t seed);
std::vector<Scene> oracle_dataset(const RunConfig& cfg, std::uint64_t seed);

/// Flat scene list cut into consecutive batches; a short tail batch is kept.
std::vector<Batch> to_batches(std::vector<Scene> scenes, int batch_size);
std::vector<Scene> flatten(std::span<const Batch> stream);

Params pretrain_source(const RunConfig& cfg, std::span<const Scene> source, std::uint64_t seed);
/// Supervised reference: the same head trained on labelled shifted scenes.
Params pretrain_oracle(const RunConfig& cfg, std::span<const Scene> shifted, std::uint64_t seed);

EvalResult evaluate_params(const Params& params, std::span<const Scene> scenes, const AdaptConfig& cfg);

struct Variant {
    std::string name;
    bool adapt = true;
    bool perturb_weights = false;
    bool perturb_inputs = false;
    bool matcher = false;
};

/// no_adapt, self_training, pert_w, pert_wz, pert_w_matcher, dpo.
std::vector<Variant> ablation_variants();
AdaptConfig variant_config(const AdaptConfig& base, const Variant& v);

/// Pretrained source model and target stream of one seed.
struct SeedSetup {
    std::uint64_t seed = 0;
    Params theta_s;
    std::vector<Batch> stream;
    EvalResult source_metrics;  // on held-out unshifted scenes
};

SeedSetup prepare_seed(const RunConfig& cfg, std::uint64_t seed);

struct VariantResult {
    std::string name;
    std::vector<double> ap_3d, ap_bev;  // one per seed
    std::vector<std::optional<int>> stop_batch;

    double mean_3d() const;
    double mean_bev() const;
    double sd_3d() const;
    double sd_bev() const;
};

struct AblationTable {
    std::vector<std::uint64_t> seeds;
    std::vector<VariantResult> variants;  // ablation_variants() order
    std::optional<VariantResult> oracle;
    std::vector<EvalResult> source_metrics;

    const VariantResult& at(const std::string& name) const;
};

/// Every variant on the identical stream of each seed; the oracle is trained
/// per seed on a separate labelled shifted set and scored on that stream.
AblationTable run_ablation(const RunConfig& cfg, std::span<const SeedSetup> setups, bool with_oracle = true);
AblationTable run_ablation(const RunConfig& cfg, bool with_oracle = true);

/// Seed means; closed gaps when the table has an oracle that differs from no_adapt.
std::vector<MetricsRow> ablation_rows(const AblationTable& table);
std::string ablation_json(const AblationTable& table);

/// Parameter names accepted by run_sweep.
const std::vector<std::string>& sweep_params();
/// Throws ConfigError for an unknown name or a value outside its range.
AdaptConfig with_sweep_value(AdaptConfig cfg, const std::string& param, double value);

/// One adaptation per value on the stream of `setup`.
std::vector<MetricsRow> run_sweep(const RunConfig& cfg, const SeedSetup& setup, const std::string& param,
                                  std::span<const double> values);

struct Plateau {
    int batch = 0;  // 1-based
    double c_ema = 0.0;
};

/// First batch whose EMA moved by at most `rel_tol` relative to the previous
/// observed EMA. Batches without a cost are skipped.
std::optional<Plateau> first_plateau(std::span<const BatchRecord> records, double rel_tol);

struct EarlyStopSeed {
    std::uint64_t seed = 0;
    double ap_noadapt = 0.0;
    double ap_full = 0.0;
    double ap_stopped = 0.0;
    std::optional<Plateau> plateau;
    std::optional<int> stop_batch;
    int batches = 0;
};

struct EarlyStopStudy {
    std::vector<EarlyStopSeed> seeds;

    /// (mean stopped - mean no-adapt) / (mean full - mean no-adapt).
    double retained_gain() const;
    /// True when every seed stopped strictly before half of its stream.
    bool all_stopped_before_half() const;
};

/// Per seed: full DPO run, c_stop set to the EMA at its first plateau, then a
/// second run with that cutoff.
EarlyStopStudy run_early_stop(const RunConfig& cfg, std::span<const SeedSetup> setups, double rel_tol = 0.1);

}  // namespace dpo
