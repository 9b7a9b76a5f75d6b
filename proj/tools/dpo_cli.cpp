// dpo: generate scenes, pretrain the source head, adapt on a shifted stream,
// and run the ablation and sweep experiments.
//
// Exit codes: 0 ok, 1 usage or config error, 2 I/O error, 3 numerical failure.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dpo/config.hpp"
#include "dpo/experiment.hpp"
#include "dpo/io.hpp"
#include "dpo/loop.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace dpo;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitIo = 2;
constexpr int kExitNumerical = 3;

struct Common {
    std::string config_path;
    std::string preset = "composite-heavy";
    std::optional<std::uint64_t> seed;
    std::string out = "out";
    bool pretty = false;
};

RunConfig load(const Common& c) {
    RunConfig cfg = c.config_path.empty() ? load_preset(c.preset) : load_config_file(c.config_path);
    if (c.seed) {
        cfg.seed = *c.seed;
        cfg.seeds = {*c.seed};
    }
    return cfg;
}

fs::path out_dir(const Common& c) {
    const fs::path dir(c.out);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
    return dir;
}

std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// Run metadata; the only place a wall-clock time is written.
void write_sidecar(const fs::path& path, const std::string& command, const RunConfig& cfg, json extra = json::object()) {
    extra["command"] = command;
    extra["created"] = utc_now();
    extra["seed"] = cfg.seed;
    extra["seeds"] = cfg.seeds;
    extra["generator"] = json::parse(gen_config_json(cfg.gen));
    extra["shift"] = json::parse(shift_json(cfg.shift));
    extra["config_ini"] = to_ini(cfg);
    write_text(path, extra.dump(2) + "\n");
}

void check_grid(const GridMeta& file, const RunConfig& cfg, const fs::path& path) {
    if (!(file == cfg.gen.grid)) {
        throw ConfigError(path.string() + ": grid " + std::to_string(file.height) + "x" + std::to_string(file.width) +
                          "x" + std::to_string(file.channels) + " does not match the config grid " +
                          std::to_string(cfg.gen.grid.height) + "x" + std::to_string(cfg.gen.grid.width) + "x" +
                          std::to_string(cfg.gen.grid.channels));
    }
}

void check_head(const Params& p, const RunConfig& cfg, const fs::path& path) {
    if (p.channels() != cfg.gen.grid.channels) {
        throw ConfigError(path.string() + ": checkpoint expects " + std::to_string(p.channels()) +
                          " channels, config has " + std::to_string(cfg.gen.grid.channels));
    }
}

std::string table(std::span<const MetricsRow> rows, const std::string& key) {
    std::ostringstream s;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-16s %8s %8s %10s %10s %6s\n", key.c_str(), "AP_3D", "AP_BEV", "gap_3D%", "gap_BEV%", "stop");
    s << buf;
    for (const auto& r : rows) {
        auto opt = [](const std::optional<double>& v) {
            char b[32];
            if (v) std::snprintf(b, sizeof b, "%.2f", *v);
            else std::snprintf(b, sizeof b, "-");
            return std::string(b);
        };
        std::snprintf(buf, sizeof buf, "%-16s %8.2f %8.2f %10s %10s %6s\n", r.name.c_str(), 100.0 * r.ap_3d,
                      100.0 * r.ap_bev, opt(r.closed_gap_3d).c_str(), opt(r.closed_gap_bev).c_str(),
                      r.stop_batch ? std::to_string(*r.stop_batch).c_str() : "-");
        s << buf;
    }
    return s.str();
}

void emit(std::span<const MetricsRow> rows, const std::string& key, bool pretty) {
    std::cout << (pretty ? table(rows, key) : metrics_csv(rows, key));
}

int cmd_gen(const Common& c) {
    const RunConfig cfg = load(c);
    const fs::path dir = out_dir(c);
    const auto source = source_dataset(cfg, cfg.seed);
    const auto eval = source_eval_dataset(cfg, cfg.seed);
    const auto stream = flatten(target_stream(cfg, cfg.seed));
    write_scenes(dir / "source.dpo", cfg.gen.grid, source);
    write_scenes(dir / "eval.dpo", cfg.gen.grid, eval);
    write_scenes(dir / "stream.dpo", cfg.gen.grid, stream);
    write_sidecar(dir / "gen.json", "gen", cfg,
                  {{"files", {{"source.dpo", source.size()}, {"eval.dpo", eval.size()}, {"stream.dpo", stream.size()}}},
                   {"batch_size", cfg.batch_size}});
    std::cout << "wrote " << source.size() << " source, " << eval.size() << " eval and " << stream.size()
              << " stream scenes to " << dir.string() << "\n";
    return kExitOk;
}

int cmd_pretrain(const Common& c, const std::string& data, const std::string& eval_path) {
    const RunConfig cfg = load(c);
    const fs::path dir = out_dir(c);
    const fs::path data_path = data.empty() ? dir / "source.dpo" : fs::path(data);
    const auto set = read_scenes(data_path);
    check_grid(set.meta, cfg, data_path);
    const Params theta = pretrain_source(cfg, set.scenes, cfg.seed);
    write_params(dir / "theta.dpow", theta);

    const fs::path ev = eval_path.empty() ? dir / "eval.dpo" : fs::path(eval_path);
    json summary{{"checkpoint", (dir / "theta.dpow").string()}, {"train_scenes", set.scenes.size()}};
    EvalResult train_m = evaluate_params(theta, set.scenes, cfg.adapt);
    summary["train_ap_3d"] = train_m.ap_3d;
    summary["train_ap_bev"] = train_m.ap_bev;
    if (fs::exists(ev)) {
        const auto held = read_scenes(ev);
        check_grid(held.meta, cfg, ev);
        const EvalResult m = evaluate_params(theta, held.scenes, cfg.adapt);
        summary["source_ap_3d"] = m.ap_3d;
        summary["source_ap_bev"] = m.ap_bev;
    }
    write_sidecar(dir / "pretrain.json", "pretrain", cfg, {{"summary", summary}});
    std::cout << (c.pretty ? summary.dump(2) : summary.dump()) << "\n";
    return kExitOk;
}

struct AdaptArgs {
    std::string checkpoint;
    std::string stream;
    bool no_adapt = false;
    std::optional<double> c_stop;
};

int cmd_adapt(const Common& c, const AdaptArgs& a) {
    RunConfig cfg = load(c);
    const fs::path dir = out_dir(c);
    const fs::path ckpt = a.checkpoint.empty() ? dir / "theta.dpow" : fs::path(a.checkpoint);
    const fs::path sp = a.stream.empty() ? dir / "stream.dpo" : fs::path(a.stream);
    const Params theta = read_params(ckpt);
    check_head(theta, cfg, ckpt);
    auto set = read_scenes(sp);
    check_grid(set.meta, cfg, sp);
    const auto stream = to_batches(std::move(set.scenes), cfg.batch_size);

    AdaptConfig ac = cfg.adapt;
    if (a.c_stop) ac.c_stop = *a.c_stop;
    if (a.no_adapt) ac.adapt = false;
    const auto res = adapt_stream(theta, stream, ac);
    const auto& rep = res.report;

    write_text(dir / "run.jsonl", run_log_jsonl(rep));
    write_text(dir / "report.json", report_json(rep, c.pretty) + "\n");
    const std::vector<MetricsRow> rows{{a.no_adapt ? "no_adapt" : "dpo", rep.metrics.ap_3d, rep.metrics.ap_bev,
                                        std::nullopt, std::nullopt, rep.stop_batch}};
    write_text(dir / "metrics.csv", metrics_csv(rows));
    write_params(dir / "theta_adapted.dpow", res.params);
    write_sidecar(dir / "adapt.json", "adapt", cfg,
                  {{"checkpoint", ckpt.string()}, {"stream", sp.string()}, {"no_adapt", a.no_adapt},
                   {"c_stop", ac.c_stop}});
    emit(rows, "method", c.pretty);
    return kExitOk;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& stream_path) {
    const RunConfig cfg = load(c);
    const fs::path dir = out_dir(c);
    const fs::path ckpt = checkpoint.empty() ? dir / "theta.dpow" : fs::path(checkpoint);
    const fs::path sp = stream_path.empty() ? dir / "stream.dpo" : fs::path(stream_path);
    const Params theta = read_params(ckpt);
    check_head(theta, cfg, ckpt);
    const auto set = read_scenes(sp);
    check_grid(set.meta, cfg, sp);
    const EvalResult m = evaluate_params(theta, set.scenes, cfg.adapt);
    const std::vector<MetricsRow> rows{{"model", m.ap_3d, m.ap_bev, std::nullopt, std::nullopt, std::nullopt}};
    write_text(dir / "eval.csv", metrics_csv(rows));
    emit(rows, "method", c.pretty);
    return kExitOk;
}

int cmd_ablate(const Common& c, bool early_stop) {
    const RunConfig cfg = load(c);
    const fs::path dir = out_dir(c);
    std::vector<SeedSetup> setups;
    for (auto s : cfg.seeds) setups.push_back(prepare_seed(cfg, s));
    const auto tab = run_ablation(cfg, setups);
    const auto rows = ablation_rows(tab);
    write_text(dir / "ablation.csv", metrics_csv(rows));
    write_text(dir / "ablation.json", ablation_json(tab) + "\n");
    json extra{{"files", {"ablation.csv", "ablation.json"}}};
    if (early_stop) {
        const auto study = run_early_stop(cfg, setups);
        std::string csv = "seed,ap_noadapt,ap_full,ap_stopped,plateau_batch,c_stop,stop_batch,batches\n";
        char buf[256];
        for (const auto& s : study.seeds) {
            std::snprintf(buf, sizeof buf, "%llu,%.6f,%.6f,%.6f,%s,%s,%s,%d\n", static_cast<unsigned long long>(s.seed),
                          s.ap_noadapt, s.ap_full, s.ap_stopped,
                          s.plateau ? std::to_string(s.plateau->batch).c_str() : "",
                          s.plateau ? json(s.plateau->c_ema).dump().c_str() : "",
                          s.stop_batch ? std::to_string(*s.stop_batch).c_str() : "", s.batches);
            csv += buf;
        }
        write_text(dir / "early_stop.csv", csv);
        extra["retained_gain"] = study.retained_gain();
        extra["all_stopped_before_half"] = study.all_stopped_before_half();
        extra["files"].push_back("early_stop.csv");
    }
    write_sidecar(dir / "ablate.json", "ablate", cfg, extra);
    emit(rows, "method", c.pretty);
    return kExitOk;
}

std::vector<double> parse_values(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            const double v = std::stod(item, &used);
            if (used != item.size()) throw std::invalid_argument(item);
            out.push_back(v);
        } catch (const std::exception&) {
            throw ConfigError("--values: cannot parse '" + item + "' as a number");
        }
    }
    if (out.empty()) throw ConfigError("--values: no values given");
    return out;
}

int cmd_sweep(const Common& c, const std::string& param, const std::string& values_text) {
    const RunConfig cfg = load(c);
    const auto values = parse_values(values_text);
    for (double v : values) with_sweep_value(cfg.adapt, param, v);  // reject before the expensive part
    const fs::path dir = out_dir(c);
    const SeedSetup setup = prepare_seed(cfg, cfg.seed);
    const auto rows = run_sweep(cfg, setup, param, values);
    write_text(dir / ("sweep_" + param + ".csv"), metrics_csv(rows, param));
    write_sidecar(dir / ("sweep_" + param + ".json"), "sweep", cfg, {{"param", param}, {"values", values}});
    emit(rows, param, c.pretty);
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dual-perturbation test-time adaptation for a toy BEV detector"};
    app.require_subcommand(1);
    Common common;
    auto add_common = [&](CLI::App* sub) {
        auto* cfg = sub->add_option("--config", common.config_path, "INI config; must name its preset in [run] preset");
        sub->add_option("--preset", common.preset, "Preset name under presets/ (ignored with --config)")
            ->excludes(cfg)
            ->capture_default_str();
        sub->add_option("--seed", common.seed, "Run seed; for ablate, the only seed used");
        sub->add_option("--out", common.out, "Output directory")->capture_default_str();
        sub->add_flag("--pretty", common.pretty, "Human-readable tables and indented JSON");
    };

    auto* gen = app.add_subcommand("gen", "Write source, eval and stream scene files");
    add_common(gen);

    std::string data, eval_set;
    auto* pre = app.add_subcommand("pretrain", "Train the source head and report its source AP");
    add_common(pre);
    pre->add_option("--data", data, "Source scene file (default OUT/source.dpo)");
    pre->add_option("--eval", eval_set, "Held-out scene file (default OUT/eval.dpo if present)");

    AdaptArgs aa;
    auto* ad = app.add_subcommand("adapt", "Single pass of test-time adaptation over a stream");
    add_common(ad);
    ad->add_option("--checkpoint", aa.checkpoint, "Source checkpoint (default OUT/theta.dpow)");
    ad->add_option("--stream", aa.stream, "Stream scene file (default OUT/stream.dpo)");
    ad->add_flag("--no-adapt", aa.no_adapt, "Inference only");
    ad->add_option("--c-stop", aa.c_stop, "Early-stop threshold; negative never stops");

    std::string ev_ckpt, ev_stream;
    auto* ev = app.add_subcommand("eval", "AP of a fixed checkpoint on a scene file");
    add_common(ev);
    ev->add_option("--checkpoint", ev_ckpt, "Checkpoint (default OUT/theta.dpow)");
    ev->add_option("--stream", ev_stream, "Scene file (default OUT/stream.dpo)");

    bool early_stop = false;
    auto* ab = app.add_subcommand("ablate", "Ablation table over the preset's seeds");
    add_common(ab);
    ab->add_flag("--early-stop", early_stop, "Also run the plateau early-stop study");

    std::string param, values;
    auto* sw = app.add_subcommand("sweep", "One adaptation per parameter value on one stream");
    add_common(sw);
    sw->add_option("--param", param, "rho, alpha, gamma, c_stop or eta")->required();
    sw->add_option("--values", values, "Comma-separated values")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*gen) return cmd_gen(common);
        if (*pre) return cmd_pretrain(common, data, eval_set);
        if (*ad) return cmd_adapt(common, aa);
        if (*ev) return cmd_eval(common, ev_ckpt, ev_stream);
        if (*ab) return cmd_ablate(common, early_stop);
        if (*sw) return cmd_sweep(common, param, values);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kExitIo;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const std::invalid_argument& e) {
        std::cerr << "invalid input: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}
