#include "dpo/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "dpo/io.hpp"

#ifndef DPO_SOURCE_PRESET_DIR
#define DPO_SOURCE_PRESET_DIR "presets"
#endif

namespace dpo {

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

double parse_double(const std::string& v, const std::string& key) {
    const std::string t = trim(v);
    double out = 0.0;
    const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
    if (ec != std::errc() || p != t.data() + t.size() || !std::isfinite(out)) {
        throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
    }
    return out;
}

long long parse_int(const std::string& v, const std::string& key) {
    const std::string t = trim(v);
    long long out = 0;
    const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
    if (ec != std::errc() || p != t.data() + t.size()) {
        throw ConfigError("key '" + key + "': expected an integer, got '" + v + "'");
    }
    return out;
}

bool parse_bool(const std::string& v, const std::string& key) {
    const std::string t = trim(v);
    if (t == "true" || t == "1" || t == "yes") return true;
    if (t == "false" || t == "0" || t == "no") return false;
    throw ConfigError("key '" + key + "': expected true/false, got '" + v + "'");
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

struct Entry {
    std::function<void(RunConfig&, const std::string&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <typename Member>
Entry real(Member m) {
    return {[m](RunConfig& c, const std::string& v, const std::string& k) { m(c) = parse_double(v, k); },
            [m](const RunConfig& c) { return fmt(m(c)); }};
}

template <typename Member>
Entry integer(Member m) {
    return {[m](RunConfig& c, const std::string& v, const std::string& k) {
                using T = std::remove_reference_t<decltype(m(c))>;
                const long long x = parse_int(v, k);
                if constexpr (std::is_unsigned_v<T>) {
                    if (x < 0) throw ConfigError("key '" + k + "': must be non-negative");
                }
                m(c) = static_cast<T>(x);
            },
            [m](const RunConfig& c) { return std::to_string(m(c)); }};
}

template <typename Member>
Entry boolean(Member m) {
    return {[m](RunConfig& c, const std::string& v, const std::string& k) { m(c) = parse_bool(v, k); },
            [m](const RunConfig& c) { return std::string(m(c) ? "true" : "false"); }};
}

#define DPO_FIELD(expr) [](auto& c) -> auto& { return expr; }

// Ordered by section, then key, as written by to_ini.
const std::map<std::string, std::map<std::string, Entry>>& registry() {
    static const std::map<std::string, std::map<std::string, Entry>> r = [] {
        std::map<std::string, std::map<std::string, Entry>> m;
        auto& run = m["run"];
        run["preset"] = {[](RunConfig& c, const std::string& v, const std::string&) { c.preset = trim(v); },
                         [](const RunConfig& c) { return c.preset; }};
        run["seed"] = integer(DPO_FIELD(c.seed));
        run["seeds"] = {[](RunConfig& c, const std::string& v, const std::string& k) {
                            c.seeds.clear();
                            std::stringstream ss(v);
                            std::string item;
                            while (std::getline(ss, item, ',')) {
                                const long long x = parse_int(item, k);
                                if (x < 0) throw ConfigError("key '" + k + "': seeds must be non-negative");
                                c.seeds.push_back(static_cast<std::uint64_t>(x));
                            }
                        },
                        [](const RunConfig& c) {
                            std::string s;
                            for (std::size_t i = 0; i < c.seeds.size(); ++i) s += (i ? "," : "") + std::to_string(c.seeds[i]);
                            return s;
                        }};
        run["batches"] = integer(DPO_FIELD(c.batches));
        run["batch_size"] = integer(DPO_FIELD(c.batch_size));
        run["source_scenes"] = integer(DPO_FIELD(c.source_scenes));
        run["eval_scenes"] = integer(DPO_FIELD(c.eval_scenes));
        run["oracle_scenes"] = integer(DPO_FIELD(c.oracle_scenes));

        auto& grid = m["grid"];
        grid["height"] = integer(DPO_FIELD(c.gen.grid.height));
        grid["width"] = integer(DPO_FIELD(c.gen.grid.width));
        grid["channels"] = integer(DPO_FIELD(c.gen.grid.channels));
        grid["cell_size"] = real(DPO_FIELD(c.gen.grid.cell_size));

        auto& gen = m["generator"];
        gen["min_objects"] = integer(DPO_FIELD(c.gen.min_objects));
        gen["max_objects"] = integer(DPO_FIELD(c.gen.max_objects));
        gen["length_min"] = real(DPO_FIELD(c.gen.length_min));
        gen["length_max"] = real(DPO_FIELD(c.gen.length_max));
        gen["width_min"] = real(DPO_FIELD(c.gen.width_min));
        gen["width_max"] = real(DPO_FIELD(c.gen.width_max));
        gen["height_min"] = real(DPO_FIELD(c.gen.height_min));
        gen["height_max"] = real(DPO_FIELD(c.gen.height_max));
        gen["yaw_min"] = real(DPO_FIELD(c.gen.yaw_min));
        gen["yaw_max"] = real(DPO_FIELD(c.gen.yaw_max));
        gen["edge_margin"] = real(DPO_FIELD(c.gen.edge_margin));
        gen["min_separation"] = real(DPO_FIELD(c.gen.min_separation));
        gen["amplitude_min"] = real(DPO_FIELD(c.gen.amplitude_min));
        gen["amplitude_max"] = real(DPO_FIELD(c.gen.amplitude_max));
        gen["background_sigma"] = real(DPO_FIELD(c.gen.background_sigma));
        gen["offset_scale"] = real(DPO_FIELD(c.gen.offset_scale));
        gen["size_gain"] = real(DPO_FIELD(c.gen.size_gain));
        gen["yaw_gain"] = real(DPO_FIELD(c.gen.yaw_gain));
        gen["geometry_cutoff"] = real(DPO_FIELD(c.gen.geometry_cutoff));
        gen["ref_length"] = real(DPO_FIELD(c.gen.ref_length));
        gen["ref_width"] = real(DPO_FIELD(c.gen.ref_width));
        gen["ref_height"] = real(DPO_FIELD(c.gen.ref_height));
        gen["distractors_min"] = integer(DPO_FIELD(c.gen.distractors_min));
        gen["distractors_max"] = integer(DPO_FIELD(c.gen.distractors_max));
        gen["distractor_amplitude"] = real(DPO_FIELD(c.gen.distractor_amplitude));

        auto& shift = m["shift"];
        shift["scale_factor"] = real(DPO_FIELD(c.shift.scale_factor));
        shift["noise_sigma"] = real(DPO_FIELD(c.shift.noise_sigma));
        shift["dropout_prob"] = real(DPO_FIELD(c.shift.dropout_prob));
        shift["blur_width"] = integer(DPO_FIELD(c.shift.blur_width));
        shift["intensity_offset"] = real(DPO_FIELD(c.shift.intensity_offset));

        auto& pre = m["pretrain"];
        pre["hidden"] = integer(DPO_FIELD(c.train.hidden));
        pre["epochs"] = integer(DPO_FIELD(c.train.epochs));
        pre["batch_size"] = integer(DPO_FIELD(c.train.batch_size));
        pre["learning_rate"] = real(DPO_FIELD(c.train.learning_rate));
        pre["final_lr_fraction"] = real(DPO_FIELD(c.train.final_lr_fraction));
        pre["init_scale"] = real(DPO_FIELD(c.train.init_scale));
        pre["prior_prob"] = real(DPO_FIELD(c.train.prior_prob));
        pre["lambda_reg"] = real(DPO_FIELD(c.train.loss.lambda_reg));
        pre["smooth_l1_beta"] = real(DPO_FIELD(c.train.loss.smooth_l1_beta));

        auto& ad = m["adapt"];
        ad["enabled"] = boolean(DPO_FIELD(c.adapt.adapt));
        ad["rho"] = {[](RunConfig& c, const std::string& v, const std::string& k) {
                         c.adapt.perturb.rho_w = c.adapt.perturb.rho_z = parse_double(v, k);
                     },
                     [](const RunConfig& c) { return fmt(c.adapt.perturb.rho_w); }};
        ad["rho_w"] = real(DPO_FIELD(c.adapt.perturb.rho_w));
        ad["rho_z"] = real(DPO_FIELD(c.adapt.perturb.rho_z));
        ad["perturb_weights"] = boolean(DPO_FIELD(c.adapt.perturb.perturb_weights));
        ad["perturb_inputs"] = boolean(DPO_FIELD(c.adapt.perturb.perturb_inputs));
        ad["matcher"] = boolean(DPO_FIELD(c.adapt.use_matcher));
        ad["alpha"] = real(DPO_FIELD(c.adapt.thresholds.alpha));
        ad["include_infinite"] = boolean(DPO_FIELD(c.adapt.thresholds.include_infinite));
        ad["gamma"] = real(DPO_FIELD(c.adapt.gamma));
        ad["eta"] = real(DPO_FIELD(c.adapt.eta));
        ad["c_stop"] = real(DPO_FIELD(c.adapt.c_stop));
        ad["w_iou"] = real(DPO_FIELD(c.adapt.cost_weights.w_iou));
        ad["w_l1"] = real(DPO_FIELD(c.adapt.cost_weights.w_l1));
        ad["lambda_reg"] = real(DPO_FIELD(c.adapt.loss.lambda_reg));
        ad["smooth_l1_beta"] = real(DPO_FIELD(c.adapt.loss.smooth_l1_beta));
        ad["pseudo_score_thresh"] = real(DPO_FIELD(c.adapt.pseudo_decode.score_thresh));
        ad["pseudo_nms_thresh"] = real(DPO_FIELD(c.adapt.pseudo_decode.nms_thresh));
        ad["eval_score_thresh"] = real(DPO_FIELD(c.adapt.eval_decode.score_thresh));
        ad["eval_nms_thresh"] = real(DPO_FIELD(c.adapt.eval_decode.nms_thresh));
        ad["pre_nms_top_k"] = {[](RunConfig& c, const std::string& v, const std::string& k) {
                                   const long long x = parse_int(v, k);
                                   if (x < 1) throw ConfigError("key '" + k + "': must be >= 1");
                                   c.adapt.pseudo_decode.pre_nms_top_k = c.adapt.eval_decode.pre_nms_top_k =
                                       static_cast<std::size_t>(x);
                               },
                               [](const RunConfig& c) { return std::to_string(c.adapt.pseudo_decode.pre_nms_top_k); }};
        return m;
    }();
    return r;
}

#undef DPO_FIELD

void require(bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
}

bool in_unit_open(double x) { return x > 0.0 && x < 1.0; }

}  // namespace

void RunConfig::validate() const {
    require(batches >= 1, "run.batches must be >= 1");
    require(batch_size >= 1, "run.batch_size must be >= 1");
    require(source_scenes >= 1, "run.source_scenes must be >= 1");
    require(eval_scenes >= 1, "run.eval_scenes must be >= 1");
    require(oracle_scenes >= 1, "run.oracle_scenes must be >= 1");
    require(!seeds.empty(), "run.seeds must list at least one seed");
    try {
        gen.validate();
        shift.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    require(train.hidden >= 1 && train.epochs >= 0 && train.batch_size >= 1, "pretrain: hidden, epochs, batch_size out of range");
    require(train.learning_rate > 0.0, "pretrain.learning_rate must be > 0");
    require(train.final_lr_fraction > 0.0 && train.final_lr_fraction <= 1.0, "pretrain.final_lr_fraction must lie in (0, 1]");
    require(train.init_scale > 0.0, "pretrain.init_scale must be > 0");
    require(in_unit_open(train.prior_prob), "pretrain.prior_prob must lie in (0, 1)");
    require(train.loss.lambda_reg >= 0.0 && train.loss.smooth_l1_beta > 0.0, "pretrain loss weights out of range");

    const auto& a = adapt;
    require(a.perturb.rho_w > 0.0 && a.perturb.rho_z > 0.0, "adapt.rho must be > 0");
    require(a.thresholds.alpha > 0.0 && a.thresholds.alpha < 0.5, "adapt.alpha must lie in (0, 0.5)");
    require(a.gamma > 0.0 && a.gamma <= 1.0, "adapt.gamma must lie in (0, 1]");
    require(a.eta > 0.0, "adapt.eta must be > 0");
    require(a.cost_weights.w_iou >= 0.0 && a.cost_weights.w_l1 >= 0.0, "adapt cost weights must be >= 0");
    require(a.loss.lambda_reg >= 0.0 && a.loss.smooth_l1_beta > 0.0, "adapt loss weights out of range");
    require(in_unit_open(a.pseudo_decode.score_thresh) && in_unit_open(a.pseudo_decode.nms_thresh),
            "adapt pseudo-label thresholds must lie in (0, 1)");
    require(in_unit_open(a.eval_decode.score_thresh) && in_unit_open(a.eval_decode.nms_thresh),
            "adapt evaluation thresholds must lie in (0, 1)");
}

RunConfig default_config() {
    RunConfig c;
    c.train.seed = c.seed;
    return c;
}

std::filesystem::path preset_dir() {
    if (const char* env = std::getenv("DPO_PRESET_DIR"); env && *env) return env;
    return DPO_SOURCE_PRESET_DIR;
}

RunConfig apply_ini(RunConfig cfg, const std::string& ini_text, const std::string& origin) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream in(ini_text);
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(origin + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
    }
    const auto& reg = registry();
    for (const auto& [section, body] : tree) {
        if (body.empty() && !body.data().empty()) {
            throw ConfigError(origin + ": key '" + section + "' must sit inside a [section]");
        }
        const auto sec = reg.find(section);
        if (sec == reg.end()) throw ConfigError(origin + ": unknown section [" + section + "]");
        for (const auto& [key, value] : body) {
            const auto e = sec->second.find(key);
            const std::string full = section + "." + key;
            if (e == sec->second.end()) throw ConfigError(origin + ": unknown key '" + full + "'");
            try {
                e->second.set(cfg, value.data(), full);
            } catch (const ConfigError& err) {
                throw ConfigError(origin + ": " + err.what());
            }
        }
    }
    cfg.train.seed = cfg.seed;
    try {
        cfg.validate();
    } catch (const ConfigError& err) {
        throw ConfigError(origin + ": " + err.what());
    }
    return cfg;
}

RunConfig load_preset(const std::string& name) {
    if (name.empty() || name.find('/') != std::string::npos || name.find("..") != std::string::npos) {
        throw ConfigError("invalid preset name '" + name + "'");
    }
    const auto path = preset_dir() / (name + ".ini");
    if (!std::filesystem::exists(path)) {
        throw ConfigError("unknown preset '" + name + "' (looked for " + path.string() + ")");
    }
    RunConfig cfg = apply_ini(default_config(), read_text(path), path.string());
    cfg.preset = name;
    cfg.validate();
    return cfg;
}

RunConfig load_config_file(const std::filesystem::path& path) {
    const std::string text = read_text(path);
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream in(text);
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(path.string() + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
    }
    const auto preset = tree.get_optional<std::string>("run.preset");
    if (!preset || trim(*preset).empty()) {
        throw ConfigError(path.string() + ": missing required key 'run.preset'");
    }
    RunConfig cfg = apply_ini(load_preset(trim(*preset)), text, path.string());
    cfg.validate();
    return cfg;
}

std::string to_ini(const RunConfig& cfg) {
    std::string out;
    for (const auto& [section, keys] : registry()) {
        out += "[" + section + "]\n";
        for (const auto& [key, entry] : keys) {
            if (section == "adapt" && key == "rho") continue;  // rho_w / rho_z carry it
            out += key + " = " + entry.get(cfg) + "\n";
        }
        out += "\n";
    }
    return out;
}

}  // namespace dpo
