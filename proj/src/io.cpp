#include "dpo/io.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace dpo {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace {

using nlohmann::json;

class Writer {
public:
    explicit Writer(const std::filesystem::path& path) : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
        if (!out_) throw IoError("cannot open for writing: " + path.string());
    }
    template <typename T>
    void put(const T& v) {
        out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
    }
    void bytes(const char* p, std::size_t n) { out_.write(p, static_cast<std::streamsize>(n)); }
    void finish() {
        out_.flush();
        if (!out_) throw IoError("write failed: " + path_.string());
    }

private:
    std::filesystem::path path_;
    std::ofstream out_;
};

class Reader {
public:
    explicit Reader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw IoError("cannot open for reading: " + path.string());
    }
    template <typename T>
    T get() {
        T v{};
        in_.read(reinterpret_cast<char*>(&v), sizeof(T));
        if (!in_) throw IoError("truncated file: " + path_.string());
        return v;
    }
    void bytes(char* p, std::size_t n) {
        in_.read(p, static_cast<std::streamsize>(n));
        if (!in_) throw IoError("truncated file: " + path_.string());
    }
    void expect_magic(const char (&magic)[4]) {
        char m[4];
        bytes(m, 4);
        if (std::memcmp(m, magic, 4) != 0) throw IoError("bad magic bytes in " + path_.string());
        const auto version = get<std::uint32_t>();
        if (version != kFormatVersion) {
            throw IoError("unsupported format version " + std::to_string(version) + " in " + path_.string());
        }
    }
    void expect_end() {
        if (in_.peek() != std::char_traits<char>::eof()) throw IoError("trailing bytes in " + path_.string());
    }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
    std::ifstream in_;
};

json box_json(const Box3D& b) { return json::array({b.cx, b.cy, b.cz, b.dx, b.dy, b.dz, b.yaw}); }

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json record_json(const BatchRecord& r) {
    json costs = json::array();
    for (double c : r.costs) costs.push_back(std::isinf(c) ? json("inf") : json(c));
    return json{{"t", r.t},
                {"pseudo_count", r.pseudo_count},
                {"perturbed_count", r.perturbed_count},
                {"mean_cost", opt(r.mean_cost)},
                {"c_ema", opt(r.c_ema)},
                {"tiers", {{"high", r.high}, {"medium", r.medium}, {"low", r.low}}},
                {"costs", costs},
                {"loss_clean", r.step.loss_clean},
                {"loss_perturbed", r.step.loss_perturbed},
                {"grad_norm", r.step.grad_norm},
                {"eps_w_norm", opt(r.eps_w_norm)},
                {"eps_z_norms", r.eps_z_norms},
                {"updated", r.updated},
                {"skipped", r.step.skipped},
                {"skip_reason", r.step.skip_reason},
                {"inference_only", r.inference_only}};
}

json ap_json(const ApResult& r) {
    return json{{"ap", r.ap}, {"precision", r.precision}, {"tp", r.tp}, {"fp", r.fp}, {"fn", r.fn}};
}

std::string fixed(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

}  // namespace

void write_scenes(const std::filesystem::path& path, const GridMeta& meta, std::span<const Scene> scenes) {
    Writer w(path);
    w.bytes(kSceneMagic, 4);
    w.put(kFormatVersion);
    w.put<std::int32_t>(meta.height);
    w.put<std::int32_t>(meta.width);
    w.put<std::int32_t>(meta.channels);
    w.put<double>(meta.cell_size);
    w.put<std::uint64_t>(scenes.size());
    std::vector<float> grid(meta.size());
    for (const auto& s : scenes) {
        if (!(s.bev.meta() == meta)) throw std::invalid_argument("write_scenes: scene grid does not match the header");
        w.put<std::uint64_t>(s.seed);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(s.gt_boxes.size()));
        for (const auto& b : s.gt_boxes) {
            for (double v : b.as_array()) w.put(v);
        }
        const auto values = s.bev.values();
        for (std::size_t i = 0; i < values.size(); ++i) grid[i] = static_cast<float>(values[i]);
        w.bytes(reinterpret_cast<const char*>(grid.data()), grid.size() * sizeof(float));
    }
    w.finish();
}

SceneFile read_scenes(const std::filesystem::path& path) {
    Reader r(path);
    r.expect_magic(kSceneMagic);
    SceneFile f;
    f.meta.height = r.get<std::int32_t>();
    f.meta.width = r.get<std::int32_t>();
    f.meta.channels = r.get<std::int32_t>();
    f.meta.cell_size = r.get<double>();
    try {
        f.meta.validate();
    } catch (const std::invalid_argument& e) {
        throw IoError(path.string() + ": bad grid header: " + e.what());
    }
    const auto count = r.get<std::uint64_t>();
    std::vector<float> grid(f.meta.size());
    for (std::uint64_t k = 0; k < count; ++k) {
        Scene s;
        s.seed = r.get<std::uint64_t>();
        const auto boxes = r.get<std::uint32_t>();
        for (std::uint32_t b = 0; b < boxes; ++b) {
            std::array<double, 7> a;
            for (double& v : a) v = r.get<double>();
            try {
                s.gt_boxes.push_back(Box3D::from_array(a));
            } catch (const std::invalid_argument& e) {
                throw IoError(path.string() + ": invalid box: " + e.what());
            }
        }
        r.bytes(reinterpret_cast<char*>(grid.data()), grid.size() * sizeof(float));
        std::vector<double> values(grid.begin(), grid.end());
        s.bev = BevFeature(f.meta, std::move(values));
        if (!s.bev.all_finite()) throw IoError(path.string() + ": non-finite feature values");
        f.scenes.push_back(std::move(s));
    }
    r.expect_end();
    return f;
}

void write_params(const std::filesystem::path& path, const Params& params) {
    Writer w(path);
    w.bytes(kParamsMagic, 4);
    w.put(kFormatVersion);
    w.put<std::int32_t>(params.channels());
    w.put<std::int32_t>(params.hidden());
    w.put<std::uint64_t>(params.size());
    for (double v : params.flat()) w.put(v);
    w.finish();
}

Params read_params(const std::filesystem::path& path) {
    Reader r(path);
    r.expect_magic(kParamsMagic);
    const auto channels = r.get<std::int32_t>();
    const auto hidden = r.get<std::int32_t>();
    const auto count = r.get<std::uint64_t>();
    if (channels <= 0 || hidden <= 0 || count != Params::size_for(channels, hidden)) {
        throw IoError(path.string() + ": checkpoint header does not describe a valid head");
    }
    std::vector<double> values(count);
    r.bytes(reinterpret_cast<char*>(values.data()), count * sizeof(double));
    r.expect_end();
    Params p(channels, hidden, std::move(values));
    if (!p.all_finite()) throw IoError(path.string() + ": non-finite parameters");
    return p;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << text;
    out.flush();
    if (!out) throw IoError("write failed: " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string gen_config_json(const GenConfig& c) {
    json j{{"grid", {{"height", c.grid.height}, {"width", c.grid.width}, {"channels", c.grid.channels},
                     {"cell_size", c.grid.cell_size}}},
           {"objects", {c.min_objects, c.max_objects}},
           {"length", {c.length_min, c.length_max}},
           {"width", {c.width_min, c.width_max}},
           {"height", {c.height_min, c.height_max}},
           {"yaw", {c.yaw_min, c.yaw_max}},
           {"edge_margin", c.edge_margin},
           {"min_separation", c.min_separation},
           {"amplitude", {c.amplitude_min, c.amplitude_max}},
           {"background_sigma", c.background_sigma},
           {"offset_scale", c.offset_scale},
           {"size_gain", c.size_gain},
           {"yaw_gain", c.yaw_gain},
           {"geometry_cutoff", c.geometry_cutoff},
           {"reference", {c.ref_length, c.ref_width, c.ref_height}},
           {"distractors", {c.distractors_min, c.distractors_max}},
           {"distractor_amplitude", c.distractor_amplitude}};
    return j.dump(2);
}

std::string shift_json(const ShiftSpec& s) {
    json j{{"scale_factor", s.scale_factor},
           {"noise_sigma", s.noise_sigma},
           {"dropout_prob", s.dropout_prob},
           {"blur_width", s.blur_width},
           {"intensity_offset", s.intensity_offset}};
    return j.dump(2);
}

std::string run_log_jsonl(const AdaptReport& report) {
    std::string out;
    for (const auto& r : report.records) {
        out += record_json(r).dump();
        out += '\n';
    }
    return out;
}

std::string report_json(const AdaptReport& report, bool pretty) {
    json records = json::array();
    for (const auto& r : report.records) records.push_back(record_json(r));
    json preds = json::array();
    for (const auto& p : report.predictions) {
        preds.push_back({{"scene", p.scene_id}, {"score", p.det.score}, {"box", box_json(p.det.box)}});
    }
    json j{{"batches", report.records.size()},
           {"stop_batch", report.stop_batch ? json(*report.stop_batch) : json(nullptr)},
           {"ap_3d", report.metrics.ap_3d},
           {"ap_bev", report.metrics.ap_bev},
           {"detail_3d", ap_json(report.metrics.detail_3d)},
           {"detail_bev", ap_json(report.metrics.detail_bev)},
           {"records", records},
           {"predictions", preds}};
    return pretty ? j.dump(2) : j.dump();
}

std::string metrics_csv(std::span<const MetricsRow> rows, const std::string& key_column) {
    std::string out = key_column + ",ap_3d,ap_bev,closed_gap_3d,closed_gap_bev,stop_batch\n";
    for (const auto& r : rows) {
        out += r.name + ',' + fixed(r.ap_3d) + ',' + fixed(r.ap_bev) + ',';
        out += (r.closed_gap_3d ? fixed(*r.closed_gap_3d) : "") + ',';
        out += (r.closed_gap_bev ? fixed(*r.closed_gap_bev) : "") + ',';
        out += (r.stop_batch ? std::to_string(*r.stop_batch) : "") + '\n';
    }
    return out;
}

}  // namespace dpo
