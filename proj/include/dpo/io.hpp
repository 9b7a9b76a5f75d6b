#pragma once

#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpo/bev.hpp"
#include "dpo/detector.hpp"
#include "dpo/loop.hpp"
#include "dpo/scene_gen.hpp"

namespace dpo {

/// Missing, unreadable, unwritable or malformed files.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr char kSceneMagic[4] = {'D', 'P', 'O', '1'};
inline constexpr char kParamsMagic[4] = {'D', 'P', 'O', 'W'};
inline constexpr std::uint32_t kFormatVersion = 1;

struct SceneFile {
    GridMeta meta;
    std::vector<Scene> scenes;
};

// Scene container, little-endian:
//   "DPO1" u32 version, i32 H, i32 W, i32 C, f64 cell_size, u64 scene count
//   per scene: u64 seed, u32 box count, boxes (7 x f64 each), grid (H*W*C x f32)
// Loaded scenes keep labels and features but not the render description.
void write_scenes(const std::filesystem::path& path, const GridMeta& meta, std::span<const Scene> scenes);
SceneFile read_scenes(const std::filesystem::path& path);

// Checkpoint: "DPOW" u32 version, i32 channels, i32 hidden, u64 count, f64 payload.
void write_params(const std::filesystem::path& path, const Params& params);
Params read_params(const std::filesystem::path& path);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

std::string gen_config_json(const GenConfig& cfg);
std::string shift_json(const ShiftSpec& spec);

/// One JSON object per line, one line per batch.
std::string run_log_jsonl(const AdaptReport& report);
std::string report_json(const AdaptReport& report, bool pretty);

/// One metrics row; closed gaps and stop batch are optional columns.
struct MetricsRow {
    std::string name;
    double ap_3d = 0.0;
    double ap_bev = 0.0;
    std::optional<double> closed_gap_3d;
    std::optional<double> closed_gap_bev;
    std::optional<int> stop_batch;
};

/// Header plus rows with fixed six-decimal numbers; empty cells for missing values.
std::string metrics_csv(std::span<const MetricsRow> rows, const std::string& key_column = "method");

}  // namespace dpo
