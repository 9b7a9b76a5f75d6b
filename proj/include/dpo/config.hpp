#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpo/detector.hpp"
#include "dpo/loop.hpp"
#include "dpo/scene_gen.hpp"

namespace dpo {

/// Bad key, bad value, missing key or unknown preset.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RunConfig {
    std::string preset = "default";
    std::uint64_t seed = 0;
    std::vector<std::uint64_t> seeds{0, 1, 2};  // ablation seeds
    int batches = 40;                             // stream length
    int batch_size = 8;
    int source_scenes = 200;                      // pretraining set size
    int eval_scenes = 80;                         // held-out source scenes for the pretrain report
    int oracle_scenes = 200;                      // shifted labelled scenes for the oracle

    GenConfig gen;
    ShiftSpec shift;
    TrainConfig train;
    AdaptConfig adapt;

    void validate() const;
};

/// Reference adaptation hyperparameters plus the desk-scale generator and pretraining settings.
RunConfig default_config();

/// Directory searched for NAME.ini: $DPO_PRESET_DIR if set, else the
/// presets/ directory of the source tree.
std::filesystem::path preset_dir();

/// Applies INI text on top of `base`. Unknown sections or keys, unparsable
/// values and out-of-range settings raise ConfigError. `[run] preset` is
/// accepted but not resolved here.
RunConfig apply_ini(RunConfig base, const std::string& ini_text, const std::string& origin);

/// Defaults, then presets/NAME.ini.
RunConfig load_preset(const std::string& name);

/// A config file must name its preset in `[run] preset`; the preset is loaded
/// first and the file's own keys override it.
RunConfig load_config_file(const std::filesystem::path& path);

/// INI rendering of every key, readable back by apply_ini.
std::string to_ini(const RunConfig& cfg);

}  // namespace dpo
