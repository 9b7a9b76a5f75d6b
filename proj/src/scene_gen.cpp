#include "dpo/scene_gen.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace dpo {

namespace {

constexpr std::uint64_t kStreamObjects = 1;
constexpr std::uint64_t kStreamBackground = 2;
constexpr std::uint64_t kStreamStreamScene = 3;
constexpr std::uint64_t kStreamShift = 4;
constexpr std::uint64_t kStreamDataset = 5;

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
    if (hi <= lo) return lo;
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

double quantize(double v) { return static_cast<double>(static_cast<float>(v)); }

void splat(BevFeature& bev, const SceneObject& obj, const GenConfig& cfg, bool with_geometry) {
    const GridMeta& g = bev.meta();
    const Box3D& b = obj.box;
    const double reach = 1.3 * std::hypot(b.dx, b.dy) * 0.5 + g.cell_size;
    const int col_lo = std::max(0, static_cast<int>(std::floor((b.cx - reach) / g.cell_size)));
    const int col_hi = std::min(g.width - 1, static_cast<int>(std::ceil((b.cx + reach) / g.cell_size)));
    const int row_lo = std::max(0, static_cast<int>(std::floor((b.cy - reach) / g.cell_size)));
    const int row_hi = std::min(g.height - 1, static_cast<int>(std::ceil((b.cy + reach) / g.cell_size)));
    const double log_len = (std::log(b.dx) - std::log(cfg.ref_length)) * cfg.size_gain;
    const double log_wid = (std::log(b.dy) - std::log(cfg.ref_width)) * cfg.size_gain;
    const double log_hgt = (std::log(b.dz) - std::log(cfg.ref_height)) * cfg.size_gain;
    const double yaw_code = cfg.yaw_gain * b.yaw / (kPi / 2);
    for (int r = row_lo; r <= row_hi; ++r) {
        const double y = g.cell_center_y(r);
        for (int c = col_lo; c <= col_hi; ++c) {
            const double x = g.cell_center_x(c);
            const double m = footprint_weight(b, x, y);
            if (m < 1e-6) continue;
            bev.at(r, c, kChannelAppearance) += m * obj.signature[kChannelAppearance];
            for (int ch = kFirstAppearanceChannel; ch < g.channels; ++ch) {
                bev.at(r, c, ch) += m * obj.signature[ch];
            }
            if (!with_geometry || m < cfg.geometry_cutoff) continue;
            // Geometry is flat over the footprint: every covered cell carries
            // the same codes, only the offsets depend on the cell position.
            bev.at(r, c, kChannelOffsetX) += (b.cx - x) / cfg.offset_scale;
            bev.at(r, c, kChannelOffsetY) += (b.cy - y) / cfg.offset_scale;
            bev.at(r, c, kChannelLogLength) += log_len;
            bev.at(r, c, kChannelLogWidth) += log_wid;
            bev.at(r, c, kChannelYaw) += yaw_code;
            bev.at(r, c, kChannelLogHeight) += log_hgt;
        }
    }
}

std::vector<double> random_signature(std::mt19937_64& rng, const GenConfig& cfg, double scale) {
    std::vector<double> sig(cfg.grid.channels, 1.0);
    sig[kChannelAppearance] = scale * uniform(rng, cfg.amplitude_min, cfg.amplitude_max);
    for (int ch = kFirstAppearanceChannel; ch < cfg.grid.channels; ++ch) {
        sig[ch] = scale * uniform(rng, cfg.amplitude_min, cfg.amplitude_max);
    }
    return sig;
}

void box_blur(BevFeature& bev, int half_width) {
    if (half_width <= 0) return;
    const GridMeta g = bev.meta();
    const BevFeature src = bev;
    for (int r = 0; r < g.height; ++r) {
        for (int c = 0; c < g.width; ++c) {
            const int r0 = std::max(0, r - half_width), r1 = std::min(g.height - 1, r + half_width);
            const int c0 = std::max(0, c - half_width), c1 = std::min(g.width - 1, c + half_width);
            const double count = static_cast<double>((r1 - r0 + 1) * (c1 - c0 + 1));
            for (int ch = 0; ch < g.channels; ++ch) {
                double acc = 0.0;
                for (int rr = r0; rr <= r1; ++rr) {
                    for (int cc = c0; cc <= c1; ++cc) acc += src.at(rr, cc, ch);
                }
                bev.at(r, c, ch) = acc / count;
            }
        }
    }
}

}  // namespace

void GenConfig::validate() const {
    grid.validate();
    if (grid.channels < kMinChannels) {
        throw std::invalid_argument("GenConfig: at least 8 channels are required");
    }
    if (min_objects < 1 || max_objects < min_objects) {
        throw std::invalid_argument("GenConfig: need 1 <= min_objects <= max_objects");
    }
    if (!(length_min > 0 && length_max >= length_min && width_min > 0 && width_max >= width_min &&
          height_min > 0 && height_max >= height_min)) {
        throw std::invalid_argument("GenConfig: invalid object size range");
    }
    if (yaw_max < yaw_min) throw std::invalid_argument("GenConfig: invalid yaw range");
    if (amplitude_min <= 0 || amplitude_max < amplitude_min) {
        throw std::invalid_argument("GenConfig: invalid amplitude range");
    }
    if (background_sigma < 0 || offset_scale <= 0 || size_gain <= 0 || yaw_gain <= 0 || ref_length <= 0 ||
        ref_width <= 0 || ref_height <= 0 || min_separation < 0 || edge_margin < 0) {
        throw std::invalid_argument("GenConfig: invalid rendering constants");
    }
    if (distractors_min < 0 || distractors_max < distractors_min) {
        throw std::invalid_argument("GenConfig: invalid distractor range");
    }
    if (grid.extent_x() - 2 * edge_margin <= 0 || grid.extent_y() - 2 * edge_margin <= 0) {
        throw std::invalid_argument("GenConfig: empty placement region (edge_margin too large)");
    }
}

bool ShiftSpec::is_identity() const { return *this == ShiftSpec{}; }

void ShiftSpec::validate() const {
    if (!(scale_factor > 0.0) || !std::isfinite(scale_factor)) {
        throw std::invalid_argument("ShiftSpec: scale_factor must be > 0");
    }
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) {
        throw std::invalid_argument("ShiftSpec: noise_sigma must be >= 0");
    }
    if (!(dropout_prob >= 0.0 && dropout_prob < 1.0)) {
        throw std::invalid_argument("ShiftSpec: dropout_prob must lie in [0, 1)");
    }
    if (blur_width < 0) throw std::invalid_argument("ShiftSpec: blur_width must be >= 0");
    if (!std::isfinite(intensity_offset)) {
        throw std::invalid_argument("ShiftSpec: intensity_offset must be finite");
    }
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index) {
    return splitmix64(splitmix64(splitmix64(base) ^ (stream * 0x632be59bd9b4e019ULL)) + index);
}

double footprint_weight(const Box3D& b, double x, double y) {
    const double c = std::cos(b.yaw), s = std::sin(b.yaw);
    const double ux = x - b.cx, uy = y - b.cy;
    const double u = (c * ux + s * uy) / (0.5 * b.dx);
    const double v = (-s * ux + c * uy) / (0.5 * b.dy);
    const double r2 = u * u + v * v;
    return std::exp(-0.5 * r2 * r2);
}

BevFeature render_scene(const std::vector<SceneObject>& objects,
                        const std::vector<SceneObject>& distractors, std::uint64_t seed,
                        const GenConfig& cfg) {
    BevFeature bev(cfg.grid);
    for (const auto& d : distractors) splat(bev, d, cfg, false);
    for (const auto& o : objects) splat(bev, o, cfg, true);
    if (cfg.background_sigma > 0.0) {
        std::mt19937_64 rng(derive_seed(seed, kStreamBackground, 0));
        std::normal_distribution<double> noise(0.0, cfg.background_sigma);
        for (double& v : bev.values()) v += noise(rng);
    }
    for (double& v : bev.values()) v = quantize(v);
    return bev;
}

Scene generate_scene(std::uint64_t seed, const GenConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(derive_seed(seed, kStreamObjects, 0));
    const int target = std::uniform_int_distribution<int>(cfg.min_objects, cfg.max_objects)(rng);
    const int n_distract =
        std::uniform_int_distribution<int>(cfg.distractors_min, cfg.distractors_max)(rng);

    const double x_lo = cfg.edge_margin, x_hi = cfg.grid.extent_x() - cfg.edge_margin;
    const double y_lo = cfg.edge_margin, y_hi = cfg.grid.extent_y() - cfg.edge_margin;

    Scene scene;
    scene.seed = seed;
    std::vector<Vec2> centers;
    auto place = [&](Vec2& out) {
        for (int attempt = 0; attempt < 200; ++attempt) {
            const Vec2 p{uniform(rng, x_lo, x_hi), uniform(rng, y_lo, y_hi)};
            const bool clear = std::all_of(centers.begin(), centers.end(), [&](const Vec2& q) {
                return std::hypot(p.x - q.x, p.y - q.y) >= cfg.min_separation;
            });
            if (clear) {
                out = p;
                return true;
            }
        }
        return false;
    };

    for (int i = 0; i < target; ++i) {
        Vec2 p;
        if (!place(p)) break;
        const double len = uniform(rng, cfg.length_min, cfg.length_max);
        const double wid = uniform(rng, cfg.width_min, cfg.width_max);
        const double hgt = uniform(rng, cfg.height_min, cfg.height_max);
        const double yaw = uniform(rng, cfg.yaw_min, cfg.yaw_max);
        const Box3D box(p.x, p.y, 0.5 * hgt, len, wid, hgt, yaw);
        centers.push_back(p);
        scene.objects.push_back({box, random_signature(rng, cfg, 1.0)});
        scene.gt_boxes.push_back(box);
    }
    if (scene.gt_boxes.size() < static_cast<std::size_t>(cfg.min_objects)) {
        throw std::invalid_argument("generate_scene: placement region too small for min_objects");
    }
    for (int i = 0; i < n_distract; ++i) {
        Vec2 p;
        if (!place(p)) break;
        const double len = uniform(rng, 1.5, 3.0);
        const double wid = uniform(rng, 1.5, 3.0);
        const Box3D blob(p.x, p.y, 0.5 * cfg.height_min, len, wid, cfg.height_min, uniform(rng, -kPi, kPi));
        centers.push_back(p);
        scene.distractors.push_back({blob, random_signature(rng, cfg, cfg.distractor_amplitude)});
    }
    scene.bev = render_scene(scene.objects, scene.distractors, seed, cfg);
    return scene;
}

Scene apply_shift(const Scene& scene, const ShiftSpec& spec, std::uint64_t seed,
                  const GenConfig& cfg) {
    spec.validate();
    if (scene.shift_applied) throw std::logic_error("apply_shift: scene is already shifted");
    if (!scene.renderable()) throw std::logic_error("apply_shift: scene has no render description");

    Scene out;
    out.seed = scene.seed;
    out.shift_applied = spec;
    out.objects = scene.objects;
    out.distractors = scene.distractors;
    // Objects grow about their ground contact: the bottom face stays put.
    auto scaled = [&](const Box3D& b) {
        const double dz = b.dz * spec.scale_factor;
        return Box3D(b.cx, b.cy, b.z_min() + 0.5 * dz, b.dx * spec.scale_factor, b.dy * spec.scale_factor, dz, b.yaw);
    };
    for (auto& o : out.objects) {
        o.box = scaled(o.box);
        out.gt_boxes.push_back(o.box);
    }
    for (auto& d : out.distractors) d.box = scaled(d.box);
    out.bev = render_scene(out.objects, out.distractors, scene.seed, cfg);

    std::mt19937_64 rng(derive_seed(seed, kStreamShift, 0));
    auto values = out.bev.values();
    if (spec.noise_sigma > 0.0) {
        std::normal_distribution<double> noise(0.0, spec.noise_sigma);
        for (double& v : values) v += noise(rng);
    }
    if (spec.dropout_prob > 0.0) {
        std::bernoulli_distribution drop(spec.dropout_prob);
        // A dropped cell loses every channel, like a missing beam return.
        const std::size_t channels = static_cast<std::size_t>(out.bev.meta().channels);
        for (std::size_t i = 0; i < values.size(); i += channels) {
            if (drop(rng)) std::fill_n(values.begin() + static_cast<std::ptrdiff_t>(i), channels, 0.0);
        }
    }
    box_blur(out.bev, spec.blur_width);
    if (spec.intensity_offset != 0.0) {
        for (double& v : values) v += spec.intensity_offset;
    }
    for (double& v : values) v = quantize(v);
    return out;
}

std::vector<Batch> make_stream(int n_batches, int batch_size, const GenConfig& cfg,
                               const ShiftSpec& spec, std::uint64_t seed) {
    if (n_batches < 1 || batch_size < 1) {
        throw std::invalid_argument("make_stream: n_batches and batch_size must be >= 1");
    }
    std::vector<Batch> stream(n_batches);
    for (int t = 0; t < n_batches; ++t) {
        stream[t].reserve(batch_size);
        for (int k = 0; k < batch_size; ++k) {
            const std::uint64_t idx = static_cast<std::uint64_t>(t) * batch_size + k;
            const std::uint64_t scene_seed = derive_seed(seed, kStreamStreamScene, idx);
            const Scene clean = generate_scene(scene_seed, cfg);
            stream[t].push_back(apply_shift(clean, spec, derive_seed(scene_seed, kStreamShift, 1), cfg));
        }
    }
    return stream;
}

std::vector<Scene> make_dataset(int n_scenes, const GenConfig& cfg, std::uint64_t seed) {
    if (n_scenes < 1) throw std::invalid_argument("make_dataset: n_scenes must be >= 1");
    std::vector<Scene> out;
    out.reserve(n_scenes);
    for (int i = 0; i < n_scenes; ++i) {
        out.push_back(generate_scene(derive_seed(seed, kStreamDataset, i), cfg));
    }
    return out;
}

std::vector<Scene> make_shifted_dataset(int n_scenes, const GenConfig& cfg, const ShiftSpec& spec,
                                        std::uint64_t seed) {
    std::vector<Scene> out = make_dataset(n_scenes, cfg, seed);
    for (auto& s : out) s = apply_shift(s, spec, derive_seed(s.seed, kStreamShift, 1), cfg);
    return out;
}

}  // namespace dpo
