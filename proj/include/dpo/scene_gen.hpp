#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "dpo/bev.hpp"
#include "dpo/geom3d.hpp"

namespace dpo {

// Channel layout of rendered scenes. Channels at and beyond
// kFirstAppearanceChannel carry per-object random amplitudes; the others
// encode object geometry relative to the cell, weighted by the footprint.
inline constexpr int kChannelAppearance = 0;
inline constexpr int kChannelOffsetX = 1;
inline constexpr int kChannelOffsetY = 2;
inline constexpr int kChannelLogLength = 3;
inline constexpr int kChannelLogWidth = 4;
inline constexpr int kChannelYaw = 5;
inline constexpr int kChannelLogHeight = 6;
inline constexpr int kFirstAppearanceChannel = 7;
inline constexpr int kMinChannels = 8;

struct GenConfig {
    GridMeta grid;
    int min_objects = 1;
    int max_objects = 10;
    double length_min = 3.6, length_max = 4.4;
    double width_min = 1.6, width_max = 2.0;
    double height_min = 1.45, height_max = 1.70;  // boxes sit on z = 0
    double yaw_min = -kPi / 2, yaw_max = kPi / 2;
    double edge_margin = 3.0;      // min distance from a center to the grid border
    double min_separation = 6.5;   // min center-to-center distance
    double amplitude_min = 0.7, amplitude_max = 1.3;
    double background_sigma = 0.02;
    // Geometry encodings: offset channel = (center - cell) / offset_scale,
    // size channels = (log dim - log reference) * size_gain, yaw channel =
    // yaw_gain * yaw / (pi / 2). Written flat wherever the footprint weight
    // reaches geometry_cutoff.
    double offset_scale = 0.25;
    double ref_length = 4.0, ref_width = 1.8, ref_height = 1.56;
    double size_gain = 4.0;
    double yaw_gain = 4.0;
    double geometry_cutoff = 0.2;  // footprint weight below which no geometry is written
    // Distractor blobs: appearance only, no geometry, no label.
    int distractors_min = 0, distractors_max = 0;
    double distractor_amplitude = 0.6;

    /// Throws std::invalid_argument for inconsistent ranges or an empty
    /// placement region.
    void validate() const;
};

/// Parameterized target-domain shift. Applied in the fixed order
/// scale, noise, dropout, blur, intensity.
struct ShiftSpec {
    double scale_factor = 1.0;
    double noise_sigma = 0.0;
    double dropout_prob = 0.0;
    int blur_width = 0;
    double intensity_offset = 0.0;

    static ShiftSpec identity() { return {}; }
    bool is_identity() const;
    void validate() const;

    bool operator==(const ShiftSpec&) const = default;
};

/// Re-renderable description of one object (labelled or distractor).
struct SceneObject {
    Box3D box;
    std::vector<double> signature;  // per-channel amplitude

    bool operator==(const SceneObject&) const = default;
};

struct Scene {
    std::vector<Box3D> gt_boxes;
    BevFeature bev;
    std::optional<ShiftSpec> shift_applied;
    std::uint64_t seed = 0;
    // Render descriptions; empty when the scene was loaded from disk.
    std::vector<SceneObject> objects;
    std::vector<SceneObject> distractors;

    bool renderable() const { return objects.size() == gt_boxes.size() && !objects.empty(); }

    bool operator==(const Scene&) const = default;
};

using Batch = std::vector<Scene>;

/// SplitMix64-based seed derivation for independent substreams.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index);

/// Footprint weight of a box at a point: exp(-r^4 / 2) with r the normalized
/// elliptical radius (r = 1 on the inscribed ellipse of the footprint).
double footprint_weight(const Box3D& b, double x, double y);

Scene generate_scene(std::uint64_t seed, const GenConfig& cfg);

/// Renders objects and distractors into a fresh grid plus the seeded
/// background texture. Values are rounded to float32 precision.
BevFeature render_scene(const std::vector<SceneObject>& objects,
                        const std::vector<SceneObject>& distractors, std::uint64_t seed,
                        const GenConfig& cfg);

/// Throws std::logic_error on a scene that already carries a shift or
/// cannot be re-rendered.
Scene apply_shift(const Scene& scene, const ShiftSpec& spec, std::uint64_t seed,
                  const GenConfig& cfg);

std::vector<Batch> make_stream(int n_batches, int batch_size, const GenConfig& cfg,
                               const ShiftSpec& spec, std::uint64_t seed);

/// Unshifted labelled scenes, e.g. for source pretraining.
std::vector<Scene> make_dataset(int n_scenes, const GenConfig& cfg, std::uint64_t seed);

/// Shifted labelled scenes (used for the supervised target-domain reference).
std::vector<Scene> make_shifted_dataset(int n_scenes, const GenConfig& cfg, const ShiftSpec& spec,
                                        std::uint64_t seed);

}  // namespace dpo
