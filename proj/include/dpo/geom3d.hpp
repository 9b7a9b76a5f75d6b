#pragma once

#include <array>
#include <span>
#include <vector>

namespace dpo {

inline constexpr double kPi = 3.14159265358979323846;

/// Maps an angle into (-pi, pi].
double wrap_angle(double a);

/// Oriented 3D box in the grid frame. Lengths are full extents in meters;
/// yaw rotates the (dx, dy) footprint counter-clockwise about +z.
struct Box3D {
    double cx = 0.0, cy = 0.0, cz = 0.0;
    double dx = 1.0, dy = 1.0, dz = 1.0;
    double yaw = 0.0;

    Box3D() = default;
    /// Throws std::invalid_argument on non-positive or non-finite dims.
    Box3D(double cx, double cy, double cz, double dx, double dy, double dz, double yaw);

    double volume() const { return dx * dy * dz; }
    double z_min() const { return cz - 0.5 * dz; }
    double z_max() const { return cz + 0.5 * dz; }

    std::array<double, 7> as_array() const { return {cx, cy, cz, dx, dy, dz, yaw}; }
    static Box3D from_array(std::span<const double, 7> v);

    bool operator==(const Box3D&) const = default;
};

struct ScoredBox {
    Box3D box;
    double score = 0.0;

    ScoredBox() = default;
    /// Throws std::invalid_argument when score is outside [0, 1].
    ScoredBox(const Box3D& b, double s);

    bool operator==(const ScoredBox&) const = default;
};

struct Vec2 {
    double x = 0.0, y = 0.0;
};

/// Footprint corners in counter-clockwise order.
std::array<Vec2, 4> bev_corners(const Box3D& b);

/// True when (x, y) lies inside the closed footprint of b.
bool footprint_contains(const Box3D& b, double x, double y);

/// Area of a simple polygon via the shoelace formula (absolute value).
double polygon_area(std::span<const Vec2> poly);

/// Sutherland-Hodgman clip of `subject` against the convex CCW polygon `clip`.
std::vector<Vec2> clip_convex(std::span<const Vec2> subject, std::span<const Vec2> clip);

double bev_intersection_area(const Box3D& a, const Box3D& b);

double bev_iou(const Box3D& a, const Box3D& b);
double iou_3d(const Box3D& a, const Box3D& b);

/// Sum of absolute differences over center, dims and wrapped yaw.
double box_l1(const Box3D& a, const Box3D& b);

/// Greedy BEV non-maximum suppression. Output is in descending score order;
/// equal scores are ordered by ascending (cx, cy).
std::vector<ScoredBox> nms(std::vector<ScoredBox> boxes, double iou_thresh);

}  // namespace dpo
