#include "dpo/geom3d.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dpo {

double wrap_angle(double a) {
    double r = std::remainder(a, 2.0 * kPi);  // [-pi, pi]
    if (r <= -kPi) r += 2.0 * kPi;
    return r;
}

Box3D::Box3D(double cx_, double cy_, double cz_, double dx_, double dy_, double dz_, double yaw_)
    : cx(cx_), cy(cy_), cz(cz_), dx(dx_), dy(dy_), dz(dz_), yaw(wrap_angle(yaw_)) {
    if (!(dx > 0.0 && dy > 0.0 && dz > 0.0) || !std::isfinite(dx) || !std::isfinite(dy) ||
        !std::isfinite(dz)) {
        throw std::invalid_argument("Box3D: dimensions must be finite and strictly positive");
    }
    if (!std::isfinite(cx) || !std::isfinite(cy) || !std::isfinite(cz) || !std::isfinite(yaw)) {
        throw std::invalid_argument("Box3D: center and yaw must be finite");
    }
}

Box3D Box3D::from_array(std::span<const double, 7> v) {
    return Box3D(v[0], v[1], v[2], v[3], v[4], v[5], v[6]);
}

ScoredBox::ScoredBox(const Box3D& b, double s) : box(b), score(s) {
    if (!(s >= 0.0 && s <= 1.0)) throw std::invalid_argument("ScoredBox: score must lie in [0, 1]");
}

std::array<Vec2, 4> bev_corners(const Box3D& b) {
    const double c = std::cos(b.yaw), s = std::sin(b.yaw);
    const double hx = 0.5 * b.dx, hy = 0.5 * b.dy;
    const std::array<Vec2, 4> local{{{hx, hy}, {-hx, hy}, {-hx, -hy}, {hx, -hy}}};
    std::array<Vec2, 4> out;
    for (std::size_t i = 0; i < 4; ++i) {
        out[i] = {b.cx + c * local[i].x - s * local[i].y, b.cy + s * local[i].x + c * local[i].y};
    }
    return out;
}

bool footprint_contains(const Box3D& b, double x, double y) {
    const double c = std::cos(b.yaw), s = std::sin(b.yaw);
    const double ux = x - b.cx, uy = y - b.cy;
    const double u = c * ux + s * uy;
    const double v = -s * ux + c * uy;
    return std::abs(u) <= 0.5 * b.dx && std::abs(v) <= 0.5 * b.dy;
}

double polygon_area(std::span<const Vec2> poly) {
    const std::size_t n = poly.size();
    if (n < 3) return 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const Vec2& p = poly[i];
        const Vec2& q = poly[(i + 1) % n];
        acc += p.x * q.y - q.x * p.y;
    }
    return 0.5 * std::abs(acc);
}

namespace {

double cross(const Vec2& o, const Vec2& a, const Vec2& b) {
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

Vec2 segment_line_intersection(const Vec2& p, const Vec2& q, const Vec2& a, const Vec2& b) {
    const double dp = cross(a, b, p);
    const double dq = cross(a, b, q);
    const double t = dp / (dp - dq);
    return {p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)};
}

}  // namespace

std::vector<Vec2> clip_convex(std::span<const Vec2> subject, std::span<const Vec2> clip) {
    std::vector<Vec2> out(subject.begin(), subject.end());
    const std::size_t m = clip.size();
    for (std::size_t e = 0; e < m && !out.empty(); ++e) {
        const Vec2& a = clip[e];
        const Vec2& b = clip[(e + 1) % m];
        std::vector<Vec2> in = std::move(out);
        out.clear();
        const std::size_t n = in.size();
        for (std::size_t i = 0; i < n; ++i) {
            const Vec2& cur = in[i];
            const Vec2& prev = in[(i + n - 1) % n];
            const bool cur_in = cross(a, b, cur) >= 0.0;
            const bool prev_in = cross(a, b, prev) >= 0.0;
            if (cur_in) {
                if (!prev_in) out.push_back(segment_line_intersection(prev, cur, a, b));
                out.push_back(cur);
            } else if (prev_in) {
                out.push_back(segment_line_intersection(prev, cur, a, b));
            }
        }
    }
    return out;
}

double bev_intersection_area(const Box3D& a, const Box3D& b) {
    // Circumscribed-circle rejection keeps far pairs cheap.
    const double ra = 0.5 * std::hypot(a.dx, a.dy);
    const double rb = 0.5 * std::hypot(b.dx, b.dy);
    if (std::hypot(a.cx - b.cx, a.cy - b.cy) >= ra + rb) return 0.0;
    // Identical footprints: exact, so identical boxes score IoU 1 and cost 0.
    if (a.cx == b.cx && a.cy == b.cy && a.dx == b.dx && a.dy == b.dy && a.yaw == b.yaw) return a.dx * a.dy;
    const auto pa = bev_corners(a);
    const auto pb = bev_corners(b);
    const auto poly = clip_convex(pa, pb);
    return polygon_area(poly);
}

double bev_iou(const Box3D& a, const Box3D& b) {
    const double inter = bev_intersection_area(a, b);
    const double uni = a.dx * a.dy + b.dx * b.dy - inter;
    if (uni <= 0.0) return 0.0;
    return std::clamp(inter / uni, 0.0, 1.0);
}

double iou_3d(const Box3D& a, const Box3D& b) {
    const double h = std::min(a.z_max(), b.z_max()) - std::max(a.z_min(), b.z_min());
    if (h <= 0.0) return 0.0;
    const double inter = bev_intersection_area(a, b) * h;
    const double uni = a.volume() + b.volume() - inter;
    if (uni <= 0.0) return 0.0;
    return std::clamp(inter / uni, 0.0, 1.0);
}

double box_l1(const Box3D& a, const Box3D& b) {
    return std::abs(a.cx - b.cx) + std::abs(a.cy - b.cy) + std::abs(a.cz - b.cz) +
           std::abs(a.dx - b.dx) + std::abs(a.dy - b.dy) + std::abs(a.dz - b.dz) +
           std::abs(wrap_angle(a.yaw - b.yaw));
}

std::vector<ScoredBox> nms(std::vector<ScoredBox> boxes, double iou_thresh) {
    std::stable_sort(boxes.begin(), boxes.end(), [](const ScoredBox& l, const ScoredBox& r) {
        if (l.score != r.score) return l.score > r.score;
        if (l.box.cx != r.box.cx) return l.box.cx < r.box.cx;
        return l.box.cy < r.box.cy;
    });
    std::vector<ScoredBox> kept;
    for (const auto& cand : boxes) {
        bool suppressed = false;
        for (const auto& k : kept) {
            if (bev_iou(cand.box, k.box) >= iou_thresh) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(cand);
    }
    return kept;
}

}  // namespace dpo
