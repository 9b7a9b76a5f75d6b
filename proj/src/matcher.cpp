#include "dpo/matcher.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dpo {

CostMatrix::CostMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) throw std::invalid_argument("CostMatrix: data size mismatch");
}

double box_cost(const Box3D& a, const Box3D& b, const CostWeights& w) {
    return w.w_iou * (1.0 - bev_iou(a, b)) + w.w_l1 * box_l1(a, b);
}

namespace {

struct Solution {
    std::vector<std::size_t> assignment;
    std::vector<double> u, v;  // row and column potentials
};

// Shortest augmenting path Kuhn-Munkres for rows <= cols (1-based internals).
Solution solve_raw(const CostMatrix& c) {
    const std::size_t n = c.rows(), m = c.cols();
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
    std::vector<double> minv(m + 1);
    std::vector<char> used(m + 1);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::fill(minv.begin(), minv.end(), inf);
        std::fill(used.begin(), used.end(), 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    Solution s;
    s.assignment.assign(n, 0);
    for (std::size_t j = 1; j <= m; ++j) {
        if (p[j] != 0) s.assignment[p[j] - 1] = j - 1;
    }
    s.u.assign(u.begin() + 1, u.end());
    s.v.assign(v.begin() + 1, v.end());
    return s;
}

void check_matrix(const CostMatrix& c) {
    if (c.rows() > c.cols()) throw std::invalid_argument("solve_assignment: more rows than columns");
    for (std::size_t r = 0; r < c.rows(); ++r) {
        for (std::size_t k = 0; k < c.cols(); ++k) {
            if (!std::isfinite(c(r, k))) throw std::invalid_argument("solve_assignment: non-finite cost");
        }
    }
}

}  // namespace

double assignment_cost(const CostMatrix& cost, std::span<const std::size_t> assignment) {
    double total = 0.0;
    for (std::size_t r = 0; r < assignment.size(); ++r) total += cost(r, assignment[r]);
    return total;
}

std::vector<std::size_t> solve_assignment(const CostMatrix& cost) {
    check_matrix(cost);
    const std::size_t n = cost.rows(), m = cost.cols();
    if (n == 0) return {};
    const Solution base = solve_raw(cost);
    std::vector<std::size_t> perm = base.assignment;
    const double opt = assignment_cost(cost, perm);

    // Rounding slack of an n-term sum. A fixed relative tolerance would let a
    // sentinel-sized entry hide real cost differences among the other rows.
    double magnitude = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        double row_max = 0.0;
        for (std::size_t k = 0; k < m; ++k) row_max = std::max(row_max, std::abs(cost(r, k)));
        magnitude += row_max;
    }
    const double tol = 16.0 * static_cast<double>(n) * std::numeric_limits<double>::epsilon() * magnitude;

    // Lexicographic refinement: walk rows in order and move each to the
    // smallest column that still admits an optimal completion. Only edges
    // that are tight under the optimal potentials can take part in an optimum.
    std::vector<char> col_used(m, 0);
    double prefix = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < perm[i]; ++j) {
            if (col_used[j]) continue;
            if (cost(i, j) - base.u[i] - base.v[j] > tol) continue;
            std::vector<std::size_t> rest_cols;
            for (std::size_t k = 0; k < m; ++k) {
                if (!col_used[k] && k != j) rest_cols.push_back(k);
            }
            const std::size_t rest_rows = n - i - 1;
            CostMatrix sub(rest_rows, rest_cols.size());
            for (std::size_t r = 0; r < rest_rows; ++r) {
                for (std::size_t k = 0; k < rest_cols.size(); ++k) sub(r, k) = cost(i + 1 + r, rest_cols[k]);
            }
            const auto sub_perm = rest_rows > 0 ? solve_raw(sub).assignment : std::vector<std::size_t>{};
            const double total = prefix + cost(i, j) + assignment_cost(sub, sub_perm);
            if (total <= opt + tol) {
                perm[i] = j;
                for (std::size_t r = 0; r < rest_rows; ++r) perm[i + 1 + r] = rest_cols[sub_perm[r]];
                break;
            }
        }
        prefix += cost(i, perm[i]);
        col_used[perm[i]] = 1;
    }
    return perm;
}

std::vector<std::size_t> hungarian(const CostMatrix& cost) {
    if (cost.rows() != cost.cols()) throw std::invalid_argument("hungarian: matrix must be square");
    if (cost.rows() == 0) throw std::invalid_argument("hungarian: empty matrix");
    return solve_assignment(cost);
}

MatchResult match_predictions(std::span<const Box3D> pseudo, std::span<const Box3D> perturbed,
                              const CostWeights& w) {
    const std::size_t n = pseudo.size(), m = perturbed.size();
    MatchResult res;
    res.perturbed_count = m;
    res.assignment.assign(n, kEmpty);
    res.per_box_cost.assign(n, kInfiniteCost);
    if (n == 0) return res;

    // Padding entries all carry the same sentinel, so they add a constant to
    // every complete assignment; solving the unpadded rectangular problem
    // yields the same optimum without mixing 1e9 into the arithmetic.
    if (n <= m) {
        CostMatrix c(n, m);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < m; ++j) c(i, j) = box_cost(pseudo[i], perturbed[j], w);
        }
        res.assignment = solve_assignment(c);
        for (std::size_t i = 0; i < n; ++i) res.per_box_cost[i] = c(i, res.assignment[i]);
        return res;
    }
    std::vector<char> matched(n, 0);
    if (m > 0) {
        CostMatrix c(m, n);
        for (std::size_t j = 0; j < m; ++j) {
            for (std::size_t i = 0; i < n; ++i) c(j, i) = box_cost(pseudo[i], perturbed[j], w);
        }
        const auto cols = solve_assignment(c);
        for (std::size_t j = 0; j < m; ++j) {
            res.assignment[cols[j]] = j;
            res.per_box_cost[cols[j]] = c(j, cols[j]);
            matched[cols[j]] = 1;
        }
    }
    std::size_t next_empty = m;
    for (std::size_t i = 0; i < n; ++i) {
        if (!matched[i]) res.assignment[i] = next_empty++;
    }
    return res;
}

void CostHistory::insert(std::span<const double> costs) {
    const auto mid = static_cast<std::ptrdiff_t>(sorted_.size());
    sorted_.insert(sorted_.end(), costs.begin(), costs.end());
    std::sort(sorted_.begin() + mid, sorted_.end());
    std::inplace_merge(sorted_.begin(), sorted_.begin() + mid, sorted_.end());
}

namespace {

std::size_t ceil_index(double q, std::size_t n) {
    // Guard against products such as 0.07 * 100 = 7.000000000000001.
    const double x = q * static_cast<double>(n);
    auto k = static_cast<std::size_t>(std::ceil(x - 1e-9 * std::max(1.0, x)));
    return std::clamp<std::size_t>(k, 1, n);
}

}  // namespace

std::optional<TierThresholds> thresholds_from(const CostHistory& history, double alpha) {
    if (!(alpha > 0.0 && alpha < 0.5)) throw std::invalid_argument("thresholds: alpha must lie in (0, 0.5)");
    const std::size_t n = history.size();
    const auto min_n = static_cast<std::size_t>(std::ceil(1.0 / alpha - 1e-9));
    if (n == 0 || n < min_n) return std::nullopt;
    TierThresholds th;
    th.alpha = alpha;
    th.c1 = history.at1(ceil_index(alpha, n));
    th.c2 = history.at1(ceil_index(1.0 - alpha, n));
    return th;
}

std::optional<TierThresholds> update_thresholds(CostHistory& history, std::span<const double> new_costs,
                                                const ThresholdConfig& cfg) {
    if (cfg.include_infinite) {
        history.insert(new_costs);
    } else {
        std::vector<double> finite;
        for (double c : new_costs) {
            if (std::isfinite(c)) finite.push_back(c);
        }
        history.insert(finite);
    }
    return thresholds_from(history, cfg.alpha);
}

Tier tier_of(double cost, const std::optional<TierThresholds>& th) {
    if (std::isinf(cost)) return Tier::Low;
    if (!th) return Tier::Medium;
    if (cost < th->c1) return Tier::High;
    if (cost > th->c2) return Tier::Low;
    return Tier::Medium;
}

std::vector<TieredBox> tier_boxes(std::span<const Box3D> pseudo, const MatchResult& result,
                                  const std::optional<TierThresholds>& th) {
    if (pseudo.size() != result.per_box_cost.size()) {
        throw std::invalid_argument("tier_boxes: result does not match the pseudo-label list");
    }
    std::vector<TieredBox> out;
    out.reserve(pseudo.size());
    for (std::size_t i = 0; i < pseudo.size(); ++i) out.push_back({pseudo[i], tier_of(result.per_box_cost[i], th)});
    return out;
}

}  // namespace dpo
