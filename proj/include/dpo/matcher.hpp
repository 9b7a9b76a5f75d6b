#pragma once

#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "dpo/detector.hpp"
#include "dpo/geom3d.hpp"

namespace dpo {

/// Finite stand-in for an infinite cost inside the solver and in averages.
inline constexpr double kSentinelCost = 1e9;
inline constexpr double kInfiniteCost = std::numeric_limits<double>::infinity();
inline constexpr std::size_t kEmpty = std::numeric_limits<std::size_t>::max();

struct CostWeights {
    double w_iou = 1.0;
    double w_l1 = 1.0;
};

/// w_iou * (1 - bev_iou) + w_l1 * box_l1.
double box_cost(const Box3D& a, const Box3D& b, const CostWeights& w = {});

/// Row-major n x m cost matrix.
class CostMatrix {
public:
    CostMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    CostMatrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

private:
    std::size_t rows_, cols_;
    std::vector<double> data_;
};

/// Minimum-cost assignment of every row to a distinct column (rows <= cols),
/// O(n^2 m) Kuhn-Munkres with potentials. Among optimal assignments the
/// lexicographically smallest row->column vector is returned.
std::vector<std::size_t> solve_assignment(const CostMatrix& cost);

/// Square Kuhn-Munkres; returns the column assigned to each row.
std::vector<std::size_t> hungarian(const CostMatrix& cost);

double assignment_cost(const CostMatrix& cost, std::span<const std::size_t> assignment);

struct MatchResult {
    // For each pseudo-label, an index into the perturbed list padded with
    // EMPTY slots (indices >= perturbed.size() denote EMPTY).
    std::vector<std::size_t> assignment;
    std::vector<double> per_box_cost;  // kInfiniteCost where matched to EMPTY
    std::size_t perturbed_count = 0;

    bool matched_to_empty(std::size_t i) const { return assignment[i] >= perturbed_count; }
};

/// Pads the smaller list with EMPTY, solves the assignment, and reports the
/// cost of each pseudo-label against its partner.
MatchResult match_predictions(std::span<const Box3D> pseudo, std::span<const Box3D> perturbed,
                              const CostWeights& w = {});

/// Sorted multiset of all recorded costs; infinite costs sort last.
class CostHistory {
public:
    void insert(std::span<const double> costs);
    std::size_t size() const { return sorted_.size(); }
    bool empty() const { return sorted_.empty(); }
    const std::vector<double>& sorted() const { return sorted_; }
    /// 1-based access, as used by the quantile rule.
    double at1(std::size_t k) const { return sorted_.at(k - 1); }

private:
    std::vector<double> sorted_;
};

struct TierThresholds {
    double c1 = 0.0;
    double c2 = 0.0;
    double alpha = 0.08;
};

struct ThresholdConfig {
    double alpha = 0.08;
    bool include_infinite = true;  // record EMPTY matches in the history
};

/// c1 = A[ceil(alpha n)], c2 = A[ceil((1 - alpha) n)] (1-based). nullopt while
/// the history holds fewer than ceil(1 / alpha) costs.
std::optional<TierThresholds> thresholds_from(const CostHistory& history, double alpha);

/// Inserts `new_costs` then recomputes the thresholds.
std::optional<TierThresholds> update_thresholds(CostHistory& history, std::span<const double> new_costs,
                                                const ThresholdConfig& cfg);

/// High if cost < c1, Low if cost > c2, Medium otherwise; infinite costs are
/// always Low. Without thresholds every box is Medium.
Tier tier_of(double cost, const std::optional<TierThresholds>& th);

std::vector<TieredBox> tier_boxes(std::span<const Box3D> pseudo, const MatchResult& result,
                                  const std::optional<TierThresholds>& th);

}  // namespace dpo
