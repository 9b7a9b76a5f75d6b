#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace dpo {

/// Shape and metric extent of a BEV grid. Cell (row, col) has its center at
/// x = (col + 0.5) * cell_size, y = (row + 0.5) * cell_size.
struct GridMeta {
    int height = 64;
    int width = 64;
    int channels = 8;
    double cell_size = 1.0;

    std::size_t cells() const { return static_cast<std::size_t>(height) * width; }
    std::size_t size() const { return cells() * channels; }
    double extent_x() const { return width * cell_size; }
    double extent_y() const { return height * cell_size; }
    double cell_center_x(int col) const { return (col + 0.5) * cell_size; }
    double cell_center_y(int row) const { return (row + 0.5) * cell_size; }

    /// Throws std::invalid_argument for non-positive dims or cell size.
    void validate() const;

    bool operator==(const GridMeta&) const = default;
};

/// H x W x C real grid, row-major with channels innermost.
class BevFeature {
public:
    BevFeature() = default;
    explicit BevFeature(const GridMeta& meta);
    BevFeature(const GridMeta& meta, std::vector<double> values);

    const GridMeta& meta() const { return meta_; }
    std::span<double> values() { return values_; }
    std::span<const double> values() const { return values_; }

    std::size_t index(int row, int col, int ch) const {
        return (static_cast<std::size_t>(row) * meta_.width + col) * meta_.channels + ch;
    }
    double& at(int row, int col, int ch) { return values_[index(row, col, ch)]; }
    double at(int row, int col, int ch) const { return values_[index(row, col, ch)]; }

    /// Channel vector of one cell.
    std::span<const double> cell(std::size_t cell_index) const {
        return std::span<const double>(values_).subspan(cell_index * meta_.channels, meta_.channels);
    }

    bool all_finite() const;
    double norm() const;

    bool operator==(const BevFeature&) const = default;

private:
    GridMeta meta_;
    std::vector<double> values_;
};

}  // namespace dpo
