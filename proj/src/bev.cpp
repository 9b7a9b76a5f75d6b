#include "dpo/bev.hpp"

#include <cmath>
#include <stdexcept>

namespace dpo {

void GridMeta::validate() const {
    if (height <= 0 || width <= 0 || channels <= 0) {
        throw std::invalid_argument("GridMeta: height, width and channels must be positive");
    }
    if (!(cell_size > 0.0) || !std::isfinite(cell_size)) {
        throw std::invalid_argument("GridMeta: cell_size must be positive");
    }
}

BevFeature::BevFeature(const GridMeta& meta) : meta_(meta), values_(meta.size(), 0.0) {
    meta_.validate();
}

BevFeature::BevFeature(const GridMeta& meta, std::vector<double> values)
    : meta_(meta), values_(std::move(values)) {
    meta_.validate();
    if (values_.size() != meta_.size()) {
        throw std::invalid_argument("BevFeature: value count does not match grid shape");
    }
}

bool BevFeature::all_finite() const {
    for (double v : values_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

double BevFeature::norm() const {
    double acc = 0.0;
    for (double v : values_) acc += v * v;
    return std::sqrt(acc);
}

}  // namespace dpo
