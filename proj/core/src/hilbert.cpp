#include "floc/hilbert.hpp"

#include <limits>

namespace floc {

namespace {

// Recursive construction: the lower-order curve is placed transposed in the
// top-left quadrant, unchanged in the bottom-left and bottom-right quadrants,
// and anti-transposed in the top-right quadrant. The quadrant ends are joined
// by unit steps.
std::vector<GridCell> build(std::size_t order) {
    if (order == 1) return {{0, 0}, {1, 0}, {1, 1}, {0, 1}};
    const auto sub = build(order - 1);
    const std::size_t half = std::size_t{1} << (order - 1);
    std::vector<GridCell> out;
    out.reserve(sub.size() * 4);
    for (const auto& c : sub) out.push_back({c.col, c.row});
    for (const auto& c : sub) out.push_back({c.row + half, c.col});
    for (const auto& c : sub) out.push_back({c.row + half, c.col + half});
    for (const auto& c : sub) out.push_back({half - 1 - c.col, half - 1 - c.row + half});
    return out;
}

}  // namespace

HilbertOrdering::HilbertOrdering(std::size_t order) : HilbertOrdering(order, {}) {}

HilbertOrdering::HilbertOrdering(std::size_t order, std::vector<GridCell> forward) : order_(order) {
    if (order == 0) throw ArgumentError("hilbert curve order must be >= 1");
    if (order >= std::numeric_limits<std::size_t>::digits / 2) throw ArgumentError("hilbert curve order too large");
    side_ = std::size_t{1} << order;
    forward_ = forward.empty() ? build(order) : std::move(forward);
    inverse_.assign(side_ * side_, 0);
    for (std::size_t t = 0; t < forward_.size(); ++t) inverse_[forward_[t].row * side_ + forward_[t].col] = t;
}

HilbertOrdering HilbertOrdering::raster(std::size_t order) {
    if (order == 0) throw ArgumentError("raster order must be >= 1");
    const std::size_t side = std::size_t{1} << order;
    std::vector<GridCell> cells;
    cells.reserve(side * side);
    for (std::size_t r = 0; r < side; ++r) {
        for (std::size_t c = 0; c < side; ++c) cells.push_back({r, c});
    }
    return HilbertOrdering(order, std::move(cells));
}

HilbertOrdering hilbert_curve(std::size_t order) { return HilbertOrdering(order); }

}  // namespace floc
