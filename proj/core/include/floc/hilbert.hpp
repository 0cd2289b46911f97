#pragma once

#include <cstddef>
#include <vector>

#include "floc/tensor.hpp"

namespace floc {

struct GridCell {
    std::size_t row = 0;
    std::size_t col = 0;
    bool operator==(const GridCell&) const = default;
};

/// Bijection between timestep index and cell of a 2^order x 2^order grid.
class HilbertOrdering {
public:
    explicit HilbertOrdering(std::size_t order);

    /// Row-major raster ordering on the same grid, for ablations.
    static HilbertOrdering raster(std::size_t order);

    std::size_t order() const noexcept { return order_; }
    std::size_t side() const noexcept { return side_; }
    std::size_t length() const noexcept { return forward_.size(); }

    const std::vector<GridCell>& forward() const noexcept { return forward_; }
    GridCell cell(std::size_t step) const { return forward_.at(step); }
    std::size_t step(GridCell cell) const { return inverse_.at(cell.row * side_ + cell.col); }

private:
    HilbertOrdering(std::size_t order, std::vector<GridCell> forward);

    std::size_t order_;
    std::size_t side_;
    std::vector<GridCell> forward_;
    std::vector<std::size_t> inverse_;
};

/// Order-n Hilbert curve entering at (0,0) and leaving at (0, 2^n - 1).
HilbertOrdering hilbert_curve(std::size_t order);

/// grid is row-major (row * side + col). output[t] = grid[forward[t]].
template <typename T>
std::vector<T> reorder_features(const std::vector<T>& grid, const HilbertOrdering& ordering) {
    if (grid.size() != ordering.length()) {
        throw ShapeError("reorder_features: grid has " + std::to_string(grid.size()) + " cells, ordering expects " +
                         std::to_string(ordering.length()));
    }
    std::vector<T> out;
    out.reserve(grid.size());
    for (const auto& c : ordering.forward()) out.push_back(grid[c.row * ordering.side() + c.col]);
    return out;
}

/// Inverse of reorder_features: puts sequence[t] back at its grid cell.
template <typename T>
std::vector<T> restore_grid(const std::vector<T>& sequence, const HilbertOrdering& ordering) {
    if (sequence.size() != ordering.length()) {
        throw ShapeError("restore_grid: sequence length " + std::to_string(sequence.size()) + " != " +
                         std::to_string(ordering.length()));
    }
    std::vector<T> grid(sequence.size());
    for (std::size_t t = 0; t < sequence.size(); ++t) {
        const auto c = ordering.cell(t);
        grid[c.row * ordering.side() + c.col] = sequence[t];
    }
    return grid;
}

}  // namespace floc
