#pragma once

// Resampling descriptors: per patch, the magnitude of the linear prediction
// error (3x3 Laplacian residual), accumulated along projection angles
// (Radon transform) and summarized by the FFT magnitude of each projection.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "floc/tensor.hpp"

namespace floc {

struct FeatureConfig {
    std::size_t angles = 10;
    std::size_t bins = 32;      // radial bins per projection; must be a power of two
    std::size_t retained = 16;  // leading FFT magnitude bins kept per angle

    static FeatureConfig full() { return {10, 32, 16}; }
    static FeatureConfig desk() { return {10, 16, 8}; }

    std::size_t length() const noexcept { return angles * retained; }
    void validate() const;
    bool operator==(const FeatureConfig&) const = default;
};

/// Non-overlapping grid x grid tiling of a square image, row-major.
struct PatchGrid {
    std::size_t grid = 8;
    std::size_t patch_size = 0;
    std::size_t source_side = 0;
    std::vector<Tensor> patches;

    const Tensor& at(std::size_t row, std::size_t col) const { return patches.at(row * grid + col); }
};

PatchGrid extract_patches(const Tensor& image, std::size_t grid = 8);
Tensor assemble_patches(const PatchGrid& grid);

/// sqrt(|Laplacian(luminance)|) with edge-replicated borders; returns [P, P].
Tensor laplacian_error(const Tensor& patch);

/// Projections of `error_map` at angles a*180/A degrees. Each pixel centre
/// is binned by its signed distance to the line through the map centre,
/// the range [-P*sqrt(2)/2, +P*sqrt(2)/2] split evenly into `bins`.
/// Returns [angles, bins].
Tensor radon(const Tensor& error_map, std::size_t angles, std::size_t bins);

/// Magnitudes of the first `retained` DFT bins (default R/2) of a
/// power-of-two length signal, via radix-2 FFT.
Tensor fft_magnitude(std::span<const double> projection, std::size_t retained = 0);

Tensor patch_features(const Tensor& patch, const FeatureConfig& config);

/// Features of every patch of the image's grid x grid tiling, row-major.
std::vector<Tensor> image_features(const Tensor& image, const FeatureConfig& config, std::size_t grid = 8);

// Feature dump: "FRSF" | u32 version | u32 patch_count |
//   patch_count x ( u8 grid_index | u16 length | length x f64 ), little-endian.
inline constexpr std::uint32_t kFeatureDumpVersion = 1;
void write_feature_dump(std::ostream& out, const std::vector<Tensor>& features);
std::vector<Tensor> read_feature_dump(std::istream& in);
void save_feature_dump(const std::filesystem::path& path, const std::vector<Tensor>& features);

}  // namespace floc
