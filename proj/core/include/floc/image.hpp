#pragma once

#include <cstddef>
#include <filesystem>

#include "floc/tensor.hpp"

namespace floc {

/// Images are [H, W, C] tensors with values in [0, 1]. Masks are [H, W]
/// tensors holding exactly 0 or 1.

/// 0.299 R + 0.587 G + 0.114 B; returns [H, W].
Tensor luminance(const Tensor& rgb);

Tensor crop(const Tensor& image, std::size_t top, std::size_t left, std::size_t height, std::size_t width);

/// Bilinear resampling with pixel-centre alignment; works for [H, W] and [H, W, C].
Tensor resize_bilinear(const Tensor& image, std::size_t height, std::size_t width);
Tensor resize_nearest(const Tensor& image, std::size_t height, std::size_t width);
/// Nearest-neighbour resize followed by thresholding at 0.5.
Tensor resize_mask(const Tensor& mask, std::size_t height, std::size_t width);

bool is_binary_mask(const Tensor& mask) noexcept;

/// 8-bit PNG I/O. Grayscale loads as [H, W, 1], RGB as [H, W, 3], RGBA as [H, W, 4].
Tensor read_png(const std::filesystem::path& path);
/// Accepts [H, W] (gray), [H, W, 1], [H, W, 3] or [H, W, 4]; values are clamped and rounded.
void write_png(const std::filesystem::path& path, const Tensor& image);

/// Drops the channel axis of an [H, W, 1] tensor, thresholds at 0.5.
Tensor to_mask(const Tensor& gray);
/// Forces three channels (gray replicated, alpha dropped).
Tensor to_rgb(const Tensor& image);

}  // namespace floc
