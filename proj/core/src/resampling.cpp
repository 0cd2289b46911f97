#include "floc/resampling.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <numbers>

#include "floc/checkpoint.hpp"
#include "floc/image.hpp"

namespace floc {

namespace {

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

void fft_in_place(std::vector<std::complex<double>>& a) {
    const std::size_t n = a.size();
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
        for (std::size_t start = 0; start < n; start += len) {
            for (std::size_t k = 0; k < len / 2; ++k) {
                // Twiddles evaluated directly rather than by recurrence to keep
                // the error at O(eps log n).
                const std::complex<double> w = std::polar(1.0, ang * static_cast<double>(k));
                const auto u = a[start + k];
                const auto v = a[start + k + len / 2] * w;
                a[start + k] = u + v;
                a[start + k + len / 2] = u - v;
            }
        }
    }
}

}  // namespace

void FeatureConfig::validate() const {
    if (angles == 0) throw ArgumentError("feature config: angles must be >= 1");
    if (bins < 2 || !is_power_of_two(bins)) throw ArgumentError("feature config: bins must be a power of two >= 2");
    if (retained == 0 || retained > bins) throw ArgumentError("feature config: retained bins must be in [1, bins]");
}

PatchGrid extract_patches(const Tensor& image, std::size_t grid) {
    require_rank(image, 3, "extract_patches");
    const std::size_t side = image.dim(0);
    if (image.dim(1) != side) throw ShapeError("extract_patches: image must be square, got " + shape_to_string(image.shape()));
    if (grid == 0 || side % grid != 0) {
        throw ShapeError("extract_patches: side " + std::to_string(side) + " not divisible by " + std::to_string(grid));
    }
    PatchGrid g;
    g.grid = grid;
    g.source_side = side;
    g.patch_size = side / grid;
    g.patches.reserve(grid * grid);
    for (std::size_t r = 0; r < grid; ++r) {
        for (std::size_t c = 0; c < grid; ++c) {
            g.patches.push_back(crop(image, r * g.patch_size, c * g.patch_size, g.patch_size, g.patch_size));
        }
    }
    return g;
}

Tensor assemble_patches(const PatchGrid& grid) {
    if (grid.patches.size() != grid.grid * grid.grid) throw ShapeError("assemble_patches: wrong patch count");
    const std::size_t p = grid.patch_size, side = grid.source_side;
    const std::size_t c = grid.patches.front().dim(2);
    Tensor out({side, side, c});
    for (std::size_t r = 0; r < grid.grid; ++r) {
        for (std::size_t col = 0; col < grid.grid; ++col) {
            const Tensor& patch = grid.at(r, col);
            require_shape(patch, {p, p, c}, "assemble_patches patch");
            for (std::size_t y = 0; y < p; ++y) {
                std::copy_n(patch.data() + y * p * c, p * c, out.data() + ((r * p + y) * side + col * p) * c);
            }
        }
    }
    return out;
}

Tensor laplacian_error(const Tensor& patch) {
    const Tensor lum = luminance(patch);
    const std::size_t h = lum.dim(0), w = lum.dim(1);
    Tensor out({h, w});
    // Edge replication: a zero border would make the rim respond to the
    // absolute intensity level, breaking shift invariance.
    auto at = [&](std::ptrdiff_t y, std::ptrdiff_t x) {
        y = std::clamp<std::ptrdiff_t>(y, 0, static_cast<std::ptrdiff_t>(h) - 1);
        x = std::clamp<std::ptrdiff_t>(x, 0, static_cast<std::ptrdiff_t>(w) - 1);
        return lum.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
    };
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const auto iy = static_cast<std::ptrdiff_t>(y), ix = static_cast<std::ptrdiff_t>(x);
            // Differences first, so flat regions give exactly zero.
            const double c = at(iy, ix);
            const double response = (at(iy - 1, ix) - c) + (at(iy + 1, ix) - c) + (at(iy, ix - 1) - c) + (at(iy, ix + 1) - c);
            out.at(y, x) = std::sqrt(std::abs(response));
        }
    }
    return out;
}

Tensor radon(const Tensor& error_map, std::size_t angles, std::size_t bins) {
    require_rank(error_map, 2, "radon");
    if (angles == 0) throw ArgumentError("radon: angles must be >= 1");
    if (bins < 2) throw ArgumentError("radon: bins must be >= 2");
    const std::size_t h = error_map.dim(0), w = error_map.dim(1);
    const double half = static_cast<double>(std::max(h, w)) * std::numbers::sqrt2 / 2.0;
    const double cy = (static_cast<double>(h) - 1.0) / 2.0, cx = (static_cast<double>(w) - 1.0) / 2.0;
    const double scale = static_cast<double>(bins) / (2.0 * half);
    Tensor out({angles, bins});
    for (std::size_t a = 0; a < angles; ++a) {
        const double theta = static_cast<double>(a) * std::numbers::pi / static_cast<double>(angles);
        const double ct = std::cos(theta), st = std::sin(theta);
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                const double d = (static_cast<double>(x) - cx) * ct + (static_cast<double>(y) - cy) * st;
                const auto bin = static_cast<std::ptrdiff_t>(std::floor((d + half) * scale));
                const auto b = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(bin, 0, static_cast<std::ptrdiff_t>(bins) - 1));
                out.at(a, b) += error_map.at(y, x);
            }
        }
    }
    return out;
}

Tensor fft_magnitude(std::span<const double> projection, std::size_t retained) {
    const std::size_t n = projection.size();
    if (!is_power_of_two(n)) throw ArgumentError("fft_magnitude: length " + std::to_string(n) + " is not a power of two");
    if (retained == 0) retained = std::max<std::size_t>(1, n / 2);
    if (retained > n) throw ArgumentError("fft_magnitude: cannot retain more bins than the signal length");
    std::vector<std::complex<double>> a(projection.begin(), projection.end());
    fft_in_place(a);
    Tensor out({retained});
    for (std::size_t k = 0; k < retained; ++k) out[k] = std::abs(a[k]);
    return out;
}

Tensor patch_features(const Tensor& patch, const FeatureConfig& config) {
    config.validate();
    const Tensor sinogram = radon(laplacian_error(patch), config.angles, config.bins);
    Tensor out({config.length()});
    for (std::size_t a = 0; a < config.angles; ++a) {
        const Tensor mag = fft_magnitude(sinogram.values().subspan(a * config.bins, config.bins), config.retained);
        std::copy_n(mag.data(), config.retained, out.data() + a * config.retained);
    }
    return out;
}

std::vector<Tensor> image_features(const Tensor& image, const FeatureConfig& config, std::size_t grid) {
    const PatchGrid patches = extract_patches(image, grid);
    std::vector<Tensor> out;
    out.reserve(patches.patches.size());
    for (const auto& p : patches.patches) out.push_back(patch_features(p, config));
    return out;
}

void write_feature_dump(std::ostream& out, const std::vector<Tensor>& features) {
    if (features.size() > 256) throw FormatError("feature dump holds at most 256 patches");
    out.write("FRSF", 4);
    le::put_u32(out, kFeatureDumpVersion);
    le::put_u32(out, static_cast<std::uint32_t>(features.size()));
    for (std::size_t i = 0; i < features.size(); ++i) {
        if (features[i].size() > 0xFFFF) throw FormatError("feature vector too long for dump");
        le::put_u8(out, static_cast<std::uint8_t>(i));
        le::put_u16(out, static_cast<std::uint16_t>(features[i].size()));
        for (double v : features[i].values()) le::put_f64(out, v);
    }
    if (!out) throw FormatError("failed writing feature dump");
}

std::vector<Tensor> read_feature_dump(std::istream& in) {
    char magic[4];
    if (!in.read(magic, 4) || std::string(magic, 4) != "FRSF") throw FormatError("not a feature dump");
    if (le::get_u32(in) != kFeatureDumpVersion) throw FormatError("unsupported feature dump version");
    const auto count = le::get_u32(in);
    std::vector<Tensor> features(count);
    for (std::uint32_t n = 0; n < count; ++n) {
        const auto index = le::get_u8(in);
        const auto len = le::get_u16(in);
        if (index >= count || len == 0) throw FormatError("corrupt feature dump record");
        std::vector<double> values(len);
        for (auto& v : values) v = le::get_f64(in);
        features[index] = Tensor({len}, std::move(values));
    }
    return features;
}

void save_feature_dump(const std::filesystem::path& path, const std::vector<Tensor>& features) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open " + path.string() + " for writing");
    write_feature_dump(out, features);
}

}  // namespace floc
