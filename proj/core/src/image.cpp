#include "floc/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

namespace floc {

Tensor luminance(const Tensor& rgb) {
    require_rank(rgb, 3, "luminance");
    if (rgb.dim(2) != 3) throw ShapeError("luminance: expected 3 channels, got " + shape_to_string(rgb.shape()));
    const std::size_t h = rgb.dim(0), w = rgb.dim(1);
    Tensor out({h, w});
    for (std::size_t i = 0; i < h * w; ++i) {
        out[i] = 0.299 * rgb[3 * i] + 0.587 * rgb[3 * i + 1] + 0.114 * rgb[3 * i + 2];
    }
    return out;
}

Tensor crop(const Tensor& image, std::size_t top, std::size_t left, std::size_t height, std::size_t width) {
    if (image.rank() != 2 && image.rank() != 3) throw ShapeError("crop: expected rank 2 or 3");
    if (top + height > image.dim(0) || left + width > image.dim(1) || height == 0 || width == 0) {
        throw ArgumentError("crop: window exceeds image " + shape_to_string(image.shape()));
    }
    const std::size_t c = image.rank() == 3 ? image.dim(2) : 1;
    Shape shape = image.rank() == 3 ? Shape{height, width, c} : Shape{height, width};
    Tensor out(shape);
    for (std::size_t y = 0; y < height; ++y) {
        const double* src = image.data() + ((top + y) * image.dim(1) + left) * c;
        std::copy_n(src, width * c, out.data() + y * width * c);
    }
    return out;
}

namespace {

std::size_t channels_of(const Tensor& t) { return t.rank() == 3 ? t.dim(2) : 1; }

Shape resized_shape(const Tensor& t, std::size_t h, std::size_t w) {
    if (t.rank() == 3) return {h, w, t.dim(2)};
    if (t.rank() == 2) return {h, w};
    throw ShapeError("resize: expected rank 2 or 3");
}

}  // namespace

Tensor resize_bilinear(const Tensor& image, std::size_t height, std::size_t width) {
    Tensor out(resized_shape(image, height, width));
    const std::size_t ih = image.dim(0), iw = image.dim(1), c = channels_of(image);
    const double sy = static_cast<double>(ih) / static_cast<double>(height);
    const double sx = static_cast<double>(iw) / static_cast<double>(width);
    for (std::size_t y = 0; y < height; ++y) {
        const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(ih - 1));
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, ih - 1);
        const double ty = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < width; ++x) {
            const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(iw - 1));
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, iw - 1);
            const double tx = fx - static_cast<double>(x0);
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double a = image[(y0 * iw + x0) * c + ch], b = image[(y0 * iw + x1) * c + ch];
                const double d = image[(y1 * iw + x0) * c + ch], e = image[(y1 * iw + x1) * c + ch];
                out[(y * width + x) * c + ch] = (1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * d + tx * e);
            }
        }
    }
    return out;
}

Tensor resize_nearest(const Tensor& image, std::size_t height, std::size_t width) {
    Tensor out(resized_shape(image, height, width));
    const std::size_t ih = image.dim(0), iw = image.dim(1), c = channels_of(image);
    for (std::size_t y = 0; y < height; ++y) {
        const std::size_t sy = std::min(ih - 1, y * ih / height);
        for (std::size_t x = 0; x < width; ++x) {
            const std::size_t sx = std::min(iw - 1, x * iw / width);
            std::copy_n(image.data() + (sy * iw + sx) * c, c, out.data() + (y * width + x) * c);
        }
    }
    return out;
}

Tensor resize_mask(const Tensor& mask, std::size_t height, std::size_t width) {
    Tensor out = resize_nearest(mask, height, width);
    for (auto& v : out.storage()) v = v >= 0.5 ? 1.0 : 0.0;
    return out;
}

bool is_binary_mask(const Tensor& mask) noexcept {
    return std::all_of(mask.values().begin(), mask.values().end(), [](double v) { return v == 0.0 || v == 1.0; });
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const { std::fclose(f); }
};

}  // namespace

Tensor read_png(const std::filesystem::path& path) {
    std::unique_ptr<std::FILE, FileCloser> file(std::fopen(path.c_str(), "rb"));
    if (!file) throw std::runtime_error("cannot open " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("libpng initialization failed");
    }
    std::vector<png_bytep> rows;
    std::vector<unsigned char> buffer;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("failed decoding PNG " + path.string());
    }
    png_init_io(png, file.get());
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_read_update_info(png, info);
    const std::size_t w = png_get_image_width(png, info), h = png_get_image_height(png, info);
    const std::size_t c = png_get_channels(png, info);
    buffer.resize(h * w * c);
    rows.resize(h);
    for (std::size_t y = 0; y < h; ++y) rows[y] = buffer.data() + y * w * c;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);

    // Gray+alpha is expanded to RGBA so callers only see 1, 3 or 4 channels.
    const std::size_t oc = c == 2 ? 4 : c;
    Tensor out({h, w, oc});
    for (std::size_t i = 0; i < h * w; ++i) {
        if (c == 2) {
            const double g = buffer[2 * i] / 255.0;
            out[4 * i] = out[4 * i + 1] = out[4 * i + 2] = g;
            out[4 * i + 3] = buffer[2 * i + 1] / 255.0;
        } else {
            for (std::size_t ch = 0; ch < c; ++ch) out[i * c + ch] = buffer[i * c + ch] / 255.0;
        }
    }
    return out;
}

void write_png(const std::filesystem::path& path, const Tensor& image) {
    if (image.rank() != 2 && image.rank() != 3) throw ShapeError("write_png: expected rank 2 or 3");
    const std::size_t h = image.dim(0), w = image.dim(1), c = channels_of(image);
    int color_type = 0;
    switch (c) {
        case 1: color_type = PNG_COLOR_TYPE_GRAY; break;
        case 3: color_type = PNG_COLOR_TYPE_RGB; break;
        case 4: color_type = PNG_COLOR_TYPE_RGBA; break;
        default: throw ShapeError("write_png: unsupported channel count " + std::to_string(c));
    }
    std::vector<unsigned char> buffer(image.size());
    for (std::size_t i = 0; i < image.size(); ++i) {
        buffer[i] = static_cast<unsigned char>(std::lround(std::clamp(image[i], 0.0, 1.0) * 255.0));
    }
    std::unique_ptr<std::FILE, FileCloser> file(std::fopen(path.c_str(), "wb"));
    if (!file) throw std::runtime_error("cannot open " + path.string() + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("libpng initialization failed");
    }
    std::vector<png_bytep> rows(h);
    for (std::size_t y = 0; y < h; ++y) rows[y] = buffer.data() + y * w * c;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("failed encoding PNG " + path.string());
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, color_type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Tensor to_mask(const Tensor& gray) {
    if (gray.rank() == 3 && gray.dim(2) != 1) {
        // Take the first channel of a colour mask.
        Tensor out({gray.dim(0), gray.dim(1)});
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = gray[i * gray.dim(2)] >= 0.5 ? 1.0 : 0.0;
        return out;
    }
    Tensor out = gray.reshaped({gray.dim(0), gray.dim(1)});
    for (auto& v : out.storage()) v = v >= 0.5 ? 1.0 : 0.0;
    return out;
}

Tensor to_rgb(const Tensor& image) {
    require_rank(image, 3, "to_rgb");
    const std::size_t c = image.dim(2);
    if (c == 3) return image;
    const std::size_t pixels = image.dim(0) * image.dim(1);
    Tensor out({image.dim(0), image.dim(1), 3});
    for (std::size_t i = 0; i < pixels; ++i) {
        for (std::size_t ch = 0; ch < 3; ++ch) out[3 * i + ch] = c == 1 ? image[i] : image[i * c + ch];
    }
    return out;
}

}  // namespace floc
