#include "floc/datasynth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "floc/image.hpp"

namespace floc {

namespace {

struct Bounds {
    std::size_t top, left, bottom, right;  // inclusive
};

std::optional<Bounds> alpha_bounds(const Tensor& alpha) {
    const std::size_t h = alpha.dim(0), w = alpha.dim(1);
    std::optional<Bounds> b;
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            if (alpha.at(y, x) != 1.0) continue;
            if (!b) {
                b = Bounds{y, x, y, x};
            } else {
                b->top = std::min(b->top, y);
                b->left = std::min(b->left, x);
                b->bottom = std::max(b->bottom, y);
                b->right = std::max(b->right, x);
            }
        }
    }
    return b;
}

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

}  // namespace

void SegmentedObject::validate() const {
    require_rank(rgba, 3, "segmented object");
    if (rgba.dim(2) != 4) throw ShapeError("segmented object must be RGBA, got " + shape_to_string(rgba.shape()));
    Tensor alpha({height(), width()});
    for (std::size_t i = 0; i < alpha.size(); ++i) alpha[i] = rgba[4 * i + 3];
    if (!is_binary_mask(alpha)) throw ArgumentError("segmented object " + id + ": alpha is not binary");
    const auto b = alpha_bounds(alpha);
    if (!b || b->top != 0 || b->left != 0 || b->bottom + 1 != height() || b->right + 1 != width()) {
        throw ArgumentError("segmented object " + id + ": alpha bounding box is not tight");
    }
}

SegmentedObject cut_object(const Tensor& image, const Tensor& mask, std::string id, std::string category) {
    require_rank(image, 3, "cut_object image");
    require_shape(mask, {image.dim(0), image.dim(1)}, "cut_object mask");
    if (!is_binary_mask(mask)) throw ArgumentError("cut_object: mask is not binary");
    const auto b = alpha_bounds(mask);
    if (!b) throw ArgumentError("cut_object: empty mask for " + id);
    const std::size_t h = b->bottom - b->top + 1, w = b->right - b->left + 1;
    const Tensor rgb = to_rgb(image);
    SegmentedObject obj{Tensor({h, w, 4}), std::move(id), std::move(category)};
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const double a = mask.at(b->top + y, b->left + x);
            for (std::size_t c = 0; c < 3; ++c) obj.rgba.at(y, x, c) = a * rgb.at(b->top + y, b->left + x, c);
            obj.rgba.at(y, x, 3) = a;
        }
    }
    return obj;
}

SegmentedObject load_object(const std::filesystem::path& path, std::string category) {
    const Tensor rgba = read_png(path);
    if (rgba.dim(2) != 4) throw ArgumentError("object file " + path.string() + " has no alpha channel");
    Tensor mask({rgba.dim(0), rgba.dim(1)});
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = rgba[4 * i + 3] >= 0.5 ? 1.0 : 0.0;
    return cut_object(rgba, mask, path.stem().string(), std::move(category));
}

std::vector<Tensor> corner_crops(const Tensor& image, std::size_t side) {
    require_rank(image, 3, "corner_crops");
    const std::size_t h = image.dim(0), w = image.dim(1);
    if (side == 0 || h < side || w < side) return {};
    return {crop(image, 0, 0, side, side), crop(image, 0, w - side, side, side), crop(image, h - side, 0, side, side),
            crop(image, h - side, w - side, side, side)};
}

RenderedObject render_object(const SegmentedObject& object, double scale, double rotation_degrees) {
    object.validate();
    if (!(scale > 0.0) || !std::isfinite(scale)) throw ArgumentError("render_object: scale must be positive");
    if (!std::isfinite(rotation_degrees)) throw ArgumentError("render_object: rotation must be finite");
    const std::size_t h = object.height(), w = object.width();
    const double theta = rotation_degrees * std::numbers::pi / 180.0;
    const double ct = std::cos(theta), st = std::sin(theta);
    const double fw = scale * (static_cast<double>(w) * std::abs(ct) + static_cast<double>(h) * std::abs(st));
    const double fh = scale * (static_cast<double>(w) * std::abs(st) + static_cast<double>(h) * std::abs(ct));
    const auto ow = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(fw - 1e-9)));
    const auto oh = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(fh - 1e-9)));
    const double ocx = (static_cast<double>(ow) - 1.0) / 2.0, ocy = (static_cast<double>(oh) - 1.0) / 2.0;
    const double scx = (static_cast<double>(w) - 1.0) / 2.0, scy = (static_cast<double>(h) - 1.0) / 2.0;

    Tensor rgb({oh, ow, 3});
    Tensor alpha({oh, ow});
    for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
            const double dx = static_cast<double>(x) - ocx, dy = static_cast<double>(y) - ocy;
            const double u = (dx * ct - dy * st) / scale + scx;
            const double v = (dx * st + dy * ct) / scale + scy;
            const double nu = std::floor(u + 0.5), nv = std::floor(v + 0.5);
            if (nu < 0.0 || nv < 0.0 || nu >= static_cast<double>(w) || nv >= static_cast<double>(h)) continue;
            if (object.rgba.at(static_cast<std::size_t>(nv), static_cast<std::size_t>(nu), 3) < 0.5) continue;
            alpha.at(y, x) = 1.0;

            const double cu = std::clamp(u, 0.0, static_cast<double>(w - 1));
            const double cv = std::clamp(v, 0.0, static_cast<double>(h - 1));
            const auto u0 = static_cast<std::size_t>(std::floor(cu)), v0 = static_cast<std::size_t>(std::floor(cv));
            const std::size_t u1 = std::min(u0 + 1, w - 1), v1 = std::min(v0 + 1, h - 1);
            const double fu = cu - static_cast<double>(u0), fv = cv - static_cast<double>(v0);
            for (std::size_t c = 0; c < 3; ++c) {
                const double top = object.rgba.at(v0, u0, c) * (1.0 - fu) + object.rgba.at(v0, u1, c) * fu;
                const double bottom = object.rgba.at(v1, u0, c) * (1.0 - fu) + object.rgba.at(v1, u1, c) * fu;
                rgb.at(y, x, c) = quantize(top * (1.0 - fv) + bottom * fv);
            }
        }
    }
    const auto b = alpha_bounds(alpha);
    if (!b) throw ArgumentError("render_object: object vanishes at scale " + std::to_string(scale));
    const std::size_t th = b->bottom - b->top + 1, tw = b->right - b->left + 1;
    return {crop(rgb, b->top, b->left, th, tw), crop(alpha, b->top, b->left, th, tw)};
}

nlohmann::ordered_json SpliceRecord::to_json() const {
    nlohmann::ordered_json j;
    j["object_id"] = object_id;
    j["scale"] = scale;
    j["rotation_degrees"] = rotation_degrees;
    j["top"] = top;
    j["left"] = left;
    j["height"] = height;
    j["width"] = width;
    j["pixels"] = pixels;
    return j;
}

namespace {

// True when the rendered alpha placed at (top, left) touches, including
// diagonally, any pixel already set in `mask`.
bool collides(const Tensor& mask, const Tensor& alpha, std::size_t top, std::size_t left) {
    const std::size_t H = mask.dim(0), W = mask.dim(1);
    const std::size_t h = alpha.dim(0), w = alpha.dim(1);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            if (alpha.at(y, x) != 1.0) continue;
            const std::size_t cy = top + y, cx = left + x;
            const std::size_t y0 = cy > 0 ? cy - 1 : 0, y1 = std::min(cy + 1, H - 1);
            const std::size_t x0 = cx > 0 ? cx - 1 : 0, x1 = std::min(cx + 1, W - 1);
            for (std::size_t yy = y0; yy <= y1; ++yy) {
                for (std::size_t xx = x0; xx <= x1; ++xx) {
                    if (mask.at(yy, xx) != 0.0) return true;
                }
            }
        }
    }
    return false;
}

}  // namespace

SpliceResult splice(const Tensor& canvas, const Tensor& mask, const SegmentedObject& object, double scale,
                    double rotation_degrees, std::optional<Position> position, std::mt19937_64& rng) {
    require_rank(canvas, 3, "splice canvas");
    if (canvas.dim(2) != 3) throw ShapeError("splice: canvas must be RGB, got " + shape_to_string(canvas.shape()));
    const std::size_t H = canvas.dim(0), W = canvas.dim(1);
    require_shape(mask, {H, W}, "splice mask");
    const RenderedObject r = render_object(object, scale, rotation_degrees);
    const std::size_t h = r.alpha.dim(0), w = r.alpha.dim(1);
    if (h > H || w > W) {
        throw ArgumentError("splice: transformed object " + std::to_string(h) + "x" + std::to_string(w) +
                            " does not fit canvas " + std::to_string(H) + "x" + std::to_string(W));
    }

    Position at;
    if (position) {
        at = *position;
        if (at.top + h > H || at.left + w > W) throw ArgumentError("splice: position puts the object outside the canvas");
        if (collides(mask, r.alpha, at.top, at.left)) throw PlacementError("splice: position overlaps an existing splice");
    } else {
        std::uniform_int_distribution<std::size_t> row(0, H - h), col(0, W - w);
        bool placed = false;
        for (std::size_t attempt = 0; attempt < kPlacementAttempts && !placed; ++attempt) {
            at = {row(rng), col(rng)};
            placed = !collides(mask, r.alpha, at.top, at.left);
        }
        if (!placed) {
            throw PlacementError("splice: no free position for " + object.id + " after " +
                                 std::to_string(kPlacementAttempts) + " attempts");
        }
    }

    SpliceResult out{canvas, mask, {object.id, scale, rotation_degrees, at.top, at.left, h, w, 0}};
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            if (r.alpha.at(y, x) != 1.0) continue;
            for (std::size_t c = 0; c < 3; ++c) out.image.at(at.top + y, at.left + x, c) = r.rgb.at(y, x, c);
            out.mask.at(at.top + y, at.left + x) = 1.0;
            ++out.record.pixels;
        }
    }
    return out;
}

CorpusReport generate_corpus(const std::vector<SourceImage>& sources, const std::vector<SegmentedObject>& objects,
                             const CorpusOptions& options, const SampleSink& sink) {
    if (objects.empty()) throw ArgumentError("generate_corpus: object library is empty");
    if (sources.empty()) throw ArgumentError("generate_corpus: no source images");
    if (options.per_crop_objects == 0) throw ArgumentError("generate_corpus: per_crop_objects must be >= 1");
    if (!(options.min_scale > 0.0 && options.min_scale <= options.max_scale) ||
        options.min_rotation > options.max_rotation) {
        throw ArgumentError("generate_corpus: invalid scale or rotation range");
    }
    for (const auto& o : objects) o.validate();

    CorpusReport report;
    constexpr std::size_t kTransformDraws = 20;
    for (std::size_t s = 0; s < sources.size(); ++s) {
        const auto& src = sources[s];
        const Tensor rgb = to_rgb(src.image);
        const auto crops = corner_crops(rgb, options.crop_side);
        if (crops.empty()) {
            report.warnings.push_back("skipped " + src.id + ": " + shape_to_string(rgb.shape()) + " is smaller than " +
                                      std::to_string(options.crop_side) + " square");
            continue;
        }
        // Seeding per source keeps each source's output independent of the others.
        std::seed_seq seq{static_cast<std::uint32_t>(options.seed), static_cast<std::uint32_t>(options.seed >> 32),
                          static_cast<std::uint32_t>(s)};
        std::mt19937_64 rng(seq);
        std::uniform_real_distribution<double> scale_dist(options.min_scale, options.max_scale);
        std::uniform_real_distribution<double> rot_dist(options.min_rotation, options.max_rotation);

        for (std::size_t c = 0; c < crops.size(); ++c) {
            std::vector<std::size_t> picks(objects.size());
            std::iota(picks.begin(), picks.end(), std::size_t{0});
            std::shuffle(picks.begin(), picks.end(), rng);
            for (std::size_t k = 0; k < options.per_crop_objects; ++k) {
                const auto& obj = objects[picks[k % picks.size()]];
                GeneratedSample sample{crops[c], Tensor({options.crop_side, options.crop_side}),
                                       src.id + "_c" + std::to_string(c) + "_o" + std::to_string(k), src.id, c, {}};
                for (int paste = 0; paste < 2; ++paste) {
                    bool done = false;
                    for (std::size_t draw = 0; draw < kTransformDraws && !done; ++draw) {
                        const double scale = scale_dist(rng);
                        const double rotation = rot_dist(rng);
                        try {
                            auto r = splice(sample.image, sample.mask, obj, scale, rotation, std::nullopt, rng);
                            sample.image = std::move(r.image);
                            sample.mask = std::move(r.mask);
                            sample.splices.push_back(std::move(r.record));
                            done = true;
                        } catch (const PlacementError&) {
                        } catch (const ArgumentError&) {
                        }
                    }
                    if (!done) throw PlacementError("generate_corpus: could not place " + obj.id + " on " + sample.name);
                }
                sink(sample);
                ++report.generated;
            }
        }
    }
    return report;
}

std::string corpus_manifest_line(const GeneratedSample& sample, const std::string& image_path,
                                 const std::string& mask_path, std::uint64_t seed) {
    nlohmann::ordered_json j;
    j["image"] = image_path;
    j["mask"] = mask_path;
    j["split"] = "";
    j["source_id"] = sample.source_id;
    j["name"] = sample.name;
    j["crop"] = sample.crop_index;
    j["seed"] = seed;
    j["splices"] = nlohmann::ordered_json::array();
    for (const auto& r : sample.splices) j["splices"].push_back(r.to_json());
    return j.dump();
}

}  // namespace floc
