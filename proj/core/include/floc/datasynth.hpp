#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "floc/tensor.hpp"

namespace floc {

/// No non-overlapping position was found for a paste.
class PlacementError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct SegmentedObject {
    Tensor rgba;  // [h, w, 4], alpha exactly 0 or 1, tight around the object
    std::string id;
    std::string category;

    std::size_t height() const { return rgba.dim(0); }
    std::size_t width() const { return rgba.dim(1); }
    /// Throws ArgumentError if alpha is not binary or not tight.
    void validate() const;
};

/// Cuts the object under `mask` out of `image`, trimmed to the mask's bounding box.
SegmentedObject cut_object(const Tensor& image, const Tensor& mask, std::string id, std::string category = {});
/// Loads an RGBA PNG. Alpha is thresholded at 0.5 and the patch trimmed.
SegmentedObject load_object(const std::filesystem::path& path, std::string category = {});

/// The four corner crops of side `side`, without resizing: top-left,
/// top-right, bottom-left, bottom-right. Empty when the image is too small.
std::vector<Tensor> corner_crops(const Tensor& image, std::size_t side = 1024);

struct RenderedObject {
    Tensor rgb;    // [h, w, 3], quantized to 8-bit levels
    Tensor alpha;  // [h, w] binary, tight
};

/// Scales and rotates (degrees, counter-clockwise) about the patch centre.
/// Colour is bilinear, alpha nearest-neighbour thresholded at 0.5.
RenderedObject render_object(const SegmentedObject& object, double scale, double rotation_degrees);

struct SpliceRecord {
    std::string object_id;
    double scale = 1.0;
    double rotation_degrees = 0.0;
    std::size_t top = 0, left = 0;        // paste position of the rendered patch
    std::size_t height = 0, width = 0;    // rendered patch size
    std::size_t pixels = 0;               // pixels written

    nlohmann::ordered_json to_json() const;
};

struct SpliceResult {
    Tensor image;
    Tensor mask;
    SpliceRecord record;
};

struct Position {
    std::size_t top = 0, left = 0;
};

/// Pastes `object` into `canvas` with hard compositing. `mask` marks regions
/// already spliced; the new paste may not touch them, not even diagonally.
/// Without a position, up to 100 random positions are tried.
SpliceResult splice(const Tensor& canvas, const Tensor& mask, const SegmentedObject& object, double scale,
                    double rotation_degrees, std::optional<Position> position, std::mt19937_64& rng);

inline constexpr std::size_t kPlacementAttempts = 100;

struct SourceImage {
    Tensor image;  // [H, W, 3]
    std::string id;
};

struct CorpusOptions {
    std::size_t per_crop_objects = 6;
    std::size_t crop_side = 1024;
    std::uint64_t seed = 0;
    double min_scale = 0.5, max_scale = 1.5;
    double min_rotation = -30.0, max_rotation = 30.0;
};

struct GeneratedSample {
    Tensor image;
    Tensor mask;
    std::string name;  // "<source>_c<crop>_o<k>"
    std::string source_id;
    std::size_t crop_index = 0;
    std::vector<SpliceRecord> splices;
};

struct CorpusReport {
    std::size_t generated = 0;
    std::vector<std::string> warnings;
};

using SampleSink = std::function<void(const GeneratedSample&)>;

/// For every corner crop of every source, splices `per_crop_objects`
/// distinct objects, each pasted twice. Samples are streamed to `sink`.
CorpusReport generate_corpus(const std::vector<SourceImage>& sources, const std::vector<SegmentedObject>& objects,
                             const CorpusOptions& options, const SampleSink& sink);

/// One JSON-lines manifest row for a generated sample.
std::string corpus_manifest_line(const GeneratedSample& sample, const std::string& image_path,
                                 const std::string& mask_path, std::uint64_t seed);

}  // namespace floc
