#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "floc/tensor.hpp"

namespace floc {

/// Channel 1 of a [H, W, 2] probability map.
Tensor manipulation_probability(const Tensor& probs);

/// Argmax of a [H, W, 2] probability map; ties go to non-manipulated.
Tensor predict_mask(const Tensor& probs);

/// Fraction of pixels on which two binary masks agree.
double pixel_accuracy(const Tensor& predicted, const Tensor& truth);

struct RocCurve {
    /// Descending; the first entry is +inf (nothing predicted positive).
    std::vector<double> thresholds;
    std::vector<double> fpr;
    std::vector<double> tpr;
    double auc = 0.0;
};

/// A pixel is predicted positive when its score >= threshold. One point per
/// distinct score; AUC is the trapezoidal area.
RocCurve roc_auc(const Tensor& scores, const Tensor& truth);

struct Box {
    std::size_t min_row = 0, min_col = 0, max_row = 0, max_col = 0;  // inclusive
    double score = 1.0;

    std::size_t height() const { return max_row - min_row + 1; }
    std::size_t width() const { return max_col - min_col + 1; }
    std::size_t area() const { return height() * width(); }
    bool operator==(const Box&) const = default;
};

inline constexpr std::size_t kMinBoxArea = 64;

/// Tight rectangles around the 8-connected components of `mask`, dropping
/// those whose rectangle area is below `min_area`. The score is the mean of
/// `scores` over the component (1 when `scores` is empty). Sorted by top-left.
std::vector<Box> extract_boxes(const Tensor& mask, const Tensor& scores = {}, std::size_t min_area = kMinBoxArea);

double iou(const Box& a, const Box& b);

struct ImageDetections {
    std::vector<Box> predicted;
    std::vector<Box> truth;
};

/// Predictions in descending score order each take the unmatched ground-truth
/// box of highest IoU, provided it reaches `iou_threshold`. Returns the
/// all-points interpolated area under the precision-recall curve.
double average_precision(const std::vector<Box>& predicted, const std::vector<Box>& truth, double iou_threshold = 0.5);
/// Same, with matching done per image and the ranking pooled over images.
double average_precision(std::span<const ImageDetections> images, double iou_threshold = 0.5);

struct ImageMetrics {
    std::string name;
    double accuracy = 0.0;
    double auc = 0.0;  // NaN when the ground truth holds a single class
    std::size_t predicted_boxes = 0;
    std::size_t truth_boxes = 0;
};

struct CorpusSummary {
    std::size_t images = 0;
    double mean_accuracy = 0.0;
    double mean_auc = 0.0;  // over images where AUC is defined
    double average_precision = 0.0;
};

/// Per-image metrics from a [H, W, 2] probability map and its binary truth.
ImageMetrics evaluate_image(const std::string& name, const Tensor& probs, const Tensor& truth,
                            ImageDetections* detections = nullptr);
CorpusSummary summarize(std::span<const ImageMetrics> images, std::span<const ImageDetections> detections,
                        double iou_threshold = 0.5);

void write_metrics_csv(std::ostream& out, std::span<const ImageMetrics> images);
void write_summary_csv(std::ostream& out, const CorpusSummary& summary);
void write_roc_csv(std::ostream& out, const RocCurve& curve);

}  // namespace floc
