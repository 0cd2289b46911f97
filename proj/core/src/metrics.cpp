#include "floc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <tuple>

#include "floc/image.hpp"

namespace floc {

Tensor manipulation_probability(const Tensor& probs) {
    require_rank(probs, 3, "probability map");
    if (probs.dim(2) != 2) throw ShapeError("probability map needs 2 channels, got " + shape_to_string(probs.shape()));
    Tensor out({probs.dim(0), probs.dim(1)});
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = probs[2 * i + 1];
    return out;
}

Tensor predict_mask(const Tensor& probs) {
    require_rank(probs, 3, "probability map");
    if (probs.dim(2) != 2) throw ShapeError("probability map needs 2 channels, got " + shape_to_string(probs.shape()));
    Tensor out({probs.dim(0), probs.dim(1)});
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = probs[2 * i + 1] > probs[2 * i] ? 1.0 : 0.0;
    return out;
}

double pixel_accuracy(const Tensor& predicted, const Tensor& truth) {
    require_shape(predicted, truth.shape(), "pixel_accuracy");
    if (!is_binary_mask(predicted) || !is_binary_mask(truth)) throw ArgumentError("pixel_accuracy: masks must be binary");
    std::size_t agree = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) agree += predicted[i] == truth[i] ? 1 : 0;
    return static_cast<double>(agree) / static_cast<double>(truth.size());
}

RocCurve roc_auc(const Tensor& scores, const Tensor& truth) {
    require_shape(scores, truth.shape(), "roc_auc");
    if (!is_binary_mask(truth)) throw ArgumentError("roc_auc: ground truth must be binary");
    if (!scores.all_finite()) throw ArgumentError("roc_auc: scores must be finite");
    std::size_t positives = 0;
    for (double v : truth.values()) positives += v == 1.0 ? 1 : 0;
    const std::size_t negatives = truth.size() - positives;
    if (positives == 0 || negatives == 0) throw ArgumentError("roc_auc: ground truth holds a single class");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    RocCurve curve;
    curve.thresholds.push_back(std::numeric_limits<double>::infinity());
    curve.fpr.push_back(0.0);
    curve.tpr.push_back(0.0);
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < order.size();) {
        const double threshold = scores[order[i]];
        for (; i < order.size() && scores[order[i]] == threshold; ++i) {
            if (truth[order[i]] == 1.0) {
                ++tp;
            } else {
                ++fp;
            }
        }
        curve.thresholds.push_back(threshold);
        curve.fpr.push_back(static_cast<double>(fp) / static_cast<double>(negatives));
        curve.tpr.push_back(static_cast<double>(tp) / static_cast<double>(positives));
    }
    for (std::size_t k = 1; k < curve.fpr.size(); ++k) {
        curve.auc += (curve.fpr[k] - curve.fpr[k - 1]) * (curve.tpr[k] + curve.tpr[k - 1]) / 2.0;
    }
    return curve;
}

std::vector<Box> extract_boxes(const Tensor& mask, const Tensor& scores, std::size_t min_area) {
    require_rank(mask, 2, "extract_boxes mask");
    if (!is_binary_mask(mask)) throw ArgumentError("extract_boxes: mask is not binary");
    if (!scores.empty()) require_shape(scores, mask.shape(), "extract_boxes scores");
    const std::size_t h = mask.dim(0), w = mask.dim(1);
    std::vector<char> seen(mask.size(), 0);
    std::vector<std::size_t> stack;
    std::vector<Box> boxes;
    // Raster discovery already yields components ordered by their first pixel;
    // the final sort makes the (min_row, min_col) order explicit.
    for (std::size_t start = 0; start < mask.size(); ++start) {
        if (mask[start] != 1.0 || seen[start]) continue;
        Box box{start / w, start % w, start / w, start % w, 0.0};
        double sum = 0.0;
        std::size_t count = 0;
        stack.push_back(start);
        seen[start] = 1;
        while (!stack.empty()) {
            const std::size_t p = stack.back();
            stack.pop_back();
            const std::size_t y = p / w, x = p % w;
            box.min_row = std::min(box.min_row, y);
            box.max_row = std::max(box.max_row, y);
            box.min_col = std::min(box.min_col, x);
            box.max_col = std::max(box.max_col, x);
            sum += scores.empty() ? 1.0 : scores[p];
            ++count;
            for (std::size_t yy = y > 0 ? y - 1 : 0; yy <= std::min(y + 1, h - 1); ++yy) {
                for (std::size_t xx = x > 0 ? x - 1 : 0; xx <= std::min(x + 1, w - 1); ++xx) {
                    const std::size_t q = yy * w + xx;
                    if (mask[q] == 1.0 && !seen[q]) {
                        seen[q] = 1;
                        stack.push_back(q);
                    }
                }
            }
        }
        box.score = sum / static_cast<double>(count);
        if (box.area() >= min_area) boxes.push_back(box);
    }
    std::sort(boxes.begin(), boxes.end(), [](const Box& a, const Box& b) {
        return std::tie(a.min_row, a.min_col, a.max_row, a.max_col) < std::tie(b.min_row, b.min_col, b.max_row, b.max_col);
    });
    return boxes;
}

double iou(const Box& a, const Box& b) {
    const std::size_t top = std::max(a.min_row, b.min_row), bottom = std::min(a.max_row, b.max_row);
    const std::size_t left = std::max(a.min_col, b.min_col), right = std::min(a.max_col, b.max_col);
    if (top > bottom || left > right) return 0.0;
    const double inter = static_cast<double>((bottom - top + 1) * (right - left + 1));
    return inter / (static_cast<double>(a.area()) + static_cast<double>(b.area()) - inter);
}

namespace {

struct RankedHit {
    double score;
    bool true_positive;
};

void match_image(const std::vector<Box>& predicted, const std::vector<Box>& truth, double iou_threshold,
                 std::vector<RankedHit>& hits) {
    std::vector<std::size_t> order(predicted.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return predicted[a].score > predicted[b].score; });
    std::vector<char> taken(truth.size(), 0);
    for (std::size_t i : order) {
        double best = -1.0;
        std::size_t best_gt = truth.size();
        for (std::size_t g = 0; g < truth.size(); ++g) {
            if (taken[g]) continue;
            const double o = iou(predicted[i], truth[g]);
            if (o >= iou_threshold && o > best) {
                best = o;
                best_gt = g;
            }
        }
        if (best_gt < truth.size()) taken[best_gt] = 1;
        hits.push_back({predicted[i].score, best_gt < truth.size()});
    }
}

double interpolated_ap(std::vector<RankedHit> hits, std::size_t truth_count) {
    std::stable_sort(hits.begin(), hits.end(), [](const RankedHit& a, const RankedHit& b) { return a.score > b.score; });
    std::vector<double> recall{0.0}, precision{0.0};
    std::size_t tp = 0;
    for (std::size_t i = 0; i < hits.size(); ++i) {
        tp += hits[i].true_positive ? 1 : 0;
        recall.push_back(static_cast<double>(tp) / static_cast<double>(truth_count));
        precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    }
    for (std::size_t i = precision.size() - 1; i > 0; --i) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double ap = 0.0;
    for (std::size_t i = 1; i < recall.size(); ++i) ap += (recall[i] - recall[i - 1]) * precision[i];
    return ap;
}

void check_threshold(double iou_threshold) {
    if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) throw ArgumentError("average_precision: IoU threshold must lie in (0, 1]");
}

}  // namespace

double average_precision(const std::vector<Box>& predicted, const std::vector<Box>& truth, double iou_threshold) {
    const ImageDetections one{predicted, truth};
    return average_precision(std::span<const ImageDetections>(&one, 1), iou_threshold);
}

double average_precision(std::span<const ImageDetections> images, double iou_threshold) {
    check_threshold(iou_threshold);
    std::vector<RankedHit> hits;
    std::size_t truth_count = 0;
    for (const auto& img : images) {
        match_image(img.predicted, img.truth, iou_threshold, hits);
        truth_count += img.truth.size();
    }
    if (truth_count == 0) throw ArgumentError("average_precision: no ground-truth boxes");
    return interpolated_ap(std::move(hits), truth_count);
}

ImageMetrics evaluate_image(const std::string& name, const Tensor& probs, const Tensor& truth,
                            ImageDetections* detections) {
    const Tensor pred = predict_mask(probs);
    const Tensor score = manipulation_probability(probs);
    ImageMetrics m;
    m.name = name;
    m.accuracy = pixel_accuracy(pred, truth);
    const double positives = std::accumulate(truth.values().begin(), truth.values().end(), 0.0);
    m.auc = positives > 0.0 && positives < static_cast<double>(truth.size()) ? roc_auc(score, truth).auc
                                                                            : std::numeric_limits<double>::quiet_NaN();
    ImageDetections d{extract_boxes(pred, score), extract_boxes(truth)};
    m.predicted_boxes = d.predicted.size();
    m.truth_boxes = d.truth.size();
    if (detections) *detections = std::move(d);
    return m;
}

CorpusSummary summarize(std::span<const ImageMetrics> images, std::span<const ImageDetections> detections,
                        double iou_threshold) {
    CorpusSummary s;
    s.images = images.size();
    std::size_t with_auc = 0;
    for (const auto& m : images) {
        s.mean_accuracy += m.accuracy;
        if (!std::isnan(m.auc)) {
            s.mean_auc += m.auc;
            ++with_auc;
        }
    }
    if (!images.empty()) s.mean_accuracy /= static_cast<double>(images.size());
    s.mean_auc = with_auc ? s.mean_auc / static_cast<double>(with_auc) : std::numeric_limits<double>::quiet_NaN();
    std::size_t truth_boxes = 0;
    for (const auto& d : detections) truth_boxes += d.truth.size();
    s.average_precision = truth_boxes ? average_precision(detections, iou_threshold) : std::numeric_limits<double>::quiet_NaN();
    return s;
}

void write_metrics_csv(std::ostream& out, std::span<const ImageMetrics> images) {
    out << "image,accuracy,auc,predicted_boxes,truth_boxes\n";
    out.precision(17);
    for (const auto& m : images) {
        out << m.name << ',' << m.accuracy << ',';
        if (!std::isnan(m.auc)) out << m.auc;
        out << ',' << m.predicted_boxes << ',' << m.truth_boxes << '\n';
    }
}

void write_summary_csv(std::ostream& out, const CorpusSummary& summary) {
    out << "images,mean_accuracy,mean_auc,average_precision\n";
    out.precision(17);
    out << summary.images << ',' << summary.mean_accuracy << ',';
    if (!std::isnan(summary.mean_auc)) out << summary.mean_auc;
    out << ',';
    if (!std::isnan(summary.average_precision)) out << summary.average_precision;
    out << '\n';
}

void write_roc_csv(std::ostream& out, const RocCurve& curve) {
    out << "threshold,fpr,tpr\n";
    out.precision(17);
    for (std::size_t i = 0; i < curve.thresholds.size(); ++i) {
        out << curve.thresholds[i] << ',' << curve.fpr[i] << ',' << curve.tpr[i] << '\n';
    }
}

}  // namespace floc
