#pragma once

// Independent re-check of a generated sample: every recorded paste is
// re-rendered from its SpliceRecord and the image, mask and canvas are
// compared pixel by pixel.

#include <map>
#include <string>
#include <vector>

#include "floc/datasynth.hpp"

namespace floc::testing {

struct SpliceAudit {
    bool exact = true;        // mask == union of footprints, pixels match render or canvas
    bool disjoint = true;     // no 8-connected component spans two pastes
    std::string problem;
};

inline SpliceAudit audit_sample(const Tensor& canvas, const GeneratedSample& sample,
                                const std::map<std::string, const SegmentedObject*>& objects) {
    SpliceAudit audit;
    const std::size_t H = canvas.dim(0), W = canvas.dim(1);
    Tensor owner({H, W}, -1.0);  // which paste wrote each pixel
    Tensor expected = canvas;
    for (std::size_t k = 0; k < sample.splices.size(); ++k) {
        const auto& rec = sample.splices[k];
        const auto r = render_object(*objects.at(rec.object_id), rec.scale, rec.rotation_degrees);
        std::size_t written = 0;
        for (std::size_t y = 0; y < r.alpha.dim(0); ++y)
            for (std::size_t x = 0; x < r.alpha.dim(1); ++x) {
                if (r.alpha.at(y, x) != 1.0) continue;
                const std::size_t yy = rec.top + y, xx = rec.left + x;
                if (yy >= H || xx >= W) {
                    audit.exact = false;
                    audit.problem = "paste outside canvas";
                    return audit;
                }
                if (owner.at(yy, xx) >= 0.0) {
                    audit.disjoint = false;
                    audit.problem = "pastes overlap";
                }
                owner.at(yy, xx) = double(k);
                for (std::size_t c = 0; c < 3; ++c) expected.at(yy, xx, c) = r.rgb.at(y, x, c);
                ++written;
            }
        if (written != rec.pixels) {
            audit.exact = false;
            audit.problem = "pixel count mismatch";
        }
    }
    for (std::size_t i = 0; i < H * W; ++i) {
        if ((owner[i] >= 0.0) != (sample.mask[i] == 1.0) || (sample.mask[i] != 0.0 && sample.mask[i] != 1.0)) {
            audit.exact = false;
            audit.problem = "mask differs from footprint";
        }
    }
    if (sample.image != expected) {
        audit.exact = false;
        audit.problem = "image differs from canvas plus renders";
    }

    // 8-connected flood fill over the mask; each component must carry one owner.
    std::vector<char> seen(H * W, 0);
    std::vector<std::size_t> stack;
    for (std::size_t start = 0; start < H * W; ++start) {
        if (seen[start] || sample.mask[start] != 1.0) continue;
        const double label = owner[start];
        stack.assign(1, start);
        seen[start] = 1;
        while (!stack.empty()) {
            const std::size_t p = stack.back();
            stack.pop_back();
            if (owner[p] != label) {
                audit.disjoint = false;
                audit.problem = "component spans two pastes";
            }
            const long py = long(p / W), px = long(p % W);
            for (long dy = -1; dy <= 1; ++dy)
                for (long dx = -1; dx <= 1; ++dx) {
                    const long y = py + dy, x = px + dx;
                    if (y < 0 || x < 0 || y >= long(H) || x >= long(W)) continue;
                    const std::size_t q = std::size_t(y) * W + std::size_t(x);
                    if (!seen[q] && sample.mask[q] == 1.0) {
                        seen[q] = 1;
                        stack.push_back(q);
                    }
                }
        }
    }
    return audit;
}

}  // namespace floc::testing
