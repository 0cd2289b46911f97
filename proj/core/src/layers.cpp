#include "floc/layers.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace floc {

namespace {

void require_feature_map(const Tensor& t, const char* what) { require_rank(t, 3, what); }

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias) {
    require_feature_map(input, "conv2d input");
    require_rank(kernel, 4, "conv2d kernel");
    const std::size_t k = kernel.dim(0);
    if (kernel.dim(1) != k || k % 2 == 0) {
        throw ShapeError("conv2d: kernel must be square with odd size, got " + shape_to_string(kernel.shape()));
    }
    const std::size_t h = input.dim(0), w = input.dim(1), cin = input.dim(2);
    if (kernel.dim(2) != cin) {
        throw ShapeError("conv2d: input has " + std::to_string(cin) + " channels but kernel expects " +
                         std::to_string(kernel.dim(2)));
    }
    const std::size_t cout = kernel.dim(3);
    require_shape(bias, {cout}, "conv2d bias");

    const auto pad = static_cast<std::ptrdiff_t>(k / 2);
    Tensor out({h, w, cout});
    const double* in = input.data();
    const double* ker = kernel.data();
    double* o = out.data();
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double* orow = o + (y * w + x) * cout;
            for (std::size_t co = 0; co < cout; ++co) orow[co] = bias[co];
            for (std::size_t dy = 0; dy < k; ++dy) {
                const auto iy = static_cast<std::ptrdiff_t>(y + dy) - pad;
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t dx = 0; dx < k; ++dx) {
                    const auto ix = static_cast<std::ptrdiff_t>(x + dx) - pad;
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                    const double* irow = in + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin;
                    const double* kp = ker + (dy * k + dx) * cin * cout;
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                        const double v = irow[ci];
                        const double* kr = kp + ci * cout;
                        for (std::size_t co = 0; co < cout; ++co) orow[co] += v * kr[co];
                    }
                }
            }
        }
    }
    return out;
}

Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& upstream) {
    require_feature_map(input, "conv2d_backward input");
    require_rank(kernel, 4, "conv2d_backward kernel");
    const std::size_t k = kernel.dim(0);
    const std::size_t h = input.dim(0), w = input.dim(1), cin = input.dim(2);
    if (kernel.dim(1) != k || k % 2 == 0 || kernel.dim(2) != cin) {
        throw ShapeError("conv2d_backward: kernel " + shape_to_string(kernel.shape()) + " incompatible with input " +
                         shape_to_string(input.shape()));
    }
    const std::size_t cout = kernel.dim(3);
    require_shape(upstream, {h, w, cout}, "conv2d_backward upstream");

    Conv2dGrads g{Tensor(kernel.shape()), Tensor({cout}), Tensor(input.shape())};
    const auto pad = static_cast<std::ptrdiff_t>(k / 2);
    const double* in = input.data();
    const double* ker = kernel.data();
    const double* up = upstream.data();
    double* gk = g.kernel.data();
    double* gi = g.input.data();
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const double* urow = up + (y * w + x) * cout;
            for (std::size_t co = 0; co < cout; ++co) g.bias[co] += urow[co];
            for (std::size_t dy = 0; dy < k; ++dy) {
                const auto iy = static_cast<std::ptrdiff_t>(y + dy) - pad;
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t dx = 0; dx < k; ++dx) {
                    const auto ix = static_cast<std::ptrdiff_t>(x + dx) - pad;
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                    const std::size_t ioff = (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin;
                    const double* irow = in + ioff;
                    double* girow = gi + ioff;
                    const std::size_t koff = (dy * k + dx) * cin * cout;
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                        const double* kr = ker + koff + ci * cout;
                        double* gkr = gk + koff + ci * cout;
                        const double v = irow[ci];
                        double acc = 0.0;
                        for (std::size_t co = 0; co < cout; ++co) {
                            acc += urow[co] * kr[co];
                            gkr[co] += v * urow[co];
                        }
                        girow[ci] += acc;
                    }
                }
            }
        }
    }
    return g;
}

MaxPoolResult maxpool2(const Tensor& input) {
    require_feature_map(input, "maxpool2 input");
    const std::size_t h = input.dim(0), w = input.dim(1), c = input.dim(2);
    if (h % 2 != 0 || w % 2 != 0) {
        throw ShapeError("maxpool2: spatial dims must be even, got " + shape_to_string(input.shape()));
    }
    MaxPoolResult r{Tensor({h / 2, w / 2, c}), {}};
    r.argmax.resize(r.output.size());
    for (std::size_t y = 0; y < h / 2; ++y) {
        for (std::size_t x = 0; x < w / 2; ++x) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                std::size_t best = ((2 * y) * w + 2 * x) * c + ch;
                for (std::size_t dy = 0; dy < 2; ++dy) {
                    for (std::size_t dx = 0; dx < 2; ++dx) {
                        const std::size_t idx = ((2 * y + dy) * w + 2 * x + dx) * c + ch;
                        if (input[idx] > input[best]) best = idx;
                    }
                }
                const std::size_t o = (y * (w / 2) + x) * c + ch;
                r.output[o] = input[best];
                r.argmax[o] = best;
            }
        }
    }
    return r;
}

Tensor maxpool2_backward(const Tensor& upstream, std::span<const std::size_t> argmax, const Shape& input_shape) {
    if (upstream.size() != argmax.size()) throw ShapeError("maxpool2_backward: argmax/upstream size mismatch");
    Tensor g(input_shape);
    for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += upstream[i];
    return g;
}

Tensor relu(const Tensor& input) {
    Tensor out(input);
    for (auto& v : out.storage()) v = v > 0.0 ? v : 0.0;
    return out;
}

Tensor relu_backward(const Tensor& input, const Tensor& upstream) {
    require_shape(upstream, input.shape(), "relu_backward upstream");
    Tensor g(input.shape());
    for (std::size_t i = 0; i < input.size(); ++i) g[i] = input[i] > 0.0 ? upstream[i] : 0.0;
    return g;
}

Tensor upsample_nearest(const Tensor& input, std::size_t factor) {
    if (factor == 0) throw ArgumentError("upsample_nearest: factor must be >= 1");
    require_feature_map(input, "upsample_nearest input");
    if (factor == 1) return input;
    const std::size_t h = input.dim(0), w = input.dim(1), c = input.dim(2);
    const std::size_t ow = w * factor;
    Tensor out({h * factor, ow, c});
    for (std::size_t y = 0; y < h * factor; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
            const double* src = input.data() + ((y / factor) * w + x / factor) * c;
            std::copy(src, src + c, out.data() + (y * ow + x) * c);
        }
    }
    return out;
}

Tensor upsample_nearest_backward(const Tensor& upstream, std::size_t factor) {
    if (factor == 0) throw ArgumentError("upsample_nearest_backward: factor must be >= 1");
    require_feature_map(upstream, "upsample_nearest_backward upstream");
    if (factor == 1) return upstream;
    const std::size_t oh = upstream.dim(0), ow = upstream.dim(1), c = upstream.dim(2);
    if (oh % factor != 0 || ow % factor != 0) {
        throw ShapeError("upsample_nearest_backward: " + shape_to_string(upstream.shape()) +
                         " not divisible by factor " + std::to_string(factor));
    }
    const std::size_t w = ow / factor;
    Tensor g({oh / factor, w, c});
    for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
            const double* src = upstream.data() + (y * ow + x) * c;
            double* dst = g.data() + ((y / factor) * w + x / factor) * c;
            for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch];
        }
    }
    return g;
}

Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    require_rank(input, 1, "dense input");
    require_rank(weight, 2, "dense weight");
    const std::size_t din = input.dim(0), dout = weight.dim(1);
    if (weight.dim(0) != din) {
        throw ShapeError("dense: input length " + std::to_string(din) + " does not match weight " +
                         shape_to_string(weight.shape()));
    }
    require_shape(bias, {dout}, "dense bias");
    Tensor out(bias);
    for (std::size_t i = 0; i < din; ++i) {
        const double v = input[i];
        const double* wr = weight.data() + i * dout;
        for (std::size_t j = 0; j < dout; ++j) out[j] += v * wr[j];
    }
    return out;
}

DenseGrads dense_backward(const Tensor& input, const Tensor& weight, const Tensor& upstream) {
    require_rank(input, 1, "dense_backward input");
    require_rank(weight, 2, "dense_backward weight");
    const std::size_t din = input.dim(0), dout = weight.dim(1);
    if (weight.dim(0) != din) throw ShapeError("dense_backward: weight/input mismatch");
    require_shape(upstream, {dout}, "dense_backward upstream");
    DenseGrads g{Tensor(weight.shape()), upstream, Tensor({din})};
    for (std::size_t i = 0; i < din; ++i) {
        const double v = input[i];
        const double* wr = weight.data() + i * dout;
        double* gw = g.weight.data() + i * dout;
        double acc = 0.0;
        for (std::size_t j = 0; j < dout; ++j) {
            gw[j] = v * upstream[j];
            acc += wr[j] * upstream[j];
        }
        g.input[i] = acc;
    }
    return g;
}

Tensor softmax2(const Tensor& logits) {
    require_feature_map(logits, "softmax2 logits");
    if (logits.dim(2) != 2) throw ShapeError("softmax2: expected 2 channels, got " + shape_to_string(logits.shape()));
    Tensor out(logits.shape());
    for (std::size_t p = 0; p < logits.size(); p += 2) {
        const double a = logits[p], b = logits[p + 1];
        const double m = std::max(a, b);
        const double ea = std::exp(a - m), eb = std::exp(b - m);
        const double s = ea + eb;
        out[p] = ea / s;
        out[p + 1] = eb / s;
    }
    return out;
}

Tensor softmax2_backward(const Tensor& probs, const Tensor& upstream) {
    require_shape(upstream, probs.shape(), "softmax2_backward upstream");
    Tensor g(probs.shape());
    for (std::size_t p = 0; p < probs.size(); p += 2) {
        const double dot = probs[p] * upstream[p] + probs[p + 1] * upstream[p + 1];
        g[p] = probs[p] * (upstream[p] - dot);
        g[p + 1] = probs[p + 1] * (upstream[p + 1] - dot);
    }
    return g;
}

std::vector<Tensor> batchnorm(std::span<const Tensor> batch, const Tensor& gamma, const Tensor& beta, Mode mode,
                              BatchNormStats& stats, BatchNormCache* cache) {
    if (batch.empty()) throw ArgumentError("batchnorm: empty batch");
    const Shape& shape = batch.front().shape();
    if (shape.empty()) throw ShapeError("batchnorm: scalar input");
    for (const auto& t : batch) require_shape(t, shape, "batchnorm batch element");
    const std::size_t c = shape.back();
    require_shape(gamma, {c}, "batchnorm gamma");
    require_shape(beta, {c}, "batchnorm beta");

    Tensor mean({c}), var({c});
    if (mode == Mode::Train) {
        const double count = static_cast<double>(batch.size() * (batch.front().size() / c));
        for (const auto& t : batch) {
            for (std::size_t i = 0; i < t.size(); ++i) mean[i % c] += t[i];
        }
        for (std::size_t ch = 0; ch < c; ++ch) mean[ch] /= count;
        for (const auto& t : batch) {
            for (std::size_t i = 0; i < t.size(); ++i) {
                const double d = t[i] - mean[i % c];
                var[i % c] += d * d;
            }
        }
        for (std::size_t ch = 0; ch < c; ++ch) var[ch] /= count;
        if (!stats.initialized) {
            stats.mean = mean;
            stats.var = var;
            stats.initialized = true;
        } else {
            for (std::size_t ch = 0; ch < c; ++ch) {
                stats.mean[ch] = kBatchNormMomentum * stats.mean[ch] + (1.0 - kBatchNormMomentum) * mean[ch];
                stats.var[ch] = kBatchNormMomentum * stats.var[ch] + (1.0 - kBatchNormMomentum) * var[ch];
            }
        }
    } else {
        if (!stats.initialized) throw StateError("batchnorm: inference requested before running statistics exist");
        require_shape(stats.mean, {c}, "batchnorm running mean");
        require_shape(stats.var, {c}, "batchnorm running var");
        mean = stats.mean;
        var = stats.var;
    }

    Tensor inv_std({c});
    for (std::size_t ch = 0; ch < c; ++ch) inv_std[ch] = 1.0 / std::sqrt(var[ch] + kBatchNormEpsilon);

    std::vector<Tensor> out;
    out.reserve(batch.size());
    if (cache) {
        cache->mode = mode;
        cache->normalized.clear();
        cache->normalized.reserve(batch.size());
        cache->inv_std = inv_std;
    }
    for (const auto& t : batch) {
        Tensor xhat(shape);
        Tensor y(shape);
        for (std::size_t i = 0; i < t.size(); ++i) {
            const std::size_t ch = i % c;
            xhat[i] = (t[i] - mean[ch]) * inv_std[ch];
            y[i] = gamma[ch] * xhat[i] + beta[ch];
        }
        out.push_back(std::move(y));
        if (cache) cache->normalized.push_back(std::move(xhat));
    }
    return out;
}

Tensor batchnorm(const Tensor& input, const Tensor& gamma, const Tensor& beta, Mode mode, BatchNormStats& stats,
                 BatchNormCache* cache) {
    auto out = batchnorm(std::span<const Tensor>(&input, 1), gamma, beta, mode, stats, cache);
    return std::move(out.front());
}

BatchNormGrads batchnorm_backward(std::span<const Tensor> upstream, const Tensor& gamma, const BatchNormCache& cache) {
    if (upstream.size() != cache.normalized.size()) throw ShapeError("batchnorm_backward: batch size mismatch");
    const std::size_t c = gamma.size();
    BatchNormGrads g{Tensor({c}), Tensor({c}), {}};
    for (std::size_t b = 0; b < upstream.size(); ++b) {
        require_shape(upstream[b], cache.normalized[b].shape(), "batchnorm_backward upstream");
        const Tensor& dy = upstream[b];
        const Tensor& xhat = cache.normalized[b];
        for (std::size_t i = 0; i < dy.size(); ++i) {
            g.beta[i % c] += dy[i];
            g.gamma[i % c] += dy[i] * xhat[i];
        }
    }
    g.inputs.reserve(upstream.size());
    if (cache.mode == Mode::Infer) {
        for (const auto& dy : upstream) {
            Tensor dx(dy.shape());
            for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * gamma[i % c] * cache.inv_std[i % c];
            g.inputs.push_back(std::move(dx));
        }
        return g;
    }
    // dx = gamma * inv_std / n * (n*dy - sum(dy) - xhat*sum(dy*xhat))
    const double count = static_cast<double>(upstream.size() * (upstream.front().size() / c));
    for (std::size_t b = 0; b < upstream.size(); ++b) {
        const Tensor& dy = upstream[b];
        const Tensor& xhat = cache.normalized[b];
        Tensor dx(dy.shape());
        for (std::size_t i = 0; i < dy.size(); ++i) {
            const std::size_t ch = i % c;
            dx[i] = gamma[ch] * cache.inv_std[ch] *
                    (dy[i] - g.beta[ch] / count - xhat[i] * g.gamma[ch] / count);
        }
        g.inputs.push_back(std::move(dx));
    }
    return g;
}

void accumulate(Tensor& into, const Tensor& delta) {
    if (into.empty()) {
        into = delta;
        return;
    }
    require_shape(delta, into.shape(), "accumulate");
    for (std::size_t i = 0; i < into.size(); ++i) into[i] += delta[i];
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require_feature_map(a, "concat_channels lhs");
    require_feature_map(b, "concat_channels rhs");
    if (a.dim(0) != b.dim(0) || a.dim(1) != b.dim(1)) {
        throw ShapeError("concat_channels: spatial mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
    }
    const std::size_t ca = a.dim(2), cb = b.dim(2), pixels = a.dim(0) * a.dim(1);
    Tensor out({a.dim(0), a.dim(1), ca + cb});
    for (std::size_t p = 0; p < pixels; ++p) {
        std::copy_n(a.data() + p * ca, ca, out.data() + p * (ca + cb));
        std::copy_n(b.data() + p * cb, cb, out.data() + p * (ca + cb) + ca);
    }
    return out;
}

std::pair<Tensor, Tensor> split_channels(const Tensor& t, std::size_t first_channels) {
    require_feature_map(t, "split_channels");
    const std::size_t c = t.dim(2);
    if (first_channels == 0 || first_channels >= c) throw ShapeError("split_channels: split point out of range");
    const std::size_t rest = c - first_channels, pixels = t.dim(0) * t.dim(1);
    Tensor a({t.dim(0), t.dim(1), first_channels}), b({t.dim(0), t.dim(1), rest});
    for (std::size_t p = 0; p < pixels; ++p) {
        std::copy_n(t.data() + p * c, first_channels, a.data() + p * first_channels);
        std::copy_n(t.data() + p * c + first_channels, rest, b.data() + p * rest);
    }
    return {std::move(a), std::move(b)};
}

}  // namespace floc
