#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>

namespace floc {

inline constexpr double kFiniteDifferenceStep = 1e-5;

/// Relative error |a - n| / max(|a|, |n|, floor). The floor keeps
/// vanishing gradients from reporting huge relative errors caused by
/// round-off alone.
double relative_error(double analytic, double numeric, double floor = 1e-6);

struct GradCheckReport {
    std::size_t checked = 0;
    /// Components skipped because x - h and x + h straddle a kink.
    std::size_t kinks = 0;
    double max_relative_error = 0.0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    double tolerance = 0.0;
    bool passed = false;

    std::string summary() const;
};

struct GradCheckOptions {
    double step = kFiniteDifferenceStep;
    /// Denominator floor, multiplied by max(1, |loss|) at the unperturbed point.
    double floor = 1e-6;
    /// Check only these indices when non-empty.
    std::span<const std::size_t> indices = {};
    /// Fingerprint of the piecewise-linear regime (ReLU signs, pooling
    /// winners). When set, a component whose fingerprint differs at x - h and
    /// x + h is skipped: the central difference straddles a kink there.
    std::function<std::uint64_t()> regime = {};
};

/// Compares `analytic[i]` with the central difference of `loss` obtained by
/// perturbing `values[i]` in place. `values` is restored afterwards.
/// Throws NumericError if any analytic gradient is non-finite.
GradCheckReport grad_check(const std::function<double()>& loss, std::span<double> values,
                           std::span<const double> analytic, double tolerance, const GradCheckOptions& options = {});

}  // namespace floc
