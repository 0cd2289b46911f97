#include "floc/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "floc/tensor.hpp"

namespace floc {

double relative_error(double analytic, double numeric, double floor) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

std::string GradCheckReport::summary() const {
    std::ostringstream os;
    os << (passed ? "PASS" : "FAIL") << " checked=" << checked << " max_rel_err=" << max_relative_error
       << " kinks=" << kinks << " tol=" << tolerance << " worst_index=" << worst_index << " analytic=" << worst_analytic
       << " numeric=" << worst_numeric;
    return os.str();
}

GradCheckReport grad_check(const std::function<double()>& loss, std::span<double> values,
                           std::span<const double> analytic, double tolerance, const GradCheckOptions& options) {
    if (tolerance <= 0.0) throw ArgumentError("grad_check: tolerance must be positive");
    if (values.size() != analytic.size()) throw ShapeError("grad_check: values/analytic length mismatch");
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        if (!std::isfinite(analytic[i])) {
            throw NumericError("grad_check: non-finite analytic gradient at index " + std::to_string(i));
        }
    }

    GradCheckReport report;
    report.tolerance = tolerance;
    // Rounding in the loss grows with its magnitude, so the floor does too.
    const double floor = options.floor * std::max(1.0, std::abs(loss()));
    auto check_one = [&](std::size_t i) {
        const double saved = values[i];
        values[i] = saved + options.step;
        const double plus = loss();
        const std::uint64_t regime_plus = options.regime ? options.regime() : 0;
        values[i] = saved - options.step;
        const double minus = loss();
        const std::uint64_t regime_minus = options.regime ? options.regime() : 0;
        values[i] = saved;
        if (regime_plus != regime_minus) {
            ++report.kinks;
            return;
        }
        const double numeric = (plus - minus) / (2.0 * options.step);
        const double err = relative_error(analytic[i], numeric, floor);
        if (!std::isfinite(err) || err > report.max_relative_error || report.checked == 0) {
            report.max_relative_error = std::isfinite(err) ? err : INFINITY;
            report.worst_index = i;
            report.worst_analytic = analytic[i];
            report.worst_numeric = numeric;
        }
        ++report.checked;
    };
    if (options.indices.empty()) {
        for (std::size_t i = 0; i < values.size(); ++i) check_one(i);
    } else {
        for (auto i : options.indices) {
            if (i >= values.size()) throw ArgumentError("grad_check: index out of range");
            check_one(i);
        }
    }
    report.passed = report.checked > 0 && report.max_relative_error < tolerance;
    return report;
}

}  // namespace floc
