#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "floc/gradcheck.hpp"
#include "floc/network.hpp"

namespace floc {

inline constexpr double kLayerTolerance = 1e-4;
inline constexpr double kEndToEndTolerance = 1e-3;
/// Gradients that vanish structurally (a bias ahead of batch norm) leave only
/// rounding noise of order 1e-10 in the central difference.
inline constexpr double kSuiteFloor = 1e-5;

struct GradSuiteEntry {
    std::string name;
    GradCheckReport report;
};

/// A 16x16 network small enough to check every parameter numerically.
NetworkConfig toy_network_config();

/// Finite-difference checks of every layer primitive, the LSTM over a
/// 3-step sequence, each network branch on the toy configuration and, when
/// `end_to_end` is set, three random parameters of the desk profile.
std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seed, bool end_to_end = true);

}  // namespace floc
