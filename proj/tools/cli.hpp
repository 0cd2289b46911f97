#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "floc/network.hpp"
#include "floc/training.hpp"

namespace floc::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

struct RunConfig {
    std::string profile = "desk";
    NetworkConfig network = NetworkConfig::desk();
    TrainConfig train = TrainConfig::desk();
    std::uint64_t seed = 0;
    std::size_t jobs = 1;
    std::optional<std::filesystem::path> checkpoint;
    std::filesystem::path out = ".";

    nlohmann::json to_json() const;
};

/// Profile defaults, then the JSON file's "network"/"train" sections, then
/// flags given on the command line.
RunConfig resolve_config(const std::optional<std::filesystem::path>& config_file, const std::optional<std::string>& profile,
                         const std::optional<std::uint64_t>& seed);

/// Probability maps: raw little-endian f64 [H, W] plus "<path>.json".
void write_probability_map(const std::filesystem::path& path, const Tensor& manipulation, const nlohmann::json& meta);
Tensor read_probability_map(const std::filesystem::path& path);

/// Manifest paths are relative to the manifest's directory.
std::filesystem::path resolve_path(const std::filesystem::path& manifest, const std::string& entry);

/// Runs fn(0..n-1) on up to `jobs` threads; rethrows the first failure.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn);

/// Parses and executes one subcommand. Never throws.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace floc::cli
