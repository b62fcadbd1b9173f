#pragma once

#include <filesystem>
#include <span>

#include "radloc/filter.hpp"
#include "radloc/pipeline.hpp"

namespace radloc::tools {

/// Top-down overlay of an estimate and ground truth, equal axis scaling.
void plot_trajectories(std::span<const StampedPose> traj, std::span<const StampedPose> gt,
                       const std::filesystem::path& svg);

/// Translation error (m) and heading error (deg) against travelled distance.
void plot_errors(std::span<const StampedPose> traj, std::span<const StampedPose> gt, const std::filesystem::path& svg);

}  // namespace radloc::tools
