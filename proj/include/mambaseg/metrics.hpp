#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "mambaseg/errors.hpp"

namespace mambaseg::metrics {

struct Overlap {
  double dice = 1.0;
  double iou = 1.0;
};

/// Per-foreground-class (1..n_classes-1) Dice and IoU. A class empty in both
/// masks scores 1 by convention.
std::vector<Overlap> overlap(const std::vector<std::uint8_t>& pred,
                             const std::vector<std::uint8_t>& gt, long n_classes);

/// 95th-percentile symmetric surface distance in millimeters for one class.
/// Surfaces are 6-connectivity boundary voxels (volume borders count as
/// outside); distances are exact Euclidean nearest-neighbor, spacing-scaled;
/// the percentile interpolates linearly between order statistics and the
/// result is the max over both directions. Empty mask on either side yields
/// nullopt (undefined), never an error.
std::optional<double> hd95(const std::vector<std::uint8_t>& pred,
                           const std::vector<std::uint8_t>& gt, long d, long h, long w,
                           std::array<float, 3> spacing_mm, int cls);

}  // namespace mambaseg::metrics
