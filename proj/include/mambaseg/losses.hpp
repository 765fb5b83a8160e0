#pragma once

#include <cstdint>
#include <vector>

#include "mambaseg/ops.hpp"

namespace mambaseg::losses {

/// Combined soft-Dice + cross-entropy segmentation loss.
/// logits: {K, D, H, W} class-major volume (or [T, K] rows); labels: one
/// class id per voxel in depth-major order. Differentiable in logits.
Tensor dice_ce(const Tensor& logits, const std::vector<std::uint8_t>& labels);

}  // namespace mambaseg::losses
