#include "mambaseg/losses.hpp"

namespace mambaseg::losses {

Tensor dice_ce(const Tensor& logits, const std::vector<std::uint8_t>& labels) {
  Tensor rows;  // [T, K]
  if (logits.ndim() == 2) {
    rows = logits;
  } else if (logits.ndim() == 4) {
    long k = logits.dim(0), t = logits.numel() / k;
    rows = ops::transpose(ops::reshape(logits, {k, t}));
  } else {
    throw DimensionError("dice_ce: logits must be [T, K] or {K, D, H, W}");
  }
  long t = rows.dim(0), k = rows.dim(1);
  if (static_cast<long>(labels.size()) != t)
    throw DimensionError("dice_ce: label count does not match voxel count");

  std::vector<int> lab(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= k) throw ParameterError("dice_ce: label out of range");
    lab[i] = labels[i];
  }

  Tensor ce = ops::cross_entropy(rows, lab);
  Tensor dice = ops::soft_dice(ops::softmax_lastdim(rows), lab);
  return ops::add(dice, ce);
}

}  // namespace mambaseg::losses
