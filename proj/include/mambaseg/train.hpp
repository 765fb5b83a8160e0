#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mambaseg/config.hpp"
#include "mambaseg/data.hpp"
#include "mambaseg/metrics.hpp"
#include "mambaseg/models.hpp"
#include "mambaseg/optim.hpp"

namespace mambaseg::train {

/// One training example: a model input and its voxel labels.
struct Sample {
  Tensor input;  // {1, 1, H, W} (2D slice) or {1, D, H, W} (volume patch)
  std::vector<std::uint8_t> labels;
};

/// Volume patches -> samples. With slices=true each depth slice becomes an
/// independent 2D sample (optionally keeping only slices that contain
/// foreground); otherwise one sample per patch.
std::vector<Sample> to_samples(const std::vector<data::LabeledVolume>& patches, bool slices,
                               bool fg_slices_only = true);

struct Dataset {
  std::vector<Sample> train;                  // patches or slices per model kind
  std::vector<data::LabeledVolume> eval_vols;  // held out, at model input extent
};

/// Assembles the training set and held-out volumes a RunConfig describes:
/// phantoms are generated (or read from data.dir), percentile-normalized,
/// cropped into label-bearing patches, optionally augmented, and converted
/// to samples (2D slices for dual_branch, whole patches otherwise).
/// Evaluation phantoms are generated at the model input extent with
/// proportionally scaled anatomy, from a disjoint seed stream.
Dataset build_dataset(const config::RunConfig& rc);

struct StepResult {
  double loss = 0.0;
  double grad_norm = 0.0;  // pre-clip global norm
  float lr = 0.0f;
};

/// One optimizer step over set[idx...]: single-tape batch-mean loss,
/// backward, global-norm clip, AdamW update at the scheduled rate.
/// A non-finite loss aborts the step (NumericError) without updating.
StepResult train_step(const models::Model& m, const std::vector<Sample>& set,
                      const std::vector<long>& idx, optim::AdamW& opt,
                      const optim::TrainConfig& cfg, long step);

/// Voxel-wise argmax class prediction; dual_branch models run slice by slice.
std::vector<std::uint8_t> predict_labels(const models::Model& m, const data::LabeledVolume& vol);

struct EvalClass {
  double dice = 0.0;
  double iou = 0.0;
  std::optional<double> hd95_mm;  // empty when undefined for every volume
};

struct EvalReport {
  std::vector<EvalClass> per_class;  // foreground classes 1..K-1
  double mean_dice = 0.0;
  double mean_iou = 0.0;
  std::optional<double> mean_hd95_mm;
};

/// Averages per-volume, per-foreground-class metrics over the given volumes.
/// HD95 averages skip undefined entries.
EvalReport evaluate(const models::Model& m, const std::vector<data::LabeledVolume>& vols);

/// Fixed-header CSV (class,dice,iou,hd95_mm) with a trailing mean row.
std::string eval_csv(const EvalReport& r);

struct TrainStats {
  long steps = 0;
  double final_loss = 0.0;
  double best_dice = -1.0;
  long best_epoch = -1;
};

/// Epoch loop with per-epoch shuffling, periodic evaluation, and
/// best-mean-Dice checkpointing (when ckpt_path is nonempty). The schedule's
/// total_steps is derived from the epoch/batch layout.
TrainStats run_training(models::Model& m, const std::vector<Sample>& train_set,
                        const std::vector<data::LabeledVolume>& eval_vols,
                        optim::TrainConfig cfg, long epochs, long eval_every,
                        const std::string& ckpt_path, std::ostream* log);

}  // namespace mambaseg::train
