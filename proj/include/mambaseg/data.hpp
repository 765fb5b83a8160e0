#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mambaseg/tensor.hpp"

namespace mambaseg::data {

/// A volume with voxel-wise class labels:
///   0 background, 1 RV-like pouch, 2 Myo-like shell, 3 LV-like core.
struct LabeledVolume {
  Tensor image;                 // {1, D, H, W}, values in [0, 1]
  std::vector<std::uint8_t> labels;  // D*H*W, depth-major
  std::array<float, 3> spacing{1.5f, 1.5f, 1.5f};  // mm per voxel (d, h, w)

  long d() const { return image.dim(1); }
  long h() const { return image.dim(2); }
  long w() const { return image.dim(3); }
  long voxels() const { return d() * h() * w(); }
};

struct Range {
  float lo = 0.0f, hi = 0.0f;
};

/// Geometry and appearance ranges for the synthetic cardiac-like phantom:
/// an LV-like ellipsoid inside a closed Myo-like ellipsoidal shell, with an
/// RV-like pouch hugging the shell from outside. All geometry is in voxel
/// units; intensities are per-class means with additive Gaussian noise.
struct PhantomSpec {
  long d = 20, h = 80, w = 80;
  std::array<float, 3> spacing{1.5f, 1.5f, 1.5f};

  Range lv_rd{3.0f, 4.5f};    // LV radii per axis
  Range lv_rh{9.0f, 14.0f};
  Range lv_rw{9.0f, 14.0f};
  Range gap_d{2.0f, 3.0f};    // shell thickness added on top of LV radii
  Range gap_hw{3.0f, 5.0f};
  Range rv_rd{2.5f, 4.0f};    // RV pouch radii
  Range rv_rh{7.0f, 11.0f};
  Range rv_rw{5.0f, 8.0f};
  Range rv_reach{0.55f, 0.70f};  // RV center offset as a fraction of
                                 // (shell_rw + rv_rw), along +w
  float jitter_d = 0.5f;      // center jitter around the volume center
  float jitter_hw = 3.0f;

  float mean_bg = 0.20f, mean_rv = 0.80f, mean_myo = 0.45f, mean_lv = 0.85f;
  float noise_sigma = 0.05f;

  unsigned seed = 0;
};

/// Deterministic per (spec, seed). Every class is guaranteed at least one
/// voxel and the Myo-like shell closes around the LV-like core.
LabeledVolume generate_phantom(const PhantomSpec& spec, unsigned seed);

/// Default spec with its geometry ranges rescaled from the reference
/// 20x80x80 grid to (d, h, w), so phantoms can be generated directly at a
/// model's input extent with proportional anatomy.
PhantomSpec scaled_spec(long d, long h, long w, float spacing = 1.5f);

/// Maps the lo-th percentile to 0 and the hi-th to 1 (linear-interpolated
/// order statistics), then clamps to [0, 1]. A constant input maps to zeros.
Tensor normalize_percentile(const Tensor& vol, float lo = 0.5f, float hi = 99.5f);

/// n random crops of extent (pd, ph, pw), each fully inside the volume.
/// With require_label, every patch contains at least one foreground voxel
/// (rejection sampling; persistent failure raises SamplingError).
std::vector<LabeledVolume> extract_patches(const LabeledVolume& lv, long pd, long ph, long pw,
                                           long n, bool require_label, unsigned seed);

/// Random in-plane flips and quarter-turns (image and labels together).
/// Rotations require h == w; flips apply to any extent.
LabeledVolume augment_flip_rot(const LabeledVolume& lv, std::mt19937_64& rng);

/// Bit-exact volume file ("MSV1"): magic, u32 version, u32 D/H/W, f32
/// spacing triple, u8 has_labels, f32 image payload, u8 label payload.
void write_volume(const std::string& path, const LabeledVolume& lv);
LabeledVolume read_volume(const std::string& path);

}  // namespace mambaseg::data
