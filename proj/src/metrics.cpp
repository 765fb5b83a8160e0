#include "mambaseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mambaseg::metrics {

std::vector<Overlap> overlap(const std::vector<std::uint8_t>& pred,
                             const std::vector<std::uint8_t>& gt, long n_classes) {
  if (pred.size() != gt.size()) throw DimensionError("overlap: mask sizes differ");
  if (n_classes < 2) throw ParameterError("overlap: need at least one foreground class");
  std::vector<long> np(static_cast<size_t>(n_classes), 0), ng = np, ni = np;
  for (size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] >= n_classes || gt[i] >= n_classes)
      throw ParameterError("overlap: label out of range");
    ++np[pred[i]];
    ++ng[gt[i]];
    if (pred[i] == gt[i]) ++ni[pred[i]];
  }
  std::vector<Overlap> out;
  out.reserve(static_cast<size_t>(n_classes - 1));
  for (long c = 1; c < n_classes; ++c) {
    Overlap o;
    long p = np[c], g = ng[c], i = ni[c];
    if (p + g > 0) {
      o.dice = 2.0 * static_cast<double>(i) / static_cast<double>(p + g);
      o.iou = static_cast<double>(i) / static_cast<double>(p + g - i);
    }
    out.push_back(o);
  }
  return out;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

/// Felzenszwalb-Huttenlocher lower envelope: out[p] = min_q (x[p]-x[q])^2 + f[q],
/// exact for arbitrary (sorted) sample positions x.
void edt1d(const std::vector<double>& f, const std::vector<double>& x, std::vector<double>& out) {
  long n = static_cast<long>(f.size());
  std::vector<long> v(static_cast<size_t>(n));
  std::vector<double> z(static_cast<size_t>(n) + 1);
  long k = 0;
  v[0] = 0;
  z[0] = -kInf;
  z[1] = kInf;
  for (long q = 1; q < n; ++q) {
    if (f[q] == kInf) continue;
    while (true) {
      long p = v[k];
      if (f[p] == kInf) {
        // An infinite parabola never bounds the envelope; replace it.
        if (k == 0) {
          v[0] = q;
          z[1] = kInf;
          break;
        }
        --k;
        continue;
      }
      double s = ((f[q] + x[q] * x[q]) - (f[p] + x[p] * x[p])) / (2.0 * (x[q] - x[p]));
      if (s <= z[k]) {
        --k;
        continue;
      }
      ++k;
      v[k] = q;
      z[k] = s;
      z[k + 1] = kInf;
      break;
    }
  }
  k = 0;
  for (long p = 0; p < n; ++p) {
    while (z[k + 1] < x[p]) ++k;
    long q = v[k];
    out[p] = f[q] == kInf ? kInf : (x[p] - x[q]) * (x[p] - x[q]) + f[q];
  }
}

/// Exact anisotropic squared EDT: dist2[i] = min over seeds of the physical
/// squared distance. dist2 arrives as 0 at seeds, +inf elsewhere.
void edt3d(std::vector<double>& dist2, long d, long h, long w, std::array<float, 3> sp) {
  auto pass = [&](long n, double spacing, long count, auto index) {
    std::vector<double> f(static_cast<size_t>(n)), x(static_cast<size_t>(n)),
        out(static_cast<size_t>(n));
    for (long i = 0; i < n; ++i) x[i] = static_cast<double>(i) * spacing;
    for (long line = 0; line < count; ++line) {
      bool any = false;
      for (long i = 0; i < n; ++i) {
        f[i] = dist2[index(line, i)];
        any = any || f[i] < kInf;
      }
      if (!any) continue;
      edt1d(f, x, out);
      for (long i = 0; i < n; ++i) dist2[index(line, i)] = out[i];
    }
  };
  // Along w, then h, then d; each pass folds one axis into the running min.
  pass(w, sp[2], d * h, [=](long line, long i) { return line * w + i; });
  pass(h, sp[1], d * w, [=](long line, long i) {
    long z = line / w, xw = line % w;
    return (z * h + i) * w + xw;
  });
  pass(d, sp[0], h * w, [=](long line, long i) { return i * h * w + line; });
}

std::vector<long> surface_voxels(const std::vector<std::uint8_t>& mask, long d, long h, long w,
                                 int cls) {
  auto in = [&](long z, long y, long x) {
    if (z < 0 || z >= d || y < 0 || y >= h || x < 0 || x >= w) return false;
    return mask[static_cast<size_t>((z * h + y) * w + x)] == cls;
  };
  std::vector<long> out;
  for (long z = 0; z < d; ++z)
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x) {
        if (!in(z, y, x)) continue;
        if (!in(z - 1, y, x) || !in(z + 1, y, x) || !in(z, y - 1, x) || !in(z, y + 1, x) ||
            !in(z, y, x - 1) || !in(z, y, x + 1))
          out.push_back((z * h + y) * w + x);
      }
  return out;
}

double percentile95(std::vector<double>& v) {
  std::sort(v.begin(), v.end());
  double idx = 0.95 * static_cast<double>(v.size() - 1);
  long i0 = static_cast<long>(std::floor(idx));
  long i1 = std::min<long>(i0 + 1, static_cast<long>(v.size()) - 1);
  double f = idx - static_cast<double>(i0);
  return (1.0 - f) * v[static_cast<size_t>(i0)] + f * v[static_cast<size_t>(i1)];
}

double directed95(const std::vector<long>& from, const std::vector<long>& to_surface, long d,
                  long h, long w, std::array<float, 3> sp) {
  std::vector<double> dist2(static_cast<size_t>(d * h * w), kInf);
  for (long i : to_surface) dist2[static_cast<size_t>(i)] = 0.0;
  edt3d(dist2, d, h, w, sp);
  std::vector<double> dists;
  dists.reserve(from.size());
  for (long i : from) dists.push_back(std::sqrt(dist2[static_cast<size_t>(i)]));
  return percentile95(dists);
}

}  // namespace

std::optional<double> hd95(const std::vector<std::uint8_t>& pred,
                           const std::vector<std::uint8_t>& gt, long d, long h, long w,
                           std::array<float, 3> spacing_mm, int cls) {
  if (pred.size() != gt.size() || static_cast<long>(pred.size()) != d * h * w)
    throw DimensionError("hd95: mask sizes do not match extents");
  for (float s : spacing_mm)
    if (!(s > 0.0f)) throw ParameterError("hd95: spacing must be positive");

  std::vector<long> sp_pred = surface_voxels(pred, d, h, w, cls);
  std::vector<long> sp_gt = surface_voxels(gt, d, h, w, cls);
  if (sp_pred.empty() || sp_gt.empty()) return std::nullopt;

  double fwd = directed95(sp_pred, sp_gt, d, h, w, spacing_mm);
  double bwd = directed95(sp_gt, sp_pred, d, h, w, spacing_mm);
  return std::max(fwd, bwd);
}

}  // namespace mambaseg::metrics
