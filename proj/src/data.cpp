#include "mambaseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

namespace mambaseg::data {

namespace {

float sample(Range r, std::mt19937_64& rng) {
  if (r.hi < r.lo) throw ParameterError("phantom: range with hi < lo");
  return std::uniform_real_distribution<float>(r.lo, r.hi)(rng);
}

struct Ellipsoid {
  float cd, ch, cw;  // center
  float rd, rh, rw;  // radii

  bool contains(long z, long y, long x) const {
    float a = (static_cast<float>(z) - cd) / rd;
    float b = (static_cast<float>(y) - ch) / rh;
    float c = (static_cast<float>(x) - cw) / rw;
    return a * a + b * b + c * c <= 1.0f;
  }
};

void check_fits(const Ellipsoid& e, long d, long h, long w, const char* what) {
  if (e.cd - e.rd < -0.5f || e.cd + e.rd > static_cast<float>(d) - 0.5f ||
      e.ch - e.rh < -0.5f || e.ch + e.rh > static_cast<float>(h) - 0.5f ||
      e.cw - e.rw < -0.5f || e.cw + e.rw > static_cast<float>(w) - 0.5f)
    throw ParameterError(std::string("phantom: ") + what + " does not fit inside the volume");
}

}  // namespace

namespace {

LabeledVolume generate_phantom_once(const PhantomSpec& spec, std::mt19937_64& rng) {
  float cd = static_cast<float>(spec.d) / 2.0f +
             std::uniform_real_distribution<float>(-spec.jitter_d, spec.jitter_d)(rng);
  float ch = static_cast<float>(spec.h) / 2.0f +
             std::uniform_real_distribution<float>(-spec.jitter_hw, spec.jitter_hw)(rng);
  float cw = static_cast<float>(spec.w) / 2.0f +
             std::uniform_real_distribution<float>(-spec.jitter_hw, spec.jitter_hw)(rng);

  Ellipsoid lv{cd, ch, cw, sample(spec.lv_rd, rng), sample(spec.lv_rh, rng),
               sample(spec.lv_rw, rng)};
  float gd = sample(spec.gap_d, rng), gh = sample(spec.gap_hw, rng), gw = sample(spec.gap_hw, rng);
  Ellipsoid shell{cd, ch, cw, lv.rd + gd, lv.rh + gh, lv.rw + gw};

  Ellipsoid rv{cd, ch, cw, sample(spec.rv_rd, rng), sample(spec.rv_rh, rng),
               sample(spec.rv_rw, rng)};
  rv.cw = cw + (shell.rw + rv.rw) * sample(spec.rv_reach, rng);

  check_fits(shell, spec.d, spec.h, spec.w, "myo shell");
  check_fits(rv, spec.d, spec.h, spec.w, "rv pouch");

  LabeledVolume out;
  out.spacing = spec.spacing;
  out.image = Tensor::zeros({1, spec.d, spec.h, spec.w});
  out.labels.assign(static_cast<size_t>(spec.d * spec.h * spec.w), 0);

  long counts[4] = {0, 0, 0, 0};
  std::normal_distribution<float> noise(0.0f, spec.noise_sigma);
  float* img = out.image.data();
  long i = 0;
  for (long z = 0; z < spec.d; ++z)
    for (long y = 0; y < spec.h; ++y)
      for (long x = 0; x < spec.w; ++x, ++i) {
        std::uint8_t lab = 0;
        float mean = spec.mean_bg;
        if (shell.contains(z, y, x)) {
          lab = lv.contains(z, y, x) ? 3 : 2;
          mean = lab == 3 ? spec.mean_lv : spec.mean_myo;
        } else if (rv.contains(z, y, x)) {
          lab = 1;
          mean = spec.mean_rv;
        }
        out.labels[static_cast<size_t>(i)] = lab;
        ++counts[lab];
        img[i] = std::clamp(mean + noise(rng), 0.0f, 1.0f);
      }

  for (int c = 0; c < 4; ++c)
    if (counts[c] == 0)
      throw SamplingError("phantom: class " + std::to_string(c) + " received no voxels");
  return out;
}

}  // namespace

LabeledVolume generate_phantom(const PhantomSpec& spec, unsigned seed) {
  if (spec.d <= 0 || spec.h <= 0 || spec.w <= 0)
    throw ParameterError("phantom: extents must be positive");
  // A draw near the top of the size ranges can fail the fit or class-coverage
  // checks at small extents; redraw from the same seeded stream so results
  // stay a pure function of (spec, seed). Specs that can never fit still fail.
  std::mt19937_64 rng(seed);
  std::exception_ptr last;
  for (int attempt = 0; attempt < 64; ++attempt) {
    try {
      return generate_phantom_once(spec, rng);
    } catch (const ParameterError&) {
      last = std::current_exception();
    } catch (const SamplingError&) {
      last = std::current_exception();
    }
  }
  std::rethrow_exception(last);
}

PhantomSpec scaled_spec(long d, long h, long w, float spacing) {
  if (d <= 0 || h <= 0 || w <= 0) throw ParameterError("phantom: extents must be positive");
  PhantomSpec s;
  float fd = static_cast<float>(d) / static_cast<float>(s.d);
  float fh = static_cast<float>(h) / static_cast<float>(s.h);
  float fw = static_cast<float>(w) / static_cast<float>(s.w);
  auto mul = [](Range& r, float f) { r = Range{r.lo * f, r.hi * f}; };
  mul(s.lv_rd, fd);
  mul(s.lv_rh, fh);
  mul(s.lv_rw, fw);
  mul(s.gap_d, fd);
  mul(s.gap_hw, std::min(fh, fw));
  // A shell thinner than one voxel along an axis could leak; keep the gap
  // strictly above one voxel so the closed-shell guarantee survives scaling.
  auto floor_gap = [](Range& r) {
    r.lo = std::max(r.lo, 1.05f);
    r.hi = std::max(r.hi, r.lo);
  };
  floor_gap(s.gap_d);
  floor_gap(s.gap_hw);
  mul(s.rv_rd, fd);
  mul(s.rv_rh, fh);
  mul(s.rv_rw, fw);
  s.jitter_d *= fd;
  s.jitter_hw *= std::min(fh, fw);
  s.d = d;
  s.h = h;
  s.w = w;
  s.spacing = {spacing, spacing, spacing};
  return s;
}

Tensor normalize_percentile(const Tensor& vol, float lo, float hi) {
  if (!vol.defined() || vol.numel() == 0) throw ParameterError("normalize: empty volume");
  if (!vol.all_finite()) throw ParameterError("normalize: non-finite input");
  if (lo < 0.0f || hi > 100.0f || lo >= hi)
    throw ParameterError("normalize: need 0 <= lo < hi <= 100");

  std::vector<float> sorted(vol.data(), vol.data() + vol.numel());
  std::sort(sorted.begin(), sorted.end());
  auto percentile = [&](float p) {
    double idx = static_cast<double>(p) / 100.0 * static_cast<double>(sorted.size() - 1);
    long i0 = static_cast<long>(std::floor(idx));
    long i1 = std::min<long>(i0 + 1, static_cast<long>(sorted.size()) - 1);
    double f = idx - static_cast<double>(i0);
    return (1.0 - f) * sorted[static_cast<size_t>(i0)] + f * sorted[static_cast<size_t>(i1)];
  };
  double v_lo = percentile(lo), v_hi = percentile(hi);

  Tensor out = Tensor::zeros(vol.shape());
  if (v_hi <= v_lo) return out;  // degenerate: constant (or near) input
  double inv = 1.0 / (v_hi - v_lo);
  for (long i = 0; i < vol.numel(); ++i)
    out.data()[i] = std::clamp(static_cast<float>((vol.at(i) - v_lo) * inv), 0.0f, 1.0f);
  return out;
}

namespace {

LabeledVolume crop(const LabeledVolume& lv, long z0, long y0, long x0, long pd, long ph, long pw) {
  LabeledVolume out;
  out.spacing = lv.spacing;
  out.image = Tensor::zeros({1, pd, ph, pw});
  out.labels.assign(static_cast<size_t>(pd * ph * pw), 0);
  const float* src = lv.image.data();
  float* dst = out.image.data();
  long h = lv.h(), w = lv.w();
  for (long z = 0; z < pd; ++z)
    for (long y = 0; y < ph; ++y) {
      long s = ((z0 + z) * h + (y0 + y)) * w + x0;
      long t = (z * ph + y) * pw;
      std::copy(src + s, src + s + pw, dst + t);
      std::copy(lv.labels.begin() + s, lv.labels.begin() + s + pw, out.labels.begin() + t);
    }
  return out;
}

bool has_foreground(const LabeledVolume& lv) {
  return std::any_of(lv.labels.begin(), lv.labels.end(), [](std::uint8_t l) { return l != 0; });
}

}  // namespace

std::vector<LabeledVolume> extract_patches(const LabeledVolume& lv, long pd, long ph, long pw,
                                           long n, bool require_label, unsigned seed) {
  if (pd <= 0 || ph <= 0 || pw <= 0 || n < 0)
    throw ParameterError("extract_patches: extents and count must be positive");
  if (pd > lv.d() || ph > lv.h() || pw > lv.w())
    throw ParameterError("extract_patches: patch exceeds volume extents");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<long> dz(0, lv.d() - pd), dy(0, lv.h() - ph), dx(0, lv.w() - pw);

  constexpr int kMaxRetries = 1000;
  std::vector<LabeledVolume> out;
  out.reserve(static_cast<size_t>(n));
  for (long i = 0; i < n; ++i) {
    bool accepted = false;
    for (int attempt = 0; attempt < kMaxRetries && !accepted; ++attempt) {
      LabeledVolume p = crop(lv, dz(rng), dy(rng), dx(rng), pd, ph, pw);
      if (!require_label || has_foreground(p)) {
        out.push_back(std::move(p));
        accepted = true;
      }
    }
    if (!accepted)
      throw SamplingError("extract_patches: no labeled crop found after " +
                          std::to_string(kMaxRetries) + " attempts");
  }
  return out;
}

namespace {

/// In-plane index remap: for each output (y, x), the source (y, x).
LabeledVolume remap_plane(const LabeledVolume& lv, long oh, long ow,
                          const std::function<std::pair<long, long>(long, long)>& src_of) {
  LabeledVolume out;
  out.spacing = lv.spacing;
  out.image = Tensor::zeros({1, lv.d(), oh, ow});
  out.labels.assign(static_cast<size_t>(lv.d() * oh * ow), 0);
  long h = lv.h(), w = lv.w();
  for (long z = 0; z < lv.d(); ++z)
    for (long y = 0; y < oh; ++y)
      for (long x = 0; x < ow; ++x) {
        auto [sy, sx] = src_of(y, x);
        long s = (z * h + sy) * w + sx;
        long t = (z * oh + y) * ow + x;
        out.image.data()[t] = lv.image.at(s);
        out.labels[static_cast<size_t>(t)] = lv.labels[static_cast<size_t>(s)];
      }
  return out;
}

}  // namespace

LabeledVolume augment_flip_rot(const LabeledVolume& lv, std::mt19937_64& rng) {
  bool flip_h = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
  bool flip_w = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
  int quarter = lv.h() == lv.w() ? std::uniform_int_distribution<int>(0, 3)(rng) : 0;

  long h = lv.h(), w = lv.w();
  auto flipped = [&](long y, long x) {
    return std::pair<long, long>{flip_h ? h - 1 - y : y, flip_w ? w - 1 - x : x};
  };
  LabeledVolume out = remap_plane(lv, h, w, flipped);
  for (int q = 0; q < quarter; ++q) {
    // 90 degrees clockwise: out(y, x) <- in(h-1-x, y).
    long ih = out.h();
    out = remap_plane(out, out.w(), ih,
                      [ih](long y, long x) { return std::pair<long, long>{ih - 1 - x, y}; });
  }
  return out;
}

// ---- volume file I/O ----------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'M', 'S', 'V', '1'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError("volume: truncated file");
  return v;
}

}  // namespace

void write_volume(const std::string& path, const LabeledVolume& lv) {
  if (lv.image.ndim() != 4 || lv.image.dim(0) != 1)
    throw ParameterError("write_volume: image must be {1, D, H, W}");
  bool has_labels = !lv.labels.empty();
  if (has_labels && static_cast<long>(lv.labels.size()) != lv.voxels())
    throw ParameterError("write_volume: label count does not match extents");

  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("volume: cannot open for writing: " + path);
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(lv.d()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(lv.h()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(lv.w()));
  for (float s : lv.spacing) put<float>(os, s);
  put<std::uint8_t>(os, has_labels ? 1 : 0);
  os.write(reinterpret_cast<const char*>(lv.image.data()),
           static_cast<std::streamsize>(sizeof(float) * lv.voxels()));
  if (has_labels)
    os.write(reinterpret_cast<const char*>(lv.labels.data()),
             static_cast<std::streamsize>(lv.labels.size()));
  if (!os) throw FormatError("volume: write failed: " + path);
}

LabeledVolume read_volume(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("volume: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("volume: bad magic");
  if (get<std::uint32_t>(is) != kVersion) throw FormatError("volume: unsupported version");
  long d = get<std::uint32_t>(is), h = get<std::uint32_t>(is), w = get<std::uint32_t>(is);
  if (d <= 0 || h <= 0 || w <= 0) throw FormatError("volume: bad extents");

  LabeledVolume lv;
  for (float& s : lv.spacing) {
    s = get<float>(is);
    if (!(s > 0.0f)) throw FormatError("volume: non-positive spacing");
  }
  bool has_labels = get<std::uint8_t>(is) != 0;

  // Validate the payload against the header before reading it.
  auto data_start = is.tellg();
  is.seekg(0, std::ios::end);
  auto remaining = static_cast<long long>(is.tellg() - data_start);
  long long expected = static_cast<long long>(d) * h * w * (4 + (has_labels ? 1 : 0));
  if (remaining != expected) throw FormatError("volume: payload length does not match header");
  is.seekg(data_start);

  lv.image = Tensor::zeros({1, d, h, w});
  is.read(reinterpret_cast<char*>(lv.image.data()),
          static_cast<std::streamsize>(sizeof(float) * d * h * w));
  if (has_labels) {
    lv.labels.assign(static_cast<size_t>(d * h * w), 0);
    is.read(reinterpret_cast<char*>(lv.labels.data()),
            static_cast<std::streamsize>(lv.labels.size()));
  }
  if (!is) throw FormatError("volume: truncated payload");
  return lv;
}

}  // namespace mambaseg::data
