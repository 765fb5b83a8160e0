#include "mambaseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>
#include <random>
#include <sstream>

#include "mambaseg/losses.hpp"

namespace mambaseg::train {

Dataset build_dataset(const config::RunConfig& rc) {
  const auto& dc = rc.data;
  const auto& mc = rc.model;

  std::vector<data::LabeledVolume> pool;
  if (!dc.dir.empty()) {
    std::vector<std::string> paths;
    for (const auto& e : std::filesystem::directory_iterator(dc.dir))
      if (e.is_regular_file() && e.path().extension() == ".msv")
        paths.push_back(e.path().string());
    if (paths.empty()) throw ConfigError("data: no .msv volumes in " + dc.dir);
    std::sort(paths.begin(), paths.end());
    for (const auto& p : paths) pool.push_back(data::read_volume(p));
  } else {
    data::PhantomSpec spec = data::scaled_spec(dc.phantom_d, dc.phantom_h, dc.phantom_w,
                                               dc.spacing);
    for (long i = 0; i < dc.train_phantoms; ++i)
      pool.push_back(data::generate_phantom(spec, dc.seed + static_cast<unsigned>(i)));
  }
  for (auto& v : pool) v.image = data::normalize_percentile(v.image);

  // Round-robin label-bearing crops until the requested patch count.
  std::vector<data::LabeledVolume> patches;
  patches.reserve(static_cast<size_t>(dc.train_patches));
  long per = (dc.train_patches + static_cast<long>(pool.size()) - 1) /
             static_cast<long>(pool.size());
  for (size_t i = 0; i < pool.size() && static_cast<long>(patches.size()) < dc.train_patches;
       ++i) {
    long want = std::min<long>(per, dc.train_patches - static_cast<long>(patches.size()));
    auto got = data::extract_patches(pool[i], mc.in_d, mc.img, mc.img, want, true,
                                     dc.seed * 7919u + static_cast<unsigned>(i));
    for (auto& p : got) patches.push_back(std::move(p));
  }
  if (dc.augment) {
    std::mt19937_64 rng(dc.seed ^ 0x5eedf00dULL);
    for (auto& p : patches) p = data::augment_flip_rot(p, rng);
  }

  Dataset ds;
  ds.train = to_samples(patches, !mc.is_adapter(), true);

  data::PhantomSpec evs = data::scaled_spec(mc.in_d, mc.img, mc.img, dc.spacing);
  for (long i = 0; i < dc.eval_phantoms; ++i) {
    auto v = data::generate_phantom(evs, dc.seed + 100000u + static_cast<unsigned>(i));
    v.image = data::normalize_percentile(v.image);
    ds.eval_vols.push_back(std::move(v));
  }
  return ds;
}

std::vector<Sample> to_samples(const std::vector<data::LabeledVolume>& patches, bool slices,
                               bool fg_slices_only) {
  std::vector<Sample> out;
  for (const auto& p : patches) {
    if (!slices) {
      Sample s;
      s.input = p.image;
      s.labels = p.labels;
      out.push_back(std::move(s));
      continue;
    }
    long h = p.h(), w = p.w(), plane = h * w;
    for (long z = 0; z < p.d(); ++z) {
      auto first = p.labels.begin() + z * plane;
      if (fg_slices_only && std::all_of(first, first + plane, [](std::uint8_t l) { return l == 0; }))
        continue;
      Sample s;
      s.input = Tensor::zeros({1, 1, h, w});
      std::memcpy(s.input.data(), p.image.data() + z * plane, sizeof(float) * plane);
      s.labels.assign(first, first + plane);
      out.push_back(std::move(s));
    }
  }
  return out;
}

StepResult train_step(const models::Model& m, const std::vector<Sample>& set,
                      const std::vector<long>& idx, optim::AdamW& opt,
                      const optim::TrainConfig& cfg, long step) {
  if (idx.empty()) throw ParameterError("train_step: empty batch");
  StepResult res;
  GradTape tape;
  Tensor loss;
  {
    GradTape::Scope scope(tape);
    for (long i : idx) {
      const Sample& s = set[static_cast<size_t>(i)];
      Tensor li = losses::dice_ce(m.forward(s.input), s.labels);
      loss = loss.defined() ? ops::add(loss, li) : li;
    }
    if (idx.size() > 1) loss = ops::scale(loss, 1.0f / static_cast<float>(idx.size()));
  }
  if (!loss.all_finite()) throw NumericError("train_step: non-finite loss, step aborted");
  res.loss = loss.at(0);
  tape.backward(loss);

  res.grad_norm = optim::clip_global_norm(opt.params(), cfg.clip_norm);
  res.lr = optim::lr_at(cfg, std::min(step + 1, cfg.total_steps));
  opt.step(res.lr);
  return res;
}

namespace {

std::vector<std::uint8_t> argmax_classes(const Tensor& logits) {
  long k = logits.dim(0), t = logits.numel() / k;
  std::vector<std::uint8_t> out(static_cast<size_t>(t), 0);
  ConstMatView m = logits.mat(k, t);
  for (long i = 0; i < t; ++i) {
    long best;
    m.col(i).maxCoeff(&best);
    out[static_cast<size_t>(i)] = static_cast<std::uint8_t>(best);
  }
  return out;
}

}  // namespace

std::vector<std::uint8_t> predict_labels(const models::Model& m, const data::LabeledVolume& vol) {
  if (!m.cfg.is_adapter()) {
    long h = vol.h(), w = vol.w(), plane = h * w;
    std::vector<std::uint8_t> out;
    out.reserve(static_cast<size_t>(vol.voxels()));
    Tensor slice = Tensor::zeros({1, 1, h, w});
    for (long z = 0; z < vol.d(); ++z) {
      std::memcpy(slice.data(), vol.image.data() + z * plane, sizeof(float) * plane);
      std::vector<std::uint8_t> sl = argmax_classes(m.forward(slice));
      out.insert(out.end(), sl.begin(), sl.end());
    }
    return out;
  }
  return argmax_classes(m.forward(vol.image));
}

EvalReport evaluate(const models::Model& m, const std::vector<data::LabeledVolume>& vols) {
  if (vols.empty()) throw ParameterError("evaluate: no volumes");
  long k = m.cfg.n_classes;
  std::vector<double> dice_sum(static_cast<size_t>(k - 1), 0.0), iou_sum = dice_sum,
      hd_sum = dice_sum;
  std::vector<long> hd_n(static_cast<size_t>(k - 1), 0);

  for (const auto& v : vols) {
    std::vector<std::uint8_t> pred = predict_labels(m, v);
    std::vector<metrics::Overlap> ov = metrics::overlap(pred, v.labels, k);
    for (long c = 1; c < k; ++c) {
      dice_sum[c - 1] += ov[c - 1].dice;
      iou_sum[c - 1] += ov[c - 1].iou;
      auto hd = metrics::hd95(pred, v.labels, v.d(), v.h(), v.w(), v.spacing, static_cast<int>(c));
      if (hd) {
        hd_sum[c - 1] += *hd;
        ++hd_n[c - 1];
      }
    }
  }

  EvalReport r;
  double n = static_cast<double>(vols.size());
  double hd_total = 0.0;
  long hd_classes = 0;
  for (long c = 0; c < k - 1; ++c) {
    EvalClass ec;
    ec.dice = dice_sum[c] / n;
    ec.iou = iou_sum[c] / n;
    if (hd_n[c] > 0) {
      ec.hd95_mm = hd_sum[c] / static_cast<double>(hd_n[c]);
      hd_total += *ec.hd95_mm;
      ++hd_classes;
    }
    r.mean_dice += ec.dice;
    r.mean_iou += ec.iou;
    r.per_class.push_back(ec);
  }
  r.mean_dice /= static_cast<double>(k - 1);
  r.mean_iou /= static_cast<double>(k - 1);
  if (hd_classes > 0) r.mean_hd95_mm = hd_total / static_cast<double>(hd_classes);
  return r;
}

std::string eval_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "class,dice,iou,hd95_mm\n";
  for (size_t c = 0; c < r.per_class.size(); ++c) {
    const EvalClass& ec = r.per_class[c];
    os << (c + 1) << ',' << ec.dice << ',' << ec.iou << ',';
    if (ec.hd95_mm) os << *ec.hd95_mm;
    os << '\n';
  }
  os << "mean," << r.mean_dice << ',' << r.mean_iou << ',';
  if (r.mean_hd95_mm) os << *r.mean_hd95_mm;
  os << '\n';
  return os.str();
}

TrainStats run_training(models::Model& m, const std::vector<Sample>& train_set,
                        const std::vector<data::LabeledVolume>& eval_vols,
                        optim::TrainConfig cfg, long epochs, long eval_every,
                        const std::string& ckpt_path, std::ostream* log) {
  if (train_set.empty()) throw ParameterError("run_training: empty training set");
  if (epochs <= 0) throw ParameterError("run_training: epochs must be positive");
  long n = static_cast<long>(train_set.size());
  long batch = std::max(1L, std::min(cfg.batch, n));
  long steps_per_epoch = (n + batch - 1) / batch;
  cfg.total_steps = epochs * steps_per_epoch;
  cfg.warmup_steps = std::min(cfg.warmup_steps, cfg.total_steps / 10);

  optim::AdamW opt(optim::trainable_params(m.params), cfg.weight_decay);
  TrainStats stats;

  std::vector<long> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  for (long epoch = 0; epoch < epochs; ++epoch) {
    std::mt19937_64 rng(cfg.seed + static_cast<unsigned>(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (long b = 0; b < steps_per_epoch; ++b) {
      std::vector<long> idx(order.begin() + b * batch,
                            order.begin() + std::min(n, (b + 1) * batch));
      StepResult sr = train_step(m, train_set, idx, opt, cfg, stats.steps);
      epoch_loss += sr.loss;
      ++stats.steps;
    }
    stats.final_loss = epoch_loss / static_cast<double>(steps_per_epoch);
    if (log)
      (*log) << "epoch " << (epoch + 1) << "/" << epochs << " loss " << stats.final_loss
             << " lr " << optim::lr_at(cfg, std::min(stats.steps, cfg.total_steps)) << "\n";

    bool last = epoch + 1 == epochs;
    if (!eval_vols.empty() && eval_every > 0 && ((epoch + 1) % eval_every == 0 || last)) {
      EvalReport er = evaluate(m, eval_vols);
      if (log) (*log) << "  eval mean dice " << er.mean_dice << "\n";
      if (er.mean_dice > stats.best_dice) {
        stats.best_dice = er.mean_dice;
        stats.best_epoch = epoch + 1;
        if (!ckpt_path.empty()) models::save_checkpoint(m, ckpt_path);
      }
    }
  }
  if (eval_vols.empty() && !ckpt_path.empty()) models::save_checkpoint(m, ckpt_path);
  return stats;
}

}  // namespace mambaseg::train
