#include "mambaseg/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mambaseg/bench.hpp"
#include "mambaseg/config.hpp"
#include "mambaseg/data.hpp"
#include "mambaseg/errors.hpp"
#include "mambaseg/losses.hpp"
#include "mambaseg/mamba.hpp"
#include "mambaseg/mfgc.hpp"
#include "mambaseg/models.hpp"
#include "mambaseg/ssm.hpp"
#include "mambaseg/train.hpp"

namespace mambaseg::cli {
namespace {

const char* kUsage =
    "usage: mambaseg <command> [options]\n"
    "\n"
    "commands:\n"
    "  phantom   generate a dataset of synthetic labeled volumes (.msv)\n"
    "  train     train a model from a config file\n"
    "  eval      evaluate a checkpoint, emitting a metrics CSV\n"
    "  bench     time the selective scan against self-attention\n"
    "  selftest  run built-in correctness checks\n"
    "\n"
    "run 'mambaseg <command> --help' for per-command options\n";

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + path);
  f << text;
}

// ---- phantom ---------------------------------------------------------------

int cmd_phantom(int argc, const char* const* argv) {
  CLI::App app{"generate synthetic labeled volumes"};
  std::string out_dir;
  long count = 8, d = 20, h = 80, w = 80;
  float spacing = 1.5f;
  unsigned seed = 7;
  app.add_option("--out", out_dir, "output directory")->required();
  app.add_option("--count", count, "number of volumes");
  app.add_option("--d", d, "depth");
  app.add_option("--h", h, "height");
  app.add_option("--w", w, "width");
  app.add_option("--spacing", spacing, "voxel spacing in mm");
  app.add_option("--seed", seed, "base RNG seed");
  CLI11_PARSE(app, argc, argv);

  data::PhantomSpec spec = data::scaled_spec(d, h, w, spacing);
  std::filesystem::create_directories(out_dir);
  for (long i = 0; i < count; ++i) {
    auto vol = data::generate_phantom(spec, seed + static_cast<unsigned>(i));
    char name[32];
    std::snprintf(name, sizeof(name), "phantom_%04ld.msv", i);
    data::write_volume((std::filesystem::path(out_dir) / name).string(), vol);
  }
  std::cout << "wrote " << count << " volumes (" << d << "x" << h << "x" << w << ") to "
            << out_dir << "\n";
  return 0;
}

// ---- train -----------------------------------------------------------------

void print_param_accounting(const models::Model& m) {
  long total = m.params.total_count();
  long trainable = m.params.trainable_count();
  std::cout << "parameters: total " << total << ", trainable " << trainable << " ("
            << (100.0 * static_cast<double>(trainable) / static_cast<double>(total))
            << "%)\n";
  if (m.cfg.is_adapter()) {
    for (long b = 0; b < m.cfg.enc_blocks; ++b) {
      long ap = models::adapter_param_count(m, b);
      long bp = models::encoder_block_param_count(m, b);
      std::cout << "  block " << b << ": adapters " << ap << " / host " << bp << " ("
                << (100.0 * static_cast<double>(ap) / static_cast<double>(bp)) << "%)\n";
    }
  }
}

int cmd_train(int argc, const char* const* argv) {
  CLI::App app{"train a model from a config file"};
  std::string config_path, ckpt_override;
  app.add_option("--config", config_path, "run config file")->required();
  app.add_option("--checkpoint", ckpt_override, "override [run] checkpoint path");
  CLI11_PARSE(app, argc, argv);

  config::RunConfig rc = config::load_config(config_path);
  if (!ckpt_override.empty()) rc.run.checkpoint = ckpt_override;

  std::cout << "model: " << models::to_string(rc.model.kind) << "\n";
  models::Model m = models::make_model(rc.model);
  models::freeze_encoder(m);
  print_param_accounting(m);

  train::Dataset ds = train::build_dataset(rc);
  std::cout << "dataset: " << ds.train.size() << " training samples, " << ds.eval_vols.size()
            << " held-out volumes\n";

  train::TrainStats stats = train::run_training(m, ds.train, ds.eval_vols, rc.trainer,
                                                rc.run.epochs, rc.run.eval_every,
                                                rc.run.checkpoint, &std::cout);
  std::cout << "done: " << stats.steps << " steps, final loss " << stats.final_loss;
  if (stats.best_dice >= 0.0)
    std::cout << ", best mean Dice " << stats.best_dice << " (epoch " << stats.best_epoch << ")";
  std::cout << "\ncheckpoint: " << rc.run.checkpoint << "\n";

  if (!rc.run.metrics_csv.empty() && !ds.eval_vols.empty()) {
    models::load_checkpoint(m, rc.run.checkpoint);  // best weights
    train::EvalReport rep = train::evaluate(m, ds.eval_vols);
    write_text(rc.run.metrics_csv, train::eval_csv(rep));
    std::cout << "metrics: " << rc.run.metrics_csv << "\n";
  }
  return 0;
}

// ---- eval ------------------------------------------------------------------

int cmd_eval(int argc, const char* const* argv) {
  CLI::App app{"evaluate a checkpoint on held-out phantoms"};
  std::string config_path, ckpt_path, csv_path;
  app.add_option("--config", config_path, "run config file")->required();
  app.add_option("--ckpt", ckpt_path, "checkpoint to evaluate")->required();
  app.add_option("--csv", csv_path, "also write the CSV report here");
  CLI11_PARSE(app, argc, argv);

  config::RunConfig rc = config::load_config(config_path);
  models::Model m = models::make_model(rc.model);
  models::load_checkpoint(m, ckpt_path);

  train::Dataset ds = train::build_dataset(rc);
  if (ds.eval_vols.empty()) throw ConfigError("eval: config requests no eval phantoms");
  train::EvalReport rep = train::evaluate(m, ds.eval_vols);
  std::string csv = train::eval_csv(rep);
  std::cout << csv;
  if (!csv_path.empty()) {
    write_text(csv_path, csv);
    std::cout << "wrote " << csv_path << "\n";
  }
  return 0;
}

// ---- bench -----------------------------------------------------------------

int cmd_bench(int argc, const char* const* argv) {
  CLI::App app{"time the selective scan against full self-attention"};
  std::vector<long> lengths{1024, 2048, 4096};
  long d_model = 64, repeats = 5;
  std::string csv_path;
  app.add_option("--lengths", lengths, "ascending sequence lengths");
  app.add_option("--d-model", d_model, "model width");
  app.add_option("--repeats", repeats, "runs per point (median reported)");
  app.add_option("--csv", csv_path, "also write the CSV report here");
  CLI11_PARSE(app, argc, argv);

  bench::BenchReport rep = bench::bench_scaling(lengths, d_model, repeats);
  std::string csv = bench::bench_csv(rep);
  std::cout << csv;
  std::cout << "fitted exponents: scan " << rep.scan_exponent << ", attention "
            << rep.attn_exponent << "\n";
  if (!csv_path.empty()) {
    write_text(csv_path, csv);
    std::cout << "wrote " << csv_path << "\n";
  }
  return 0;
}

// ---- selftest ----------------------------------------------------------------

/// Central finite differences against the tape's gradients; returns the
/// max-norm-relative error over all parameter entries.
float fd_grad_error(std::vector<Tensor> params, const std::function<Tensor()>& make_loss,
                    float eps) {
  std::vector<std::vector<float>> analytic;
  {
    GradTape tape;
    GradTape::Scope scope(tape);
    Tensor loss = make_loss();
    tape.backward(loss);
    for (Tensor& p : params) {
      if (!p.has_grad()) throw Error("selftest: parameter received no gradient");
      analytic.emplace_back(p.grad_data(), p.grad_data() + p.numel());
    }
  }
  float max_diff = 0.0f, norm = 1e-8f;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    for (long i = 0; i < p.numel(); ++i) {
      float saved = p.data()[i];
      p.data()[i] = saved + eps;
      double up = static_cast<double>(make_loss().at(0));
      p.data()[i] = saved - eps;
      double down = static_cast<double>(make_loss().at(0));
      p.data()[i] = saved;
      float fd = static_cast<float>((up - down) / (2.0 * static_cast<double>(eps)));
      float an = analytic[pi][static_cast<size_t>(i)];
      max_diff = std::max(max_diff, std::abs(fd - an));
      norm = std::max({norm, std::abs(fd), std::abs(an)});
    }
  }
  return max_diff / norm;
}

struct CheckList {
  bool all_ok = true;
  void report(const std::string& name, bool ok, const std::string& detail = "") {
    std::cout << (ok ? "PASS" : "FAIL") << "  " << name;
    if (!detail.empty()) std::cout << "  (" << detail << ")";
    std::cout << "\n";
    if (!ok) all_ok = false;
  }
};

bool check_dct_roundtrip(std::string& detail) {
  std::mt19937_64 rng(11);
  Tensor x = Tensor::uniform({4 * 4 * 4, 2}, 1.0f, rng, false);
  Tensor back = ops::idct3(ops::dct3(x, 4, 4, 4), 4, 4, 4);
  float err = 0.0f, norm = 1e-8f;
  for (long i = 0; i < x.numel(); ++i) {
    err = std::max(err, std::abs(back.at(i) - x.at(i)));
    norm = std::max(norm, std::abs(x.at(i)));
  }
  // Constant volume: only the (0,0,0) coefficient may be nonzero.
  Tensor ones = Tensor::zeros({8, 1});
  for (long i = 0; i < 8; ++i) ones.data()[i] = 1.0f;
  Tensor coef = ops::dct3(ones, 2, 2, 2);
  float off_dc = 0.0f;
  for (long i = 1; i < 8; ++i) off_dc = std::max(off_dc, std::abs(coef.at(i)));
  std::ostringstream os;
  os << "roundtrip rel err " << err / norm << ", off-DC " << off_dc;
  detail = os.str();
  return err / norm < 1e-4f && off_dc < 1e-6f;
}

bool check_scan_equivalence(std::string& detail) {
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<float> uni(-1.0f, 1.0f);
  float worst = 0.0f;
  for (int rep = 0; rep < 50; ++rep) {
    long t = 3 + static_cast<long>(rng() % 61), c = 2, n = 1 + static_cast<long>(rng() % 6);
    ssm::SelectiveInputs in;
    in.u = Eigen::MatrixXf::NullaryExpr(t, c, [&] { return uni(rng); });
    in.delta = Eigen::MatrixXf::NullaryExpr(t, c, [&] { return 0.05f + 0.5f * std::abs(uni(rng)); });
    in.b = Eigen::MatrixXf::NullaryExpr(t, n, [&] { return uni(rng); });
    in.c = Eigen::MatrixXf::NullaryExpr(t, n, [&] { return uni(rng); });
    in.a = Eigen::MatrixXf::NullaryExpr(c, n, [&] { return -0.1f - std::abs(uni(rng)); });
    in.method = rep % 2 == 0 ? ops::Discretization::zoh : ops::Discretization::bilinear;
    Eigen::MatrixXf seq = ssm::selective_scan_ref(in, false);
    Eigen::MatrixXf par = ssm::selective_scan_ref(in, true);
    worst = std::max(worst, (seq - par).cwiseAbs().maxCoeff());
  }
  std::ostringstream os;
  os << "max |seq - par| = " << worst;
  detail = os.str();
  return worst < 1e-5f;
}

bool check_gradients(std::string& detail) {
  std::mt19937_64 rng(33);
  float worst = 0.0f;

  {  // Mamba block on a short sequence.
    nn::ParamRegistry reg;
    mamba::MambaConfig mc;
    mc.d_model = 4;
    mc.n_state = 3;
    mc.expand = 2;
    mc.d_conv = 3;
    mamba::MambaBlock blk = mamba::make_mamba_block(reg, "m", mc, rng);
    Tensor x = Tensor::uniform({6, 4}, 0.8f, rng, false);
    std::vector<Tensor> params;
    for (auto& p : reg.items()) params.push_back(p.t);
    worst = std::max(worst, fd_grad_error(params, [&] {
      return ops::sum_all(mamba::mamba_forward(blk, x, 6));
    }, 1e-3f));
  }
  {  // MFGC on a small token grid.
    nn::ParamRegistry reg;
    mfgc::MfgcConfig fc;
    fc.channels = 3;
    fc.d = 2;
    fc.h = 2;
    fc.w = 2;
    mfgc::Mfgc m = mfgc::make_mfgc(reg, "f", fc, rng);
    Tensor x = Tensor::uniform({8, 3}, 0.8f, rng, false);
    std::vector<Tensor> params;
    for (auto& p : reg.items()) params.push_back(p.t);
    worst = std::max(worst, fd_grad_error(params, [&] {
      return ops::sum_all(mfgc::mfgc_forward(m, x));
    }, 1e-3f));
  }
  std::ostringstream os;
  os << "max rel err " << worst;
  detail = os.str();
  return worst < 1e-3f;
}

bool check_freeze(std::string& detail) {
  config::RunConfig rc;
  rc.model.kind = models::ModelKind::adapter_conv;
  rc.model.img = 24;
  rc.model.in_d = 6;
  rc.model.patch = 8;
  rc.model.d_enc = 64;
  rc.model.enc_blocks = 2;
  rc.model.enc_heads = 2;
  rc.model.d_adapter = 4;
  models::Model m = models::make_model(rc.model);
  models::freeze_encoder(m);

  data::PhantomSpec spec = data::scaled_spec(6, 24, 24);
  std::vector<data::LabeledVolume> patches;
  patches.push_back(data::generate_phantom(spec, 5));
  patches[0].image = data::normalize_percentile(patches[0].image);
  auto set = train::to_samples(patches, false);

  optim::TrainConfig tc;
  tc.warmup_steps = 2;
  tc.total_steps = 10;
  tc.seed = 5;
  optim::AdamW opt(optim::trainable_params(m.params), tc.weight_decay);
  for (long s = 0; s < 5; ++s) train::train_step(m, set, {0}, opt, tc, s);

  models::FreezeReport fr = models::check_frozen(m);
  std::ostringstream os;
  os << fr.changed.size() << " frozen params changed, trainable ratio " << fr.trainable_ratio;
  detail = os.str();
  return fr.ok && fr.trainable_ratio > 0.0 && fr.trainable_ratio < 1.0;
}

int cmd_selftest(int argc, const char* const* argv) {
  CLI::App app{"run built-in correctness checks"};
  CLI11_PARSE(app, argc, argv);

  CheckList list;
  std::string detail;
  list.report("dct_roundtrip", check_dct_roundtrip(detail), detail);
  list.report("scan_equivalence", check_scan_equivalence(detail), detail);
  list.report("gradients", check_gradients(detail), detail);
  list.report("freeze_contract", check_freeze(detail), detail);
  if (!list.all_ok) {
    std::cerr << "selftest: at least one check failed\n";
    return 1;
  }
  return 0;
}

}  // namespace

int dispatch(int argc, const char* const* argv) {
  if (argc < 2) {
    std::cerr << kUsage;
    return 2;
  }
  std::string cmd = argv[1];
  try {
    if (cmd == "phantom") return cmd_phantom(argc - 1, argv + 1);
    if (cmd == "train") return cmd_train(argc - 1, argv + 1);
    if (cmd == "eval") return cmd_eval(argc - 1, argv + 1);
    if (cmd == "bench") return cmd_bench(argc - 1, argv + 1);
    if (cmd == "selftest") return cmd_selftest(argc - 1, argv + 1);
    if (cmd == "--help" || cmd == "-h" || cmd == "help") {
      std::cout << kUsage;
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::cerr << "unknown command: " << cmd << "\n\n" << kUsage;
  return 2;
}

}  // namespace mambaseg::cli
