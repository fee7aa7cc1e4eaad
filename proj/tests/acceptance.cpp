// One PASS/FAIL line per acceptance criterion; exit status 1 if any fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dirnet/arch_calculus.hpp"
#include "dirnet/blocks.hpp"
#include "dirnet/gradcheck.hpp"
#include "dirnet/network.hpp"
#include "dirnet/trainer.hpp"
#include "oracles.hpp"

using namespace dirnet;
namespace fs = std::filesystem;

namespace {

constexpr std::size_t kLearningEpochs = 2;

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Tensor<double> rand_d(Shape s, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  return Tensor<double>::randn(s, rng, sd);
}

void perturb_affine(Module<double>& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.5, 1.5);
  for (auto* p : m.params()) {
    if (p->name.find("gamma") != std::string::npos)
      for (double& v : p->value.data()) v = u(rng);
    if (p->name.find("beta") != std::string::npos)
      for (double& v : p->value.data()) v = u(rng) - 1.0;
  }
}

// 1 ------------------------------------------------------------------------
Outcome identities() {
  const auto t0 = Clock::now();
  const AuditReport rep = run_identity_audit();
  const auto pc = block_param_count(BlockConfig{64, 64, 3, 2, 3, {}});
  const double dt = seconds_since(t0);
  const bool ok = rep.all_pass() && pc.savings == 229376 && pc.closed_form_savings == 229376 && dt < 10.0;
  return {ok, fmt("%zu identity checks, %zu failed; D=64 savings %zu; %.2f s", rep.checks.size(), rep.failures(),
                  static_cast<std::size_t>(pc.savings), dt)};
}

// 2 ------------------------------------------------------------------------
Outcome shapes() {
  const auto t0 = Clock::now();
  const std::vector<Shape> table{{1, 64, 56, 56},  {1, 64, 56, 56},  {1, 64, 28, 28}, {1, 64, 28, 28},
                                 {1, 128, 28, 28}, {1, 128, 14, 14}, {1, 256, 14, 14}, {1, 256, 7, 7},
                                 {1, 256, 7, 7},   {1, 256, 1, 1},   {1, 512, 1, 1},   {1, 43, 1, 1}};
  Network<float> a = build<float>(43, 1);
  Network<float> b = build<float>(62, 1);
  const auto ta = a.shape_trace({1, 3, 56, 56});
  const auto tb = b.shape_trace({1, 3, 56, 56});
  std::size_t match = 0, same = 0;
  for (std::size_t i = 0; i < ta.size() && i < table.size(); ++i) match += ta[i].second == table[i] ? 1 : 0;
  for (std::size_t i = 0; i + 1 < tb.size() && i + 1 < ta.size(); ++i) same += ta[i] == tb[i] ? 1 : 0;
  const bool last_ok = !tb.empty() && tb.back().second == Shape{1, 62, 1, 1};
  const double dt = seconds_since(t0);
  const bool ok = ta.size() == 12 && tb.size() == 12 && match == 12 && same == 11 && last_ok && dt < 5.0;
  return {ok, fmt("43 classes: %zu/12 rows match; 62 classes: %zu/11 leading rows equal, last %s; %.2f s", match,
                  same, last_ok ? "(1,62,1,1)" : "wrong", dt)};
}

// 3 ------------------------------------------------------------------------
Outcome params() {
  const ParamAudit audit = network_param_audit(NetworkSpec::standard(43));
  const double rel = (static_cast<double>(audit.registry_total) - 6.256e6) / 6.256e6;
  std::printf("%s", audit.report.c_str());
  const bool ok = audit.registry_total == audit.closed_form_total && std::abs(rel) <= 0.15;
  return {ok, fmt("registry %zu, closed form %zu, %+.2f%% against 6.256M", static_cast<std::size_t>(audit.registry_total),
                  static_cast<std::size_t>(audit.closed_form_total), 100.0 * rel)};
}

// 4 ------------------------------------------------------------------------
Outcome gradients() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string where;
  std::size_t checked = 0, probes = 0, nonsmooth = 0;
  auto check = [&](Module<double>& m, const Tensor<double>& x, const std::string& name, GradCheckOptions o = {}) {
    for (Mode mode : {Mode::Train, Mode::Infer}) {
      o.mode = mode;
      const auto r = backward_check(m, x, o, name);
      ++checked;
      probes += r.probes;
      nonsmooth += r.nonsmooth;
      if (r.max_rel_error > worst) {
        worst = r.max_rel_error;
        where = name + " " + r.worst;
      }
      if (r.nonsmooth_max_rel_error > worst) {
        worst = r.nonsmooth_max_rel_error;
        where = name + " " + r.nonsmooth_worst + " (kink, fine step)";
      }
    }
  };

  for (std::size_t rate : {1, 2, 3}) {
    Conv2d<double> conv("conv", ConvSpec::same(3, rate, 2, 3, true));
    std::mt19937_64 rng(rate);
    conv.init(rng);
    check(conv, rand_d({2, 2, 7, 7}, rate), "conv r=" + std::to_string(rate));
  }
  {
    Conv2d<double> conv("conv", ConvSpec{3, 1, 2, 1, 2, 2, true});
    std::mt19937_64 rng(3);
    conv.init(rng);
    check(conv, rand_d({1, 2, 7, 7}, 4), "conv stride 2");
  }
  {
    BatchNorm<double> bn("bn", 3);
    perturb_affine(bn, 5);
    for (int i = 0; i < 3; ++i) bn.forward(rand_d({4, 3, 4, 4}, 50 + i, 2.0), Mode::Train);
    check(bn, rand_d({3, 3, 4, 4}, 7, 2.0), "batchnorm");
  }
  {
    ReLU<double> relu;
    auto x = rand_d({2, 2, 4, 4}, 11);
    for (double& v : x.data()) v += v >= 0 ? 0.1 : -0.1;
    check(relu, x, "relu");
  }
  {
    MaxPool2d<double> pool;
    Tensor<double> x({2, 2, 8, 8});
    std::vector<double> vals(x.size());
    std::iota(vals.begin(), vals.end(), 0.0);
    std::mt19937_64 rng(12);
    std::shuffle(vals.begin(), vals.end(), rng);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = vals[i] * 0.01;
    check(pool, x, "maxpool");
  }
  {
    AvgPool2d<double> pool(4);
    check(pool, rand_d({2, 3, 4, 4}, 13), "avgpool");
  }
  {
    Dense<double> fc("fc", 12, 5);
    std::mt19937_64 rng(14);
    fc.init(rng);
    check(fc, rand_d({3, 3, 2, 2}, 15), "dense");
  }
  {
    Softmax<double> sm;
    check(sm, rand_d({3, 6, 1, 1}, 16), "softmax");
  }
  {
    AddConst<double> merge(rand_d({2, 2, 3, 3}, 17));
    check(merge, rand_d({2, 2, 3, 3}, 18), "merge");
  }
  for (auto kind : {BlockKind::Residual, BlockKind::InnerResidual, BlockKind::DilatedInnerResidual}) {
    for (auto [ci, co] : std::vector<std::pair<std::size_t, std::size_t>>{{3, 3}, {2, 3}}) {
      auto blk = make_block<double>(kind, "blk", BlockConfig{ci, co, 3, 2, 3, {}});
      std::mt19937_64 rng(60 + ci + co);
      blk->init(rng);
      perturb_affine(*blk, 61);
      check(*blk, rand_d({2, ci, 7, 7}, 62), to_string(kind) + " " + std::to_string(ci) + "->" + std::to_string(co));
    }
  }
  {
    Network<double> net(NetworkSpec::scaled(3, 14, 4, 8, 16, 32), 21);
    GradCheckOptions o;
    o.max_probes_per_tensor = 12;
    o.seed = 3;
    check(net, rand_d({2, 3, 14, 14}, 22), "scaled network", o);
  }
  const double dt = seconds_since(t0);
  return {worst < 1e-4 && nonsmooth * 10 <= probes && dt < 300.0,
          fmt("%zu checks, %zu probes (%zu across kinks), max rel error %.3g at %s; %.1f s", checked, probes,
              nonsmooth, worst, where.c_str(), dt)};
}

// 5 ------------------------------------------------------------------------
Outcome dilation() {
  const auto t0 = Clock::now();
  std::size_t cases = 0, exact = 0;
  for (std::size_t k : {1, 3, 5}) {
    for (std::size_t rate : {1, 2, 3}) {
      const ConvSpec dil = ConvSpec::same(k, rate, 3, 4);
      const ConvSpec plain{dil.extent(), 1, 1, dil.pad, 3, 4, false};
      const auto w = rand_d(dil.weight_shape(), 500 + 10 * k + rate);
      const auto stuffed = oracle::zero_stuff(w, rate);
      for (std::uint64_t trial = 0; trial < 50; ++trial) {
        const auto x = rand_d({1, 3, 15, 15}, 7000 + 100 * k + 10 * rate + trial);
        const auto a = conv2d_forward(x, w, dil, ConvAlgo::Direct);
        const auto b = conv2d_forward(x, stuffed, plain, ConvAlgo::Direct);
        ++cases;
        exact += max_abs_diff(a, b) == 0.0 ? 1 : 0;
      }
    }
  }
  const double dt = seconds_since(t0);
  return {exact == cases && dt < 30.0, fmt("%zu/%zu bit-exact over k in {1,3,5}, r in {1,2,3}; %.2f s", exact, cases, dt)};
}

// 6 ------------------------------------------------------------------------
Outcome degeneracy() {
  const auto t0 = Clock::now();
  double identity_dev = 0.0;
  for (auto kind : {BlockKind::Residual, BlockKind::InnerResidual, BlockKind::DilatedInnerResidual}) {
    auto blk = make_block<double>(kind, "blk", BlockConfig{5, 5, 3, 2, 3, {}});
    std::mt19937_64 rng(3);
    blk->init(rng);
    for (auto* p : blk->params())
      if (p->name.find("conv.weight") != std::string::npos) p->value.set_zero();
    const auto x = rand_d({2, 5, 9, 9}, 4);
    for (Mode mode : {Mode::Train, Mode::Infer}) identity_dev = std::max(identity_dev, max_abs_diff(x, blk->forward(x, mode)));
  }

  std::vector<std::unique_ptr<Block<double>>> stack;
  std::vector<ActivationMap<double>> acts(3);
  for (std::size_t i = 0; i < 3; ++i) {
    stack.push_back(make_block<double>(BlockKind::DilatedInnerResidual, "blk", BlockConfig{4, 4, 3, 2, 3, {}}));
    std::mt19937_64 rng(40 + i);
    stack.back()->init(rng);
    perturb_affine(*stack.back(), 50 + i);
    stack.back()->set_recorder(&acts[i]);
  }
  const auto x0 = rand_d({2, 4, 9, 9}, 7);
  Tensor<double> x = x0;
  for (auto& b : stack) x = b->forward(x, Mode::Train);
  Tensor<double> rebuilt = x0;
  for (auto& a : acts) add_inplace(rebuilt, a.at("blk.F3"));
  const double tele = oracle::max_rel_diff(rebuilt, x);
  const double dt = seconds_since(t0);
  return {identity_dev == 0.0 && tele < 1e-5 && dt < 30.0,
          fmt("zero-weight max deviation %.3g; telescoping rel error %.3g; %.2f s", identity_dev, tele, dt)};
}

// 7 and 9 ------------------------------------------------------------------
struct LearningRun {
  TrainResult result;
  double seconds = 0.0;
  EvalResult holdout;
  std::string error;
};

LearningRun learning_run(const fs::path& dir) {
  LearningRun run;
  try {
    const auto t0 = Clock::now();
    TrainConfig cfg;
    cfg.epochs = kLearningEpochs;
    cfg.batch_size = 32;
    cfg.alpha0 = 1e-4;
    cfg.seed = 7;
    const DatasetSplit train_split = generate_synthetic(8, 250, cfg.seed, "train");
    const DatasetSplit holdout = generate_synthetic(8, 50, synthetic_holdout_seed(cfg.seed), "val");
    Network<float> net = build<float>(8, cfg.seed);
    run.result = train(net, train_split, holdout, cfg, dir, [](const Metrics& m) {
      std::printf("    epoch %zu train_loss %.6f val_loss %.6f top1 %.4f top5 %.4f\n", m.epoch, m.train_loss,
                  m.val_loss, m.top1, m.top5);
      std::fflush(stdout);
    });
    run.seconds = seconds_since(t0);
    run.holdout = evaluate(net, holdout);
  } catch (const std::exception& e) {
    run.error = e.what();
  }
  return run;
}

Outcome learning(const LearningRun& run) {
  if (!run.error.empty()) return {false, "training failed: " + run.error};
  const auto& ep = run.result.epochs;
  const double ratio = ep.back().train_loss / ep.front().train_loss;
  const bool ok = run.holdout.top1 >= 0.95 && run.holdout.top5 == 1.0 && ratio < 0.2 && ep.size() <= 10 &&
                  run.seconds < 1800.0;
  return {ok, fmt("%zu epochs: held-out top1 %.4f, top5 %.4f; final/first train loss %.4f; %.0f s", ep.size(),
                  run.holdout.top1, run.holdout.top5, ratio, run.seconds)};
}

Outcome determinism(const LearningRun& first, const LearningRun& second) {
  if (!first.error.empty() || !second.error.empty()) return {false, "training failed"};
  const bool same_csv = slurp(first.result.csv_path) == slurp(second.result.csv_path);
  const DatasetSplit holdout = generate_synthetic(8, 50, synthetic_holdout_seed(7), "val");
  Network<float> reloaded = load_checkpoint<float>(first.result.last_checkpoint);
  const EvalResult ev = evaluate(reloaded, holdout);
  const bool same_top1 = ev.top1 == first.holdout.top1 && ev.top1 == first.result.epochs.back().top1;
  return {same_csv && same_top1, fmt("metrics CSVs %s; reloaded top1 %.4f vs %.4f", same_csv ? "identical" : "DIFFER",
                                     ev.top1, first.holdout.top1)};
}

// 8 ------------------------------------------------------------------------
Outcome schedule() {
  const auto t0 = Clock::now();
  const std::vector<double> improving{0.5, 0.4, 0.3}, worsening{0.3, 0.4, 0.5};
  const double a = lr_update(improving, 1e-4);
  const double b = lr_update(worsening, 1e-4);
  const double c = lr_update(worsening, 5e-12);
  const double dt = seconds_since(t0);
  const bool ok = a == 1e-4 && b == 0.1 * 1e-4 && c == 5e-12 && dt < 1.0;
  return {ok, fmt("improving -> %.3g, plateau -> %.3g, floor -> %.3g", a, b, c)};
}

// 10 -----------------------------------------------------------------------
Outcome batch_counts() {
  const auto t0 = Clock::now();
  DatasetSplit none;
  auto counted = [&](std::size_t n) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    BatchPrefetcher p(none, std::move(order), 32, false, 1, false);
    return std::pair{p.batch_count(), batches_per_epoch(n, 32)};
  };
  const auto [l1, t1] = counted(39209);
  const auto [l2, t2] = counted(4575);
  const double dt = seconds_since(t0);
  const bool ok = l1 == 1226 && t1 == 1226 && l2 == 143 && t2 == 143 && dt < 1.0;
  return {ok, fmt("39209 -> %zu (loader) %zu (trainer); 4575 -> %zu / %zu", l1, t1, l2, t2)};
}

}  // namespace

int main(int argc, char** argv) {
  fs::path out = fs::temp_directory_path() / "dirnet_acceptance";
  for (int i = 1; i + 1 < argc; ++i)
    if (std::string(argv[i]) == "--out") out = argv[i + 1];
  fs::create_directories(out);

  std::ofstream summary(out / "acceptance.txt", std::ios::trunc);
  std::vector<std::pair<int, Outcome>> results;
  auto report = [&](int id, const std::string& title, const Outcome& o) {
    const std::string line =
        fmt("criterion %2d %s  %-24s %s", id, o.pass ? "PASS" : "FAIL", title.c_str(), o.detail.c_str());
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
    summary << line << '\n' << std::flush;
    results.emplace_back(id, o);
  };
  auto guarded = [](const std::function<Outcome()>& f) {
    try {
      return f();
    } catch (const std::exception& e) {
      return Outcome{false, std::string("exception: ") + e.what()};
    }
  };

  report(1, "architecture identities", guarded(identities));
  report(2, "shape fidelity", guarded(shapes));
  report(3, "parameter audit", guarded(params));
  report(4, "gradient correctness", guarded(gradients));
  report(5, "dilation equivalence", guarded(dilation));
  report(6, "block degeneracy", guarded(degeneracy));
  const LearningRun first = learning_run(out / "learning_a");
  report(7, "desk-scale learning", learning(first));
  report(8, "learning-rate schedule", guarded(schedule));
  const LearningRun second = learning_run(out / "learning_b");
  report(9, "determinism", guarded([&] { return determinism(first, second); }));
  report(10, "batch bookkeeping", guarded(batch_counts));

  std::size_t failed = 0;
  for (const auto& r : results) failed += r.second.pass ? 0 : 1;
  std::printf("%zu of %zu criteria passed\n", results.size() - failed, results.size());
  summary << results.size() - failed << " of " << results.size() << " criteria passed\n";
  return failed == 0 ? 0 : 1;
}
