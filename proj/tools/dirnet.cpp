// dirnet: summarize / audit / train / eval / dump.

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "cli_support.hpp"
#include "dirnet/arch_calculus.hpp"
#include "dirnet/data.hpp"
#include "dirnet/network.hpp"
#include "dirnet/trainer.hpp"

namespace fs = std::filesystem;
using namespace dirnet;

namespace {

struct DataArgs {
  std::string data_root;
  std::string manifest;
  std::string synthetic;
  std::size_t holdout = 50;
  double val_fraction = 0.1;
  bool roi = true;
};

void add_data_options(CLI::App* sub, DataArgs& d, bool with_split) {
  sub->add_option("--data-root", d.data_root, "Dataset root with one subdirectory per class")
      ->check(CLI::ExistingDirectory);
  sub->add_option("--manifest", d.manifest, "';'-separated CSV with Filename, ClassId and optional Roi.* columns")
      ->check(CLI::ExistingFile);
  sub->add_option("--synthetic", d.synthetic, "Generated sign set, CxN = classes x samples per class");
  sub->add_option("--holdout", d.holdout, "Held-out samples per class for --synthetic")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  if (with_split) {
    sub->add_option("--val-fraction", d.val_fraction, "Per-class validation share for folder datasets")
        ->capture_default_str()
        ->check(CLI::Range(0.0, 0.5));
  }
  sub->add_flag("--roi,!--no-roi", d.roi, "Crop to annotated regions when present")->capture_default_str();
}

bool has_folder(const DataArgs& d) { return !d.data_root.empty() || !d.manifest.empty(); }

void require_one_source(const DataArgs& d) {
  if (has_folder(d) == !d.synthetic.empty()) {
    throw ConfigError("give either --data-root/--manifest or --synthetic");
  }
}

DatasetSplit load_folder(const DataArgs& d, const std::string& name) {
  std::optional<fs::path> manifest;
  if (!d.manifest.empty()) manifest = d.manifest;
  const fs::path root = d.data_root.empty() ? fs::path(d.manifest).parent_path() : fs::path(d.data_root);
  return load_folder_dataset(root, manifest, LoadOptions{name, true});
}

void check_classes(std::size_t requested, std::size_t found) {
  if (requested != 0 && requested != found) {
    throw ConfigError("--classes " + std::to_string(requested) + " but the dataset has " +
                      std::to_string(found) + " classes");
  }
}

void print_metrics(const std::string& label, const EvalResult& r) {
  std::printf("%s samples=%zu loss=%.9g top1=%.9g top5=%.9g\n", label.c_str(), r.samples, r.loss, r.top1,
              r.top5);
}

// Fills options not given on the command line from a key=value file.
void apply_config_file(CLI::App* sub, const std::string& path) {
  if (path.empty()) return;
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigINI().from_file(path);
  } catch (const CLI::Error& e) {
    throw ConfigError("cannot read config file " + path + ": " + e.what());
  }
  for (const auto& item : items) {
    if (item.name == "config" || item.name.empty() || item.name == "++" || item.name == "--") continue;
    CLI::Option* opt = sub->get_option_no_throw("--" + item.name);
    if (opt == nullptr) throw ConfigError("unknown key '" + item.name + "' in " + path);
    if (opt->count() > 0) continue;
    try {
      opt->add_result(item.inputs);
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw ConfigError(path + ": " + e.what());
    }
  }
}

// ---------------------------------------------------------------------------

int cmd_summarize(std::size_t classes, const std::string& out) {
  const NetworkSpec spec = NetworkSpec::standard(classes);
  const ParamAudit audit = network_param_audit(spec);

  Network<float> net(spec, 0);
  const auto trace = net.shape_trace({1, 3, spec.in_extent, spec.in_extent});
  bool trace_ok = trace.size() == audit.rows.size();
  for (std::size_t i = 0; trace_ok && i < trace.size(); ++i) {
    trace_ok = trace[i].first == audit.rows[i].row && trace[i].second == audit.rows[i].output;
  }

  std::cout << "classes " << classes << ", input 56x56x3\n\n" << audit.report;
  std::cout << "forward trace matches closed form: " << (trace_ok ? "yes" : "NO") << '\n';
  if (!out.empty()) {
    fs::create_directories(out);
    std::ofstream(fs::path(out) / "summary.csv", std::ios::trunc) << audit.csv;
  }
  return trace_ok ? cli::kOk : cli::kOther;
}

int cmd_audit() {
  const AuditReport report = run_identity_audit();
  for (const auto& c : report.checks) {
    std::printf("%s %-24s k=%zu r=%zu  %s\n", c.pass ? "PASS" : "FAIL", c.identity.c_str(), c.k, c.r,
                c.detail.c_str());
  }
  std::printf("\nkernel savings, D_in = D_out = 64 (ordinary minus dilated weights)\n");
  std::printf("%4s %4s %10s %10s %10s\n", "k", "r", "ordinary", "dilated", "saved");
  for (std::size_t k : {1, 3, 5}) {
    for (std::size_t r : {1, 2, 3}) {
      const ParamCount pc = param_comparison(k, r, 64, 64);
      std::printf("%4zu %4zu %10llu %10llu %10llu\n", k, r, static_cast<unsigned long long>(pc.p1),
                  static_cast<unsigned long long>(pc.p2), static_cast<unsigned long long>(pc.p1 - pc.p2));
    }
  }
  std::printf("\nblock savings (dilated inner residual vs 5x5/7x7 branches)\n");
  for (std::size_t d : {64, 128, 256}) {
    const BlockParamCount pc = block_param_count(BlockConfig{d, d, 3, 2, 3, {}});
    std::printf("D=%-4zu saved=%zu\n", d, pc.savings);
  }
  std::printf("\n%zu checks, %zu failed\n", report.checks.size(), report.failures());
  return report.all_pass() ? cli::kOk : cli::kOther;
}

struct TrainArgs {
  DataArgs data;
  std::size_t classes = 0;
  TrainConfig cfg;
  std::string out = "runs/latest";
};

std::string describe(const TrainArgs& a, const TrainConfig& cfg) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "data-root=" << a.data.data_root << '\n'
     << "manifest=" << a.data.manifest << '\n'
     << "synthetic=" << a.data.synthetic << '\n'
     << "holdout=" << a.data.holdout << '\n'
     << "val-fraction=" << a.data.val_fraction << '\n'
     << "roi=" << (a.data.roi ? "true" : "false") << '\n'
     << "classes=" << a.classes << '\n'
     << "epochs=" << cfg.epochs << '\n'
     << "batch-size=" << cfg.batch_size << '\n'
     << "lr=" << cfg.alpha0 << '\n'
     << "seed=" << cfg.seed << '\n'
     << "out=" << a.out << '\n'
     << "eval-batch-size=" << cfg.eval_batch_size << '\n'
     << "prefetch=" << cfg.prefetch_capacity << '\n'
     << "log-every-iteration=" << (cfg.log_every_iteration ? "true" : "false") << '\n'
     << "# not configurable\n"
     << "# adam-beta1=" << cfg.adam.beta1 << '\n'
     << "# adam-beta2=" << cfg.adam.beta2 << '\n'
     << "# adam-eps=" << cfg.adam.eps << '\n'
     << "# lr-floor=" << cfg.lr_floor << '\n'
     << "# plateau-window=" << cfg.plateau_window << '\n'
     << "# threads=" << configured_threads() << '\n';
  return os.str();
}

int cmd_train(const TrainArgs& a) {
  require_one_source(a.data);
  const std::string started = cli::utc_now();
  const fs::path out = a.out;
  TrainConfig cfg = a.cfg;
  cfg.use_roi = a.data.roi;
  cfg.validate();

  DatasetSplit train_split, val;
  if (!a.data.synthetic.empty()) {
    const auto [c, n] = cli::parse_synthetic(a.data.synthetic);
    train_split = generate_synthetic(c, n, cfg.seed, "train");
    val = generate_synthetic(c, a.data.holdout, synthetic_holdout_seed(cfg.seed), "val");
  } else {
    DatasetSplit all = load_folder(a.data, "train");
    if (!all.skipped.empty()) {
      fs::create_directories(out);
      write_skip_report(all, out / "skipped.txt");
    }
    std::tie(train_split, val) = split_train_val(all, a.data.val_fraction, cfg.seed);
  }
  check_classes(a.classes, train_split.num_classes);
  fs::create_directories(out);
  const std::string effective = describe(a, cfg);
  std::ofstream(out / "config.ini", std::ios::trunc) << effective;
  cli::write_run_manifest(out, "train", started, cfg.seed, effective);

  std::printf("train %zu samples, val %zu samples, %zu classes, %zu batches/epoch\n", train_split.size(),
              val.size(), train_split.num_classes, batches_per_epoch(train_split.size(), cfg.batch_size));
  Network<float> net = build<float>(train_split.num_classes, cfg.seed);
  const TrainResult r = train(net, train_split, val, cfg, out, [](const Metrics& m) {
    std::printf("epoch %zu iter %zu train_loss %.6f val_loss %.6f top1 %.4f top5 %.4f lr %.3g\n", m.epoch,
                m.iteration, m.train_loss, m.val_loss, m.top1, m.top5, m.lr);
    std::fflush(stdout);
  });
  std::printf("best epoch %zu (val_loss %.6f); wrote %s\n", r.best_epoch, r.best_val_loss, r.csv_path.c_str());
  return cli::kOk;
}

struct EvalArgs {
  DataArgs data;
  std::string checkpoint;
  std::string split = "holdout";
  std::uint64_t seed = 0;
  std::size_t batch_size = 64;
};

int cmd_eval(const EvalArgs& a) {
  require_one_source(a.data);
  Network<float> net = load_checkpoint<float>(a.checkpoint);
  DatasetSplit split;
  if (!a.data.synthetic.empty()) {
    const auto [c, n] = cli::parse_synthetic(a.data.synthetic);
    split = a.split == "train" ? generate_synthetic(c, n, a.seed, "train")
                               : generate_synthetic(c, a.data.holdout, synthetic_holdout_seed(a.seed), "val");
  } else {
    split = load_folder(a.data, "test");
  }
  check_classes(net.num_classes(), split.num_classes);
  print_metrics(a.split, evaluate(net, split, a.batch_size, a.data.roi));
  return cli::kOk;
}

struct DumpArgs {
  std::string checkpoint;
  std::string image;
  std::vector<std::string> layers{"conv2a.F1", "conv2a.R1", "conv2a.R2"};
  std::string out = "dumps";
  bool roi = true;
};

int cmd_dump(const DumpArgs& a) {
  Network<float> net = load_checkpoint<float>(a.checkpoint);
  const Tensor<float> x = to_input_tensor(decode_image(a.image));
  fs::create_directories(a.out);
  for (const auto& p : dump_feature_maps(net, x, a.layers, a.out)) std::cout << p.string() << '\n';
  return cli::kOk;
}

int run(int argc, char** argv) {
  CLI::App app{"Dilated inner residual traffic-sign classifier"};
  app.set_version_flag("--version", cli::kVersion);
  app.require_subcommand(1);
  app.allow_extras(false);

  std::size_t sum_classes = 43;
  std::string sum_out;
  auto* summarize = app.add_subcommand("summarize", "Layer table, output shapes and parameter audit");
  summarize->add_option("--classes", sum_classes, "Number of output classes")
      ->capture_default_str()
      ->check(CLI::Range(std::size_t{2}, std::size_t{100000}));
  summarize->add_option("--out", sum_out, "Directory for summary.csv");

  auto* audit = app.add_subcommand("audit", "Check receptive-field and parameter identities against brute force");

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train on a folder dataset or a generated sign set");
  std::string train_config;
  train_cmd->add_option("--config", train_config, "key=value file; command-line flags take precedence")
      ->check(CLI::ExistingFile);
  add_data_options(train_cmd, ta.data, true);
  train_cmd->add_option("--classes", ta.classes, "Expected class count (0: infer from data)")->capture_default_str();
  train_cmd->add_option("--epochs", ta.cfg.epochs, "Training epochs")->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->add_option("--batch-size", ta.cfg.batch_size, "Images per batch")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  train_cmd->add_option("--lr", ta.cfg.alpha0, "Initial learning rate")->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->add_option("--seed", ta.cfg.seed, "Seed for initialisation, shuffling and generated data")
      ->capture_default_str();
  train_cmd->add_option("--out", ta.out, "Output directory")->capture_default_str();
  train_cmd->add_option("--eval-batch-size", ta.cfg.eval_batch_size, "Images per validation batch")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  train_cmd->add_option("--prefetch", ta.cfg.prefetch_capacity, "Batches buffered ahead of the trainer")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  train_cmd->add_flag("--log-every-iteration", ta.cfg.log_every_iteration, "Add one CSV row per iteration");

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "Top-1/top-5 accuracy and loss of a checkpoint");
  std::string eval_config;
  eval_cmd->add_option("--config", eval_config, "key=value file; command-line flags take precedence")
      ->check(CLI::ExistingFile);
  eval_cmd->add_option("--checkpoint", ea.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  add_data_options(eval_cmd, ea.data, false);
  eval_cmd->add_option("--split", ea.split, "For --synthetic: train or holdout")
      ->capture_default_str()
      ->check(CLI::IsMember({"train", "holdout"}));
  eval_cmd->add_option("--seed", ea.seed, "Seed the generated set was drawn with")->capture_default_str();
  eval_cmd->add_option("--batch-size", ea.batch_size, "Images per batch")->capture_default_str()->check(CLI::PositiveNumber);

  DumpArgs da;
  auto* dump_cmd = app.add_subcommand("dump", "Write feature maps of one image as tiled PGM grids");
  dump_cmd->add_option("--checkpoint", da.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  dump_cmd->add_option("--image", da.image, "PPM/PGM/PNG image")->required()->check(CLI::ExistingFile);
  dump_cmd->add_option("--layers", da.layers, "Comma-separated names, e.g. conv2a.F2,conv2a.F2+R1,pool1")
      ->delimiter(',')
      ->capture_default_str();
  dump_cmd->add_option("--out", da.out, "Output directory")->capture_default_str();

  try {
    app.parse(argc, argv);
    if (*train_cmd) apply_config_file(train_cmd, train_config);
    if (*eval_cmd) apply_config_file(eval_cmd, eval_config);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return cli::kConfig;
  }

  if (*summarize) return cmd_summarize(sum_classes, sum_out);
  if (*audit) return cmd_audit();
  if (*train_cmd) return cmd_train(ta);
  if (*eval_cmd) return cmd_eval(ea);
  if (*dump_cmd) return cmd_dump(da);
  return cli::kConfig;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return cli::kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return cli::kData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return cli::kNumeric;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return cli::kFormat;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cli::kOther;
  }
}
