#include "mssnet/cli.hpp"

#include "mssnet/bench.hpp"
#include "mssnet/trainer.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace mssnet::cli {

namespace fs = std::filesystem;

namespace {

// Bad paths or arguments noticed after parsing; maps to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <class F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

void require_path(const std::string& path, const char* what) {
  if (path.empty() || !fs::exists(path)) throw UsageError(std::string(what) + " does not exist: " + path);
}

std::ofstream open_output(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  return f;
}

train::ExperimentConfig build_experiment(const ExperimentFlags& flags) {
  KeyValueConfig kv;
  if (!flags.config_path.empty()) {
    require_path(flags.config_path, "config file");
    kv = KeyValueConfig::load(flags.config_path);
  }
  for (const auto& item : flags.overrides) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("override must be key=value, got '" + item + "'");
    kv.set(item.substr(0, eq), item.substr(eq + 1));
  }
  if (flags.dataset) kv.set("data.kind", *flags.dataset);
  if (flags.data_root) kv.set("data.root", *flags.data_root);
  if (flags.seed) {
    kv.set("train.seed", std::to_string(*flags.seed));
    kv.set("net.init_seed", std::to_string(*flags.seed));
  }
  if (flags.epochs) kv.set("train.epochs", std::to_string(*flags.epochs));
  auto cfg = train::ExperimentConfig::from_config(kv);
  if (cfg.dataset != data::DatasetKind::synthetic) require_path(cfg.data_root, "dataset root");
  return cfg;
}

struct LoadedModel {
  train::ExperimentConfig config;
  std::unique_ptr<nn::Network> net;
};

LoadedModel load_model(const std::string& checkpoint, const std::optional<std::string>& data_root) {
  require_path(checkpoint, "checkpoint");
  const auto ckpt = nn::read_checkpoint(checkpoint);
  if (ckpt.metadata.empty()) throw CheckpointMismatchError("checkpoint carries no experiment config");
  auto kv = KeyValueConfig::parse(ckpt.metadata);
  if (data_root) kv.set("data.root", *data_root);
  LoadedModel m{train::ExperimentConfig::from_config(kv), nullptr};
  if (m.config.dataset != data::DatasetKind::synthetic) require_path(m.config.data_root, "dataset root");
  m.net = std::make_unique<nn::Network>(m.config.net);
  nn::load_checkpoint(ckpt, *m.net);
  return m;
}

void check_split(const std::string& split) {
  if (split != "train" && split != "val") throw UsageError("split must be train or val, got '" + split + "'");
}

void print_report(std::ostream& out, const loss::ConfusionMatrix& cm, const std::vector<std::string>& names) {
  const auto report = loss::miou(cm);
  out << std::fixed << std::setprecision(4);
  for (std::size_t c = 0; c < names.size(); ++c) {
    out << std::left << std::setw(16) << names[c] << ' ';
    if (report.iou[c])
      out << *report.iou[c] << '\n';
    else
      out << "absent\n";
  }
  out << std::left << std::setw(16) << "mIoU" << ' ' << report.miou << '\n'
      << std::setw(16) << "OA" << ' ' << loss::overall_accuracy(cm) << '\n'
      << std::setw(16) << "mAcc" << ' ' << loss::mean_class_accuracy(cm) << '\n';
  out.unsetf(std::ios::floatfield);
  out << std::right;
}

LabeledPointCloud load_scan(const train::ExperimentConfig& cfg, const std::string& scan) {
  switch (cfg.dataset) {
    case data::DatasetKind::kitti:
      require_path(scan, "scan");
      return data::load_kitti_scan(scan, std::nullopt);
    case data::DatasetKind::s3dis:
      require_path(scan, "room directory");
      return data::load_s3dis_room(scan);
    case data::DatasetKind::synthetic:
      break;
  }
  const std::string prefix = "synthetic:";
  std::uint64_t seed = 0;
  const char* first = scan.data() + prefix.size();
  const char* last = scan.data() + scan.size();
  if (scan.rfind(prefix, 0) != 0 || std::from_chars(first, last, seed).ptr != last || first == last)
    throw UsageError("synthetic scans are named synthetic:<seed>, got '" + scan + "'");
  const auto points = static_cast<std::size_t>(cfg.raw.get_int("data.synthetic_points", 5000));
  return data::synth_scene(data::random_scene_spec(seed, points));
}

std::string csv_double(double v) {
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

}  // namespace

std::string version_string() {
  return std::string("mssnet ") + kVersion + " (eigen " + std::to_string(EIGEN_WORLD_VERSION) + "." +
         std::to_string(EIGEN_MAJOR_VERSION) + "." + std::to_string(EIGEN_MINOR_VERSION) + ")";
}

int cmd_train(const TrainOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto cfg = build_experiment(o.experiment);
    nn::Network net(cfg.net);
    if (o.dry_run) {
      out << "parameters: " << net.parameter_count() << '\n';
      return kExitOk;
    }
    const fs::path dir(o.out_dir);
    fs::create_directories(dir);
    open_output(dir / "config.txt") << cfg.canonical_text();
    auto log = open_output(dir / "train_log.csv");
    const auto result = train::run_experiment(cfg, net, &log);
    log.close();
    nn::save_checkpoint(dir / "model.ckpt", net, cfg.canonical_text());
    const auto& names = data::class_names(cfg.dataset);
    if (result.eval.points.total() > 0) {
      auto metrics = open_output(dir / "metrics.csv");
      loss::write_metric_report(metrics, result.eval.points, names);
      print_report(out, result.eval.points, names);
    } else {
      err << "warning: validation split is empty, no metrics written\n";
    }
    out << "checkpoint: " << (dir / "model.ckpt").string() << '\n';
    return kExitOk;
  });
}

int cmd_eval(const EvalOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    check_split(o.split);
    auto m = load_model(o.checkpoint, o.data_root);
    const auto ds = data::open_dataset(m.config.dataset, m.config.data_root, o.split, m.config.raw);
    const auto result = train::evaluate(*m.net, *ds, m.config.train.voxel_size);
    const auto& names = data::class_names(m.config.dataset);
    print_report(out, result.points, names);
    const fs::path path =
        o.out.empty() ? fs::path(o.checkpoint).parent_path() / ("eval_" + o.split + ".csv") : fs::path(o.out);
    auto f = open_output(path);
    loss::write_metric_report(f, result.points, names);
    return kExitOk;
  });
}

int cmd_predict(const PredictOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (o.out.empty()) throw UsageError("--out is required");
    auto m = load_model(o.checkpoint, std::nullopt);
    const auto cloud = load_scan(m.config, o.scan);
    auto labels = train::predict_points(*m.net, cloud, m.config.dataset, m.config.train.voxel_size);
    // Submission files carry the raw label ids.
    if (m.config.dataset == data::DatasetKind::kitti)
      for (auto& l : labels) l = data::kitti_raw_id(l);
    if (fs::path(o.out).has_parent_path()) fs::create_directories(fs::path(o.out).parent_path());
    data::write_predictions(o.out, labels);
    out << "wrote " << labels.size() << " labels to " << o.out << '\n';
    return kExitOk;
  });
}

int cmd_ablate(const AblateOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto base = build_experiment(o.experiment);
    std::ostringstream table;
    table << "row,use_mffm,use_acffm,use_lovasz,miou,oa,macc\n";
    for (const auto& row : train::ablation_rows()) {
      const auto cfg = train::apply_ablation(base, row);
      nn::Network net(cfg.net);
      err << "ablation: " << row.name << '\n';
      const auto result = train::run_experiment(cfg, net, nullptr);
      const auto& cm = result.eval.points;
      table << row.name << ',' << row.use_mffm << ',' << row.use_acffm << ',' << row.use_lovasz << ','
            << csv_double(loss::miou(cm).miou) << ',' << csv_double(loss::overall_accuracy(cm)) << ','
            << csv_double(loss::mean_class_accuracy(cm)) << '\n';
    }
    out << table.str();
    if (!o.out.empty()) open_output(o.out) << table.str();
    return kExitOk;
  });
}

int cmd_plot_distance(const PlotDistanceOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    check_split(o.split);
    if (o.bins.size() < 2) throw UsageError("--bins needs at least two edges");
    for (std::size_t i = 1; i < o.bins.size(); ++i)
      if (!(o.bins[i] > o.bins[i - 1])) throw UsageError("--bins must be strictly increasing");
    auto m = load_model(o.checkpoint, o.data_root);
    const auto ds = data::open_dataset(m.config.dataset, m.config.data_root, o.split, m.config.raw);
    const int classes = m.config.net.num_classes;
    std::vector<loss::ConfusionMatrix> totals(o.bins.size() - 1, loss::ConfusionMatrix(classes));
    for (std::size_t i = 0; i < ds->size(); ++i) {
      const auto cloud = ds->load(i);
      const auto pred = train::predict_points(*m.net, cloud, m.config.dataset, m.config.train.voxel_size);
      const auto bins = loss::miou_by_distance(cloud.positions, pred, cloud.labels, o.bins, classes);
      for (std::size_t b = 0; b < bins.size(); ++b) totals[b].merge(bins[b].cm);
    }
    std::ostringstream table;
    table << "lo,hi,points,miou\n";
    for (std::size_t b = 0; b < totals.size(); ++b) {
      table << csv_double(o.bins[b]) << ',' << csv_double(o.bins[b + 1]) << ',' << totals[b].total() << ',';
      if (totals[b].total() > 0) table << csv_double(loss::miou(totals[b]).miou);
      table << '\n';
    }
    out << table.str();
    if (!o.out.empty()) open_output(o.out) << table.str();
    return kExitOk;
  });
}

int cmd_bench(const BenchOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (o.points.empty()) throw UsageError("--points needs at least one size");
    bench::BenchOptions bo;
    bo.run_knn = o.knn;
    bo.run_conv = o.conv;
    bo.seed = o.seed;
    std::vector<bench::BenchRow> rows;
    for (std::size_t n : o.points) {
      if (n == 0) throw UsageError("--points entries must be positive");
      err << "bench: " << n << " points\n";
      rows.push_back(bench::run_bench(n, bo));
    }
    std::ostringstream table;
    bench::write_bench_csv(table, rows);
    out << table.str();
    if (rows.size() >= 2 && o.knn) {
      const auto s = bench::summarize_scaling(rows);
      out << "# points x" << s.point_ratio << ": hash per-query x" << s.hash_query_ratio << ", knn total x"
          << s.knn_total_ratio << '\n';
    }
    if (!o.out.empty()) open_output(o.out) << table.str();
    return kExitOk;
  });
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sparse voxel segmentation: training, evaluation and benchmarks"};
  app.require_subcommand(1);
  app.set_version_flag("--version", version_string());

  auto add_seed = [](CLI::App* cmd, std::optional<std::uint64_t>& seed) {
    cmd->add_option_function<std::uint64_t>(
        "--seed", [&seed](const std::uint64_t& v) { seed = v; }, "Seed for initialization, shuffling and augmentation");
  };
  auto add_experiment = [&](CLI::App* cmd, ExperimentFlags& f) {
    cmd->add_option("config", f.config_path, "Key-value config file")->required();
    cmd->add_option_function<std::string>("--dataset", [&f](const std::string& v) { f.dataset = v; },
                                          "synthetic, kitti or s3dis");
    cmd->add_option_function<std::string>("--data-root", [&f](const std::string& v) { f.data_root = v; },
                                          "Dataset root directory");
    cmd->add_option_function<int>("--epochs", [&f](const int& v) { f.epochs = v; }, "Epoch count");
    cmd->add_option("--set", f.overrides, "Config override key=value (repeatable)");
    add_seed(cmd, f.seed);
  };

  TrainOptions train_o;
  auto* train_cmd = app.add_subcommand("train", "Train and evaluate on the validation split");
  add_experiment(train_cmd, train_o.experiment);
  train_cmd->add_option("--out-dir", train_o.out_dir, "Output directory")->capture_default_str();
  train_cmd->add_flag("--dry-run", train_o.dry_run, "Build the network, print its parameter count and exit");

  EvalOptions eval_o;
  std::optional<std::uint64_t> unused_seed;
  auto* eval_cmd = app.add_subcommand("eval", "Metric table for a checkpoint");
  eval_cmd->add_option("checkpoint", eval_o.checkpoint)->required();
  eval_cmd->add_option("--split", eval_o.split)->capture_default_str();
  eval_cmd->add_option_function<std::string>("--data-root", [&](const std::string& v) { eval_o.data_root = v; });
  eval_cmd->add_option("--out", eval_o.out, "CSV path (default: next to the checkpoint)");
  add_seed(eval_cmd, unused_seed);

  PredictOptions predict_o;
  auto* predict_cmd = app.add_subcommand("predict", "Per-point labels for one scan (uint32 little-endian)");
  predict_cmd->add_option("checkpoint", predict_o.checkpoint)->required();
  predict_cmd->add_option("scan", predict_o.scan, "KITTI .bin, S3DIS room directory or synthetic:<seed>")
      ->required();
  predict_cmd->add_option("--out", predict_o.out)->required();
  add_seed(predict_cmd, unused_seed);

  AblateOptions ablate_o;
  auto* ablate_cmd = app.add_subcommand("ablate", "Run the five-row ablation matrix");
  add_experiment(ablate_cmd, ablate_o.experiment);
  ablate_cmd->add_option("--out", ablate_o.out, "CSV path");

  PlotDistanceOptions plot_o;
  auto* plot_cmd = app.add_subcommand("plot-distance", "Per-range-bin mIoU as CSV");
  plot_cmd->add_option("checkpoint", plot_o.checkpoint)->required();
  plot_cmd->add_option("--bins", plot_o.bins, "Bin edges in metres")->delimiter(',')->capture_default_str();
  plot_cmd->add_option("--split", plot_o.split)->capture_default_str();
  plot_cmd->add_option_function<std::string>("--data-root", [&](const std::string& v) { plot_o.data_root = v; });
  plot_cmd->add_option("--out", plot_o.out, "CSV path");
  add_seed(plot_cmd, unused_seed);

  BenchOptions bench_o;
  std::optional<std::uint64_t> bench_seed;
  bool no_knn = false, no_conv = false;
  auto* bench_cmd = app.add_subcommand("bench", "Voxelize / kernel-map / conv timings against a KD-tree baseline");
  bench_cmd->add_option("--points", bench_o.points, "Point counts")->delimiter(',')->capture_default_str();
  bench_cmd->add_flag("--no-knn", no_knn, "Skip the KD-tree baseline");
  bench_cmd->add_flag("--no-conv", no_conv, "Skip the convolution timing");
  bench_cmd->add_option("--out", bench_o.out, "CSV path");
  add_seed(bench_cmd, bench_seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  err << version_string() << '\n';
  if (*train_cmd) return cmd_train(train_o, out, err);
  if (*eval_cmd) return cmd_eval(eval_o, out, err);
  if (*predict_cmd) return cmd_predict(predict_o, out, err);
  if (*ablate_cmd) return cmd_ablate(ablate_o, out, err);
  if (*plot_cmd) return cmd_plot_distance(plot_o, out, err);
  bench_o.knn = !no_knn;
  bench_o.conv = !no_conv;
  bench_o.seed = bench_seed.value_or(0);
  return cmd_bench(bench_o, out, err);
}

}  // namespace mssnet::cli
