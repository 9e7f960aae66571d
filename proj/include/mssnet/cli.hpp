#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace mssnet::cli {

inline constexpr const char* kVersion = "0.1.0";

/// "mssnet 0.1.0 (eigen X.Y.Z)"
std::string version_string();

// Exit codes shared by every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Flags shared by commands that build an experiment from a config file.
struct ExperimentFlags {
  std::string config_path;  // empty: all defaults
  std::optional<std::string> dataset;
  std::optional<std::string> data_root;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::vector<std::string> overrides;  // key=value
};

struct TrainOptions {
  ExperimentFlags experiment;
  std::string out_dir = "mssnet_run";
  bool dry_run = false;
};

struct EvalOptions {
  std::string checkpoint;
  std::string split = "val";
  std::optional<std::string> data_root;
  std::string out;  // empty: <checkpoint dir>/eval_<split>.csv
};

struct PredictOptions {
  std::string checkpoint;
  std::string scan;  // KITTI .bin, S3DIS room dir, or synthetic:<seed>
  std::string out;
};

struct AblateOptions {
  ExperimentFlags experiment;
  std::string out;  // empty: stdout only
};

struct PlotDistanceOptions {
  std::string checkpoint;
  std::vector<double> bins{0, 10, 20, 30, 40, 50};
  std::string split = "val";
  std::optional<std::string> data_root;
  std::string out;  // empty: stdout only
};

struct BenchOptions {
  std::vector<std::size_t> points{10000, 100000, 1000000};
  bool knn = true;
  bool conv = true;
  std::uint64_t seed = 0;
  std::string out;
};

// Each command returns an exit code; diagnostics go to `err`.
int cmd_train(const TrainOptions& o, std::ostream& out, std::ostream& err);
int cmd_eval(const EvalOptions& o, std::ostream& out, std::ostream& err);
int cmd_predict(const PredictOptions& o, std::ostream& out, std::ostream& err);
int cmd_ablate(const AblateOptions& o, std::ostream& out, std::ostream& err);
int cmd_plot_distance(const PlotDistanceOptions& o, std::ostream& out, std::ostream& err);
int cmd_bench(const BenchOptions& o, std::ostream& out, std::ostream& err);

/// Argument parsing front end used by the executable.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mssnet::cli
