#pragma once

#include "bbs/dataset.hpp"
#include "bbs/eval.hpp"
#include "bbs/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace bbs {

/// Margin used when a config names a loss without giving m.
[[nodiscard]] double default_margin(LossMethod method);
/// Scale used when a config names a loss without giving s.
inline constexpr double kDefaultScale = 16.0;

/// CSV with columns epoch,lr,r,mean_loss,wall_ms; r is blank for the baselines.
[[nodiscard]] std::string train_log_csv(const std::vector<EpochLog>& log);
void write_text(const std::filesystem::path& path, const std::string& text);

/// Parses a split probability spec: "geometric", "overlap:R" or a comma-separated list.
[[nodiscard]] std::vector<double> parse_probs(const std::string& text, std::size_t parts);

struct GenerationSpec {
  std::size_t num_classes = 500;      // identities used for training
  std::size_t heldout_classes = 100;  // extra identities used only for evaluation
  std::size_t samples_per_class = 20;
  std::size_t dim = 32;
  double spread = 0.1;
};

struct SplitSetting {
  std::string name;
  std::size_t parts = 2;
  std::string probs = "overlap:0.1";
};

enum class Protocol { Pairs, Retrieval };
[[nodiscard]] Protocol parse_protocol(std::string_view name);
[[nodiscard]] std::string_view to_string(Protocol p);

struct EvalSpec {
  Protocol protocol = Protocol::Pairs;
  std::vector<double> fars{1e-2, 1e-3};
  std::size_t pairs_per_kind = 3000;
};

/// Seeds per run are derived from one run seed, so every source of randomness is named:
///   data = derive(run, 1), split = derive(run, 2), train = derive(run, 3), pairs = derive(run, 4)
[[nodiscard]] std::uint64_t derive_seed(std::uint64_t run_seed, std::uint64_t stage);

struct ExperimentConfig {
  std::filesystem::path output_dir = "out";
  GenerationSpec generation;
  std::vector<SplitSetting> splits;
  std::vector<TrainMode> modes{TrainMode::Baseline1, TrainMode::Baseline2, TrainMode::Bbs};
  TrainConfig train;  // template; mode and seed are overwritten per run
  EvalSpec eval;
  std::vector<std::uint64_t> seeds{1};
  bool save_artifacts = true;  // basket, model and log files per run

  void validate() const;
};

[[nodiscard]] ExperimentConfig experiment_from_json(const nlohmann::json& j);
[[nodiscard]] ExperimentConfig load_experiment(const std::filesystem::path& path);

/// Metric names and values for one evaluated model.
struct MetricRow {
  std::vector<std::string> names;
  std::vector<double> values;
};

/// Pairs protocol: accuracy plus TAR@FAR per entry of `fars`. Retrieval: top1, top5, mAP.
[[nodiscard]] MetricRow evaluate(const ModelParams& model, const LabeledSet& heldout,
                                 const EvalSpec& spec, std::uint64_t seed);

struct SummaryRow {
  std::string split;
  TrainMode mode;
  double measured_overlap = 0.0;
  MetricRow metrics;  // median over seeds
};

struct Summary {
  std::vector<SummaryRow> rows;

  [[nodiscard]] std::string to_csv() const;
  [[nodiscard]] std::string to_markdown() const;
};

/// generate -> split -> train each mode -> eval, for every split and seed. Writes
/// summary.csv and summary.md to the output directory. Errors are rethrown as
/// StageError naming the failing stage.
[[nodiscard]] Summary run_experiment(const ExperimentConfig& config);

class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::exception& cause, bool validation);
  [[nodiscard]] const std::string& stage() const { return stage_; }
  /// True when the cause was a validation or format problem.
  [[nodiscard]] bool validation() const { return validation_; }

 private:
  std::string stage_;
  bool validation_;
};

struct BenchSpec {
  std::vector<std::size_t> class_counts{100000, 200000};
  std::vector<std::size_t> shard_counts{1, 2, 4, 8};
  std::size_t dim = 128;
  std::size_t batch = 8;
  std::size_t steps = 3;
  std::size_t baskets = 2;
  std::uint64_t seed = 0;
};

struct BenchRow {
  std::size_t num_classes = 0;
  std::size_t shards = 0;
  double images_per_second = 0.0;
  std::size_t peak_resident_bytes = 0;
  std::string error;  // empty on success
};

/// Loss and gradient throughput of the sharded engine per (class count, shard count).
/// An allocation failure is recorded in its row and the run continues.
[[nodiscard]] std::vector<BenchRow> bench(const BenchSpec& spec);
[[nodiscard]] std::string bench_csv(const std::vector<BenchRow>& rows);

/// Peak resident set size of this process, 0 when unavailable.
[[nodiscard]] std::size_t peak_resident_bytes();
/// Restarts the peak resident measurement where the kernel allows it.
void reset_peak_resident();
/// MemAvailable from /proc/meminfo, 0 when unavailable.
[[nodiscard]] std::size_t available_memory_bytes();

}  // namespace bbs
