#include "bbs/experiment.hpp"

#include "bbs/error.hpp"
#include "bbs/model_io.hpp"
#include "bbs/parallel.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <map>
#include <new>
#include <random>
#include <set>
#include <sstream>

namespace bbs {

using nlohmann::json;

namespace {

void check_keys(const json& obj, const char* where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ValidationError(std::string(where) + " must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : obj.items()) {
    if (!ok.contains(key)) throw ValidationError(std::string(where) + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read_opt(const json& obj, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad value for '") + key + "': " + e.what());
  }
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string far_label(double far) { return fmt::format("tar@far={:g}", far); }

TrainConfig train_from_json(const json& j) {
  check_keys(j, "train",
             {"loss", "s", "m", "bias", "tau", "tr", "epochs", "lr", "momentum", "weight_decay",
              "lr_drops", "batch", "shards", "hidden", "embed_dim"});
  TrainConfig t;
  std::string loss_name(to_string(t.loss.method));
  read_opt(j, "loss", loss_name);
  const LossMethod method = parse_loss_method(loss_name);
  double s = method == t.loss.method ? t.loss.scale : kDefaultScale;
  double m = method == t.loss.method ? t.loss.margin : default_margin(method);
  bool bias = false;
  read_opt(j, "s", s);
  read_opt(j, "m", m);
  read_opt(j, "bias", bias);
  t.loss = LossConfig::make(method, s, m, bias);
  read_opt(j, "tau", t.tau);
  read_opt(j, "tr", t.drop_every);
  read_opt(j, "epochs", t.epochs);
  read_opt(j, "lr", t.optimizer.lr0);
  read_opt(j, "momentum", t.optimizer.momentum);
  read_opt(j, "weight_decay", t.optimizer.weight_decay);
  read_opt(j, "lr_drops", t.optimizer.lr_drop_epochs);
  read_opt(j, "batch", t.batch_size);
  read_opt(j, "shards", t.shards);
  read_opt(j, "hidden", t.backbone.hidden);
  read_opt(j, "embed_dim", t.backbone.embed_dim);
  return t;
}

// Stage wrapper: runs fn and rethrows failures as StageError.
template <typename Fn>
auto stage(const std::string& name, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const ValidationError& e) {
    throw StageError(name, e, true);
  } catch (const FormatError& e) {
    throw StageError(name, e, true);
  } catch (const std::exception& e) {
    throw StageError(name, e, false);
  }
}

}  // namespace

double default_margin(LossMethod method) {
  switch (method) {
    case LossMethod::LSoftmax:
    case LossMethod::SphereFace: return 2.0;
    case LossMethod::CosFace:
    case LossMethod::ArcFace: return 0.1;
    default: return 0.0;
  }
}

std::string train_log_csv(const std::vector<EpochLog>& log) {
  std::string out = "epoch,lr,r,mean_loss,wall_ms\n";
  for (const auto& e : log) {
    out += fmt::format("{},{:g},{},{:.17g},{:.3f}\n", e.epoch, e.lr,
                       e.ratio ? fmt::format("{:g}", *e.ratio) : std::string(), e.mean_loss,
                       e.wall_ms);
  }
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError(FormatError::Kind::Io, "cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw FormatError(FormatError::Kind::Io, "write failed for " + path.string());
}

std::vector<double> parse_probs(const std::string& text, std::size_t parts) {
  if (parts < 1) throw ValidationError("a split needs at least one part");
  if (text == "geometric") return geometric_probs(parts);
  if (text.starts_with("overlap:")) {
    if (parts != 2) throw ValidationError("overlap:R splits need exactly 2 parts");
    double r = 0.0;
    try {
      std::size_t used = 0;
      r = std::stod(text.substr(8), &used);
      if (used != text.size() - 8) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw ValidationError("cannot parse overlap ratio in '" + text + "'");
    }
    return overlap_probs(r);
  }
  std::vector<double> probs;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      probs.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw ValidationError("cannot parse probability '" + item + "'");
    }
  }
  if (probs.size() != parts) {
    throw ValidationError(fmt::format("expected {} probabilities, got {}", parts, probs.size()));
  }
  SplitSpec{probs, 0}.validate();
  return probs;
}

Protocol parse_protocol(std::string_view name) {
  if (name == "pairs") return Protocol::Pairs;
  if (name == "retrieval") return Protocol::Retrieval;
  throw ValidationError("unknown protocol '" + std::string(name) + "'");
}

std::string_view to_string(Protocol p) { return p == Protocol::Pairs ? "pairs" : "retrieval"; }

std::uint64_t derive_seed(std::uint64_t run_seed, std::uint64_t stage) {
  // splitmix64 of the run seed offset by the stage
  std::uint64_t z = run_seed + stage * 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

void ExperimentConfig::validate() const {
  if (generation.num_classes < 1) throw ValidationError("num_classes must be positive");
  if (generation.heldout_classes < 2) throw ValidationError("need at least 2 held-out classes");
  if (generation.samples_per_class < 2) throw ValidationError("need at least 2 samples per class");
  if (generation.dim < 1) throw ValidationError("dim must be positive");
  if (!(generation.spread >= 0.0)) throw ValidationError("spread must be >= 0");
  if (splits.empty()) throw ValidationError("experiment needs at least one split");
  std::set<std::string> names;
  for (const auto& s : splits) {
    if (s.name.empty()) throw ValidationError("split names must be nonempty");
    if (!names.insert(s.name).second) throw ValidationError("duplicate split name '" + s.name + "'");
    (void)parse_probs(s.probs, s.parts);
  }
  if (modes.empty()) throw ValidationError("experiment needs at least one mode");
  if (seeds.empty()) throw ValidationError("experiment needs at least one seed");
  train.validate();
  if (eval.pairs_per_kind < 1) throw ValidationError("pairs_per_kind must be positive");
  for (double f : eval.fars) {
    if (!(f > 0.0 && f <= 1.0)) throw ValidationError("FAR values must be in (0, 1]");
  }
}

ExperimentConfig experiment_from_json(const json& j) {
  check_keys(j, "config",
             {"output_dir", "generation", "splits", "modes", "train", "eval", "seeds",
              "save_artifacts"});
  ExperimentConfig c;
  std::string out = c.output_dir.string();
  read_opt(j, "output_dir", out);
  c.output_dir = out;
  if (j.contains("generation")) {
    const auto& g = j.at("generation");
    check_keys(g, "generation",
               {"num_classes", "heldout_classes", "samples_per_class", "dim", "spread"});
    read_opt(g, "num_classes", c.generation.num_classes);
    read_opt(g, "heldout_classes", c.generation.heldout_classes);
    read_opt(g, "samples_per_class", c.generation.samples_per_class);
    read_opt(g, "dim", c.generation.dim);
    read_opt(g, "spread", c.generation.spread);
  }
  if (!j.contains("splits") || !j.at("splits").is_array()) {
    throw ValidationError("config needs a 'splits' array");
  }
  for (const auto& s : j.at("splits")) {
    check_keys(s, "split", {"name", "parts", "probs"});
    SplitSetting setting;
    read_opt(s, "name", setting.name);
    read_opt(s, "parts", setting.parts);
    read_opt(s, "probs", setting.probs);
    c.splits.push_back(std::move(setting));
  }
  if (j.contains("modes")) {
    std::vector<std::string> names;
    read_opt(j, "modes", names);
    c.modes.clear();
    for (const auto& n : names) c.modes.push_back(parse_train_mode(n));
  }
  if (j.contains("train")) c.train = train_from_json(j.at("train"));
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    check_keys(e, "eval", {"protocol", "far", "pairs_per_kind"});
    std::string protocol(to_string(c.eval.protocol));
    read_opt(e, "protocol", protocol);
    c.eval.protocol = parse_protocol(protocol);
    read_opt(e, "far", c.eval.fars);
    read_opt(e, "pairs_per_kind", c.eval.pairs_per_kind);
  }
  read_opt(j, "seeds", c.seeds);
  read_opt(j, "save_artifacts", c.save_artifacts);
  c.validate();
  return c;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(FormatError::Kind::Io, "cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return experiment_from_json(j);
}

MetricRow evaluate(const ModelParams& model, const LabeledSet& heldout, const EvalSpec& spec,
                   std::uint64_t seed) {
  const auto items = embed_all(model, heldout);
  MetricRow row;
  if (spec.protocol == Protocol::Pairs) {
    const auto pairs = make_pairs(items, spec.pairs_per_kind, seed);
    const auto scored = score_pairs(pairs);
    row.names.push_back("accuracy");
    row.values.push_back(verification_accuracy(scored));
    for (double far : spec.fars) {
      row.names.push_back(far_label(far));
      row.values.push_back(tar_at_far(scored, far).tar);
    }
  } else {
    const auto rs = make_retrieval(items);
    row.names = {"top1", "top5", "map"};
    row.values = {cmc_topk(rs, 1), cmc_topk(rs, 5), mean_ap(rs)};
  }
  return row;
}

std::string Summary::to_csv() const {
  std::string out = "split,mode,overlap";
  if (!rows.empty()) {
    for (const auto& n : rows.front().metrics.names) out += "," + n;
  }
  out += "\n";
  for (const auto& r : rows) {
    out += fmt::format("{},{},{:.4f}", r.split, to_string(r.mode), r.measured_overlap);
    for (double v : r.metrics.values) out += fmt::format(",{:.6f}", v);
    out += "\n";
  }
  return out;
}

std::string Summary::to_markdown() const {
  if (rows.empty()) return "";
  std::string out = "| split | mode | overlap |";
  std::string rule = "|---|---|---|";
  for (const auto& n : rows.front().metrics.names) {
    out += " " + n + " (%) |";
    rule += "---|";
  }
  out += "\n" + rule + "\n";
  for (const auto& r : rows) {
    out += fmt::format("| {} | {} | {:.3f} |", r.split, to_string(r.mode), r.measured_overlap);
    for (double v : r.metrics.values) out += fmt::format(" {:.2f} |", 100.0 * v);
    out += "\n";
  }
  return out;
}

StageError::StageError(std::string stage, const std::exception& cause, bool validation)
    : std::runtime_error(stage + ": " + cause.what()), stage_(std::move(stage)),
      validation_(validation) {}

Summary run_experiment(const ExperimentConfig& config) {
  stage("config", [&] { config.validate(); });
  const auto& gen = config.generation;
  const auto out_dir = config.output_dir;
  stage("output", [&] { std::filesystem::create_directories(out_dir); });

  // values[split][mode][metric] over seeds
  std::vector<std::vector<std::vector<std::vector<double>>>> values(
      config.splits.size(), std::vector<std::vector<std::vector<double>>>(config.modes.size()));
  std::vector<std::vector<double>> overlaps(config.splits.size());
  std::vector<std::string> metric_names;

  for (std::uint64_t run : config.seeds) {
    const std::string tag = fmt::format("seed {}", run);
    const auto data = stage("generate (" + tag + ")", [&] {
      return gen_synthetic(gen.num_classes + gen.heldout_classes, gen.samples_per_class, gen.dim,
                           gen.spread, derive_seed(run, 1));
    });
    const auto limit = static_cast<std::uint32_t>(gen.num_classes);
    const LabeledSet train_set = filter_classes(data, [&](std::uint32_t c) { return c <= limit; });
    const LabeledSet heldout = filter_classes(data, [&](std::uint32_t c) { return c > limit; });

    for (std::size_t si = 0; si < config.splits.size(); ++si) {
      const auto& split = config.splits[si];
      const std::string where = fmt::format("{}, {}", split.name, tag);
      const auto run_dir = out_dir / split.name / fmt::format("seed_{}", run);
      const BasketSet baskets = stage("split (" + where + ")", [&] {
        SplitSpec spec{parse_probs(split.probs, split.parts), derive_seed(run, 2)};
        return split_dataset(train_set, spec);
      });
      overlaps[si].push_back(baskets.baskets.size() >= 2 ? mean_pairwise_overlap(baskets) : 1.0);
      if (config.save_artifacts) {
        stage("save baskets (" + where + ")", [&] {
          std::filesystem::create_directories(run_dir);
          save_baskets(run_dir / "baskets.bbs", baskets);
          save_baskets(run_dir / "heldout.bbs", as_single_basket(heldout));
        });
      }

      for (std::size_t mi = 0; mi < config.modes.size(); ++mi) {
        const auto mode = config.modes[mi];
        const std::string label = fmt::format("{} ({})", to_string(mode), where);
        TrainConfig tc = config.train;
        tc.mode = mode;
        tc.seed = derive_seed(run, 3);
        const TrainResult result = stage("train " + label, [&] { return train(tc, baskets); });
        if (config.save_artifacts) {
          stage("save model " + label, [&] {
            const std::string stem(to_string(mode));
            save_model(run_dir / (stem + ".bbsm"),
                       {result.loss, result.model, result.space, result.classifier});
            write_text(run_dir / (stem + "_log.csv"), train_log_csv(result.log));
          });
        }
        const MetricRow metrics = stage("eval " + label, [&] {
          return evaluate(result.model, heldout, config.eval, derive_seed(run, 4));
        });
        metric_names = metrics.names;
        auto& slot = values[si][mi];
        slot.resize(metrics.values.size());
        for (std::size_t k = 0; k < metrics.values.size(); ++k) slot[k].push_back(metrics.values[k]);
      }
    }
  }

  Summary summary;
  for (std::size_t si = 0; si < config.splits.size(); ++si) {
    for (std::size_t mi = 0; mi < config.modes.size(); ++mi) {
      SummaryRow row{config.splits[si].name, config.modes[mi], median(overlaps[si]), {}};
      row.metrics.names = metric_names;
      for (const auto& per_seed : values[si][mi]) row.metrics.values.push_back(median(per_seed));
      summary.rows.push_back(std::move(row));
    }
  }
  stage("write summary", [&] {
    write_text(out_dir / "summary.csv", summary.to_csv());
    write_text(out_dir / "summary.md", summary.to_markdown());
  });
  return summary;
}

std::size_t peak_resident_bytes() {
  std::ifstream in("/proc/self/status");
  std::string line;
  while (std::getline(in, line)) {
    if (line.starts_with("VmHWM:")) return std::stoull(line.substr(6)) * 1024;
  }
  return 0;
}

void reset_peak_resident() {
  std::ofstream out("/proc/self/clear_refs");
  if (out) out << "5";
}

std::size_t available_memory_bytes() {
  std::ifstream in("/proc/meminfo");
  std::string line;
  while (std::getline(in, line)) {
    if (line.starts_with("MemAvailable:")) return std::stoull(line.substr(13)) * 1024;
  }
  return 0;
}

namespace {

BenchRow bench_cell(const BenchSpec& spec, std::size_t num_classes, std::size_t shards) {
  BenchRow row;
  row.num_classes = num_classes;
  row.shards = shards;
  const auto dim = static_cast<Index>(spec.dim);

  std::vector<std::size_t> sizes(spec.baskets, num_classes / spec.baskets);
  sizes.back() += num_classes % spec.baskets;
  const LabelSpace space = build_label_space(sizes);
  const LossConfig cfg = LossConfig::make(LossMethod::ArcFace, kDefaultScale, 0.1);

  // Shards are filled in place so no full-width copy of the classifier ever exists.
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  ShardedClassifier clf;
  clf.layout = shard_layout(num_classes, shards);
  for (const auto& range : clf.layout.ranges) {
    Classifier block(dim, static_cast<Index>(range.size()));
    for (Index j = 0; j < block.num_classes(); ++j) {
      for (Index r = 0; r < dim; ++r) block.weights(r, j) = normal(rng);
    }
    clf.shards.push_back(std::move(block));
  }
  auto grads = zero_shard_grads(clf);
  ParallelBbs engine(space, clf.layout, cfg);
  const std::vector<std::size_t> tau(spec.baskets, 2);
  std::uniform_int_distribution<std::size_t> pick(1, num_classes);

  std::vector<Vector> batch(spec.batch);
  std::vector<std::size_t> targets(spec.batch);
  for (std::size_t i = 0; i < spec.batch; ++i) {
    batch[i] = Vector(dim);
    for (Index r = 0; r < dim; ++r) batch[i](r) = normal(rng);
    batch[i].normalize();
    targets[i] = pick(rng);
  }
  Vector d_x(dim);
  const auto started = std::chrono::steady_clock::now();
  for (std::size_t step = 0; step < spec.steps; ++step) {
    for (auto& g : grads) {
      g.weights.setZero();
      g.bias.setZero();
    }
    for (std::size_t i = 0; i < spec.batch; ++i) {
      d_x.setZero();
      const Owner owner = space.locate(targets[i]);
      (void)engine.accumulate(clf, batch[i], targets[i], owner.basket, {tau, 0.5},
                              1.0 / static_cast<double>(spec.batch), grads, d_x);
    }
  }
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  row.images_per_second = static_cast<double>(spec.steps * spec.batch) / seconds;
  row.peak_resident_bytes = peak_resident_bytes();
  return row;
}

}  // namespace

std::vector<BenchRow> bench(const BenchSpec& spec) {
  if (spec.class_counts.empty() || spec.shard_counts.empty()) {
    throw ValidationError("bench needs at least one class count and one shard count");
  }
  if (spec.dim < 1 || spec.batch < 1 || spec.steps < 1 || spec.baskets < 1) {
    throw ValidationError("bench dim, batch, steps and baskets must be positive");
  }
  for (auto n : spec.class_counts) {
    if (n < spec.baskets) throw ValidationError("every basket needs at least one class");
  }
  for (auto g : spec.shard_counts) {
    if (g < 1) throw ValidationError("shard counts must be positive");
  }
  std::vector<BenchRow> rows;
  for (auto n : spec.class_counts) {
    for (auto g : spec.shard_counts) {
      reset_peak_resident();
      try {
        rows.push_back(bench_cell(spec, n, g));
      } catch (const std::bad_alloc&) {
        BenchRow failed;
        failed.num_classes = n;
        failed.shards = g;
        failed.peak_resident_bytes = peak_resident_bytes();
        failed.error = "allocation failed";
        rows.push_back(failed);
      }
    }
  }
  return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::string out = "num_classes,G,images_per_second,peak_resident_bytes,error\n";
  for (const auto& r : rows) {
    out += fmt::format("{},{},{:.3f},{},{}\n", r.num_classes, r.shards, r.images_per_second,
                       r.peak_resident_bytes, r.error);
  }
  return out;
}

}  // namespace bbs
