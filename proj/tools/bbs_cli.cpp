// bbs: command-line front end for basket splitting, training, evaluation and benchmarks.

#include "bbs/dataset.hpp"
#include "bbs/error.hpp"
#include "bbs/eval.hpp"
#include "bbs/experiment.hpp"
#include "bbs/model_io.hpp"
#include "bbs/trainer.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>

#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace {

template <typename T>
std::vector<T> parse_list(const std::string& text, const char* what) {
  std::vector<T> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::stringstream cell(item);
    T v{};
    if (!(cell >> v) || !cell.eof()) {
      throw bbs::ValidationError(fmt::format("cannot parse '{}' in {}", item, what));
    }
    out.push_back(v);
  }
  if (out.empty()) throw bbs::ValidationError(fmt::format("{} is empty", what));
  return out;
}

struct GenerateArgs {
  std::size_t classes = 500;
  std::size_t samples = 20;
  std::size_t dim = 32;
  double spread = 0.1;
  std::uint64_t seed = 0;
  std::string output;
};

struct SplitArgs {
  std::string input;
  std::size_t parts = 2;
  std::string probs;
  std::uint64_t seed = 0;
  std::string output;
};

struct TrainArgs {
  std::string data;
  std::string mode = "bbs";
  std::string loss = "arcface";
  std::optional<double> s;
  std::optional<double> m;
  bool bias = false;
  std::size_t tau = 2;
  std::size_t tr = 2;
  std::size_t epochs = 20;
  double lr = 0.1;
  std::string lr_drops = "5,10,15";
  std::size_t batch = 64;
  std::size_t shards = 1;
  std::string hidden = "64";
  std::size_t embed_dim = 32;
  std::uint64_t seed = 0;
  std::string out;
  std::string log;
};

struct EvalArgs {
  std::string model;
  std::string data;
  std::string protocol = "pairs";
  std::string far = "1e-2,1e-3";
  std::size_t pairs = 3000;
  std::uint64_t seed = 0;
  std::string out;
};

struct BenchArgs {
  std::string classes = "100000,200000";
  std::string shards = "1,2,4,8";
  std::size_t dim = 128;
  std::size_t batch = 8;
  std::size_t steps = 3;
  std::uint64_t seed = 0;
  std::string out;
};

struct GradCheckArgs {
  std::string loss = "arcface";
  std::optional<double> s;
  std::optional<double> m;
  bool bias = false;
  std::string mode = "bbs";
  std::size_t classes = 6;
  std::size_t dim = 4;
  std::size_t embed_dim = 3;
  std::size_t hidden = 5;
  double tolerance = 1e-5;
  std::uint64_t seed = 0;
};

bbs::LossConfig loss_from(const std::string& name, std::optional<double> s, std::optional<double> m,
                          bool bias) {
  const auto method = bbs::parse_loss_method(name);
  return bbs::LossConfig::make(method, s.value_or(bbs::kDefaultScale),
                               m.value_or(bbs::default_margin(method)), bias);
}

void run_generate(const GenerateArgs& a) {
  const auto data = bbs::gen_synthetic(a.classes, a.samples, a.dim, a.spread, a.seed);
  bbs::save_baskets(a.output, bbs::as_single_basket(data));
  std::cout << fmt::format("wrote {} samples of {} classes to {}\n", data.samples.size(), a.classes,
                           a.output);
}

void run_split(const SplitArgs& a) {
  const auto input = bbs::flatten(bbs::load_baskets(a.input));
  const bbs::SplitSpec spec{bbs::parse_probs(a.probs, a.parts), a.seed};
  const auto set = bbs::split_dataset(input, spec);
  bbs::save_baskets(a.output, set);
  for (std::size_t m = 0; m < set.baskets.size(); ++m) {
    std::cout << fmt::format("basket {}: {} classes, {} samples\n", m + 1,
                             set.baskets[m].num_classes(), set.baskets[m].samples.size());
  }
  if (set.baskets.size() >= 2) {
    std::cout << fmt::format("mean pairwise overlap: {:.4f}\n", bbs::mean_pairwise_overlap(set));
  }
}

void run_train(const TrainArgs& a) {
  bbs::TrainConfig tc;
  tc.loss = loss_from(a.loss, a.s, a.m, a.bias);
  tc.mode = bbs::parse_train_mode(a.mode);
  tc.tau = a.tau;
  tc.drop_every = a.tr;
  tc.epochs = a.epochs;
  tc.optimizer.lr0 = a.lr;
  tc.optimizer.lr_drop_epochs = a.lr_drops.empty()
                                    ? std::vector<std::size_t>{}
                                    : parse_list<std::size_t>(a.lr_drops, "--lr-drops");
  tc.batch_size = a.batch;
  tc.shards = a.shards;
  tc.backbone.hidden =
      a.hidden.empty() ? std::vector<std::size_t>{} : parse_list<std::size_t>(a.hidden, "--hidden");
  tc.backbone.embed_dim = a.embed_dim;
  tc.seed = a.seed;

  const auto data = bbs::load_baskets(a.data);
  const auto result = bbs::train(tc, data);
  bbs::save_model(a.out, {result.loss, result.model, result.space, result.classifier});
  if (!a.log.empty()) bbs::write_text(a.log, bbs::train_log_csv(result.log));
  const auto& last = result.log.back();
  std::cout << fmt::format("trained {} epochs, final mean loss {:.6f}; model written to {}\n",
                           last.epoch, last.mean_loss, a.out);
}

void run_eval(const EvalArgs& a) {
  const auto saved = bbs::load_model(a.model);
  const auto data = bbs::flatten(bbs::load_baskets(a.data, static_cast<std::uint32_t>(
                                                              saved.model.input_dim())));
  bbs::EvalSpec spec;
  spec.protocol = bbs::parse_protocol(a.protocol);
  spec.fars = parse_list<double>(a.far, "--far");
  spec.pairs_per_kind = a.pairs;
  const auto row = bbs::evaluate(saved.model, data, spec, a.seed);
  std::string csv = "metric,value\n";
  for (std::size_t i = 0; i < row.names.size(); ++i) {
    csv += fmt::format("{},{:.6f}\n", row.names[i], row.values[i]);
  }
  if (a.out.empty()) {
    std::cout << csv;
  } else {
    bbs::write_text(a.out, csv);
    std::cout << csv;
  }
}

void run_bench(const BenchArgs& a) {
  bbs::BenchSpec spec;
  spec.class_counts = parse_list<std::size_t>(a.classes, "--classes");
  spec.shard_counts = parse_list<std::size_t>(a.shards, "--shards");
  spec.dim = a.dim;
  spec.batch = a.batch;
  spec.steps = a.steps;
  spec.seed = a.seed;
  const auto csv = bbs::bench_csv(bbs::bench(spec));
  if (!a.out.empty()) bbs::write_text(a.out, csv);
  std::cout << csv;
}

int run_gradcheck(const GradCheckArgs& a) {
  bbs::TrainConfig tc;
  tc.loss = loss_from(a.loss, a.s, a.m, a.bias);
  tc.mode = bbs::parse_train_mode(a.mode);
  tc.backbone.hidden = a.hidden == 0 ? std::vector<std::size_t>{} : std::vector<std::size_t>{a.hidden};
  tc.backbone.embed_dim = a.embed_dim;
  tc.seed = a.seed;
  tc.tau = 1;
  const auto data = bbs::gen_synthetic(a.classes, 2, a.dim, 0.3, a.seed);
  const auto set = bbs::split_dataset(data, {bbs::overlap_probs(0.5), a.seed});
  const auto report = bbs::grad_check(tc, set, a.tolerance);
  std::cout << fmt::format("parameters: {}\nmax relative error: {:.3e}\n{}\n", report.num_parameters,
                           report.max_rel_error, report.passed ? "PASS" : "FAIL");
  return report.passed ? 0 : 2;
}

void run_config(const std::string& path) {
  const auto config = bbs::load_experiment(path);
  const auto summary = bbs::run_experiment(config);
  std::cout << summary.to_markdown();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Basket-based softmax: split, train, evaluate and benchmark"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* generate = app.add_subcommand("generate", "Write a synthetic single-basket dataset");
  generate->add_option("--classes", gen.classes, "Number of identities")->capture_default_str();
  generate->add_option("--samples", gen.samples, "Samples per identity")->capture_default_str();
  generate->add_option("--dim", gen.dim, "Feature dimension")->capture_default_str();
  generate->add_option("--spread", gen.spread, "Per-coordinate noise std")->capture_default_str();
  generate->add_option("--seed", gen.seed, "Random seed")->capture_default_str();
  generate->add_option("--output", gen.output, "Basket file to write")->required();

  SplitArgs sp;
  auto* split = app.add_subcommand("split", "Split a dataset into overlapping baskets");
  split->add_option("--input", sp.input, "Basket file to read (basket structure is dropped)")
      ->required();
  split->add_option("--parts", sp.parts, "Number of baskets")->capture_default_str();
  split->add_option("--probs", sp.probs,
                    "Class multiplicity probabilities: comma list, 'geometric' or 'overlap:R'")
      ->required();
  split->add_option("--seed", sp.seed, "Random seed")->capture_default_str();
  split->add_option("--output", sp.output, "Basket file to write")->required();

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Train a backbone and classifier on baskets");
  train->add_option("--data", tr.data, "Basket file")->required();
  train->add_option("--mode", tr.mode, "baseline1 | baseline2 | bbs | pbbs")->capture_default_str();
  train->add_option("--loss", tr.loss,
                    "softmax | lsoftmax | l2softmax | normface | sphereface | cosface | arcface")
      ->capture_default_str();
  train->add_option("--s", tr.s, "Scale (default 16 for scaled losses)");
  train->add_option("--m", tr.m, "Margin (default depends on the loss)");
  train->add_flag("--bias", tr.bias, "Per-class bias (softmax, lsoftmax, l2softmax)");
  train->add_option("--tau", tr.tau, "Minimum ignored classes per basket")->capture_default_str();
  train->add_option("--tr", tr.tr, "Epochs between ignored-ratio drops")->capture_default_str();
  train->add_option("--epochs", tr.epochs, "Training epochs")->capture_default_str();
  train->add_option("--lr", tr.lr, "Initial learning rate")->capture_default_str();
  train->add_option("--lr-drops", tr.lr_drops, "Epochs where the rate drops 10x")
      ->capture_default_str();
  train->add_option("--batch", tr.batch, "Batch size")->capture_default_str();
  train->add_option("--shards", tr.shards, "Worker shards for pbbs")->capture_default_str();
  train->add_option("--hidden", tr.hidden, "Hidden layer widths, comma separated")
      ->capture_default_str();
  train->add_option("--embed-dim", tr.embed_dim, "Embedding dimension")->capture_default_str();
  train->add_option("--seed", tr.seed, "Random seed")->capture_default_str();
  train->add_option("--out", tr.out, "Model file to write")->required();
  train->add_option("--log", tr.log, "Per-epoch CSV log");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Evaluate a model on held-out identities");
  eval->add_option("--model", ev.model, "Model file")->required();
  eval->add_option("--data", ev.data, "Basket file with held-out identities")->required();
  eval->add_option("--protocol", ev.protocol, "pairs | retrieval")->capture_default_str();
  eval->add_option("--far", ev.far, "FAR values for TAR@FAR")->capture_default_str();
  eval->add_option("--pairs", ev.pairs, "Genuine and impostor pairs each")->capture_default_str();
  eval->add_option("--seed", ev.seed, "Pair sampling seed")->capture_default_str();
  eval->add_option("--out", ev.out, "CSV to write");

  BenchArgs be;
  auto* benchmark = app.add_subcommand("bench", "Throughput and memory of the sharded loss");
  benchmark->add_option("--classes", be.classes, "Class counts, comma separated")
      ->capture_default_str();
  benchmark->add_option("--shards", be.shards, "Shard counts, comma separated")
      ->capture_default_str();
  benchmark->add_option("--dim", be.dim, "Embedding dimension")->capture_default_str();
  benchmark->add_option("--batch", be.batch, "Samples per step")->capture_default_str();
  benchmark->add_option("--steps", be.steps, "Timed steps per cell")->capture_default_str();
  benchmark->add_option("--seed", be.seed, "Random seed")->capture_default_str();
  benchmark->add_option("--out", be.out, "CSV to write");

  GradCheckArgs gc;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the training loss");
  gradcheck->add_option("--loss", gc.loss, "Loss method")->capture_default_str();
  gradcheck->add_option("--s", gc.s, "Scale");
  gradcheck->add_option("--m", gc.m, "Margin");
  gradcheck->add_flag("--bias", gc.bias, "Per-class bias");
  gradcheck->add_option("--mode", gc.mode, "Training mode")->capture_default_str();
  gradcheck->add_option("--classes", gc.classes, "Identities in the instance")->capture_default_str();
  gradcheck->add_option("--dim", gc.dim, "Feature dimension")->capture_default_str();
  gradcheck->add_option("--hidden", gc.hidden, "Hidden width, 0 for none")->capture_default_str();
  gradcheck->add_option("--embed-dim", gc.embed_dim, "Embedding dimension")->capture_default_str();
  gradcheck->add_option("--tolerance", gc.tolerance, "Maximum relative error")
      ->capture_default_str();
  gradcheck->add_option("--seed", gc.seed, "Random seed")->capture_default_str();

  std::string config_path;
  auto* run = app.add_subcommand("run", "Run a JSON experiment config end to end");
  run->add_option("--config", config_path, "Experiment JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*generate) run_generate(gen);
    if (*split) run_split(sp);
    if (*train) run_train(tr);
    if (*eval) run_eval(ev);
    if (*benchmark) run_bench(be);
    if (*gradcheck) return run_gradcheck(gc);
    if (*run) run_config(config_path);
  } catch (const bbs::StageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.validation() ? 1 : 2;
  } catch (const bbs::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const bbs::FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
