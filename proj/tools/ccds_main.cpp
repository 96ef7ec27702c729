#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "ccds/errors.hpp"
#include "ccds/harness.hpp"
#include "ccds/keyvalue.hpp"
#include "ccds/model.hpp"
#include "ccds/train.hpp"

namespace fs = std::filesystem;
using namespace ccds;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct TrainArgs {
  std::string data, config, out;
  std::optional<std::uint64_t> seed;
  std::string variant;
};

int run_gen(const std::string& spec_path, const std::string& out, std::optional<std::uint64_t> seed) {
  SyntheticSpec spec = SyntheticSpec::from_kv(KeyValues::read_file(spec_path));
  if (seed) spec.seed = *seed;
  write_bundle(out, gen_synthetic(spec));
  std::cout << "wrote " << out << "\n";
  return 0;
}

SplitSpec resolve_split(const TrainConfig& tc, Layout layout) { return tc.split_set ? tc.split : SplitSpec::for_layout(layout); }

EvalMode mode_for(Layout layout) { return layout == Layout::Grid ? EvalMode::Grid : EvalMode::Graph; }

int run_train(const TrainArgs& a) {
  KeyValues kv = KeyValues::read_file(a.config);
  check_config_keys(kv);
  if (a.seed) kv.set("seed", static_cast<std::int64_t>(*a.seed));
  if (!a.variant.empty()) kv.set("ablation", a.variant);
  const ModelConfig mc = ModelConfig::from_kv(kv);
  TrainConfig tc = TrainConfig::from_kv(kv);
  const Bundle bundle = read_bundle(a.data);
  tc.split = resolve_split(tc, bundle.net.layout);
  tc.split_set = true;
  const EvalMode mode = mode_for(bundle.net.layout);

  const PreparedData data = prepare_data(bundle.net, bundle.series, mc, tc.split);
  Model model(mc);
  TrainResult result = train_loop(model, data, tc, mode);

  fs::create_directories(a.out);
  tc.to_kv(result.best.config);
  save_checkpoint((fs::path(a.out) / "checkpoint.bin").string(), result.best);
  write_file_atomic((fs::path(a.out) / "train_log.csv").string(), epochs_csv(result.epochs));
  std::string trace = "step,loss\n";
  for (std::size_t i = 0; i < result.loss_trace.size(); ++i) {
    trace += std::to_string(i + 1) + "," + format_double(result.loss_trace[i]) + "\n";
  }
  write_file_atomic((fs::path(a.out) / "loss_trace.csv").string(), trace);

  const Predictions test = predict(model, data, data.test_windows);
  const MetricReport report = evaluate(test.pred, test.truth, mode);
  write_file_atomic((fs::path(a.out) / "metrics.csv").string(), metrics_csv(report));
  std::cout << "variant " << to_string(mc.ablation) << ", best epoch " << result.best_epoch << ", val MAE "
            << format_double(result.best_val_mae) << "\n"
            << metrics_csv(report);
  return 0;
}

struct Loaded {
  Checkpoint ckpt;
  ModelConfig mc;
  Bundle bundle;
  PreparedData data;
};

Loaded load_for_inference(const std::string& ckpt_path, const std::string& data_dir) {
  Loaded l;
  l.ckpt = load_checkpoint(ckpt_path);
  try {
    l.mc = ModelConfig::from_kv(l.ckpt.config);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
  const TrainConfig tc = TrainConfig::from_kv(l.ckpt.config);
  l.bundle = read_bundle(data_dir);
  const Normalizer norm = Normalizer::restore(l.ckpt);
  l.data = prepare_data(l.bundle.net, l.bundle.series, l.mc, resolve_split(tc, l.bundle.net.layout), &norm);
  return l;
}

int run_eval(const std::string& ckpt_path, const std::string& data_dir, const std::string& mode_text,
             const std::string& out) {
  Loaded l = load_for_inference(ckpt_path, data_dir);
  Model model(l.mc);
  load_parameters(model, l.ckpt);
  const EvalMode mode = mode_text.empty() ? mode_for(l.bundle.net.layout) : parse_eval_mode(mode_text);
  const Predictions test = predict(model, l.data, l.data.test_windows);
  const std::string csv = metrics_csv(evaluate(test.pred, test.truth, mode));
  if (!out.empty()) write_file_atomic(out, csv);
  std::cout << csv;
  return 0;
}

int run_dump(const std::string& ckpt_path, const std::string& data_dir, std::size_t layer, std::size_t stage,
             std::size_t head, const std::string& kind, std::size_t window, const std::string& out) {
  Loaded l = load_for_inference(ckpt_path, data_dir);
  Model model(l.mc);
  load_parameters(model, l.ckpt);
  if (window >= l.data.test_windows.size()) {
    throw ConfigError("window " + std::to_string(window) + " out of range (" + std::to_string(l.data.test_windows.size()) +
                      " test windows)");
  }
  const AttentionSite site{layer, stage, head, parse_attention_kind(kind)};
  const Tensor m = capture_attention(model, l.data, l.data.test_windows[window], site);
  fs::create_directories(out);
  const std::string stem = "attention_l" + std::to_string(layer) + "_s" + std::to_string(stage) + "_h" +
                           std::to_string(head) + "_" + kind;
  write_file_atomic((fs::path(out) / (stem + ".csv")).string(), matrix_csv(m));
  write_file_atomic((fs::path(out) / (stem + ".pgm")).string(), matrix_pgm(m));
  std::cout << "wrote " << (fs::path(out) / stem).string() << ".{csv,pgm} (" << m.dim(0) << "x" << m.dim(1) << ")\n";
  return 0;
}

int run_export(const std::string& ckpt_path, const std::string& data_dir, std::size_t node, std::size_t horizon_step,
               const std::string& out) {
  Loaded l = load_for_inference(ckpt_path, data_dir);
  Model model(l.mc);
  load_parameters(model, l.ckpt);
  const Predictions test = predict(model, l.data, l.data.test_windows);
  write_file_atomic(out, series_csv(l.data, test, l.data.test_windows, node, horizon_step));
  std::cout << "wrote " << out << "\n";
  return 0;
}

void add_train_flags(CLI::App* cmd, TrainArgs& a) {
  cmd->add_option("--data", a.data, "dataset directory")->required();
  cmd->add_option("--config", a.config, "key=value config file")->required();
  cmd->add_option("--out", a.out, "output directory")->required();
  cmd->add_option("--seed", a.seed, "override the config seed");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Criss-crossed dual-stream rectified-attention traffic forecaster"};
  app.require_subcommand(0, 1);

  std::string spec_path, gen_out;
  std::optional<std::uint64_t> gen_seed;
  auto* gen = app.add_subcommand("gen-synthetic", "generate a synthetic dataset bundle");
  gen->add_option("--spec", spec_path, "synthetic spec (key=value)")->required();
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--seed", gen_seed, "override the spec seed");

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "train a model");
  add_train_flags(train, train_args);

  TrainArgs ablate_args;
  auto* ablate = app.add_subcommand("ablate", "train an ablated variant");
  add_train_flags(ablate, ablate_args);
  ablate->add_option("--variant", ablate_args.variant, "ablation variant")
      ->required()
      ->check(CLI::IsMember({"no_relsa", "no_encov", "no_ccds"}));

  std::string ckpt, data_dir, mode, eval_out;
  std::optional<std::uint64_t> unused_seed;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  eval->add_option("--data", data_dir, "dataset directory")->required();
  eval->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  eval->add_option("--mode", mode, "graph or grid (default: from the dataset layout)")
      ->check(CLI::IsMember({"graph", "grid"}));
  eval->add_option("--out", eval_out, "also write the metrics CSV here");
  eval->add_option("--seed", unused_seed, "accepted for uniformity; evaluation draws no random numbers");

  std::size_t layer = 0, stage = 1, head = 0, window = 0;
  std::string kind, dump_out;
  auto* dump = app.add_subcommand("dump-attention", "write averaged attention weights as CSV and PGM");
  dump->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  dump->add_option("--data", data_dir, "dataset directory")->required();
  dump->add_option("--layer", layer, "encoder layer (0-based)")->required();
  dump->add_option("--stage", stage, "1 or 2")->required()->check(CLI::Range(1, 2));
  dump->add_option("--head", head, "head index within its kind (0-based)")->required();
  dump->add_option("--kind", kind, "ressa, retsa or redasa")->required()->check(CLI::IsMember({"ressa", "retsa", "redasa"}));
  dump->add_option("--window", window, "test window index");
  dump->add_option("--out", dump_out, "output directory")->required();
  dump->add_option("--seed", unused_seed, "accepted for uniformity; no random numbers are drawn");

  std::size_t node = 0, horizon_step = 1;
  std::string series_out;
  auto* exp = app.add_subcommand("export-series", "write prediction vs truth for one node over the test split");
  exp->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  exp->add_option("--data", data_dir, "dataset directory")->required();
  exp->add_option("--node", node, "node index")->required();
  exp->add_option("--horizon", horizon_step, "horizon step (1-based)");
  exp->add_option("--out", series_out, "output CSV file")->required();
  exp->add_option("--seed", unused_seed, "accepted for uniformity; no random numbers are drawn");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }
  if (app.get_subcommands().empty()) {
    std::cerr << app.help();
    return kExitUsage;
  }

  try {
    if (gen->parsed()) return run_gen(spec_path, gen_out, gen_seed);
    if (train->parsed()) return run_train(train_args);
    if (ablate->parsed()) return run_train(ablate_args);
    if (eval->parsed()) return run_eval(ckpt, data_dir, mode, eval_out);
    if (dump->parsed()) return run_dump(ckpt, data_dir, layer, stage, head, kind, window, dump_out);
    if (exp->parsed()) return run_export(ckpt, data_dir, node, horizon_step, series_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "file error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
  return kExitUsage;
}
