#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ccds/model.hpp"
#include "ccds/road_network.hpp"
#include "ccds/traffic.hpp"

namespace ccds {

// Per-channel z-score statistics, fit on the training split. NaN readings are ignored.
struct Normalizer {
  std::vector<double> mean;
  std::vector<double> std;

  static Normalizer fit(const Tensor& series);  // series [T, N, C]
  // (x - mean) / std per channel; NaN stays NaN.
  Tensor apply(const Tensor& x) const;
  Tensor invert(const Tensor& z) const;

  void store(Checkpoint& ckpt) const;
  static Normalizer restore(const Checkpoint& ckpt);
};

struct SplitSpec {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;

  static SplitSpec for_layout(Layout layout);  // 6:2:2 graph, 7:1:2 grid
  void validate() const;
};

// Half-open step ranges of the three chronological parts.
struct SplitRanges {
  std::size_t train_begin = 0, train_end = 0;
  std::size_t val_begin = 0, val_end = 0;
  std::size_t test_begin = 0, test_end = 0;
};

SplitRanges split_ranges(std::size_t steps, const SplitSpec& spec);

// Start offsets s (absolute steps) of every window [s, s+h) -> [s+h, s+h+h') fully inside [begin, end).
// DataError when the range is shorter than h + h_out.
std::vector<std::size_t> make_windows(std::size_t begin, std::size_t end, std::size_t h, std::size_t h_out,
                                      std::size_t stride = 1);

// Mean |pred - target| over entries where valid == 1; an empty mask gives 0 and a warning on stderr.
Var masked_mae_loss(const Var& pred, const Tensor& target, const Tensor& valid);

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam step; `step` is the 1-based update count.
void adam_update(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, long step, const AdamHyper& hp);

// Adam over the trainable entries of a ParameterStore.
class Adam {
 public:
  Adam(const ParameterStore& store, AdamHyper hp);

  void step(ParameterStore& store);
  long steps() const { return step_; }
  const AdamHyper& hyper() const { return hp_; }

  void store(Checkpoint& ckpt, const ParameterStore& params) const;
  void restore(const Checkpoint& ckpt, const ParameterStore& params);

 private:
  AdamHyper hp_;
  long step_ = 0;
  std::vector<Tensor> m_, v_;  // aligned with store entries; empty for frozen ones
};

enum class EvalMode { Graph, Grid };

EvalMode parse_eval_mode(const std::string& text);
std::string to_string(EvalMode mode);

struct MetricReport {
  double mae = 0.0;
  double mape = 0.0;  // percent
  double rmse = 0.0;
  std::size_t count = 0;
};

// Denormalized pred/target with channels on the last axis. NaN targets are skipped.
// Graph: one pass over every point, MAPE skipping |y| < 1. Grid: points with y < 10 dropped,
// metrics per channel then averaged.
MetricReport evaluate(const Tensor& pred, const Tensor& target, EvalMode mode);

struct TrainConfig {
  std::size_t batch_size = 8;
  std::size_t epochs = 30;
  std::size_t patience = 5;
  std::size_t max_steps = 0;  // 0: no limit
  AdamHyper adam;
  SplitSpec split;
  bool split_set = false;  // false: use the layout default
  std::uint64_t seed = 1;

  static TrainConfig from_kv(const KeyValues& kv);
  void to_kv(KeyValues& kv) const;
  static const std::vector<std::string>& keys();
};

// Rejects keys owned by neither ModelConfig nor TrainConfig.
void check_config_keys(const KeyValues& kv);

// Everything derived once per bundle: splits, statistics, graph context, windows.
struct PreparedData {
  RoadNetwork net;
  TrafficTensor raw;   // original values, NaN for missing
  Tensor normalized;   // [T, N, C], NaN imputed with the training mean before scaling
  Normalizer norm;
  GraphContext graph;
  SplitRanges ranges;
  std::vector<std::size_t> train_windows, val_windows, test_windows;
  std::size_t input_len = 0, horizon = 0;
};

// `fixed_norm` replaces the statistics fit on the training split (used when evaluating a checkpoint).
PreparedData prepare_data(const RoadNetwork& net, const TrafficTensor& series, const ModelConfig& cfg,
                          const SplitSpec& split, const Normalizer* fixed_norm = nullptr);

struct Batch {
  Tensor x;       // [B, h, N, C] normalized
  Tensor target;  // [B, h', N, C] normalized, 0 where missing
  Tensor valid;   // [B, h', N, C] 1 where the raw target exists
  std::vector<TemporalIndex> time;
};

Batch make_batch(const PreparedData& data, const std::vector<std::size_t>& starts);

// Denormalized predictions and raw targets for windows, each [W, h', N, C].
struct Predictions {
  Tensor pred;
  Tensor truth;
};

Predictions predict(const Model& model, const PreparedData& data, const std::vector<std::size_t>& starts,
                    std::size_t batch_size = 32);
// Repeats the last observed input step over the horizon.
Predictions predict_last(const PreparedData& data, const std::vector<std::size_t>& starts);

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double train_loss = 0.0;  // mean over the epoch's steps
  MetricReport val;
};

struct TrainResult {
  std::vector<double> loss_trace;  // one entry per optimizer step
  std::vector<EpochRecord> epochs;
  double best_val_mae = 0.0;
  std::size_t best_epoch = 0;
  Checkpoint best;  // parameters, normalizer and optimizer state at the best validation epoch
};

// Shuffle (seeded) -> batches -> forward -> loss -> backward -> Adam, validating after every epoch.
// Stops early after `patience` epochs without validation improvement. The model ends up holding
// the best-validation parameters. A non-finite loss raises NumericError.
TrainResult train_loop(Model& model, const PreparedData& data, const TrainConfig& cfg, EvalMode mode);

std::string epochs_csv(const std::vector<EpochRecord>& epochs);
std::string metrics_csv(const MetricReport& r);

}  // namespace ccds
