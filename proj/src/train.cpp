#include "ccds/train.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <set>

#include "ccds/errors.hpp"
#include "ccds/rng.hpp"

namespace ccds {

// ---- normalizer ---------------------------------------------------------------

Normalizer Normalizer::fit(const Tensor& series) {
  if (series.rank() != 3) throw DimensionError("Normalizer::fit expects [T,N,C], got " + shape_str(series.shape()));
  const std::size_t C = series.dim(2);
  Normalizer n;
  n.mean.assign(C, 0.0);
  n.std.assign(C, 1.0);
  std::vector<std::size_t> count(C, 0);
  for (std::size_t i = 0; i < series.size(); ++i) {
    const double v = series[i];
    if (std::isnan(v)) continue;
    n.mean[i % C] += v;
    ++count[i % C];
  }
  for (std::size_t c = 0; c < C; ++c) {
    if (count[c] == 0) throw DataError("channel " + std::to_string(c) + " has no readings in the training split");
    n.mean[c] /= static_cast<double>(count[c]);
  }
  std::vector<double> var(C, 0.0);
  for (std::size_t i = 0; i < series.size(); ++i) {
    const double v = series[i];
    if (std::isnan(v)) continue;
    const double dv = v - n.mean[i % C];
    var[i % C] += dv * dv;
  }
  for (std::size_t c = 0; c < C; ++c) {
    const double s = std::sqrt(var[c] / static_cast<double>(count[c]));
    n.std[c] = s < 1e-8 ? 1.0 : s;
  }
  return n;
}

Tensor Normalizer::apply(const Tensor& x) const {
  const std::size_t C = mean.size();
  if (x.shape().back() != C) throw DimensionError("Normalizer has " + std::to_string(C) + " channels, input " + shape_str(x.shape()));
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (out[i] - mean[i % C]) / std[i % C];
  return out;
}

Tensor Normalizer::invert(const Tensor& z) const {
  const std::size_t C = mean.size();
  if (z.shape().back() != C) throw DimensionError("Normalizer has " + std::to_string(C) + " channels, input " + shape_str(z.shape()));
  Tensor out = z;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] * std[i % C] + mean[i % C];
  return out;
}

void Normalizer::store(Checkpoint& ckpt) const {
  ckpt.put("norm/mean", Tensor({mean.size()}, mean));
  ckpt.put("norm/std", Tensor({std.size()}, std));
}

Normalizer Normalizer::restore(const Checkpoint& ckpt) {
  const Tensor* m = ckpt.find("norm/mean");
  const Tensor* s = ckpt.find("norm/std");
  if (!m || !s) throw FormatError("checkpoint lacks normalizer statistics (norm/mean, norm/std)");
  if (m->shape() != s->shape()) throw FormatError("norm/mean and norm/std disagree in shape");
  Normalizer n;
  n.mean = m->storage();
  n.std = s->storage();
  return n;
}

// ---- splits and windows -------------------------------------------------------

SplitSpec SplitSpec::for_layout(Layout layout) {
  if (layout == Layout::Grid) return {0.7, 0.1, 0.2};
  return {0.6, 0.2, 0.2};
}

void SplitSpec::validate() const {
  if (train <= 0.0 || val < 0.0 || test < 0.0) throw ConfigError("split ratios must be non-negative with train > 0");
  if (std::abs(train + val + test - 1.0) > 1e-9) {
    throw ConfigError("split ratios sum to " + format_double(train + val + test) + ", expected 1");
  }
}

SplitRanges split_ranges(std::size_t steps, const SplitSpec& spec) {
  spec.validate();
  SplitRanges r;
  const double T = static_cast<double>(steps);
  r.train_end = static_cast<std::size_t>(std::floor(T * spec.train));
  r.val_begin = r.train_end;
  r.val_end = static_cast<std::size_t>(std::floor(T * (spec.train + spec.val)));
  r.val_end = std::clamp(r.val_end, r.val_begin, steps);
  r.test_begin = r.val_end;
  r.test_end = steps;
  return r;
}

std::vector<std::size_t> make_windows(std::size_t begin, std::size_t end, std::size_t h, std::size_t h_out,
                                      std::size_t stride) {
  if (stride == 0) throw ConfigError("window stride must be positive");
  if (end < begin || end - begin < h + h_out) {
    throw DataError(std::to_string(end < begin ? 0 : end - begin) + " steps are fewer than one window of " +
                    std::to_string(h + h_out));
  }
  std::vector<std::size_t> starts;
  for (std::size_t s = begin; s + h + h_out <= end; s += stride) starts.push_back(s);
  return starts;
}

// ---- loss and optimizer -------------------------------------------------------

Var masked_mae_loss(const Var& pred, const Tensor& target, const Tensor& valid) {
  if (pred.shape() != target.shape() || target.shape() != valid.shape()) {
    throw DimensionError("masked_mae_loss: pred " + shape_str(pred.shape()) + ", target " + shape_str(target.shape()) +
                         ", mask " + shape_str(valid.shape()));
  }
  double count = 0.0;
  Tensor clean = target;
  for (std::size_t i = 0; i < valid.size(); ++i) {
    if (valid[i] != 0.0) {
      count += 1.0;
    } else {
      clean[i] = 0.0;
    }
  }
  if (count == 0.0) {
    std::cerr << "warning: masked_mae_loss called with no valid targets\n";
    return Var::constant(Tensor::scalar(0.0));
  }
  Var err = mul(absolute(sub(pred, Var::constant(std::move(clean)))), Var::constant(valid));
  return scale(sum(err), 1.0 / count);
}

void adam_update(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, long step, const AdamHyper& hp) {
  if (param.shape() != grad.shape() || m.shape() != param.shape() || v.shape() != param.shape()) {
    throw ContractError("adam_update: shapes differ (param " + shape_str(param.shape()) + ", grad " +
                        shape_str(grad.shape()) + ", m " + shape_str(m.shape()) + ", v " + shape_str(v.shape()) + ")");
  }
  if (step < 1) throw ContractError("adam_update: step count starts at 1");
  const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * grad[i];
    v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * grad[i] * grad[i];
    const double m_hat = m[i] / c1;
    const double v_hat = v[i] / c2;
    param[i] -= hp.lr * m_hat / (std::sqrt(v_hat) + hp.eps);
  }
}

Adam::Adam(const ParameterStore& store, AdamHyper hp) : hp_(hp) {
  for (const auto& e : store.entries()) {
    if (e.trainable) {
      m_.emplace_back(e.var.shape(), 0.0);
      v_.emplace_back(e.var.shape(), 0.0);
    } else {
      m_.emplace_back();
      v_.emplace_back();
    }
  }
}

void Adam::step(ParameterStore& store) {
  if (store.size() != m_.size()) throw ContractError("Adam state was built for a different parameter store");
  ++step_;
  auto& entries = store.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!entries[i].trainable) continue;
    adam_update(entries[i].var.mutable_value(), entries[i].var.grad(), m_[i], v_[i], step_, hp_);
  }
}

void Adam::store(Checkpoint& ckpt, const ParameterStore& params) const {
  ckpt.put("adam/step", Tensor::scalar(static_cast<double>(step_)));
  const auto& entries = params.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!entries[i].trainable) continue;
    ckpt.put("adam/m/" + entries[i].name, m_[i]);
    ckpt.put("adam/v/" + entries[i].name, v_[i]);
  }
}

void Adam::restore(const Checkpoint& ckpt, const ParameterStore& params) {
  const Tensor* s = ckpt.find("adam/step");
  if (!s) throw FormatError("checkpoint lacks optimizer state (adam/step)");
  step_ = static_cast<long>((*s)[0]);
  const auto& entries = params.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!entries[i].trainable) continue;
    for (auto* slot : {&m_[i], &v_[i]}) {
      const std::string name = (slot == &m_[i] ? "adam/m/" : "adam/v/") + entries[i].name;
      const Tensor* t = ckpt.find(name);
      if (!t) throw FormatError("checkpoint lacks optimizer tensor '" + name + "'");
      if (t->shape() != slot->shape()) throw FormatError("optimizer tensor '" + name + "' has the wrong shape");
      *slot = *t;
    }
  }
}

// ---- metrics ------------------------------------------------------------------

EvalMode parse_eval_mode(const std::string& text) {
  if (text == "graph") return EvalMode::Graph;
  if (text == "grid") return EvalMode::Grid;
  throw ConfigError("unknown evaluation mode '" + text + "' (expected graph or grid)");
}

std::string to_string(EvalMode mode) { return mode == EvalMode::Grid ? "grid" : "graph"; }

namespace {

struct MetricSums {
  double abs = 0.0, sq = 0.0, pct = 0.0;
  std::size_t n = 0, n_pct = 0;

  void add(double y, double yhat) {
    const double e = yhat - y;
    abs += std::abs(e);
    sq += e * e;
    ++n;
    if (std::abs(y) >= 1.0) {
      pct += std::abs(e) / std::abs(y);
      ++n_pct;
    }
  }
  MetricReport report() const {
    MetricReport r;
    r.count = n;
    r.mae = abs / static_cast<double>(n);
    r.rmse = std::sqrt(sq / static_cast<double>(n));
    r.mape = n_pct ? 100.0 * pct / static_cast<double>(n_pct) : 0.0;
    return r;
  }
};

}  // namespace

MetricReport evaluate(const Tensor& pred, const Tensor& target, EvalMode mode) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("evaluate: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
  }
  const std::size_t C = target.shape().back();
  if (mode == EvalMode::Graph) {
    MetricSums s;
    for (std::size_t i = 0; i < target.size(); ++i) {
      if (!std::isnan(target[i])) s.add(target[i], pred[i]);
    }
    if (s.n == 0) throw DataError("no valid target values to evaluate");
    return s.report();
  }
  std::vector<MetricSums> per(C);
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double y = target[i];
    if (std::isnan(y) || y < 10.0) continue;
    per[i % C].add(y, pred[i]);
  }
  MetricReport avg;
  std::size_t used = 0;
  for (const auto& s : per) {
    if (s.n == 0) continue;
    const MetricReport r = s.report();
    avg.mae += r.mae;
    avg.mape += r.mape;
    avg.rmse += r.rmse;
    avg.count += r.count;
    ++used;
  }
  if (used == 0) throw DataError("no target values of at least 10 to evaluate in grid mode");
  avg.mae /= static_cast<double>(used);
  avg.mape /= static_cast<double>(used);
  avg.rmse /= static_cast<double>(used);
  return avg;
}

// ---- config -------------------------------------------------------------------

const std::vector<std::string>& TrainConfig::keys() {
  static const std::vector<std::string> k = {"batch_size", "epochs",    "patience",  "max_steps",
                                             "lr",         "beta1",     "beta2",     "adam_eps",
                                             "split_train", "split_val", "split_test"};
  return k;
}

TrainConfig TrainConfig::from_kv(const KeyValues& kv) {
  TrainConfig c;
  auto size_key = [&](const std::string& key, std::size_t fallback) {
    const std::int64_t v = kv.get_int_or(key, static_cast<std::int64_t>(fallback));
    if (v < 0) throw ConfigError(key + " must be non-negative");
    return static_cast<std::size_t>(v);
  };
  c.batch_size = size_key("batch_size", c.batch_size);
  c.epochs = size_key("epochs", c.epochs);
  c.patience = size_key("patience", c.patience);
  c.max_steps = size_key("max_steps", c.max_steps);
  c.adam.lr = kv.get_double_or("lr", c.adam.lr);
  c.adam.beta1 = kv.get_double_or("beta1", c.adam.beta1);
  c.adam.beta2 = kv.get_double_or("beta2", c.adam.beta2);
  c.adam.eps = kv.get_double_or("adam_eps", c.adam.eps);
  c.seed = static_cast<std::uint64_t>(kv.get_int_or("seed", static_cast<std::int64_t>(c.seed)));
  if (kv.has("split_train") || kv.has("split_val") || kv.has("split_test")) {
    c.split = {kv.get_double("split_train"), kv.get_double("split_val"), kv.get_double("split_test")};
    c.split.validate();
    c.split_set = true;
  }
  if (c.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (c.epochs == 0) throw ConfigError("epochs must be positive");
  if (c.adam.lr < 0.0) throw ConfigError("lr must be non-negative");
  return c;
}

void TrainConfig::to_kv(KeyValues& kv) const {
  kv.set("batch_size", static_cast<std::int64_t>(batch_size));
  kv.set("epochs", static_cast<std::int64_t>(epochs));
  kv.set("patience", static_cast<std::int64_t>(patience));
  kv.set("max_steps", static_cast<std::int64_t>(max_steps));
  kv.set("lr", adam.lr);
  kv.set("beta1", adam.beta1);
  kv.set("beta2", adam.beta2);
  kv.set("adam_eps", adam.eps);
  if (split_set) {
    kv.set("split_train", split.train);
    kv.set("split_val", split.val);
    kv.set("split_test", split.test);
  }
}

void check_config_keys(const KeyValues& kv) {
  std::set<std::string> known(ModelConfig::keys().begin(), ModelConfig::keys().end());
  known.insert(TrainConfig::keys().begin(), TrainConfig::keys().end());
  for (const auto& [key, value] : kv.items()) {
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
  }
}

// ---- data ---------------------------------------------------------------------

PreparedData prepare_data(const RoadNetwork& net, const TrafficTensor& series, const ModelConfig& cfg,
                          const SplitSpec& split, const Normalizer* fixed_norm) {
  if (series.channels() != cfg.channels) {
    throw DataError("data has " + std::to_string(series.channels()) + " channels but the model expects " +
                    std::to_string(cfg.channels));
  }
  if (series.nodes() != net.node_count) {
    throw DataError("flow covers " + std::to_string(series.nodes()) + " nodes, network has " +
                    std::to_string(net.node_count));
  }
  PreparedData d;
  d.net = net;
  d.raw = series;
  d.input_len = cfg.input_len;
  d.horizon = cfg.horizon;
  d.ranges = split_ranges(series.steps(), split);
  const TrafficTensor train = series.slice(d.ranges.train_begin, d.ranges.train_end);
  d.norm = fixed_norm ? *fixed_norm : Normalizer::fit(train.values);
  if (d.norm.mean.size() != series.channels()) throw DataError("normalizer channel count does not match the data");

  Tensor imputed = series.values;
  const std::size_t C = series.channels();
  for (std::size_t i = 0; i < imputed.size(); ++i) {
    if (std::isnan(imputed[i])) imputed[i] = d.norm.mean[i % C];
  }
  d.normalized = d.norm.apply(imputed);
  d.graph = build_graph_context(net, train, cfg);

  const std::size_t h = cfg.input_len, ho = cfg.horizon;
  auto windows = [&](const char* name, std::size_t begin, std::size_t end) {
    try {
      return make_windows(begin, end, h, ho);
    } catch (const DataError& e) {
      throw DataError(std::string(name) + " split: " + e.what());
    }
  };
  d.train_windows = windows("training", d.ranges.train_begin, d.ranges.train_end);
  d.val_windows = windows("validation", d.ranges.val_begin, d.ranges.val_end);
  d.test_windows = windows("test", d.ranges.test_begin, d.ranges.test_end);
  return d;
}

Batch make_batch(const PreparedData& data, const std::vector<std::size_t>& starts) {
  const std::size_t B = starts.size(), h = data.input_len, ho = data.horizon;
  const std::size_t N = data.raw.nodes(), C = data.raw.channels();
  const std::size_t step_size = N * C;
  Batch b;
  b.x = Tensor({B, h, N, C});
  b.target = Tensor({B, ho, N, C});
  b.valid = Tensor({B, ho, N, C});
  b.time.reserve(B * h);
  const auto& norm = data.normalized.storage();
  const auto& raw = data.raw.values.storage();
  for (std::size_t i = 0; i < B; ++i) {
    const std::size_t s = starts[i];
    std::copy_n(norm.begin() + static_cast<long>(s * step_size), h * step_size,
                b.x.storage().begin() + static_cast<long>(i * h * step_size));
    for (std::size_t j = 0; j < ho * step_size; ++j) {
      const std::size_t src = (s + h) * step_size + j;
      const std::size_t dst = i * ho * step_size + j;
      if (std::isnan(raw[src])) continue;
      b.target[dst] = norm[src];
      b.valid[dst] = 1.0;
    }
    for (std::size_t t = 0; t < h; ++t) {
      b.time.push_back(temporal_indices(data.raw.start, s + t, data.raw.interval_minutes));
    }
  }
  return b;
}

namespace {

void copy_truth(const PreparedData& data, const std::vector<std::size_t>& starts, Tensor& truth) {
  const std::size_t ho = data.horizon, step_size = data.raw.nodes() * data.raw.channels();
  for (std::size_t i = 0; i < starts.size(); ++i) {
    std::copy_n(data.raw.values.storage().begin() + static_cast<long>((starts[i] + data.input_len) * step_size),
                ho * step_size, truth.storage().begin() + static_cast<long>(i * ho * step_size));
  }
}

}  // namespace

Predictions predict(const Model& model, const PreparedData& data, const std::vector<std::size_t>& starts,
                    std::size_t batch_size) {
  const std::size_t W = starts.size(), ho = data.horizon, N = data.raw.nodes(), C = data.raw.channels();
  Predictions p{Tensor({W, ho, N, C}), Tensor({W, ho, N, C})};
  const std::size_t per_window = ho * N * C;
  for (std::size_t at = 0; at < W; at += batch_size) {
    const std::vector<std::size_t> chunk(starts.begin() + static_cast<long>(at),
                                         starts.begin() + static_cast<long>(std::min(W, at + batch_size)));
    const Batch b = make_batch(data, chunk);
    const Tensor out = data.norm.invert(model.forward(Var::constant(b.x), b.time, data.graph).value());
    std::copy(out.storage().begin(), out.storage().end(),
              p.pred.storage().begin() + static_cast<long>(at * per_window));
  }
  copy_truth(data, starts, p.truth);
  return p;
}

Predictions predict_last(const PreparedData& data, const std::vector<std::size_t>& starts) {
  const std::size_t W = starts.size(), ho = data.horizon, N = data.raw.nodes(), C = data.raw.channels();
  const std::size_t step_size = N * C;
  Predictions p{Tensor({W, ho, N, C}), Tensor({W, ho, N, C})};
  for (std::size_t i = 0; i < W; ++i) {
    const std::size_t last = starts[i] + data.input_len - 1;
    for (std::size_t j = 0; j < step_size; ++j) {
      const std::size_t c = j % C;
      const double value = data.normalized[last * step_size + j] * data.norm.std[c] + data.norm.mean[c];
      for (std::size_t t = 0; t < ho; ++t) p.pred[(i * ho + t) * step_size + j] = value;
    }
  }
  copy_truth(data, starts, p.truth);
  return p;
}

// ---- training -----------------------------------------------------------------

TrainResult train_loop(Model& model, const PreparedData& data, const TrainConfig& cfg, EvalMode mode) {
  Adam opt(model.params(), cfg.adam);
  Rng rng = Rng(cfg.seed).split(0x7472);
  std::vector<std::size_t> order = data.train_windows;

  TrainResult result;
  result.best_val_mae = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  std::size_t step = 0;
  bool out_of_steps = false;
  for (std::size_t epoch = 1; epoch <= cfg.epochs && !out_of_steps; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    double loss_sum = 0.0;
    std::size_t loss_n = 0;
    for (std::size_t at = 0; at < order.size(); at += cfg.batch_size) {
      const std::vector<std::size_t> starts(order.begin() + static_cast<long>(at),
                                            order.begin() + static_cast<long>(std::min(order.size(), at + cfg.batch_size)));
      const Batch b = make_batch(data, starts);
      model.params().zero_grad();
      Var pred = model.forward(Var::constant(b.x), b.time, data.graph);
      Var loss = masked_mae_loss(pred, b.target, b.valid);
      const double value = loss.value()[0];
      if (!std::isfinite(value)) {
        const auto culprit = first_non_finite(loss);
        throw NumericError("loss became non-finite at step " + std::to_string(step + 1) + "; first non-finite tensor: " +
                           culprit.value_or("<none>"));
      }
      backward(loss);
      opt.step(model.params());
      result.loss_trace.push_back(value);
      loss_sum += value;
      ++loss_n;
      ++step;
      if (cfg.max_steps && step >= cfg.max_steps) {
        out_of_steps = true;
        break;
      }
    }

    const Predictions val = predict(model, data, data.val_windows);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.step = step;
    rec.train_loss = loss_sum / static_cast<double>(std::max<std::size_t>(loss_n, 1));
    rec.val = evaluate(val.pred, val.truth, mode);
    result.epochs.push_back(rec);

    if (rec.val.mae < result.best_val_mae) {
      result.best_val_mae = rec.val.mae;
      result.best_epoch = epoch;
      result.best = checkpoint_from_model(model);
      data.norm.store(result.best);
      opt.store(result.best, model.params());
      stale = 0;
    } else if (++stale >= cfg.patience && cfg.patience > 0) {
      break;
    }
  }
  if (result.best.tensors.empty()) {
    throw NumericError("validation MAE never became finite; no checkpoint to keep");
  }
  load_parameters(model, result.best);
  return result;
}

std::string epochs_csv(const std::vector<EpochRecord>& epochs) {
  std::string out = "epoch,step,train_loss,val_mae,val_mape,val_rmse\n";
  for (const auto& e : epochs) {
    out += std::to_string(e.epoch) + "," + std::to_string(e.step) + "," + format_double(e.train_loss) + "," +
           format_double(e.val.mae) + "," + format_double(e.val.mape) + "," + format_double(e.val.rmse) + "\n";
  }
  return out;
}

std::string metrics_csv(const MetricReport& r) {
  return "mae,mape,rmse,count\n" + format_double(r.mae) + "," + format_double(r.mape) + "," + format_double(r.rmse) +
         "," + std::to_string(r.count) + "\n";
}

}  // namespace ccds
