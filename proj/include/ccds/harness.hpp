#pragma once

#include <string>
#include <vector>

#include "ccds/keyvalue.hpp"
#include "ccds/model.hpp"
#include "ccds/road_network.hpp"
#include "ccds/traffic.hpp"
#include "ccds/train.hpp"

namespace ccds {

// A dataset directory: meta.txt, nodes.csv, edges.csv, flow.csv.
struct Bundle {
  RoadNetwork net;
  TrafficTensor series;
};

void write_bundle(const std::string& dir, const Bundle& bundle);
// Flow rows absent for a (step, node) pair and empty fields read as NaN.
// Unknown nodes, step gaps and ragged rows raise DataError with file and line.
Bundle read_bundle(const std::string& dir);

struct SyntheticSpec {
  std::size_t nodes = 12;
  std::size_t days = 3;
  int interval_minutes = 5;
  Layout layout = Layout::Graph;
  std::size_t rows = 0, cols = 0;  // grid only; nodes = rows * cols
  std::size_t channels = 1;
  double base = 50.0;
  double amplitude = 200.0;
  double noise = 5.0;              // Gaussian sd
  double event_rate = 2.0;         // expected events per node per day
  double event_magnitude = 80.0;   // flow drop at the event peak
  std::size_t event_duration = 6;  // steps
  std::size_t delay = 3;           // steps until neighbors see the event
  double propagation = 0.6;        // neighbor magnitude factor
  std::uint64_t seed = 7;
  std::string start_time = "2018-01-01T00:00";

  void validate() const;
  static SyntheticSpec from_kv(const KeyValues& kv);
  void to_kv(KeyValues& kv) const;
};

// Double-peak daily profile per node, plus noise, plus congestion events that reach graph
// neighbors `delay` steps later at `propagation` times the magnitude. Values are clamped at 0.
// Profile, noise and events draw from separate streams, so setting event_rate to 0 leaves
// the rest of the series unchanged.
Bundle gen_synthetic(const SyntheticSpec& spec);

// Mean over the leading axis of [S, L, L] weights.
Tensor average_slices(const Tensor& weights);
// Rows of comma-separated values, no header.
std::string matrix_csv(const Tensor& m);
// Binary 8-bit PGM; 0 maps to 0 and the maximum entry to 255.
std::string matrix_pgm(const Tensor& m);

// Averaged attention weights of one site for the window starting at `window_start`.
Tensor capture_attention(const Model& model, const PreparedData& data, std::size_t window_start,
                         const AttentionSite& site);

// Prediction vs truth for one node at horizon step `horizon_step` (1-based) over `starts`.
// Columns: step,timestamp,channel,truth,prediction.
std::string series_csv(const PreparedData& data, const Predictions& p, const std::vector<std::size_t>& starts,
                       std::size_t node, std::size_t horizon_step);

}  // namespace ccds
