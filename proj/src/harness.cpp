#include "ccds/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <unordered_map>

#include "ccds/errors.hpp"
#include "ccds/rng.hpp"

namespace ccds {

namespace fs = std::filesystem;

// ---- csv ----------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) {
    while (!field.empty() && (field.back() == '\r' || field.back() == ' ')) field.pop_back();
    while (!field.empty() && field.front() == ' ') field.erase(field.begin());
    out.push_back(field);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

struct CsvReader {
  std::string path;
  std::ifstream in;
  std::size_t line_no = 0;
  std::vector<std::string> header;

  explicit CsvReader(const fs::path& p) : path(p.string()), in(p) {
    if (!in) throw DataError("cannot open " + path);
    std::string line;
    if (!next_line(line)) throw DataError(path + ": empty file, expected a header row");
    header = split_csv(line);
  }

  bool next_line(std::string& line) {
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) return true;
    }
    return false;
  }

  bool next(std::vector<std::string>& fields) {
    std::string line;
    if (!next_line(line)) return false;
    fields = split_csv(line);
    return true;
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw DataError(path + ":" + std::to_string(line_no) + ": " + msg);
  }

  std::int64_t integer(const std::string& field, const char* what) const {
    try {
      return parse_int(field);
    } catch (const DataError&) {
      fail(std::string("bad ") + what + " '" + field + "'");
    }
  }

  double number(const std::string& field) const {
    try {
      return parse_double(field);
    } catch (const DataError&) {
      fail("bad value '" + field + "'");
    }
  }
};

std::string layout_name(Layout l) { return l == Layout::Grid ? "grid" : "graph"; }

Layout parse_layout(const std::string& s) {
  if (s == "graph") return Layout::Graph;
  if (s == "grid") return Layout::Grid;
  throw DataError("unknown layout '" + s + "' (expected graph or grid)");
}

}  // namespace

// ---- bundle -------------------------------------------------------------------

void write_bundle(const std::string& dir, const Bundle& b) {
  fs::create_directories(dir);
  const TrafficTensor& s = b.series;
  const std::size_t T = s.steps(), N = s.nodes(), C = s.channels();
  if (N != b.net.node_count) throw DataError("series and network disagree on the node count");

  KeyValues meta;
  meta.set("interval_minutes", static_cast<std::int64_t>(s.interval_minutes));
  meta.set("start_time", format_timestamp(s.start));
  meta.set("layout", layout_name(b.net.layout));
  if (b.net.layout == Layout::Grid) {
    meta.set("rows", static_cast<std::int64_t>(b.net.rows));
    meta.set("cols", static_cast<std::int64_t>(b.net.cols));
  }
  meta.set("channels", static_cast<std::int64_t>(C));
  meta.set("nodes", static_cast<std::int64_t>(N));
  meta.set("steps", static_cast<std::int64_t>(T));
  write_file_atomic((fs::path(dir) / "meta.txt").string(), meta.to_text());

  std::string nodes = b.net.layout == Layout::Grid ? "node_id,row,col\n" : "node_id\n";
  for (std::size_t n = 0; n < N; ++n) {
    nodes += std::to_string(n);
    if (b.net.layout == Layout::Grid) nodes += "," + std::to_string(n / b.net.cols) + "," + std::to_string(n % b.net.cols);
    nodes += "\n";
  }
  write_file_atomic((fs::path(dir) / "nodes.csv").string(), nodes);

  std::string edges = "src,dst,cost\n";
  for (const auto& e : b.net.edges) {
    edges += std::to_string(e.src) + "," + std::to_string(e.dst) + "," + format_double(e.cost) + "\n";
  }
  write_file_atomic((fs::path(dir) / "edges.csv").string(), edges);

  std::string flow = "step,node_id";
  for (std::size_t c = 0; c < C; ++c) flow += ",c" + std::to_string(c);
  flow += "\n";
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t n = 0; n < N; ++n) {
      flow += std::to_string(t) + "," + std::to_string(n);
      for (std::size_t c = 0; c < C; ++c) flow += "," + format_double(s.values.at(t, n, c));
      flow += "\n";
    }
  }
  write_file_atomic((fs::path(dir) / "flow.csv").string(), flow);
}

Bundle read_bundle(const std::string& dir) {
  const fs::path root(dir);
  if (!fs::is_directory(root)) throw DataError("dataset directory '" + dir + "' does not exist");
  const KeyValues meta = KeyValues::read_file((root / "meta.txt").string());
  auto meta_int = [&](const std::string& key) {
    try {
      return meta.get_int(key);
    } catch (const ConfigError& e) {
      throw DataError(std::string("meta.txt: ") + e.what());
    }
  };

  Bundle b;
  b.series.interval_minutes = static_cast<int>(meta_int("interval_minutes"));
  if (b.series.interval_minutes <= 0 || 1440 % b.series.interval_minutes != 0) {
    throw DataError("meta.txt: interval_minutes must divide 1440");
  }
  b.series.start = parse_timestamp(meta.get_or("start_time", ""));
  b.net.layout = parse_layout(meta.get_or("layout", "graph"));
  const std::int64_t channels = meta_int("channels");
  if (channels < 1) throw DataError("meta.txt: channels must be at least 1");
  const std::size_t C = static_cast<std::size_t>(channels);

  // nodes
  std::unordered_map<std::int64_t, std::size_t> index;
  {
    CsvReader r(root / "nodes.csv");
    if (r.header.empty() || r.header[0] != "node_id") r.fail("first column must be node_id");
    std::vector<std::string> f;
    while (r.next(f)) {
      if (f.size() != r.header.size()) r.fail("expected " + std::to_string(r.header.size()) + " fields");
      const std::int64_t id = r.integer(f[0], "node id");
      if (index.count(id)) r.fail("duplicate node id " + f[0]);
      index.emplace(id, index.size());
    }
  }
  b.net.node_count = index.size();
  if (b.net.node_count == 0) throw DataError((root / "nodes.csv").string() + ": no nodes");
  if (b.net.layout == Layout::Grid) {
    b.net.rows = static_cast<std::size_t>(meta_int("rows"));
    b.net.cols = static_cast<std::size_t>(meta_int("cols"));
    if (b.net.rows * b.net.cols != b.net.node_count) {
      throw DataError("meta.txt: grid " + std::to_string(b.net.rows) + "x" + std::to_string(b.net.cols) + " does not match " +
                      std::to_string(b.net.node_count) + " nodes");
    }
  }
  auto node_of = [&](const CsvReader& r, const std::string& field) {
    const std::int64_t id = r.integer(field, "node id");
    auto it = index.find(id);
    if (it == index.end()) r.fail("unknown node " + field);
    return it->second;
  };

  // edges
  {
    CsvReader r(root / "edges.csv");
    std::vector<std::string> f;
    while (r.next(f)) {
      if (f.size() < 2 || f.size() > 3) r.fail("expected src,dst[,cost]");
      Edge e{node_of(r, f[0]), node_of(r, f[1]), f.size() == 3 ? r.number(f[2]) : 1.0};
      if (!(e.cost >= 0.0)) r.fail("edge cost must be non-negative");
      b.net.edges.push_back(e);
    }
  }

  // flow
  std::vector<double> values;
  std::vector<bool> seen;
  std::size_t steps = 0;
  {
    CsvReader r(root / "flow.csv");
    if (r.header.size() != 2 + C) {
      r.fail("header has " + std::to_string(r.header.size() - std::min<std::size_t>(2, r.header.size())) +
             " channel columns, meta.txt says " + std::to_string(C));
    }
    const std::size_t N = b.net.node_count;
    std::vector<std::string> f;
    std::int64_t current = -1;
    while (r.next(f)) {
      if (f.size() != 2 + C) r.fail("expected " + std::to_string(2 + C) + " fields, got " + std::to_string(f.size()));
      const std::int64_t step = r.integer(f[0], "step");
      if (step < 0) r.fail("negative step");
      if (step < current) r.fail("steps must be non-decreasing");
      if (step > current + 1) {
        r.fail("gap in steps: " + std::to_string(current) + " is followed by " + std::to_string(step));
      }
      if (step == current + 1) {
        current = step;
        values.resize(values.size() + N * C, std::nan(""));
        seen.resize(seen.size() + N, false);
      }
      const std::size_t n = node_of(r, f[1]);
      const std::size_t slot = static_cast<std::size_t>(step) * N + n;
      if (seen[slot]) r.fail("duplicate row for step " + f[0] + ", node " + f[1]);
      seen[slot] = true;
      for (std::size_t c = 0; c < C; ++c) values[slot * C + c] = r.number(f[2 + c]);
    }
    steps = static_cast<std::size_t>(current + 1);
    if (steps == 0) throw DataError(r.path + ": no flow rows");
  }
  if (meta.has("steps") && static_cast<std::size_t>(meta_int("steps")) != steps) {
    throw DataError("meta.txt says " + meta.get("steps") + " steps but flow.csv holds " + std::to_string(steps));
  }
  b.series.values = Tensor({steps, b.net.node_count, C}, std::move(values));
  return b;
}

// ---- synthetic ----------------------------------------------------------------

void SyntheticSpec::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("synthetic spec: " + msg);
  };
  require(days >= 1, "days must be at least 1");
  require(interval_minutes > 0 && 1440 % interval_minutes == 0, "interval_minutes must divide 1440");
  require(channels >= 1, "channels must be at least 1");
  require(delay >= 1, "delay must be at least 1");
  require(event_duration >= 1, "event_duration must be at least 1");
  require(noise >= 0.0 && event_rate >= 0.0 && event_magnitude >= 0.0 && amplitude >= 0.0,
          "noise, event_rate, event_magnitude and amplitude must be non-negative");
  if (layout == Layout::Grid) {
    require(rows >= 1 && cols >= 1, "grid layout needs rows and cols");
  } else {
    require(nodes >= 1, "nodes must be at least 1");
  }
}

SyntheticSpec SyntheticSpec::from_kv(const KeyValues& kv) {
  SyntheticSpec s;
  auto size_key = [&](const std::string& key, std::size_t fallback) {
    const std::int64_t v = kv.get_int_or(key, static_cast<std::int64_t>(fallback));
    if (v < 0) throw ConfigError("synthetic spec: " + key + " must be non-negative");
    return static_cast<std::size_t>(v);
  };
  s.layout = kv.get_or("layout", "graph") == "grid" ? Layout::Grid : Layout::Graph;
  if (kv.has("layout") && kv.get("layout") != "grid" && kv.get("layout") != "graph") {
    throw ConfigError("synthetic spec: layout must be graph or grid");
  }
  s.rows = size_key("rows", s.rows);
  s.cols = size_key("cols", s.cols);
  s.nodes = s.layout == Layout::Grid ? s.rows * s.cols : size_key("nodes", s.nodes);
  s.days = size_key("days", s.days);
  s.interval_minutes = static_cast<int>(kv.get_int_or("interval_minutes", s.interval_minutes));
  s.channels = size_key("channels", s.channels);
  s.base = kv.get_double_or("base", s.base);
  s.amplitude = kv.get_double_or("amplitude", s.amplitude);
  s.noise = kv.get_double_or("noise", s.noise);
  s.event_rate = kv.get_double_or("event_rate", s.event_rate);
  s.event_magnitude = kv.get_double_or("event_magnitude", s.event_magnitude);
  s.event_duration = size_key("event_duration", s.event_duration);
  s.delay = size_key("delay", s.delay);
  s.propagation = kv.get_double_or("propagation", s.propagation);
  s.seed = static_cast<std::uint64_t>(kv.get_int_or("seed", static_cast<std::int64_t>(s.seed)));
  s.start_time = kv.get_or("start_time", s.start_time);
  s.validate();
  return s;
}

void SyntheticSpec::to_kv(KeyValues& kv) const {
  kv.set("layout", layout_name(layout));
  if (layout == Layout::Grid) {
    kv.set("rows", static_cast<std::int64_t>(rows));
    kv.set("cols", static_cast<std::int64_t>(cols));
  } else {
    kv.set("nodes", static_cast<std::int64_t>(nodes));
  }
  kv.set("days", static_cast<std::int64_t>(days));
  kv.set("interval_minutes", static_cast<std::int64_t>(interval_minutes));
  kv.set("channels", static_cast<std::int64_t>(channels));
  kv.set("base", base);
  kv.set("amplitude", amplitude);
  kv.set("noise", noise);
  kv.set("event_rate", event_rate);
  kv.set("event_magnitude", event_magnitude);
  kv.set("event_duration", static_cast<std::int64_t>(event_duration));
  kv.set("delay", static_cast<std::int64_t>(delay));
  kv.set("propagation", propagation);
  kv.set("seed", static_cast<std::int64_t>(seed));
  kv.set("start_time", start_time);
}

namespace {

// Bump centered at `center` minutes with width `sd`, on the circle of one day.
double day_bump(double minute, double center, double sd) {
  double dist = std::fmod(std::abs(minute - center), 1440.0);
  dist = std::min(dist, 1440.0 - dist);
  return std::exp(-0.5 * (dist / sd) * (dist / sd));
}

}  // namespace

Bundle gen_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Bundle b;
  b.net = spec.layout == Layout::Grid ? RoadNetwork::grid(spec.rows, spec.cols) : RoadNetwork::path(spec.nodes);
  const std::size_t N = b.net.node_count, C = spec.channels;
  const std::size_t per_day = static_cast<std::size_t>(1440 / spec.interval_minutes);
  const std::size_t T = per_day * spec.days;
  b.series.interval_minutes = spec.interval_minutes;
  b.series.start = parse_timestamp(spec.start_time);
  b.series.values = Tensor({T, N, C});
  Tensor& v = b.series.values;

  const Rng root(spec.seed);
  Rng shape_rng = root.split(1);
  Rng noise_rng = root.split(2);
  Rng event_rng = root.split(3);

  // Daily profile: morning and evening peaks with per-node scale and phase.
  const std::int64_t start_minute = (b.series.start - std::chrono::floor<std::chrono::days>(b.series.start)).count();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const double scale = shape_rng.uniform(0.8, 1.2);
      const double shift = shape_rng.uniform(-30.0, 30.0);
      const double morning = shape_rng.uniform(0.6, 1.0);
      for (std::size_t t = 0; t < T; ++t) {
        const double minute = static_cast<double>((start_minute + static_cast<std::int64_t>((t % per_day) * spec.interval_minutes)) % 1440);
        const double peaks = morning * day_bump(minute, 8.0 * 60.0 + shift, 80.0) + day_bump(minute, 17.5 * 60.0 + shift, 110.0);
        v.at(t, n, c) = spec.base + spec.amplitude * scale * peaks;
      }
    }
  }
  if (spec.noise > 0.0) {
    for (auto& x : v.storage()) x += noise_rng.normal(0.0, spec.noise);
  }

  // Congestion events: a raised-cosine drop at the source, echoed once at each neighbor.
  if (spec.event_rate > 0.0 && spec.event_magnitude > 0.0) {
    const Tensor adjacency = build_adjacency(b.net);
    const std::size_t D = spec.event_duration;
    auto apply = [&](std::size_t node, std::size_t start, double magnitude) {
      for (std::size_t k = 0; k < D && start + k < T; ++k) {
        const double w = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(k + 1) / static_cast<double>(D + 1));
        for (std::size_t c = 0; c < C; ++c) v.at(start + k, node, c) -= magnitude * w;
      }
    };
    for (std::size_t n = 0; n < N; ++n) {
      const int count = event_rng.poisson(spec.event_rate * static_cast<double>(spec.days));
      for (int e = 0; e < count; ++e) {
        const auto start = static_cast<std::size_t>(event_rng.uniform(0.0, static_cast<double>(T)));
        const double magnitude = spec.event_magnitude * event_rng.uniform(0.5, 1.0);
        apply(n, std::min(start, T - 1), magnitude);
        for (std::size_t m = 0; m < N; ++m) {
          if (adjacency.at(n, m) != 0.0) apply(m, std::min(start, T - 1) + spec.delay, spec.propagation * magnitude);
        }
      }
    }
  }
  for (auto& x : v.storage()) x = std::max(x, 0.0);
  return b;
}

// ---- attention dump and series export -----------------------------------------

Tensor average_slices(const Tensor& w) {
  if (w.rank() != 3) throw DimensionError("average_slices expects [S,L,L], got " + shape_str(w.shape()));
  const std::size_t S = w.dim(0), L = w.dim(1), M = w.dim(2);
  Tensor out({L, M});
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t i = 0; i < L * M; ++i) out[i] += w[s * L * M + i];
  }
  for (auto& x : out.storage()) x /= static_cast<double>(S);
  return out;
}

std::string matrix_csv(const Tensor& m) {
  if (m.rank() != 2) throw DimensionError("matrix_csv expects a matrix, got " + shape_str(m.shape()));
  std::string out;
  for (std::size_t i = 0; i < m.dim(0); ++i) {
    for (std::size_t j = 0; j < m.dim(1); ++j) {
      if (j) out += ",";
      out += format_double(m.at(i, j));
    }
    out += "\n";
  }
  return out;
}

std::string matrix_pgm(const Tensor& m) {
  if (m.rank() != 2) throw DimensionError("matrix_pgm expects a matrix, got " + shape_str(m.shape()));
  const std::size_t H = m.dim(0), W = m.dim(1);
  double hi = 0.0;
  for (double x : m.storage()) hi = std::max(hi, x);
  std::string out = "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  for (double x : m.storage()) {
    const double level = hi > 0.0 ? std::clamp(x, 0.0, hi) / hi * 255.0 : 0.0;
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(level))));
  }
  return out;
}

Tensor capture_attention(const Model& model, const PreparedData& data, std::size_t window_start,
                         const AttentionSite& site) {
  Tensor captured;
  AttentionTap tap = [&](const AttentionSite& s, const Tensor& w) {
    if (s == site) captured = w;
  };
  const Batch b = make_batch(data, {window_start});
  model.forward(Var::constant(b.x), b.time, data.graph, &tap);
  if (captured.empty()) {
    throw ConfigError("no attention at layer " + std::to_string(site.layer) + ", stage " + std::to_string(site.stage) +
                      ", head " + std::to_string(site.head) + ", kind " + to_string(site.kind));
  }
  return average_slices(captured);
}

std::string series_csv(const PreparedData& data, const Predictions& p, const std::vector<std::size_t>& starts,
                       std::size_t node, std::size_t horizon_step) {
  const std::size_t N = data.raw.nodes(), C = data.raw.channels(), ho = data.horizon;
  if (node >= N) throw ConfigError("node " + std::to_string(node) + " out of range (N=" + std::to_string(N) + ")");
  if (horizon_step < 1 || horizon_step > ho) {
    throw ConfigError("horizon step must be in 1.." + std::to_string(ho));
  }
  std::string out = "step,timestamp,channel,truth,prediction\n";
  for (std::size_t i = 0; i < starts.size(); ++i) {
    const std::size_t step = starts[i] + data.input_len + horizon_step - 1;
    const std::size_t t = horizon_step - 1;
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t at = ((i * ho + t) * N + node) * C + c;
      out += std::to_string(step) + "," + format_timestamp(data.raw.time_at(step)) + "," + std::to_string(c) + "," +
             format_double(p.truth[at]) + "," + format_double(p.pred[at]) + "\n";
    }
  }
  return out;
}

}  // namespace ccds
