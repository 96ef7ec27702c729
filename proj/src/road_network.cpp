#include "ccds/road_network.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <queue>

#include "ccds/errors.hpp"

namespace ccds {

RoadNetwork RoadNetwork::path(std::size_t n) {
  RoadNetwork net;
  net.node_count = n;
  for (std::size_t i = 0; i + 1 < n; ++i) net.edges.push_back({i, i + 1, 1.0});
  return net;
}

RoadNetwork RoadNetwork::grid(std::size_t rows, std::size_t cols) {
  RoadNetwork net;
  net.layout = Layout::Grid;
  net.rows = rows;
  net.cols = cols;
  net.node_count = rows * cols;
  return net;
}

Tensor build_adjacency(const RoadNetwork& net) {
  const std::size_t n = net.node_count;
  if (n == 0) throw DataError("road network has no nodes");
  Tensor a({n, n});
  if (net.layout == Layout::Grid) {
    if (net.rows * net.cols != n) {
      throw DataError("grid " + std::to_string(net.rows) + "x" + std::to_string(net.cols) + " does not hold " +
                      std::to_string(n) + " nodes");
    }
    for (std::size_t r = 0; r < net.rows; ++r)
      for (std::size_t c = 0; c < net.cols; ++c) {
        const std::size_t i = r * net.cols + c;
        if (c + 1 < net.cols) a.at(i, i + 1) = a.at(i + 1, i) = 1.0;
        if (r + 1 < net.rows) a.at(i, i + net.cols) = a.at(i + net.cols, i) = 1.0;
      }
    return a;
  }
  for (const auto& e : net.edges) {
    if (e.src >= n || e.dst >= n) {
      throw DataError("edge (" + std::to_string(e.src) + ", " + std::to_string(e.dst) + ") references a node outside 0.." +
                      std::to_string(n - 1));
    }
    if (e.src == e.dst) continue;
    a.at(e.src, e.dst) = a.at(e.dst, e.src) = 1.0;
  }
  return a;
}

static void require_square_symmetric(const Tensor& m, const char* what) {
  if (m.rank() != 2 || m.dim(0) != m.dim(1)) throw DimensionError(std::string(what) + ": expected a square matrix, got " + shape_str(m.shape()));
  const std::size_t n = m.dim(0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(m.at(i, j) - m.at(j, i)) > 1e-12 * std::max(1.0, std::abs(m.at(i, j)))) {
        throw ContractError(std::string(what) + ": matrix is not symmetric at (" + std::to_string(i) + ", " +
                            std::to_string(j) + ")");
      }
}

Tensor normalized_laplacian(const Tensor& adjacency) {
  require_square_symmetric(adjacency, "normalized_laplacian");
  const std::size_t n = adjacency.dim(0);
  std::vector<double> inv_sqrt_deg(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double deg = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (adjacency.at(i, j) < 0.0) throw ContractError("normalized_laplacian: negative adjacency weight");
      deg += adjacency.at(i, j);
    }
    inv_sqrt_deg[i] = deg > 0.0 ? 1.0 / std::sqrt(deg) : 0.0;
  }
  Tensor delta({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      delta.at(i, j) = (i == j ? 1.0 : 0.0) - inv_sqrt_deg[i] * adjacency.at(i, j) * inv_sqrt_deg[j];
  return delta;
}

LaplacianDecomposition symmetric_eigen(const Tensor& symmetric) {
  require_square_symmetric(symmetric, "symmetric_eigen");
  const std::size_t n = symmetric.dim(0);
  Tensor a = symmetric;
  Tensor v = Tensor::identity(n);
  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) s += a.at(i, j) * a.at(i, j);
    return std::sqrt(s);
  };
  constexpr int kMaxSweeps = 100;
  int sweep = 0;
  for (; sweep < kMaxSweeps && off_norm() >= 1e-10; ++sweep) {
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a.at(p, q);
        if (apq == 0.0) continue;
        const double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t r = 0; r < n; ++r) {
          const double arp = a.at(r, p), arq = a.at(r, q);
          a.at(r, p) = c * arp - s * arq;
          a.at(r, q) = s * arp + c * arq;
        }
        for (std::size_t r = 0; r < n; ++r) {
          const double apr = a.at(p, r), aqr = a.at(q, r);
          a.at(p, r) = c * apr - s * aqr;
          a.at(q, r) = s * apr + c * aqr;
        }
        a.at(p, q) = a.at(q, p) = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
          const double vrp = v.at(r, p), vrq = v.at(r, q);
          v.at(r, p) = c * vrp - s * vrq;
          v.at(r, q) = s * vrp + c * vrq;
        }
      }
  }
  if (off_norm() >= 1e-10) {
    throw NumericError("symmetric_eigen: Jacobi did not converge after " + std::to_string(kMaxSweeps) + " sweeps");
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return a.at(i, i) < a.at(j, j); });

  LaplacianDecomposition dec;
  dec.delta = symmetric;
  dec.eigenvalues.resize(n);
  dec.eigenvectors = Tensor({n, n});
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t src = order[k];
    dec.eigenvalues[k] = a.at(src, src);
    double biggest = 0.0;
    for (std::size_t r = 0; r < n; ++r) biggest = std::max(biggest, std::abs(v.at(r, src)));
    // First entry within round-off of the largest magnitude decides the sign.
    double sign = 1.0;
    for (std::size_t r = 0; r < n; ++r) {
      if (std::abs(v.at(r, src)) >= biggest - 1e-12) {
        sign = v.at(r, src) < 0.0 ? -1.0 : 1.0;
        break;
      }
    }
    for (std::size_t r = 0; r < n; ++r) dec.eigenvectors.at(r, k) = sign * v.at(r, src);
  }
  return dec;
}

Tensor laplacian_embedding(const LaplacianDecomposition& dec, std::size_t k) {
  const std::size_t n = dec.eigenvalues.size();
  std::vector<std::size_t> picked;
  for (std::size_t i = 0; i < n && picked.size() < k; ++i)
    if (dec.eigenvalues[i] > kTrivialEigenvalue) picked.push_back(i);
  if (k == 0 || picked.size() < k) {
    const auto nontrivial = static_cast<std::size_t>(
        std::count_if(dec.eigenvalues.begin(), dec.eigenvalues.end(), [](double l) { return l > kTrivialEigenvalue; }));
    throw DataError("laplacian_embedding: k=" + std::to_string(k) + " requested but only " + std::to_string(nontrivial) +
                    " nontrivial eigenvalues exist; use a smaller k (1.." + std::to_string(nontrivial) + ")");
  }
  Tensor out({n, k});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < k; ++c) out.at(r, c) = dec.eigenvectors.at(r, picked[c]);
  return out;
}

Tensor geo_mask(const Tensor& adjacency, std::size_t max_hops) {
  if (adjacency.rank() != 2 || adjacency.dim(0) != adjacency.dim(1)) {
    throw DimensionError("geo_mask: expected a square adjacency, got " + shape_str(adjacency.shape()));
  }
  const std::size_t n = adjacency.dim(0);
  Tensor mask({n, n});
  std::vector<std::size_t> dist(n);
  for (std::size_t s = 0; s < n; ++s) {
    std::fill(dist.begin(), dist.end(), SIZE_MAX);
    std::queue<std::size_t> frontier;
    dist[s] = 0;
    frontier.push(s);
    while (!frontier.empty()) {
      const std::size_t u = frontier.front();
      frontier.pop();
      mask.at(s, u) = 1.0;
      if (dist[u] == max_hops) continue;
      for (std::size_t w = 0; w < n; ++w)
        if (adjacency.at(u, w) != 0.0 && dist[w] == SIZE_MAX) {
          dist[w] = dist[u] + 1;
          frontier.push(w);
        }
    }
  }
  return mask;
}

Tensor daily_profiles(const TrafficTensor& history) {
  if (history.interval_minutes <= 0 || 1440 % history.interval_minutes != 0) {
    throw ConfigError("interval of " + std::to_string(history.interval_minutes) + " minutes does not divide a day");
  }
  const std::size_t period = history.steps_per_day();
  const std::size_t T = history.steps(), N = history.nodes(), C = history.channels();
  if (T < period) {
    throw DataError("semantic mask needs at least one day of history (" + std::to_string(period) + " steps), got " +
                    std::to_string(T));
  }
  const auto day_start = std::chrono::floor<std::chrono::days>(history.start);
  const auto offset = static_cast<std::size_t>((history.start - day_start).count() / history.interval_minutes);
  Tensor sums({N, period * C});
  Tensor counts({N, period * C});
  for (std::size_t t = 0; t < T; ++t) {
    const std::size_t phase = (offset + t) % period;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        const double v = history.values.at(t, n, c);
        if (std::isnan(v)) continue;
        sums.at(n, phase * C + c) += v;
        counts.at(n, phase * C + c) += 1.0;
      }
  }
  for (std::size_t i = 0; i < sums.size(); ++i) sums[i] = counts[i] > 0.0 ? sums[i] / counts[i] : 0.0;
  return sums;
}

Tensor sem_mask(const TrafficTensor& history, std::size_t top_k) {
  if (top_k == 0) throw ConfigError("sem_mask: top_k must be at least 1");
  const Tensor prof = daily_profiles(history);
  const std::size_t N = prof.dim(0), L = prof.dim(1);

  // Center and scale each profile so correlation is a plain dot product.
  Tensor z = prof;
  std::vector<bool> flat(N, false);
  for (std::size_t n = 0; n < N; ++n) {
    double mu = 0.0;
    for (std::size_t i = 0; i < L; ++i) mu += z.at(n, i);
    mu /= static_cast<double>(L);
    double ss = 0.0;
    for (std::size_t i = 0; i < L; ++i) {
      z.at(n, i) -= mu;
      ss += z.at(n, i) * z.at(n, i);
    }
    flat[n] = ss <= 0.0;
    const double inv = flat[n] ? 0.0 : 1.0 / std::sqrt(ss);
    for (std::size_t i = 0; i < L; ++i) z.at(n, i) *= inv;
  }

  Tensor mask({N, N});
  std::vector<std::pair<double, std::size_t>> ranked;
  for (std::size_t i = 0; i < N; ++i) {
    mask.at(i, i) = 1.0;
    ranked.clear();
    for (std::size_t j = 0; j < N; ++j) {
      if (j == i) continue;
      double corr = 0.0;  // zero-variance profiles correlate with nothing
      if (!flat[i] && !flat[j])
        for (std::size_t k = 0; k < L; ++k) corr += z.at(i, k) * z.at(j, k);
      ranked.emplace_back(corr, j);
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    const std::size_t extra = std::min(top_k - 1, ranked.size());
    for (std::size_t r = 0; r < extra; ++r) mask.at(i, ranked[r].second) = 1.0;
  }
  return mask;
}

}  // namespace ccds
