#include <algorithm>
#include <cmath>
#include <numbers>

#include "ccds/errors.hpp"
#include "ccds/road_network.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace ccds;

namespace {

RoadNetwork with_edges(std::size_t n, std::vector<std::pair<std::size_t, std::size_t>> pairs) {
  RoadNetwork net;
  net.node_count = n;
  for (auto [a, b] : pairs) net.edges.push_back({a, b, 1.0});
  return net;
}

RoadNetwork random_graph(Rng& rng, std::size_t n, double p) {
  RoadNetwork net;
  net.node_count = n;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (rng.uniform() < p) net.edges.push_back({i, j, rng.uniform(0, 5)});
  return net;
}

// Eigenvalues of a symmetric 3x3 matrix in closed form (trigonometric method), ascending.
std::vector<double> eig3(const Tensor& a) {
  const double p1 = a.at(0, 1) * a.at(0, 1) + a.at(0, 2) * a.at(0, 2) + a.at(1, 2) * a.at(1, 2);
  const double q = (a.at(0, 0) + a.at(1, 1) + a.at(2, 2)) / 3.0;
  const double p2 = (a.at(0, 0) - q) * (a.at(0, 0) - q) + (a.at(1, 1) - q) * (a.at(1, 1) - q) +
                    (a.at(2, 2) - q) * (a.at(2, 2) - q) + 2.0 * p1;
  const double p = std::sqrt(p2 / 6.0);
  Tensor b({3, 3});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) b.at(i, j) = (a.at(i, j) - (i == j ? q : 0.0)) / p;
  const double det = b.at(0, 0) * (b.at(1, 1) * b.at(2, 2) - b.at(1, 2) * b.at(2, 1)) -
                     b.at(0, 1) * (b.at(1, 0) * b.at(2, 2) - b.at(1, 2) * b.at(2, 0)) +
                     b.at(0, 2) * (b.at(1, 0) * b.at(2, 1) - b.at(1, 1) * b.at(2, 0));
  const double r = std::clamp(det / 2.0, -1.0, 1.0);
  const double phi = std::acos(r) / 3.0;
  const double e1 = q + 2.0 * p * std::cos(phi);
  const double e3 = q + 2.0 * p * std::cos(phi + 2.0 * std::numbers::pi / 3.0);
  std::vector<double> e{e1, 3.0 * q - e1 - e3, e3};
  std::sort(e.begin(), e.end());
  return e;
}

// Reachability within h hops via boolean powers of (A + I).
Tensor reach_oracle(const Tensor& a, std::size_t h) {
  const std::size_t n = a.dim(0);
  Tensor r = Tensor::identity(n);
  for (std::size_t step = 0; step < h; ++step) {
    Tensor next = r;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < n; ++k)
        if (r.at(i, k) != 0.0)
          for (std::size_t j = 0; j < n; ++j)
            if (a.at(k, j) != 0.0) next.at(i, j) = 1.0;
    r = next;
  }
  return r;
}

Tensor permute_matrix(const Tensor& m, const std::vector<std::size_t>& perm) {
  const std::size_t n = m.dim(0);
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(perm[i], perm[j]) = m.at(i, j);
  return out;
}

double residual_inf(const LaplacianDecomposition& dec, const Tensor& delta, std::size_t col) {
  const std::size_t n = delta.dim(0);
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < n; ++k) acc += delta.at(i, k) * dec.eigenvectors.at(k, col);
    worst = std::max(worst, std::abs(acc - dec.eigenvalues[col] * dec.eigenvectors.at(i, col)));
  }
  return worst;
}

}  // namespace

TEST_CASE("build_adjacency examples") {
  CHECK(build_adjacency(with_edges(2, {{0, 1}})) == Tensor::matrix({{0, 1}, {1, 0}}));
  CHECK(build_adjacency(with_edges(3, {})).max_abs() == 0.0);
  const Tensor g = build_adjacency(RoadNetwork::grid(2, 2));
  for (std::size_t i = 0; i < 4; ++i) {
    double deg = 0.0;
    for (std::size_t j = 0; j < 4; ++j) deg += g.at(i, j);
    CHECK(deg == 2.0);
  }
  // 4-neighborhood by hand: node (r,c) touches (r±1,c) and (r,c±1)
  const Tensor g3 = build_adjacency(RoadNetwork::grid(2, 3));
  CHECK(g3.at(0, 1) == 1.0);
  CHECK(g3.at(0, 3) == 1.0);
  CHECK(g3.at(0, 4) == 0.0);
  CHECK(g3.at(2, 3) == 0.0);
  CHECK(g3.at(1, 4) == 1.0);
  CHECK_THROWS_AS(build_adjacency(with_edges(2, {{0, 5}})), DataError);
}

TEST_CASE("adjacency is symmetric, binary, zero diagonal") {
  Rng rng(21);
  RoadNetwork net = random_graph(rng, 9, 0.4);
  net.edges.push_back({3, 3, 1.0});
  net.edges.push_back({4, 2, 7.0});
  const Tensor a = build_adjacency(net);
  for (std::size_t i = 0; i < 9; ++i) {
    CHECK(a.at(i, i) == 0.0);
    for (std::size_t j = 0; j < 9; ++j) {
      CHECK(a.at(i, j) == a.at(j, i));
      CHECK((a.at(i, j) == 0.0 || a.at(i, j) == 1.0));
    }
  }
}

TEST_CASE("normalized_laplacian examples") {
  const Tensor p2 = normalized_laplacian(Tensor::matrix({{0, 1}, {1, 0}}));
  CHECK(max_abs_diff(p2, Tensor::matrix({{1, -1}, {-1, 1}})) < 1e-15);
  CHECK(normalized_laplacian(Tensor({3, 3})) == Tensor::identity(3));
  const Tensor k3 = normalized_laplacian(Tensor::matrix({{0, 1, 1}, {1, 0, 1}, {1, 1, 0}}));
  const auto e = eig3(k3);
  CHECK(std::abs(e[0]) < 1e-12);
  CHECK(std::abs(e[1] - 1.5) < 1e-12);
  CHECK(std::abs(e[2] - 1.5) < 1e-12);
  const auto dec = symmetric_eigen(k3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(dec.eigenvalues[i] - e[i]) < 1e-10);
  // isolated node keeps its identity row
  const Tensor iso = normalized_laplacian(Tensor::matrix({{0, 1, 0}, {1, 0, 0}, {0, 0, 0}}));
  CHECK(iso.at(2, 2) == 1.0);
  CHECK(iso.at(2, 0) == 0.0);
  CHECK_THROWS_AS(normalized_laplacian(Tensor::matrix({{0, 1}, {0, 0}})), ContractError);
}

TEST_CASE("symmetric_eigen examples") {
  const auto id = symmetric_eigen(Tensor::identity(3));
  for (double l : id.eigenvalues) CHECK(std::abs(l - 1.0) < 1e-12);
  for (std::size_t c = 0; c < 3; ++c) CHECK(residual_inf(id, Tensor::identity(3), c) < 1e-10);

  const auto p2 = symmetric_eigen(Tensor::matrix({{1, -1}, {-1, 1}}));
  CHECK(std::abs(p2.eigenvalues[0]) < 1e-12);
  CHECK(std::abs(p2.eigenvalues[1] - 2.0) < 1e-12);

  Rng rng(22);
  Tensor s({8, 8});
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = i; j < 8; ++j) s.at(i, j) = s.at(j, i) = rng.normal();
  const auto dec = symmetric_eigen(s);
  for (std::size_t c = 0; c < 8; ++c) CHECK(residual_inf(dec, s, c) < 1e-8);
  CHECK(std::is_sorted(dec.eigenvalues.begin(), dec.eigenvalues.end()));
  // sign rule: largest-magnitude entry of each column is positive
  for (std::size_t c = 0; c < 8; ++c) {
    double best = 0.0;
    for (std::size_t r = 0; r < 8; ++r)
      if (std::abs(dec.eigenvectors.at(r, c)) > std::abs(best) + 1e-12) best = dec.eigenvectors.at(r, c);
    CHECK(best > 0.0);
  }
}

TEST_CASE("laplacian spectrum properties on random graphs") {
  Rng rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(rng.uniform(0, 15));
    const Tensor delta = normalized_laplacian(build_adjacency(random_graph(rng, n, 0.3)));
    const auto dec = symmetric_eigen(delta);
    for (double l : dec.eigenvalues) {
      CHECK(l >= -1e-9);
      CHECK(l <= 2.0 + 1e-9);
    }
    const Tensor u = dec.eigenvectors;
    double err = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double dot = 0.0;
        for (std::size_t k = 0; k < n; ++k) dot += u.at(k, i) * u.at(k, j);
        err += (dot - (i == j ? 1.0 : 0.0)) * (dot - (i == j ? 1.0 : 0.0));
      }
    CHECK(std::sqrt(err) < 1e-8);
  }
}

TEST_CASE("laplacian_embedding examples") {
  const auto p2 = symmetric_eigen(normalized_laplacian(Tensor::matrix({{0, 1}, {1, 0}})));
  const Tensor e = laplacian_embedding(p2, 1);
  CHECK(std::abs(e.at(0, 0) - 1.0 / std::sqrt(2.0)) < 1e-12);
  CHECK(std::abs(e.at(1, 0) + 1.0 / std::sqrt(2.0)) < 1e-12);

  // C4: spectrum 1 - cos(2 pi k / 4) = {0, 1, 1, 2}
  const RoadNetwork c4 = with_edges(4, {{0, 1}, {1, 2}, {2, 3}, {3, 0}});
  const auto dec = symmetric_eigen(normalized_laplacian(build_adjacency(c4)));
  const std::vector<double> expect{0.0, 1.0, 1.0, 2.0};
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(dec.eigenvalues[i] - expect[i]) < 1e-10);
  const Tensor emb = laplacian_embedding(dec, 2);
  CHECK(emb.shape() == Shape{4, 2});
  // both columns are eigenvectors with eigenvalue 1
  const Tensor delta = normalized_laplacian(build_adjacency(c4));
  const Tensor de = oracle::matmul(delta, emb);
  CHECK(oracle::max_abs_diff(de, emb) < 1e-10);

  // connected graph: k columns, all nontrivial
  Rng rng(24);
  const RoadNetwork path = RoadNetwork::path(10);
  const auto pd = symmetric_eigen(normalized_laplacian(build_adjacency(path)));
  CHECK(laplacian_embedding(pd, 8).shape() == Shape{10, 8});
  CHECK_THROWS_AS(laplacian_embedding(pd, 10), DataError);

  // two components: both zero eigenvalues are skipped
  const auto two = symmetric_eigen(normalized_laplacian(build_adjacency(with_edges(4, {{0, 1}, {2, 3}}))));
  const Tensor te = laplacian_embedding(two, 2);
  CHECK(te.shape() == Shape{4, 2});
  CHECK_THROWS_AS(laplacian_embedding(two, 3), DataError);
}

TEST_CASE("geo_mask examples and oracle") {
  const Tensor a = build_adjacency(RoadNetwork::path(3));
  CHECK(geo_mask(a, 0) == Tensor::identity(3));
  const Tensor m1 = geo_mask(a, 1);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      const bool zero = (i == 0 && j == 2) || (i == 2 && j == 0);
      CHECK(m1.at(i, j) == (zero ? 0.0 : 1.0));
    }
  Rng rng(25);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor r = build_adjacency(random_graph(rng, 12, 0.15));
    CHECK(geo_mask(r, 2) == reach_oracle(r, 2));
    // monotone in the hop count
    Tensor prev = geo_mask(r, 0);
    for (std::size_t h = 1; h < 5; ++h) {
      const Tensor cur = geo_mask(r, h);
      for (std::size_t i = 0; i < prev.size(); ++i) CHECK(cur[i] >= prev[i]);
      prev = cur;
    }
  }
}

namespace {

TrafficTensor random_history(Rng& rng, std::size_t days, std::size_t n, int interval = 60) {
  TrafficTensor h;
  h.interval_minutes = interval;
  h.start = parse_timestamp("2018-01-01T00:00");
  h.values = rng.uniform_tensor({days * static_cast<std::size_t>(1440 / interval), n, 1}, 0, 100);
  return h;
}

// Brute-force semantic mask: mean daily profile, Pearson correlation, rank with ties to the lower index.
Tensor sem_oracle(const TrafficTensor& h, std::size_t top_k) {
  const std::size_t P = h.steps_per_day(), N = h.nodes();
  std::vector<std::vector<double>> prof(N, std::vector<double>(P, 0.0));
  std::vector<std::vector<double>> cnt(N, std::vector<double>(P, 0.0));
  for (std::size_t t = 0; t < h.steps(); ++t)
    for (std::size_t n = 0; n < N; ++n) {
      prof[n][t % P] += h.values.at(t, n, 0);
      cnt[n][t % P] += 1.0;
    }
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t p = 0; p < P; ++p) prof[n][p] /= cnt[n][p];
  auto pearson = [&](std::size_t a, std::size_t b) {
    double ma = 0, mb = 0;
    for (std::size_t p = 0; p < P; ++p) {
      ma += prof[a][p];
      mb += prof[b][p];
    }
    ma /= P;
    mb /= P;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t p = 0; p < P; ++p) {
      sab += (prof[a][p] - ma) * (prof[b][p] - mb);
      saa += (prof[a][p] - ma) * (prof[a][p] - ma);
      sbb += (prof[b][p] - mb) * (prof[b][p] - mb);
    }
    return sab / std::sqrt(saa * sbb);
  };
  Tensor m({N, N});
  for (std::size_t i = 0; i < N; ++i) {
    m.at(i, i) = 1.0;
    std::vector<std::size_t> others;
    for (std::size_t j = 0; j < N; ++j)
      if (j != i) others.push_back(j);
    std::stable_sort(others.begin(), others.end(), [&](std::size_t a, std::size_t b) { return pearson(i, a) > pearson(i, b); });
    for (std::size_t r = 0; r + 1 < top_k && r < others.size(); ++r) m.at(i, others[r]) = 1.0;
  }
  return m;
}

}  // namespace

TEST_CASE("sem_mask examples and oracle") {
  Rng rng(26);
  TrafficTensor twin = random_history(rng, 2, 2);
  for (std::size_t t = 0; t < twin.steps(); ++t) twin.values.at(t, 1, 0) = twin.values.at(t, 0, 0);
  const Tensor tm = sem_mask(twin, 2);
  CHECK(tm.at(0, 1) == 1.0);
  CHECK(tm.at(1, 0) == 1.0);

  const TrafficTensor h = random_history(rng, 3, 7);
  CHECK(sem_mask(h, 1) == Tensor::identity(7));
  CHECK(sem_mask(h, 3) == sem_oracle(h, 3));

  for (std::size_t k : {1u, 3u, 7u, 20u}) {
    const Tensor m = sem_mask(h, k);
    for (std::size_t i = 0; i < 7; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < 7; ++j) row += m.at(i, j);
      CHECK(row == static_cast<double>(std::min<std::size_t>(k, 7)));
      CHECK(m.at(i, i) == 1.0);
    }
  }

  TrafficTensor short_h = random_history(rng, 1, 3);
  short_h = short_h.slice(0, 10);
  CHECK_THROWS_AS(sem_mask(short_h, 2), DataError);
}

TEST_CASE("relabeling nodes permutes laplacian and masks conjugately") {
  Rng rng(27);
  const std::size_t n = 9;
  const RoadNetwork net = random_graph(rng, n, 0.3);
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  RoadNetwork relabeled = net;
  for (auto& e : relabeled.edges) {
    e.src = perm[e.src];
    e.dst = perm[e.dst];
  }
  const Tensor a = build_adjacency(net), pa = build_adjacency(relabeled);
  CHECK(pa == permute_matrix(a, perm));
  CHECK(max_abs_diff(normalized_laplacian(pa), permute_matrix(normalized_laplacian(a), perm)) < 1e-8);
  CHECK(geo_mask(pa, 2) == permute_matrix(geo_mask(a, 2), perm));

  const TrafficTensor h = random_history(rng, 2, n);
  TrafficTensor ph = h;
  for (std::size_t t = 0; t < h.steps(); ++t)
    for (std::size_t i = 0; i < n; ++i) ph.values.at(t, perm[i], 0) = h.values.at(t, i, 0);
  CHECK(sem_mask(ph, 4) == permute_matrix(sem_mask(h, 4), perm));
}
