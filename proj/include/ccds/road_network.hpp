#pragma once

#include <cstddef>
#include <vector>

#include "ccds/tensor.hpp"
#include "ccds/traffic.hpp"

namespace ccds {

enum class Layout { Graph, Grid };

struct Edge {
  std::size_t src = 0;
  std::size_t dst = 0;
  double cost = 0.0;  // kept from the source data; adjacency is binary
};

struct RoadNetwork {
  std::size_t node_count = 0;
  std::vector<Edge> edges;
  Layout layout = Layout::Graph;
  std::size_t rows = 0;  // grid only
  std::size_t cols = 0;

  static RoadNetwork path(std::size_t n);
  static RoadNetwork grid(std::size_t rows, std::size_t cols);
};

// Eigenpairs of the symmetric normalized Laplacian, eigenvalues ascending.
// Column i of `eigenvectors` pairs with eigenvalues[i].
struct LaplacianDecomposition {
  Tensor delta;
  std::vector<double> eigenvalues;
  Tensor eigenvectors;
};

// Binary symmetric N x N adjacency with zero diagonal. Grid layouts use the 4-neighborhood.
Tensor build_adjacency(const RoadNetwork& net);

// I - D^{-1/2} A D^{-1/2}; degree-0 nodes keep their identity row.
Tensor normalized_laplacian(const Tensor& adjacency);

// Cyclic Jacobi rotations until the off-diagonal Frobenius norm drops below 1e-10.
// Each eigenvector is signed so that its largest-magnitude entry is positive.
LaplacianDecomposition symmetric_eigen(const Tensor& symmetric);

constexpr double kTrivialEigenvalue = 1e-8;

// Eigenvectors of the k smallest eigenvalues above kTrivialEigenvalue, as an N x k matrix.
Tensor laplacian_embedding(const LaplacianDecomposition& dec, std::size_t k);

// 1 where the BFS hop distance is at most max_hops.
Tensor geo_mask(const Tensor& adjacency, std::size_t max_hops);

// Row i marks i itself plus the top_k - 1 nodes whose mean daily profile correlates best
// with node i's (Pearson; ties to the lower index). `history` should be the training split.
Tensor sem_mask(const TrafficTensor& history, std::size_t top_k);

// Per-node mean daily profile used by sem_mask: [N, steps_per_day * C]. NaN readings are skipped.
Tensor daily_profiles(const TrafficTensor& history);

}  // namespace ccds
