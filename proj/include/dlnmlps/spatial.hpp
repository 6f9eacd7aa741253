#ifndef DLNMLPS_SPATIAL_HPP
#define DLNMLPS_SPATIAL_HPP

// Adjacency graphs and the precision matrices of the spatial random-effect priors.

#include <algorithm>
#include <cstdint>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include "dlnmlps/error.hpp"

namespace dlnmlps {

/// Undirected binary adjacency over units 0..J-1 (files use 1-based ids).
struct AdjacencyGraph {
  int n_units = 0;
  std::vector<std::vector<int>> neighbors;  // sorted, no self-loops

  int degree(int j) const { return static_cast<int>(neighbors[j].size()); }

  static AdjacencyGraph from_edges(int n_units, const std::vector<std::pair<int, int>>& edges) {
    AdjacencyGraph g;
    g.n_units = n_units;
    std::vector<std::set<int>> sets(n_units);
    for (auto [a, b] : edges) {
      if (a < 0 || b < 0 || a >= n_units || b >= n_units)
        throw Error(ErrorKind::invalid_argument, "edge endpoint out of range");
      if (a == b) throw Error(ErrorKind::invalid_argument, "self-loop on unit " + std::to_string(a + 1));
      sets[a].insert(b);
      sets[b].insert(a);
    }
    g.neighbors.resize(n_units);
    for (int j = 0; j < n_units; ++j) g.neighbors[j].assign(sets[j].begin(), sets[j].end());
    return g;
  }

  /// Rook-contiguity graph of an nrow x ncol lattice, row-major unit numbering.
  static AdjacencyGraph grid(int nrow, int ncol) {
    std::vector<std::pair<int, int>> edges;
    for (int r = 0; r < nrow; ++r)
      for (int c = 0; c < ncol; ++c) {
        const int j = r * ncol + c;
        if (c + 1 < ncol) edges.emplace_back(j, j + 1);
        if (r + 1 < nrow) edges.emplace_back(j, j + ncol);
      }
    return from_edges(nrow * ncol, edges);
  }
};

struct AdjacencyLoad {
  AdjacencyGraph graph;
  std::vector<std::string> warnings;
};

/// Reads the edge-list format: a required header line "J <count>", then one "j h" pair of
/// 1-based ids per line. '#' starts a comment. Edges present in only one direction are
/// closed symmetrically and reported as a warning.
inline AdjacencyLoad load_adjacency(std::istream& in) {
  AdjacencyLoad out;
  std::string line;
  std::size_t line_no = 0;
  int n_units = -1;
  std::set<std::pair<int, int>> directed;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    std::string first;
    if (!(ss >> first)) continue;
    if (n_units < 0) {
      if (first != "J" || !(ss >> n_units) || n_units < 1)
        throw ParseError(line_no, "adjacency file must start with a header 'J <count>'");
      continue;
    }
    int a = 0;
    int b = 0;
    try {
      std::size_t pos = 0;
      a = std::stoi(first, &pos);
      if (pos != first.size()) throw std::invalid_argument(first);
    } catch (const std::exception&) {
      throw ParseError(line_no, "expected integer unit id, got '" + first + "'");
    }
    std::string rest;
    if (!(ss >> b) || (ss >> rest)) throw ParseError(line_no, "expected exactly two unit ids");
    if (a < 1 || a > n_units || b < 1 || b > n_units)
      throw ParseError(line_no, "unit id out of range 1.." + std::to_string(n_units));
    if (a == b) throw ParseError(line_no, "self-loop on unit " + std::to_string(a));
    directed.emplace(a - 1, b - 1);
  }
  if (n_units < 0) throw ParseError(line_no, "adjacency file is missing the 'J <count>' header");
  std::vector<std::pair<int, int>> edges(directed.begin(), directed.end());
  std::size_t one_way = 0;
  for (auto [a, b] : directed)
    if (!directed.count({b, a})) ++one_way;
  if (one_way > 0)
    out.warnings.push_back("symmetric closure applied to " + std::to_string(one_way) +
                           " edge(s) listed in one direction only");
  out.graph = AdjacencyGraph::from_edges(n_units, edges);
  std::size_t isolated = 0;
  for (int j = 0; j < n_units; ++j)
    if (out.graph.degree(j) == 0) ++isolated;
  if (isolated > 0) out.warnings.push_back(std::to_string(isolated) + " isolated unit(s) without neighbours");
  return out;
}

inline AdjacencyLoad load_adjacency_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open adjacency file " + path);
  return load_adjacency(in);
}

/// Writes the graph in the format read by load_adjacency (both directions of every edge).
inline void write_adjacency(std::ostream& out, const AdjacencyGraph& g) {
  out << "J " << g.n_units << "\n";
  for (int j = 0; j < g.n_units; ++j)
    for (int h : g.neighbors[j])
      out << j + 1 << ' ' << h + 1 << "\n";
}

/// Connected-component label per unit; returns the number of components.
inline int connected_components(const AdjacencyGraph& g, std::vector<int>& label) {
  label.assign(g.n_units, -1);
  int count = 0;
  std::vector<int> stack;
  for (int s = 0; s < g.n_units; ++s) {
    if (label[s] >= 0) continue;
    label[s] = count;
    stack.push_back(s);
    while (!stack.empty()) {
      const int v = stack.back();
      stack.pop_back();
      for (int w : g.neighbors[v])
        if (label[w] < 0) {
          label[w] = count;
          stack.push_back(w);
        }
    }
    ++count;
  }
  return count;
}

/// Graph Laplacian: n_j on the diagonal, -1 for neighbours.
inline Eigen::SparseMatrix<double> structure_matrix(const AdjacencyGraph& g) {
  std::vector<Eigen::Triplet<double>> trip;
  for (int j = 0; j < g.n_units; ++j) {
    trip.emplace_back(j, j, static_cast<double>(g.degree(j)));
    for (int h : g.neighbors[j]) trip.emplace_back(j, h, -1.0);
  }
  Eigen::SparseMatrix<double> m(g.n_units, g.n_units);
  m.setFromTriplets(trip.begin(), trip.end());
  return m;
}

enum class SpatialKind { independent, icar, convolution, leroux };

inline const char* to_string(SpatialKind kind) {
  switch (kind) {
    case SpatialKind::independent: return "independent";
    case SpatialKind::icar: return "icar";
    case SpatialKind::convolution: return "convolution";
    case SpatialKind::leroux: return "leroux";
  }
  return "unknown";
}

inline SpatialKind parse_spatial_kind(const std::string& name) {
  if (name == "independent" || name == "iid") return SpatialKind::independent;
  if (name == "icar") return SpatialKind::icar;
  if (name == "convolution" || name == "bym") return SpatialKind::convolution;
  if (name == "leroux") return SpatialKind::leroux;
  throw Error(ErrorKind::invalid_argument, "unknown spatial prior '" + name + "'");
}

/// Precision-type hyperparameters; only those active for the prior kind may be set.
struct SpatialHypers {
  std::optional<double> tau;
  std::optional<double> tau1;
  std::optional<double> tau2;
  std::optional<double> rho;
};

/// The adjacency structure with everything that stays fixed during optimisation:
/// the structure matrix, its spectrum and the connected components.
class SpatialStructure {
 public:
  SpatialStructure() = default;
  SpatialStructure(SpatialKind kind, AdjacencyGraph graph) : kind_(kind), graph_(std::move(graph)) {
    lambda_ = structure_matrix(graph_);
    n_components_ = connected_components(graph_, component_);
    if (kind_ == SpatialKind::icar || kind_ == SpatialKind::convolution) {
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es{Eigen::MatrixXd(lambda_), Eigen::EigenvaluesOnly};
      eigenvalues_ = es.eigenvalues();
    }
  }

  SpatialKind kind() const { return kind_; }
  const AdjacencyGraph& graph() const { return graph_; }
  const Eigen::SparseMatrix<double>& lambda() const { return lambda_; }
  int n_units() const { return graph_.n_units; }
  int n_components() const { return n_components_; }
  const std::vector<int>& component() const { return component_; }

  /// Latent dimension of the random-effect block (2J for the convolution model).
  int latent_dim() const { return kind_ == SpatialKind::convolution ? 2 * n_units() : n_units(); }
  /// Whether the prior is intrinsic and needs sum-to-zero constraints per component.
  bool constrained() const { return kind_ == SpatialKind::icar || kind_ == SpatialKind::convolution; }

  /// log pseudo-determinant of the structure matrix (sum of logs of the J - c largest eigenvalues).
  double log_pseudo_det() const {
    if (eigenvalues_.size() == 0) {
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es{Eigen::MatrixXd(lambda_), Eigen::EigenvaluesOnly};
      return es.eigenvalues().tail(n_units() - n_components_).array().log().sum();
    }
    return eigenvalues_.tail(n_units() - n_components_).array().log().sum();
  }

  void check(const SpatialHypers& h) const {
    auto need = [](const std::optional<double>& v, const char* name) {
      if (!v) throw Error(ErrorKind::invalid_argument, std::string("missing hyperparameter ") + name);
      if (!(*v > 0.0) || !std::isfinite(*v))
        throw Error(ErrorKind::invalid_argument, std::string("hyperparameter ") + name + " must be positive");
    };
    auto forbid = [&](const std::optional<double>& v, const char* name) {
      if (v)
        throw Error(ErrorKind::invalid_argument,
                    std::string("hyperparameter ") + name + " is inactive for prior " + to_string(kind_));
    };
    switch (kind_) {
      case SpatialKind::independent:
      case SpatialKind::icar:
        need(h.tau, "tau");
        forbid(h.tau1, "tau1");
        forbid(h.tau2, "tau2");
        forbid(h.rho, "rho");
        break;
      case SpatialKind::convolution:
        need(h.tau1, "tau1");
        need(h.tau2, "tau2");
        forbid(h.tau, "tau");
        forbid(h.rho, "rho");
        break;
      case SpatialKind::leroux:
        need(h.tau, "tau");
        forbid(h.tau1, "tau1");
        forbid(h.tau2, "tau2");
        if (!h.rho) throw Error(ErrorKind::invalid_argument, "missing hyperparameter rho");
        if (!(*h.rho >= 0.0 && *h.rho < 1.0))
          throw Error(ErrorKind::invalid_argument, "rho must lie in [0, 1)");
        break;
    }
  }

 private:
  SpatialKind kind_ = SpatialKind::independent;
  AdjacencyGraph graph_;
  Eigen::SparseMatrix<double> lambda_;
  Eigen::VectorXd eigenvalues_;
  std::vector<int> component_;
  int n_components_ = 0;
};

/// Random-effect precision G. Convolution stacks (u1, u2) as blkdiag(tau1 I, tau2 Lambda).
inline Eigen::SparseMatrix<double> precision(const SpatialStructure& s, const SpatialHypers& h) {
  s.check(h);
  const int J = s.n_units();
  Eigen::SparseMatrix<double> eye(J, J);
  eye.setIdentity();
  switch (s.kind()) {
    case SpatialKind::independent: return *h.tau * eye;
    case SpatialKind::icar: return *h.tau * s.lambda();
    case SpatialKind::leroux: return *h.tau * (*h.rho * s.lambda() + (1.0 - *h.rho) * eye);
    case SpatialKind::convolution: {
      std::vector<Eigen::Triplet<double>> trip;
      for (int j = 0; j < J; ++j) trip.emplace_back(j, j, *h.tau1);
      for (int k = 0; k < s.lambda().outerSize(); ++k)
        for (Eigen::SparseMatrix<double>::InnerIterator it(s.lambda(), k); it; ++it)
          trip.emplace_back(J + it.row(), J + it.col(), *h.tau2 * it.value());
      Eigen::SparseMatrix<double> g(2 * J, 2 * J);
      g.setFromTriplets(trip.begin(), trip.end());
      return g;
    }
  }
  return {};
}

/// log|G|; generalized (pseudo-)determinant with rank J - c for the intrinsic parts.
inline double logdet_G(const SpatialStructure& s, const SpatialHypers& h) {
  s.check(h);
  const int J = s.n_units();
  const int rank = J - s.n_components();
  switch (s.kind()) {
    case SpatialKind::independent: return J * std::log(*h.tau);
    case SpatialKind::icar: return rank * std::log(*h.tau) + s.log_pseudo_det();
    case SpatialKind::convolution:
      return J * std::log(*h.tau1) + rank * std::log(*h.tau2) + s.log_pseudo_det();
    case SpatialKind::leroux: {
      Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> llt(precision(s, h));
      if (llt.info() != Eigen::Success)
        throw Error(ErrorKind::not_positive_definite, "Leroux precision is not positive definite");
      Eigen::SparseMatrix<double> l = llt.matrixL();
      return 2.0 * Eigen::VectorXd(l.diagonal()).array().log().sum();
    }
  }
  return 0.0;
}

/// Draws u ~ N(0, G^{-1}) for the proper priors (independent and Leroux).
template <typename Rng>
Eigen::VectorXd sample_spatial_effect(const SpatialStructure& s, const SpatialHypers& h, Rng& rng) {
  if (s.kind() != SpatialKind::independent && s.kind() != SpatialKind::leroux)
    throw Error(ErrorKind::invalid_argument,
                std::string("sampling is not supported for the intrinsic prior ") + to_string(s.kind()));
  const Eigen::MatrixXd g = Eigen::MatrixXd(precision(s, h));
  Eigen::LLT<Eigen::MatrixXd> llt(g);
  if (llt.info() != Eigen::Success) throw Error(ErrorKind::not_positive_definite, "precision not positive definite");
  std::normal_distribution<double> normal;
  Eigen::VectorXd z(g.rows());
  for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = normal(rng);
  // G = L L'  =>  u = L'^{-1} z has covariance G^{-1}.
  return llt.matrixU().solve(z);
}

inline Eigen::VectorXd sample_spatial_effect(const SpatialStructure& s, const SpatialHypers& h, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_spatial_effect(s, h, rng);
}

}  // namespace dlnmlps

#endif  // DLNMLPS_SPATIAL_HPP
