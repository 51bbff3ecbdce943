#include "mast/comm.hpp"

#include <algorithm>
#include <deque>
#include <numeric>
#include <stdexcept>

namespace mast {

GraphKind parse_graph_kind(const std::string& name) {
  if (name == "knn") return GraphKind::knn;
  if (name == "disk") return GraphKind::disk;
  throw std::invalid_argument("unknown communication graph kind '" + name + "'");
}

std::string to_string(GraphKind kind) { return kind == GraphKind::knn ? "knn" : "disk"; }

bool CommGraph::receives_from(int receiver, int sender) const {
  const auto& in = in_neighbors[static_cast<std::size_t>(receiver)];
  return std::binary_search(in.begin(), in.end(), sender);
}

std::size_t CommGraph::edge_count() const {
  std::size_t n = 0;
  for (const auto& in : in_neighbors) n += in.size();
  return n;
}

BoolMatrix CommGraph::adjacency() const {
  BoolMatrix a = BoolMatrix::Constant(size(), size(), false);
  for (int i = 0; i < size(); ++i)
    for (int j : in_neighbors[static_cast<std::size_t>(i)]) a(i, j) = true;
  return a;
}

CommGraph CommGraph::from_adjacency(const BoolMatrix& adjacency) {
  if (adjacency.rows() != adjacency.cols()) throw ShapeError("CommGraph: adjacency " + shape_string(adjacency));
  CommGraph g;
  g.in_neighbors.resize(static_cast<std::size_t>(adjacency.rows()));
  for (Index i = 0; i < adjacency.rows(); ++i)
    for (Index j = 0; j < adjacency.cols(); ++j)
      if (i != j && adjacency(i, j)) g.in_neighbors[static_cast<std::size_t>(i)].push_back(static_cast<int>(j));
  return g;
}

CommGraph build_graph(const Matrix& positions, const GraphSpec& spec) {
  const int n = static_cast<int>(positions.rows());
  CommGraph g;
  g.in_neighbors.resize(static_cast<std::size_t>(n));
  if (spec.kind == GraphKind::disk) {
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (i != j && (positions.row(i) - positions.row(j)).norm() < spec.radius)
          g.in_neighbors[static_cast<std::size_t>(i)].push_back(j);
    return g;
  }
  if (spec.k < 0) throw std::invalid_argument("build_graph: k must be non-negative");
  std::vector<int> order(static_cast<std::size_t>(n));
  std::vector<double> dist(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) dist[static_cast<std::size_t>(j)] = (positions.row(i) - positions.row(j)).squaredNorm();
    std::iota(order.begin(), order.end(), 0);
    std::erase(order, i);
    const auto k = static_cast<std::size_t>(std::min(spec.k, n - 1));
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), [&](int a, int b) {
      const double da = dist[static_cast<std::size_t>(a)], db = dist[static_cast<std::size_t>(b)];
      return da < db || (da == db && a < b);
    });
    auto& in = g.in_neighbors[static_cast<std::size_t>(i)];
    in.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(in.begin(), in.end());
    order.resize(static_cast<std::size_t>(n));
  }
  return g;
}

std::vector<int> connected_components(const CommGraph& graph) {
  const int n = graph.size();
  std::vector<std::vector<int>> undirected(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    for (int j : graph.in_neighbors[static_cast<std::size_t>(i)]) {
      undirected[static_cast<std::size_t>(i)].push_back(j);
      undirected[static_cast<std::size_t>(j)].push_back(i);
    }
  }
  std::vector<int> id(static_cast<std::size_t>(n), -1);
  int next = 0;
  std::vector<int> stack;
  for (int s = 0; s < n; ++s) {
    if (id[static_cast<std::size_t>(s)] >= 0) continue;
    id[static_cast<std::size_t>(s)] = next;
    stack.push_back(s);
    while (!stack.empty()) {
      const int u = stack.back();
      stack.pop_back();
      for (int v : undirected[static_cast<std::size_t>(u)]) {
        if (id[static_cast<std::size_t>(v)] < 0) {
          id[static_cast<std::size_t>(v)] = next;
          stack.push_back(v);
        }
      }
    }
    ++next;
  }
  return id;
}

namespace {

std::vector<int> upstream_depths(const CommGraph& graph, int agent, int max_hops) {
  std::vector<int> depth(static_cast<std::size_t>(graph.size()), -1);
  std::deque<int> queue{agent};
  depth[static_cast<std::size_t>(agent)] = 0;
  while (!queue.empty()) {
    const int u = queue.front();
    queue.pop_front();
    if (max_hops >= 0 && depth[static_cast<std::size_t>(u)] >= max_hops) continue;
    for (int v : graph.in_neighbors[static_cast<std::size_t>(u)]) {
      if (depth[static_cast<std::size_t>(v)] < 0) {
        depth[static_cast<std::size_t>(v)] = depth[static_cast<std::size_t>(u)] + 1;
        queue.push_back(v);
      }
    }
  }
  return depth;
}

}  // namespace

std::vector<int> in_neighborhood(const CommGraph& graph, int agent, int hops) {
  if (hops < 0) throw std::invalid_argument("in_neighborhood: hops must be non-negative");
  const auto depth = upstream_depths(graph, agent, hops);
  std::vector<int> out;
  for (int i = 0; i < graph.size(); ++i)
    if (depth[static_cast<std::size_t>(i)] >= 0) out.push_back(i);
  return out;
}

BoolMatrix reachability(const CommGraph& graph) {
  const int n = graph.size();
  BoolMatrix reach = BoolMatrix::Constant(n, n, false);
  for (int i = 0; i < n; ++i) {
    const auto depth = upstream_depths(graph, i, -1);
    for (int j = 0; j < n; ++j) reach(i, j) = depth[static_cast<std::size_t>(j)] >= 0;
  }
  return reach;
}

int max_finite_eccentricity(const CommGraph& graph) {
  int best = 0;
  for (int i = 0; i < graph.size(); ++i) {
    const auto depth = upstream_depths(graph, i, -1);
    best = std::max(best, *std::max_element(depth.begin(), depth.end()));
  }
  return best;
}

// ---------------------------------------------------------------------------

void MessageStore::refresh_self(const CommGraph& graph, const Matrix& fresh, const Matrix& positions) {
  if (graph.size() != size()) throw ShapeError("MessageStore: graph size differs from store size");
  if (fresh.rows() != size() || positions.rows() != size() || positions.cols() != 2) {
    throw ShapeError("MessageStore: fresh " + shape_string(fresh) + ", positions " + shape_string(positions) +
                     " for " + std::to_string(size()) + " agents");
  }
  for (int k = 0; k < size(); ++k) {
    Entry& e = at_mut(k, k);
    e.payload = std::make_shared<const Payload>(Payload{fresh.row(k).transpose(), positions.row(k).transpose(),
                                                             graph.in_neighbors[static_cast<std::size_t>(k)]});
    e.timestamp = clock_;
  }
}

void MessageStore::step(const CommGraph& graph, double tau, const Matrix& fresh, const Matrix& positions) {
  if (!(tau > 0.0)) throw std::invalid_argument("MessageStore::step: tau must be positive");
  refresh_self(graph, fresh, positions);
  clock_ += tau;
  const std::vector<Entry> snapshot = entries_;
  const auto n = static_cast<std::size_t>(agents_);
  for (int k = 0; k < size(); ++k) {
    for (int j : graph.in_neighbors[static_cast<std::size_t>(k)]) {
      const Entry* sender = &snapshot[static_cast<std::size_t>(j) * n];
      for (int origin = 0; origin < size(); ++origin) {
        const Entry& offered = sender[origin];
        Entry& mine = at_mut(k, origin);
        if (mine.timestamp < offered.timestamp) mine = offered;
      }
    }
  }
}

MessageStore comm_step(MessageStore store, const CommGraph& graph, double tau, const Matrix& fresh,
                       const Matrix& positions) {
  store.step(graph, tau, fresh, positions);
  return store;
}

LocalView gather_local(const MessageStore& store, int receiver, double since) {
  LocalView view;
  const double floor = std::max(since, 0.0);
  if (store.timestamp(receiver, receiver) >= floor) view.origins.push_back(receiver);
  for (int origin = 0; origin < store.size(); ++origin) {
    if (origin != receiver && store.timestamp(receiver, origin) >= floor) view.origins.push_back(origin);
  }
  const Index rows = static_cast<Index>(view.origins.size());
  const Index d = rows == 0 ? 0 : store.at(receiver, view.origins.front()).embedding().size();
  view.embeddings.resize(rows, d);
  view.positions.resize(rows, 2);
  for (Index r = 0; r < rows; ++r) {
    const auto& e = store.at(receiver, view.origins[static_cast<std::size_t>(r)]);
    view.embeddings.row(r) = e.embedding().transpose();
    view.positions.row(r) = e.position().transpose();
  }
  std::vector<int> row_of(static_cast<std::size_t>(store.size()), -1);
  for (std::size_t r = 0; r < view.origins.size(); ++r) row_of[static_cast<std::size_t>(view.origins[r])] = static_cast<int>(r);
  view.graph.in_neighbors.resize(view.origins.size());
  for (std::size_t r = 0; r < view.origins.size(); ++r) {
    auto& in = view.graph.in_neighbors[r];
    for (int s : store.at(receiver, view.origins[r]).sources()) {
      if (row_of[static_cast<std::size_t>(s)] >= 0) in.push_back(row_of[static_cast<std::size_t>(s)]);
    }
    std::sort(in.begin(), in.end());
  }
  return view;
}

}  // namespace mast
