#pragma once

// Communication graphs, connected components and the round-based multi-hop
// message relay used for decentralized execution.

#include "mast/numkernel.hpp"

#include <memory>
#include <string>
#include <vector>

namespace mast {

enum class GraphKind {
  knn,   // directed: each agent receives from its k nearest agents
  disk,  // symmetric: edge iff distance < radius
};

struct GraphSpec {
  GraphKind kind = GraphKind::knn;
  int k = 3;
  double radius = 256.0;
};

GraphKind parse_graph_kind(const std::string& name);
std::string to_string(GraphKind kind);

/// Directed graph over N agents. in_neighbors[i] lists the agents i receives from,
/// in ascending index order.
struct CommGraph {
  std::vector<std::vector<int>> in_neighbors;

  int size() const { return static_cast<int>(in_neighbors.size()); }
  bool receives_from(int receiver, int sender) const;
  std::size_t edge_count() const;
  /// adjacency(i, j) == true iff i receives from j.
  BoolMatrix adjacency() const;
  static CommGraph from_adjacency(const BoolMatrix& adjacency);
};

/// Builds the graph from positions. Distance ties are broken toward the lower index.
CommGraph build_graph(const Matrix& positions, const GraphSpec& spec);

/// Weakly connected components (edge orientation ignored). Ids are dense and
/// numbered in order of each component's lowest agent index.
std::vector<int> connected_components(const CommGraph& graph);

/// Agents within `hops` hops upstream of `agent` (those whose information can reach it),
/// including itself, ascending.
std::vector<int> in_neighborhood(const CommGraph& graph, int agent, int hops);

/// reach(i, j) == true iff information from j can reach i along directed edges (reach(i, i) always).
BoolMatrix reachability(const CommGraph& graph);

/// Largest finite upstream BFS depth over all agents (0 for an edgeless graph).
int max_finite_eccentricity(const CommGraph& graph);

/// Per-receiver table of the newest (embedding, position, in-neighbor list, timestamp) seen from each origin.
/// Payloads are immutable and shared, so relaying an entry never copies the embedding.
class MessageStore {
public:
  struct Payload {
    Vector embedding;
    Eigen::Vector2d position;
    std::vector<int> sources;  // the origin's in-neighbors when it stamped the entry
  };
  struct Entry {
    std::shared_ptr<const Payload> payload;
    double timestamp = -1.0;

    const Vector& embedding() const { return payload->embedding; }
    const Eigen::Vector2d& position() const { return payload->position; }
    const std::vector<int>& sources() const { return payload->sources; }
  };

  MessageStore() = default;
  explicit MessageStore(int agents)
      : agents_(agents), entries_(static_cast<std::size_t>(agents) * static_cast<std::size_t>(agents)) {}

  int size() const { return agents_; }
  double clock() const { return clock_; }

  /// Timestamp of origin's entry at receiver, -1 when nothing has arrived.
  double timestamp(int receiver, int origin) const { return at(receiver, origin).timestamp; }
  const Entry& at(int receiver, int origin) const {
    return entries_[static_cast<std::size_t>(receiver) * static_cast<std::size_t>(agents_) +
                    static_cast<std::size_t>(origin)];
  }

  /// Every agent overwrites its own entry with (fresh.row(k), positions.row(k), its in-neighbors in `graph`)
  /// stamped at the current clock.
  void refresh_self(const CommGraph& graph, const Matrix& fresh, const Matrix& positions);

  /// One relay round: refresh self entries, advance the clock by tau, then each agent
  /// copies from each in-neighbor every entry strictly newer than its own. Senders are
  /// read from a snapshot taken before any receive, so data moves at most one hop per round.
  void step(const CommGraph& graph, double tau, const Matrix& fresh, const Matrix& positions);

private:
  Entry& at_mut(int receiver, int origin) {
    return entries_[static_cast<std::size_t>(receiver) * static_cast<std::size_t>(agents_) +
                    static_cast<std::size_t>(origin)];
  }

  int agents_ = 0;
  std::vector<Entry> entries_;  // receiver-major, agents_ x agents_
  double clock_ = 0.0;
};

/// Free-function form of MessageStore::step.
MessageStore comm_step(MessageStore store, const CommGraph& graph, double tau, const Matrix& fresh,
                       const Matrix& positions);

struct LocalView {
  Matrix embeddings;         // N_k x d, own row first
  Matrix positions;          // N_k x 2
  std::vector<int> origins;  // agent index of each row
  CommGraph graph;           // relayed in-neighbor lists over view rows; origins outside the view dropped
};

/// Rows for every origin with a timestamp >= since (and >= 0): the receiver itself
/// first, then the rest by ascending origin index.
LocalView gather_local(const MessageStore& store, int receiver, double since = 0.0);

}  // namespace mast
