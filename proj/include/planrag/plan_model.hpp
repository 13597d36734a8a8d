#pragma once

#include <compare>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

namespace planrag {

/// Identifies a plan node by (depth, position). The main query is the root
/// at depth 0 and renders as "Q"; every other node renders as "QI.J" with
/// I >= 1 and J >= 1.
struct NodeId {
  int depth = 0;
  int position = 0;

  static constexpr NodeId root() { return {0, 0}; }
  constexpr bool is_root() const { return depth == 0; }

  std::string render() const;
  /// Accepts "Q" or "QI.J". Returns nullopt on anything else.
  static std::optional<NodeId> parse(std::string_view text);

  auto operator<=>(const NodeId&) const = default;
};

/// A "<AI.J>" placeholder to be filled with the answer of node QI.J.
struct AnswerTag {
  NodeId target;

  std::string render() const;
  auto operator<=>(const AnswerTag&) const = default;
};

struct PlanNode {
  NodeId id;
  std::string text;              // subquery template, may embed answer tags
  std::vector<AnswerTag> tags;   // distinct tags in order of first occurrence

  bool operator==(const PlanNode&) const = default;
};

using PlanEdge = std::pair<NodeId, NodeId>;  // (parent, child)

enum class PlanErrorKind {
  CycleDetected,
  DisconnectedNode,
  MultipleSinks,
  DuplicateNode,
  DanglingTag,
  InvalidEdge,
  BadLabel,
  UnparseableSyntax,
};

std::string_view to_string(PlanErrorKind kind);

class PlanError : public std::runtime_error {
 public:
  PlanError(PlanErrorKind kind, std::string subject, const std::string& detail = {});

  PlanErrorKind kind() const noexcept { return kind_; }
  /// The offending element: a node id, a list of ids, a tag, or a position.
  const std::string& subject() const noexcept { return subject_; }

 private:
  PlanErrorKind kind_;
  std::string subject_;
};

/// A node as written by the planner: id plus the template text after the colon.
struct NodeLabel {
  NodeId id;
  std::string text;
};

struct LabeledEdge {
  NodeLabel parent;
  NodeLabel child;
};

/// Validated, immutable reasoning plan. Construct through build_dag() or
/// dag_from_json(); every instance satisfies the structural invariants:
/// acyclic, single root "Q", single sink, all nodes reachable from the root,
/// node depth labels equal longest-path depth, and every answer tag
/// references a parent of the node carrying it.
class ReasoningDag {
 public:
  const std::string& original_query() const noexcept { return original_query_; }
  const std::map<NodeId, PlanNode>& nodes() const noexcept { return nodes_; }
  const std::set<PlanEdge>& edges() const noexcept { return edges_; }
  /// Repair notes recorded while building (e.g. depth relabeling).
  const std::vector<std::string>& warnings() const noexcept { return warnings_; }

  const PlanNode& node(NodeId id) const;
  bool contains(NodeId id) const { return nodes_.contains(id); }
  std::size_t size() const noexcept { return nodes_.size(); }

  const std::vector<NodeId>& parents(NodeId id) const;
  const std::vector<NodeId>& children(NodeId id) const;
  NodeId sink() const noexcept { return sink_; }

  /// Longest-path distance from the root for every node.
  std::map<NodeId, int> node_depths() const;
  /// Nodes grouped by depth, ascending; each layer ordered by position.
  std::vector<std::vector<NodeId>> layers() const;
  /// Maximum node depth; 0 for a root-only plan.
  int reasoning_depth() const;
  bool is_simple() const noexcept { return nodes_.size() == 1; }

  bool operator==(const ReasoningDag& other) const {
    return original_query_ == other.original_query_ && nodes_ == other.nodes_ && edges_ == other.edges_;
  }

 private:
  friend ReasoningDag build_dag(const std::string&, const std::vector<LabeledEdge>&);

  std::string original_query_;
  std::map<NodeId, PlanNode> nodes_;
  std::set<PlanEdge> edges_;
  std::map<NodeId, std::vector<NodeId>> parents_;
  std::map<NodeId, std::vector<NodeId>> children_;
  NodeId sink_ = NodeId::root();
  std::vector<std::string> warnings_;
};

/// Builds and validates a plan. An empty edge list yields the root-only
/// ("simple query") plan. Throws PlanError naming the offending element.
ReasoningDag build_dag(const std::string& original_query, const std::vector<LabeledEdge>& edges);

/// Same as build_dag(query, {}).
ReasoningDag simple_dag(const std::string& original_query);

/// Canonical JSON: {original_query, nodes:[{id, template}], edges:[[parent, child]]}.
nlohmann::json dag_to_json(const ReasoningDag& dag);
ReasoningDag dag_from_json(const nlohmann::json& doc);

/// Distinct well-formed "<AI.J>" tags in order of first appearance.
std::vector<AnswerTag> extract_tags(std::string_view text);

/// A template split into literal spans and tags; concatenating the literal
/// spans with rendered tags reproduces the template byte for byte.
struct TemplatePiece {
  std::string literal;               // used when tag is empty
  std::optional<AnswerTag> tag;
};
std::vector<TemplatePiece> split_template(std::string_view text);

/// Occurrences of "<A...>" that look like tags but are not well formed.
std::vector<std::string> malformed_tags(std::string_view text);

}  // namespace planrag
