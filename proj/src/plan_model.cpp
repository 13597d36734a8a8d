#include "planrag/plan_model.hpp"

#include <algorithm>
#include <charconv>
#include <functional>
#include <queue>

#include "planrag/text.hpp"

namespace planrag {
namespace {

// Parses a canonical positive decimal (no sign, no leading zeros).
std::optional<int> parse_index(std::string_view s) {
  if (s.empty() || s.size() > 6 || s.front() == '0') return std::nullopt;
  int value = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  return value;
}

// Matches a well-formed tag "<AI.J>" starting at text[pos]; returns its length.
std::optional<std::pair<AnswerTag, std::size_t>> match_tag(std::string_view text, std::size_t pos) {
  if (text.compare(pos, 2, "<A") != 0) return std::nullopt;
  auto close = text.find('>', pos + 2);
  if (close == std::string_view::npos) return std::nullopt;
  auto body = text.substr(pos + 2, close - pos - 2);
  auto dot = body.find('.');
  if (dot == std::string_view::npos) return std::nullopt;
  auto i = parse_index(body.substr(0, dot));
  auto j = parse_index(body.substr(dot + 1));
  if (!i || !j) return std::nullopt;
  return std::pair{AnswerTag{NodeId{*i, *j}}, close - pos + 1};
}

std::string join_ids(const std::vector<NodeId>& ids) {
  std::string out;
  for (const auto& id : ids) {
    if (!out.empty()) out += ", ";
    out += id.render();
  }
  return out;
}

const std::vector<NodeId> kNoIds;

}  // namespace

std::string NodeId::render() const {
  if (is_root()) return "Q";
  return "Q" + std::to_string(depth) + "." + std::to_string(position);
}

std::optional<NodeId> NodeId::parse(std::string_view text) {
  if (text.empty() || text.front() != 'Q') return std::nullopt;
  text.remove_prefix(1);
  if (text.empty()) return root();
  auto dot = text.find('.');
  if (dot == std::string_view::npos) return std::nullopt;
  auto i = parse_index(text.substr(0, dot));
  auto j = parse_index(text.substr(dot + 1));
  if (!i || !j) return std::nullopt;
  return NodeId{*i, *j};
}

std::string AnswerTag::render() const {
  return "<A" + std::to_string(target.depth) + "." + std::to_string(target.position) + ">";
}

std::string_view to_string(PlanErrorKind kind) {
  switch (kind) {
    case PlanErrorKind::CycleDetected: return "CycleDetected";
    case PlanErrorKind::DisconnectedNode: return "DisconnectedNode";
    case PlanErrorKind::MultipleSinks: return "MultipleSinks";
    case PlanErrorKind::DuplicateNode: return "DuplicateNode";
    case PlanErrorKind::DanglingTag: return "DanglingTag";
    case PlanErrorKind::InvalidEdge: return "InvalidEdge";
    case PlanErrorKind::BadLabel: return "BadLabel";
    case PlanErrorKind::UnparseableSyntax: return "UnparseableSyntax";
  }
  return "Unknown";
}

PlanError::PlanError(PlanErrorKind kind, std::string subject, const std::string& detail)
    : std::runtime_error(std::string(to_string(kind)) + "(" + subject + ")" + (detail.empty() ? "" : ": " + detail)),
      kind_(kind),
      subject_(std::move(subject)) {}

std::vector<TemplatePiece> split_template(std::string_view text) {
  std::vector<TemplatePiece> pieces;
  std::string literal;
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] == '<') {
      if (auto m = match_tag(text, i)) {
        if (!literal.empty()) pieces.push_back({std::move(literal), std::nullopt});
        literal.clear();
        pieces.push_back({{}, m->first});
        i += m->second;
        continue;
      }
    }
    literal.push_back(text[i++]);
  }
  if (!literal.empty()) pieces.push_back({std::move(literal), std::nullopt});
  return pieces;
}

std::vector<AnswerTag> extract_tags(std::string_view text) {
  std::vector<AnswerTag> tags;
  for (const auto& piece : split_template(text)) {
    if (piece.tag && std::find(tags.begin(), tags.end(), *piece.tag) == tags.end()) tags.push_back(*piece.tag);
  }
  return tags;
}

std::vector<std::string> malformed_tags(std::string_view text) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while ((pos = text.find("<A", pos)) != std::string_view::npos) {
    if (auto m = match_tag(text, pos)) {
      pos += m->second;
      continue;
    }
    auto close = text.find('>', pos);
    auto next_open = text.find('<', pos + 1);
    // Only flag spans that look like an attempted tag: "<A" followed by
    // digits/dots up to a closing '>'.
    if (close != std::string_view::npos && (next_open == std::string_view::npos || close < next_open)) {
      auto body = text.substr(pos + 2, close - pos - 2);
      bool tagish = !body.empty() && std::all_of(body.begin(), body.end(), [](char c) {
        return (c >= '0' && c <= '9') || c == '.' || c == ' ';
      });
      if (tagish) out.emplace_back(text.substr(pos, close - pos + 1));
    }
    pos += 2;
  }
  return out;
}

const PlanNode& ReasoningDag::node(NodeId id) const {
  auto it = nodes_.find(id);
  if (it == nodes_.end()) throw std::out_of_range("no plan node " + id.render());
  return it->second;
}

const std::vector<NodeId>& ReasoningDag::parents(NodeId id) const {
  auto it = parents_.find(id);
  return it == parents_.end() ? kNoIds : it->second;
}

const std::vector<NodeId>& ReasoningDag::children(NodeId id) const {
  auto it = children_.find(id);
  return it == children_.end() ? kNoIds : it->second;
}

std::map<NodeId, int> ReasoningDag::node_depths() const {
  std::map<NodeId, int> out;
  for (const auto& [id, n] : nodes_) out[id] = id.depth;
  return out;
}

std::vector<std::vector<NodeId>> ReasoningDag::layers() const {
  std::vector<std::vector<NodeId>> out(static_cast<std::size_t>(reasoning_depth()) + 1);
  // std::map iteration is ordered by (depth, position).
  for (const auto& [id, n] : nodes_) out[static_cast<std::size_t>(id.depth)].push_back(id);
  return out;
}

int ReasoningDag::reasoning_depth() const {
  return nodes_.empty() ? 0 : nodes_.rbegin()->first.depth;
}

ReasoningDag build_dag(const std::string& original_query, const std::vector<LabeledEdge>& labeled) {
  ReasoningDag dag;
  dag.original_query_ = original_query;

  std::map<NodeId, std::string> texts;
  bool root_labeled = false;
  auto add_label = [&](const NodeLabel& label) {
    if (label.id.is_root()) {
      if (!root_labeled && trim(label.text) != trim(original_query))
        dag.warnings_.push_back("root label text differs from the original query; using the original query");
      root_labeled = true;
      return;
    }
    auto [it, inserted] = texts.emplace(label.id, std::string(trim(label.text)));
    if (!inserted && it->second != trim(label.text))
      throw PlanError(PlanErrorKind::DuplicateNode, label.id.render(), "same id carries two different subqueries");
  };

  std::set<PlanEdge> edges;
  for (const auto& e : labeled) {
    add_label(e.parent);
    add_label(e.child);
    if (e.parent.id == e.child.id) throw PlanError(PlanErrorKind::CycleDetected, e.parent.id.render(), "self loop");
    edges.emplace(e.parent.id, e.child.id);
  }

  std::map<NodeId, std::vector<NodeId>> parents;
  std::map<NodeId, std::vector<NodeId>> children;
  auto rebuild_adjacency = [&] {
    parents.clear();
    children.clear();
    parents[NodeId::root()];
    children[NodeId::root()];
    for (const auto& [id, t] : texts) {
      parents[id];
      children[id];
    }
    for (const auto& [p, c] : edges) {
      parents[c].push_back(p);
      children[p].push_back(c);
    }
  };
  rebuild_adjacency();

  // Cycle check (iterative three-colour DFS over every node).
  {
    std::map<NodeId, int> colour;
    std::map<NodeId, NodeId> via;
    for (const auto& [start, unused] : children) {
      if (colour[start] != 0) continue;
      std::vector<std::pair<NodeId, std::size_t>> stack{{start, 0}};
      colour[start] = 1;
      while (!stack.empty()) {
        auto& [id, next] = stack.back();
        const auto& kids = children[id];
        if (next == kids.size()) {
          colour[id] = 2;
          stack.pop_back();
          continue;
        }
        NodeId kid = kids[next++];
        if (colour[kid] == 1) {
          std::vector<NodeId> cycle{kid};
          for (NodeId cur = id; cur != kid; cur = via[cur]) cycle.push_back(cur);
          cycle.push_back(kid);
          std::reverse(cycle.begin(), cycle.end());
          std::string path;
          for (const auto& c : cycle) path += (path.empty() ? "" : " -> ") + c.render();
          throw PlanError(PlanErrorKind::CycleDetected, path);
        }
        if (colour[kid] == 0) {
          colour[kid] = 1;
          via[kid] = id;
          stack.emplace_back(kid, 0);
        }
      }
    }
  }

  if (!parents[NodeId::root()].empty())
    throw PlanError(PlanErrorKind::InvalidEdge, parents[NodeId::root()].front().render() + " -> Q",
                    "the main query cannot depend on a subquery");

  if (!root_labeled && !texts.empty()) {
    for (const auto& [id, t] : texts) {
      if (parents[id].empty()) edges.emplace(NodeId::root(), id);
    }
    dag.warnings_.push_back("plan did not start at Q; root synthesized from the original query");
    rebuild_adjacency();
  }

  // Reachability from the root.
  {
    std::set<NodeId> seen{NodeId::root()};
    std::queue<NodeId> frontier;
    frontier.push(NodeId::root());
    while (!frontier.empty()) {
      auto id = frontier.front();
      frontier.pop();
      for (auto kid : children[id]) {
        if (seen.insert(kid).second) frontier.push(kid);
      }
    }
    for (const auto& [id, t] : texts) {
      if (!seen.contains(id)) throw PlanError(PlanErrorKind::DisconnectedNode, id.render(), "not reachable from Q");
    }
  }

  // Markov property: tags may only reference parents.
  for (const auto& [id, text] : texts) {
    const auto& pa = parents[id];
    for (const auto& tag : extract_tags(text)) {
      if (std::find(pa.begin(), pa.end(), tag.target) == pa.end())
        throw PlanError(PlanErrorKind::DanglingTag, id.render() + " " + tag.render(),
                        texts.contains(tag.target) ? "tag target is not a parent" : "tag target does not exist");
    }
  }

  std::vector<NodeId> sinks;
  for (const auto& [id, kids] : children) {
    if (kids.empty()) sinks.push_back(id);
  }
  if (sinks.size() > 1) throw PlanError(PlanErrorKind::MultipleSinks, join_ids(sinks));

  // Longest-path depth in topological order (Kahn).
  std::map<NodeId, int> depth;
  {
    std::map<NodeId, std::size_t> indeg;
    for (const auto& [id, pa] : parents) indeg[id] = pa.size();
    std::queue<NodeId> ready;
    ready.push(NodeId::root());
    depth[NodeId::root()] = 0;
    while (!ready.empty()) {
      auto id = ready.front();
      ready.pop();
      for (auto kid : children[id]) {
        depth[kid] = std::max(depth[kid], depth[id] + 1);
        if (--indeg[kid] == 0) ready.push(kid);
      }
    }
  }

  std::map<NodeId, NodeId> rename;
  bool consistent = std::all_of(texts.begin(), texts.end(), [&](const auto& kv) { return kv.first.depth == depth[kv.first]; });
  if (consistent) {
    for (const auto& [id, t] : texts) rename[id] = id;
  } else {
    std::map<int, std::vector<NodeId>> by_depth;
    for (const auto& [id, t] : texts) by_depth[depth[id]].push_back(id);  // already sorted by old id
    for (const auto& [d, ids] : by_depth) {
      int pos = 0;
      for (const auto& old : ids) {
        NodeId fresh{d, ++pos};
        rename[old] = fresh;
        if (fresh != old)
          dag.warnings_.push_back("relabeled " + old.render() + " as " + fresh.render() + " to match its dependency depth");
      }
    }
  }
  rename[NodeId::root()] = NodeId::root();

  dag.nodes_[NodeId::root()] = PlanNode{NodeId::root(), original_query, {}};
  for (const auto& [old, text] : texts) {
    std::string rewritten;
    for (const auto& piece : split_template(text)) {
      rewritten += piece.tag ? AnswerTag{rename.at(piece.tag->target)}.render() : piece.literal;
    }
    NodeId id = rename.at(old);
    auto tags = extract_tags(rewritten);
    dag.nodes_[id] = PlanNode{id, std::move(rewritten), std::move(tags)};
  }
  for (const auto& [p, c] : edges) dag.edges_.emplace(rename.at(p), rename.at(c));
  for (const auto& [id, n] : dag.nodes_) {
    dag.parents_[id];
    dag.children_[id];
  }
  for (const auto& [p, c] : dag.edges_) {
    dag.parents_[c].push_back(p);
    dag.children_[p].push_back(c);
  }
  for (auto* adj : {&dag.parents_, &dag.children_}) {
    for (auto& [id, list] : *adj) std::sort(list.begin(), list.end());
  }
  dag.sink_ = rename.at(sinks.front());
  return dag;
}

ReasoningDag simple_dag(const std::string& original_query) { return build_dag(original_query, {}); }

nlohmann::json dag_to_json(const ReasoningDag& dag) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& [id, n] : dag.nodes()) nodes.push_back({{"id", id.render()}, {"template", n.text}});
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& [p, c] : dag.edges()) edges.push_back({p.render(), c.render()});
  return {{"original_query", dag.original_query()}, {"nodes", std::move(nodes)}, {"edges", std::move(edges)}};
}

ReasoningDag dag_from_json(const nlohmann::json& doc) {
  if (!doc.is_object() || !doc.contains("original_query") || !doc["original_query"].is_string())
    throw PlanError(PlanErrorKind::UnparseableSyntax, "original_query", "plan JSON needs a string original_query");
  std::string query = doc["original_query"].get<std::string>();

  std::map<NodeId, std::string> texts;
  for (const auto& n : doc.value("nodes", nlohmann::json::array())) {
    auto raw = n.value("id", "");
    auto id = NodeId::parse(raw);
    if (!id) throw PlanError(PlanErrorKind::BadLabel, raw);
    if (!texts.emplace(*id, n.value("template", "")).second) throw PlanError(PlanErrorKind::DuplicateNode, raw);
  }
  auto label = [&](const std::string& raw) {
    auto id = NodeId::parse(raw);
    if (!id) throw PlanError(PlanErrorKind::BadLabel, raw);
    if (id->is_root()) return NodeLabel{*id, query};
    auto it = texts.find(*id);
    if (it == texts.end()) throw PlanError(PlanErrorKind::DisconnectedNode, raw, "edge references an undeclared node");
    return NodeLabel{*id, it->second};
  };
  std::vector<LabeledEdge> edges;
  for (const auto& e : doc.value("edges", nlohmann::json::array())) {
    if (!e.is_array() || e.size() != 2 || !e[0].is_string() || !e[1].is_string())
      throw PlanError(PlanErrorKind::UnparseableSyntax, e.dump(), "edge must be [parent, child]");
    edges.push_back({label(e[0].get<std::string>()), label(e[1].get<std::string>())});
  }
  for (const auto& [id, t] : texts) {
    bool used = std::any_of(edges.begin(), edges.end(), [&](const auto& e) { return e.parent.id == id || e.child.id == id; });
    if (!used && !id.is_root()) throw PlanError(PlanErrorKind::DisconnectedNode, id.render(), "node has no edges");
  }
  return build_dag(query, edges);
}

}  // namespace planrag
