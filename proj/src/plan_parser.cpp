#include "planrag/plan_parser.hpp"

#include <algorithm>
#include <optional>

#include "planrag/text.hpp"

namespace planrag {
namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

// Recursive-descent reader over Python-ish literals. Offsets reported in
// errors are relative to `base`, the start of the caller's raw text.
class LiteralReader {
 public:
  LiteralReader(std::string_view text, std::size_t base) : text_(text), base_(base) {}

  void skip_ws() {
    while (pos_ < text_.size() && is_space(text_[pos_])) ++pos_;
  }
  bool at_end() {
    skip_ws();
    return pos_ >= text_.size();
  }
  char peek() {
    skip_ws();
    return pos_ < text_.size() ? text_[pos_] : '\0';
  }
  bool accept(char c) {
    if (peek() != c) return false;
    ++pos_;
    return true;
  }
  void expect(char c) {
    if (!accept(c)) fail(std::string("expected '") + c + "'");
  }

  std::string string_literal() {
    char q = peek();
    if (q != '"' && q != '\'') fail("expected a quoted string");
    ++pos_;
    std::string out;
    while (pos_ < text_.size()) {
      char c = text_[pos_++];
      if (c == q) return out;
      if (c == '\\' && pos_ < text_.size()) {
        char e = text_[pos_++];
        switch (e) {
          case 'n': out.push_back('\n'); break;
          case 't': out.push_back('\t'); break;
          case 'r': out.push_back('\r'); break;
          case '\\': case '"': case '\'': out.push_back(e); break;
          default: out.push_back('\\'); out.push_back(e); break;
        }
        continue;
      }
      out.push_back(c);
    }
    fail("unterminated string");
  }

  // '[' item (',' item)* ','? ']'
  template <typename F>
  void list(F&& item) {
    expect('[');
    if (accept(']')) return;
    while (true) {
      item();
      if (accept(']')) return;
      expect(',');
      if (accept(']')) return;
    }
  }

  [[noreturn]] void fail(const std::string& what) const {
    throw PlanError(PlanErrorKind::UnparseableSyntax, std::to_string(base_ + pos_), what);
  }

  std::size_t pos() const { return pos_; }

 private:
  std::string_view text_;
  std::size_t base_;
  std::size_t pos_ = 0;
};

std::string escape_double_quoted(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

std::string render_label(const PlanNode& n) { return n.id.render() + ": " + n.text; }

}  // namespace

ReasoningDag PlanParseResult::to_dag(const std::string& original_query) const {
  if (const auto* dag = std::get_if<ReasoningDag>(&outcome)) return *dag;
  return simple_dag(original_query);
}

std::string_view strip_code_fence(std::string_view text) {
  text = trim(text);
  auto open = text.find("```");
  if (open == std::string_view::npos) return text;
  auto body_start = text.find('\n', open);
  if (body_start == std::string_view::npos) return text;
  auto close = text.rfind("```");
  if (close <= body_start) return trim(text.substr(body_start + 1));
  return trim(text.substr(body_start + 1, close - body_start - 1));
}

NodeLabel parse_node_label(std::string_view label) {
  auto s = trim(label);
  while (!s.empty() && (s.front() == '"' || s.front() == '\'')) s = trim(s.substr(1));
  while (!s.empty() && (s.back() == '"' || s.back() == '\'')) s = trim(s.substr(0, s.size() - 1));
  auto colon = s.find(':');
  if (colon == std::string_view::npos) throw PlanError(PlanErrorKind::BadLabel, std::string(label), "missing ':'");
  auto id = NodeId::parse(trim(s.substr(0, colon)));
  if (!id) throw PlanError(PlanErrorKind::BadLabel, std::string(label), "expected Q or QI.J before ':'");
  return NodeLabel{*id, std::string(trim(s.substr(colon + 1)))};
}

PlanParseResult parse_plan_text(std::string_view raw, const std::string& original_query) {
  if (trim(raw).empty()) throw PlanError(PlanErrorKind::UnparseableSyntax, "0", "empty planner output");
  auto body = strip_code_fence(raw);
  if (starts_with_icase(body, "DAG:")) body = trim(body.substr(4));
  const auto base = static_cast<std::size_t>(body.data() - raw.data());

  PlanParseResult result;
  LiteralReader reader(body, base);

  if (reader.peek() != '[') {
    std::string text;
    if (reader.peek() == '"' || reader.peek() == '\'') {
      text = reader.string_literal();
      if (!reader.at_end()) reader.fail("unexpected text after the query string");
    } else {
      text = std::string(body);
    }
    auto label = parse_node_label(text);
    if (!label.id.is_root()) reader.fail("a bare plan must be the main query \"Q: ...\"");
    result.outcome = SimpleQuery{label.text};
    return result;
  }

  std::vector<LabeledEdge> edges;
  std::vector<std::pair<std::string, std::string>> seen;
  reader.list([&] {
    reader.expect('(');
    auto parent = reader.string_literal();
    reader.expect(',');
    auto child = reader.string_literal();
    reader.accept(',');
    reader.expect(')');
    std::pair key{std::string(trim(parent)), std::string(trim(child))};
    if (std::find(seen.begin(), seen.end(), key) != seen.end()) {
      result.warnings.push_back("dropped duplicate tuple (" + key.first + ", " + key.second + ")");
      return;
    }
    seen.push_back(key);
    edges.push_back({parse_node_label(parent), parse_node_label(child)});
  });
  if (!reader.at_end()) reader.fail("unexpected text after the tuple list");
  if (edges.empty()) reader.fail("empty tuple list");

  for (const auto& e : edges) {
    for (const auto& bad : malformed_tags(e.child.text)) {
      auto note = "malformed tag " + bad + " in " + e.child.id.render() + " left as literal text";
      if (std::find(result.warnings.begin(), result.warnings.end(), note) == result.warnings.end())
        result.warnings.push_back(std::move(note));
    }
  }

  auto dag = build_dag(original_query, edges);
  result.warnings.insert(result.warnings.end(), dag.warnings().begin(), dag.warnings().end());
  result.outcome = std::move(dag);
  return result;
}

std::string render_plan_text(const ReasoningDag& dag) {
  const auto& root = dag.node(NodeId::root());
  if (dag.is_simple()) return "\"" + escape_double_quoted(render_label(root)) + "\"";
  std::string out = "[\n";
  bool first = true;
  for (const auto& [p, c] : dag.edges()) {
    if (!first) out += ",\n";
    first = false;
    out += "\t(\"" + escape_double_quoted(render_label(dag.node(p))) + "\", \"" +
           escape_double_quoted(render_label(dag.node(c))) + "\")";
  }
  out += "\n]";
  return out;
}

std::vector<std::string> parse_string_list(std::string_view text) {
  auto body = strip_code_fence(text);
  const auto base = static_cast<std::size_t>(body.data() - text.data());
  LiteralReader reader(body, base);
  std::vector<std::string> out;
  reader.list([&] { out.push_back(reader.string_literal()); });
  if (!reader.at_end()) reader.fail("unexpected text after the list");
  return out;
}

}  // namespace planrag
