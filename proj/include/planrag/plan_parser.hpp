#pragma once

#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "planrag/plan_model.hpp"

namespace planrag {

/// The planner judged the query simple and returned it unsplit.
struct SimpleQuery {
  std::string text;
};

struct PlanParseResult {
  std::variant<SimpleQuery, ReasoningDag> outcome;
  std::vector<std::string> warnings;

  bool is_simple() const { return std::holds_alternative<SimpleQuery>(outcome); }
  /// The parsed plan, or the root-only plan over original_query for a simple query.
  ReasoningDag to_dag(const std::string& original_query) const;
};

/// Parses raw planner output: optional markdown fences, an optional leading
/// "DAG:" label, then either a bare "Q: ..." string or a list of
/// (parent, child) label tuples. Quote style, trailing commas and duplicate
/// tuples are tolerated. Throws PlanError (UnparseableSyntax with the byte
/// offset into raw, BadLabel, or any build_dag error).
PlanParseResult parse_plan_text(std::string_view raw, const std::string& original_query);

/// "Q1.1: What is ..." -> ((1,1), "What is ..."). Surrounding whitespace and
/// quotes are ignored. Throws PlanError(BadLabel).
NodeLabel parse_node_label(std::string_view label);

/// Renders a plan in the planner's tuple-list syntax; parse_plan_text of the
/// result reproduces the plan.
std::string render_plan_text(const ReasoningDag& dag);

/// Parses a Python-style list of string literals, e.g. ['a', "b",].
/// Throws PlanError(UnparseableSyntax).
std::vector<std::string> parse_string_list(std::string_view text);

/// Removes a surrounding markdown code fence (```lang ... ```), if any.
std::string_view strip_code_fence(std::string_view text);

}  // namespace planrag
