#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "planrag/plan_model.hpp"

namespace planrag {

enum class Purpose { Plan, TagReplace, Answer, VanillaLLM, VanillaRAG, CoT, QDSplit, QDAnswer, IGJudge };

std::string_view to_string(Purpose purpose);
std::optional<Purpose> parse_purpose(std::string_view text);

struct PromptBundle {
  std::string system;
  std::string user;
  bool role_tag_wrapping = false;  // Llama-2 style <s>[INST] <<SYS>> wrapping
  double temperature = 0.0;
  Purpose purpose = Purpose::Answer;

  bool operator==(const PromptBundle&) const = default;
};

/// Version tag of the embedded prompt assets (prompts/<version>/*.txt).
std::string_view prompt_catalog_version();
/// Raw system prompt asset by file stem ("plan", "answer", ...). Throws
/// std::out_of_range for unknown names.
const std::string& prompt_asset(std::string_view name);
std::vector<std::string> prompt_asset_names();

/// A previously answered question handed to a later prompt.
struct KnownAnswer {
  std::string question;
  std::string answer;
};

/// A parent's materialized question and answer for tag replacement.
struct ParentAnswer {
  NodeId id;
  std::string question;
  std::string answer;
};

PromptBundle build_plan_prompt(std::string_view query);
PromptBundle build_tag_replace_prompt(const PlanNode& node, std::span<const ParentAnswer> parents);
PromptBundle build_answer_prompt(std::string_view question, std::span<const std::string> retrievals,
                                 std::span<const KnownAnswer> known = {});
PromptBundle build_ig_judge_prompt(std::string_view main_query, std::span<const PlanNode> subqueries);

struct BaselineInput {
  std::string query;
  std::vector<std::string> retrievals;
  std::vector<KnownAnswer> known;
};
/// Baseline prompts: VanillaLLM, VanillaRAG, CoT, QDSplit, QDAnswer.
PromptBundle build_baseline_prompt(Purpose mode, const BaselineInput& input);

/// [["doc one"], ["doc two"]] with JSON string escaping.
std::string render_retrievals(std::span<const std::string> retrievals);

/// Chat messages (role, content) for a bundle, applying role-tag wrapping.
std::vector<std::pair<std::string, std::string>> chat_messages(const PromptBundle& bundle);

}  // namespace planrag
