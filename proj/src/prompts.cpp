#include "planrag/prompts.hpp"

#include <map>
#include <stdexcept>

#include <json.hpp>

namespace planrag {
namespace {

const std::map<std::string, std::string, std::less<>>& catalog() {
  static const std::map<std::string, std::string, std::less<>> assets = {
#include "planrag/prompt_assets.inc"
  };
  return assets;
}

PromptBundle bundle(Purpose purpose, std::string_view asset, std::string user) {
  PromptBundle b;
  b.system = prompt_asset(asset);
  b.user = std::move(user);
  b.purpose = purpose;
  return b;
}

std::string render_known(std::span<const KnownAnswer> known) {
  std::string out;
  for (const auto& k : known) {
    if (!out.empty()) out += "; ";
    out += "Q=" + k.question + " A=" + k.answer;
  }
  return out;
}

std::string rag_user(std::string_view query, std::span<const std::string> retrievals,
                     std::span<const KnownAnswer> known) {
  std::string user = "Query: " + std::string(query) + "\nRetrievals: " + render_retrievals(retrievals) + "\n";
  if (!known.empty()) user += "Known answers: " + render_known(known) + "\n";
  user += "Generation:";
  return user;
}

}  // namespace

std::string_view to_string(Purpose purpose) {
  switch (purpose) {
    case Purpose::Plan: return "Plan";
    case Purpose::TagReplace: return "TagReplace";
    case Purpose::Answer: return "Answer";
    case Purpose::VanillaLLM: return "VanillaLLM";
    case Purpose::VanillaRAG: return "VanillaRAG";
    case Purpose::CoT: return "CoT";
    case Purpose::QDSplit: return "QDSplit";
    case Purpose::QDAnswer: return "QDAnswer";
    case Purpose::IGJudge: return "IGJudge";
  }
  return "Unknown";
}

std::optional<Purpose> parse_purpose(std::string_view text) {
  for (auto p : {Purpose::Plan, Purpose::TagReplace, Purpose::Answer, Purpose::VanillaLLM, Purpose::VanillaRAG,
                 Purpose::CoT, Purpose::QDSplit, Purpose::QDAnswer, Purpose::IGJudge}) {
    if (to_string(p) == text) return p;
  }
  return std::nullopt;
}

std::string_view prompt_catalog_version() { return "v1"; }

const std::string& prompt_asset(std::string_view name) {
  auto it = catalog().find(name);
  if (it == catalog().end()) throw std::out_of_range("unknown prompt asset: " + std::string(name));
  return it->second;
}

std::vector<std::string> prompt_asset_names() {
  std::vector<std::string> out;
  for (const auto& [k, v] : catalog()) out.push_back(k);
  return out;
}

std::string render_retrievals(std::span<const std::string> retrievals) {
  std::string out = "[";
  for (std::size_t i = 0; i < retrievals.size(); ++i) {
    if (i) out += ", ";
    out += "[" + nlohmann::json(retrievals[i]).dump() + "]";
  }
  return out + "]";
}

PromptBundle build_plan_prompt(std::string_view query) {
  return bundle(Purpose::Plan, "plan", "Query: " + std::string(query) + "\nDAG:");
}

PromptBundle build_tag_replace_prompt(const PlanNode& node, std::span<const ParentAnswer> parents) {
  std::string user = "Query: " + node.id.render() + ": " + node.text + "\n";
  for (const auto& p : parents) {
    user += p.id.render() + ": " + p.question + "\n";
    user += "A" + p.id.render().substr(1) + ": " + p.answer + "\n";
  }
  user += "Output:";
  return bundle(Purpose::TagReplace, "tag_replace", std::move(user));
}

PromptBundle build_answer_prompt(std::string_view question, std::span<const std::string> retrievals,
                                 std::span<const KnownAnswer> known) {
  return bundle(Purpose::Answer, "answer", rag_user(question, retrievals, known));
}

PromptBundle build_ig_judge_prompt(std::string_view main_query, std::span<const PlanNode> subqueries) {
  std::string list;
  for (const auto& n : subqueries) {
    if (!list.empty()) list += ", ";
    list += n.id.render() + ": " + n.text;
  }
  return bundle(Purpose::IGJudge, "ig_judge",
                "Main Query: " + std::string(main_query) + "\nSubqueries: [" + list + "]\nInformation Gain:");
}

PromptBundle build_baseline_prompt(Purpose mode, const BaselineInput& in) {
  switch (mode) {
    case Purpose::VanillaLLM: return bundle(mode, "vanilla_llm", "Query: " + in.query);
    case Purpose::VanillaRAG: return bundle(mode, "vanilla_rag", rag_user(in.query, in.retrievals, {}));
    case Purpose::CoT: return bundle(mode, "cot", rag_user(in.query, in.retrievals, {}));
    case Purpose::QDSplit: return bundle(mode, "qd_split", "Query: " + in.query + "\nSubqueries:");
    case Purpose::QDAnswer: return bundle(mode, "qd_answer", rag_user(in.query, in.retrievals, in.known));
    default: break;
  }
  throw std::invalid_argument("not a baseline prompt: " + std::string(to_string(mode)));
}

std::vector<std::pair<std::string, std::string>> chat_messages(const PromptBundle& b) {
  if (b.role_tag_wrapping) {
    return {{"user", "<s>[INST] <<SYS>>\n" + b.system + "\n<</SYS>>\n\n" + b.user + " [/INST]"}};
  }
  return {{"system", b.system}, {"user", b.user}};
}

}  // namespace planrag
