#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <stop_token>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "planrag/backends.hpp"
#include "planrag/plan_model.hpp"
#include "planrag/retrieval.hpp"

namespace planrag {

enum class Mode { VanillaLLM, VanillaRAG, CoTRAG, QDRAG, Plan, PlanSubQ };
enum class TagResolution { Deterministic, LLM };
enum class Aggregation { SinkAnswer, BooleanNormalize };

std::string_view to_string(Mode mode);
std::optional<Mode> parse_mode(std::string_view text);
std::string_view to_string(TagResolution r);
std::optional<TagResolution> parse_tag_resolution(std::string_view text);
std::string_view to_string(Aggregation a);
std::optional<Aggregation> parse_aggregation(std::string_view text);

inline bool is_plan_mode(Mode m) { return m == Mode::Plan || m == Mode::PlanSubQ; }

struct RunConfig {
  Mode mode = Mode::PlanSubQ;
  std::size_t k = 5;
  std::size_t max_parallel = 4;
  TagResolution tag_resolution = TagResolution::Deterministic;
  Aggregation aggregation = Aggregation::SinkAnswer;
  RetryPolicy retry;
  int plan_attempts = 2;  // planner calls before falling back to a simple query
  bool role_tag_wrapping = false;
};

/// A plan together with what it cost to generate, so a cache hit reports the
/// same accounting as the original planner call.
struct CachedPlan {
  ReasoningDag dag;
  std::size_t input_tokens = 0;
  std::size_t output_tokens = 0;
  std::vector<std::string> warnings;
};

/// Caches planner output keyed by query.
class PlanCache {
 public:
  virtual ~PlanCache() = default;
  virtual std::optional<CachedPlan> load(const std::string& query) = 0;
  virtual void store(const std::string& query, const CachedPlan& plan) = 0;
};

/// One JSON file per query ({plan, tokens, warnings}) under a directory; the file name hashes
/// the prompt catalog version, a planner tag and the query.
class DirectoryPlanCache : public PlanCache {
 public:
  DirectoryPlanCache(std::filesystem::path dir, std::string planner_tag);
  std::optional<CachedPlan> load(const std::string& query) override;
  void store(const std::string& query, const CachedPlan& plan) override;
  std::filesystem::path path_for(const std::string& query) const;

 private:
  std::filesystem::path dir_;
  std::string planner_tag_;
};

/// Everything a run talks to. The generator answers (and resolves tags in
/// LLM mode); the planner defaults to the generator.
struct Services {
  Backend& generator;
  const Retriever& retriever;
  Backend* planner = nullptr;
  PlanCache* plan_cache = nullptr;

  Backend& plan_backend() const { return planner ? *planner : generator; }
};

enum class NodeStatus { Pending, Done, Seeded, Failed, Skipped };
enum class RunStatus { Ok, FailedPartial, Failed };

std::string_view to_string(NodeStatus s);
std::string_view to_string(RunStatus s);

using Clock = std::chrono::steady_clock;
using Nanos = std::chrono::nanoseconds;

struct NodeResult {
  std::string label;              // "Q1.1", or "step2" for baseline runs
  std::optional<NodeId> node;
  NodeStatus status = NodeStatus::Pending;
  std::string materialized_question;
  RetrievalSet retrievals;
  std::string answer;
  std::string raw_generation;
  std::vector<std::string> reasoning_steps;  // CoT runs only
  Nanos start{0};                 // offsets from the start of the run
  Nanos end{0};
  Nanos gen_time{0};
  Nanos ret_time{0};
  std::size_t input_tokens = 0;
  std::size_t output_tokens = 0;
  int retries = 0;
  int retrieval_calls = 0;
  std::vector<std::string> warnings;
  std::string error;
};

/// Result of executing one plan. Slots follow dag.nodes() order.
struct ExecutionTrace {
  ReasoningDag dag;
  std::vector<NodeResult> slots;
  std::string final_answer;
  Nanos wall_time{0};
  RunStatus status = RunStatus::Ok;
  std::vector<std::string> warnings;

  const NodeResult& slot(NodeId id) const;
};

enum class ExecutionErrorKind { MissingParentAnswer, NodeFailed, UnnormalizableBoolean };

class ExecutionError : public std::runtime_error {
 public:
  ExecutionError(ExecutionErrorKind kind, std::string subject, const std::string& what)
      : std::runtime_error(what), kind_(kind), subject_(std::move(subject)) {}
  ExecutionErrorKind kind() const noexcept { return kind_; }
  const std::string& subject() const noexcept { return subject_; }

 private:
  ExecutionErrorKind kind_;
  std::string subject_;
};

/// Executes a validated plan layer by layer. Nodes of one layer run
/// concurrently (at most cfg.max_parallel at a time); a node only sees its own
/// question, its retrievals and its parents' (question, answer) pairs. A
/// failed node skips its descendants while independent branches complete.
/// Cancellation is honoured at layer boundaries.
ExecutionTrace run_plan(const std::string& query, const ReasoningDag& dag, const RunConfig& cfg,
                        const Services& services, std::stop_token stop = {});

/// Fills the node's answer tags from its parents' answers. Deterministic mode
/// splices the answers in; LLM mode asks `tag_backend` with the tag
/// replacement prompt and falls back to splicing when the output still holds
/// tag syntax. `accounting`, when given, receives token/time/warning updates.
std::string materialize_subquery(const PlanNode& node, const std::map<NodeId, NodeResult>& parent_results,
                                 const RunConfig& cfg, Backend* tag_backend = nullptr,
                                 NodeResult* accounting = nullptr);

/// Final answer of a trace. SinkAnswer returns the sink's answer;
/// BooleanNormalize maps it to "yes"/"no" and falls back to the raw answer
/// (with a warning) when it cannot.
std::string aggregate(const ExecutionTrace& trace, const RunConfig& cfg, std::vector<std::string>* warnings = nullptr);

/// "yes"/"no" for answers opening with an affirmative/negative word.
std::optional<std::string> normalize_boolean(std::string_view answer);

struct LatencyBreakdown {
  double t_seq = 0.0;   // sum over nodes
  double t_plan = 0.0;  // sum over layers of the slowest node
  double speedup() const { return t_plan > 0.0 ? t_seq / t_plan : 1.0; }
};

/// Sequential vs layer-parallel time from per-node costs (any unit).
LatencyBreakdown latency_model(const ReasoningDag& dag, const std::map<NodeId, double>& node_cost);
/// Same, in seconds, from measured gen_time + ret_time of each slot.
LatencyBreakdown latency_model(const ExecutionTrace& trace);

struct ContextCost {
  std::vector<std::pair<std::string, std::size_t>> per_node;  // label -> context size (words)
  std::size_t total = 0;
  std::size_t peak = 0;
};

/// Per-node context in words: |q| + |D_q| + sum over answered parents (|p| + |G(p)|).
/// The unsplit root of a plan with subqueries has no generation and is not listed.
ContextCost context_cost(const ExecutionTrace& trace);
/// Sequential decomposition: step t sees |Q| + sum_{i<=t} (|q_i| + |G(q_i)| + |D_i|).
ContextCost sequential_context_cost(std::string_view query, const std::vector<NodeResult>& steps);

/// One pipeline run for one dataset item.
struct RunRecord {
  std::string id;
  Mode mode = Mode::PlanSubQ;
  std::string question;
  std::optional<ReasoningDag> plan;
  bool plan_fallback = false;           // planner output unusable; query answered unsplit
  std::vector<std::string> subqueries;  // QD-RAG decomposition
  std::vector<NodeResult> steps;         // plan slots, or baseline steps
  std::string final_answer;
  std::size_t input_tokens = 0;
  std::size_t output_tokens = 0;
  Nanos wall{0};
  Nanos plan_time{0};
  double t_seq = 0.0;
  double t_plan = 0.0;
  RunStatus status = RunStatus::Ok;
  std::vector<std::string> warnings;
  int retries = 0;
};

/// Dispatches on cfg.mode. Never throws for backend, plan or retrieval
/// failures: those land in the record's status and warnings.
RunRecord run_pipeline(const std::string& query, const RunConfig& cfg, const Services& services,
                       const std::string& id = {});

/// Context sizes for a record: plan formula for plan modes, sequential for QD.
ContextCost context_cost(const RunRecord& record);

/// Obtains a plan: cache, else planner with up to cfg.plan_attempts tries,
/// else the simple root-only plan. Accounting goes into `record`.
ReasoningDag obtain_plan(const std::string& query, const RunConfig& cfg, const Services& services, RunRecord& record);

nlohmann::json to_json(const NodeResult& node);
NodeResult node_result_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunRecord& record);
RunRecord run_record_from_json(const nlohmann::json& j);
/// Copy of a serialized record with every "timing" object removed.
nlohmann::json strip_timing(nlohmann::json record);

std::vector<RunRecord> read_records_jsonl(const std::filesystem::path& path);

}  // namespace planrag
