#include "planrag/executor.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <thread>

#include "planrag/plan_parser.hpp"
#include "planrag/prompts.hpp"
#include "planrag/text.hpp"

namespace planrag {
namespace {

Nanos since(Clock::time_point t0) { return std::chrono::duration_cast<Nanos>(Clock::now() - t0); }

double seconds(Nanos n) { return std::chrono::duration<double>(n).count(); }

/// Calls the backend with retries and accounts the call into `acc`.
Completion generate_into(Backend& backend, PromptBundle bundle, const RunConfig& cfg, NodeResult& acc) {
  bundle.role_tag_wrapping = cfg.role_tag_wrapping;
  int retries = 0;
  auto t = Clock::now();
  try {
    auto c = generate_with_retry(backend, bundle, cfg.retry, &retries);
    acc.gen_time += since(t);
    acc.retries += retries;
    acc.input_tokens += c.input_tokens;
    acc.output_tokens += c.output_tokens;
    return c;
  } catch (...) {
    acc.gen_time += since(t);
    acc.retries += retries;
    throw;
  }
}

RetrievalSet retrieve_into(const Retriever& retriever, std::string_view query, std::size_t k, NodeResult& acc) {
  auto t = Clock::now();
  auto set = retriever.retrieve(query, k);
  acc.ret_time += since(t);
  ++acc.retrieval_calls;
  return set;
}

/// The "Response" value, or the trimmed raw text with a warning.
std::string response_or_raw(const std::string& raw, NodeResult& acc) {
  try {
    return std::string(trim(extract_json_response(raw, "Response")));
  } catch (const MalformedGeneration& e) {
    acc.warnings.push_back(std::string("malformed generation (") + e.what() + "); raw text used as answer");
    return std::string(trim(raw));
  }
}

std::string splice_answers(const PlanNode& node, const std::map<NodeId, NodeResult>& parents) {
  std::string out;
  for (const auto& piece : split_template(node.text)) {
    if (!piece.tag) {
      out += piece.literal;
      continue;
    }
    out += trim(parents.at(piece.tag->target).answer);
  }
  return out;
}

/// Cleans a tag-replacement generation: drops an "Output:" label and a
/// leading "QI.J:" node label.
std::string clean_tag_output(std::string_view raw, NodeId id) {
  auto s = trim(strip_code_fence(raw));
  if (starts_with_icase(s, "output:")) s = trim(s.substr(7));
  auto label = id.render() + ":";
  if (s.starts_with(label)) s = trim(s.substr(label.size()));
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = trim(s.substr(1, s.size() - 2));
  return std::string(s);
}

void mark_skipped(NodeResult& slot, std::string why) {
  slot.status = NodeStatus::Skipped;
  slot.error = std::move(why);
}

}  // namespace

std::string_view to_string(Mode mode) {
  switch (mode) {
    case Mode::VanillaLLM: return "VanillaLLM";
    case Mode::VanillaRAG: return "VanillaRAG";
    case Mode::CoTRAG: return "CoTRAG";
    case Mode::QDRAG: return "QDRAG";
    case Mode::Plan: return "Plan";
    case Mode::PlanSubQ: return "PlanSubQ";
  }
  return "Unknown";
}

std::optional<Mode> parse_mode(std::string_view text) {
  for (auto m : {Mode::VanillaLLM, Mode::VanillaRAG, Mode::CoTRAG, Mode::QDRAG, Mode::Plan, Mode::PlanSubQ}) {
    if (to_lower(to_string(m)) == to_lower(text)) return m;
  }
  return std::nullopt;
}

std::string_view to_string(TagResolution r) { return r == TagResolution::LLM ? "LLM" : "Deterministic"; }

std::optional<TagResolution> parse_tag_resolution(std::string_view text) {
  auto t = to_lower(text);
  if (t == "deterministic") return TagResolution::Deterministic;
  if (t == "llm") return TagResolution::LLM;
  return std::nullopt;
}

std::string_view to_string(Aggregation a) { return a == Aggregation::BooleanNormalize ? "BooleanNormalize" : "SinkAnswer"; }

std::optional<Aggregation> parse_aggregation(std::string_view text) {
  auto t = to_lower(text);
  if (t == "sinkanswer" || t == "sink") return Aggregation::SinkAnswer;
  if (t == "booleannormalize" || t == "boolean") return Aggregation::BooleanNormalize;
  return std::nullopt;
}

std::string_view to_string(NodeStatus s) {
  switch (s) {
    case NodeStatus::Pending: return "pending";
    case NodeStatus::Done: return "done";
    case NodeStatus::Seeded: return "seeded";
    case NodeStatus::Failed: return "failed";
    case NodeStatus::Skipped: return "skipped";
  }
  return "unknown";
}

std::string_view to_string(RunStatus s) {
  switch (s) {
    case RunStatus::Ok: return "ok";
    case RunStatus::FailedPartial: return "failed_partial";
    case RunStatus::Failed: return "failed";
  }
  return "unknown";
}

namespace {

NodeStatus parse_node_status(std::string_view s) {
  for (auto v : {NodeStatus::Pending, NodeStatus::Done, NodeStatus::Seeded, NodeStatus::Failed, NodeStatus::Skipped})
    if (to_string(v) == s) return v;
  throw std::invalid_argument("unknown node status: " + std::string(s));
}

RunStatus parse_run_status(std::string_view s) {
  for (auto v : {RunStatus::Ok, RunStatus::FailedPartial, RunStatus::Failed})
    if (to_string(v) == s) return v;
  throw std::invalid_argument("unknown run status: " + std::string(s));
}

}  // namespace

// ---------------------------------------------------------------------------
// Plan cache

DirectoryPlanCache::DirectoryPlanCache(std::filesystem::path dir, std::string planner_tag)
    : dir_(std::move(dir)), planner_tag_(std::move(planner_tag)) {}

std::filesystem::path DirectoryPlanCache::path_for(const std::string& query) const {
  auto key = std::string(prompt_catalog_version()) + "\n" + planner_tag_ + "\n" + query;
  return dir_ / (hex64(fnv1a64(key)) + ".json");
}

std::optional<CachedPlan> DirectoryPlanCache::load(const std::string& query) {
  std::ifstream in(path_for(query));
  if (!in) return std::nullopt;
  auto doc = nlohmann::json::parse(in, nullptr, false);
  if (doc.is_discarded() || !doc.is_object() || !doc.contains("plan")) return std::nullopt;
  try {
    CachedPlan out{dag_from_json(doc["plan"]), 0, 0, doc.value("warnings", std::vector<std::string>{})};
    if (out.dag.original_query() != query) return std::nullopt;  // hash collision
    if (doc.contains("tokens")) {
      out.input_tokens = doc["tokens"].value("in", std::size_t{0});
      out.output_tokens = doc["tokens"].value("out", std::size_t{0});
    }
    return out;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

void DirectoryPlanCache::store(const std::string& query, const CachedPlan& plan) {
  std::filesystem::create_directories(dir_);
  auto path = path_for(query);
  auto tmp = path;
  tmp += ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
  {
    nlohmann::json doc{{"plan", dag_to_json(plan.dag)},
                       {"tokens", {{"in", plan.input_tokens}, {"out", plan.output_tokens}}},
                       {"warnings", plan.warnings}};
    std::ofstream out(tmp, std::ios::trunc);
    out << doc.dump(2) << '\n';
  }
  std::filesystem::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// Execution

const NodeResult& ExecutionTrace::slot(NodeId id) const {
  for (const auto& s : slots)
    if (s.node == id) return s;
  throw std::out_of_range("no slot for " + id.render());
}

std::string materialize_subquery(const PlanNode& node, const std::map<NodeId, NodeResult>& parent_results,
                                 const RunConfig& cfg, Backend* tag_backend, NodeResult* accounting) {
  for (const auto& tag : node.tags) {
    auto it = parent_results.find(tag.target);
    if (it == parent_results.end() || it->second.status != NodeStatus::Done)
      throw ExecutionError(ExecutionErrorKind::MissingParentAnswer, tag.render(),
                           "no answer for " + tag.render() + " in " + node.id.render());
  }
  auto spliced = splice_answers(node, parent_results);
  if (cfg.tag_resolution == TagResolution::Deterministic || node.tags.empty() || !tag_backend) return spliced;

  std::vector<ParentAnswer> parents;
  for (const auto& [id, r] : parent_results) parents.push_back({id, r.materialized_question, std::string(trim(r.answer))});
  NodeResult scratch;
  NodeResult& acc = accounting ? *accounting : scratch;
  try {
    auto c = generate_into(*tag_backend, build_tag_replace_prompt(node, parents), cfg, acc);
    auto out = clean_tag_output(c.text, node.id);
    if (out.empty() || !extract_tags(out).empty() || !malformed_tags(out).empty()) {
      acc.warnings.push_back("tag replacement output kept tag syntax; substituted answers directly");
      return spliced;
    }
    return out;
  } catch (const BackendError& e) {
    acc.warnings.push_back(std::string("tag replacement call failed (") + e.what() + "); substituted answers directly");
    return spliced;
  }
}

std::optional<std::string> normalize_boolean(std::string_view answer) {
  static const std::set<std::string> yes{"yes", "true", "correct", "affirmative", "indeed", "yeah", "yep"};
  static const std::set<std::string> no{"no", "false", "incorrect", "not", "never", "nope", "negative"};
  auto words = split_words(answer);
  if (words.empty()) return std::nullopt;
  auto first = index_term(words.front());
  if (yes.contains(first)) return "yes";
  if (no.contains(first)) return "no";
  return std::nullopt;
}

std::string aggregate(const ExecutionTrace& trace, const RunConfig& cfg, std::vector<std::string>* warnings) {
  const auto& sink = trace.slot(trace.dag.sink());
  if (sink.status != NodeStatus::Done)
    throw ExecutionError(ExecutionErrorKind::NodeFailed, sink.label, "sink " + sink.label + " has no answer");
  if (cfg.aggregation == Aggregation::SinkAnswer) return sink.answer;
  if (auto b = normalize_boolean(sink.answer)) return *b;
  if (warnings) warnings->push_back("UnnormalizableBoolean(" + sink.answer + "); raw answer kept");
  return sink.answer;
}

ExecutionTrace run_plan(const std::string& query, const ReasoningDag& dag, const RunConfig& cfg,
                        const Services& services, std::stop_token stop) {
  if (cfg.k == 0) throw std::invalid_argument("k must be >= 1");
  auto t0 = Clock::now();
  ExecutionTrace trace{dag, {}, {}, Nanos{0}, RunStatus::Ok, {}};
  std::map<NodeId, std::size_t> index;
  for (const auto& [id, node] : dag.nodes()) {
    index[id] = trace.slots.size();
    NodeResult r;
    r.label = id.render();
    r.node = id;
    trace.slots.push_back(std::move(r));
  }
  auto& slots = trace.slots;

  auto& root = slots[index.at(NodeId::root())];
  root.materialized_question = query;
  root.start = since(t0);
  RetrievalSet shared{query, {}, cfg.k};
  if (!dag.is_simple()) {
    // The root only seeds the shared retrieval (Plan mode) and text.
    root.status = NodeStatus::Seeded;
    if (cfg.mode == Mode::Plan) {
      try {
        shared = retrieve_into(services.retriever, query, cfg.k, root);
        root.retrievals = shared;
      } catch (const std::exception& e) {
        root.status = NodeStatus::Failed;
        root.error = std::string("shared retrieval failed: ") + e.what();
      }
    }
    root.end = since(t0);
  }

  auto execute = [&](NodeId id) {
    auto& slot = slots[index.at(id)];
    const auto& node = dag.node(id);
    for (auto p : dag.parents(id)) {
      auto st = slots[index.at(p)].status;
      if (st == NodeStatus::Failed || st == NodeStatus::Skipped) {
        mark_skipped(slot, "ancestor " + p.render() + " did not complete");
        return;
      }
    }
    slot.start = since(t0);
    try {
      std::map<NodeId, NodeResult> parent_results;
      std::vector<KnownAnswer> known;
      for (auto p : dag.parents(id)) {
        if (p.is_root()) continue;
        const auto& pr = slots[index.at(p)];
        parent_results.emplace(p, pr);
        known.push_back({pr.materialized_question, std::string(trim(pr.answer))});
      }
      slot.materialized_question =
          id.is_root() ? query : materialize_subquery(node, parent_results, cfg, &services.generator, &slot);
      if (cfg.mode == Mode::Plan && !dag.is_simple()) {
        slot.retrievals = shared;
      } else {
        slot.retrievals = retrieve_into(services.retriever, slot.materialized_question, cfg.k, slot);
      }
      auto texts = slot.retrievals.texts();
      auto c = generate_into(services.generator, build_answer_prompt(slot.materialized_question, texts, known), cfg,
                             slot);
      slot.raw_generation = c.text;
      slot.answer = response_or_raw(c.text, slot);
      slot.status = NodeStatus::Done;
    } catch (const std::exception& e) {
      slot.status = NodeStatus::Failed;
      slot.error = e.what();
    }
    slot.end = since(t0);
  };

  bool cancelled = false;
  for (const auto& layer : dag.layers()) {
    std::vector<NodeId> work;
    for (auto id : layer)
      if (!id.is_root() || dag.is_simple()) work.push_back(id);
    if (work.empty()) continue;
    if (stop.stop_requested()) {
      for (auto id : work) mark_skipped(slots[index.at(id)], "run cancelled");
      cancelled = true;
      continue;
    }
    std::size_t width = std::min(work.size(), std::max<std::size_t>(1, cfg.max_parallel));
    if (width == 1) {
      for (auto id : work) execute(id);
      continue;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> workers;
    workers.reserve(width);
    for (std::size_t w = 0; w < width; ++w) {
      workers.emplace_back([&] {
        for (std::size_t i = next++; i < work.size(); i = next++) execute(work[i]);
      });
    }
  }  // jthreads join here: the layer barrier

  if (cancelled) trace.warnings.push_back("run cancelled before all layers executed");
  bool any_failed = false;
  for (const auto& s : slots) {
    if (s.status == NodeStatus::Failed || s.status == NodeStatus::Skipped) any_failed = true;
    if (s.status == NodeStatus::Failed) trace.warnings.push_back("NodeFailed(" + s.label + "): " + s.error);
  }
  try {
    trace.final_answer = aggregate(trace, cfg, &trace.warnings);
    trace.status = any_failed ? RunStatus::FailedPartial : RunStatus::Ok;
  } catch (const ExecutionError& e) {
    trace.status = RunStatus::FailedPartial;
    trace.warnings.push_back(e.what());
  }
  trace.wall_time = since(t0);
  return trace;
}

// ---------------------------------------------------------------------------
// Cost models

LatencyBreakdown latency_model(const ReasoningDag& dag, const std::map<NodeId, double>& node_cost) {
  LatencyBreakdown out;
  for (const auto& layer : dag.layers()) {
    double slowest = 0.0;
    for (auto id : layer) {
      auto it = node_cost.find(id);
      double c = it == node_cost.end() ? 0.0 : it->second;
      out.t_seq += c;
      slowest = std::max(slowest, c);
    }
    out.t_plan += slowest;
  }
  return out;
}

LatencyBreakdown latency_model(const ExecutionTrace& trace) {
  std::map<NodeId, double> cost;
  for (const auto& s : trace.slots)
    if (s.node) cost[*s.node] = seconds(s.gen_time + s.ret_time);
  return latency_model(trace.dag, cost);
}

namespace {

std::size_t docs_words(const RetrievalSet& set) {
  std::size_t n = 0;
  for (const auto& d : set.documents) n += word_count(d.text);
  return n;
}

void add_cost(ContextCost& c, std::string label, std::size_t size) {
  c.per_node.emplace_back(std::move(label), size);
  c.total += size;
  c.peak = std::max(c.peak, size);
}

ContextCost plan_context_cost(const ReasoningDag& dag, const std::vector<NodeResult>& slots) {
  std::map<NodeId, const NodeResult*> by_id;
  for (const auto& s : slots)
    if (s.node) by_id[*s.node] = &s;
  ContextCost out;
  for (const auto& layer : dag.layers()) {
    for (auto id : layer) {
      if (id.is_root() && !dag.is_simple()) continue;
      auto it = by_id.find(id);
      if (it == by_id.end() || it->second->status != NodeStatus::Done) continue;
      const auto& s = *it->second;
      std::size_t c = word_count(s.materialized_question) + docs_words(s.retrievals);
      for (auto p : dag.parents(id)) {
        if (p.is_root()) continue;
        const auto& ps = *by_id.at(p);
        c += word_count(ps.materialized_question) + word_count(ps.answer);
      }
      add_cost(out, s.label, c);
    }
  }
  return out;
}

}  // namespace

ContextCost context_cost(const ExecutionTrace& trace) { return plan_context_cost(trace.dag, trace.slots); }

ContextCost sequential_context_cost(std::string_view query, const std::vector<NodeResult>& steps) {
  ContextCost out;
  std::size_t running = word_count(query);
  for (const auto& s : steps) {
    running += word_count(s.materialized_question) + word_count(s.answer) + docs_words(s.retrievals);
    add_cost(out, s.label, running);
  }
  return out;
}

ContextCost context_cost(const RunRecord& record) {
  if (record.plan && is_plan_mode(record.mode)) return plan_context_cost(*record.plan, record.steps);
  if (record.mode == Mode::QDRAG) return sequential_context_cost(record.question, record.steps);
  ContextCost out;
  for (const auto& s : record.steps)
    add_cost(out, s.label, word_count(s.materialized_question) + docs_words(s.retrievals));
  return out;
}

// ---------------------------------------------------------------------------
// Pipelines

ReasoningDag obtain_plan(const std::string& query, const RunConfig& cfg, const Services& services,
                         RunRecord& record) {
  auto t = Clock::now();
  if (services.plan_cache) {
    if (auto cached = services.plan_cache->load(query)) {
      record.input_tokens += cached->input_tokens;
      record.output_tokens += cached->output_tokens;
      for (const auto& w : cached->warnings) record.warnings.push_back(w);
      record.plan_time = since(t);
      return std::move(cached->dag);
    }
  }
  NodeResult acc;
  std::optional<ReasoningDag> dag;
  std::vector<std::string> notes;
  std::string last_error;
  int attempts = std::max(1, cfg.plan_attempts);
  for (int attempt = 1; attempt <= attempts && !dag; ++attempt) {
    try {
      auto c = generate_into(services.plan_backend(), build_plan_prompt(query), cfg, acc);
      auto parsed = parse_plan_text(c.text, query);
      for (auto& w : parsed.warnings) notes.push_back("plan: " + w);
      dag = parsed.to_dag(query);
    } catch (const PlanError& e) {
      last_error = e.what();
      notes.push_back("plan attempt " + std::to_string(attempt) + " rejected: " + e.what());
    } catch (const BackendError& e) {
      last_error = e.what();
      notes.push_back(std::string("planner call failed: ") + e.what());
      break;
    }
  }
  record.input_tokens += acc.input_tokens;
  record.output_tokens += acc.output_tokens;
  record.retries += acc.retries;
  record.plan_time = since(t);
  for (const auto& w : notes) record.warnings.push_back(w);
  if (!dag) {
    record.plan_fallback = true;
    record.warnings.push_back("no usable plan (" + last_error + "); answering the query unsplit");
    return simple_dag(query);
  }
  if (services.plan_cache) services.plan_cache->store(query, {*dag, acc.input_tokens, acc.output_tokens, notes});
  return *dag;
}

namespace {

void finish_steps(RunRecord& rec) {
  for (const auto& s : rec.steps) {
    rec.input_tokens += s.input_tokens;
    rec.output_tokens += s.output_tokens;
    rec.retries += s.retries;
    for (const auto& w : s.warnings) rec.warnings.push_back(s.label + ": " + w);
  }
  double total = 0.0;
  for (const auto& s : rec.steps) total += seconds(s.gen_time + s.ret_time);
  rec.t_seq = rec.t_plan = total;
}

void run_single_step(const std::string& query, const RunConfig& cfg, const Services& services, RunRecord& rec,
                     Clock::time_point t0) {
  NodeResult step;
  step.label = "step1";
  step.materialized_question = query;
  step.start = since(t0);
  try {
    BaselineInput in{query, {}, {}};
    if (cfg.mode != Mode::VanillaLLM) {
      step.retrievals = retrieve_into(services.retriever, query, cfg.k, step);
      in.retrievals = step.retrievals.texts();
    }
    auto purpose = cfg.mode == Mode::VanillaLLM ? Purpose::VanillaLLM
                   : cfg.mode == Mode::CoTRAG   ? Purpose::CoT
                                                : Purpose::VanillaRAG;
    auto c = generate_into(services.generator, build_baseline_prompt(purpose, in), cfg, step);
    step.raw_generation = c.text;
    step.answer = response_or_raw(c.text, step);
    if (cfg.mode == Mode::CoTRAG) {
      try {
        auto obj = extract_json_object(c.text);
        if (auto it = obj.find("Reasoning_steps"); it != obj.end() && it->is_array())
          for (const auto& r : *it) step.reasoning_steps.push_back(r.is_string() ? r.get<std::string>() : r.dump());
      } catch (const MalformedGeneration&) {
      }
    }
    step.status = NodeStatus::Done;
  } catch (const std::exception& e) {
    step.status = NodeStatus::Failed;
    step.error = e.what();
    rec.warnings.push_back("step1 failed: " + step.error);
  }
  step.end = since(t0);
  rec.final_answer = step.answer;
  rec.status = step.status == NodeStatus::Done ? RunStatus::Ok : RunStatus::Failed;
  rec.steps.push_back(std::move(step));
}

std::vector<std::string> split_subqueries(const std::string& query, const std::string& raw, RunRecord& rec) {
  auto body = trim(strip_code_fence(raw));
  if (starts_with_icase(body, "subqueries:")) body = trim(body.substr(11));
  try {
    auto list = parse_string_list(body);
    std::vector<std::string> out;
    for (auto& s : list)
      if (!trim(s).empty()) out.emplace_back(trim(s));
    if (!out.empty()) return out;
    rec.warnings.push_back("decomposition returned no subqueries; answering the query directly");
  } catch (const PlanError& e) {
    rec.warnings.push_back(std::string("decomposition unparseable (") + e.what() + "); answering the query directly");
  }
  return {query};
}

void run_qd(const std::string& query, const RunConfig& cfg, const Services& services, RunRecord& rec,
            Clock::time_point t0) {
  NodeResult split;
  RetrievalSet shared{query, {}, cfg.k};
  try {
    shared = retrieve_into(services.retriever, query, cfg.k, split);
    auto c = generate_into(services.generator, build_baseline_prompt(Purpose::QDSplit, {query, {}, {}}), cfg, split);
    rec.subqueries = split_subqueries(query, c.text, rec);
  } catch (const std::exception& e) {
    rec.input_tokens += split.input_tokens;
    rec.output_tokens += split.output_tokens;
    rec.status = RunStatus::Failed;
    rec.warnings.push_back(std::string("decomposition failed: ") + e.what());
    return;
  }
  rec.input_tokens += split.input_tokens;
  rec.output_tokens += split.output_tokens;
  rec.retries += split.retries;
  rec.plan_time = split.gen_time;

  std::vector<KnownAnswer> known;
  auto texts = shared.texts();
  rec.status = RunStatus::Ok;
  for (std::size_t i = 0; i < rec.subqueries.size(); ++i) {
    NodeResult step;
    step.label = "step" + std::to_string(i + 1);
    step.materialized_question = rec.subqueries[i];
    step.retrievals = shared;
    step.start = since(t0);
    try {
      auto c = generate_into(services.generator,
                             build_baseline_prompt(Purpose::QDAnswer, {rec.subqueries[i], texts, known}), cfg, step);
      step.raw_generation = c.text;
      step.answer = response_or_raw(c.text, step);
      step.status = NodeStatus::Done;
      known.push_back({step.materialized_question, std::string(trim(step.answer))});
    } catch (const std::exception& e) {
      step.status = NodeStatus::Failed;
      step.error = e.what();
      rec.warnings.push_back(step.label + " failed: " + step.error);
      rec.status = RunStatus::Failed;
    }
    step.end = since(t0);
    rec.steps.push_back(std::move(step));
    if (rec.status != RunStatus::Ok) break;
  }
  // The shared retrieval is charged once, to the first step.
  if (!rec.steps.empty()) rec.steps.front().ret_time += split.ret_time;
  if (rec.status == RunStatus::Ok) rec.final_answer = rec.steps.back().answer;
}

}  // namespace

RunRecord run_pipeline(const std::string& query, const RunConfig& cfg, const Services& services,
                       const std::string& id) {
  auto t0 = Clock::now();
  RunRecord rec;
  rec.id = id;
  rec.mode = cfg.mode;
  rec.question = query;

  switch (cfg.mode) {
    case Mode::VanillaLLM:
    case Mode::VanillaRAG:
    case Mode::CoTRAG:
      run_single_step(query, cfg, services, rec, t0);
      finish_steps(rec);
      break;
    case Mode::QDRAG:
      run_qd(query, cfg, services, rec, t0);
      finish_steps(rec);
      break;
    case Mode::Plan:
    case Mode::PlanSubQ: {
      auto dag = obtain_plan(query, cfg, services, rec);
      auto trace = run_plan(query, dag, cfg, services);
      auto lat = latency_model(trace);
      rec.plan = std::move(trace.dag);
      rec.steps = std::move(trace.slots);
      rec.final_answer = trace.final_answer;
      rec.status = trace.status;
      for (auto& w : trace.warnings) rec.warnings.push_back(std::move(w));
      for (const auto& s : rec.steps) {
        rec.input_tokens += s.input_tokens;
        rec.output_tokens += s.output_tokens;
        rec.retries += s.retries;
        for (const auto& w : s.warnings) rec.warnings.push_back(s.label + ": " + w);
      }
      rec.t_seq = lat.t_seq;
      rec.t_plan = lat.t_plan;
      break;
    }
  }
  rec.wall = since(t0);
  return rec;
}

// ---------------------------------------------------------------------------
// Record I/O

namespace {

double ms(Nanos n) { return std::chrono::duration<double, std::milli>(n).count(); }
Nanos from_ms(double v) { return std::chrono::duration_cast<Nanos>(std::chrono::duration<double, std::milli>(v)); }

}  // namespace

nlohmann::json to_json(const NodeResult& n) {
  nlohmann::json docs = nlohmann::json::array();
  for (const auto& d : n.retrievals.documents)
    docs.push_back({{"id", d.doc_id}, {"source_id", d.source_id}, {"score", d.score}, {"text", d.text}});
  nlohmann::json j{{"id", n.label},
                   {"status", to_string(n.status)},
                   {"question", n.materialized_question},
                   {"retrievals", std::move(docs)},
                   {"answer", n.answer},
                   {"tokens", {{"in", n.input_tokens}, {"out", n.output_tokens}}},
                   {"retries", n.retries},
                   {"retrieval_calls", n.retrieval_calls},
                   {"timing",
                    {{"start_ms", ms(n.start)}, {"end_ms", ms(n.end)}, {"gen_ms", ms(n.gen_time)},
                     {"ret_ms", ms(n.ret_time)}}}};
  if (!n.raw_generation.empty()) j["raw"] = n.raw_generation;
  if (!n.reasoning_steps.empty()) j["reasoning_steps"] = n.reasoning_steps;
  if (!n.warnings.empty()) j["warnings"] = n.warnings;
  if (!n.error.empty()) j["error"] = n.error;
  return j;
}

NodeResult node_result_from_json(const nlohmann::json& j) {
  NodeResult n;
  n.label = j.at("id").get<std::string>();
  if (auto id = NodeId::parse(n.label)) n.node = id;
  n.status = parse_node_status(j.value("status", std::string("done")));
  n.materialized_question = j.value("question", "");
  n.retrievals.query = n.materialized_question;
  for (const auto& d : j.value("retrievals", nlohmann::json::array())) {
    n.retrievals.documents.push_back(
        {d.value("id", ""), d.value("text", ""), d.value("source_id", ""), d.value("score", 0.0)});
  }
  n.retrievals.k = n.retrievals.documents.size();
  n.answer = j.value("answer", "");
  n.raw_generation = j.value("raw", "");
  n.reasoning_steps = j.value("reasoning_steps", std::vector<std::string>{});
  if (j.contains("tokens")) {
    n.input_tokens = j["tokens"].value("in", std::size_t{0});
    n.output_tokens = j["tokens"].value("out", std::size_t{0});
  }
  n.retries = j.value("retries", 0);
  n.retrieval_calls = j.value("retrieval_calls", 0);
  if (j.contains("timing")) {
    const auto& t = j["timing"];
    n.start = from_ms(t.value("start_ms", 0.0));
    n.end = from_ms(t.value("end_ms", 0.0));
    n.gen_time = from_ms(t.value("gen_ms", 0.0));
    n.ret_time = from_ms(t.value("ret_ms", 0.0));
  }
  n.warnings = j.value("warnings", std::vector<std::string>{});
  n.error = j.value("error", "");
  return n;
}

nlohmann::json to_json(const RunRecord& r) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& s : r.steps) nodes.push_back(to_json(s));
  nlohmann::json j{{"id", r.id},
                   {"mode", to_string(r.mode)},
                   {"question", r.question},
                   {"plan", r.plan ? dag_to_json(*r.plan) : nlohmann::json(nullptr)},
                   {"trace", {{"nodes", std::move(nodes)}}},
                   {"final_answer", r.final_answer},
                   {"tokens", {{"in", r.input_tokens}, {"out", r.output_tokens}}},
                   {"timing",
                    {{"wall", seconds(r.wall)}, {"plan", seconds(r.plan_time)}, {"t_seq", r.t_seq},
                     {"t_plan", r.t_plan}}},
                   {"status", to_string(r.status)},
                   {"retries", r.retries},
                   {"warnings", r.warnings}};
  if (!r.subqueries.empty()) j["subqueries"] = r.subqueries;
  if (r.plan_fallback) j["plan_fallback"] = true;
  return j;
}

RunRecord run_record_from_json(const nlohmann::json& j) {
  RunRecord r;
  r.id = j.at("id").is_string() ? j["id"].get<std::string>() : j["id"].dump();
  auto mode = parse_mode(j.value("mode", ""));
  if (!mode) throw std::invalid_argument("record " + r.id + " has an unknown mode");
  r.mode = *mode;
  r.question = j.value("question", "");
  if (j.contains("plan") && !j["plan"].is_null()) r.plan = dag_from_json(j["plan"]);
  r.plan_fallback = j.value("plan_fallback", false);
  r.subqueries = j.value("subqueries", std::vector<std::string>{});
  if (j.contains("trace"))
    for (const auto& n : j["trace"].value("nodes", nlohmann::json::array())) r.steps.push_back(node_result_from_json(n));
  r.final_answer = j.value("final_answer", "");
  if (j.contains("tokens")) {
    r.input_tokens = j["tokens"].value("in", std::size_t{0});
    r.output_tokens = j["tokens"].value("out", std::size_t{0});
  }
  if (j.contains("timing")) {
    const auto& t = j["timing"];
    r.wall = from_ms(t.value("wall", 0.0) * 1000.0);
    r.plan_time = from_ms(t.value("plan", 0.0) * 1000.0);
    r.t_seq = t.value("t_seq", 0.0);
    r.t_plan = t.value("t_plan", 0.0);
  }
  r.status = parse_run_status(j.value("status", std::string("ok")));
  r.retries = j.value("retries", 0);
  r.warnings = j.value("warnings", std::vector<std::string>{});
  return r;
}

nlohmann::json strip_timing(nlohmann::json record) {
  if (record.is_object()) {
    record.erase("timing");
    for (auto& [k, v] : record.items()) v = strip_timing(std::move(v));
  } else if (record.is_array()) {
    for (auto& v : record) v = strip_timing(std::move(v));
  }
  return record;
}

std::vector<RunRecord> read_records_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open records " + path.string());
  std::vector<RunRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": invalid JSON");
    try {
      out.push_back(run_record_from_json(j));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace planrag
