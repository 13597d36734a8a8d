#include "planrag/cli.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <set>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "planrag/evalkit.hpp"
#include "planrag/plan_parser.hpp"
#include "planrag/text.hpp"

namespace planrag::cli {
namespace {

std::string env_or(const char* name, std::string fallback = {}) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : std::move(fallback);
}

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

/// Thrown for configuration problems that map to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

bool needs_retrieval(Mode m) { return m != Mode::VanillaLLM; }

}  // namespace

void apply_config_file(const std::filesystem::path& path, AppConfig& cfg) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config " + path.string());
  auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw UsageError("config " + path.string() + " is not a JSON object");
  cfg.llm = j.value("llm", cfg.llm);
  cfg.planner = j.value("planner", cfg.planner);
  cfg.judge = j.value("judge", cfg.judge);
  cfg.model = j.value("model", cfg.model);
  cfg.key_env = j.value("key_env", cfg.key_env);
  cfg.retriever = j.value("retriever", cfg.retriever);
  cfg.store = j.value("store", cfg.store);
  cfg.cache_dir = j.value("cache_dir", cfg.cache_dir.string());
  cfg.use_cache = j.value("cache", cfg.use_cache);
  cfg.jobs = j.value("jobs", cfg.jobs);
  cfg.run.k = j.value("k", cfg.run.k);
  cfg.run.max_parallel = j.value("max_parallel", cfg.run.max_parallel);
  cfg.run.role_tag_wrapping = j.value("role_tags", cfg.run.role_tag_wrapping);
  if (j.contains("mode")) {
    auto m = parse_mode(j["mode"].get<std::string>());
    if (!m) throw UsageError("config: unknown mode " + j["mode"].dump());
    cfg.run.mode = *m;
  }
  if (j.contains("tag_resolution")) {
    auto t = parse_tag_resolution(j["tag_resolution"].get<std::string>());
    if (!t) throw UsageError("config: unknown tag_resolution");
    cfg.run.tag_resolution = *t;
  }
  if (j.contains("aggregation")) {
    auto a = parse_aggregation(j["aggregation"].get<std::string>());
    if (!a) throw UsageError("config: unknown aggregation");
    cfg.run.aggregation = *a;
  }
}

std::unique_ptr<Backend> make_backend(const std::string& source, const AppConfig& cfg) {
  if (source.empty())
    throw UsageError("no LLM configured: pass --llm script:PATH or a URL, or set PLANRAG_LLM_ENDPOINT");
  if (source.starts_with("script:")) return ScriptedBackend::from_file(source.substr(7));
  if (source.starts_with("http://") || source.starts_with("https://")) {
    HttpBackendConfig hc;
    hc.endpoint = source;
    hc.model = cfg.model;
    hc.api_key = env_or(cfg.key_env.c_str());
    return std::make_unique<HttpBackend>(hc);
  }
  throw UsageError("backend source must be script:PATH or an http(s) URL: " + source);
}

std::unique_ptr<Retriever> make_retriever(const AppConfig& cfg) {
  if (!needs_retrieval(cfg.run.mode)) return std::make_unique<NullRetriever>();
  if (!cfg.store.empty() && !cfg.retriever.empty())
    throw UsageError("configure exactly one retriever source (--store or --retriever), not both");
  if (!cfg.store.empty()) {
    auto store = std::make_shared<const ChunkStore>(ChunkStore::load(cfg.store));
    return std::make_unique<LocalRetriever>(std::move(store));
  }
  if (!cfg.retriever.empty()) return std::make_unique<HttpRetriever>(cfg.retriever);
  throw UsageError("mode " + std::string(to_string(cfg.run.mode)) +
                   " needs a retriever: pass --store DIR or --retriever URL, or set PLANRAG_RETRIEVER_ENDPOINT");
}

ReasoningDag make_shape(std::string_view spec) {
  auto label = [](int d, int p, std::string text) { return NodeLabel{NodeId{d, p}, std::move(text)}; };
  NodeLabel q{NodeId::root(), "root question"};
  if (spec == "cricket") {
    auto a = label(1, 1, "first fact"), b = label(1, 2, "second fact");
    auto c = label(2, 1, "detail of <A1.1>"), d = label(2, 2, "detail of <A1.2>");
    auto e = label(3, 1, "combine <A2.1> and <A2.2>");
    return build_dag(q.text, {{q, a}, {q, b}, {a, c}, {b, d}, {c, e}, {d, e}});
  }
  if (spec == "diamond") {
    auto a = label(1, 1, "first fact"), b = label(1, 2, "second fact");
    auto c = label(2, 1, "combine <A1.1> and <A1.2>");
    return build_dag(q.text, {{q, a}, {q, b}, {a, c}, {b, c}});
  }
  if (spec.starts_with("chain:")) {
    int n = 0;
    try {
      n = std::stoi(std::string(spec.substr(6)));
    } catch (const std::exception&) {
    }
    if (n < 1) throw UsageError("chain length must be a positive integer: " + std::string(spec));
    std::vector<LabeledEdge> edges;
    NodeLabel prev = q;
    for (int i = 1; i <= n; ++i) {
      auto cur = label(i, 1, i == 1 ? "step 1" : "step " + std::to_string(i) + " after <A" + std::to_string(i - 1) + ".1>");
      edges.push_back({prev, cur});
      prev = cur;
    }
    return build_dag(q.text, edges);
  }
  std::ifstream in{std::string(spec)};
  if (!in) throw UsageError("unknown shape (cricket, diamond, chain:N or a plan JSON file): " + std::string(spec));
  auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw UsageError("shape file is not JSON: " + std::string(spec));
  return dag_from_json(j.contains("plan") ? j["plan"] : j);
}

namespace {

// ---------------------------------------------------------------------------
// ingest

int cmd_ingest(const std::string& corpus, const std::string& store_dir, std::ostream& out, std::ostream& err) {
  auto articles = read_corpus_jsonl(corpus);
  auto store = ingest_corpus(articles);
  if (std::filesystem::exists(std::filesystem::path(store_dir) / "manifest.json"))
    err << "warning: replacing existing store at " << store_dir << "\n";
  for (const auto& w : store.warnings()) err << "warning: " << w << "\n";
  store.save(store_dir);
  std::set<std::string> sources;
  for (const auto& c : store.chunks()) sources.insert(c.source_id);
  out << "ingested " << sources.size() << " articles into " << store.size() << " chunks at " << store_dir << "\n";
  return kSuccess;
}

// ---------------------------------------------------------------------------
// plan

void print_histogram(const std::map<int, DepthBucket>& hist, std::ostream& out) {
  out << "depth  count  percent\n";
  for (const auto& [d, b] : hist) {
    std::string label = d >= 4 ? ">=4" : std::to_string(d);
    out << label << std::string(7 - label.size(), ' ') << fmt("%-7.0f", static_cast<double>(b.count))
        << fmt("%.2f%%", b.fraction * 100.0) << "\n";
  }
}

std::unique_ptr<PlanCache> make_cache(const AppConfig& cfg, const std::string& planner_source) {
  if (!cfg.use_cache) return nullptr;
  return std::make_unique<DirectoryPlanCache>(cfg.cache_dir / "plans", planner_source);
}

int cmd_plan(const AppConfig& cfg, const std::string& query, const std::string& dataset, const std::string& out_path,
             bool stats, std::ostream& out, std::ostream& err) {
  if (query.empty() == dataset.empty()) throw UsageError("plan needs either a QUERY or --dataset FILE");
  auto planner_source = cfg.planner.empty() ? cfg.llm : cfg.planner;
  auto planner = make_backend(planner_source, cfg);
  auto cache = make_cache(cfg, planner_source);
  NullRetriever none;
  Services services{*planner, none, planner.get(), cache.get()};

  std::vector<std::pair<std::string, std::string>> queries;
  if (!query.empty()) {
    queries.emplace_back("", query);
  } else {
    for (const auto& item : read_dataset_jsonl(dataset)) queries.emplace_back(item.id, item.question);
  }

  std::vector<RunRecord> records;
  bool any_failed = false;
  for (const auto& [id, q] : queries) {
    RunRecord rec;
    rec.id = id;
    rec.question = q;
    rec.mode = Mode::PlanSubQ;
    rec.plan = obtain_plan(q, cfg.run, services, rec);
    for (const auto& w : rec.warnings) err << (id.empty() ? "" : id + ": ") << "warning: " << w << "\n";
    any_failed = any_failed || rec.plan_fallback;
    records.push_back(std::move(rec));
  }

  std::ofstream file;
  if (!out_path.empty()) {
    file.open(out_path, std::ios::trunc);
    if (!file) throw UsageError("cannot write " + out_path);
  }
  std::ostream& sink = out_path.empty() ? out : file;
  if (!query.empty()) {
    sink << dag_to_json(*records.front().plan).dump(2) << "\n";
  } else {
    for (const auto& r : records)
      sink << nlohmann::json{{"id", r.id}, {"plan", dag_to_json(*r.plan)}}.dump() << "\n";
  }
  if (stats) print_histogram(depth_histogram(records), out);
  return any_failed ? kPartial : kSuccess;
}

// ---------------------------------------------------------------------------
// run

/// Loads records already present in `path`, dropping a torn last line, and
/// rewrites the file with the intact ones.
std::vector<nlohmann::json> load_for_resume(const std::filesystem::path& path, std::ostream& err) {
  std::vector<nlohmann::json> kept;
  std::ifstream in(path);
  if (!in) return kept;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("id")) {
      err << "warning: dropping unreadable record line in " << path.string() << "\n";
      continue;
    }
    kept.push_back(std::move(j));
  }
  in.close();
  std::ofstream rewrite(path, std::ios::trunc);
  for (const auto& j : kept) rewrite << j.dump() << "\n";
  return kept;
}

int cmd_run(const AppConfig& cfg, const std::string& dataset, const std::string& out_path, bool resume,
            std::ostream& out, std::ostream& err) {
  if (out_path.empty()) throw UsageError("run needs --out FILE");
  if (cfg.run.k == 0) throw UsageError("--k must be >= 1");
  auto items = read_dataset_jsonl(dataset);
  auto generator = make_backend(cfg.llm, cfg);
  std::unique_ptr<Backend> planner;
  if (!cfg.planner.empty() && is_plan_mode(cfg.run.mode)) planner = make_backend(cfg.planner, cfg);
  auto retriever = make_retriever(cfg);
  auto cache = is_plan_mode(cfg.run.mode) ? make_cache(cfg, cfg.planner.empty() ? cfg.llm : cfg.planner) : nullptr;
  Services services{*generator, *retriever, planner.get(), cache.get()};

  std::set<std::string> done;
  std::size_t failed = 0;
  if (resume) {
    for (const auto& j : load_for_resume(out_path, err)) {
      done.insert(j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump());
      if (j.value("status", std::string("ok")) != "ok") ++failed;
    }
  } else {
    std::ofstream truncate(out_path, std::ios::trunc);
    if (!truncate) throw UsageError("cannot write " + out_path);
  }

  std::vector<const DatasetItem*> todo;
  for (const auto& it : items)
    if (!done.contains(it.id)) todo.push_back(&it);

  std::ofstream file(out_path, std::ios::app);
  if (!file) throw UsageError("cannot write " + out_path);

  // Items run concurrently; records are appended in dataset order.
  std::vector<std::optional<std::string>> finished(todo.size());
  std::size_t next_to_write = 0;
  std::mutex mu;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < todo.size(); i = next++) {
      auto rec = run_pipeline(todo[i]->question, cfg.run, services, todo[i]->id);
      std::lock_guard lock(mu);
      if (rec.status != RunStatus::Ok) {
        ++failed;
        err << todo[i]->id << ": " << to_string(rec.status);
        if (!rec.warnings.empty()) err << " (" << rec.warnings.back() << ")";
        err << "\n";
      }
      finished[i] = to_json(rec).dump();
      while (next_to_write < finished.size() && finished[next_to_write]) {
        file << *finished[next_to_write] << "\n" << std::flush;
        finished[next_to_write].reset();
        ++next_to_write;
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < std::min(std::max<std::size_t>(cfg.jobs, 1), todo.size()); ++w) pool.emplace_back(worker);
  }

  out << "wrote " << todo.size() << " records to " << out_path;
  if (!done.empty()) out << " (" << done.size() << " already present)";
  out << "; " << failed << " not ok\n";
  return failed ? kPartial : kSuccess;
}

// ---------------------------------------------------------------------------
// eval

int cmd_eval(const AppConfig& cfg, const std::string& records_path, const std::string& dataset, bool pr, bool ig,
             const std::string& report_path, const std::string& ig_csv_path, std::ostream& out, std::ostream& err) {
  auto records = read_records_jsonl(records_path);
  auto items = read_dataset_jsonl(dataset);
  std::unique_ptr<Backend> judge;
  EvalOptions opts;
  opts.pr = pr;
  if (ig) {
    judge = make_backend(cfg.judge.empty() ? cfg.llm : cfg.judge, cfg);
    opts.judge = judge.get();
    opts.judge_parallel = std::max<std::size_t>(cfg.run.max_parallel, 1);
  }
  EvalReport report;
  try {
    report = build_report(records, items, opts);
  } catch (const EvalError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }
  out << render_table(report);
  for (const auto& w : report.warnings) err << "warning: " << w << "\n";
  if (!report_path.empty()) {
    std::ofstream f(report_path, std::ios::trunc);
    f << to_json(report).dump(2) << "\n";
  }
  if (!ig_csv_path.empty() && report.ig) {
    std::ofstream f(ig_csv_path, std::ios::trunc);
    f << ig_csv(*report.ig);
  }
  return kSuccess;
}

// ---------------------------------------------------------------------------
// bench

int bench_shape(const std::string& spec, double cost, std::ostream& out) {
  auto dag = make_shape(spec);
  std::map<NodeId, double> costs;
  for (const auto& [id, n] : dag.nodes())
    if (!id.is_root()) costs[id] = cost;
  auto lat = latency_model(dag, costs);
  out << "shape " << spec << ": " << dag.size() - 1 << " subqueries, depth " << dag.reasoning_depth() << "\n";
  out << "t_seq    " << fmt("%g", lat.t_seq) << "\n";
  out << "t_plan   " << fmt("%g", lat.t_plan) << "\n";
  out << "speedup  " << fmt("%.4f", lat.speedup()) << "\n";

  // Unit-size context: every question, answer and retrieved set is one unit.
  out << "node   plan-context  sequential-context\n";
  std::size_t step = 0;
  for (const auto& layer : dag.layers()) {
    for (auto id : layer) {
      if (id.is_root()) continue;
      ++step;
      std::size_t parents = 0;
      for (auto p : dag.parents(id))
        if (!p.is_root()) ++parents;
      auto label = id.render();
      out << label << std::string(label.size() < 7 ? 7 - label.size() : 1, ' ')
          << fmt("%-14.0f", static_cast<double>(2 + 2 * parents)) << 1 + 3 * step << "\n";
    }
  }
  return kSuccess;
}

int bench_records(const std::string& path, std::ostream& out) {
  auto records = read_records_jsonl(path);
  struct Acc {
    std::size_t n = 0;
    double in = 0, out = 0, t_seq = 0, t_plan = 0, ctx_peak = 0, ctx_total = 0;
  };
  std::map<std::string, Acc> by_mode;
  for (const auto& r : records) {
    auto& a = by_mode[std::string(to_string(r.mode))];
    auto ctx = context_cost(r);
    ++a.n;
    a.in += static_cast<double>(r.input_tokens);
    a.out += static_cast<double>(r.output_tokens);
    a.t_seq += r.t_seq;
    a.t_plan += r.t_plan;
    a.ctx_peak += static_cast<double>(ctx.peak);
    a.ctx_total += static_cast<double>(ctx.total);
  }
  out << "mode        n     tokens_in  tokens_out  t_seq_s   t_plan_s  speedup  ctx_peak  ctx_total\n";
  for (const auto& [mode, a] : by_mode) {
    double n = static_cast<double>(a.n);
    out << mode << std::string(mode.size() < 12 ? 12 - mode.size() : 1, ' ') << fmt("%-6.0f", n)
        << fmt("%-11.1f", a.in / n) << fmt("%-12.1f", a.out / n) << fmt("%-10.4f", a.t_seq / n)
        << fmt("%-10.4f", a.t_plan / n) << fmt("%-9.3f", a.t_plan > 0 ? a.t_seq / a.t_plan : 1.0)
        << fmt("%-10.1f", a.ctx_peak / n) << fmt("%.1f", a.ctx_total / n) << "\n";
  }
  return kSuccess;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Plan-based retrieval-augmented generation harness"};
  app.require_subcommand(1);

  AppConfig cfg;
  std::string config_path, mode, tag_resolution, aggregation, llm, planner, judge, store, retriever, cache_dir, model;
  std::size_t k = 0, max_parallel = 0, jobs = 0;
  bool no_cache = false, role_tags = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file");
    sub->add_option("--llm", llm, "answer backend: script:PATH or base URL");
    sub->add_option("--model", model, "model name sent to HTTP backends");
    sub->add_option("--planner", planner, "planner backend (defaults to --llm)");
    sub->add_option("--cache", cache_dir, "cache directory");
    sub->add_flag("--no-cache", no_cache, "do not read or write the plan cache");
  };
  auto add_execution = [&](CLI::App* sub) {
    sub->add_option("--mode", mode, "VanillaLLM|VanillaRAG|CoTRAG|QDRAG|Plan|PlanSubQ");
    sub->add_option("--k", k, "documents per retrieval");
    sub->add_option("--max-parallel", max_parallel, "concurrent nodes per layer");
    sub->add_option("--tag-resolution", tag_resolution, "Deterministic|LLM");
    sub->add_option("--aggregation", aggregation, "SinkAnswer|BooleanNormalize");
    sub->add_option("--store", store, "local chunk store directory");
    sub->add_option("--retriever", retriever, "HTTP retrieval endpoint");
    sub->add_option("--jobs", jobs, "dataset items run concurrently");
    sub->add_flag("--role-tags", role_tags, "wrap prompts in [INST] <<SYS>> role tags");
  };

  std::string corpus, ingest_store;
  auto* ingest = app.add_subcommand("ingest", "chunk a JSONL corpus into a local store");
  ingest->add_option("corpus", corpus, "corpus JSONL of {id, text}")->required();
  ingest->add_option("--store", ingest_store, "output store directory")->required();

  std::string plan_query, plan_dataset, plan_out;
  bool plan_stats = false;
  auto* plan = app.add_subcommand("plan", "generate reasoning plans");
  plan->add_option("query", plan_query, "a single query");
  plan->add_option("--dataset", plan_dataset, "dataset JSONL");
  plan->add_option("--out", plan_out, "write plans here instead of stdout");
  plan->add_flag("--stats", plan_stats, "print the depth histogram");
  add_common(plan);

  std::string run_dataset, run_out;
  bool resume = false;
  auto* run = app.add_subcommand("run", "run a pipeline over a dataset");
  run->add_option("dataset", run_dataset, "dataset JSONL")->required();
  run->add_option("--out", run_out, "records JSONL")->required();
  run->add_flag("--resume", resume, "skip ids already present in --out");
  add_common(run);
  add_execution(run);

  std::string eval_records, eval_dataset, eval_report, eval_csv;
  bool eval_pr = false, eval_ig = false;
  auto* eval = app.add_subcommand("eval", "score records against a dataset");
  eval->add_option("records", eval_records, "records JSONL")->required();
  eval->add_option("dataset", eval_dataset, "dataset JSONL")->required();
  eval->add_flag("--pr", eval_pr, "retrieval precision/recall against gold sentences");
  eval->add_flag("--ig", eval_ig, "information-gain curve with the judge backend");
  eval->add_option("--judge", judge, "judge backend (defaults to --llm)");
  eval->add_option("--report", eval_report, "write the report JSON here");
  eval->add_option("--ig-csv", eval_csv, "write the per-depth information gain CSV here");
  eval->add_option("--max-parallel", max_parallel, "concurrent judge calls");
  eval->add_option("--config", config_path, "JSON config file");
  eval->add_option("--llm", llm, "backend: script:PATH or base URL");
  eval->add_option("--model", model, "model name sent to HTTP backends");

  std::string bench_target, bench_records_path;
  double bench_cost = 1.0;
  auto* bench = app.add_subcommand("bench", "latency and context cost models");
  bench->add_option("shape", bench_target, "cricket | diamond | chain:N | plan JSON file");
  bench->add_option("--records", bench_records_path, "records JSONL for a per-mode token/latency table");
  bench->add_option("--cost", bench_cost, "per-node cost for shapes");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e, out, err);
    return code == 0 ? kSuccess : kUsage;
  }

  try {
    cfg.llm = env_or("PLANRAG_LLM_ENDPOINT");
    cfg.model = env_or("PLANRAG_LLM_MODEL");
    if (!config_path.empty()) apply_config_file(config_path, cfg);
    if (!llm.empty()) cfg.llm = llm;
    if (!model.empty()) cfg.model = model;
    if (!planner.empty()) cfg.planner = planner;
    if (!judge.empty()) cfg.judge = judge;
    if (!store.empty()) cfg.store = store;
    if (!retriever.empty()) cfg.retriever = retriever;
    if (cfg.store.empty() && cfg.retriever.empty()) cfg.retriever = env_or("PLANRAG_RETRIEVER_ENDPOINT");
    if (!cache_dir.empty()) cfg.cache_dir = cache_dir;
    if (no_cache) cfg.use_cache = false;
    if (jobs) cfg.jobs = jobs;
    if (k) cfg.run.k = k;
    if (max_parallel) cfg.run.max_parallel = max_parallel;
    if (role_tags) cfg.run.role_tag_wrapping = true;
    if (!mode.empty()) {
      auto m = parse_mode(mode);
      if (!m) throw UsageError("unknown --mode " + mode);
      cfg.run.mode = *m;
    }
    if (!tag_resolution.empty()) {
      auto t = parse_tag_resolution(tag_resolution);
      if (!t) throw UsageError("unknown --tag-resolution " + tag_resolution);
      cfg.run.tag_resolution = *t;
    }
    if (!aggregation.empty()) {
      auto a = parse_aggregation(aggregation);
      if (!a) throw UsageError("unknown --aggregation " + aggregation);
      cfg.run.aggregation = *a;
    }

    if (*ingest) return cmd_ingest(corpus, ingest_store, out, err);
    if (*plan) return cmd_plan(cfg, plan_query, plan_dataset, plan_out, plan_stats, out, err);
    if (*run) return cmd_run(cfg, run_dataset, run_out, resume, out, err);
    if (*eval) return cmd_eval(cfg, eval_records, eval_dataset, eval_pr, eval_ig, eval_report, eval_csv, out, err);
    if (*bench) {
      if (bench_target.empty() == bench_records_path.empty())
        throw UsageError("bench needs either a SHAPE or --records FILE");
      return bench_records_path.empty() ? bench_shape(bench_target, bench_cost, out)
                                        : bench_records(bench_records_path, out);
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}

}  // namespace planrag::cli
