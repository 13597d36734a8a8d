#include "planrag/evalkit.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "planrag/plan_parser.hpp"
#include "planrag/prompts.hpp"
#include "planrag/text.hpp"

namespace planrag {
namespace {

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

std::string string_of(const nlohmann::json& j) { return j.is_string() ? j.get<std::string>() : j.dump(); }

std::map<std::string, const DatasetItem*> index_items(std::span<const DatasetItem> items) {
  std::map<std::string, const DatasetItem*> out;
  for (const auto& it : items) out[it.id] = &it;
  return out;
}

}  // namespace

std::vector<DatasetItem> read_dataset_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset " + path.string());
  std::vector<DatasetItem> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto where = path.string() + ":" + std::to_string(lineno);
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw std::runtime_error(where + ": invalid JSON");
    if (!j.contains("id") || !j.contains("question")) throw std::runtime_error(where + ": expected id and question");
    DatasetItem item;
    item.id = string_of(j["id"]);
    item.question = j["question"].get<std::string>();
    if (j.contains("answers") && j["answers"].is_array()) {
      for (const auto& a : j["answers"]) item.answers.push_back(string_of(a));
    } else if (j.contains("answer")) {
      item.answers.push_back(string_of(j["answer"]));
    }
    if (item.answers.empty()) throw std::runtime_error(where + ": item " + item.id + " has no gold answers");
    if (j.contains("gold_sentences") && j["gold_sentences"].is_array())
      item.gold_sentences = j["gold_sentences"].get<std::vector<std::string>>();
    out.push_back(std::move(item));
  }
  return out;
}

bool accuracy_contains(std::string_view prediction, std::span<const std::string> answers) {
  auto pred = normalize_for_match(prediction);
  for (const auto& a : answers) {
    auto gold = normalize_for_match(a);
    if (!gold.empty() && pred.find(gold) != std::string::npos) return true;
  }
  return false;
}

std::map<int, DepthBucket> depth_histogram(std::span<const RunRecord> records) {
  std::map<int, DepthBucket> out;
  std::size_t total = 0;
  for (const auto& r : records) {
    if (!r.plan) continue;
    ++out[std::min(r.plan->reasoning_depth(), 4)].count;
    ++total;
  }
  for (auto& [d, b] : out) b.fraction = static_cast<double>(b.count) / static_cast<double>(total);
  return out;
}

std::vector<std::string> gold_chunks(std::string_view sentence, std::size_t words) {
  auto ws = split_words(sentence);
  std::vector<std::string> out;
  for (std::size_t start = 0; start < ws.size(); start += words) {
    std::string chunk;
    for (std::size_t i = start; i < std::min(ws.size(), start + words); ++i) {
      if (!chunk.empty()) chunk.push_back(' ');
      chunk.append(ws[i]);
    }
    out.push_back(std::move(chunk));
  }
  return out;
}

std::vector<Document> retrieved_documents(const RunRecord& record) {
  std::vector<Document> out;
  std::set<std::string> seen;
  for (const auto& s : record.steps)
    for (const auto& d : s.retrievals.documents)
      if (seen.insert(d.doc_id).second) out.push_back(d);
  return out;
}

PrecisionRecall retrieval_pr(std::span<const RunRecord> records, std::span<const DatasetItem> items) {
  auto by_id = index_items(items);
  PrecisionRecall pr;
  for (const auto& r : records) {
    auto it = by_id.find(r.id);
    if (it == by_id.end()) throw EvalError(EvalErrorKind::IdMismatch, "record " + r.id + " has no dataset item", {r.id});
    if (!it->second->gold_sentences)
      throw EvalError(EvalErrorKind::MissingGold, "item " + r.id + " has no gold sentences", {r.id});

    std::vector<std::vector<std::string>> chunks;
    for (const auto& s : *it->second->gold_sentences) {
      std::vector<std::string> cs;
      for (const auto& c : gold_chunks(s)) {
        auto n = normalize_for_match(c);
        if (!n.empty()) cs.push_back(std::move(n));
      }
      chunks.push_back(std::move(cs));
    }
    std::vector<bool> covered(chunks.size(), false);
    for (const auto& doc : retrieved_documents(r)) {
      auto text = normalize_for_match(doc.text);
      bool hit = false;
      for (std::size_t g = 0; g < chunks.size(); ++g) {
        for (const auto& c : chunks[g]) {
          if (text.find(c) != std::string::npos) {
            hit = true;
            covered[g] = true;
            break;
          }
        }
      }
      ++pr.retrieved;
      if (hit) ++pr.hits;
    }
    pr.gold += chunks.size();
    pr.covered += static_cast<std::size_t>(std::count(covered.begin(), covered.end(), true));
  }
  pr.precision = pr.retrieved ? static_cast<double>(pr.hits) / static_cast<double>(pr.retrieved) : 0.0;
  pr.recall = pr.gold ? static_cast<double>(pr.covered) / static_cast<double>(pr.gold) : 0.0;
  return pr;
}

double parse_ig_score(std::string_view raw) {
  auto s = trim(strip_code_fence(raw));
  if (starts_with_icase(s, "information gain:")) s = trim(s.substr(17));
  std::string text(s);
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    throw EvalError(EvalErrorKind::JudgeUnparseable, "judge output is not a number: " + text, {text});
  }
  if (!trim(std::string_view(text).substr(used)).empty() || !std::isfinite(v) || v < 0.0 || v > 10.0)
    throw EvalError(EvalErrorKind::JudgeUnparseable, "judge output is not a score in 0..10: " + text, {text});
  return v;
}

IgCurve info_gain_curve(std::span<const RunRecord> records, Backend& judge, std::size_t parallel,
                        const RetryPolicy& retry) {
  struct Job {
    std::string record_id;
    int depth;
    PromptBundle bundle;
    std::optional<double> score;
    std::string warning;
  };
  std::vector<Job> jobs;
  for (const auto& r : records) {
    if (!r.plan) continue;
    const auto& dag = *r.plan;
    if (dag.is_simple()) {
      std::vector<PlanNode> only{dag.node(NodeId::root())};
      jobs.push_back({r.id, 0, build_ig_judge_prompt(r.question, only), {}, {}});
      continue;
    }
    auto layers = dag.layers();
    std::vector<PlanNode> upto;
    for (int d = 1; d < static_cast<int>(layers.size()); ++d) {
      for (auto id : layers[static_cast<std::size_t>(d)]) upto.push_back(dag.node(id));
      jobs.push_back({r.id, d, build_ig_judge_prompt(r.question, upto), {}, {}});
    }
  }

  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      auto& job = jobs[i];
      try {
        job.score = parse_ig_score(generate_with_retry(judge, job.bundle, retry).text);
      } catch (const std::exception& e) {
        job.warning = "record " + job.record_id + " depth " + std::to_string(job.depth) + " skipped: " + e.what();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < std::min(std::max<std::size_t>(parallel, 1), jobs.size()); ++w) pool.emplace_back(work);
  }

  IgCurve curve;
  std::map<int, double> sums;
  for (const auto& job : jobs) {
    if (!job.score) {
      curve.warnings.push_back(job.warning);
      continue;
    }
    sums[job.depth] += *job.score;
    ++curve.samples[job.depth];
  }
  for (const auto& [d, s] : sums) curve.mean[d] = s / static_cast<double>(curve.samples[d]);
  return curve;
}

EvalReport build_report(std::span<const RunRecord> records, std::span<const DatasetItem> items,
                        const EvalOptions& options) {
  auto by_id = index_items(items);
  std::vector<std::string> mismatched;
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (!by_id.contains(r.id) || !seen.insert(r.id).second) mismatched.push_back(r.id);
  }
  for (const auto& it : items)
    if (!seen.contains(it.id)) mismatched.push_back(it.id);
  if (!mismatched.empty()) {
    std::string list;
    for (const auto& id : mismatched) list += (list.empty() ? "" : ", ") + id;
    throw EvalError(EvalErrorKind::IdMismatch, "records and dataset do not join on id: " + list, mismatched);
  }

  EvalReport rep;
  rep.n = records.size();
  double in = 0.0, out = 0.0;
  for (const auto& r : records) {
    if (accuracy_contains(r.final_answer, by_id.at(r.id)->answers)) ++rep.correct;
    in += static_cast<double>(r.input_tokens);
    out += static_cast<double>(r.output_tokens);
    ++rep.status_counts[std::string(to_string(r.status))];
  }
  if (rep.n) {
    rep.accuracy = static_cast<double>(rep.correct) / static_cast<double>(rep.n);
    rep.mean_input_tokens = in / static_cast<double>(rep.n);
    rep.mean_output_tokens = out / static_cast<double>(rep.n);
  }
  rep.depth_histogram = depth_histogram(records);

  bool all_gold = !items.empty() && std::all_of(items.begin(), items.end(), [](const auto& i) { return i.gold_sentences.has_value(); });
  if (options.pr || all_gold) rep.pr = retrieval_pr(records, items);

  if (options.judge) {
    rep.ig = info_gain_curve(records, *options.judge, options.judge_parallel);
    for (const auto& w : rep.ig->warnings) rep.warnings.push_back(w);
  }
  return rep;
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json hist = nlohmann::json::object();
  for (const auto& [d, b] : r.depth_histogram)
    hist[d >= 4 ? std::string(">=4") : std::to_string(d)] = {{"count", b.count}, {"fraction", b.fraction}};
  nlohmann::json j{{"n", r.n},
                   {"correct", r.correct},
                   {"accuracy", r.accuracy},
                   {"depth_histogram", std::move(hist)},
                   {"tokens", {{"mean_in", r.mean_input_tokens}, {"mean_out", r.mean_output_tokens}}},
                   {"status", r.status_counts},
                   {"warnings", r.warnings}};
  if (r.pr)
    j["retrieval"] = {{"precision", r.pr->precision}, {"recall", r.pr->recall}, {"hits", r.pr->hits},
                      {"retrieved", r.pr->retrieved}, {"covered", r.pr->covered}, {"gold", r.pr->gold}};
  if (r.ig) {
    nlohmann::json curve = nlohmann::json::object();
    for (const auto& [d, m] : r.ig->mean) curve[std::to_string(d)] = {{"mean", m}, {"samples", r.ig->samples.at(d)}};
    j["info_gain"] = std::move(curve);
  }
  return j;
}

std::string render_table(const EvalReport& r) {
  std::ostringstream out;
  out << "items            " << r.n << "\n";
  out << "accuracy         " << fmt("%.4f", r.accuracy) << " (" << r.correct << "/" << r.n << ")\n";
  out << "mean tokens in   " << fmt("%.1f", r.mean_input_tokens) << "\n";
  out << "mean tokens out  " << fmt("%.1f", r.mean_output_tokens) << "\n";
  for (const auto& [s, c] : r.status_counts) out << "status " << s << std::string(s.size() < 10 ? 10 - s.size() : 1, ' ') << c << "\n";
  if (!r.depth_histogram.empty()) {
    out << "depth  count  percent\n";
    for (const auto& [d, b] : r.depth_histogram) {
      std::string label = d >= 4 ? ">=4" : std::to_string(d);
      out << label << std::string(7 - label.size(), ' ') << fmt("%-7.0f", static_cast<double>(b.count))
          << fmt("%.2f%%", b.fraction * 100.0) << "\n";
    }
  }
  if (r.pr) {
    out << "precision        " << fmt("%.4f", r.pr->precision) << " (" << r.pr->hits << "/" << r.pr->retrieved << ")\n";
    out << "recall           " << fmt("%.4f", r.pr->recall) << " (" << r.pr->covered << "/" << r.pr->gold << ")\n";
  }
  if (r.ig) {
    out << "depth  info gain  samples\n";
    for (const auto& [d, m] : r.ig->mean) {
      auto label = std::to_string(d);
      out << label << std::string(label.size() < 7 ? 7 - label.size() : 1, ' ') << fmt("%-11.2f", m)
          << r.ig->samples.at(d) << "\n";
    }
  }
  return out.str();
}

std::string ig_csv(const IgCurve& curve) {
  std::string out = "depth,mean,samples\n";
  for (const auto& [d, m] : curve.mean)
    out += std::to_string(d) + "," + fmt("%.6g", m) + "," + std::to_string(curve.samples.at(d)) + "\n";
  return out;
}

}  // namespace planrag
