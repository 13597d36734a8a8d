#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "planrag/backends.hpp"
#include "planrag/executor.hpp"

namespace planrag {

struct DatasetItem {
  std::string id;
  std::string question;
  std::vector<std::string> answers;  // nonempty
  std::optional<std::vector<std::string>> gold_sentences;
};

/// JSONL of {id, question, answers:[...], gold_sentences:[...]?}. A string
/// "answer" is accepted in place of "answers". Errors name path:line.
std::vector<DatasetItem> read_dataset_jsonl(const std::filesystem::path& path);

enum class EvalErrorKind { MissingGold, IdMismatch, JudgeUnparseable };

class EvalError : public std::runtime_error {
 public:
  EvalError(EvalErrorKind kind, const std::string& what, std::vector<std::string> subjects = {})
      : std::runtime_error(what), kind_(kind), subjects_(std::move(subjects)) {}
  EvalErrorKind kind() const noexcept { return kind_; }
  const std::vector<std::string>& subjects() const noexcept { return subjects_; }

 private:
  EvalErrorKind kind_;
  std::vector<std::string> subjects_;
};

/// True iff some gold answer, in containment normal form, is a substring of
/// the normalized prediction. Empty gold strings never match.
bool accuracy_contains(std::string_view prediction, std::span<const std::string> answers);

struct DepthBucket {
  std::size_t count = 0;
  double fraction = 0.0;
};

/// Reasoning-depth distribution over records that carry a plan. Key 4 holds
/// every depth >= 4. Only attained depths appear.
std::map<int, DepthBucket> depth_histogram(std::span<const RunRecord> records);

/// Consecutive chunks of at most `words` words, joined by single spaces.
std::vector<std::string> gold_chunks(std::string_view sentence, std::size_t words = 50);

/// All documents a record retrieved across its steps, first occurrence of
/// each doc_id kept.
std::vector<Document> retrieved_documents(const RunRecord& record);

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
  std::size_t hits = 0;       // retrieved documents containing a gold chunk
  std::size_t retrieved = 0;  // distinct retrieved documents
  std::size_t covered = 0;    // gold sentences with a chunk inside some retrieved document
  std::size_t gold = 0;       // gold sentences
};

/// Micro-averaged retrieval precision/recall against gold sentences split
/// into 50-word chunks. Records join items on id; a joined item without gold
/// sentences raises EvalError(MissingGold).
PrecisionRecall retrieval_pr(std::span<const RunRecord> records, std::span<const DatasetItem> items);

/// Judge score from raw output ("7", "Information Gain: 7"); 0..10 accepted.
/// Throws EvalError(JudgeUnparseable).
double parse_ig_score(std::string_view raw);

struct IgCurve {
  std::map<int, double> mean;          // depth -> mean score
  std::map<int, std::size_t> samples;  // depth -> judged records
  std::vector<std::string> warnings;
};

/// Cumulative information gain per depth. A record with a depth-D plan is
/// judged at d = 1..D with the subqueries of depth <= d; a root-only record
/// is judged once, at depth 0, on the bare query. Judge calls run with at
/// most `parallel` in flight.
IgCurve info_gain_curve(std::span<const RunRecord> records, Backend& judge, std::size_t parallel = 4,
                        const RetryPolicy& retry = {});

struct EvalOptions {
  bool pr = false;            // require precision/recall (MissingGold when absent)
  Backend* judge = nullptr;   // enables the IG curve
  std::size_t judge_parallel = 4;
};

struct EvalReport {
  std::size_t n = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;
  std::map<int, DepthBucket> depth_histogram;
  std::optional<PrecisionRecall> pr;
  double mean_input_tokens = 0.0;
  double mean_output_tokens = 0.0;
  std::optional<IgCurve> ig;
  std::map<std::string, std::size_t> status_counts;
  std::vector<std::string> warnings;
};

/// Joins records to items by id (EvalError(IdMismatch) lists ids present on
/// only one side) and assembles all metrics. Precision/recall are computed
/// when requested or when every item has gold sentences, otherwise omitted.
EvalReport build_report(std::span<const RunRecord> records, std::span<const DatasetItem> items,
                        const EvalOptions& options = {});

nlohmann::json to_json(const EvalReport& report);
std::string render_table(const EvalReport& report);
std::string ig_csv(const IgCurve& curve);

}  // namespace planrag
