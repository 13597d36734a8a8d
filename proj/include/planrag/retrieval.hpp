#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace planrag {

struct Document {
  std::string doc_id;
  std::string text;
  std::string source_id;
  double score = 0.0;

  bool operator==(const Document&) const = default;
};

struct RetrievalSet {
  std::string query;
  std::vector<Document> documents;  // descending score, ties by doc_id ascending
  std::size_t k = 0;

  std::vector<std::string> texts() const;
};

enum class RetrievalErrorKind { EmptyCorpus, EndpointUnavailable, BadInput, BadStore };

class RetrievalError : public std::runtime_error {
 public:
  RetrievalError(RetrievalErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  RetrievalErrorKind kind() const noexcept { return kind_; }

 private:
  RetrievalErrorKind kind_;
};

struct Article {
  std::string source_id;
  std::string text;
};

/// Non-overlapping fixed-size word chunks plus the term statistics used by
/// the lexical scorer. Read-only once built; concurrent reads are safe.
///
/// Scoring, for query terms t (index_term form, counted with multiplicity qtf):
///   score(q, c) = sum_t qtf(t) * (1 + ln tf(t, c)) * ln(1 + N / df(t))
/// where tf is the count of t in chunk c, df the number of chunks containing
/// t and N the number of chunks; terms absent from c contribute 0.
class ChunkStore {
 public:
  static constexpr std::size_t kChunkWords = 100;
  static constexpr int kFormatVersion = 1;

  /// Splits an article into chunks. A source_id seen before replaces the
  /// earlier article and records a warning. Returns the number of chunks.
  std::size_t add_article(const std::string& source_id, std::string_view text);

  std::size_t size() const noexcept { return chunks_.size(); }
  bool empty() const noexcept { return chunks_.empty(); }
  const std::vector<Document>& chunks() const noexcept { return chunks_; }
  std::vector<Document> chunks_of(std::string_view source_id) const;
  const std::vector<std::string>& warnings() const noexcept { return warnings_; }

  double score(std::string_view query, std::size_t chunk_index) const;
  RetrievalSet retrieve(std::string_view query, std::size_t k) const;

  /// Directory layout: manifest.json + chunks.jsonl (see README).
  void save(const std::filesystem::path& dir) const;
  static ChunkStore load(const std::filesystem::path& dir);

 private:
  using TermCounts = std::unordered_map<std::string, int>;
  void push_chunk(Document doc);
  void rebuild_df();
  double score_terms(const std::map<std::string, int>& query_terms, std::size_t chunk_index) const;

  std::vector<Document> chunks_;
  std::vector<TermCounts> tf_;
  std::unordered_map<std::string, int> df_;
  std::vector<std::string> warnings_;
};

/// Chunks every article; throws RetrievalError(EmptyCorpus) when nothing is ingested.
ChunkStore ingest_corpus(std::span<const Article> articles);

/// Reads JSONL lines of {id, text}; errors name the 1-based line.
std::vector<Article> read_corpus_jsonl(const std::filesystem::path& path);

class Retriever {
 public:
  virtual ~Retriever() = default;
  /// Top-k documents; k must be >= 1. Must be safe for concurrent calls.
  virtual RetrievalSet retrieve(std::string_view query, std::size_t k) const = 0;
};

class LocalRetriever : public Retriever {
 public:
  explicit LocalRetriever(std::shared_ptr<const ChunkStore> store) : store_(std::move(store)) {}
  RetrievalSet retrieve(std::string_view query, std::size_t k) const override;

 private:
  std::shared_ptr<const ChunkStore> store_;
};

/// POST {query, k} -> {documents:[{id, text, score}]}.
class HttpRetriever : public Retriever {
 public:
  explicit HttpRetriever(std::string endpoint);
  RetrievalSet retrieve(std::string_view query, std::size_t k) const override;

 private:
  std::string endpoint_;
};

/// Retriever that returns nothing; used by modes that never retrieve.
class NullRetriever : public Retriever {
 public:
  RetrievalSet retrieve(std::string_view query, std::size_t k) const override;
};

}  // namespace planrag
