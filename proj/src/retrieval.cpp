#include "planrag/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <httplib.h>
#include <json.hpp>

#include "planrag/backends.hpp"
#include "planrag/text.hpp"

namespace planrag {
namespace {

std::map<std::string, int> query_terms(std::string_view query) {
  std::map<std::string, int> terms;
  for (auto w : split_words(query)) {
    auto t = index_term(w);
    if (!t.empty()) ++terms[t];
  }
  return terms;
}

void sort_ranked(std::vector<Document>& docs) {
  std::stable_sort(docs.begin(), docs.end(), [](const Document& a, const Document& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.doc_id < b.doc_id;
  });
}

}  // namespace

std::vector<std::string> RetrievalSet::texts() const {
  std::vector<std::string> out;
  out.reserve(documents.size());
  for (const auto& d : documents) out.push_back(d.text);
  return out;
}

void ChunkStore::push_chunk(Document doc) {
  TermCounts counts;
  for (auto w : split_words(doc.text)) {
    auto t = index_term(w);
    if (!t.empty()) ++counts[t];
  }
  for (const auto& [t, n] : counts) ++df_[t];
  tf_.push_back(std::move(counts));
  chunks_.push_back(std::move(doc));
}

void ChunkStore::rebuild_df() {
  df_.clear();
  for (const auto& counts : tf_) {
    for (const auto& [t, n] : counts) ++df_[t];
  }
}

std::size_t ChunkStore::add_article(const std::string& source_id, std::string_view text) {
  bool replaced = false;
  for (std::size_t i = chunks_.size(); i-- > 0;) {
    if (chunks_[i].source_id == source_id) {
      chunks_.erase(chunks_.begin() + static_cast<std::ptrdiff_t>(i));
      tf_.erase(tf_.begin() + static_cast<std::ptrdiff_t>(i));
      replaced = true;
    }
  }
  if (replaced) {
    rebuild_df();
    warnings_.push_back("source " + source_id + " ingested twice; later text replaces the earlier one");
  }

  auto words = split_words(text);
  std::size_t n = 0;
  for (std::size_t start = 0; start < words.size(); start += kChunkWords, ++n) {
    std::string chunk;
    for (std::size_t i = start; i < std::min(words.size(), start + kChunkWords); ++i) {
      if (!chunk.empty()) chunk.push_back(' ');
      chunk.append(words[i]);
    }
    push_chunk(Document{source_id + "#" + std::to_string(n), std::move(chunk), source_id, 0.0});
  }
  return n;
}

std::vector<Document> ChunkStore::chunks_of(std::string_view source_id) const {
  std::vector<Document> out;
  for (const auto& c : chunks_) {
    if (c.source_id == source_id) out.push_back(c);
  }
  return out;
}

double ChunkStore::score_terms(const std::map<std::string, int>& terms, std::size_t idx) const {
  const auto& counts = tf_.at(idx);
  const double n = static_cast<double>(chunks_.size());
  double s = 0.0;
  for (const auto& [t, qtf] : terms) {
    auto it = counts.find(t);
    if (it == counts.end()) continue;
    double df = static_cast<double>(df_.at(t));
    s += qtf * (1.0 + std::log(static_cast<double>(it->second))) * std::log(1.0 + n / df);
  }
  return s;
}

double ChunkStore::score(std::string_view query, std::size_t chunk_index) const {
  return score_terms(query_terms(query), chunk_index);
}

RetrievalSet ChunkStore::retrieve(std::string_view query, std::size_t k) const {
  if (k == 0) throw std::invalid_argument("retrieve needs k >= 1");
  RetrievalSet out{std::string(query), {}, k};
  auto terms = query_terms(query);
  std::vector<Document> ranked;
  ranked.reserve(chunks_.size());
  for (std::size_t i = 0; i < chunks_.size(); ++i) {
    Document d = chunks_[i];
    d.score = score_terms(terms, i);
    ranked.push_back(std::move(d));
  }
  if (ranked.size() > k) {
    std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(k), ranked.end(),
                      [](const Document& a, const Document& b) {
                        if (a.score != b.score) return a.score > b.score;
                        return a.doc_id < b.doc_id;
                      });
    ranked.resize(k);
  }
  sort_ranked(ranked);
  out.documents = std::move(ranked);
  return out;
}

void ChunkStore::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::json sources = nlohmann::json::array();
  std::map<std::string, std::size_t> per_source;
  std::vector<std::string> order;
  for (const auto& c : chunks_) {
    if (per_source[c.source_id]++ == 0) order.push_back(c.source_id);
  }
  for (const auto& s : order) sources.push_back({{"id", s}, {"chunks", per_source[s]}});
  nlohmann::json manifest{{"format", "planrag-chunkstore"},
                          {"version", kFormatVersion},
                          {"chunk_words", kChunkWords},
                          {"chunk_count", chunks_.size()},
                          {"chunks_file", "chunks.jsonl"},
                          {"sources", std::move(sources)}};
  {
    std::ofstream out(dir / "chunks.jsonl", std::ios::trunc);
    for (const auto& c : chunks_)
      out << nlohmann::json{{"doc_id", c.doc_id}, {"source_id", c.source_id}, {"text", c.text}}.dump() << '\n';
    if (!out) throw RetrievalError(RetrievalErrorKind::BadStore, "cannot write " + (dir / "chunks.jsonl").string());
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << manifest.dump(2) << '\n';
  if (!out) throw RetrievalError(RetrievalErrorKind::BadStore, "cannot write " + (dir / "manifest.json").string());
}

ChunkStore ChunkStore::load(const std::filesystem::path& dir) {
  std::ifstream min(dir / "manifest.json");
  if (!min) throw RetrievalError(RetrievalErrorKind::BadStore, "no manifest.json in " + dir.string());
  auto manifest = nlohmann::json::parse(min, nullptr, false);
  if (manifest.is_discarded() || manifest.value("format", "") != "planrag-chunkstore")
    throw RetrievalError(RetrievalErrorKind::BadStore, "not a chunk store manifest: " + dir.string());
  if (manifest.value("version", 0) != kFormatVersion)
    throw RetrievalError(RetrievalErrorKind::BadStore,
                         "unsupported chunk store version " + std::to_string(manifest.value("version", 0)));

  ChunkStore store;
  std::ifstream in(dir / manifest.value("chunks_file", std::string("chunks.jsonl")));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object())
      throw RetrievalError(RetrievalErrorKind::BadStore, "chunks.jsonl line " + std::to_string(lineno) + ": bad JSON");
    store.push_chunk(Document{j.value("doc_id", ""), j.value("text", ""), j.value("source_id", ""), 0.0});
  }
  if (store.size() != manifest.value("chunk_count", std::size_t{0}))
    throw RetrievalError(RetrievalErrorKind::BadStore, "chunk count does not match manifest in " + dir.string());
  return store;
}

ChunkStore ingest_corpus(std::span<const Article> articles) {
  ChunkStore store;
  for (const auto& a : articles) store.add_article(a.source_id, a.text);
  if (store.empty()) throw RetrievalError(RetrievalErrorKind::EmptyCorpus, "corpus produced no chunks");
  return store;
}

std::vector<Article> read_corpus_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw RetrievalError(RetrievalErrorKind::BadInput, "cannot open corpus " + path.string());
  std::vector<Article> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    auto where = path.string() + ":" + std::to_string(lineno);
    if (j.is_discarded() || !j.is_object()) throw RetrievalError(RetrievalErrorKind::BadInput, where + ": invalid JSON");
    if (!j.contains("id") || !j.contains("text") || !j["text"].is_string())
      throw RetrievalError(RetrievalErrorKind::BadInput, where + ": expected {id, text}");
    std::string id = j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump();
    out.push_back({std::move(id), j["text"].get<std::string>()});
  }
  return out;
}

RetrievalSet LocalRetriever::retrieve(std::string_view query, std::size_t k) const {
  return store_->retrieve(query, k);
}

HttpRetriever::HttpRetriever(std::string endpoint) : endpoint_(std::move(endpoint)) { parse_url(endpoint_); }

RetrievalSet HttpRetriever::retrieve(std::string_view query, std::size_t k) const {
  if (k == 0) throw std::invalid_argument("retrieve needs k >= 1");
  auto url = parse_url(endpoint_);
  httplib::Client cli(url.scheme + "://" + url.host + ":" + std::to_string(url.port));
  cli.set_connection_timeout(10);
  cli.set_read_timeout(60);
  nlohmann::json body{{"query", query}, {"k", k}};
  auto res = cli.Post(url.path.empty() ? "/" : url.path, body.dump(), "application/json");
  if (!res) throw RetrievalError(RetrievalErrorKind::EndpointUnavailable, "retriever unreachable: " + endpoint_);
  if (res->status < 200 || res->status >= 300)
    throw RetrievalError(RetrievalErrorKind::EndpointUnavailable, "retriever http " + std::to_string(res->status));
  auto doc = nlohmann::json::parse(res->body, nullptr, false);
  if (doc.is_discarded() || !doc.contains("documents") || !doc["documents"].is_array())
    throw RetrievalError(RetrievalErrorKind::EndpointUnavailable, "retriever response lacks a documents array");

  RetrievalSet out{std::string(query), {}, k};
  for (const auto& d : doc["documents"]) {
    Document x;
    x.doc_id = d.contains("id") ? (d["id"].is_string() ? d["id"].get<std::string>() : d["id"].dump()) : "";
    x.text = d.value("text", "");
    x.source_id = d.value("source_id", x.doc_id);
    x.score = d.value("score", 0.0);
    out.documents.push_back(std::move(x));
  }
  sort_ranked(out.documents);
  if (out.documents.size() > k) out.documents.resize(k);
  return out;
}

RetrievalSet NullRetriever::retrieve(std::string_view query, std::size_t k) const {
  return RetrievalSet{std::string(query), {}, k};
}

}  // namespace planrag
