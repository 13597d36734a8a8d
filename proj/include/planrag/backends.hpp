#pragma once

#include <chrono>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "planrag/prompts.hpp"

namespace planrag {

struct Completion {
  std::string text;
  std::size_t input_tokens = 0;
  std::size_t output_tokens = 0;
  std::chrono::nanoseconds latency{0};
  bool usage_reported = false;  // true when the counts came from the service
};

enum class BackendErrorKind { Unavailable, Timeout, RateLimited, InvalidRequest, BadResponse };

class BackendError : public std::runtime_error {
 public:
  BackendError(BackendErrorKind kind, const std::string& what,
               std::optional<std::chrono::milliseconds> retry_after = std::nullopt)
      : std::runtime_error(what), kind_(kind), retry_after_(retry_after) {}

  BackendErrorKind kind() const noexcept { return kind_; }
  std::optional<std::chrono::milliseconds> retry_after() const noexcept { return retry_after_; }
  bool transient() const noexcept {
    return kind_ == BackendErrorKind::Unavailable || kind_ == BackendErrorKind::Timeout ||
           kind_ == BackendErrorKind::RateLimited;
  }

 private:
  BackendErrorKind kind_;
  std::optional<std::chrono::milliseconds> retry_after_;
};

/// A text-generation service. Implementations must accept concurrent
/// generate() calls.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual Completion generate(const PromptBundle& bundle) = 0;
  virtual std::string name() const = 0;
};

struct RetryPolicy {
  int max_attempts = 2;
  std::chrono::milliseconds initial_backoff{200};
};

/// Calls backend.generate, retrying transient failures with exponential
/// backoff (honouring a server-provided retry-after). `retries` receives the
/// number of extra attempts made.
Completion generate_with_retry(Backend& backend, const PromptBundle& bundle, const RetryPolicy& policy,
                               int* retries = nullptr);

/// Deterministic backend for tests and offline runs. Responses are looked up
/// by (purpose, user content) first, then by ordered substring rules, then by
/// an optional fallback responder. A key with several responses replays them
/// in order and repeats the last one once exhausted.
class ScriptedBackend : public Backend {
 public:
  struct Call {
    PromptBundle bundle;
    std::chrono::steady_clock::time_point start;
    std::chrono::steady_clock::time_point end;
  };
  using Responder = std::function<std::optional<std::string>(const PromptBundle&)>;

  ScriptedBackend() = default;
  explicit ScriptedBackend(std::string name) : name_(std::move(name)) {}

  void add_exact(Purpose purpose, std::string_view user, std::vector<std::string> responses);
  void add_contains(Purpose purpose, std::string needle, std::vector<std::string> responses);
  void set_fallback(Responder responder);
  void set_delay(std::chrono::nanoseconds delay) { delay_ = delay; }
  /// Delay chosen per call; overrides set_delay when present.
  void set_delay_fn(std::function<std::chrono::nanoseconds(const PromptBundle&)> fn) { delay_fn_ = std::move(fn); }

  Completion generate(const PromptBundle& bundle) override;
  std::string name() const override { return name_; }

  std::vector<Call> calls() const;
  std::size_t call_count() const;
  void clear_calls();

  /// Loads {"name"?, "entries":[{"purpose", "user"|"contains", "responses":[...]|"response"}], "fallback"?}.
  static std::unique_ptr<ScriptedBackend> from_json(const nlohmann::json& doc);
  static std::unique_ptr<ScriptedBackend> from_file(const std::string& path);

  static std::string exact_key(Purpose purpose, std::string_view user);

 private:
  struct Script {
    std::vector<std::string> responses;
    std::size_t cursor = 0;
    std::string next();
  };
  struct Rule {
    Purpose purpose;
    std::string needle;
    Script script;
  };

  std::string name_ = "scripted";
  mutable std::mutex mu_;
  std::map<std::string, Script> exact_;
  std::vector<Rule> rules_;
  Responder fallback_;
  std::chrono::nanoseconds delay_{0};
  std::function<std::chrono::nanoseconds(const PromptBundle&)> delay_fn_;
  std::vector<Call> calls_;
};

struct HttpBackendConfig {
  std::string endpoint;  // base URL, e.g. http://localhost:8000/v1
  std::string model;
  std::string api_key;
  std::chrono::seconds connect_timeout{10};
  std::chrono::seconds read_timeout{120};
};

/// OpenAI-compatible chat-completions client.
class HttpBackend : public Backend {
 public:
  explicit HttpBackend(HttpBackendConfig config);
  Completion generate(const PromptBundle& bundle) override;
  std::string name() const override { return "http:" + config_.endpoint; }

  /// Request body sent for a bundle (exposed for wire-format tests).
  nlohmann::json request_body(const PromptBundle& bundle) const;

 private:
  HttpBackendConfig config_;
};

/// Parsed scheme://host[:port][/path].
struct Url {
  std::string scheme;
  std::string host;
  int port = 0;
  std::string path;  // without trailing '/'
};
Url parse_url(const std::string& url);

class MalformedGeneration : public std::runtime_error {
 public:
  explicit MalformedGeneration(std::string raw, const std::string& why)
      : std::runtime_error("MalformedGeneration: " + why), raw_(std::move(raw)) {}
  const std::string& raw() const noexcept { return raw_; }

 private:
  std::string raw_;
};

/// Strips code fences, locates the first JSON object and returns the value at
/// required_key as text (strings verbatim, other values serialized).
std::string extract_json_response(std::string_view raw, std::string_view required_key);

/// Same object lookup, returning the whole parsed object.
nlohmann::json extract_json_object(std::string_view raw);

}  // namespace planrag
