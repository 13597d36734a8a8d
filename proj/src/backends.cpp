#include "planrag/backends.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <thread>

#include <httplib.h>

#include "planrag/plan_parser.hpp"
#include "planrag/text.hpp"

namespace planrag {
namespace {

void check_bundle(const PromptBundle& bundle) {
  if (trim(bundle.user).empty())
    throw BackendError(BackendErrorKind::InvalidRequest, "empty prompt");
}

std::vector<std::string> responses_of(const nlohmann::json& entry) {
  if (entry.contains("responses")) return entry["responses"].get<std::vector<std::string>>();
  if (entry.contains("response")) return {entry["response"].get<std::string>()};
  throw std::invalid_argument("script entry needs \"response\" or \"responses\"");
}

}  // namespace

Completion generate_with_retry(Backend& backend, const PromptBundle& bundle, const RetryPolicy& policy,
                               int* retries) {
  auto backoff = policy.initial_backoff;
  for (int attempt = 1;; ++attempt) {
    try {
      auto c = backend.generate(bundle);
      if (retries) *retries = attempt - 1;
      return c;
    } catch (const BackendError& e) {
      if (!e.transient() || attempt >= policy.max_attempts) {
        if (retries) *retries = attempt - 1;
        throw;
      }
      std::this_thread::sleep_for(e.retry_after().value_or(backoff));
      backoff *= 2;
    }
  }
}

// ---------------------------------------------------------------------------
// ScriptedBackend

std::string ScriptedBackend::Script::next() {
  if (responses.empty()) return {};
  const auto& r = responses[std::min(cursor, responses.size() - 1)];
  if (cursor < responses.size()) ++cursor;
  return r;
}

std::string ScriptedBackend::exact_key(Purpose purpose, std::string_view user) {
  return std::string(to_string(purpose)) + ":" + hex64(fnv1a64(user));
}

void ScriptedBackend::add_exact(Purpose purpose, std::string_view user, std::vector<std::string> responses) {
  std::lock_guard lock(mu_);
  exact_[exact_key(purpose, user)] = Script{std::move(responses)};
}

void ScriptedBackend::add_contains(Purpose purpose, std::string needle, std::vector<std::string> responses) {
  std::lock_guard lock(mu_);
  rules_.push_back(Rule{purpose, std::move(needle), Script{std::move(responses)}});
}

void ScriptedBackend::set_fallback(Responder responder) {
  std::lock_guard lock(mu_);
  fallback_ = std::move(responder);
}

Completion ScriptedBackend::generate(const PromptBundle& bundle) {
  check_bundle(bundle);
  auto start = std::chrono::steady_clock::now();
  std::optional<std::string> text;
  Responder fallback;
  {
    std::lock_guard lock(mu_);
    if (auto it = exact_.find(exact_key(bundle.purpose, bundle.user)); it != exact_.end()) {
      text = it->second.next();
    } else {
      for (auto& rule : rules_) {
        if (rule.purpose == bundle.purpose && bundle.user.find(rule.needle) != std::string::npos) {
          text = rule.script.next();
          break;
        }
      }
    }
    fallback = fallback_;
  }
  if (!text && fallback) text = fallback(bundle);
  if (!text)
    throw BackendError(BackendErrorKind::Unavailable,
                       "scripted backend has no response for " + exact_key(bundle.purpose, bundle.user));

  auto delay = delay_fn_ ? delay_fn_(bundle) : delay_;
  if (delay.count() > 0) std::this_thread::sleep_for(delay);

  Completion c;
  c.text = std::move(*text);
  c.input_tokens = approx_tokens(bundle.system) + approx_tokens(bundle.user);
  c.output_tokens = approx_tokens(c.text);
  auto end = std::chrono::steady_clock::now();
  c.latency = end - start;
  std::lock_guard lock(mu_);
  calls_.push_back(Call{bundle, start, end});
  return c;
}

std::vector<ScriptedBackend::Call> ScriptedBackend::calls() const {
  std::lock_guard lock(mu_);
  return calls_;
}

std::size_t ScriptedBackend::call_count() const {
  std::lock_guard lock(mu_);
  return calls_.size();
}

void ScriptedBackend::clear_calls() {
  std::lock_guard lock(mu_);
  calls_.clear();
}

std::unique_ptr<ScriptedBackend> ScriptedBackend::from_json(const nlohmann::json& doc) {
  auto backend = std::make_unique<ScriptedBackend>(doc.value("name", std::string("scripted")));
  for (const auto& entry : doc.value("entries", nlohmann::json::array())) {
    auto purpose_name = entry.at("purpose").get<std::string>();
    auto purpose = parse_purpose(purpose_name);
    if (!purpose) throw std::invalid_argument("unknown purpose in script: " + purpose_name);
    if (entry.contains("user")) {
      backend->add_exact(*purpose, entry["user"].get<std::string>(), responses_of(entry));
    } else if (entry.contains("contains")) {
      backend->add_contains(*purpose, entry["contains"].get<std::string>(), responses_of(entry));
    } else {
      throw std::invalid_argument("script entry needs \"user\" or \"contains\"");
    }
  }
  if (doc.contains("fallback")) {
    auto fixed = doc["fallback"].get<std::string>();
    backend->set_fallback([fixed](const PromptBundle&) { return fixed; });
  }
  if (doc.contains("delay_ms")) backend->set_delay(std::chrono::milliseconds(doc["delay_ms"].get<int>()));
  return backend;
}

std::unique_ptr<ScriptedBackend> ScriptedBackend::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open script file " + path);
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("bad script file " + path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// HttpBackend

Url parse_url(const std::string& url) {
  Url u;
  auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw std::invalid_argument("URL needs a scheme: " + url);
  u.scheme = url.substr(0, scheme_end);
  auto rest = url.substr(scheme_end + 3);
  auto slash = rest.find('/');
  auto hostport = rest.substr(0, slash);
  u.path = slash == std::string::npos ? "" : rest.substr(slash);
  while (!u.path.empty() && u.path.back() == '/') u.path.pop_back();
  auto colon = hostport.rfind(':');
  if (colon != std::string::npos && hostport.find(']') == std::string::npos) {
    u.host = hostport.substr(0, colon);
    auto port_text = hostport.substr(colon + 1);
    auto [p, ec] = std::from_chars(port_text.data(), port_text.data() + port_text.size(), u.port);
    if (ec != std::errc{} || p != port_text.data() + port_text.size())
      throw std::invalid_argument("bad port in URL: " + url);
  } else {
    u.host = hostport;
    u.port = u.scheme == "https" ? 443 : 80;
  }
  if (u.host.empty()) throw std::invalid_argument("URL has no host: " + url);
  if (u.scheme != "http" && u.scheme != "https") throw std::invalid_argument("unsupported URL scheme: " + url);
  return u;
}

HttpBackend::HttpBackend(HttpBackendConfig config) : config_(std::move(config)) {
  parse_url(config_.endpoint);  // validate early
}

nlohmann::json HttpBackend::request_body(const PromptBundle& bundle) const {
  nlohmann::json messages = nlohmann::json::array();
  for (const auto& [role, content] : chat_messages(bundle)) messages.push_back({{"role", role}, {"content", content}});
  nlohmann::json body{{"messages", std::move(messages)}, {"temperature", bundle.temperature}};
  if (!config_.model.empty()) body["model"] = config_.model;
  return body;
}

Completion HttpBackend::generate(const PromptBundle& bundle) {
  check_bundle(bundle);
  auto url = parse_url(config_.endpoint);
  auto start = std::chrono::steady_clock::now();

  std::string scheme_host_port = url.scheme + "://" + url.host + ":" + std::to_string(url.port);
  httplib::Client cli(scheme_host_port);
  cli.set_connection_timeout(std::chrono::duration_cast<std::chrono::seconds>(config_.connect_timeout).count());
  cli.set_read_timeout(std::chrono::duration_cast<std::chrono::seconds>(config_.read_timeout).count());
  httplib::Headers headers;
  if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);

  auto res = cli.Post(url.path + "/chat/completions", headers, request_body(bundle).dump(), "application/json");
  if (!res) {
    auto err = res.error();
    if (err == httplib::Error::Read || err == httplib::Error::Write || err == httplib::Error::ConnectionTimeout)
      throw BackendError(BackendErrorKind::Timeout, "chat completion timed out: " + httplib::to_string(err));
    throw BackendError(BackendErrorKind::Unavailable, "chat completion failed: " + httplib::to_string(err));
  }
  if (res->status == 429) {
    std::optional<std::chrono::milliseconds> after;
    if (res->has_header("Retry-After")) {
      try {
        after = std::chrono::milliseconds(static_cast<long>(std::stod(res->get_header_value("Retry-After")) * 1000));
      } catch (const std::exception&) {
      }
    }
    throw BackendError(BackendErrorKind::RateLimited, "rate limited", after);
  }
  if (res->status >= 500) throw BackendError(BackendErrorKind::Unavailable, "http " + std::to_string(res->status));
  if (res->status < 200 || res->status >= 300)
    throw BackendError(BackendErrorKind::InvalidRequest, "http " + std::to_string(res->status) + ": " + res->body);

  auto doc = nlohmann::json::parse(res->body, nullptr, false);
  if (doc.is_discarded() || !doc.contains("choices") || !doc["choices"].is_array() || doc["choices"].empty())
    throw BackendError(BackendErrorKind::BadResponse, "chat completion response has no choices");
  const auto& msg = doc["choices"][0].value("message", nlohmann::json::object());
  if (!msg.contains("content") || !msg["content"].is_string())
    throw BackendError(BackendErrorKind::BadResponse, "chat completion response has no message content");

  Completion c;
  c.text = msg["content"].get<std::string>();
  c.latency = std::chrono::steady_clock::now() - start;
  const auto& usage = doc.value("usage", nlohmann::json::object());
  if (usage.contains("prompt_tokens") && usage.contains("completion_tokens")) {
    c.input_tokens = usage["prompt_tokens"].get<std::size_t>();
    c.output_tokens = usage["completion_tokens"].get<std::size_t>();
    c.usage_reported = true;
  } else {
    c.input_tokens = approx_tokens(bundle.system) + approx_tokens(bundle.user);
    c.output_tokens = approx_tokens(c.text);
  }
  return c;
}

// ---------------------------------------------------------------------------
// JSON response extraction

nlohmann::json extract_json_object(std::string_view raw) {
  auto body = strip_code_fence(raw);
  for (std::size_t open = body.find('{'); open != std::string_view::npos; open = body.find('{', open + 1)) {
    // Brace matching that skips over string literals.
    int depth = 0;
    bool in_string = false;
    for (std::size_t i = open; i < body.size(); ++i) {
      char c = body[i];
      if (in_string) {
        if (c == '\\') ++i;
        else if (c == '"') in_string = false;
        continue;
      }
      if (c == '"') in_string = true;
      else if (c == '{') ++depth;
      else if (c == '}' && --depth == 0) {
        auto doc = nlohmann::json::parse(body.substr(open, i - open + 1), nullptr, false);
        if (!doc.is_discarded() && doc.is_object()) return doc;
        break;
      }
    }
  }
  throw MalformedGeneration(std::string(raw), "no JSON object found");
}

std::string extract_json_response(std::string_view raw, std::string_view required_key) {
  if (trim(raw).empty()) throw MalformedGeneration(std::string(raw), "empty generation");
  auto doc = extract_json_object(raw);
  auto it = doc.find(std::string(required_key));
  if (it == doc.end()) throw MalformedGeneration(std::string(raw), "missing key " + std::string(required_key));
  if (it->is_string()) return it->get<std::string>();
  if (it->is_null()) return {};
  return it->dump();
}

}  // namespace planrag
