#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "planrag/backends.hpp"
#include "planrag/executor.hpp"
#include "planrag/retrieval.hpp"

namespace planrag::cli {

enum ExitCode : int { kSuccess = 0, kPartial = 1, kUsage = 2 };

/// Settings shared by the subcommands. Sources are resolved in the order
/// flag, config file, environment, default.
struct AppConfig {
  std::string llm;        // "script:PATH" or an OpenAI-compatible base URL
  std::string planner;    // same syntax; empty means use llm
  std::string judge;      // same syntax; empty means use llm
  std::string model;
  std::string key_env = "PLANRAG_LLM_KEY";
  std::string retriever;  // HTTP retrieval endpoint
  std::string store;      // local chunk store directory
  std::filesystem::path cache_dir = ".planrag-cache";
  bool use_cache = true;
  std::size_t jobs = 2;
  RunConfig run;
};

/// Reads a JSON config file into `cfg`, keeping fields the file omits.
void apply_config_file(const std::filesystem::path& path, AppConfig& cfg);

/// Builds a backend from "script:PATH" or an http(s) URL.
std::unique_ptr<Backend> make_backend(const std::string& source, const AppConfig& cfg);

/// Exactly one of store / retriever must be set unless the mode never retrieves.
std::unique_ptr<Retriever> make_retriever(const AppConfig& cfg);

/// Benchmark shapes: "cricket", "chain:N", "diamond", or a plan JSON file.
ReasoningDag make_shape(std::string_view spec);

/// Entry point for the planrag executable; args exclude the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace planrag::cli
