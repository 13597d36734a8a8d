#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace planrag {

std::string_view trim(std::string_view s);

/// Maximal runs of non-whitespace characters, raw.
std::vector<std::string_view> split_words(std::string_view text);
std::size_t word_count(std::string_view text);

/// Index form of a word: ASCII-lowercased with ASCII punctuation removed.
/// May return an empty string (a word made only of punctuation).
std::string index_term(std::string_view word);

/// Containment normal form: lowercase, whitespace runs collapsed to a single
/// space, leading/trailing punctuation and whitespace stripped.
std::string normalize_for_match(std::string_view text);

std::string to_lower(std::string_view s);

/// Fallback token estimate when a service reports no usage:
/// whitespace word count * 4/3, rounded to nearest.
std::size_t approx_tokens(std::string_view text);

/// Stable 64-bit FNV-1a, used for script keys and cache file names.
std::uint64_t fnv1a64(std::string_view data);
std::string hex64(std::uint64_t value);

bool starts_with_icase(std::string_view s, std::string_view prefix);

}  // namespace planrag
