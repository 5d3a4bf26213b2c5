#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace sona {

/// Parses "key = value" lines. '#' starts a comment, blank lines are skipped, keys are
/// [A-Za-z0-9_.-]+, and a repeated key is an error. `source` names the input in messages.
std::map<std::string, std::string> parse_key_values(const std::string& text, const std::string& source);

/// Sorted "key=value\n" lines.
std::string canonical_key_values(const std::map<std::string, std::string>& values);

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(const std::string& bytes);

/// 16 lowercase hex digits of fnv1a64 over the canonical form.
std::string config_hash(const std::map<std::string, std::string>& values);

}  // namespace sona
