#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mishape {

enum class ErrorCategory {
  argument,
  parse,
  validation,
  generation,
  numeric,
  config,
  degenerate,
  no_target,
  io,
};

inline std::string_view to_string(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::argument: return "argument";
    case ErrorCategory::parse: return "parse";
    case ErrorCategory::validation: return "validation";
    case ErrorCategory::generation: return "generation";
    case ErrorCategory::numeric: return "numeric";
    case ErrorCategory::config: return "config";
    case ErrorCategory::degenerate: return "degenerate";
    case ErrorCategory::no_target: return "no-target";
    case ErrorCategory::io: return "io";
  }
  return "unknown";
}

/// Every library failure is reported through this type. `context` names the
/// offending field, flag or file when one is known.
class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& message, std::string context = {})
      : std::runtime_error(message), category_(category), context_(std::move(context)) {}

  ErrorCategory category() const noexcept { return category_; }
  const std::string& context() const noexcept { return context_; }

 private:
  ErrorCategory category_;
  std::string context_;
};

[[noreturn]] inline void fail(ErrorCategory c, const std::string& message, std::string context = {}) {
  throw Error(c, message, std::move(context));
}

}  // namespace mishape
