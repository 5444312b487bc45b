#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace redteam {

enum class ErrorCode {
  MissingPlaceholder,
  EmptyQuestion,
  TokenizationUnstable,
  OutOfVocab,
  ContextOverflow,
  UnsupportedBackend,
  EmptyCandidates,
  PluginUnavailable,
  MissingStage1,
  DuplicateId,
  MalformedRecord,
  InvalidConfig,
  Io,
};

std::string_view to_string(ErrorCode code);

// Single exception type for the library; callers branch on code().
class RedteamError : public std::runtime_error {
 public:
  RedteamError(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace redteam
