#pragma once

#include <optional>
#include <string>

#include "redteam/judge.hpp"
#include "redteam/tokens.hpp"

namespace redteam {

enum class CandidateSource { Sampled, Incumbent };

struct CandidateSuffix {
  TokenSeq ids;
  double loss = 0.0;
  CandidateSource source = CandidateSource::Sampled;
  std::optional<std::string> generated;
  std::optional<JudgeVerdict> verdict;
};

}  // namespace redteam
