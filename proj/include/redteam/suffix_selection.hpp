#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "redteam/candidate.hpp"
#include "redteam/judge.hpp"
#include "redteam/model_backend.hpp"
#include "redteam/prompt_templates.hpp"

namespace redteam {

struct SelectionParams {
  std::size_t p = 5;
  std::size_t gen_budget = 256;
};

enum class SelectionRule { HarmfulMinLoss, FallbackMinLoss };

std::string_view to_string(SelectionRule rule);

struct JudgedCandidate {
  std::size_t index;  // into the input candidate list
  JudgeVerdict verdict;
};

struct SelectionResult {
  CandidateSuffix chosen;
  std::size_t chosen_index = 0;
  std::vector<JudgedCandidate> judged;
  SelectionRule rule_fired = SelectionRule::FallbackMinLoss;
  // Losses of the window that was (or would have been) judged, ascending.
  std::vector<double> top_losses;
};

// Indices of distinct candidates in canonical order: loss ascending, then
// token ids lexicographically, then input index. Duplicate ids keep the first
// occurrence.
std::vector<std::size_t> canonical_order(std::span<const CandidateSuffix> candidates);

SelectionResult min_loss_select(std::span<const CandidateSuffix> candidates);

// Judges the p lowest-loss candidates and keeps the lowest-loss harmful one,
// falling back to the global minimum. `judge_target` is what Check(.) matches
// continuations against.
SelectionResult select(std::span<const CandidateSuffix> candidates, const PromptBundle& prompt,
                       const ModelBackend& backend, const Judge& judge,
                       const std::string& judge_target, const SelectionParams& params);

class SuffixSelector {
 public:
  virtual ~SuffixSelector() = default;
  virtual SelectionResult choose(std::span<const CandidateSuffix> candidates,
                                 const PromptBundle& prompt, const ModelBackend& backend) const = 0;
  // True when choose() attaches verdicts to the chosen candidate.
  virtual bool judges() const = 0;
};

class MinLossSelector final : public SuffixSelector {
 public:
  SelectionResult choose(std::span<const CandidateSuffix> candidates, const PromptBundle&,
                         const ModelBackend&) const override {
    return min_loss_select(candidates);
  }
  bool judges() const override { return false; }
};

class HarmfulnessSelector final : public SuffixSelector {
 public:
  HarmfulnessSelector(const Judge& judge, std::string judge_target, SelectionParams params)
      : judge_(judge), judge_target_(std::move(judge_target)), params_(params) {}

  SelectionResult choose(std::span<const CandidateSuffix> candidates, const PromptBundle& prompt,
                         const ModelBackend& backend) const override {
    return select(candidates, prompt, backend, judge_, judge_target_, params_);
  }
  bool judges() const override { return true; }

 private:
  const Judge& judge_;
  std::string judge_target_;
  SelectionParams params_;
};

}  // namespace redteam
