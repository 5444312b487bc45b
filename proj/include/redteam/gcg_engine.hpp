#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "redteam/candidate.hpp"
#include "redteam/model_backend.hpp"
#include "redteam/prompt_templates.hpp"
#include "redteam/suffix_selection.hpp"

namespace redteam {

// Engine RNG. Draws go through uniform_index() so sequences do not depend on
// the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Uniform in [0, n); n > 0.
  std::size_t uniform_index(std::size_t n);

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[uniform_index(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

// Stable per-stream seed derived from a base seed and a label.
std::uint64_t derive_seed(std::uint64_t base, std::string_view label);

enum class CandidateFilter {
  None,            // every non-special token
  Printable,       // no control characters
  PrintableStable  // printable and re-tokenizes to itself
};

CandidateFilter parse_candidate_filter(std::string_view name);
std::string_view to_string(CandidateFilter filter);

struct GcgParams {
  std::size_t top_k = 256;
  std::size_t batch_size = 128;
  // 0 means "auto".
  std::size_t coordinates_per_step = 1;
  double auto_fraction = 0.25;
  CandidateFilter candidate_filter = CandidateFilter::PrintableStable;
  bool include_incumbent = true;

  bool auto_coordinates() const { return coordinates_per_step == 0; }
};

// Per-attack state for "auto" multi-coordinate updates.
class CoordinateSchedule {
 public:
  explicit CoordinateSchedule(const GcgParams& params) : fraction_(params.auto_fraction) {}

  std::size_t coordinates(const GcgParams& params, std::size_t suffix_length) const;
  void record(bool improved);
  double fraction() const { return fraction_; }

 private:
  double fraction_;
};

std::vector<bool> admissible_tokens(const ModelBackend& backend, CandidateFilter filter);

struct ProposalReport {
  std::vector<CandidateSuffix> candidates;
  // Positions whose top-k set was emptied by the filter.
  std::vector<std::size_t> inadmissible_positions;
};

ProposalReport propose_candidates(const TokenGradient& grad, const TokenSeq& incumbent,
                                  const GcgParams& params, std::size_t coordinates,
                                  const std::vector<bool>& admissible, Rng& rng);

// Sets each candidate's loss; results do not depend on chunk_size.
void evaluate_candidates(std::vector<CandidateSuffix>& candidates, const PromptBundle& prompt,
                         const ModelBackend& backend, std::size_t chunk_size = 0);

struct IterationTrace {
  int stage = 1;
  std::size_t step = 0;
  double loss = 0.0;       // chosen candidate
  double best_loss = 0.0;  // lowest chosen loss so far in this stage
  double incumbent_loss = 0.0;
  std::vector<double> top_p_losses;
  std::vector<bool> judged;
  std::size_t chosen_index = 0;
  SelectionRule rule_fired = SelectionRule::FallbackMinLoss;
  bool chosen_harmful = false;
  std::string suffix_text;
  std::size_t candidates = 0;
  std::size_t coordinates = 1;
  std::vector<std::string> warnings;
  std::uint64_t seed = 0;
  double elapsed_ms = 0.0;
};

struct StepResult {
  CandidateSuffix chosen;
  SelectionResult selection;
  IterationTrace trace;
};

class GcgEngine {
 public:
  GcgEngine(const ModelBackend& backend, GcgParams params);

  const GcgParams& params() const { return params_; }
  const std::vector<bool>& admissible() const { return admissible_; }

  // gradients -> proposals -> batched losses -> selection.
  StepResult step(const PromptBundle& prompt, const SuffixSelector& selector, Rng& rng,
                  CoordinateSchedule& schedule) const;

 private:
  const ModelBackend& backend_;
  GcgParams params_;
  std::vector<bool> admissible_;
};

StepResult gcg_step(const TokenSeq& incumbent, const PromptBundle& prompt, const GcgParams& params,
                    const ModelBackend& backend, const SuffixSelector& selector, Rng& rng);

}  // namespace redteam
