#include "redteam/gcg_engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "redteam/errors.hpp"
#include "redteam/log.hpp"

namespace redteam {

std::size_t Rng::uniform_index(std::size_t n) {
  if (n == 0) throw RedteamError(ErrorCode::InvalidConfig, "uniform_index over an empty range");
  constexpr auto kMax = std::numeric_limits<std::uint64_t>::max();
  const std::uint64_t limit = kMax - (kMax % n);
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return static_cast<std::size_t>(x % n);
}

std::uint64_t derive_seed(std::uint64_t base, std::string_view label) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : label) {
    h ^= c;
    h *= 1099511628211ull;
  }
  // splitmix64 finalizer
  std::uint64_t z = base ^ h;
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

CandidateFilter parse_candidate_filter(std::string_view name) {
  if (name == "none") return CandidateFilter::None;
  if (name == "printable") return CandidateFilter::Printable;
  if (name == "printable_stable") return CandidateFilter::PrintableStable;
  throw RedteamError(ErrorCode::InvalidConfig, "unknown candidate filter '" + std::string(name) + "'");
}

std::string_view to_string(CandidateFilter filter) {
  switch (filter) {
    case CandidateFilter::None: return "none";
    case CandidateFilter::Printable: return "printable";
    case CandidateFilter::PrintableStable: return "printable_stable";
  }
  return "?";
}

std::size_t CoordinateSchedule::coordinates(const GcgParams& params, std::size_t suffix_length) const {
  if (!params.auto_coordinates()) return params.coordinates_per_step;
  auto count = static_cast<std::size_t>(std::floor(fraction_ * static_cast<double>(suffix_length)));
  return std::max<std::size_t>(1, count);
}

void CoordinateSchedule::record(bool improved) {
  if (!improved) fraction_ /= 2.0;
}

std::vector<bool> admissible_tokens(const ModelBackend& backend, CandidateFilter filter) {
  const std::size_t V = backend.spec().vocab_size;
  std::vector<bool> ok(V, false);
  for (std::size_t v = 0; v < V; ++v) {
    const auto id = static_cast<TokenId>(v);
    if (backend.is_special(id)) continue;
    if (filter == CandidateFilter::None) {
      ok[v] = true;
      continue;
    }
    const TokenId single[] = {id};
    const std::string piece = backend.detokenize(single);
    if (piece.empty()) continue;
    bool printable = std::none_of(piece.begin(), piece.end(), [](char c) {
      auto u = static_cast<unsigned char>(c);
      return u < 0x20 || u == 0x7f;
    });
    if (!printable) continue;
    if (filter == CandidateFilter::PrintableStable) {
      try {
        auto again = backend.tokenize(piece);
        if (again.ids.size() != 1 || again.ids[0] != id) continue;
      } catch (const RedteamError&) {
        continue;
      }
    }
    ok[v] = true;
  }
  return ok;
}

ProposalReport propose_candidates(const TokenGradient& grad, const TokenSeq& incumbent, const GcgParams& params,
                                  std::size_t coordinates, const std::vector<bool>& admissible, Rng& rng) {
  const std::size_t m = incumbent.size();
  if (grad.rows() != m) {
    throw RedteamError(ErrorCode::InvalidConfig, "gradient has " + std::to_string(grad.rows()) +
                                                     " rows for a suffix of " + std::to_string(m));
  }
  if (m == 0) throw RedteamError(ErrorCode::InvalidConfig, "empty suffix");
  if (params.top_k == 0 || params.batch_size == 0) {
    throw RedteamError(ErrorCode::InvalidConfig, "top_k and batch_size must be positive");
  }

  ProposalReport report;
  // Per position: admissible replacements ordered by gradient, most negative
  // first. The incumbent token is not a replacement.
  std::vector<std::vector<TokenId>> top(m);
  for (std::size_t i = 0; i < m; ++i) {
    auto row = grad.row(i);
    std::vector<TokenId> ids;
    for (std::size_t v = 0; v < row.size(); ++v) {
      const auto id = static_cast<TokenId>(v);
      if (v < admissible.size() && admissible[v] && id != incumbent.ids[i]) ids.push_back(id);
    }
    const std::size_t keep = std::min(params.top_k, ids.size());
    std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(keep), ids.end(),
                      [&](TokenId a, TokenId b) {
                        double ga = row[static_cast<std::size_t>(a)];
                        double gb = row[static_cast<std::size_t>(b)];
                        if (ga != gb) return ga < gb;
                        return a < b;
                      });
    ids.resize(keep);
    if (ids.empty()) {
      report.inadmissible_positions.push_back(i);
      ids.push_back(incumbent.ids[i]);
    }
    top[i] = std::move(ids);
  }

  const std::size_t c = std::clamp<std::size_t>(coordinates, 1, m);
  auto make = [&](const std::vector<std::pair<std::size_t, std::size_t>>& edits) {
    CandidateSuffix cand;
    cand.ids.ids = incumbent.ids;
    for (auto [pos, rank] : edits) cand.ids.ids[pos] = top[pos][rank];
    return cand;
  };

  if (c == 1) {
    // Draw (position, rank) pairs without replacement; reshuffle when exhausted.
    std::vector<std::pair<std::size_t, std::size_t>> pool;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t r = 0; r < top[i].size(); ++r) pool.emplace_back(i, r);
    }
    for (std::size_t b = 0; b < params.batch_size; ++b) {
      if (b % pool.size() == 0) rng.shuffle(pool);
      report.candidates.push_back(make({pool[b % pool.size()]}));
    }
  } else {
    std::vector<std::size_t> positions(m);
    for (std::size_t b = 0; b < params.batch_size; ++b) {
      std::iota(positions.begin(), positions.end(), std::size_t{0});
      std::vector<std::pair<std::size_t, std::size_t>> edits;
      for (std::size_t k = 0; k < c; ++k) {
        std::swap(positions[k], positions[k + rng.uniform_index(m - k)]);
        const std::size_t pos = positions[k];
        edits.emplace_back(pos, rng.uniform_index(top[pos].size()));
      }
      report.candidates.push_back(make(edits));
    }
  }

  if (params.include_incumbent) {
    CandidateSuffix cand;
    cand.ids = incumbent;
    cand.source = CandidateSource::Incumbent;
    report.candidates.push_back(std::move(cand));
  }
  return report;
}

void evaluate_candidates(std::vector<CandidateSuffix>& candidates, const PromptBundle& prompt,
                         const ModelBackend& backend, std::size_t chunk_size) {
  if (candidates.empty()) return;
  const std::size_t length = prompt.suffix_slice.size();
  for (const auto& c : candidates) {
    if (c.ids.size() != length) {
      throw RedteamError(ErrorCode::InvalidConfig, "candidate length differs from the prompt's suffix");
    }
  }
  const std::size_t chunk = chunk_size == 0 ? candidates.size() : chunk_size;
  for (std::size_t start = 0; start < candidates.size(); start += chunk) {
    const std::size_t stop = std::min(candidates.size(), start + chunk);
    for (std::size_t i = start; i < stop; ++i) {
      candidates[i].loss = backend.loss(prompt.with_suffix(candidates[i].ids)).value;
    }
  }
}

GcgEngine::GcgEngine(const ModelBackend& backend, GcgParams params)
    : backend_(backend), params_(params), admissible_(admissible_tokens(backend, params.candidate_filter)) {
  if (params_.top_k == 0 || params_.batch_size == 0) {
    throw RedteamError(ErrorCode::InvalidConfig, "top_k and batch_size must be positive");
  }
  params_.top_k = std::min(params_.top_k, backend.spec().vocab_size);
}

StepResult GcgEngine::step(const PromptBundle& prompt, const SuffixSelector& selector, Rng& rng,
                           CoordinateSchedule& schedule) const {
  const TokenSeq& incumbent = prompt.suffix;
  auto grad = backend_.token_gradients(prompt);
  const std::size_t coordinates = schedule.coordinates(params_, incumbent.size());
  auto proposal = propose_candidates(grad, incumbent, params_, coordinates, admissible_, rng);

  IterationTrace trace;
  trace.coordinates = coordinates;
  for (auto pos : proposal.inadmissible_positions) {
    trace.warnings.push_back("NoAdmissibleToken at position " + std::to_string(pos));
    log::warn("NoAdmissibleToken at suffix position " + std::to_string(pos) + "; keeping incumbent token");
  }

  std::vector<CandidateSuffix> candidates;
  std::set<std::vector<TokenId>> seen;
  std::size_t unstable = 0;
  for (auto& cand : proposal.candidates) {
    if (!seen.insert(cand.ids.ids).second) continue;
    cand.ids.text = backend_.detokenize(cand.ids.ids);
    if (params_.candidate_filter == CandidateFilter::PrintableStable && cand.source == CandidateSource::Sampled) {
      bool stable = false;
      try {
        stable = backend_.tokenize(cand.ids.text).ids == cand.ids.ids;
      } catch (const RedteamError&) {
      }
      if (!stable) {
        ++unstable;
        continue;
      }
    }
    candidates.push_back(std::move(cand));
  }
  if (unstable > 0) trace.warnings.push_back("dropped " + std::to_string(unstable) + " unstable candidates");
  if (candidates.empty()) {
    CandidateSuffix cand;
    cand.ids = incumbent;
    cand.source = CandidateSource::Incumbent;
    candidates.push_back(std::move(cand));
  }

  evaluate_candidates(candidates, prompt, backend_);
  const double incumbent_loss = backend_.loss(prompt).value;
  auto selection = selector.choose(candidates, prompt, backend_);
  schedule.record(selection.chosen.loss < incumbent_loss);

  trace.loss = selection.chosen.loss;
  trace.best_loss = selection.chosen.loss;
  trace.incumbent_loss = incumbent_loss;
  trace.top_p_losses = selection.top_losses;
  for (const auto& j : selection.judged) trace.judged.push_back(j.verdict.harmful);
  trace.chosen_index = selection.chosen_index;
  trace.rule_fired = selection.rule_fired;
  trace.chosen_harmful = selection.chosen.verdict && selection.chosen.verdict->harmful;
  trace.suffix_text = selection.chosen.ids.text;
  trace.candidates = candidates.size();

  StepResult result;
  result.chosen = selection.chosen;
  result.selection = std::move(selection);
  result.trace = std::move(trace);
  return result;
}

StepResult gcg_step(const TokenSeq& incumbent, const PromptBundle& prompt, const GcgParams& params,
                    const ModelBackend& backend, const SuffixSelector& selector, Rng& rng) {
  GcgEngine engine(backend, params);
  CoordinateSchedule schedule(params);
  return engine.step(prompt.with_suffix(incumbent), selector, rng, schedule);
}

}  // namespace redteam
