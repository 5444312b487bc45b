#include "redteam/suffix_selection.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "redteam/errors.hpp"
#include "redteam/log.hpp"

namespace redteam {

std::string_view to_string(SelectionRule rule) {
  return rule == SelectionRule::HarmfulMinLoss ? "harmful_min_loss" : "fallback_min_loss";
}

std::vector<std::size_t> canonical_order(std::span<const CandidateSuffix> candidates) {
  std::vector<std::size_t> order;
  std::set<std::vector<TokenId>> seen;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (seen.insert(candidates[i].ids.ids).second) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& ca = candidates[a];
    const auto& cb = candidates[b];
    if (ca.loss != cb.loss) return ca.loss < cb.loss;
    return ca.ids.ids < cb.ids.ids;
  });
  return order;
}

SelectionResult min_loss_select(std::span<const CandidateSuffix> candidates) {
  if (candidates.empty()) throw RedteamError(ErrorCode::EmptyCandidates, "nothing to select from");
  auto order = canonical_order(candidates);
  SelectionResult result;
  result.chosen_index = order.front();
  result.chosen = candidates[result.chosen_index];
  result.rule_fired = SelectionRule::FallbackMinLoss;
  result.top_losses = {result.chosen.loss};
  return result;
}

SelectionResult select(std::span<const CandidateSuffix> candidates, const PromptBundle& prompt,
                       const ModelBackend& backend, const Judge& judge, const std::string& judge_target,
                       const SelectionParams& params) {
  if (candidates.empty()) throw RedteamError(ErrorCode::EmptyCandidates, "nothing to select from");
  auto order = canonical_order(candidates);
  const std::size_t window = std::min(std::max<std::size_t>(params.p, 1), order.size());

  SelectionResult result;
  std::vector<std::string> generated(window);
  std::optional<std::size_t> harmful_rank;
  for (std::size_t r = 0; r < window; ++r) {
    const auto& cand = candidates[order[r]];
    result.top_losses.push_back(cand.loss);
    JudgeVerdict verdict;
    try {
      auto bundle = prompt.with_suffix(cand.ids);
      generated[r] = backend.detokenize(backend.generate_ids(bundle.prompt_ids(), params.gen_budget));
      verdict = judge.check(generated[r], judge_target);
    } catch (const std::exception& e) {
      log::warn(std::string("judging candidate failed, treated as not harmful: ") + e.what());
      verdict = JudgeVerdict{false, "generation_error", std::nullopt, false};
    }
    if (verdict.harmful && !harmful_rank) harmful_rank = r;
    result.judged.push_back({order[r], std::move(verdict)});
  }

  const std::size_t rank = harmful_rank.value_or(0);
  result.rule_fired = harmful_rank ? SelectionRule::HarmfulMinLoss : SelectionRule::FallbackMinLoss;
  result.chosen_index = order[rank];
  result.chosen = candidates[result.chosen_index];
  result.chosen.generated = generated[rank];
  result.chosen.verdict = result.judged[rank].verdict;
  return result;
}

}  // namespace redteam
