#include "redteam/model_backend.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "redteam/errors.hpp"
#include "redteam/prompt_templates.hpp"

namespace redteam {

void ModelBackend::check_context(std::size_t length, std::string_view what) const {
  if (length > spec().max_context) {
    throw RedteamError(ErrorCode::ContextOverflow, std::string(what) + " needs " + std::to_string(length) +
                                                       " tokens, max_context is " +
                                                       std::to_string(spec().max_context));
  }
}

LossReport ModelBackend::loss(const PromptBundle& prompt) const {
  check_context(prompt.ids.size(), "prompt with target");
  static const double kMaxTokenLoss = -std::log(kProbabilityFloor);

  LossReport report;
  report.per_position.reserve(prompt.target_slice.size());
  std::span<const TokenId> all(prompt.ids);
  for (std::size_t j = prompt.target_slice.begin; j < prompt.target_slice.end; ++j) {
    auto log_probs = next_token_log_probs(all.first(j));
    double nll = std::min(-log_probs[static_cast<std::size_t>(all[j])], kMaxTokenLoss);
    report.per_position.push_back(nll);
    report.value += nll;
  }
  return report;
}

TokenGradient ModelBackend::token_gradients(const PromptBundle&) const {
  throw RedteamError(ErrorCode::UnsupportedBackend, spec().name + " does not provide gradients");
}

std::vector<TokenId> ModelBackend::generate_ids(std::span<const TokenId> context,
                                                std::size_t max_new_tokens) const {
  check_context(context.size() + max_new_tokens, "generation");
  std::vector<TokenId> sequence(context.begin(), context.end());
  std::vector<TokenId> produced;
  const auto end = eos();
  for (std::size_t i = 0; i < max_new_tokens; ++i) {
    auto log_probs = next_token_log_probs(sequence);
    // max_element keeps the first maximum, so ties go to the lowest id.
    auto next = static_cast<TokenId>(std::max_element(log_probs.begin(), log_probs.end()) - log_probs.begin());
    if (end && next == *end) break;
    sequence.push_back(next);
    produced.push_back(next);
  }
  return produced;
}

std::string ModelBackend::generate(std::string_view prompt, std::size_t max_new_tokens) const {
  if (max_new_tokens == 0) return {};
  auto ids = tokenize(prompt).ids;
  return detokenize(generate_ids(ids, max_new_tokens));
}

BackendRegistry& BackendRegistry::instance() {
  static BackendRegistry registry;
  return registry;
}

void BackendRegistry::add(const std::string& name, BackendFactory factory) {
  factories_[name] = std::move(factory);
}

bool BackendRegistry::contains(const std::string& name) const { return factories_.contains(name); }

std::unique_ptr<ModelBackend> BackendRegistry::create(const std::string& name,
                                                      const BackendPluginArgs& args) const {
  auto it = factories_.find(name);
  if (it == factories_.end()) {
    throw RedteamError(ErrorCode::PluginUnavailable, "no backend factory named '" + name + "'");
  }
  return it->second(args);
}

std::string default_device() {
  const char* device = std::getenv("REDTEAM_DEVICE");
  return device && *device ? device : "cpu";
}

}  // namespace redteam
