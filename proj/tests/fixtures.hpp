#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "redteam/judge.hpp"
#include "redteam/model_backend.hpp"
#include "redteam/prompt_templates.hpp"
#include "redteam/toy_backends.hpp"

namespace fixtures {

using redteam::TokenId;

// " " followed by a-z, A-Z, 0-9: single-character pieces, n of them.
std::vector<std::string> char_vocab(std::size_t n);

redteam::ChatFormat empty_chat();

// A table backend whose rules condition on the previous token only, plus the
// oracle's own copy of the probabilities.
struct BigramCase {
  std::unique_ptr<redteam::TableBackend> backend;
  std::map<TokenId, std::vector<double>> bigram;
  std::vector<double> fallback;
};

BigramCase random_bigram_case(std::mt19937_64& rng, std::size_t vocab_size);

// -sum log max(p, 1e-12) over ids[begin, end), read from the oracle tables.
double bigram_oracle_loss(const BigramCase& c, const std::vector<TokenId>& ids, std::size_t begin,
                          std::size_t end);

std::unique_ptr<redteam::LogLinearBackend> random_log_linear(std::mt19937_64& rng, std::size_t vocab_size,
                                                             std::size_t window, double density,
                                                             double scale = 1.0);

// Loss with suffix positions replaced by arbitrary weight vectors over the
// vocabulary, using only bias() and weight().
double relaxed_loss(const redteam::LogLinearBackend& backend, const redteam::PromptBundle& prompt,
                    const std::vector<std::vector<double>>& relaxed);

// Central differences of relaxed_loss at the one-hot point.
std::vector<std::vector<double>> finite_difference_gradient(const redteam::LogLinearBackend& backend,
                                                            const redteam::PromptBundle& prompt, double step);

// Character-level backend whose continuation is computed from the prompt text.
class ScriptedBackend final : public redteam::ModelBackend {
 public:
  using Script = std::function<std::string(const std::string& prompt_text)>;
  ScriptedBackend(std::vector<std::string> vocab, Script script, std::string name = "scripted");

  const redteam::BackendSpec& spec() const override { return spec_; }
  redteam::TokenSeq tokenize(std::string_view text) const override { return tokenizer_.tokenize(text); }
  std::string detokenize(std::span<const TokenId> ids) const override { return tokenizer_.detokenize(ids); }
  std::vector<double> next_token_log_probs(std::span<const TokenId> context) const override;
  std::vector<TokenId> generate_ids(std::span<const TokenId> context, std::size_t max_new_tokens) const override;

  std::size_t generate_calls() const { return calls_; }

 private:
  redteam::BackendSpec spec_;
  redteam::VocabTokenizer tokenizer_;
  Script script_;
  mutable std::atomic<std::size_t> calls_{0};
};

class FunctionJudge final : public redteam::Judge {
 public:
  using Fn = std::function<bool(std::string_view generated, std::string_view target)>;
  explicit FunctionJudge(Fn fn) : fn_(std::move(fn)) {}
  redteam::JudgeVerdict check(std::string_view generated, std::string_view target) const override;
  std::string version() const override { return "test/function"; }
  std::size_t calls() const { return calls_; }

 private:
  Fn fn_;
  mutable std::atomic<std::size_t> calls_{0};
};

redteam::RefusalLexicon default_lexicon();
redteam::TemplatePair harmful_templates();

// Log-linear backend over the ASCII vocabulary that emits the fixed harmful
// preamble exactly when "~" is the first suffix token.
std::unique_ptr<redteam::LogLinearBackend> rigged_backend(const redteam::ChatFormat& chat,
                                                          const std::string& init_suffix);
std::string harmful_preamble();

class TempDir {
 public:
  TempDir();
  ~TempDir();
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& text);

}  // namespace fixtures
