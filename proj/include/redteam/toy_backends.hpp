#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "redteam/model_backend.hpp"
#include "redteam/prompt_templates.hpp"

namespace redteam {

// Closed-vocabulary tokenizer: greedy longest match over the non-special
// vocabulary strings. Detokenization concatenates, special tokens render empty.
class VocabTokenizer {
 public:
  VocabTokenizer() = default;
  VocabTokenizer(std::vector<std::string> vocab, std::vector<bool> special);

  TokenSeq tokenize(std::string_view text) const;
  std::string detokenize(std::span<const TokenId> ids) const;

  std::size_t size() const { return vocab_.size(); }
  const std::string& piece(TokenId id) const { return vocab_.at(static_cast<std::size_t>(id)); }
  bool is_special(TokenId id) const { return special_.at(static_cast<std::size_t>(id)); }
  std::optional<TokenId> find(std::string_view piece) const;

 private:
  std::vector<std::string> vocab_;
  std::vector<bool> special_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t longest_ = 0;
};

// Shared vocabulary handling for the toy backends.
class ToyBackend : public ModelBackend {
 public:
  const BackendSpec& spec() const override { return spec_; }
  TokenSeq tokenize(std::string_view text) const override { return tokenizer_.tokenize(text); }
  std::string detokenize(std::span<const TokenId> ids) const override {
    return tokenizer_.detokenize(ids);
  }
  std::optional<TokenId> eos() const override { return eos_; }
  bool is_special(TokenId id) const override { return tokenizer_.is_special(id); }

  const VocabTokenizer& tokenizer() const { return tokenizer_; }

 protected:
  ToyBackend(std::string name, std::vector<std::string> vocab, std::vector<bool> special,
             std::optional<TokenId> eos, std::size_t max_context);

  BackendSpec spec_;
  VocabTokenizer tokenizer_;
  std::optional<TokenId> eos_;
};

// Conditional table: each rule matches the tail of the context ("*" matches any
// one token); the most specific matching rule supplies the distribution.
class TableBackend final : public ToyBackend {
 public:
  struct Rule {
    std::vector<std::optional<TokenId>> context;  // nullopt is a wildcard
    std::vector<double> probs;                    // size V
  };

  TableBackend(std::string name, std::vector<std::string> vocab, std::vector<bool> special,
               std::optional<TokenId> eos, std::size_t max_context, std::vector<double> default_probs,
               std::vector<Rule> rules);

  std::vector<double> next_token_log_probs(std::span<const TokenId> context) const override;

  // The distribution used after `context` (probabilities, not logs).
  const std::vector<double>& distribution(std::span<const TokenId> context) const;

 private:
  std::vector<double> default_probs_;
  std::vector<Rule> rules_;
};

// logits(next) = bias + sum_{d=1..D} W_d[token at distance d, :]
class LogLinearBackend final : public ToyBackend {
 public:
  struct Entry {
    std::size_t distance;  // 1-based
    TokenId from;
    TokenId to;
    double weight;
  };

  LogLinearBackend(std::string name, std::vector<std::string> vocab, std::vector<bool> special,
                   std::optional<TokenId> eos, std::size_t max_context, std::vector<double> bias,
                   std::size_t window, const std::vector<Entry>& entries);

  std::vector<double> next_token_log_probs(std::span<const TokenId> context) const override;
  bool differentiable() const override { return true; }
  TokenGradient token_gradients(const PromptBundle& prompt) const override;

  std::size_t window() const { return window_; }
  double bias(TokenId v) const { return bias_.at(static_cast<std::size_t>(v)); }
  double weight(std::size_t distance, TokenId from, TokenId to) const;

 private:
  using Row = std::vector<std::pair<TokenId, double>>;
  const Row& row(std::size_t distance, TokenId from) const;
  std::vector<double> logits(std::span<const TokenId> context) const;

  std::vector<double> bias_;
  std::size_t window_;
  std::vector<Row> rows_;  // index (distance - 1) * V + from
};

// Loads a toy backend definition; the presence of `conditional_table` or
// `logits_weights` selects the kind.
std::unique_ptr<ToyBackend> load_toy_backend(const std::filesystem::path& path);

// Printable ASCII, newline and an "</s>" end-of-sequence marker.
std::vector<std::string> ascii_vocab();

// A log-linear backend that emits `forced` and then eos exactly when `trigger`
// sits `offset` tokens ahead of the first forced position, and otherwise emits
// eos immediately.
struct TriggerSpec {
  std::string name = "trigger-toy";
  std::vector<std::string> vocab = ascii_vocab();
  std::string eos = "</s>";
  std::string trigger = "~";
  std::size_t offset = 1;
  std::string forced;
  double strength = 12.0;
  double eos_bias = 1.0;
  std::size_t max_context = 4096;
};

std::unique_ptr<LogLinearBackend> make_trigger_backend(const TriggerSpec& spec);

// Distance from the first suffix token to the first target token once
// `suffix_text` is assembled under `chat` with the vocabulary of `spec`.
std::size_t trigger_offset(const TriggerSpec& spec, const ChatFormat& chat, const std::string& suffix_text);

// Writes a backend in the toy definition format.
void save_log_linear(const LogLinearBackend& backend, const std::filesystem::path& path);

}  // namespace redteam
