#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "redteam/tokens.hpp"

namespace redteam {

struct PromptBundle;

struct BackendSpec {
  std::string name;
  std::size_t vocab_size = 0;
  std::size_t max_context = 0;
  bool deterministic_generation = true;
};

// Negative log-likelihood of the target region in nats.
struct LossReport {
  double value = 0.0;
  std::vector<double> per_position;
};

// d loss / d one-hot indicator, row-major: rows are suffix positions,
// columns are vocabulary entries.
class TokenGradient {
 public:
  TokenGradient() = default;
  TokenGradient(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Probabilities below this are clamped before taking logs.
inline constexpr double kProbabilityFloor = 1e-12;

// Uniform interface to a causal language model.
//
// A backend instance may hold caches or device handles; calls on one instance
// must be serialized by the caller.
class ModelBackend {
 public:
  virtual ~ModelBackend() = default;

  virtual const BackendSpec& spec() const = 0;

  virtual TokenSeq tokenize(std::string_view text) const = 0;
  virtual std::string detokenize(std::span<const TokenId> ids) const = 0;

  // log p(next | context) for every vocabulary entry.
  virtual std::vector<double> next_token_log_probs(std::span<const TokenId> context) const = 0;

  virtual std::optional<TokenId> eos() const { return std::nullopt; }
  // Tokens that tokenize() never emits (eos, control markers).
  virtual bool is_special(TokenId) const { return false; }

  virtual bool differentiable() const { return false; }

  // Sum over target positions of -log p(token | everything before it).
  virtual LossReport loss(const PromptBundle& prompt) const;

  virtual TokenGradient token_gradients(const PromptBundle& prompt) const;

  // Greedy decoding; returns only the new tokens, eos excluded.
  virtual std::vector<TokenId> generate_ids(std::span<const TokenId> context,
                                            std::size_t max_new_tokens) const;

  std::string generate(std::string_view prompt, std::size_t max_new_tokens) const;

 protected:
  void check_context(std::size_t length, std::string_view what) const;
};

// Out-of-core real-model adapters register here.
struct BackendPluginArgs {
  std::string model_id;
  std::string device;
  std::string dtype;
};

using BackendFactory = std::function<std::unique_ptr<ModelBackend>(const BackendPluginArgs&)>;

class BackendRegistry {
 public:
  static BackendRegistry& instance();

  void add(const std::string& name, BackendFactory factory);
  bool contains(const std::string& name) const;
  std::unique_ptr<ModelBackend> create(const std::string& name, const BackendPluginArgs& args) const;

 private:
  std::map<std::string, BackendFactory> factories_;
};

// Device for real backends, from REDTEAM_DEVICE (defaults to "cpu").
std::string default_device();

}  // namespace redteam
