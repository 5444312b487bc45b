#include "redteam/toy_backends.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "redteam/errors.hpp"
#include "redteam/prompt_templates.hpp"

namespace redteam {
namespace {

using nlohmann::json;

std::vector<double> log_softmax(std::vector<double> logits) {
  double peak = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double z : logits) total += std::exp(z - peak);
  double log_norm = peak + std::log(total);
  for (double& z : logits) z -= log_norm;
  return logits;
}

TokenId token_ref(const json& j, const VocabTokenizer& tok, const std::string& where) {
  if (j.is_number_integer()) {
    auto id = j.get<long long>();
    if (id < 0 || static_cast<std::size_t>(id) >= tok.size()) {
      throw RedteamError(ErrorCode::InvalidConfig, where + ": token id out of range");
    }
    return static_cast<TokenId>(id);
  }
  if (j.is_string()) {
    // Special pieces are looked up directly; find() skips them.
    const auto piece = j.get<std::string>();
    for (std::size_t i = 0; i < tok.size(); ++i) {
      if (tok.piece(static_cast<TokenId>(i)) == piece) return static_cast<TokenId>(i);
    }
    throw RedteamError(ErrorCode::InvalidConfig, where + ": unknown token '" + piece + "'");
  }
  throw RedteamError(ErrorCode::InvalidConfig, where + ": token must be a string or an id");
}

// Listed probabilities as given; leftover mass shared by unlisted tokens.
std::vector<double> distribution_from_json(const json& j, const VocabTokenizer& tok, const std::string& where) {
  if (!j.is_object()) throw RedteamError(ErrorCode::InvalidConfig, where + ": distribution must be an object");
  std::vector<double> probs(tok.size(), 0.0);
  std::vector<bool> listed(tok.size(), false);
  double mass = 0.0;
  for (const auto& [piece, p] : j.items()) {
    TokenId id = token_ref(json(piece), tok, where);
    double value = p.get<double>();
    if (value < 0.0) throw RedteamError(ErrorCode::InvalidConfig, where + ": negative probability");
    probs[static_cast<std::size_t>(id)] = value;
    listed[static_cast<std::size_t>(id)] = true;
    mass += value;
  }
  if (mass > 1.0 + 1e-9) throw RedteamError(ErrorCode::InvalidConfig, where + ": probabilities sum above 1");
  auto unlisted = static_cast<std::size_t>(std::count(listed.begin(), listed.end(), false));
  if (unlisted > 0 && mass < 1.0) {
    double share = (1.0 - mass) / static_cast<double>(unlisted);
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (!listed[i]) probs[i] = share;
    }
  }
  return probs;
}

}  // namespace

VocabTokenizer::VocabTokenizer(std::vector<std::string> vocab, std::vector<bool> special)
    : vocab_(std::move(vocab)), special_(std::move(special)) {
  if (vocab_.size() < 2) throw RedteamError(ErrorCode::InvalidConfig, "vocabulary needs at least 2 tokens");
  if (special_.size() != vocab_.size()) special_.resize(vocab_.size(), false);
  for (std::size_t i = 0; i < vocab_.size(); ++i) {
    if (vocab_[i].empty()) throw RedteamError(ErrorCode::InvalidConfig, "empty vocabulary entry");
    if (special_[i]) continue;
    if (!index_.emplace(vocab_[i], static_cast<TokenId>(i)).second) {
      throw RedteamError(ErrorCode::InvalidConfig, "duplicate vocabulary entry '" + vocab_[i] + "'");
    }
    longest_ = std::max(longest_, vocab_[i].size());
  }
}

std::optional<TokenId> VocabTokenizer::find(std::string_view piece) const {
  auto it = index_.find(std::string(piece));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenSeq VocabTokenizer::tokenize(std::string_view text) const {
  TokenSeq out;
  out.text = std::string(text);
  for (std::size_t i = 0; i < text.size();) {
    std::size_t len = std::min(longest_, text.size() - i);
    std::optional<TokenId> hit;
    for (; len > 0; --len) {
      if ((hit = find(text.substr(i, len)))) break;
    }
    if (!hit) {
      throw RedteamError(ErrorCode::OutOfVocab,
                         "no token covers byte " + std::to_string(static_cast<unsigned char>(text[i])) +
                             " at offset " + std::to_string(i));
    }
    out.ids.push_back(*hit);
    i += len;
  }
  return out;
}

std::string VocabTokenizer::detokenize(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size()) {
      throw RedteamError(ErrorCode::OutOfVocab, "token id " + std::to_string(id) + " out of range");
    }
    if (!special_[static_cast<std::size_t>(id)]) out += vocab_[static_cast<std::size_t>(id)];
  }
  return out;
}

ToyBackend::ToyBackend(std::string name, std::vector<std::string> vocab, std::vector<bool> special,
                       std::optional<TokenId> eos, std::size_t max_context)
    : eos_(eos) {
  if (special.size() != vocab.size()) special.resize(vocab.size(), false);
  if (eos_) special.at(static_cast<std::size_t>(*eos_)) = true;
  tokenizer_ = VocabTokenizer(std::move(vocab), std::move(special));
  spec_ = BackendSpec{std::move(name), tokenizer_.size(), max_context, true};
}

TableBackend::TableBackend(std::string name, std::vector<std::string> vocab, std::vector<bool> special,
                           std::optional<TokenId> eos, std::size_t max_context,
                           std::vector<double> default_probs, std::vector<Rule> rules)
    : ToyBackend(std::move(name), std::move(vocab), std::move(special), eos, max_context),
      default_probs_(std::move(default_probs)),
      rules_(std::move(rules)) {
  auto check = [this](const std::vector<double>& probs) {
    if (probs.size() != spec_.vocab_size) {
      throw RedteamError(ErrorCode::InvalidConfig, "distribution size does not match vocabulary");
    }
  };
  check(default_probs_);
  for (const auto& rule : rules_) check(rule.probs);
  // Most specific first: more literal tokens, then longer; file order otherwise.
  std::stable_sort(rules_.begin(), rules_.end(), [](const Rule& a, const Rule& b) {
    auto literals = [](const Rule& r) {
      return std::count_if(r.context.begin(), r.context.end(), [](const auto& t) { return t.has_value(); });
    };
    auto la = literals(a), lb = literals(b);
    if (la != lb) return la > lb;
    return a.context.size() > b.context.size();
  });
}

const std::vector<double>& TableBackend::distribution(std::span<const TokenId> context) const {
  for (const auto& rule : rules_) {
    if (rule.context.size() > context.size()) continue;
    auto tail = context.last(rule.context.size());
    bool match = true;
    for (std::size_t i = 0; i < tail.size() && match; ++i) {
      match = !rule.context[i] || *rule.context[i] == tail[i];
    }
    if (match) return rule.probs;
  }
  return default_probs_;
}

std::vector<double> TableBackend::next_token_log_probs(std::span<const TokenId> context) const {
  const auto& probs = distribution(context);
  std::vector<double> out(probs.size());
  std::transform(probs.begin(), probs.end(), out.begin(),
                 [](double p) { return std::log(std::max(p, kProbabilityFloor)); });
  return out;
}

LogLinearBackend::LogLinearBackend(std::string name, std::vector<std::string> vocab, std::vector<bool> special,
                                   std::optional<TokenId> eos, std::size_t max_context, std::vector<double> bias,
                                   std::size_t window, const std::vector<Entry>& entries)
    : ToyBackend(std::move(name), std::move(vocab), std::move(special), eos, max_context),
      bias_(std::move(bias)),
      window_(window),
      rows_(window * spec_.vocab_size) {
  const std::size_t V = spec_.vocab_size;
  if (bias_.empty()) bias_.assign(V, 0.0);
  if (bias_.size() != V) throw RedteamError(ErrorCode::InvalidConfig, "bias size does not match vocabulary");
  for (const auto& e : entries) {
    if (e.distance < 1 || e.distance > window_) {
      throw RedteamError(ErrorCode::InvalidConfig, "weight distance outside [1, window]");
    }
    if (e.from < 0 || static_cast<std::size_t>(e.from) >= V || e.to < 0 || static_cast<std::size_t>(e.to) >= V) {
      throw RedteamError(ErrorCode::InvalidConfig, "weight token out of range");
    }
    auto& r = rows_[(e.distance - 1) * V + static_cast<std::size_t>(e.from)];
    auto it = std::find_if(r.begin(), r.end(), [&](const auto& cell) { return cell.first == e.to; });
    if (it != r.end()) {
      it->second += e.weight;
    } else {
      r.emplace_back(e.to, e.weight);
    }
  }
}

const LogLinearBackend::Row& LogLinearBackend::row(std::size_t distance, TokenId from) const {
  return rows_[(distance - 1) * spec_.vocab_size + static_cast<std::size_t>(from)];
}

double LogLinearBackend::weight(std::size_t distance, TokenId from, TokenId to) const {
  if (distance < 1 || distance > window_) return 0.0;
  for (const auto& [t, w] : row(distance, from)) {
    if (t == to) return w;
  }
  return 0.0;
}

std::vector<double> LogLinearBackend::logits(std::span<const TokenId> context) const {
  std::vector<double> z = bias_;
  const std::size_t reach = std::min(window_, context.size());
  for (std::size_t d = 1; d <= reach; ++d) {
    for (const auto& [to, w] : row(d, context[context.size() - d])) z[static_cast<std::size_t>(to)] += w;
  }
  return z;
}

std::vector<double> LogLinearBackend::next_token_log_probs(std::span<const TokenId> context) const {
  return log_softmax(logits(context));
}

TokenGradient LogLinearBackend::token_gradients(const PromptBundle& prompt) const {
  check_context(prompt.ids.size(), "prompt with target");
  const std::size_t V = spec_.vocab_size;
  const std::size_t m = prompt.suffix_slice.size();
  TokenGradient grad(m, V);
  std::span<const TokenId> all(prompt.ids);

  std::vector<double> dlogits(V);
  for (std::size_t j = prompt.target_slice.begin; j < prompt.target_slice.end; ++j) {
    auto log_probs = next_token_log_probs(all.first(j));
    for (std::size_t u = 0; u < V; ++u) dlogits[u] = std::exp(log_probs[u]);
    dlogits[static_cast<std::size_t>(all[j])] -= 1.0;

    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t pos = prompt.suffix_slice.begin + i;
      if (pos >= j || j - pos > window_) continue;
      const std::size_t d = j - pos;
      for (std::size_t v = 0; v < V; ++v) {
        double acc = 0.0;
        for (const auto& [to, w] : row(d, static_cast<TokenId>(v))) acc += w * dlogits[static_cast<std::size_t>(to)];
        grad.at(i, v) += acc;
      }
    }
  }
  return grad;
}

std::unique_ptr<ToyBackend> load_toy_backend(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw RedteamError(ErrorCode::Io, "cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw RedteamError(ErrorCode::InvalidConfig, path.string() + ": " + e.what());
  }
  const std::string where = path.string();
  if (!j.contains("vocab") || !j["vocab"].is_array()) {
    throw RedteamError(ErrorCode::InvalidConfig, where + ": missing 'vocab' list");
  }
  auto vocab = j["vocab"].get<std::vector<std::string>>();
  std::vector<bool> special(vocab.size(), false);
  for (const auto& s : j.value("special", json::array())) {
    auto it = std::find(vocab.begin(), vocab.end(), s.get<std::string>());
    if (it == vocab.end()) throw RedteamError(ErrorCode::InvalidConfig, where + ": unknown special token");
    special[static_cast<std::size_t>(it - vocab.begin())] = true;
  }
  std::optional<TokenId> eos;
  if (j.contains("eos")) {
    auto it = std::find(vocab.begin(), vocab.end(), j["eos"].get<std::string>());
    if (it == vocab.end()) throw RedteamError(ErrorCode::InvalidConfig, where + ": unknown eos token");
    eos = static_cast<TokenId>(it - vocab.begin());
    special[static_cast<std::size_t>(*eos)] = true;
  }
  const auto name = j.value("name", path.stem().string());
  const auto max_context = j.value("max_context", std::size_t{4096});
  // Used only for resolving token references below.
  VocabTokenizer tok(vocab, special);

  if (j.contains("conditional_table")) {
    const auto& table = j["conditional_table"];
    if (!table.contains("default")) {
      throw RedteamError(ErrorCode::InvalidConfig, where + ": conditional_table needs a 'default' entry");
    }
    auto default_probs = distribution_from_json(table["default"], tok, where + ": default");
    std::vector<TableBackend::Rule> rules;
    for (const auto& r : table.value("rules", json::array())) {
      TableBackend::Rule rule;
      for (const auto& t : r.at("context")) {
        if (t.is_string() && t.get<std::string>() == "*") {
          rule.context.emplace_back(std::nullopt);
        } else {
          rule.context.emplace_back(token_ref(t, tok, where + ": rule context"));
        }
      }
      rule.probs = distribution_from_json(r.at("next"), tok, where + ": rule");
      rules.push_back(std::move(rule));
    }
    return std::make_unique<TableBackend>(name, std::move(vocab), std::move(special), eos, max_context,
                                          std::move(default_probs), std::move(rules));
  }

  if (j.contains("logits_weights")) {
    const auto& w = j["logits_weights"];
    const std::size_t V = vocab.size();
    std::vector<double> bias(V, 0.0);
    if (w.contains("bias")) {
      if (w["bias"].is_array()) {
        bias = w["bias"].get<std::vector<double>>();
      } else {
        for (const auto& [piece, value] : w["bias"].items()) {
          bias.at(static_cast<std::size_t>(token_ref(json(piece), tok, where + ": bias"))) = value.get<double>();
        }
      }
    }
    std::vector<LogLinearBackend::Entry> entries;
    std::size_t window = w.value("window", std::size_t{0});
    if (w.contains("matrices")) {
      const auto& mats = w["matrices"];
      window = std::max(window, mats.size());
      for (std::size_t d = 0; d < mats.size(); ++d) {
        if (mats[d].size() != V) throw RedteamError(ErrorCode::InvalidConfig, where + ": matrix must be V x V");
        for (std::size_t from = 0; from < V; ++from) {
          if (mats[d][from].size() != V) {
            throw RedteamError(ErrorCode::InvalidConfig, where + ": matrix must be V x V");
          }
          for (std::size_t to = 0; to < V; ++to) {
            double value = mats[d][from][to].get<double>();
            if (value != 0.0) {
              entries.push_back({d + 1, static_cast<TokenId>(from), static_cast<TokenId>(to), value});
            }
          }
        }
      }
    }
    for (const auto& e : w.value("entries", json::array())) {
      if (!e.is_array() || e.size() != 4) {
        throw RedteamError(ErrorCode::InvalidConfig, where + ": entries are [distance, from, to, weight]");
      }
      auto d = e[0].get<std::size_t>();
      window = std::max(window, d);
      entries.push_back({d, token_ref(e[1], tok, where), token_ref(e[2], tok, where), e[3].get<double>()});
    }
    return std::make_unique<LogLinearBackend>(name, std::move(vocab), std::move(special), eos, max_context,
                                              std::move(bias), window, entries);
  }

  throw RedteamError(ErrorCode::InvalidConfig, where + ": needs 'conditional_table' or 'logits_weights'");
}

std::vector<std::string> ascii_vocab() {
  std::vector<std::string> vocab;
  for (char c = 0x20; c < 0x7f; ++c) vocab.emplace_back(1, c);
  vocab.emplace_back("\n");
  vocab.emplace_back("</s>");
  return vocab;
}

std::unique_ptr<LogLinearBackend> make_trigger_backend(const TriggerSpec& spec) {
  std::vector<bool> special(spec.vocab.size(), false);
  auto eos_it = std::find(spec.vocab.begin(), spec.vocab.end(), spec.eos);
  if (eos_it == spec.vocab.end()) throw RedteamError(ErrorCode::InvalidConfig, "eos not in vocabulary");
  const auto eos = static_cast<TokenId>(eos_it - spec.vocab.begin());
  special[static_cast<std::size_t>(eos)] = true;

  VocabTokenizer tok(spec.vocab, special);
  auto trigger = tok.find(spec.trigger);
  if (!trigger) throw RedteamError(ErrorCode::InvalidConfig, "trigger not in vocabulary");
  if (spec.offset < 1) throw RedteamError(ErrorCode::InvalidConfig, "trigger offset must be >= 1");
  auto forced = tok.tokenize(spec.forced).ids;

  std::vector<LogLinearBackend::Entry> entries;
  for (std::size_t k = 0; k < forced.size(); ++k) {
    entries.push_back({spec.offset + k, *trigger, forced[k], spec.strength});
  }
  entries.push_back({spec.offset + forced.size(), *trigger, eos, spec.strength});

  std::vector<double> bias(spec.vocab.size(), 0.0);
  bias[static_cast<std::size_t>(eos)] = spec.eos_bias;
  return std::make_unique<LogLinearBackend>(spec.name, spec.vocab, special, eos, spec.max_context,
                                            std::move(bias), spec.offset + forced.size(), entries);
}

std::size_t trigger_offset(const TriggerSpec& spec, const ChatFormat& chat, const std::string& suffix_text) {
  TriggerSpec probe = spec;
  probe.forced.clear();
  auto backend = make_trigger_backend(probe);
  auto bundle = assemble("q", suffix_text, "t", chat, *backend);
  return bundle.target_slice.begin - bundle.suffix_slice.begin;
}

void save_log_linear(const LogLinearBackend& backend, const std::filesystem::path& path) {
  const auto& tok = backend.tokenizer();
  const std::size_t V = tok.size();
  json j;
  j["name"] = backend.spec().name;
  json vocab = json::array();
  json special = json::array();
  for (std::size_t i = 0; i < V; ++i) {
    vocab.push_back(tok.piece(static_cast<TokenId>(i)));
    if (tok.is_special(static_cast<TokenId>(i)) && backend.eos() != static_cast<TokenId>(i)) {
      special.push_back(tok.piece(static_cast<TokenId>(i)));
    }
  }
  j["vocab"] = vocab;
  if (!special.empty()) j["special"] = special;
  if (backend.eos()) j["eos"] = tok.piece(*backend.eos());
  j["max_context"] = backend.spec().max_context;

  json bias = json::array();
  for (std::size_t v = 0; v < V; ++v) bias.push_back(backend.bias(static_cast<TokenId>(v)));
  json entries = json::array();
  for (std::size_t d = 1; d <= backend.window(); ++d) {
    for (std::size_t from = 0; from < V; ++from) {
      for (std::size_t to = 0; to < V; ++to) {
        double w = backend.weight(d, static_cast<TokenId>(from), static_cast<TokenId>(to));
        if (w != 0.0) entries.push_back(json::array({d, from, to, w}));
      }
    }
  }
  j["logits_weights"] = {{"bias", bias}, {"window", backend.window()}, {"entries", entries}};

  std::ofstream out(path);
  if (!out) throw RedteamError(ErrorCode::Io, "cannot write " + path.string());
  out << j.dump(1) << '\n';
}

}  // namespace redteam
