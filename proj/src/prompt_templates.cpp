#include "redteam/prompt_templates.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

#include <json.hpp>

#include "redteam/errors.hpp"
#include "redteam/model_backend.hpp"

namespace redteam {
namespace {

constexpr std::string_view kPlaceholder = "{Q}";

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

std::string trim(std::string_view s) {
  auto begin = std::find_if_not(s.begin(), s.end(), is_space);
  auto end = std::find_if_not(s.rbegin(), s.rend(), is_space).base();
  return begin < end ? std::string(begin, end) : std::string();
}

// A single space joins two non-empty pieces unless whitespace already does.
bool needs_separator(std::string_view left, std::string_view right) {
  return !left.empty() && !right.empty() && !is_space(left.back()) && !is_space(right.front());
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw RedteamError(ErrorCode::Io, "cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw RedteamError(ErrorCode::InvalidConfig, path.string() + ": " + e.what());
  }
}

std::string required_string(const nlohmann::json& j, const char* key, const std::filesystem::path& path) {
  if (!j.contains(key) || !j.at(key).is_string()) {
    throw RedteamError(ErrorCode::InvalidConfig, path.string() + ": missing string key '" + key + "'");
  }
  return j.at(key).get<std::string>();
}

}  // namespace

QuestionTemplate::QuestionTemplate(std::string source) : source_(std::move(source)) {
  int placeholders = 0;
  std::string* out = &head_;
  for (std::size_t i = 0; i < source_.size();) {
    std::string_view rest = std::string_view(source_).substr(i);
    if (rest.starts_with("{{")) {
      out->push_back('{');
      i += 2;
    } else if (rest.starts_with("}}")) {
      out->push_back('}');
      i += 2;
    } else if (rest.starts_with(kPlaceholder)) {
      ++placeholders;
      out = &tail_;
      i += kPlaceholder.size();
    } else {
      out->push_back(source_[i]);
      ++i;
    }
  }
  if (placeholders != 1) {
    throw RedteamError(ErrorCode::MissingPlaceholder,
                       "template must contain exactly one {Q}, found " + std::to_string(placeholders));
  }
}

std::string QuestionTemplate::render(std::string_view question) const {
  std::string out;
  out.reserve(head_.size() + question.size() + tail_.size());
  out += head_;
  out += question;
  out += tail_;
  return out;
}

TemplatePair make_template_pair(std::string name, std::string question_template,
                                std::string response_template) {
  return TemplatePair{std::move(name), QuestionTemplate(std::move(question_template)),
                      QuestionTemplate(std::move(response_template))};
}

static void require_question(const QuestionRecord& q) {
  if (trim(q.question).empty()) {
    throw RedteamError(ErrorCode::EmptyQuestion, "question '" + q.id + "' is empty");
  }
}

std::string render_question(const TemplatePair& templates, const QuestionRecord& q,
                            const Rephraser& rephraser) {
  require_question(q);
  if (rephraser) return templates.question_template.render(rephraser(q.question));
  return templates.question_template.render(q.question);
}

std::string render_target(const TemplatePair& templates, const QuestionRecord& q) {
  require_question(q);
  return templates.response_template.render(q.question);
}

std::string judge_target(const TemplatePair& templates, const QuestionRecord& q) {
  std::string head = trim(templates.response_template.head());
  if (!head.empty()) return head;
  return render_target(templates, q);
}

TemplatePair load_template_pair(const std::filesystem::path& path) {
  auto j = read_json(path);
  return make_template_pair(required_string(j, "name", path), required_string(j, "question_template", path),
                            required_string(j, "response_template", path));
}

ChatFormat load_chat_format(const std::filesystem::path& path) {
  auto j = read_json(path);
  return ChatFormat{required_string(j, "name", path), required_string(j, "system_prefix", path),
                    required_string(j, "user_prefix", path), required_string(j, "user_suffix", path),
                    required_string(j, "assistant_prefix", path)};
}

std::vector<TokenId> PromptBundle::prompt_ids() const {
  return {ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(target_slice.begin)};
}

std::string PromptBundle::prompt_text() const { return head_text + suffix.text + assistant_text; }

std::vector<TokenId> PromptBundle::target_ids() const {
  return {ids.begin() + static_cast<std::ptrdiff_t>(target_slice.begin),
          ids.begin() + static_cast<std::ptrdiff_t>(target_slice.end)};
}

PromptBundle PromptBundle::with_suffix(const TokenSeq& replacement) const {
  if (replacement.size() != suffix_slice.size()) {
    throw RedteamError(ErrorCode::InvalidConfig, "replacement suffix length " +
                                                     std::to_string(replacement.size()) + " != " +
                                                     std::to_string(suffix_slice.size()));
  }
  PromptBundle out = *this;
  std::copy(replacement.ids.begin(), replacement.ids.end(),
            out.ids.begin() + static_cast<std::ptrdiff_t>(suffix_slice.begin));
  out.suffix = replacement;
  out.text = out.head_text + out.suffix.text + out.assistant_text + out.target;
  return out;
}

PromptBundle assemble(const std::string& templated_question, const std::string& suffix_text,
                      const std::string& target, const ChatFormat& chat, const ModelBackend& backend) {
  return assemble(templated_question, backend.tokenize(suffix_text), target, chat, backend);
}

PromptBundle assemble(const std::string& templated_question, const TokenSeq& suffix,
                      const std::string& target, const ChatFormat& chat, const ModelBackend& backend) {
  if (suffix.empty()) {
    throw RedteamError(ErrorCode::InvalidConfig, "suffix must contain at least one token");
  }

  PromptBundle b;
  b.templated_question = templated_question;
  b.suffix = suffix;
  b.target = target;
  b.chat_format = chat;

  std::string question_text = chat.user_prefix + templated_question;
  if (needs_separator(chat.system_prefix + question_text, suffix.text)) question_text += ' ';
  b.head_text = chat.system_prefix + question_text;

  b.assistant_text = chat.user_suffix + chat.assistant_prefix;
  if (needs_separator(b.head_text + suffix.text + b.assistant_text, target)) b.assistant_text += ' ';
  b.text = b.head_text + suffix.text + b.assistant_text + target;

  auto append = [&b](const std::vector<TokenId>& region) {
    Slice s{b.ids.size(), b.ids.size() + region.size()};
    b.ids.insert(b.ids.end(), region.begin(), region.end());
    return s;
  };
  b.system = append(backend.tokenize(chat.system_prefix).ids);
  b.question = append(backend.tokenize(question_text).ids);
  b.suffix_slice = append(suffix.ids);
  b.assistant = append(backend.tokenize(b.assistant_text).ids);
  b.target_slice = append(backend.tokenize(target).ids);

  auto whole = backend.tokenize(b.text);
  if (whole.ids != b.ids) {
    bool suffix_moved = whole.ids.size() < b.suffix_slice.end ||
                        !std::equal(suffix.ids.begin(), suffix.ids.end(),
                                    whole.ids.begin() + static_cast<std::ptrdiff_t>(b.suffix_slice.begin));
    throw RedteamError(ErrorCode::TokenizationUnstable,
                       suffix_moved ? "re-tokenizing the prompt changes the suffix tokens"
                                    : "re-tokenizing the prompt changes region boundaries");
  }
  return b;
}

}  // namespace redteam
