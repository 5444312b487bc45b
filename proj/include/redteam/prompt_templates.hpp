#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "redteam/tokens.hpp"

namespace redteam {

class ModelBackend;

struct QuestionRecord {
  std::string id;
  std::string question;
};

// A template string holding exactly one `{Q}` placeholder. `{{` and `}}`
// render as literal braces.
class QuestionTemplate {
 public:
  QuestionTemplate() = default;
  explicit QuestionTemplate(std::string source);

  const std::string& source() const { return source_; }
  std::string render(std::string_view question) const;
  // Rendered text before the placeholder.
  const std::string& head() const { return head_; }

 private:
  std::string source_;
  std::string head_;
  std::string tail_;
};

struct TemplatePair {
  std::string name;
  QuestionTemplate question_template;
  QuestionTemplate response_template;
};

struct ChatFormat {
  std::string name;
  std::string system_prefix;
  std::string user_prefix;
  std::string user_suffix;
  std::string assistant_prefix;
};

using Rephraser = std::function<std::string(std::string_view)>;

TemplatePair make_template_pair(std::string name, std::string question_template,
                                std::string response_template);

std::string render_question(const TemplatePair& templates, const QuestionRecord& q,
                            const Rephraser& rephraser = {});
std::string render_target(const TemplatePair& templates, const QuestionRecord& q);

// The fixed response-template text ahead of `{Q}` (x^HR), trimmed. Falls back
// to the full rendered target when the template starts with the placeholder.
std::string judge_target(const TemplatePair& templates, const QuestionRecord& q);

TemplatePair load_template_pair(const std::filesystem::path& path);
ChatFormat load_chat_format(const std::filesystem::path& path);

// The prompt as the model sees it, tokenized region by region.
//
// Layout: system | question | suffix | assistant | target, where the question
// region is user_prefix + templated question (+ separator) and the assistant
// region is user_suffix + assistant_prefix (+ separator).
struct PromptBundle {
  std::string templated_question;
  TokenSeq suffix;
  std::string target;
  ChatFormat chat_format;

  // Rendered region texts; text == head_text + suffix.text + assistant_text + target.
  std::string head_text;
  std::string assistant_text;

  std::vector<TokenId> ids;
  std::string text;

  Slice system;
  Slice question;
  Slice suffix_slice;
  Slice assistant;
  Slice target_slice;

  // Everything ahead of the target region.
  std::vector<TokenId> prompt_ids() const;
  std::string prompt_text() const;
  std::vector<TokenId> target_ids() const;

  // Copy with the suffix tokens replaced in place; lengths must match.
  PromptBundle with_suffix(const TokenSeq& replacement) const;
};

PromptBundle assemble(const std::string& templated_question, const std::string& suffix_text,
                      const std::string& target, const ChatFormat& chat,
                      const ModelBackend& backend);

PromptBundle assemble(const std::string& templated_question, const TokenSeq& suffix,
                      const std::string& target, const ChatFormat& chat,
                      const ModelBackend& backend);

}  // namespace redteam
