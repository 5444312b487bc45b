#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <string_view>
#include <vector>

namespace redteam {

struct JudgeVerdict {
  bool harmful = false;
  std::string matched_rule;
  std::optional<std::string> refusal_hit;
  bool target_prefix_hit = false;
};

class RefusalLexicon {
 public:
  // Throws InvalidConfig when empty or when one phrase shadows another.
  RefusalLexicon(std::vector<std::string> phrases, std::string version);

  const std::vector<std::string>& phrases() const { return phrases_; }
  const std::string& version() const { return version_; }

  // First phrase (in file order) present in `text`, matched on normalized form.
  std::optional<std::string> find(std::string_view text) const;

 private:
  std::vector<std::string> phrases_;
  std::vector<std::string> normalized_;
  std::string version_;
};

// One phrase per line, `#` comments; a `# version: X` comment sets the version.
RefusalLexicon load_lexicon(const std::filesystem::path& path);

// Lowercase, curly quotes folded, punctuation runs collapsed to one space.
std::string normalize_for_matching(std::string_view text);

struct CheckOptions {
  // Characters of the target that the continuation must start with; 0 = all.
  std::size_t prefix_chars = 0;
};

JudgeVerdict check(std::string_view generated, std::string_view target,
                   const RefusalLexicon& lexicon, const CheckOptions& options = {});

struct PluginVerdict {
  bool harmful = false;
  double score = 0.0;
};

struct JudgePlugin {
  std::string name;
  std::function<PluginVerdict(std::string_view text, std::string_view target)> classify;
  std::size_t max_concurrency = 1;
};

class JudgePluginRegistry {
 public:
  static JudgePluginRegistry& instance();

  void add(JudgePlugin plugin);
  bool contains(const std::string& name) const;
  void remove(const std::string& name);

  // Runs the plugin under its concurrency gate; timeout yields a not-harmful
  // verdict tagged "timeout".
  JudgeVerdict classify(const std::string& name, std::string_view generated, std::string_view target,
                        std::chrono::milliseconds timeout) const;

 private:
  struct Entry {
    JudgePlugin plugin;
    std::shared_ptr<std::counting_semaphore<>> gate;
  };
  std::shared_ptr<const Entry> find(const std::string& name) const;

  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<const Entry>> plugins_;
};

JudgeVerdict check_external(std::string_view generated, std::string_view target,
                            const std::string& plugin_name,
                            std::chrono::milliseconds timeout = std::chrono::seconds(30));

// Check(.) as used by selection and the pipeline.
class Judge {
 public:
  virtual ~Judge() = default;
  virtual JudgeVerdict check(std::string_view generated, std::string_view target) const = 0;
  virtual std::string version() const = 0;
};

class HeuristicJudge final : public Judge {
 public:
  explicit HeuristicJudge(RefusalLexicon lexicon, CheckOptions options = {})
      : lexicon_(std::move(lexicon)), options_(options) {}

  JudgeVerdict check(std::string_view generated, std::string_view target) const override {
    return redteam::check(generated, target, lexicon_, options_);
  }
  std::string version() const override { return "heuristic/lexicon-" + lexicon_.version(); }

 private:
  RefusalLexicon lexicon_;
  CheckOptions options_;
};

class ExternalJudge final : public Judge {
 public:
  explicit ExternalJudge(std::string plugin, std::chrono::milliseconds timeout = std::chrono::seconds(30));

  JudgeVerdict check(std::string_view generated, std::string_view target) const override {
    return check_external(generated, target, plugin_, timeout_);
  }
  std::string version() const override { return "plugin/" + plugin_; }

 private:
  std::string plugin_;
  std::chrono::milliseconds timeout_;
};

}  // namespace redteam
