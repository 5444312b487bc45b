#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "redteam/gcg_engine.hpp"
#include "redteam/judge.hpp"
#include "redteam/model_backend.hpp"
#include "redteam/prompt_templates.hpp"
#include "redteam/suffix_selection.hpp"

#include <json.hpp>

namespace redteam {

std::string exclamation_init(std::size_t count);

struct AttackConfig {
  std::size_t max_iterations = 1000;
  std::string init_suffix = exclamation_init(40);
  GcgParams gcg;
  SelectionParams selection;
  // Baseline profiles use plain min-loss selection.
  bool harmfulness_selection = true;
  bool stage2_enabled = true;
  std::size_t stage2_target_budget = 64;
  bool early_stop_on_success = true;
  std::optional<std::filesystem::path> warm_start_library;
  bool record_timing = true;
  std::uint64_t seed = 0;
};

enum class Stage { One = 1, Two = 2 };

struct ResuffixState {
  Stage stage = Stage::One;
  TokenSeq incumbent;
  std::optional<TokenSeq> stage1_success_suffix;
  std::optional<std::string> stage1_response;
  std::string active_target;
};

struct AttackOutcome {
  std::string question_id;
  std::string question;
  std::string templated_question;
  std::string target;
  std::string judge_target;
  TokenSeq final_suffix;
  bool success = false;
  std::size_t steps_used = 0;
  std::size_t stage1_steps = 0;
  std::size_t stage2_steps = 0;
  Stage stage_reached = Stage::One;
  std::optional<std::string> final_response;
  double final_loss = 0.0;
  std::string trace_path;
  double wall_time = 0.0;
  std::uint64_t seed = 0;
  // Set when the attack aborted; the outcome then counts as a failure.
  std::string error;
  std::vector<IterationTrace> trace;
};

// What one attack needs besides configuration.
struct AttackContext {
  QuestionRecord question;
  TemplatePair templates;
  ChatFormat chat_format;
  const ModelBackend* backend = nullptr;
  const Judge* judge = nullptr;
};

struct Stage1Result {
  ResuffixState state;
  AttackOutcome outcome;
};

Stage1Result run_stage1(const AttackContext& ctx, const AttackConfig& config);
AttackOutcome run_stage2(const AttackContext& ctx, const ResuffixState& state,
                         AttackOutcome stage1, const AttackConfig& config);

// Stage 1, then stage 2 when enabled and stage 1 succeeded.
AttackOutcome run_attack(const AttackContext& ctx, const AttackConfig& config);

// First `budget` tokens of a stage-1 response, as text.
std::string truncate_response(const std::string& response, std::size_t budget,
                              const ModelBackend& backend);

struct LibraryEntry {
  std::string question_id;
  std::string question_text;
  std::string suffix_text;
  std::string source_model;
  bool success = false;
  std::string created_at;
};

std::vector<LibraryEntry> load_suffix_library(const std::filesystem::path& path);
void append_library_entry(std::ostream& out, const LibraryEntry& entry);

// Word-overlap Jaccard similarity of two questions.
double question_similarity(std::string_view a, std::string_view b);

std::string warm_start(const QuestionRecord& question, const std::vector<LibraryEntry>& library,
                       const std::string& fallback);
std::string warm_start(const QuestionRecord& question, const std::filesystem::path& library,
                       const std::string& fallback);

TokenSeq prefix_augment(const TokenSeq& suffix, std::size_t n, const ModelBackend& backend);

nlohmann::json trace_to_json(const IterationTrace& trace);
IterationTrace trace_from_json(const nlohmann::json& j);
void write_trace(std::ostream& out, const std::vector<IterationTrace>& trace);
std::vector<IterationTrace> read_trace(const std::filesystem::path& path);

nlohmann::json outcome_to_json(const AttackOutcome& outcome);
AttackOutcome outcome_from_json(const nlohmann::json& j);

}  // namespace redteam
