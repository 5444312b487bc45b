#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "redteam/judge.hpp"
#include "redteam/model_backend.hpp"
#include "redteam/prompt_templates.hpp"
#include "redteam/resuffix_pipeline.hpp"

#include <json.hpp>

namespace redteam {

// Directory holding the shipped templates, chat formats and lexicon.
std::filesystem::path data_dir();

std::vector<QuestionRecord> load_dataset(const std::filesystem::path& path);

enum class Profile {
  GcgBaseline,
  IgcgBaseline,
  SiGcg,
  HarmfulTemplateOnly,
  UpdatedStrategyOnly,
  ResuffixOnly,
};

std::string_view to_string(Profile profile);
Profile parse_profile(std::string_view name);
const std::vector<Profile>& all_profiles();

enum class TemplateChoice { Gcg, Igcg, Harmful };

// The factors a profile toggles; everything else is shared.
struct ProfileFlags {
  TemplateChoice templates = TemplateChoice::Harmful;
  bool harmfulness_selection = true;
  bool stage2 = true;
  bool auto_coordinates = false;
};

ProfileFlags profile_flags(Profile profile);

// "toy:<path>" or "plugin:<factory>[:<model_id>[:<dtype>]]".
struct BackendSpecifier {
  std::string kind;
  std::string path;
  std::string factory;
  std::string model_id;
  std::string dtype = "float32";
};

BackendSpecifier parse_backend_specifier(std::string_view text);
BackendSpecifier backend_specifier_from_json(const nlohmann::json& j);
nlohmann::json to_json(const BackendSpecifier& spec);
std::unique_ptr<ModelBackend> make_backend(const BackendSpecifier& spec);

struct JudgeConfig {
  std::string kind = "heuristic";
  std::filesystem::path lexicon;
  std::size_t prefix_chars = 0;
  std::string plugin;
  std::size_t timeout_ms = 30000;
};

std::unique_ptr<Judge> make_judge(const JudgeConfig& config);

struct Campaign {
  std::filesystem::path dataset;
  AttackConfig attack;
  Profile profile = Profile::SiGcg;
  std::map<TemplateChoice, std::filesystem::path> templates;
  ChatFormat chat_format;
  std::vector<BackendSpecifier> victims;
  std::vector<BackendSpecifier> transfer_targets;
  std::vector<std::size_t> transfer_prefix_n{0};
  JudgeConfig judge;
  std::filesystem::path output_dir;
  std::size_t workers = 1;
  // Fully resolved configuration; its canonical dump feeds the digest.
  nlohmann::json resolved;
};

struct CampaignOverrides {
  std::optional<std::string> profile;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> output_dir;
};

Campaign load_campaign(const std::filesystem::path& config_path, const CampaignOverrides& overrides = {});
Campaign campaign_from_json(const nlohmann::json& config, const std::filesystem::path& base_dir,
                            const CampaignOverrides& overrides = {});

// Hex SHA-256 of the canonical JSON dump.
std::string config_digest(const nlohmann::json& config);

struct ModelAsr {
  std::string model;
  std::size_t successes = 0;
  std::size_t total = 0;

  std::optional<double> rate() const {
    if (total == 0) return std::nullopt;
    return static_cast<double>(successes) / static_cast<double>(total);
  }
};

struct QuestionSummary {
  std::string model;
  std::string question_id;
  bool success = false;
  std::size_t steps_used = 0;
  int stage_reached = 1;
  std::string final_suffix;
  std::string trace_path;
};

struct AsrReport {
  std::string profile;
  std::vector<ModelAsr> per_model;
  std::optional<double> average_steps;
  std::vector<QuestionSummary> per_question;
  std::string judge_version;
  std::string config_digest;
};

// Pure fold over outcomes; outcomes are grouped by model in first-seen order.
AsrReport compute_report(const std::string& profile,
                         const std::vector<std::pair<std::string, AttackOutcome>>& outcomes,
                         const std::string& judge_version, const std::string& digest);

nlohmann::json report_to_json(const AsrReport& report);
AsrReport report_from_json(const nlohmann::json& j);

AsrReport run_campaign(const Campaign& campaign);

// Recomputes a finished campaign's report from its persisted traces.
AsrReport recompute_report(const std::filesystem::path& campaign_dir);

struct TransferTarget {
  std::string name;
  const ModelBackend* backend = nullptr;
};

struct TransferCell {
  std::size_t successes = 0;
  std::size_t total = 0;
  std::size_t failures = 0;  // cells where assembly or generation threw
  std::optional<double> rate() const {
    if (total == 0) return std::nullopt;
    return static_cast<double>(successes) / static_cast<double>(total);
  }
};

// Rows are prefix counts, columns are target models.
struct TransferGrid {
  std::vector<std::size_t> prefix_n;
  std::vector<std::string> models;
  std::vector<std::vector<TransferCell>> cells;
  std::string judge_version;
};

TransferGrid transfer_eval(const std::vector<AttackOutcome>& outcomes,
                           const std::vector<TransferTarget>& targets, const Judge& judge,
                           const ChatFormat& chat, const std::vector<std::size_t>& prefix_n,
                           std::size_t gen_budget);

std::string transfer_row_label(std::size_t n);
void write_transfer(const TransferGrid& grid, const std::filesystem::path& dir);

// CSV: one row per profile, one column per model plus average_steps.
std::string report_csv(const std::vector<AsrReport>& reports);
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};
CsvTable parse_csv(std::string_view text);

void write_reports(const std::vector<AsrReport>& reports, const std::filesystem::path& dir);

std::vector<AttackOutcome> load_outcomes(const std::filesystem::path& campaign_dir);

std::string format_number(double value);

}  // namespace redteam
