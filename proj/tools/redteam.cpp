#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "redteam/errors.hpp"
#include "redteam/eval_harness.hpp"
#include "redteam/log.hpp"

using namespace redteam;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw RedteamError(ErrorCode::Io, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw RedteamError(ErrorCode::MalformedRecord, path.string() + ": " + e.what());
  }
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> parts;
  std::stringstream ss(text);
  for (std::string part; std::getline(ss, part, sep);) {
    if (!part.empty()) parts.push_back(part);
  }
  return parts;
}

void print_csv(const fs::path& path) {
  std::ifstream in(path);
  std::cout << in.rdbuf();
}

int run(const std::string& config, const std::optional<std::string>& profile, const std::optional<std::uint64_t>& seed,
        const std::optional<std::string>& out) {
  CampaignOverrides overrides;
  overrides.profile = profile;
  overrides.seed = seed;
  if (out) overrides.output_dir = fs::path(*out);
  auto campaign = load_campaign(config, overrides);
  run_campaign(campaign);
  print_csv(campaign.output_dir / "report.csv");
  log::info("results in " + campaign.output_dir.string());
  return 0;
}

int transfer(const std::string& outcomes_dir, const std::string& targets_text, const std::string& prefix_text,
             const std::optional<std::string>& out) {
  const fs::path dir(outcomes_dir);
  const auto meta = read_json(dir / "campaign.json");
  const auto& chat_j = meta.at("chat_format");
  ChatFormat chat{chat_j.at("name"), chat_j.at("system_prefix"), chat_j.at("user_prefix"), chat_j.at("user_suffix"),
                  chat_j.at("assistant_prefix")};
  const auto& judge_j = meta.at("judge");
  JudgeConfig judge_config;
  judge_config.kind = judge_j.at("kind");
  judge_config.lexicon = judge_j.at("lexicon").get<std::string>();
  judge_config.prefix_chars = judge_j.at("prefix_chars");
  judge_config.plugin = judge_j.at("plugin");
  judge_config.timeout_ms = judge_j.at("timeout_ms");
  auto judge = make_judge(judge_config);

  std::vector<std::size_t> prefix_n;
  for (const auto& n : split(prefix_text, ',')) {
    try {
      prefix_n.push_back(std::stoul(n));
    } catch (const std::exception&) {
      throw RedteamError(ErrorCode::InvalidConfig, "bad --prefix-n entry '" + n + "'");
    }
  }
  std::vector<std::unique_ptr<ModelBackend>> owned;
  std::vector<TransferTarget> targets;
  for (const auto& spec : split(targets_text, ',')) {
    owned.push_back(make_backend(parse_backend_specifier(spec)));
    targets.push_back({owned.back()->spec().name, owned.back().get()});
  }
  if (targets.empty()) throw RedteamError(ErrorCode::InvalidConfig, "--targets is empty");

  auto grid = transfer_eval(load_outcomes(dir), targets, *judge, chat, prefix_n, meta.at("gen_budget"));
  const fs::path dest = out ? fs::path(*out) : dir;
  write_transfer(grid, dest);
  print_csv(dest / "transfer.csv");
  return 0;
}

int report(const std::string& in) {
  auto r = recompute_report(in);
  write_reports({r}, in);
  print_csv(fs::path(in) / "report.csv");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial suffix red-teaming harness"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");

  auto* run_cmd = app.add_subcommand("run", "Run an attack campaign");
  std::string config;
  std::optional<std::string> profile;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  run_cmd->add_option("--config", config, "Campaign config (JSON)")->required()->check(CLI::ExistingFile);
  run_cmd->add_option("--profile", profile, "Profile override");
  run_cmd->add_option("--seed", seed, "Seed override");
  run_cmd->add_option("--out", out, "Output directory override");

  auto* transfer_cmd = app.add_subcommand("transfer", "Evaluate suffixes on other models");
  std::string outcomes_dir;
  std::string targets;
  std::string prefix_n = "0";
  std::optional<std::string> transfer_out;
  transfer_cmd->add_option("--outcomes", outcomes_dir, "Finished campaign directory")->required();
  transfer_cmd->add_option("--targets", targets, "Comma-separated backend specs")->required();
  transfer_cmd->add_option("--prefix-n", prefix_n, "Comma-separated prefix counts");
  transfer_cmd->add_option("--out", transfer_out, "Output directory (defaults to --outcomes)");

  auto* report_cmd = app.add_subcommand("report", "Recompute reports from traces");
  std::string in;
  report_cmd->add_option("--in", in, "Campaign directory")->required();

  CLI11_PARSE(app, argc, argv);
  if (verbose) log::set_level(log::Level::Debug);

  try {
    if (*run_cmd) return run(config, profile, seed, out);
    if (*transfer_cmd) return transfer(outcomes_dir, targets, prefix_n, transfer_out);
    if (*report_cmd) return report(in);
  } catch (const RedteamError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
