#include "redteam/eval_harness.hpp"

#include <openssl/sha.h>

#include <algorithm>
#include <atomic>
#include <cctype>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <thread>

#include "redteam/errors.hpp"
#include "redteam/log.hpp"
#include "redteam/toy_backends.hpp"

#ifndef REDTEAM_DATA_DIR
#define REDTEAM_DATA_DIR "data"
#endif

namespace redteam {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string trim(std::string_view s) {
  auto is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
  auto begin = std::find_if_not(s.begin(), s.end(), is_space);
  auto end = std::find_if_not(s.rbegin(), s.rend(), is_space).base();
  return begin < end ? std::string(begin, end) : std::string();
}

std::string file_safe(std::string_view name) {
  std::string out;
  for (unsigned char c : name) {
    out.push_back(std::isalnum(c) || c == '.' || c == '-' || c == '_' ? static_cast<char>(c) : '_');
  }
  return out.empty() ? "_" : out;
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw RedteamError(ErrorCode::Io, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw RedteamError(ErrorCode::InvalidConfig, path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RedteamError(ErrorCode::Io, "cannot write " + path.string());
  out << text;
}

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

// A named preset under data/<dir>/<name>.json, or a path.
fs::path resolve_named(const fs::path& base, const std::string& value, const char* dir) {
  auto preset = data_dir() / dir / (value + ".json");
  if (value.find('/') == std::string::npos && !value.ends_with(".json") && fs::exists(preset)) return preset;
  return resolve(base, value);
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string rate_cell(std::optional<double> rate) { return rate ? format_number(*rate) : "N/A"; }

json template_json(const TemplatePair& t) {
  return {{"name", t.name},
          {"question_template", t.question_template.source()},
          {"response_template", t.response_template.source()}};
}

json chat_json(const ChatFormat& c) {
  return {{"name", c.name},
          {"system_prefix", c.system_prefix},
          {"user_prefix", c.user_prefix},
          {"user_suffix", c.user_suffix},
          {"assistant_prefix", c.assistant_prefix}};
}

std::string template_key(TemplateChoice c) {
  switch (c) {
    case TemplateChoice::Gcg: return "gcg";
    case TemplateChoice::Igcg: return "igcg";
    case TemplateChoice::Harmful: return "harmful";
  }
  return "?";
}

struct PerQuestionPaths {
  fs::path trace;
  fs::path outcome;
  std::string trace_rel;
};

PerQuestionPaths question_paths(const fs::path& dir, const std::string& model, const std::string& qid) {
  const std::string rel = "traces/" + file_safe(model) + "/" + file_safe(qid) + ".jsonl";
  return {dir / rel, dir / "outcomes" / file_safe(model) / (file_safe(qid) + ".json"), rel};
}

}  // namespace

fs::path data_dir() {
  const char* env = std::getenv("REDTEAM_DATA_DIR");
  return env && *env ? fs::path(env) : fs::path(REDTEAM_DATA_DIR);
}

std::vector<QuestionRecord> load_dataset(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw RedteamError(ErrorCode::Io, "cannot open " + path.string());
  std::vector<QuestionRecord> records;
  std::set<std::string> ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    QuestionRecord rec;
    try {
      auto j = json::parse(line);
      const auto& id = j.at("id");
      rec.id = id.is_string() ? id.get<std::string>() : id.dump();
      rec.question = j.at("question").get<std::string>();
    } catch (const json::exception& e) {
      throw RedteamError(ErrorCode::MalformedRecord, where + ": " + e.what());
    }
    if (rec.id.empty() || trim(rec.question).empty()) {
      throw RedteamError(ErrorCode::MalformedRecord, where + ": id and question must be nonempty");
    }
    if (!ids.insert(rec.id).second) throw RedteamError(ErrorCode::DuplicateId, where + ": duplicate id '" + rec.id + "'");
    records.push_back(std::move(rec));
  }
  return records;
}

std::string_view to_string(Profile profile) {
  switch (profile) {
    case Profile::GcgBaseline: return "gcg_baseline";
    case Profile::IgcgBaseline: return "igcg_baseline";
    case Profile::SiGcg: return "si_gcg";
    case Profile::HarmfulTemplateOnly: return "harmful_template_only";
    case Profile::UpdatedStrategyOnly: return "updated_strategy_only";
    case Profile::ResuffixOnly: return "resuffix_only";
  }
  return "?";
}

const std::vector<Profile>& all_profiles() {
  static const std::vector<Profile> profiles = {Profile::GcgBaseline,         Profile::IgcgBaseline,
                                                Profile::SiGcg,               Profile::HarmfulTemplateOnly,
                                                Profile::UpdatedStrategyOnly, Profile::ResuffixOnly};
  return profiles;
}

Profile parse_profile(std::string_view name) {
  for (auto p : all_profiles()) {
    if (to_string(p) == name) return p;
  }
  throw RedteamError(ErrorCode::InvalidConfig, "unknown profile '" + std::string(name) + "'");
}

ProfileFlags profile_flags(Profile profile) {
  switch (profile) {
    case Profile::GcgBaseline: return {TemplateChoice::Gcg, false, false, false};
    case Profile::IgcgBaseline: return {TemplateChoice::Igcg, false, false, true};
    case Profile::SiGcg: return {TemplateChoice::Harmful, true, true, false};
    case Profile::HarmfulTemplateOnly: return {TemplateChoice::Harmful, false, false, false};
    case Profile::UpdatedStrategyOnly: return {TemplateChoice::Gcg, true, false, false};
    case Profile::ResuffixOnly: return {TemplateChoice::Gcg, false, true, false};
  }
  return {};
}

BackendSpecifier parse_backend_specifier(std::string_view text) {
  BackendSpecifier spec;
  auto colon = text.find(':');
  if (colon == std::string_view::npos) {
    throw RedteamError(ErrorCode::InvalidConfig, "backend spec '" + std::string(text) + "' needs a kind prefix");
  }
  spec.kind = std::string(text.substr(0, colon));
  std::string rest(text.substr(colon + 1));
  if (spec.kind == "toy") {
    spec.path = rest;
  } else if (spec.kind == "plugin") {
    std::vector<std::string> parts;
    std::stringstream ss(rest);
    for (std::string part; std::getline(ss, part, ':');) parts.push_back(part);
    if (parts.empty() || parts[0].empty()) throw RedteamError(ErrorCode::InvalidConfig, "plugin spec needs a factory");
    spec.factory = parts[0];
    if (parts.size() > 1) spec.model_id = parts[1];
    if (parts.size() > 2) spec.dtype = parts[2];
  } else {
    throw RedteamError(ErrorCode::InvalidConfig, "unknown backend kind '" + spec.kind + "'");
  }
  return spec;
}

BackendSpecifier backend_specifier_from_json(const json& j) {
  if (j.is_string()) return parse_backend_specifier(j.get<std::string>());
  BackendSpecifier spec;
  spec.kind = j.at("kind").get<std::string>();
  spec.path = j.value("path", "");
  spec.factory = j.value("factory", "");
  spec.model_id = j.value("model_id", "");
  spec.dtype = j.value("dtype", "float32");
  if (spec.kind != "toy" && spec.kind != "plugin") {
    throw RedteamError(ErrorCode::InvalidConfig, "unknown backend kind '" + spec.kind + "'");
  }
  return spec;
}

json to_json(const BackendSpecifier& spec) {
  if (spec.kind == "toy") return {{"kind", "toy"}, {"path", spec.path}};
  return {{"kind", spec.kind}, {"factory", spec.factory}, {"model_id", spec.model_id}, {"dtype", spec.dtype}};
}

std::unique_ptr<ModelBackend> make_backend(const BackendSpecifier& spec) {
  if (spec.kind == "toy") return load_toy_backend(spec.path);
  return BackendRegistry::instance().create(spec.factory, {spec.model_id, default_device(), spec.dtype});
}

std::unique_ptr<Judge> make_judge(const JudgeConfig& config) {
  if (config.kind == "heuristic") {
    auto lexicon = config.lexicon.empty() ? data_dir() / "refusal_lexicon.txt" : config.lexicon;
    return std::make_unique<HeuristicJudge>(load_lexicon(lexicon), CheckOptions{config.prefix_chars});
  }
  if (config.kind == "plugin") {
    return std::make_unique<ExternalJudge>(config.plugin, std::chrono::milliseconds(config.timeout_ms));
  }
  throw RedteamError(ErrorCode::InvalidConfig, "unknown judge kind '" + config.kind + "'");
}

Campaign load_campaign(const fs::path& config_path, const CampaignOverrides& overrides) {
  return campaign_from_json(read_json_file(config_path), config_path.parent_path(), overrides);
}

Campaign campaign_from_json(const json& config, const fs::path& base_dir, const CampaignOverrides& overrides) {
  Campaign c;
  try {
    if (!config.contains("dataset")) throw RedteamError(ErrorCode::InvalidConfig, "config needs 'dataset'");
    if (!config.contains("chat_format")) {
      throw RedteamError(ErrorCode::InvalidConfig, "config needs 'chat_format' (no default chat format is assumed)");
    }
    if (!config.contains("victims") || config["victims"].empty()) {
      throw RedteamError(ErrorCode::InvalidConfig, "config needs at least one entry in 'victims'");
    }

    const std::string dataset = config["dataset"].get<std::string>();
    c.dataset = resolve(base_dir, dataset);
    c.profile = parse_profile(overrides.profile.value_or(config.value("profile", "si_gcg")));
    c.output_dir = overrides.output_dir.value_or(resolve(base_dir, config.value("output_dir", "redteam-out")));
    c.workers = std::max<std::size_t>(1, config.value("workers", std::size_t{1}));

    AttackConfig& a = c.attack;
    const std::string preset = config.value("preset", "");
    if (preset == "track1b") {
      a.gcg.batch_size = 32;
      a.max_iterations = 100;
    } else if (!preset.empty()) {
      throw RedteamError(ErrorCode::InvalidConfig, "unknown preset '" + preset + "'");
    }

    const json attack = config.value("attack", json::object());
    a.max_iterations = attack.value("max_iterations", a.max_iterations);
    a.init_suffix = attack.value("init_suffix", a.init_suffix);
    a.stage2_target_budget = attack.value("stage2_target_budget", a.stage2_target_budget);
    a.early_stop_on_success = attack.value("early_stop_on_success", a.early_stop_on_success);
    a.record_timing = attack.value("record_timing", a.record_timing);
    if (attack.contains("warm_start_library") && !attack["warm_start_library"].is_null()) {
      a.warm_start_library = resolve(base_dir, attack["warm_start_library"].get<std::string>());
    }
    a.seed = overrides.seed.value_or(config.value("seed", std::uint64_t{0}));

    const json gcg = config.value("gcg", json::object());
    a.gcg.top_k = gcg.value("top_k", a.gcg.top_k);
    a.gcg.batch_size = gcg.value("batch_size", a.gcg.batch_size);
    a.gcg.auto_fraction = gcg.value("auto_fraction", a.gcg.auto_fraction);
    a.gcg.include_incumbent = gcg.value("include_incumbent", a.gcg.include_incumbent);
    a.gcg.candidate_filter = parse_candidate_filter(gcg.value("candidate_filter", "printable_stable"));
    if (gcg.contains("coordinates")) {
      const auto& coord = gcg["coordinates"];
      if (coord.is_string() && coord.get<std::string>() == "auto") {
        a.gcg.coordinates_per_step = 0;
      } else {
        a.gcg.coordinates_per_step = coord.get<std::size_t>();
        if (a.gcg.coordinates_per_step == 0) {
          throw RedteamError(ErrorCode::InvalidConfig, "gcg.coordinates must be >= 1 or \"auto\"");
        }
      }
    }

    const json selection = config.value("selection", json::object());
    a.selection.p = selection.value("p", a.selection.p);
    a.selection.gen_budget = selection.value("gen_budget", a.selection.gen_budget);
    if (a.selection.p == 0 || a.selection.p > a.gcg.batch_size) {
      throw RedteamError(ErrorCode::InvalidConfig, "selection.p must be in [1, batch_size]");
    }
    if (a.max_iterations == 0) throw RedteamError(ErrorCode::InvalidConfig, "attack.max_iterations must be >= 1");

    const auto flags = profile_flags(c.profile);
    a.harmfulness_selection = flags.harmfulness_selection;
    a.stage2_enabled = flags.stage2;
    if (flags.auto_coordinates) a.gcg.coordinates_per_step = 0;

    const json templates = config.value("templates", json::object());
    for (auto choice : {TemplateChoice::Gcg, TemplateChoice::Igcg, TemplateChoice::Harmful}) {
      const auto key = template_key(choice);
      c.templates[choice] = templates.contains(key) ? resolve(base_dir, templates[key].get<std::string>())
                                                    : data_dir() / "templates" / (key + ".json");
    }
    c.chat_format = load_chat_format(resolve_named(base_dir, config["chat_format"].get<std::string>(), "chat_formats"));

    json victims = json::array();
    for (const auto& v : config["victims"]) {
      auto spec = backend_specifier_from_json(v);
      if (spec.kind == "toy") spec.path = resolve(base_dir, spec.path).string();
      c.victims.push_back(spec);
      victims.push_back(v);
    }
    json transfer_targets = json::array();
    const json transfer = config.value("transfer", json::object());
    for (const auto& t : transfer.value("targets", json::array())) {
      auto spec = backend_specifier_from_json(t);
      if (spec.kind == "toy") spec.path = resolve(base_dir, spec.path).string();
      c.transfer_targets.push_back(spec);
      transfer_targets.push_back(t);
    }
    c.transfer_prefix_n = transfer.value("prefix_n", c.transfer_prefix_n);

    const json judge = config.value("judge", json::object());
    c.judge.kind = judge.value("kind", "heuristic");
    if (judge.contains("lexicon")) c.judge.lexicon = resolve(base_dir, judge["lexicon"].get<std::string>());
    c.judge.prefix_chars = judge.value("prefix_chars", std::size_t{0});
    c.judge.plugin = judge.value("plugin", "");
    c.judge.timeout_ms = judge.value("timeout_ms", c.judge.timeout_ms);

    // Everything that can change results; output_dir and workers cannot.
    const auto active = load_template_pair(c.templates.at(flags.templates));
    c.resolved = {
        {"dataset", dataset},
        {"profile", std::string(to_string(c.profile))},
        {"seed", a.seed},
        {"templates", template_json(active)},
        {"chat_format", chat_json(c.chat_format)},
        {"victims", victims},
        {"transfer", {{"targets", transfer_targets}, {"prefix_n", c.transfer_prefix_n}}},
        {"judge",
         {{"kind", c.judge.kind},
          {"lexicon", judge.value("lexicon", "default")},
          {"prefix_chars", c.judge.prefix_chars},
          {"plugin", c.judge.plugin}}},
        {"attack",
         {{"max_iterations", a.max_iterations},
          {"init_suffix", a.init_suffix},
          {"harmfulness_selection", a.harmfulness_selection},
          {"stage2_enabled", a.stage2_enabled},
          {"stage2_target_budget", a.stage2_target_budget},
          {"early_stop_on_success", a.early_stop_on_success},
          {"warm_start_library", attack.value("warm_start_library", json(nullptr))},
          {"record_timing", a.record_timing}}},
        {"gcg",
         {{"top_k", a.gcg.top_k},
          {"batch_size", a.gcg.batch_size},
          {"coordinates", a.gcg.auto_coordinates() ? json("auto") : json(a.gcg.coordinates_per_step)},
          {"auto_fraction", a.gcg.auto_fraction},
          {"candidate_filter", std::string(to_string(a.gcg.candidate_filter))},
          {"include_incumbent", a.gcg.include_incumbent}}},
        {"selection", {{"p", a.selection.p}, {"gen_budget", a.selection.gen_budget}}},
    };
  } catch (const json::exception& e) {
    throw RedteamError(ErrorCode::InvalidConfig, e.what());
  }
  return c;
}

std::string config_digest(const json& config) {
  const std::string canonical = config.dump();
  unsigned char hash[SHA256_DIGEST_LENGTH];
  SHA256(reinterpret_cast<const unsigned char*>(canonical.data()), canonical.size(), hash);
  std::ostringstream hex;
  for (unsigned char b : hash) hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(b);
  return hex.str();
}

std::string format_number(double value) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, end);
}

AsrReport compute_report(const std::string& profile, const std::vector<std::pair<std::string, AttackOutcome>>& outcomes,
                         const std::string& judge_version, const std::string& digest) {
  AsrReport report;
  report.profile = profile;
  report.judge_version = judge_version;
  report.config_digest = digest;
  std::size_t steps = 0;
  for (const auto& [model, o] : outcomes) {
    auto it = std::find_if(report.per_model.begin(), report.per_model.end(),
                           [&](const ModelAsr& m) { return m.model == model; });
    if (it == report.per_model.end()) {
      report.per_model.push_back({model, 0, 0});
      it = report.per_model.end() - 1;
    }
    ++it->total;
    if (o.success) ++it->successes;
    steps += o.steps_used;
    report.per_question.push_back({model, o.question_id, o.success, o.steps_used,
                                   static_cast<int>(o.stage_reached), o.final_suffix.text, o.trace_path});
  }
  if (!outcomes.empty()) report.average_steps = static_cast<double>(steps) / static_cast<double>(outcomes.size());
  return report;
}

json report_to_json(const AsrReport& r) {
  json per_model = json::array();
  for (const auto& m : r.per_model) {
    auto rate = m.rate();
    per_model.push_back({{"model", m.model},
                         {"successes", m.successes},
                         {"total", m.total},
                         {"asr", rate ? json(*rate) : json(nullptr)}});
  }
  json per_question = json::array();
  for (const auto& q : r.per_question) {
    per_question.push_back({{"model", q.model},
                            {"question_id", q.question_id},
                            {"success", q.success},
                            {"steps_used", q.steps_used},
                            {"stage_reached", q.stage_reached},
                            {"final_suffix", q.final_suffix},
                            {"trace_path", q.trace_path}});
  }
  return {{"profile", r.profile},
          {"per_model", per_model},
          {"average_steps", r.average_steps ? json(*r.average_steps) : json(nullptr)},
          {"per_question", per_question},
          {"judge_version", r.judge_version},
          {"config_digest", r.config_digest}};
}

AsrReport report_from_json(const json& j) {
  AsrReport r;
  r.profile = j.at("profile").get<std::string>();
  for (const auto& m : j.at("per_model")) {
    r.per_model.push_back({m.at("model").get<std::string>(), m.at("successes").get<std::size_t>(),
                           m.at("total").get<std::size_t>()});
  }
  if (j.contains("average_steps") && !j["average_steps"].is_null()) r.average_steps = j["average_steps"].get<double>();
  for (const auto& q : j.value("per_question", json::array())) {
    r.per_question.push_back({q.at("model").get<std::string>(), q.at("question_id").get<std::string>(),
                              q.at("success").get<bool>(), q.at("steps_used").get<std::size_t>(),
                              q.value("stage_reached", 1), q.value("final_suffix", ""), q.value("trace_path", "")});
  }
  r.judge_version = j.value("judge_version", "");
  r.config_digest = j.value("config_digest", "");
  return r;
}

// Victims with no questions still get a column.
static void add_missing_models(AsrReport& report, const std::vector<std::string>& models) {
  for (const auto& name : models) {
    if (std::none_of(report.per_model.begin(), report.per_model.end(),
                     [&](const ModelAsr& m) { return m.model == name; })) {
      report.per_model.push_back({name, 0, 0});
    }
  }
}

AsrReport run_campaign(const Campaign& campaign) {
  const auto questions = load_dataset(campaign.dataset);
  const auto judge = make_judge(campaign.judge);
  const auto flags = profile_flags(campaign.profile);
  const auto templates = load_template_pair(campaign.templates.at(flags.templates));
  const auto digest = config_digest(campaign.resolved);
  const fs::path& out = campaign.output_dir;
  fs::create_directories(out);

  std::vector<std::string> model_names;
  for (const auto& v : campaign.victims) model_names.push_back(make_backend(v)->spec().name);

  json questions_json = json::array();
  for (const auto& q : questions) questions_json.push_back(q.id);
  json meta = {{"config", campaign.resolved},
               {"config_digest", digest},
               {"judge_version", judge->version()},
               {"profile", std::string(to_string(campaign.profile))},
               {"models", model_names},
               {"questions", questions_json},
               {"chat_format", chat_json(campaign.chat_format)},
               {"judge",
                {{"kind", campaign.judge.kind},
                 {"lexicon", campaign.judge.lexicon.string()},
                 {"prefix_chars", campaign.judge.prefix_chars},
                 {"plugin", campaign.judge.plugin},
                 {"timeout_ms", campaign.judge.timeout_ms}}},
               {"gen_budget", campaign.attack.selection.gen_budget}};
  write_text(out / "campaign.json", meta.dump(2) + "\n");

  std::vector<std::pair<std::string, AttackOutcome>> all;
  for (std::size_t v = 0; v < campaign.victims.size(); ++v) {
    const std::string& model = model_names[v];
    std::vector<AttackOutcome> outcomes(questions.size());
    std::atomic<std::size_t> next{0};

    auto worker = [&] {
      std::unique_ptr<ModelBackend> backend;
      for (std::size_t i = next++; i < questions.size(); i = next++) {
        const auto& q = questions[i];
        const auto paths = question_paths(out, model, q.id);
        if (fs::exists(paths.outcome)) {
          outcomes[i] = outcome_from_json(read_json_file(paths.outcome));
          log::info("skip " + model + "/" + q.id + " (already complete)");
          continue;
        }
        AttackOutcome o;
        try {
          if (!backend) backend = make_backend(campaign.victims[v]);
          AttackConfig config = campaign.attack;
          config.seed = derive_seed(campaign.attack.seed, model + "/" + q.id);
          o = run_attack(AttackContext{q, templates, campaign.chat_format, backend.get(), judge.get()}, config);
        } catch (const std::exception& e) {
          log::error("attack " + model + "/" + q.id + " failed: " + e.what());
          o = AttackOutcome{};
          o.question_id = q.id;
          o.question = q.question;
          o.error = e.what();
        }
        o.trace_path = paths.trace_rel;
        std::ostringstream trace;
        write_trace(trace, o.trace);
        write_text(paths.trace, trace.str());
        write_text(paths.outcome, outcome_to_json(o).dump(2) + "\n");
        log::info(model + "/" + q.id + (o.success ? " success" : " failure") + " after " +
                  std::to_string(o.steps_used) + " steps");
        outcomes[i] = std::move(o);
      }
    };
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < std::min(campaign.workers, std::max<std::size_t>(1, questions.size())); ++w) {
      pool.emplace_back(worker);
    }
    pool.clear();

    for (auto& o : outcomes) all.emplace_back(model, std::move(o));
  }

  std::ostringstream library;
  for (const auto& [model, o] : all) {
    if (o.final_suffix.text.empty()) continue;
    append_library_entry(library, {o.question_id, o.question, o.final_suffix.text, model, o.success,
                                   campaign.attack.record_timing ? std::to_string(std::time(nullptr)) : ""});
  }
  write_text(out / "suffix_library.jsonl", library.str());

  auto report = compute_report(std::string(to_string(campaign.profile)), all, judge->version(), digest);
  add_missing_models(report, model_names);
  write_reports({report}, out);

  if (!campaign.transfer_targets.empty()) {
    std::vector<std::unique_ptr<ModelBackend>> owned;
    std::vector<TransferTarget> targets;
    for (const auto& t : campaign.transfer_targets) {
      owned.push_back(make_backend(t));
      targets.push_back({owned.back()->spec().name, owned.back().get()});
    }
    std::vector<AttackOutcome> finals;
    for (const auto& [model, o] : all) finals.push_back(o);
    auto grid = transfer_eval(finals, targets, *judge, campaign.chat_format, campaign.transfer_prefix_n,
                              campaign.attack.selection.gen_budget);
    write_transfer(grid, out);
  }
  return report;
}

AsrReport recompute_report(const fs::path& dir) {
  const auto meta = read_json_file(dir / "campaign.json");
  std::vector<std::pair<std::string, AttackOutcome>> outcomes;
  for (const auto& model_json : meta.at("models")) {
    const auto model = model_json.get<std::string>();
    for (const auto& qid_json : meta.at("questions")) {
      const auto qid = qid_json.get<std::string>();
      const auto paths = question_paths(dir, model, qid);
      AttackOutcome o;
      o.question_id = qid;
      o.trace_path = paths.trace_rel;
      if (!fs::exists(paths.trace)) {
        throw RedteamError(ErrorCode::Io, "missing trace " + paths.trace.string() + " (campaign incomplete?)");
      }
      const auto trace = read_trace(paths.trace);
      o.steps_used = trace.size();
      const IterationTrace* best = nullptr;
      const IterationTrace* harmful = nullptr;
      for (const auto& t : trace) {
        if (t.stage == 2) o.stage_reached = Stage::Two;
        if (t.chosen_harmful) harmful = &t;
        if (!best || t.loss < best->loss) best = &t;
      }
      o.success = harmful != nullptr;
      if (harmful) {
        o.final_suffix.text = harmful->suffix_text;
      } else if (best) {
        o.final_suffix.text = best->suffix_text;
      }
      outcomes.emplace_back(model, std::move(o));
    }
  }
  auto report = compute_report(meta.at("profile").get<std::string>(), outcomes,
                               meta.at("judge_version").get<std::string>(), meta.at("config_digest").get<std::string>());
  add_missing_models(report, meta.at("models").get<std::vector<std::string>>());
  return report;
}

TransferGrid transfer_eval(const std::vector<AttackOutcome>& outcomes, const std::vector<TransferTarget>& targets,
                           const Judge& judge, const ChatFormat& chat, const std::vector<std::size_t>& prefix_n,
                           std::size_t gen_budget) {
  TransferGrid grid;
  grid.prefix_n = prefix_n;
  grid.judge_version = judge.version();
  for (const auto& t : targets) grid.models.push_back(t.name);
  grid.cells.assign(prefix_n.size(), std::vector<TransferCell>(targets.size()));

  for (std::size_t r = 0; r < prefix_n.size(); ++r) {
    for (std::size_t c = 0; c < targets.size(); ++c) {
      const ModelBackend& backend = *targets[c].backend;
      TransferCell& cell = grid.cells[r][c];
      for (const auto& o : outcomes) {
        ++cell.total;
        try {
          auto suffix = prefix_augment(backend.tokenize(o.final_suffix.text), prefix_n[r], backend);
          auto bundle = assemble(o.templated_question, suffix, o.target, chat, backend);
          auto generated = backend.detokenize(backend.generate_ids(bundle.prompt_ids(), gen_budget));
          if (judge.check(generated, o.judge_target).harmful) ++cell.successes;
        } catch (const std::exception& e) {
          ++cell.failures;
          log::warn("transfer " + targets[c].name + "/" + o.question_id + " n=" + std::to_string(prefix_n[r]) +
                    " failed: " + e.what());
        }
      }
    }
  }
  return grid;
}

std::string transfer_row_label(std::size_t n) { return n == 0 ? "baseline" : "+ " + std::to_string(n) + "*!"; }

void write_transfer(const TransferGrid& grid, const fs::path& dir) {
  std::ostringstream csv;
  csv << "prefix_n,label";
  for (const auto& m : grid.models) csv << ',' << csv_field(m);
  csv << ",judge_version\n";
  json rows = json::array();
  for (std::size_t r = 0; r < grid.prefix_n.size(); ++r) {
    csv << grid.prefix_n[r] << ',' << csv_field(transfer_row_label(grid.prefix_n[r]));
    json cells = json::object();
    for (std::size_t c = 0; c < grid.models.size(); ++c) {
      const auto& cell = grid.cells[r][c];
      csv << ',' << rate_cell(cell.rate());
      cells[grid.models[c]] = {{"successes", cell.successes},
                               {"total", cell.total},
                               {"failures", cell.failures},
                               {"asr", cell.rate() ? json(*cell.rate()) : json(nullptr)}};
    }
    csv << ',' << csv_field(grid.judge_version) << '\n';
    rows.push_back({{"prefix_n", grid.prefix_n[r]}, {"label", transfer_row_label(grid.prefix_n[r])}, {"cells", cells}});
  }
  write_text(dir / "transfer.csv", csv.str());
  write_text(dir / "transfer.json",
             json{{"models", grid.models}, {"rows", rows}, {"judge_version", grid.judge_version}}.dump(2) + "\n");
}

std::string report_csv(const std::vector<AsrReport>& reports) {
  std::vector<std::string> models;
  struct Row {
    std::string profile;
    std::map<std::string, std::pair<std::size_t, std::size_t>> counts;
    double step_sum = 0.0;
    std::size_t step_n = 0;
    std::string digest;
    std::string judge;
  };
  std::vector<Row> rows;
  for (const auto& r : reports) {
    for (const auto& m : r.per_model) {
      if (std::find(models.begin(), models.end(), m.model) == models.end()) models.push_back(m.model);
    }
    auto it = std::find_if(rows.begin(), rows.end(), [&](const Row& row) { return row.profile == r.profile; });
    if (it == rows.end()) {
      rows.push_back({r.profile, {}, 0.0, 0, r.config_digest, r.judge_version});
      it = rows.end() - 1;
    }
    for (const auto& m : r.per_model) {
      auto& cell = it->counts[m.model];
      cell.first += m.successes;
      cell.second += m.total;
    }
    if (r.average_steps) {
      // Weight each report's mean by its question count.
      std::size_t n = 0;
      for (const auto& m : r.per_model) n += m.total;
      it->step_sum += *r.average_steps * static_cast<double>(n);
      it->step_n += n;
    }
  }

  std::ostringstream csv;
  csv << "profile";
  for (const auto& m : models) csv << ',' << csv_field(m);
  csv << ",average_steps,config_digest,judge_version\n";
  for (const auto& row : rows) {
    csv << csv_field(row.profile);
    for (const auto& m : models) {
      auto it = row.counts.find(m);
      std::optional<double> rate;
      if (it != row.counts.end() && it->second.second > 0) {
        rate = static_cast<double>(it->second.first) / static_cast<double>(it->second.second);
      }
      csv << ',' << rate_cell(rate);
    }
    std::optional<double> steps;
    if (row.step_n > 0) steps = row.step_sum / static_cast<double>(row.step_n);
    csv << ',' << rate_cell(steps) << ',' << csv_field(row.digest) << ',' << csv_field(row.judge) << '\n';
  }
  return csv.str();
}

CsvTable parse_csv(std::string_view text) {
  CsvTable table;
  std::vector<std::string> record;
  std::string field;
  bool quoted = false;
  bool any = false;
  auto end_record = [&] {
    record.push_back(std::move(field));
    field.clear();
    if (table.header.empty()) {
      table.header = std::move(record);
    } else {
      table.rows.push_back(std::move(record));
    }
    record.clear();
    any = false;
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    char ch = text[i];
    if (quoted) {
      if (ch == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        field += ch;
      }
      continue;
    }
    any = true;
    if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      record.push_back(std::move(field));
      field.clear();
    } else if (ch == '\n') {
      end_record();
    } else if (ch != '\r') {
      field += ch;
    }
  }
  if (any) end_record();
  return table;
}

void write_reports(const std::vector<AsrReport>& reports, const fs::path& dir) {
  json arr = json::array();
  for (const auto& r : reports) arr.push_back(report_to_json(r));
  write_text(dir / "report.json", json{{"reports", arr}}.dump(2) + "\n");
  write_text(dir / "report.csv", report_csv(reports));
}

std::vector<AttackOutcome> load_outcomes(const fs::path& dir) {
  const auto meta = read_json_file(dir / "campaign.json");
  std::vector<AttackOutcome> outcomes;
  for (const auto& model : meta.at("models")) {
    for (const auto& qid : meta.at("questions")) {
      const auto paths = question_paths(dir, model.get<std::string>(), qid.get<std::string>());
      if (!fs::exists(paths.outcome)) continue;
      outcomes.push_back(outcome_from_json(read_json_file(paths.outcome)));
    }
  }
  return outcomes;
}

}  // namespace redteam
