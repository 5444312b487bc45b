#include "redteam/resuffix_pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <fstream>
#include <limits>
#include <memory>
#include <set>

#include "redteam/errors.hpp"
#include "redteam/log.hpp"

namespace redteam {
namespace {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

struct LoopResult {
  std::size_t steps = 0;
  TokenSeq last_suffix;
  TokenSeq best_suffix;
  double best_loss = std::numeric_limits<double>::infinity();
  std::optional<TokenSeq> harmful_suffix;
  std::optional<std::string> harmful_response;
  double harmful_loss = 0.0;
};

// The shared iteration loop for both stages.
LoopResult iterate(Stage stage, PromptBundle prompt, const AttackContext& ctx, const AttackConfig& config,
                   const std::string& judge_target, std::uint64_t seed, std::vector<IterationTrace>& trace) {
  const ModelBackend& backend = *ctx.backend;
  GcgEngine engine(backend, config.gcg);
  CoordinateSchedule schedule(config.gcg);
  Rng rng(seed);

  std::unique_ptr<SuffixSelector> selector;
  if (config.harmfulness_selection) {
    selector = std::make_unique<HarmfulnessSelector>(*ctx.judge, judge_target, config.selection);
  } else {
    selector = std::make_unique<MinLossSelector>();
  }

  LoopResult out;
  out.last_suffix = prompt.suffix;
  out.best_suffix = prompt.suffix;
  for (std::size_t step = 1; step <= config.max_iterations; ++step) {
    const auto started = Clock::now();
    auto result = engine.step(prompt, *selector, rng, schedule);
    CandidateSuffix& chosen = result.chosen;

    if (!chosen.verdict) {
      try {
        auto bundle = prompt.with_suffix(chosen.ids);
        chosen.generated =
            backend.detokenize(backend.generate_ids(bundle.prompt_ids(), config.selection.gen_budget));
        chosen.verdict = ctx.judge->check(*chosen.generated, judge_target);
      } catch (const std::exception& e) {
        log::warn(std::string("judging chosen suffix failed: ") + e.what());
        chosen.verdict = JudgeVerdict{false, "generation_error", std::nullopt, false};
      }
    }
    const bool harmful = chosen.verdict->harmful;

    if (chosen.loss < out.best_loss) {
      out.best_loss = chosen.loss;
      out.best_suffix = chosen.ids;
    }
    auto& record = result.trace;
    record.stage = static_cast<int>(stage);
    record.step = step;
    record.best_loss = out.best_loss;
    record.chosen_harmful = harmful;
    record.seed = seed;
    record.elapsed_ms = config.record_timing ? ms_since(started) : 0.0;
    trace.push_back(std::move(record));

    prompt = prompt.with_suffix(chosen.ids);
    out.last_suffix = chosen.ids;
    out.steps = step;
    if (harmful) {
      out.harmful_suffix = chosen.ids;
      out.harmful_response = chosen.generated.value_or("");
      out.harmful_loss = chosen.loss;
      if (config.early_stop_on_success) break;
    }
  }
  return out;
}

bool is_word_char(unsigned char c) { return std::isalnum(c) != 0 || c >= 0x80; }

std::set<std::string> word_set(std::string_view text) {
  std::set<std::string> words;
  std::string current;
  for (unsigned char c : text) {
    if (is_word_char(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (!current.empty()) {
      words.insert(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) words.insert(std::move(current));
  return words;
}

std::string stage_name(Stage s) { return s == Stage::One ? "one" : "two"; }

}  // namespace

std::string exclamation_init(std::size_t count) {
  std::string out;
  for (std::size_t i = 0; i < count; ++i) out += "! ";
  return out;
}

Stage1Result run_stage1(const AttackContext& ctx, const AttackConfig& config) {
  if (!ctx.backend || !ctx.judge) throw RedteamError(ErrorCode::InvalidConfig, "attack needs a backend and a judge");
  if (config.max_iterations == 0) throw RedteamError(ErrorCode::InvalidConfig, "max_iterations must be >= 1");
  const auto started = Clock::now();
  const ModelBackend& backend = *ctx.backend;

  Stage1Result result;
  AttackOutcome& outcome = result.outcome;
  outcome.question_id = ctx.question.id;
  outcome.question = ctx.question.question;
  outcome.templated_question = render_question(ctx.templates, ctx.question);
  outcome.target = render_target(ctx.templates, ctx.question);
  outcome.judge_target = judge_target(ctx.templates, ctx.question);
  outcome.seed = config.seed;

  std::string init = config.init_suffix;
  if (config.warm_start_library) init = warm_start(ctx.question, *config.warm_start_library, init);
  auto incumbent = backend.tokenize(init);
  if (incumbent.empty()) throw RedteamError(ErrorCode::InvalidConfig, "init suffix has no tokens");

  auto prompt = assemble(outcome.templated_question, incumbent, outcome.target, ctx.chat_format, backend);
  auto loop = iterate(Stage::One, prompt, ctx, config, outcome.judge_target, derive_seed(config.seed, "stage1"),
                      outcome.trace);

  ResuffixState& state = result.state;
  state.stage = Stage::One;
  state.incumbent = loop.last_suffix;
  state.active_target = outcome.target;
  state.stage1_success_suffix = loop.harmful_suffix;
  state.stage1_response = loop.harmful_response;

  outcome.stage1_steps = loop.steps;
  outcome.steps_used = loop.steps;
  outcome.stage_reached = Stage::One;
  outcome.success = loop.harmful_suffix.has_value();
  if (outcome.success) {
    outcome.final_suffix = *loop.harmful_suffix;
    outcome.final_response = loop.harmful_response;
    outcome.final_loss = loop.harmful_loss;
  } else {
    outcome.final_suffix = loop.best_suffix;
    outcome.final_loss = loop.best_loss;
  }
  outcome.wall_time = config.record_timing ? ms_since(started) / 1000.0 : 0.0;
  return result;
}

AttackOutcome run_stage2(const AttackContext& ctx, const ResuffixState& state, AttackOutcome outcome,
                         const AttackConfig& config) {
  if (!state.stage1_success_suffix || !state.stage1_response) {
    throw RedteamError(ErrorCode::MissingStage1, "stage 2 needs a successful stage-1 suffix and response");
  }
  const auto started = Clock::now();
  const ModelBackend& backend = *ctx.backend;

  const std::string new_target = truncate_response(*state.stage1_response, config.stage2_target_budget, backend);
  if (new_target.empty()) throw RedteamError(ErrorCode::MissingStage1, "stage-1 response is empty");
  auto prompt = assemble(outcome.templated_question, *state.stage1_success_suffix, new_target, ctx.chat_format,
                         backend);
  auto loop = iterate(Stage::Two, prompt, ctx, config, outcome.judge_target, derive_seed(config.seed, "stage2"),
                      outcome.trace);

  outcome.stage_reached = Stage::Two;
  outcome.stage2_steps = loop.steps;
  outcome.steps_used = outcome.stage1_steps + loop.steps;
  outcome.success = true;
  if (loop.harmful_suffix) {
    outcome.final_suffix = *loop.harmful_suffix;
    outcome.final_response = loop.harmful_response;
    outcome.final_loss = loop.harmful_loss;
  } else {
    // Stage 2 never re-confirmed; x^N is still a judged-harmful suffix.
    outcome.final_suffix = *state.stage1_success_suffix;
    outcome.final_response = state.stage1_response;
  }
  if (config.record_timing) outcome.wall_time += ms_since(started) / 1000.0;
  return outcome;
}

AttackOutcome run_attack(const AttackContext& ctx, const AttackConfig& config) {
  auto stage1 = run_stage1(ctx, config);
  if (!config.stage2_enabled || !stage1.outcome.success) return std::move(stage1.outcome);
  return run_stage2(ctx, stage1.state, std::move(stage1.outcome), config);
}

std::string truncate_response(const std::string& response, std::size_t budget, const ModelBackend& backend) {
  auto ids = backend.tokenize(response).ids;
  if (ids.size() > budget) ids.resize(budget);
  return backend.detokenize(ids);
}

std::vector<LibraryEntry> load_suffix_library(const std::filesystem::path& path) {
  std::vector<LibraryEntry> entries;
  std::ifstream in(path);
  if (!in) {
    log::warn("suffix library " + path.string() + " not readable; using the configured init suffix");
    return entries;
  }
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = json::parse(line);
      LibraryEntry e;
      e.question_id = j.value("question_id", "");
      e.question_text = j.at("question_text").get<std::string>();
      e.suffix_text = j.at("suffix_text").get<std::string>();
      e.source_model = j.value("source_model", "");
      e.success = j.value("success", false);
      e.created_at = j.value("created_at", "");
      entries.push_back(std::move(e));
    } catch (const json::exception& e) {
      log::warn(path.string() + ":" + std::to_string(line_no) + ": skipping library record: " + e.what());
    }
  }
  return entries;
}

void append_library_entry(std::ostream& out, const LibraryEntry& entry) {
  json j = {{"question_id", entry.question_id}, {"question_text", entry.question_text},
            {"suffix_text", entry.suffix_text},  {"source_model", entry.source_model},
            {"success", entry.success},          {"created_at", entry.created_at}};
  out << j.dump() << '\n';
}

double question_similarity(std::string_view a, std::string_view b) {
  auto wa = word_set(a);
  auto wb = word_set(b);
  if (wa.empty() && wb.empty()) return 0.0;
  std::size_t shared = 0;
  for (const auto& w : wa) shared += wb.count(w);
  return static_cast<double>(shared) / static_cast<double>(wa.size() + wb.size() - shared);
}

std::string warm_start(const QuestionRecord& question, const std::vector<LibraryEntry>& library,
                       const std::string& fallback) {
  const LibraryEntry* best = nullptr;
  double best_score = -1.0;
  for (const auto& entry : library) {
    if (!entry.success) continue;
    double score = question_similarity(question.question, entry.question_text);
    // Later (more recent) entries win ties.
    if (!best || score > best_score || (score == best_score && entry.created_at >= best->created_at)) {
      best = &entry;
      best_score = score;
    }
  }
  return best ? best->suffix_text : fallback;
}

std::string warm_start(const QuestionRecord& question, const std::filesystem::path& library,
                       const std::string& fallback) {
  return warm_start(question, load_suffix_library(library), fallback);
}

TokenSeq prefix_augment(const TokenSeq& suffix, std::size_t n, const ModelBackend& backend) {
  if (n == 0) return suffix;
  return backend.tokenize(exclamation_init(n) + suffix.text);
}

json trace_to_json(const IterationTrace& t) {
  return json{{"stage", t.stage},
              {"step", t.step},
              {"loss", t.loss},
              {"best_loss", t.best_loss},
              {"incumbent_loss", t.incumbent_loss},
              {"top_p_losses", t.top_p_losses},
              {"judged", t.judged},
              {"chosen_index", t.chosen_index},
              {"rule_fired", std::string(to_string(t.rule_fired))},
              {"chosen_harmful", t.chosen_harmful},
              {"suffix_text", t.suffix_text},
              {"candidates", t.candidates},
              {"coordinates", t.coordinates},
              {"warnings", t.warnings},
              {"seed", t.seed},
              {"elapsed_ms", t.elapsed_ms}};
}

IterationTrace trace_from_json(const json& j) {
  IterationTrace t;
  t.stage = j.at("stage").get<int>();
  t.step = j.at("step").get<std::size_t>();
  t.loss = j.at("loss").get<double>();
  t.best_loss = j.at("best_loss").get<double>();
  t.incumbent_loss = j.value("incumbent_loss", 0.0);
  t.top_p_losses = j.value("top_p_losses", std::vector<double>{});
  t.judged = j.value("judged", std::vector<bool>{});
  t.chosen_index = j.at("chosen_index").get<std::size_t>();
  t.rule_fired = j.at("rule_fired").get<std::string>() == "harmful_min_loss" ? SelectionRule::HarmfulMinLoss
                                                                              : SelectionRule::FallbackMinLoss;
  t.chosen_harmful = j.value("chosen_harmful", false);
  t.suffix_text = j.at("suffix_text").get<std::string>();
  t.candidates = j.value("candidates", std::size_t{0});
  t.coordinates = j.value("coordinates", std::size_t{1});
  t.warnings = j.value("warnings", std::vector<std::string>{});
  t.seed = j.value("seed", std::uint64_t{0});
  t.elapsed_ms = j.value("elapsed_ms", 0.0);
  return t;
}

void write_trace(std::ostream& out, const std::vector<IterationTrace>& trace) {
  for (const auto& t : trace) out << trace_to_json(t).dump() << '\n';
}

std::vector<IterationTrace> read_trace(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw RedteamError(ErrorCode::Io, "cannot open " + path.string());
  std::vector<IterationTrace> trace;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      trace.push_back(trace_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw RedteamError(ErrorCode::MalformedRecord, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return trace;
}

json outcome_to_json(const AttackOutcome& o) {
  json j = {{"question_id", o.question_id},
            {"question", o.question},
            {"templated_question", o.templated_question},
            {"target", o.target},
            {"judge_target", o.judge_target},
            {"final_suffix", o.final_suffix.text},
            {"final_suffix_ids", o.final_suffix.ids},
            {"success", o.success},
            {"steps_used", o.steps_used},
            {"stage1_steps", o.stage1_steps},
            {"stage2_steps", o.stage2_steps},
            {"stage_reached", stage_name(o.stage_reached)},
            {"final_loss", o.final_loss},
            {"trace_path", o.trace_path},
            {"wall_time", o.wall_time},
            {"seed", o.seed}};
  if (!o.error.empty()) j["error"] = o.error;
  j["final_response"] = o.final_response ? json(*o.final_response) : json(nullptr);
  return j;
}

AttackOutcome outcome_from_json(const json& j) {
  AttackOutcome o;
  o.question_id = j.at("question_id").get<std::string>();
  o.question = j.value("question", "");
  o.templated_question = j.value("templated_question", "");
  o.target = j.value("target", "");
  o.judge_target = j.value("judge_target", "");
  o.final_suffix.text = j.at("final_suffix").get<std::string>();
  o.final_suffix.ids = j.value("final_suffix_ids", std::vector<TokenId>{});
  o.success = j.at("success").get<bool>();
  o.steps_used = j.at("steps_used").get<std::size_t>();
  o.stage1_steps = j.value("stage1_steps", o.steps_used);
  o.stage2_steps = j.value("stage2_steps", std::size_t{0});
  o.stage_reached = j.value("stage_reached", "one") == "two" ? Stage::Two : Stage::One;
  o.final_loss = j.value("final_loss", 0.0);
  o.trace_path = j.value("trace_path", "");
  o.wall_time = j.value("wall_time", 0.0);
  o.seed = j.value("seed", std::uint64_t{0});
  o.error = j.value("error", "");
  if (j.contains("final_response") && j["final_response"].is_string()) {
    o.final_response = j["final_response"].get<std::string>();
  }
  return o;
}

}  // namespace redteam
