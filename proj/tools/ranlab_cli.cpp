#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "ranlab/caption_attack.hpp"
#include "ranlab/errors.hpp"
#include "ranlab/experiment.hpp"
#include "ranlab/io.hpp"
#include "ranlab/parallel.hpp"
#include "ranlab/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ranlab;

namespace {

struct Context {
  ExperimentConfig cfg;
  fs::path root;
  std::string hash;
  std::size_t jobs = 1;
  bool force = false;
  std::vector<double> gamma_filter;
  std::mutex mu;

  void log(const std::string& msg) {
    std::lock_guard lock(mu);
    std::cout << msg << std::endl;
  }
  std::string rel(const fs::path& p) const { return fs::relative(p, root).generic_string(); }
};

fs::path sidecar_of(const fs::path& p) { return fs::path(p.string() + ".json"); }

// Artifact exists, belongs to this config and matches its recorded checksum.
// A sidecar from another config is an error rather than something to overwrite.
bool up_to_date(Context& ctx, const fs::path& p) {
  const fs::path side = sidecar_of(p);
  if (!fs::exists(p) || !fs::exists(side)) return false;
  json meta;
  try {
    meta = json::parse(io::read_text(side));
  } catch (const json::exception&) {
    return false;
  }
  if (meta.value("config_hash", "") != ctx.hash)
    throw ConfigError(ctx.rel(p) + " was produced by config " + meta.value("config_hash", "?") +
                      ", not " + ctx.hash);
  return meta.value("checksum", "") == io::sha256_hex(io::read_file(p));
}

void commit(Context& ctx, const fs::path& p, std::string_view bytes, json extra = json::object()) {
  io::atomic_write(p, bytes);
  extra["config_hash"] = ctx.hash;
  extra["artifact"] = ctx.rel(p);
  extra["checksum"] = io::sha256_hex(bytes);
  io::atomic_write(sidecar_of(p), extra.dump(2) + "\n");
}

void commit(Context& ctx, const fs::path& p, const std::vector<std::uint8_t>& bytes, json extra = json::object()) {
  commit(ctx, p, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), std::move(extra));
}

json load_json(const fs::path& p) { return json::parse(io::read_text(p)); }

std::vector<Cell> selected_cells(const Context& ctx) {
  std::vector<Cell> out;
  for (const auto& c : grid_cells(ctx.cfg)) {
    if (!ctx.gamma_filter.empty() &&
        std::find(ctx.gamma_filter.begin(), ctx.gamma_filter.end(), c.gamma) == ctx.gamma_filter.end())
      continue;
    out.push_back(c);
  }
  return out;
}

// Distinct artifacts: gamma-zero cells of all kinds collapse into one.
std::vector<Cell> selected_units(const Context& ctx) {
  std::vector<Cell> out;
  std::set<std::string> seen;
  for (const auto& c : selected_cells(ctx))
    if (seen.insert(c.name()).second) out.push_back(c);
  return out;
}

fs::path corpus_path(const Context& ctx, const Cell& c) { return ctx.root / "corpora" / (c.name() + ".rlc"); }
fs::path encoder_path(const Context& ctx, const Cell& c) { return ctx.root / "encoders" / (c.name() + ".ckpt"); }
fs::path head_path(const Context& ctx, const Cell& c, TuneMode m) {
  return ctx.root / "heads" / (c.name() + "-" + std::string(tune_mode_name(m)) + ".json");
}
fs::path eval_path(const Context& ctx, const Cell& c, TuneMode m) {
  return ctx.root / "eval" / (c.name() + "-" + std::string(tune_mode_name(m)) + ".json");
}

void require_artifact(Context& ctx, const fs::path& p, const Cell& c, const char* producer) {
  if (!up_to_date(ctx, p))
    throw ConfigError("missing or stale " + ctx.rel(p) + " for cell " + c.name() + "; run `ranlab " + producer +
                      "` first");
}

void write_config(Context& ctx) {
  const fs::path p = ctx.root / "config.toml";
  const std::string text = ctx.cfg.to_toml();
  if (!fs::exists(p) || io::read_text(p) != text) io::atomic_write(p, text);
}

json pretrain_log_json(const PretrainLog& log) {
  return {{"epoch_loss", log.epoch_loss}, {"initial_loss", log.initial_loss}, {"matched_cosine", log.matched_cosine}};
}

DualEncoderParams ensure_surrogate(Context& ctx, std::uint64_t seed) {
  const fs::path p = ctx.root / "surrogate" / ("s" + std::to_string(seed) + ".ckpt");
  if (up_to_date(ctx, p)) return read_checkpoint(p);
  ctx.log("train surrogate/s" + std::to_string(seed) + ".ckpt");
  const PretrainResult r = train_surrogate(ctx.cfg, upstream_corpus(ctx.cfg, seed), seed);
  commit(ctx, p, serialize_checkpoint(r.params), {{"seed", seed}, {"log", pretrain_log_json(r.log)}});
  return r.params;
}

std::vector<std::uint64_t> selected_seeds(const Context& ctx) {
  std::set<std::uint64_t> s;
  for (const auto& c : selected_cells(ctx)) s.insert(c.seed);
  return {s.begin(), s.end()};
}

void cmd_craft(Context& ctx) {
  const auto units = selected_units(ctx);
  std::set<std::uint64_t> need_surrogate;
  for (const auto& c : units)
    if (c.kind == NoiseKind::ImageAdv && c.gamma > 0.0 && (ctx.force || !up_to_date(ctx, corpus_path(ctx, c))))
      need_surrogate.insert(c.seed);
  const std::vector<std::uint64_t> seeds(need_surrogate.begin(), need_surrogate.end());
  std::map<std::uint64_t, DualEncoderParams> surrogates;
  std::vector<DualEncoderParams> trained(seeds.size());
  parallel_for(seeds.size(), ctx.jobs, [&](std::size_t i) { trained[i] = ensure_surrogate(ctx, seeds[i]); });
  for (std::size_t i = 0; i < seeds.size(); ++i) surrogates.emplace(seeds[i], std::move(trained[i]));

  parallel_for(units.size(), ctx.jobs, [&](std::size_t i) {
    const Cell& c = units[i];
    const fs::path p = corpus_path(ctx, c);
    if (!ctx.force && up_to_date(ctx, p)) {
      ctx.log("skip " + ctx.rel(p) + " (checksum ok)");
      return;
    }
    const Corpus clean = upstream_corpus(ctx.cfg, c.seed);
    const bool image = c.kind == NoiseKind::ImageAdv && c.gamma > 0.0;
    const Corpus targets = image ? target_corpus(ctx.cfg, c.seed) : Corpus{};
    const CraftResult r =
        craft_cell(ctx.cfg, c, clean, image ? &surrogates.at(c.seed) : nullptr, image ? &targets : nullptr);
    commit(ctx, p, serialize_corpus(r.noisy), {{"cell", c.name()}, {"manifest", r.manifest.to_json()}});
    ctx.log("wrote " + ctx.rel(p) + " (" + std::to_string(r.manifest.perturbed_indices.size()) + "/" +
            std::to_string(r.noisy.size()) + " perturbed)");
  });
}

void cmd_pretrain(Context& ctx) {
  const auto units = selected_units(ctx);
  for (const auto& c : units) require_artifact(ctx, corpus_path(ctx, c), c, "craft");
  parallel_for(units.size(), ctx.jobs, [&](std::size_t i) {
    const Cell& c = units[i];
    const fs::path p = encoder_path(ctx, c);
    if (!ctx.force && up_to_date(ctx, p)) {
      ctx.log("skip " + ctx.rel(p) + " (checksum ok)");
      return;
    }
    const PretrainResult r = pretrain_cell(ctx.cfg, c, read_corpus(corpus_path(ctx, c)));
    commit(ctx, p, serialize_checkpoint(r.params), {{"cell", c.name()}, {"log", pretrain_log_json(r.log)}});
    char msg[64];
    std::snprintf(msg, sizeof msg, " (loss %.4f -> %.4f)", r.log.initial_loss,
                  r.log.epoch_loss.empty() ? r.log.initial_loss : r.log.epoch_loss.back());
    ctx.log("wrote " + ctx.rel(p) + msg);
  });
}

TaskFeatures features_for(Context& ctx, const Cell& c) {
  return task_features(read_checkpoint(encoder_path(ctx, c)), task_splits(ctx.cfg, c.seed));
}

void cmd_finetune(Context& ctx) {
  const auto units = selected_units(ctx);
  for (const auto& c : units) require_artifact(ctx, encoder_path(ctx, c), c, "pretrain");
  parallel_for(units.size(), ctx.jobs, [&](std::size_t i) {
    const Cell& c = units[i];
    bool pending = ctx.force;
    for (TuneMode m : ctx.cfg.modes) pending = pending || !up_to_date(ctx, head_path(ctx, c, m));
    if (!pending) {
      ctx.log("skip heads for " + c.name() + " (checksum ok)");
      return;
    }
    const TaskFeatures f = features_for(ctx, c);
    for (TuneMode m : ctx.cfg.modes) {
      const fs::path p = head_path(ctx, c, m);
      if (!ctx.force && up_to_date(ctx, p)) continue;
      const auto start = std::chrono::steady_clock::now();
      const FineTuneResult r = finetune_cell(ctx.cfg, c, m, f);
      const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      json doc = head_to_json(r.head);
      doc["wall_time_s"] = t;
      doc["log"] = json::array();
      for (const auto& e : r.log) doc["log"].push_back(e.to_json());
      commit(ctx, p, doc.dump() + "\n", {{"cell", c.name()}, {"mode", tune_mode_name(m)}});
      ctx.log("wrote " + ctx.rel(p));
    }
  });
}

json row_json(const ResultRow& r) {
  return {{"gamma", r.gamma},   {"mode", tune_mode_name(r.mode)}, {"split", r.split},
          {"seed", r.seed},     {"macro_auc", r.macro_auc},      {"acc", r.acc},
          {"wall_time_s", r.wall_time_s}};
}

void cmd_eval(Context& ctx) {
  const auto units = selected_units(ctx);
  for (const auto& c : units)
    for (TuneMode m : ctx.cfg.modes) require_artifact(ctx, head_path(ctx, c, m), c, "finetune");
  parallel_for(units.size(), ctx.jobs, [&](std::size_t i) {
    const Cell& c = units[i];
    std::optional<TaskFeatures> f;
    for (TuneMode m : ctx.cfg.modes) {
      const fs::path p = eval_path(ctx, c, m);
      if (!ctx.force && up_to_date(ctx, p)) {
        ctx.log("skip " + ctx.rel(p) + " (checksum ok)");
        continue;
      }
      if (!f) f = features_for(ctx, c);
      const json head = load_json(head_path(ctx, c, m));
      json rows = json::array();
      for (const auto& r : evaluate_head(c, m, head_from_json(head), *f, head.value("wall_time_s", 0.0)))
        rows.push_back(row_json(r));
      commit(ctx, p, json{{"rows", rows}}.dump(2) + "\n", {{"cell", c.name()}, {"mode", tune_mode_name(m)}});
      ctx.log("wrote " + ctx.rel(p));
    }
  });
}

int cmd_report(Context& ctx) {
  const fs::path dir = ctx.root / "eval";
  std::vector<fs::path> files;
  if (fs::exists(dir))
    for (const auto& e : fs::directory_iterator(dir))
      // sidecars are "<artifact>.json.json"
      if (e.path().extension() == ".json" && e.path().stem().extension() != ".json")
        files.push_back(e.path());
  if (files.empty()) {
    std::cout << "nothing to report" << std::endl;
    return 0;
  }
  std::set<std::string> hashes;
  for (const auto& f : files) {
    const fs::path side = sidecar_of(f);
    hashes.insert(fs::exists(side) ? load_json(side).value("config_hash", "?") : "?");
  }
  if (hashes.size() != 1 || *hashes.begin() != ctx.hash) {
    std::string list;
    for (const auto& h : hashes) list += (list.empty() ? "" : ", ") + h;
    throw ConfigError("refusing to report: eval artifacts carry config hashes {" + list + "}, expected " + ctx.hash);
  }

  std::vector<ResultRow> rows;
  std::size_t missing = 0;
  const auto seeds = ctx.cfg.seeds();
  std::map<std::string, json> cache;
  for (double g : ctx.cfg.gammas) {
    if (!ctx.gamma_filter.empty() &&
        std::find(ctx.gamma_filter.begin(), ctx.gamma_filter.end(), g) == ctx.gamma_filter.end())
      continue;
    for (NoiseKind k : ctx.cfg.kinds)
      for (TuneMode m : ctx.cfg.modes)
        for (const char* split : {"id", "ood"})
          for (std::uint64_t s : seeds) {
            const Cell c{g, k, s};
            const fs::path p = eval_path(ctx, c, m);
            if (!up_to_date(ctx, p)) {
              missing += std::string(split) == "id";
              continue;
            }
            auto it = cache.find(p.string());
            if (it == cache.end()) it = cache.emplace(p.string(), load_json(p)).first;
            for (const auto& r : it->second.at("rows"))
              if (r.at("split") == split)
                rows.push_back({r.at("gamma").get<double>(), k, m, split, r.at("seed").get<std::uint64_t>(),
                                r.at("macro_auc").get<double>(), r.at("acc").get<double>(),
                                r.at("wall_time_s").get<double>()});
          }
  }
  const fs::path csv = ctx.root / "results.csv";
  io::atomic_write(csv, results_csv(rows));
  const json trends = trend_summary(rows);
  io::atomic_write(ctx.root / "trends.json", trends.dump(2) + "\n");

  std::printf("config %s: %zu rows -> %s\n", ctx.hash.c_str(), rows.size(), csv.string().c_str());
  if (missing) std::printf("warning: %zu (cell, mode) evaluations missing\n", missing);
  std::printf("%-6s %-8s %-4s %-4s %8s %8s %8s\n", "gamma", "kind", "mode", "split", "acc", "sd", "auc");
  for (const auto& m : trends["means"])
    std::printf("%-6s %-8s %-4s %-4s %8.4f %8.4f %8.4f\n", format_scalar(m["gamma"].get<double>()).c_str(),
                m["kind"].get<std::string>().c_str(), m["mode"].get<std::string>().c_str(),
                m["split"].get<std::string>().c_str(), m["acc_mean"].get<double>(), m["acc_sd"].get<double>(),
                m["auc_mean"].get<double>());
  return 0;
}

json report_json(const AttackReport& r) {
  json rows = json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"id", row.id}, {"target_id", row.target_id}, {"clean_similarity", row.clean_similarity},
                    {"adv_similarity", row.adv_similarity}});
  return {{"mean_clean", r.mean_clean}, {"mean_adv", r.mean_adv}, {"rows", rows}};
}

void cmd_attack(Context& ctx) {
  for (std::uint64_t s : selected_seeds(ctx)) {
    const fs::path p = ctx.root / "attack" / ("s" + std::to_string(s) + ".json");
    if (!ctx.force && up_to_date(ctx, p)) {
      ctx.log("skip " + ctx.rel(p) + " (checksum ok)");
      continue;
    }
    const DualEncoderParams enc = ensure_surrogate(ctx, s);
    const AttackReport r = attack_cell(ctx.cfg, upstream_corpus(ctx.cfg, s), target_corpus(ctx.cfg, s), enc, s, ctx.jobs);
    commit(ctx, p, report_json(r).dump(2) + "\n", {{"seed", s}});
    char msg[96];
    std::snprintf(msg, sizeof msg, " (similarity to target: clean %.4f, adversarial %.4f)", r.mean_clean, r.mean_adv);
    ctx.log("wrote " + ctx.rel(p) + msg);
  }
}

json perturbed_json(const std::string& id, const PerturbedCaption& p) {
  json edits = json::array();
  for (const auto& e : p.edits)
    edits.push_back({{"position", e.position}, {"original", e.original}, {"replacement", e.replacement},
                     {"tag", objective_name(e.tag)}});
  json out = {{"id", id},         {"original", p.original},         {"perturbed", p.perturbed},
              {"edits", edits},   {"objective", objective_name(p.objective)}, {"no_hit", p.no_hit},
              {"fallback", p.fallback}};
  if (p.fallback) out["fallback_reason"] = p.fallback_reason;
  return out;
}

void cmd_caption_attack(Context& ctx, bool use_llm) {
  if (use_llm && ctx.cfg.llm.base_url.empty()) throw ConfigError("llm.base_url: required with --llm");
  for (std::uint64_t s : selected_seeds(ctx)) {
    const fs::path p =
        ctx.root / "caption-attack" / ("s" + std::to_string(s) + (use_llm ? "-llm" : "") + ".json");
    if (!ctx.force && up_to_date(ctx, p)) {
      ctx.log("skip " + ctx.rel(p) + " (checksum ok)");
      continue;
    }
    const Corpus clean = upstream_corpus(ctx.cfg, s);
    const std::size_t n = std::min(ctx.cfg.attack_records, clean.size());
    const Vocabulary& vocab = Vocabulary::builtin();
    std::vector<std::string> ids, captions;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& r = clean.records[i];
      ids.push_back(r.image.id);
      captions.push_back(r.caption.raw_text.empty() ? vocab.detokenize(r.caption.tokens) : r.caption.raw_text);
    }
    std::vector<PerturbedCaption> out;
    const std::uint64_t seed = mix_seed(s, 0xca9);
    if (use_llm) {
      const CaptionObjective o = ctx.cfg.objectives.front();
      out = perturb_llm_all(captions, ctx.cfg.llm, default_prompt_template(o), o, SwapDictionary::builtin(), seed);
    } else {
      for (std::size_t i = 0; i < n; ++i)
        out.push_back(perturb_combined(captions[i], SwapDictionary::builtin(), ctx.cfg.objectives,
                                       mix_seed(seed, i), ctx.cfg.max_edits));
    }
    json doc = json::array();
    std::size_t hits = 0, fallbacks = 0;
    for (std::size_t i = 0; i < n; ++i) {
      doc.push_back(perturbed_json(ids[i], out[i]));
      hits += !out[i].no_hit;
      fallbacks += out[i].fallback;
    }
    commit(ctx, p, json{{"captions", doc}}.dump(2) + "\n", {{"seed", s}, {"llm", use_llm}});
    ctx.log("wrote " + ctx.rel(p) + " (" + std::to_string(hits) + "/" + std::to_string(n) + " changed" +
            (use_llm ? ", " + std::to_string(fallbacks) + " fell back to the dictionary" : "") + ")");
  }
}

void cmd_zeroshot(Context& ctx) {
  for (std::uint64_t s : selected_seeds(ctx)) {
    const fs::path p = ctx.root / "zeroshot" / ("s" + std::to_string(s) + ".json");
    if (!ctx.force && up_to_date(ctx, p)) {
      ctx.log("skip " + ctx.rel(p) + " (checksum ok)");
      continue;
    }
    const DualEncoderParams enc = ensure_surrogate(ctx, s);
    const ZeroShotReport r = zero_shot_evaluate(enc, zeroshot_corpus(ctx.cfg, s), ctx.cfg.zeroshot);
    commit(ctx, p, r.to_json().dump(2) + "\n", {{"seed", s}});
    char msg[96];
    std::snprintf(msg, sizeof msg, " (accuracy %.4f over %zu pairs, z = %.2f)", r.accuracy, r.pairs, r.z_score);
    ctx.log("wrote " + ctx.rel(p) + msg);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ranlab: noisy pre-training experiments on synthetic medical image-caption corpora"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
  bool force = false, use_llm = false;
  std::vector<std::string> overrides;
  std::vector<double> gammas;

  app.add_option("--config", config_path, "TOML config (defaults are built in)")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Base seed; replicate r uses seed + r");
  app.add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--force", force, "Recompute artifacts that are already up to date");
  app.add_option("--out", out_dir, "Output directory (overrides output_dir)");
  app.add_option("--set", overrides, "Override a config key, e.g. --set finetune.alpha=0.02");
  app.add_option("--gamma", gammas, "Restrict to these noise ratios");
  app.fallthrough();

  auto* craft = app.add_subcommand("craft", "Craft noisy upstream corpora for every cell");
  auto* pretrain = app.add_subcommand("pretrain", "Pre-train an encoder per crafted corpus");
  auto* attack = app.add_subcommand("attack", "Measure image-attack efficacy on the clean surrogate");
  auto* caption = app.add_subcommand("caption-attack", "Perturb captions with the dictionary or an LLM");
  caption->add_flag("--llm", use_llm, "Use the configured chat endpoint (token from llm.auth_env)");
  auto* finetune = app.add_subcommand("finetune", "Fine-tune lp/mlp/ran heads on the downstream task");
  auto* eval = app.add_subcommand("eval", "Evaluate heads on ID and OOD test splits");
  auto* zeroshot = app.add_subcommand("zeroshot", "Zero-shot prompt classification with the clean encoder");
  auto* report = app.add_subcommand("report", "Collect evaluations into results.csv and trends.json");
  auto* pipeline = app.add_subcommand("pipeline", "craft, pretrain, finetune, eval and report in order");
  auto* show = app.add_subcommand("config", "Print the effective config and its hash");

  CLI11_PARSE(app, argc, argv);

  try {
    Context ctx;
    if (!config_path.empty()) ctx.cfg = ExperimentConfig::load(config_path);
    if (seed) overrides.push_back("seed=" + std::to_string(*seed));
    ctx.cfg.set_all(overrides);
    if (!out_dir.empty()) ctx.cfg.output_dir = out_dir;
    ctx.cfg.validate();
    for (double g : gammas)
      if (std::find(ctx.cfg.gammas.begin(), ctx.cfg.gammas.end(), g) == ctx.cfg.gammas.end())
        throw ConfigError("--gamma " + format_scalar(g) + " is not in the config grid");
    ctx.hash = ctx.cfg.hash();
    ctx.root = fs::path(ctx.cfg.output_dir) / ctx.hash;
    ctx.jobs = jobs;
    ctx.force = force;
    ctx.gamma_filter = gammas;

    if (show->parsed()) {
      std::cout << "# config hash " << ctx.hash << "\n" << ctx.cfg.to_toml();
      return 0;
    }
    if (report->parsed()) return cmd_report(ctx);

    write_config(ctx);
    if (craft->parsed() || pipeline->parsed()) cmd_craft(ctx);
    if (pretrain->parsed() || pipeline->parsed()) cmd_pretrain(ctx);
    if (finetune->parsed() || pipeline->parsed()) cmd_finetune(ctx);
    if (eval->parsed() || pipeline->parsed()) cmd_eval(ctx);
    if (pipeline->parsed()) return cmd_report(ctx);
    if (attack->parsed()) cmd_attack(ctx);
    if (caption->parsed()) cmd_caption_attack(ctx, use_llm);
    if (zeroshot->parsed()) cmd_zeroshot(ctx);
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
}
