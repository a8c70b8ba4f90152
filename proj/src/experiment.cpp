#include "ranlab/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <mutex>
#include <set>
#include <sstream>

#include "ranlab/errors.hpp"
#include "ranlab/io.hpp"
#include "ranlab/parallel.hpp"
#include "ranlab/rng.hpp"

namespace ranlab {

SynthConfig ExperimentConfig::default_upstream() {
  SynthConfig s;
  s.records = 200;
  s.classes = kNumSyntheticClasses;
  s.pixel_noise = 0.02;
  return s;
}

SynthConfig ExperimentConfig::default_task() {
  SynthConfig s;
  s.records = 160;
  s.classes = 4;
  return s;
}

std::vector<std::uint64_t> ExperimentConfig::seeds() const {
  std::vector<std::uint64_t> out;
  for (std::size_t r = 0; r < replicates; ++r) out.push_back(seed + r);
  return out;
}

namespace {

using Scalar = ConfigValue::Scalar;

// Walks every config field in one place so reading and writing cannot drift.
struct TableWriter {
  ConfigTable& t;

  void field(const std::string& k, double& v) { t[k] = ConfigValue{Scalar{v}}; }
  void field(const std::string& k, std::size_t& v) { t[k] = ConfigValue{Scalar{static_cast<std::int64_t>(v)}}; }
  void field(const std::string& k, bool& v) { t[k] = ConfigValue{Scalar{v}}; }
  void field(const std::string& k, std::string& v) { t[k] = ConfigValue{Scalar{v}}; }
  void field(const std::string& k, std::vector<double>& v) {
    std::vector<Scalar> items(v.begin(), v.end());
    t[k] = ConfigValue{items};
  }
  void field(const std::string& k, std::vector<std::string>& v) {
    std::vector<Scalar> items(v.begin(), v.end());
    t[k] = ConfigValue{items};
  }
  void field(const std::string& k, int& v) { t[k] = ConfigValue{Scalar{static_cast<std::int64_t>(v)}}; }

  template <typename E, typename NameFn, typename ParseFn>
  void enum_list(const std::string& k, std::vector<E>& v, NameFn name, ParseFn) {
    std::vector<std::string> names;
    for (E e : v) names.emplace_back(name(e));
    field(k, names);
  }
  template <typename E, typename NameFn, typename ParseFn>
  void enumeration(const std::string& k, E& v, NameFn name, ParseFn) {
    std::string s(name(v));
    field(k, s);
  }
};

struct TableReader {
  ConfigReader& r;

  template <typename T>
  void field(const std::string& k, T& v) {
    r.read(k, v);
  }
  void field(const std::string& k, int& v) {
    std::size_t u = v < 0 ? 0 : static_cast<std::size_t>(v);
    r.read(k, u);
    v = static_cast<int>(u);
  }

  template <typename E, typename NameFn, typename ParseFn>
  void enum_list(const std::string& k, std::vector<E>& v, NameFn, ParseFn parse) {
    std::vector<std::string> names;
    bool present = false;
    {
      std::vector<std::string> probe{"\x01"};
      r.read(k, probe);
      present = !(probe.size() == 1 && probe[0] == "\x01");
      names = probe;
    }
    if (!present) return;
    std::vector<E> out;
    for (const auto& n : names) {
      try {
        out.push_back(parse(n));
      } catch (const Error& e) {
        r.error(k, e.what());
        return;
      }
    }
    v = std::move(out);
  }
  template <typename E, typename NameFn, typename ParseFn>
  void enumeration(const std::string& k, E& v, NameFn name, ParseFn parse) {
    std::string s(name(v));
    r.read(k, s);
    try {
      v = parse(s);
    } catch (const Error& e) {
      r.error(k, e.what());
    }
  }
};

std::string_view loss_name(TaskLoss l) { return l == TaskLoss::Binary ? "binary" : "softmax"; }
TaskLoss parse_loss(std::string_view s) {
  if (s == "softmax") return TaskLoss::Softmax;
  if (s == "binary") return TaskLoss::Binary;
  throw ContractViolation("unknown loss '" + std::string(s) + "' (softmax, binary)");
}

template <typename V>
void visit_fields(ExperimentConfig& c, V& v) {
  v.field("seed", c.seed);
  v.field("replicates", c.replicates);
  v.field("gamma", c.gammas);
  v.enum_list("kinds", c.kinds, noise_kind_name, parse_noise_kind);
  v.enum_list("modes", c.modes, tune_mode_name, parse_tune_mode);
  v.field("output_dir", c.output_dir);

  v.field("upstream.records", c.upstream.records);
  v.field("upstream.classes", c.upstream.classes);
  v.field("upstream.height", c.upstream.height);
  v.field("upstream.width", c.upstream.width);
  v.field("upstream.channels", c.upstream.channels);
  v.field("upstream.max_tokens", c.upstream.max_tokens);
  v.field("upstream.pixel_noise", c.upstream.pixel_noise);
  v.field("upstream.domain_shift", c.upstream.domain_shift);

  v.field("task.records", c.task.records);
  v.field("task.classes", c.task.classes);
  v.field("task.ood_records", c.ood_records);
  v.field("task.train_fraction", c.train_fraction);
  v.field("task.pixel_noise", c.task.pixel_noise);
  v.field("task.domain_shift", c.task.domain_shift);

  v.field("encoder.patch", c.encoder.patch);
  v.field("encoder.stage1_channels", c.encoder.stage1_channels);
  v.field("encoder.stage2_channels", c.encoder.stage2_channels);
  v.field("encoder.token_dim", c.encoder.token_dim);
  v.field("encoder.embed_dim", c.encoder.embed_dim);
  v.field("encoder.positional", c.encoder.positional);

  v.field("pretrain.epochs", c.pretrain.epochs);
  v.field("pretrain.batch_size", c.pretrain.batch_size);
  v.field("pretrain.probe_records", c.pretrain.probe_records);
  v.field("pretrain.learning_rate", c.pretrain.optimizer.learning_rate);
  v.field("pretrain.beta1", c.pretrain.optimizer.beta1);
  v.field("pretrain.beta2", c.pretrain.optimizer.beta2);
  v.field("pretrain.weight_decay", c.pretrain.optimizer.weight_decay);
  v.field("pretrain.warmup_steps", c.pretrain.optimizer.warmup_steps);
  v.field("pretrain.cosine_decay", c.pretrain.optimizer.cosine_decay);

  v.field("attack.epsilon", c.attack.epsilon);
  v.field("attack.step_size", c.attack.step_size);
  v.field("attack.iterations", c.attack.iterations);
  v.field("attack.records", c.attack_records);

  v.enum_list("caption.objectives", c.objectives, objective_name, parse_objective);
  v.field("caption.max_edits", c.max_edits);

  v.field("random.rate", c.random_rate);
  v.field("random.pixel_sigma", c.random_pixel_sigma);

  v.field("finetune.alpha", c.finetune.alpha);
  v.field("finetune.beta", c.finetune.beta);
  v.enumeration("finetune.loss", c.finetune.loss, loss_name, parse_loss);
  v.field("finetune.epochs", c.finetune.epochs);
  v.field("finetune.batch_size", c.finetune.batch_size);
  v.field("finetune.hidden", c.finetune.hidden);
  v.field("finetune.learning_rate", c.finetune.optimizer.learning_rate);
  v.field("finetune.beta1", c.finetune.optimizer.beta1);
  v.field("finetune.beta2", c.finetune.optimizer.beta2);
  v.field("finetune.weight_decay", c.finetune.optimizer.weight_decay);
  v.field("finetune.warmup_steps", c.finetune.optimizer.warmup_steps);
  v.field("finetune.cosine_decay", c.finetune.optimizer.cosine_decay);

  v.field("zeroshot.positive", c.zeroshot.positive_template);
  v.field("zeroshot.negative", c.zeroshot.negative_template);
  v.field("zeroshot.labels", c.zeroshot.labels);
  v.field("zeroshot.records", c.zeroshot_records);

  v.field("llm.base_url", c.llm.base_url);
  v.field("llm.path", c.llm.path);
  v.field("llm.model", c.llm.model);
  v.field("llm.auth_header", c.llm.auth_header);
  v.field("llm.auth_env", c.llm.auth_env);
  v.field("llm.auth_prefix", c.llm.auth_prefix);
  v.field("llm.timeout_ms", c.llm.timeout_ms);
  v.field("llm.max_retries", c.llm.max_retries);
  v.field("llm.backoff_ms", c.llm.backoff_ms);
  v.field("llm.fallback", c.llm.fallback);
  v.field("llm.max_in_flight", c.llm.max_in_flight);
}

std::vector<std::string> validation_problems(const ExperimentConfig& c) {
  std::vector<std::string> out;
  const auto check = [&](const std::string& key, auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      out.push_back(key + ": " + e.what());
    }
  };
  if (c.replicates == 0) out.push_back("replicates: must be at least 1");
  if (c.gammas.empty()) out.push_back("gamma: grid is empty");
  for (double g : c.gammas)
    if (!(g >= 0.0 && g <= 1.0)) out.push_back("gamma: " + format_scalar(g) + " outside [0, 1]");
  if (std::set<double>(c.gammas.begin(), c.gammas.end()).size() != c.gammas.size())
    out.push_back("gamma: duplicate entries");
  if (c.kinds.empty()) out.push_back("kinds: list is empty");
  if (std::set<NoiseKind>(c.kinds.begin(), c.kinds.end()).size() != c.kinds.size())
    out.push_back("kinds: duplicate entries");
  if (c.modes.empty()) out.push_back("modes: list is empty");
  if (std::set<TuneMode>(c.modes.begin(), c.modes.end()).size() != c.modes.size())
    out.push_back("modes: duplicate entries");
  check("upstream", [&] { c.upstream.validate(); });
  SynthConfig task = c.task;
  task.height = c.upstream.height;
  task.width = c.upstream.width;
  task.channels = c.upstream.channels;
  task.max_tokens = c.upstream.max_tokens;
  check("task", [&] { task.validate(); });
  if (c.task.classes > kNumSyntheticClasses)
    out.push_back("task.classes: at most " + std::to_string(kNumSyntheticClasses));
  if (!(c.train_fraction > 0.0 && c.train_fraction < 1.0)) out.push_back("task.train_fraction: must be in (0, 1)");
  if (c.ood_records < c.task.classes) out.push_back("task.ood_records: need at least one record per class");
  check("encoder", [&] { encoder_config(c).validate(); });
  if (c.pretrain.epochs == 0) out.push_back("pretrain.epochs: must be positive");
  if (c.pretrain.batch_size < 2) out.push_back("pretrain.batch_size: must be at least 2");
  check("attack", [&] { c.attack.validate(); });
  if (c.attack_records == 0) out.push_back("attack.records: must be positive");
  if (c.objectives.empty()) out.push_back("caption.objectives: list is empty");
  if (c.max_edits == 0) out.push_back("caption.max_edits: must be positive");
  if (!(c.random_rate >= 0.0 && c.random_rate <= 1.0)) out.push_back("random.rate: must be in [0, 1]");
  if (!(c.random_pixel_sigma >= 0.0)) out.push_back("random.pixel_sigma: must be >= 0");
  check("finetune", [&] { c.finetune.validate(); });
  if (c.finetune.epochs == 0) out.push_back("finetune.epochs: must be positive");
  check("zeroshot", [&] { c.zeroshot.validate(); });
  if (c.zeroshot_records == 0) out.push_back("zeroshot.records: must be positive");
  if (c.llm.max_in_flight == 0) out.push_back("llm.max_in_flight: must be positive");
  return out;
}

}  // namespace

void ExperimentConfig::validate() const {
  const auto problems = validation_problems(*this);
  if (problems.empty()) return;
  std::string msg = "invalid configuration (" + std::to_string(problems.size()) + " problem" +
                    (problems.size() == 1 ? "" : "s") + "):";
  for (const auto& p : problems) msg += "\n  " + p;
  throw ConfigError(msg);
}

ConfigTable ExperimentConfig::to_table() const {
  ConfigTable t;
  TableWriter w{t};
  ExperimentConfig copy = *this;
  visit_fields(copy, w);
  return t;
}

ExperimentConfig ExperimentConfig::from_table(const ConfigTable& table) {
  ExperimentConfig c;
  ConfigReader reader(table);
  TableReader r{reader};
  visit_fields(c, r);
  for (const auto& p : validation_problems(c)) {
    const auto colon = p.find(':');
    reader.error(p.substr(0, colon), p.substr(colon + 2));
  }
  reader.finish();
  return c;
}

ExperimentConfig ExperimentConfig::from_toml(std::string_view text) {
  return from_table(parse_config(text));
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  return from_table(load_config(path));
}

std::string ExperimentConfig::hash() const {
  ConfigTable t = to_table();
  t.erase("output_dir");
  return io::sha256_hex(format_config(t)).substr(0, 16);
}

void ExperimentConfig::set(std::string_view assignment) { set_all({std::string(assignment)}); }

void ExperimentConfig::set_all(const std::vector<std::string>& assignments) {
  const auto trim = [](std::string_view s) {
    while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
    while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
    return s;
  };
  ConfigTable t = to_table();
  for (std::string_view a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string_view::npos) throw ConfigError("override '" + std::string(a) + "' is not key=value");
    const std::string key(trim(a.substr(0, eq)));
    if (!t.count(key)) throw ConfigError("override: unknown key '" + key + "'");
    t[key] = parse_config_value(trim(a.substr(eq + 1)));
  }
  *this = from_table(t);
}

std::string Cell::name() const {
  if (gamma == 0.0) return "g0-clean-s" + std::to_string(seed);
  return "g" + format_scalar(gamma) + "-" + std::string(noise_kind_name(kind)) + "-s" + std::to_string(seed);
}

std::vector<Cell> grid_cells(const ExperimentConfig& cfg) {
  std::vector<Cell> out;
  for (double g : cfg.gammas)
    for (NoiseKind k : cfg.kinds)
      for (std::uint64_t s : cfg.seeds()) out.push_back({g, k, s});
  return out;
}

Corpus upstream_corpus(const ExperimentConfig& cfg, std::uint64_t seed) {
  return synth_corpus(cfg.upstream, mix_seed(seed, 0x0b5));
}

Corpus target_corpus(const ExperimentConfig& cfg, std::uint64_t seed) {
  SynthConfig s = cfg.upstream;
  s.domain = Domain::B;
  return synth_corpus(s, mix_seed(seed, 0x7a6));
}

EncoderConfig encoder_config(const ExperimentConfig& cfg) {
  EncoderConfig e = cfg.encoder;
  e.max_tokens = cfg.upstream.max_tokens;
  const CorpusHeader h{cfg.upstream.height, cfg.upstream.width, cfg.upstream.channels, Vocabulary::builtin().size(),
                      cfg.upstream.classes};
  return encoder_config_for(h, e);
}

PretrainResult train_surrogate(const ExperimentConfig& cfg, const Corpus& clean, std::uint64_t seed) {
  return pretrain(clean, encoder_config(cfg), cfg.pretrain, mix_seed(seed, 0x5a6));
}

NoiseSpec noise_spec(const ExperimentConfig& cfg, const Cell& cell) {
  NoiseSpec s;
  s.gamma = cell.gamma;
  s.kind = cell.kind;
  s.seed = mix_seed(cell.seed, 0x401);
  s.attack = cfg.attack;
  s.objectives = cfg.objectives;
  s.random_rate = cfg.random_rate;
  s.random_pixel_sigma = cfg.random_pixel_sigma;
  return s;
}

CraftResult craft_cell(const ExperimentConfig& cfg, const Cell& cell, const Corpus& clean,
                       const DualEncoderParams* surrogate, const Corpus* targets, std::size_t jobs) {
  const NoiseSpec spec = noise_spec(cfg, cell);
  switch (cell.kind) {
    case NoiseKind::ImageAdv: {
      if (cell.gamma == 0.0 && !surrogate) {
        const CaptionAttacker unused(SwapDictionary::builtin(), cfg.objectives, Vocabulary::builtin(),
                                     cfg.upstream.max_tokens, cfg.max_edits);
        NoiseSpec s = spec;
        s.kind = NoiseKind::CaptionAdv;
        CraftResult r = craft(clean, s, unused, jobs);
        r.manifest.spec.kind = NoiseKind::ImageAdv;
        return r;
      }
      RANLAB_REQUIRE(surrogate && targets, "craft: image noise needs a surrogate encoder and targets");
      return craft(clean, spec, ImageAttacker(*surrogate, *targets, cfg.attack), jobs);
    }
    case NoiseKind::CaptionAdv:
      return craft(clean, spec,
                   CaptionAttacker(SwapDictionary::builtin(), cfg.objectives, Vocabulary::builtin(),
                                   cfg.upstream.max_tokens, cfg.max_edits),
                   jobs);
    case NoiseKind::RandomNoise:
      return craft(clean, spec,
                   RandomNoiseAttacker(Vocabulary::builtin(), cfg.random_rate, cfg.random_pixel_sigma,
                                       cfg.upstream.max_tokens),
                   jobs);
  }
  throw ContractViolation("craft: unknown noise kind");
}

PretrainResult pretrain_cell(const ExperimentConfig& cfg, const Cell& cell, const Corpus& noisy) {
  return pretrain(noisy, encoder_config(cfg), cfg.pretrain, mix_seed(cell.seed, 0x9e7));
}

TaskSplits task_splits(const ExperimentConfig& cfg, std::uint64_t seed) {
  SynthConfig id = cfg.task;
  id.height = cfg.upstream.height;
  id.width = cfg.upstream.width;
  id.channels = cfg.upstream.channels;
  id.max_tokens = cfg.upstream.max_tokens;
  id.domain = Domain::A;
  SynthConfig ood = id;
  ood.domain = Domain::B;
  ood.records = cfg.ood_records;
  auto [train, test] = split_corpus(synth_corpus(id, mix_seed(seed, 0x7a5)), cfg.train_fraction, mix_seed(seed, 0x5b2));
  return {std::move(train), std::move(test), synth_corpus(ood, mix_seed(seed, 0x00d))};
}

namespace {

Array normalized_embeddings(const DualEncoderParams& encoder, const Corpus& corpus) {
  Array e = encode_images(encoder, corpus);
  for (std::size_t i = 0; i < e.rows(); ++i) {
    const double r = l2_norm(e.row(i));
    if (!(r > 0.0)) throw DegenerateEmbedding("record '" + corpus.records[i].image.id + "' embeds to zero");
    for (double& v : e.row(i)) v /= r;
  }
  return e;
}

}  // namespace

TaskFeatures task_features(const DualEncoderParams& encoder, const TaskSplits& splits) {
  TaskFeatures f;
  f.train.features = normalized_embeddings(encoder, splits.train);
  f.train.labels = splits.train.labels();
  f.id_test = normalized_embeddings(encoder, splits.id_test);
  f.id_labels = splits.id_test.labels();
  f.ood_test = normalized_embeddings(encoder, splits.ood_test);
  f.ood_labels = splits.ood_test.labels();
  return f;
}

FineTuneResult finetune_cell(const ExperimentConfig& cfg, const Cell& cell, TuneMode mode,
                             const TaskFeatures& features) {
  RanConfig rc = cfg.finetune;
  rc.mode = mode;
  rc.seed = mix_seed(cell.seed, 0xf7);
  FeatureBatch train = features.train;
  if (rc.loss == TaskLoss::Binary) train.targets = one_hot(train.labels, cfg.task.classes);
  return fine_tune(train, cfg.task.classes, rc);
}

std::vector<ResultRow> evaluate_head(const Cell& cell, TuneMode mode, const TransformHead& head,
                                     const TaskFeatures& features, double wall_time_s) {
  std::vector<ResultRow> rows;
  const auto eval = [&](const char* split, const Array& x, const std::vector<int>& labels) {
    const auto start = std::chrono::steady_clock::now();
    const MetricReport m = macro_metrics(softmax_scores(head_logits(head, x)), one_hot(labels, head.classes()));
    const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    rows.push_back({cell.gamma, cell.kind, mode, split, cell.seed, m.macro_auc, m.accuracy, wall_time_s + t});
  };
  eval("id", features.id_test, features.id_labels);
  eval("ood", features.ood_test, features.ood_labels);
  return rows;
}

std::vector<ResultRow> run_matrix(const ExperimentConfig& cfg, std::size_t jobs) {
  cfg.validate();
  const auto seeds = cfg.seeds();
  const auto cells = grid_cells(cfg);
  const bool image_noise = std::any_of(cells.begin(), cells.end(), [](const Cell& c) {
    return c.kind == NoiseKind::ImageAdv && c.gamma > 0.0;
  });

  struct SeedState {
    Corpus clean, targets;
    std::optional<DualEncoderParams> surrogate;
  };
  std::vector<SeedState> states(seeds.size());
  parallel_for(seeds.size(), jobs, [&](std::size_t i) {
    states[i].clean = upstream_corpus(cfg, seeds[i]);
    if (image_noise) {
      states[i].targets = target_corpus(cfg, seeds[i]);
      states[i].surrogate = train_surrogate(cfg, states[i].clean, seeds[i]).params;
    }
  });

  // gamma-zero cells of different kinds share one encoder
  std::vector<Cell> units;
  std::map<std::string, std::size_t> unit_of;
  for (const auto& c : cells)
    if (unit_of.emplace(c.name(), units.size()).second) units.push_back(c);

  std::vector<std::vector<ResultRow>> unit_rows(units.size());
  parallel_for(units.size(), jobs, [&](std::size_t u) {
    const Cell& cell = units[u];
    const std::size_t si = static_cast<std::size_t>(std::find(seeds.begin(), seeds.end(), cell.seed) - seeds.begin());
    const SeedState& st = states[si];
    const CraftResult crafted =
        craft_cell(cfg, cell, st.clean, st.surrogate ? &*st.surrogate : nullptr, image_noise ? &st.targets : nullptr);
    const PretrainResult enc = pretrain_cell(cfg, cell, crafted.noisy);
    const TaskFeatures features = task_features(enc.params, task_splits(cfg, cell.seed));
    for (TuneMode mode : cfg.modes) {
      const auto start = std::chrono::steady_clock::now();
      const FineTuneResult tuned = finetune_cell(cfg, cell, mode, features);
      const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      for (auto& row : evaluate_head(cell, mode, tuned.head, features, t)) unit_rows[u].push_back(std::move(row));
    }
  });

  std::vector<ResultRow> rows;
  for (double g : cfg.gammas)
    for (NoiseKind k : cfg.kinds)
      for (TuneMode m : cfg.modes)
        for (const char* split : {"id", "ood"})
          for (std::uint64_t s : seeds) {
            const Cell cell{g, k, s};
            for (const auto& r : unit_rows[unit_of.at(cell.name())])
              if (r.mode == m && r.split == split) {
                ResultRow row = r;
                row.kind = k;
                rows.push_back(row);
              }
          }
  return rows;
}

std::string results_csv(const std::vector<ResultRow>& rows) {
  std::string out(kResultsHeader);
  out += "\n";
  char wall[32];
  for (const auto& r : rows) {
    std::snprintf(wall, sizeof wall, "%.3f", r.wall_time_s);
    out += format_scalar(r.gamma) + "," + std::string(noise_kind_name(r.kind)) + "," +
           std::string(tune_mode_name(r.mode)) + "," + r.split + "," + std::to_string(r.seed) + "," +
           format_scalar(r.macro_auc) + "," + format_scalar(r.acc) + "," + wall + "\n";
  }
  return out;
}

std::vector<ResultRow> parse_results_csv(std::string_view text) {
  std::vector<ResultRow> rows;
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != kResultsHeader) throw IoError("results: unexpected CSV header");
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 8) throw IoError("results: line " + std::to_string(line_no) + " has " + std::to_string(f.size()) + " fields");
    try {
      ResultRow r;
      r.gamma = std::stod(f[0]);
      r.kind = parse_noise_kind(f[1]);
      r.mode = parse_tune_mode(f[2]);
      r.split = f[3];
      r.seed = std::stoull(f[4]);
      r.macro_auc = std::stod(f[5]);
      r.acc = std::stod(f[6]);
      r.wall_time_s = std::stod(f[7]);
      rows.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw IoError("results: line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return rows;
}

namespace {

struct Stats {
  double mean = 0.0, sd = 0.0;
  std::size_t n = 0;
};

Stats stats(const std::vector<double>& v) {
  Stats s;
  s.n = v.size();
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

}  // namespace

nlohmann::json trend_summary(const std::vector<ResultRow>& rows) {
  using Key = std::tuple<double, std::string, std::string, std::string>;
  std::map<Key, std::vector<double>> acc, auc_v;
  std::set<double> gammas;
  std::set<std::string> kinds, modes;
  std::set<std::uint64_t> seeds;
  for (const auto& r : rows) {
    const Key k{r.gamma, std::string(noise_kind_name(r.kind)), std::string(tune_mode_name(r.mode)), r.split};
    acc[k].push_back(r.acc);
    auc_v[k].push_back(r.macro_auc);
    gammas.insert(r.gamma);
    kinds.insert(std::get<1>(k));
    modes.insert(std::get<2>(k));
    seeds.insert(r.seed);
  }
  nlohmann::json out;
  out["seeds"] = seeds.size();
  nlohmann::json means = nlohmann::json::array();
  for (const auto& [k, v] : acc) {
    const Stats a = stats(v), u = stats(auc_v.at(k));
    means.push_back({{"gamma", std::get<0>(k)}, {"kind", std::get<1>(k)}, {"mode", std::get<2>(k)},
                     {"split", std::get<3>(k)}, {"acc_mean", a.mean}, {"acc_sd", a.sd},
                     {"auc_mean", u.mean}, {"n", a.n}});
  }
  out["means"] = means;

  const auto mean_of = [&](double g, const std::string& kind, const std::string& mode, const std::string& split)
      -> std::optional<Stats> {
    const auto it = acc.find(Key{g, kind, mode, split});
    if (it == acc.end()) return std::nullopt;
    return stats(it->second);
  };

  nlohmann::json bump = nlohmann::json::array(), ood = nlohmann::json::array(), ran = nlohmann::json::array();
  if (!gammas.empty()) {
    const double g0 = *gammas.begin(), gmax = *gammas.rbegin();
    for (const auto& kind : kinds)
      for (const auto& mode : modes) {
        const auto base = mean_of(g0, kind, mode, "id");
        std::optional<double> best;
        double best_g = 0.0;
        for (double g : {0.05, 0.1})
          if (const auto m = mean_of(g, kind, mode, "id"); m && (!best || m->mean > *best)) {
            best = m->mean;
            best_g = g;
          }
        if (base && best)
          bump.push_back({{"kind", kind}, {"mode", mode}, {"acc_gamma0", base->mean}, {"best_moderate", *best},
                          {"best_gamma", best_g}, {"flag", *best > base->mean}});

        std::vector<double> seq;
        for (double g : gammas)
          if (const auto m = mean_of(g, kind, mode, "ood")) seq.push_back(m->mean);
        if (seq.size() >= 2) {
          bool monotone = true;
          for (std::size_t i = 1; i < seq.size(); ++i) monotone = monotone && seq[i] <= seq[i - 1];
          ood.push_back({{"kind", kind}, {"mode", mode}, {"gamma_min", g0}, {"gamma_max", gmax},
                         {"acc_gamma_min", seq.front()}, {"acc_gamma_max", seq.back()},
                         {"degrades", seq.back() < seq.front()}, {"monotone", monotone}});
        }
      }
    for (double g : gammas)
      for (const auto& kind : kinds)
        for (const char* split : {"id", "ood"}) {
          const auto r = mean_of(g, kind, "ran", split), m = mean_of(g, kind, "mlp", split);
          if (!r || !m) continue;
          const double se = std::sqrt((r->sd * r->sd) / static_cast<double>(std::max<std::size_t>(r->n, 1)) +
                                      (m->sd * m->sd) / static_cast<double>(std::max<std::size_t>(m->n, 1)));
          const double diff = r->mean - m->mean;
          ran.push_back({{"gamma", g}, {"kind", kind}, {"split", split}, {"ran", r->mean}, {"mlp", m->mean},
                         {"diff", diff}, {"z", se > 0.0 ? nlohmann::json(diff / se) : nlohmann::json(nullptr)},
                         {"flag", r->mean >= m->mean}});
        }
  }
  out["id_bump"] = bump;
  out["ood_degradation"] = ood;
  out["ran_ge_mlp"] = ran;
  out["note"] = "flags compare seed means; z uses a normal approximation with per-group sample sd";
  return out;
}

AttackReport attack_cell(const ExperimentConfig& cfg, const Corpus& clean, const Corpus& targets,
                         const DualEncoderParams& surrogate, std::uint64_t seed, std::size_t jobs) {
  Corpus subset{clean.header, {}};
  const std::size_t n = std::min(cfg.attack_records, clean.size());
  subset.records.assign(clean.records.begin(), clean.records.begin() + static_cast<std::ptrdiff_t>(n));
  return attack_report(subset, surrogate, cfg.attack, sample_from(targets), mix_seed(seed, 0xa7), jobs);
}

Corpus zeroshot_corpus(const ExperimentConfig& cfg, std::uint64_t seed) {
  SynthConfig s = cfg.upstream;
  s.records = cfg.zeroshot_records;
  return synth_corpus(s, mix_seed(seed, 0x2e0));
}

}  // namespace ranlab
