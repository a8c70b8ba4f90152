#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "ranlab/caption_attack.hpp"
#include "ranlab/config.hpp"
#include "ranlab/encoders.hpp"
#include "ranlab/eval.hpp"
#include "ranlab/image_attack.hpp"
#include "ranlab/noisy_dataset.hpp"
#include "ranlab/ran_finetune.hpp"

namespace ranlab {

/// Everything a grid run depends on. Replicate r uses seed `seed + r`.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::size_t replicates = 5;
  std::vector<double> gammas{0.0, 0.05, 0.1, 0.2, 0.3};
  std::vector<NoiseKind> kinds{NoiseKind::ImageAdv, NoiseKind::CaptionAdv};
  std::vector<TuneMode> modes{TuneMode::LinearProbe, TuneMode::MlpTune, TuneMode::Ran};
  /// Not part of the hash.
  std::string output_dir = "out";

  SynthConfig upstream = default_upstream();
  SynthConfig task = default_task();
  double train_fraction = 0.8;
  std::size_t ood_records = 80;

  EncoderConfig encoder;
  PretrainConfig pretrain;

  AttackConfig attack;
  /// Images attacked per seed by the attack subcommand.
  std::size_t attack_records = 40;
  std::vector<CaptionObjective> objectives{CaptionObjective::Opposite, CaptionObjective::SeverityLaterality,
                                           CaptionObjective::BodyPart};
  std::size_t max_edits = kDefaultMaxEdits;
  double random_rate = 0.2;
  double random_pixel_sigma = 8.0 / 255.0;

  RanConfig finetune;

  ZeroShotSpec zeroshot{"{label}", "No {label}", {"effusion", "fracture"}};
  std::size_t zeroshot_records = 120;

  LlmEndpointConfig llm;

  static SynthConfig default_upstream();
  static SynthConfig default_task();

  std::vector<std::uint64_t> seeds() const;
  /// ConfigError listing every offending field.
  void validate() const;

  ConfigTable to_table() const;
  static ExperimentConfig from_table(const ConfigTable& table);
  std::string to_toml() const { return format_config(to_table()); }
  static ExperimentConfig from_toml(std::string_view text);
  static ExperimentConfig load(const std::filesystem::path& path);
  /// First 16 hex digits of SHA-256 over the canonical text without output_dir.
  std::string hash() const;

  /// `key=value` override using dotted config keys.
  void set(std::string_view assignment);
  /// Applies every override, then validates once so all problems are listed.
  void set_all(const std::vector<std::string>& assignments);
};

/// One upstream corpus variant: noise ratio, kind and seed.
struct Cell {
  double gamma = 0.0;
  NoiseKind kind = NoiseKind::ImageAdv;
  std::uint64_t seed = 0;

  /// "g0.05-image-s3"; gamma-zero cells of every kind share "g0-clean-sN".
  std::string name() const;
  friend bool operator==(const Cell&, const Cell&) = default;
};

/// Grid order: gamma, kind, seed.
std::vector<Cell> grid_cells(const ExperimentConfig& cfg);

Corpus upstream_corpus(const ExperimentConfig& cfg, std::uint64_t seed);
/// Domain-B corpus whose records serve as attack targets.
Corpus target_corpus(const ExperimentConfig& cfg, std::uint64_t seed);
EncoderConfig encoder_config(const ExperimentConfig& cfg);
/// Encoder pre-trained on the clean upstream corpus, used to craft image noise.
PretrainResult train_surrogate(const ExperimentConfig& cfg, const Corpus& clean, std::uint64_t seed);

NoiseSpec noise_spec(const ExperimentConfig& cfg, const Cell& cell);
/// `surrogate` and `targets` are needed for image noise only.
CraftResult craft_cell(const ExperimentConfig& cfg, const Cell& cell, const Corpus& clean,
                       const DualEncoderParams* surrogate, const Corpus* targets, std::size_t jobs = 1);
PretrainResult pretrain_cell(const ExperimentConfig& cfg, const Cell& cell, const Corpus& noisy);

struct TaskSplits {
  Corpus train, id_test, ood_test;
};
TaskSplits task_splits(const ExperimentConfig& cfg, std::uint64_t seed);

struct TaskFeatures {
  FeatureBatch train;
  Array id_test, ood_test;
  std::vector<int> id_labels, ood_labels;
};
/// L2-normalized image embeddings of every split.
TaskFeatures task_features(const DualEncoderParams& encoder, const TaskSplits& splits);

FineTuneResult finetune_cell(const ExperimentConfig& cfg, const Cell& cell, TuneMode mode,
                             const TaskFeatures& features);

struct ResultRow {
  double gamma = 0.0;
  NoiseKind kind = NoiseKind::ImageAdv;
  TuneMode mode = TuneMode::LinearProbe;
  std::string split;
  std::uint64_t seed = 0;
  double macro_auc = 0.0;
  double acc = 0.0;
  double wall_time_s = 0.0;
};

/// One row per split ("id", "ood").
std::vector<ResultRow> evaluate_head(const Cell& cell, TuneMode mode, const TransformHead& head,
                                     const TaskFeatures& features, double wall_time_s);

/// craft -> pretrain -> finetune -> evaluate for every cell and mode, in grid
/// order. Identical inputs give identical rows apart from wall_time_s.
std::vector<ResultRow> run_matrix(const ExperimentConfig& cfg, std::size_t jobs = 1);

inline constexpr std::string_view kResultsHeader = "gamma,kind,mode,split,seed,macro_auc,acc,wall_time_s";
std::string results_csv(const std::vector<ResultRow>& rows);
std::vector<ResultRow> parse_results_csv(std::string_view text);

/// Seed-mean comparisons: ID bump at moderate noise, OOD degradation, and
/// Ran >= MlpTune per cell. Reported, never enforced.
nlohmann::json trend_summary(const std::vector<ResultRow>& rows);

/// Attack efficacy on the surrogate: adversarial vs clean similarity to the
/// target caption for the first attack_records clean records.
AttackReport attack_cell(const ExperimentConfig& cfg, const Corpus& clean, const Corpus& targets,
                         const DualEncoderParams& surrogate, std::uint64_t seed, std::size_t jobs = 1);

/// Held-out upstream-domain corpus for zero-shot evaluation.
Corpus zeroshot_corpus(const ExperimentConfig& cfg, std::uint64_t seed);

}  // namespace ranlab
