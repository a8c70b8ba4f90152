#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "ranlab/array.hpp"
#include "ranlab/optim.hpp"
#include "ranlab/tape.hpp"

namespace ranlab {

enum class TuneMode { LinearProbe, MlpTune, Ran };
std::string_view tune_mode_name(TuneMode m);
TuneMode parse_tune_mode(std::string_view name);

/// Softmax cross-entropy over single labels, or per-label binary
/// cross-entropy against a 0/1 target matrix.
enum class TaskLoss { Softmax, Binary };

inline constexpr double kDefaultAlpha = 0.01;
inline constexpr double kDefaultBeta = 0.015;
/// arccos derivatives are evaluated inside [-1 + m, 1 - m].
inline constexpr double kAcosMargin = 1e-7;

struct RanConfig {
  double alpha = kDefaultAlpha;
  double beta = kDefaultBeta;
  TuneMode mode = TuneMode::Ran;
  TaskLoss loss = TaskLoss::Softmax;
  OptimizerConfig optimizer{1e-2, 0.9, 0.98, 1e-8, 0.0, 20, true};
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  /// MLP hidden width; 0 means 2 * D.
  std::size_t hidden = 0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Frozen features F (n, D) with class labels and, for binary tasks, an
/// (n, k) 0/1 target matrix.
struct FeatureBatch {
  Array features;
  std::vector<int> labels;
  std::optional<Array> targets;

  std::size_t size() const { return features.rank() == 2 ? features.rows() : 0; }
  std::size_t dim() const { return features.rank() == 2 ? features.cols() : 0; }
};

/// 2-layer MLP D -> H -> D with a smooth rectifier, then an affine
/// classifier D -> k. Linear probes use only the classifier, applied to F.
struct TransformHead {
  TuneMode mode = TuneMode::MlpTune;
  Array w1, b1, w2, b2;
  Array wc, bc;

  std::size_t classes() const { return bc.size(); }
  std::vector<std::pair<std::string, Array*>> tensors();
  std::vector<std::pair<std::string, const Array*>> tensors() const;
};

TransformHead init_head(TuneMode mode, std::size_t dim, std::size_t classes, std::size_t hidden,
                        std::uint64_t seed);

/// {"mode", "tensors": {name: {"shape", "data"}}}; doubles round-trip exactly.
nlohmann::json head_to_json(const TransformHead& head);
/// IoError on a malformed document.
TransformHead head_from_json(const nlohmann::json& doc);

/// Unit-norm class centroids, one row per class.
struct ClassCentroids {
  Array c;

  std::size_t classes() const { return c.rows(); }
  /// Rescale every row to unit norm.
  void renormalize();
};

/// Normalized per-class means of Z; DegenerateEmbedding if a mean is zero,
/// ContractViolation if a class has no rows.
ClassCentroids centroids_from_means(const Array& z, std::span<const int> labels, std::size_t classes);

/// (1/D) sum_{i != j} C(Z)_ij^2 with C the sample covariance (n - 1 divisor).
Var cov_loss(Var z);
double cov_loss(const Array& z);

/// Mean over rows of ||F_i/|F_i| - Z_i/|Z_i|||^2.
Var mse_consistency(Var f, Var z);
double mse_consistency(const Array& f, const Array& z);

/// -(1/n) sum_i [ mean_{j != y_i} ||f_i - c_j|| + mean_{j != y_i} arccos(c_{y_i} . c_j) ].
Var adv_loss(Var f, std::span<const int> labels, Var centroids);
double adv_loss(const Array& f, std::span<const int> labels, const Array& centroids);

struct RanLossParts {
  Var total, ce, mse, cov, adv;
};

/// L = CE + alpha (MSE + COV) + beta ADV, evaluated in that order.
double compose_ran_loss(double ce, double mse, double cov, double adv, double alpha, double beta);
RanLossParts ran_loss(Var logits, const FeatureBatch& batch, Var f, Var z, Var centroids,
                      double alpha, double beta, TaskLoss loss = TaskLoss::Softmax);

/// Head forward pass on a tape. Returns (Z, logits); for linear probes Z is F.
std::pair<Var, Var> head_forward(Tape& tape, const std::vector<Var>& head_vars, TuneMode mode, Var f);

struct EpochLog {
  std::size_t epoch = 0;
  double total = 0.0, ce = 0.0, mse = 0.0, cov = 0.0, adv = 0.0;
  double train_accuracy = 0.0;

  nlohmann::json to_json() const;
};

struct FineTuneResult {
  TransformHead head;
  std::optional<ClassCentroids> centroids;
  std::vector<EpochLog> log;
};

/// Trains a head on frozen features. Deterministic under cfg.seed.
FineTuneResult fine_tune(const FeatureBatch& train, std::size_t classes, const RanConfig& cfg);

/// Trainable tensors upstream of the head. `produce` builds F for the given
/// training rows from one Var per entry of `params`.
struct FeatureStage {
  std::vector<std::pair<std::string, Array*>> params;
  std::function<Var(Tape&, std::span<const Var>, std::span<const std::size_t>)> produce;
};

/// As above, but F comes from `stage`, whose params are trained jointly with
/// the head and updated in place.
FineTuneResult fine_tune(const FeatureStage& stage, std::size_t n, std::span<const int> labels,
                         const std::optional<Array>& targets, std::size_t classes, const RanConfig& cfg);

/// Classifier scores (n, k) for frozen features.
Array head_logits(const TransformHead& head, const Array& features);
/// Argmax per row; ties go to the lower index.
std::vector<int> argmax_rows(const Array& scores);
double accuracy(std::span<const int> predicted, std::span<const int> labels);

}  // namespace ranlab
