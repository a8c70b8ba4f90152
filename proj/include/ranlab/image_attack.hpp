#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "ranlab/array.hpp"
#include "ranlab/data.hpp"
#include "ranlab/encoders.hpp"
#include "ranlab/rng.hpp"
#include "ranlab/tape.hpp"

namespace ranlab {

/// L-infinity PGD settings. `step_size` is the per-iteration step.
struct AttackConfig {
  double epsilon = 8.0 / 255.0;
  double step_size = 2.0 / 255.0;
  std::size_t iterations = 40;
  /// Only the infinity norm is supported; kept so manifests record it.
  double norm_order = std::numeric_limits<double>::infinity();

  void validate() const;
};

struct AdversarialResult {
  Array x_adv;
  /// x_adv - x_clean, elementwise.
  Array delta;
  /// Objective value at x^0 .. x^T.
  std::vector<double> similarity_trace;
  /// Index into similarity_trace of the returned iterate.
  std::size_t converged_at = 0;

  double best_similarity() const { return similarity_trace.at(converged_at); }
};

/// Scalar objective of a (1, P) pixel row, recorded on the given tape.
using PixelObjective = std::function<Var(Tape& tape, Var x)>;

/// Sign-gradient ascent on `objective` with projection onto the epsilon ball
/// around x_clean intersected with [0,1]. Returns the best iterate (earliest
/// on ties). `observer`, if set, sees every iterate x^t.
AdversarialResult pgd_maximize(const Array& x_clean, const PixelObjective& objective,
                               const AttackConfig& cfg,
                               const std::function<void(std::size_t, const Array&)>& observer = {});

/// Targeted embedding attack: maximize cosine(f(x), f(x_target)).
AdversarialResult pgd_attack(const DualEncoderParams& encoder, const Array& x_clean,
                             const Array& x_target, const AttackConfig& cfg);

/// Attacks every (clean, target) pair, in order, on up to `jobs` threads.
std::vector<AdversarialResult> pgd_attack_all(const DualEncoderParams& encoder,
                                              const std::vector<Array>& clean,
                                              const std::vector<Array>& targets,
                                              const AttackConfig& cfg, std::size_t jobs = 1);

/// Cosine between the normalized image embedding and the other embedding.
double similarity_score(const DualEncoderParams& encoder, const Array& image, const Embedding& other);
double similarity_score(const DualEncoderParams& encoder, const Array& image,
                        const CaptionSample& caption);
double similarity_score(const DualEncoderParams& encoder, const Array& image, const Array& other);

/// Draws a target (image, caption) pair.
using TargetSampler = std::function<const CorpusRecord&(Rng& rng)>;
/// Uniform draws from a target corpus (which must outlive the sampler).
TargetSampler sample_from(const Corpus& targets);

struct AttackReportRow {
  std::string id;
  std::string target_id;
  double clean_similarity = 0.0;
  double adv_similarity = 0.0;
};

struct AttackReport {
  std::vector<AttackReportRow> rows;
  double mean_clean = 0.0;
  double mean_adv = 0.0;
};

/// Mean similarity of clean and of attacked images to the target caption.
AttackReport attack_report(const Corpus& corpus, const DualEncoderParams& encoder,
                           const AttackConfig& cfg, const TargetSampler& sampler, std::uint64_t seed,
                           std::size_t jobs = 1);

}  // namespace ranlab
