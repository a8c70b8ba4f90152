#include "ranlab/image_attack.hpp"

#include <algorithm>
#include <cmath>

#include "ranlab/errors.hpp"
#include "ranlab/ops.hpp"
#include "ranlab/parallel.hpp"

namespace ranlab {

void AttackConfig::validate() const {
  RANLAB_REQUIRE(std::isfinite(epsilon) && epsilon >= 0.0, "attack: epsilon must be >= 0");
  RANLAB_REQUIRE(iterations == 0 || (std::isfinite(step_size) && step_size > 0.0),
                 "attack: step_size must be > 0 when iterations > 0");
  RANLAB_REQUIRE(std::isinf(norm_order) && norm_order > 0,
                 "attack: only the L-infinity norm is supported");
}

namespace {

double sign(double g) { return g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0); }

// Step, clip the perturbation to the ball, clamp to [0,1]. The final loop
// guards against the sum c + d rounding just outside the ball.
double project(double x, double c, double eps) {
  const double d = std::clamp(x - c, -eps, eps);
  double y = std::clamp(c + d, 0.0, 1.0);
  while (std::abs(y - c) > eps) y = std::nextafter(y, c);
  return y;
}

}  // namespace

AdversarialResult pgd_maximize(const Array& x_clean, const PixelObjective& objective,
                               const AttackConfig& cfg,
                               const std::function<void(std::size_t, const Array&)>& observer) {
  cfg.validate();
  RANLAB_REQUIRE(x_clean.size() > 0, "attack: empty image");
  for (double v : x_clean.data())
    RANLAB_REQUIRE(v >= 0.0 && v <= 1.0, "attack: clean pixels must lie in [0,1]");

  const std::size_t n = x_clean.size();
  Array x = x_clean;
  AdversarialResult r;
  Array best = x;
  for (std::size_t t = 0;; ++t) {
    if (observer) observer(t, x);
    Tape tape;
    const Var xv = tape.leaf(x.reshaped({1, n}), "pixels");
    const Var obj = objective(tape, xv);
    RANLAB_REQUIRE(obj.value().size() == 1, "attack: objective must be a scalar");
    const double s = obj.value().item();
    if (!std::isfinite(s))
      throw NumericError("attack: non-finite objective at iteration " + std::to_string(t));
    r.similarity_trace.push_back(s);
    if (t == 0 || s > r.similarity_trace[r.converged_at]) {
      r.converged_at = t;
      best = x;
    }
    if (t == cfg.iterations) break;

    Array g;
    try {
      g = tape.grad(obj, xv);
    } catch (const NumericError& e) {
      throw NumericError("attack: gradient failed at iteration " + std::to_string(t) + ": " + e.what());
    }
    if (!g.all_finite())
      throw NumericError("attack: non-finite gradient at iteration " + std::to_string(t));
    for (std::size_t i = 0; i < n; ++i)
      x[i] = project(x[i] + cfg.step_size * sign(g[i]), x_clean[i], cfg.epsilon);
  }

  r.x_adv = best;
  r.delta = Array(x_clean.shape());
  for (std::size_t i = 0; i < n; ++i) r.delta[i] = best[i] - x_clean[i];
  return r;
}

namespace {

Array unit_target(const DualEncoderParams& encoder, const Array& x_target) {
  return normalize(encode_image(encoder, x_target)).vector.reshaped({1, encoder.config.embed_dim});
}

}  // namespace

AdversarialResult pgd_attack(const DualEncoderParams& encoder, const Array& x_clean,
                             const Array& x_target, const AttackConfig& cfg) {
  RANLAB_REQUIRE(x_clean.shape() == x_target.shape(),
                 "attack: clean image " + shape_string(x_clean.shape()) + " and target image " +
                     shape_string(x_target.shape()) + " differ in shape");
  const Shape expected{encoder.config.height, encoder.config.width, encoder.config.channels};
  RANLAB_REQUIRE(x_clean.shape() == expected || x_clean.shape() == Shape{encoder.config.pixels()},
                 "attack: image shape " + shape_string(x_clean.shape()) + " does not match encoder");
  const Array target = unit_target(encoder, x_target);
  const PixelObjective cosine_to_target = [&](Tape& tape, Var x) {
    const EncoderGraph g = bind_encoder(tape, encoder, false);
    const Var u = ops::normalize_rows(image_features(g, x));
    return ops::sum(ops::row_dot(u, tape.constant(target)));
  };
  return pgd_maximize(x_clean, cosine_to_target, cfg);
}

std::vector<AdversarialResult> pgd_attack_all(const DualEncoderParams& encoder,
                                              const std::vector<Array>& clean,
                                              const std::vector<Array>& targets,
                                              const AttackConfig& cfg, std::size_t jobs) {
  RANLAB_REQUIRE(clean.size() == targets.size(), "attack: one target per clean image required");
  std::vector<AdversarialResult> out(clean.size());
  parallel_for(clean.size(), jobs,
               [&](std::size_t i) { out[i] = pgd_attack(encoder, clean[i], targets[i], cfg); });
  return out;
}

double similarity_score(const DualEncoderParams& encoder, const Array& image, const Embedding& other) {
  return cosine(encode_image(encoder, image), other);
}

double similarity_score(const DualEncoderParams& encoder, const Array& image,
                        const CaptionSample& caption) {
  return cosine(encode_image(encoder, image), encode_text(encoder, caption));
}

double similarity_score(const DualEncoderParams& encoder, const Array& image, const Array& other) {
  return cosine(encode_image(encoder, image), encode_image(encoder, other));
}

TargetSampler sample_from(const Corpus& targets) {
  RANLAB_REQUIRE(!targets.empty(), "target corpus is empty");
  return [&targets](Rng& rng) -> const CorpusRecord& {
    return targets.records[static_cast<std::size_t>(rng.below(targets.size()))];
  };
}

AttackReport attack_report(const Corpus& corpus, const DualEncoderParams& encoder,
                           const AttackConfig& cfg, const TargetSampler& sampler, std::uint64_t seed,
                           std::size_t jobs) {
  RANLAB_REQUIRE(!corpus.empty(), "attack_report: corpus is empty");
  Rng rng(mix_seed(seed, 0xa77));
  std::vector<const CorpusRecord*> picks;
  std::vector<Array> clean, targets;
  for (const auto& rec : corpus.records) {
    const CorpusRecord& t = sampler(rng);
    picks.push_back(&t);
    clean.push_back(rec.image.pixels);
    targets.push_back(t.image.pixels);
  }
  const auto results = pgd_attack_all(encoder, clean, targets, cfg, jobs);

  AttackReport report;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    AttackReportRow row;
    row.id = corpus.records[i].image.id;
    row.target_id = picks[i]->image.id;
    const Embedding caption = encode_text(encoder, picks[i]->caption);
    row.clean_similarity = similarity_score(encoder, clean[i], caption);
    row.adv_similarity = similarity_score(encoder, results[i].x_adv, caption);
    report.mean_clean += row.clean_similarity;
    report.mean_adv += row.adv_similarity;
    report.rows.push_back(std::move(row));
  }
  report.mean_clean /= static_cast<double>(corpus.size());
  report.mean_adv /= static_cast<double>(corpus.size());
  return report;
}

}  // namespace ranlab
