#include <cmath>

#include "doctest.h"
#include "ranlab/errors.hpp"
#include "ranlab/eval.hpp"
#include "ranlab/noisy_dataset.hpp"
#include "ranlab/rng.hpp"

using namespace ranlab;

namespace {

// All-pairs Mann-Whitney count with ties worth one half.
double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      pairs += 1.0;
      wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  return wins / pairs;
}

struct Instance {
  std::vector<double> scores;
  std::vector<int> labels;
};

Instance random_instance(Rng& rng, std::size_t n) {
  Instance x;
  // coarse scores force plenty of ties
  for (std::size_t i = 0; i < n; ++i) {
    x.scores.push_back(static_cast<double>(rng.below(7)) / 4.0);
    x.labels.push_back(rng.bernoulli(0.4) ? 1 : 0);
  }
  x.labels[0] = 1;
  x.labels[1] = 0;
  return x;
}

}  // namespace

TEST_CASE("auc examples") {
  CHECK(auc(std::vector<double>{0.9, 0.8, 0.3}, std::vector<int>{1, 1, 0}) == 1.0);
  CHECK(auc(std::vector<double>{0.1, 0.8}, std::vector<int>{1, 0}) == 0.0);
  CHECK(auc(std::vector<double>{0.5, 0.5}, std::vector<int>{1, 0}) == 0.5);
  CHECK_THROWS_AS(auc(std::vector<double>{0.1, 0.8}, std::vector<int>{1, 1}), UndefinedMetric);
  CHECK_THROWS_AS(auc(std::vector<double>{0.1}, std::vector<int>{2}), ContractViolation);
}

TEST_CASE("rank auc equals the pairwise oracle exactly") {
  Rng rng(1);
  for (int rep = 0; rep < 100; ++rep) {
    const Instance x = random_instance(rng, 2 + rng.below(199));
    CHECK(auc(x.scores, x.labels) == pairwise_auc(x.scores, x.labels));
  }
}

TEST_CASE("auc invariances") {
  Rng rng(2);
  for (int rep = 0; rep < 20; ++rep) {
    Instance x;
    for (int i = 0; i < 40; ++i) {
      x.scores.push_back(rng.normal());
      x.labels.push_back(i % 3 == 0);
    }
    const double a = auc(x.scores, x.labels);
    std::vector<double> monotone, negated;
    for (double s : x.scores) {
      monotone.push_back(std::exp(3.0 * s) + 1.0);
      negated.push_back(-s);
    }
    CHECK(auc(monotone, x.labels) == a);
    CHECK(std::abs(auc(negated, x.labels) - (1.0 - a)) < 1e-15);
  }
}

TEST_CASE("macro metrics") {
  Rng rng(3);
  const std::size_t n = 50, k = 3;
  Array s(Shape{n, k}), y(Shape{n, k}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) s.at(i, j) = rng.uniform();
    y.at(i, i % k) = 1.0;
  }
  const MetricReport r = macro_metrics(s, y);
  double sum = 0.0, hits = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    std::vector<double> col;
    std::vector<int> lab;
    for (std::size_t i = 0; i < n; ++i) {
      col.push_back(s.at(i, j));
      lab.push_back(static_cast<int>(y.at(i, j)));
    }
    const double a = pairwise_auc(col, lab);
    CHECK(*r.per_label_auc[j] == a);
    sum += a;
  }
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (s.at(i, j) > s.at(i, best)) best = j;
    hits += y.at(i, best);
  }
  CHECK(std::abs(r.macro_auc - sum / 3.0) < 1e-15);
  CHECK(r.accuracy == hits / 50.0);
  CHECK(r.n_eval == 50);

  // single label and duplicated columns
  Array s1(Shape{n, 1}), y1(Shape{n, 1});
  Array s2(Shape{n, 2}), y2(Shape{n, 2});
  std::vector<double> col;
  std::vector<int> lab;
  for (std::size_t i = 0; i < n; ++i) {
    s1.at(i, 0) = s2.at(i, 0) = s2.at(i, 1) = s.at(i, 0);
    y1.at(i, 0) = y2.at(i, 0) = y2.at(i, 1) = y.at(i, 0);
    col.push_back(s.at(i, 0));
    lab.push_back(static_cast<int>(y.at(i, 0)));
  }
  CHECK(macro_metrics(s1, y1).macro_auc == auc(col, lab));
  CHECK(macro_metrics(s2, y2).macro_auc == macro_metrics(s1, y1).macro_auc);
}

TEST_CASE("degenerate labels are flagged and excluded") {
  const Array s = Array::from_rows({{0.9, 0.2}, {0.1, 0.3}, {0.4, 0.8}});
  const Array y = Array::from_rows({{1, 0}, {0, 0}, {1, 0}});
  const MetricReport r = macro_metrics(s, y, AccuracyRule::MultiLabel);
  CHECK(r.undefined_labels == std::vector<std::size_t>{1});
  CHECK_FALSE(r.per_label_auc[1].has_value());
  CHECK(r.macro_auc == 1.0);
  // thresholded at 0.5: row agreements 1, 1, 0
  CHECK(std::abs(r.accuracy - 2.0 / 3.0) < 1e-15);
  CHECK_THROWS_AS(macro_metrics(s, Array(Shape{3, 2}, 0.0)), UndefinedMetric);
}

TEST_CASE("zero-shot templates") {
  ZeroShotSpec spec;
  spec.labels = {"effusion"};
  CHECK(spec.positive("effusion") == "effusion");
  CHECK(spec.negative("effusion") == "No effusion");
  spec.negative_template = "no";
  CHECK_THROWS_AS(spec.validate(), ContractViolation);
  spec.negative_template = "{label} {label}";
  CHECK_THROWS_AS(spec.validate(), ContractViolation);
}

TEST_CASE("zero-shot decision rule") {
  EncoderConfig ec;
  ec.vocab_size = Vocabulary::builtin().size();
  const auto enc = init_dual_encoder(ec, 1);
  ImageSample img{Array(Shape{12, 12, 1}, 0.4), "x"};

  // forced ordering: sim to the positive prompt 0.8, to the negative 0.2
  const Embedding u = normalize(encode_image(enc, img));
  Array other(Shape{u.vector.size()}, 0.0);
  for (std::size_t i = 0; i < other.size(); ++i) other[i] = i % 2 ? 1.0 : -1.0;
  double proj = dot(other.data(), u.vector.data());
  for (std::size_t i = 0; i < other.size(); ++i) other[i] -= proj * u.vector[i];
  const double r = l2_norm(other.data());
  for (double& v : other.data()) v /= r;
  const auto mix = [&](double c) {
    Array v(Shape{u.vector.size()});
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = c * u.vector[i] + std::sqrt(1 - c * c) * other[i];
    return Embedding{v, true};
  };
  const ZeroShotPrompts forced{{mix(0.8)}, {mix(0.2)}};
  const auto p = zero_shot_classify(enc, img, forced);
  CHECK(p.positive == std::vector<bool>{true});
  CHECK(std::abs(p.margin[0] - 0.6) < 1e-12);

  ZeroShotSpec same;
  same.negative_template = "{label}";
  same.labels = {"effusion", "fracture"};
  const auto q = zero_shot_classify(enc, img, same, Vocabulary::builtin(), 16);
  CHECK(q.margin == std::vector<double>{0.0, 0.0});
  CHECK(q.positive == std::vector<bool>{false, false});

  ZeroShotSpec bad;
  bad.labels = {"effusion", "cardiomegaly", "xyz"};
  CHECK_THROWS_WITH_AS(zero_shot_classify(enc, img, bad, Vocabulary::builtin(), 16),
                       doctest::Contains("'cardiomegaly', 'xyz'"), ContractViolation);
}

TEST_CASE("zero-shot evaluation on a synthetic corpus") {
  SynthConfig sc;
  sc.records = 20;
  const Corpus c = synth_corpus(sc, 1);
  EncoderConfig ec = encoder_config_for(c.header);
  const auto enc = init_dual_encoder(ec, 2);
  ZeroShotSpec spec;
  spec.labels = {"effusion", "fracture"};
  const auto r = zero_shot_evaluate(enc, c, spec);
  // four classes all show effusion, so no record is scored for fracture
  CHECK(r.pairs == 20);
  CHECK(r.sigma == doctest::Approx(std::sqrt(0.25 / 20)));
  CHECK(r.metrics.per_label_auc.size() == 2);
  CHECK(r.metrics.undefined_labels == std::vector<std::size_t>{1});

  std::size_t present = 0;
  for (const auto& rec : c.records) present += synthetic_truth(rec, "effusion").value();
  CHECK(present == 10);
  CHECK_FALSE(synthetic_truth(c.records[0], "fracture").has_value());
}
