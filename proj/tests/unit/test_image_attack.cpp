#include <cmath>

#include "doctest.h"
#include "ranlab/errors.hpp"
#include "ranlab/image_attack.hpp"
#include "ranlab/noisy_dataset.hpp"
#include "ranlab/ops.hpp"

using namespace ranlab;

namespace {

EncoderConfig config() {
  EncoderConfig c;
  c.vocab_size = Vocabulary::builtin().size();
  return c;
}

Array random_image(Rng& rng, double lo = 0.0, double hi = 1.0) {
  Array a(Shape{12, 12, 1});
  for (double& v : a.data()) v = rng.uniform(lo, hi);
  return a;
}

}  // namespace

TEST_CASE("zero iterations return the clean image") {
  const auto enc = init_dual_encoder(config(), 1);
  Rng rng(1);
  const Array x = random_image(rng), t = random_image(rng);
  AttackConfig cfg;
  cfg.iterations = 0;
  const auto r = pgd_attack(enc, x, t, cfg);
  CHECK(r.x_adv == x);
  CHECK(max_abs(r.delta) == 0.0);
  CHECK(r.similarity_trace.size() == 1);
  CHECK(r.converged_at == 0);
}

TEST_CASE("zero epsilon returns the clean image for any iteration count") {
  const auto enc = init_dual_encoder(config(), 2);
  Rng rng(2);
  const Array x = random_image(rng), t = random_image(rng);
  AttackConfig cfg;
  cfg.epsilon = 0.0;
  cfg.iterations = 7;
  const auto r = pgd_attack(enc, x, t, cfg);
  CHECK(r.x_adv == x);
  CHECK(r.similarity_trace.size() == 8);
}

TEST_CASE("identity encoder single step lands on the ball corner") {
  // f(x) = x with an inner-product objective: gradient is x_target, so one
  // sign step of 0.1 from the origin is clipped back to epsilon = 0.05.
  const Array x_clean = Array::vector({0.0, 0.0});
  const Array x_target = Array::matrix(1, 2, {1.0, 1.0});
  const PixelObjective inner = [&](Tape& tape, Var x) {
    return ops::sum(ops::row_dot(x, tape.constant(x_target)));
  };
  AttackConfig cfg;
  cfg.step_size = 0.1;
  cfg.epsilon = 0.05;
  cfg.iterations = 1;
  const auto r = pgd_maximize(x_clean, inner, cfg);
  CHECK(r.x_adv[0] == 0.05);
  CHECK(r.x_adv[1] == 0.05);
  CHECK(r.converged_at == 1);
  CHECK(r.similarity_trace == std::vector<double>{0.0, 0.1});
}

TEST_CASE("every iterate stays inside the ball and the unit box") {
  const auto enc = init_dual_encoder(config(), 3);
  Rng rng(3);
  for (int rep = 0; rep < 12; ++rep) {
    // images near the box edges make the clamp do real work
    const Array x = rep % 2 ? random_image(rng, 0.0, 0.05) : random_image(rng, 0.95, 1.0);
    const Array t = random_image(rng);
    AttackConfig cfg;
    cfg.epsilon = rng.uniform(0.0, 0.2);
    cfg.step_size = rng.uniform(0.001, 0.1);
    cfg.iterations = 6;
    const Array target = normalize(encode_image(enc, t)).vector.reshaped({1, 32});
    const PixelObjective cos = [&](Tape& tape, Var xv) {
      const EncoderGraph g = bind_encoder(tape, enc, false);
      return ops::sum(ops::row_dot(ops::normalize_rows(image_features(g, xv)), tape.constant(target)));
    };
    bool ok = true;
    const auto r = pgd_maximize(x, cos, cfg, [&](std::size_t, const Array& xt) {
      for (std::size_t i = 0; i < xt.size(); ++i)
        ok = ok && std::abs(xt[i] - x[i]) <= cfg.epsilon && xt[i] >= 0.0 && xt[i] <= 1.0;
    });
    CHECK(ok);
    CHECK(max_abs(r.delta) <= cfg.epsilon + 1e-12);
    double best = r.similarity_trace.front();
    for (double s : r.similarity_trace) best = std::max(best, s);
    CHECK(r.best_similarity() == best);
    for (std::size_t i = 0; i < x.size(); ++i)
      CHECK(std::abs(std::clamp(x[i] + r.delta[i], 0.0, 1.0) - r.x_adv[i]) <= 1e-15);
  }
}

TEST_CASE("attack is deterministic and parallel batches match serial runs") {
  const auto enc = init_dual_encoder(config(), 4);
  Rng rng(4);
  std::vector<Array> xs, ts;
  for (int i = 0; i < 4; ++i) {
    xs.push_back(random_image(rng));
    ts.push_back(random_image(rng));
  }
  AttackConfig cfg;
  cfg.iterations = 5;
  const auto serial = pgd_attack_all(enc, xs, ts, cfg, 1);
  const auto parallel = pgd_attack_all(enc, xs, ts, cfg, 3);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    CHECK(serial[i].x_adv == parallel[i].x_adv);
    CHECK(serial[i].similarity_trace == parallel[i].similarity_trace);
  }
}

TEST_CASE("attack rejects mismatched shapes and bad configs") {
  const auto enc = init_dual_encoder(config(), 5);
  AttackConfig cfg;
  CHECK_THROWS_AS(pgd_attack(enc, Array(Shape{12, 12, 1}, 0.5), Array(Shape{12, 11, 1}, 0.5), cfg),
                  ContractViolation);
  cfg.epsilon = -1.0;
  CHECK_THROWS_AS(cfg.validate(), ContractViolation);
  cfg.epsilon = 0.1;
  cfg.step_size = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ContractViolation);
  cfg.iterations = 0;
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("objective NaN is reported with its iteration") {
  const PixelObjective bad = [](Tape& tape, Var x) {
    return ops::sum(ops::scale_by(x, tape.constant(Array::scalar(std::nan("")))));
  };
  AttackConfig cfg;
  cfg.iterations = 2;
  CHECK_THROWS_AS(pgd_maximize(Array::vector({0.5, 0.5}), bad, cfg), NumericError);
}

TEST_CASE("similarity score") {
  const auto enc = init_dual_encoder(config(), 6);
  Rng rng(6);
  const Array x = random_image(rng);
  CHECK(similarity_score(enc, x, x) == doctest::Approx(1.0).epsilon(1e-9));
  Embedding neg = encode_image(enc, x);
  for (double& v : neg.vector.data()) v = -v;
  CHECK(similarity_score(enc, x, neg) == doctest::Approx(-1.0).epsilon(1e-9));

  const auto caption = make_caption("no effusion in the left chest", Vocabulary::builtin(), 16);
  const Array u = encode_image(enc, x).vector, v = encode_text(enc, caption).vector;
  const double oracle = dot(u.data(), v.data()) / (l2_norm(u.data()) * l2_norm(v.data()));
  CHECK(std::abs(similarity_score(enc, x, caption) - oracle) < 1e-12);

  CHECK_THROWS_AS(similarity_score(enc, Array(Shape{12, 12, 1}, 0.0), caption), DegenerateEmbedding);
}

TEST_CASE("attack report with no iterations has equal columns") {
  const auto enc = init_dual_encoder(config(), 7);
  SynthConfig sa;
  sa.records = 4;
  sa.classes = 2;
  const Corpus a = synth_corpus(sa, 1);
  sa.domain = Domain::B;
  const Corpus b = synth_corpus(sa, 2);
  Corpus one{a.header, {a.records[0]}};
  AttackConfig cfg;
  cfg.iterations = 0;
  const auto report = attack_report(one, enc, cfg, sample_from(b), 3);
  CHECK(report.rows.size() == 1);
  CHECK(report.mean_clean == report.mean_adv);
  CHECK_THROWS_AS(attack_report(Corpus{a.header, {}}, enc, cfg, sample_from(b), 3), ContractViolation);
}
