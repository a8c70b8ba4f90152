#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "ranlab/encoders.hpp"
#include "ranlab/errors.hpp"
#include "ranlab/gradcheck.hpp"
#include "ranlab/ops.hpp"
#include "ranlab/rng.hpp"

using namespace ranlab;

namespace {

EncoderConfig small_config() {
  EncoderConfig c;
  c.vocab_size = Vocabulary::builtin().size();
  return c;
}

Array random_image(const EncoderConfig& c, Rng& rng) {
  Array a(Shape{c.height, c.width, c.channels});
  for (double& v : a.data()) v = rng.uniform();
  return a;
}

Array random_unit_rows(std::size_t n, std::size_t d, Rng& rng) {
  Array a(Shape{n, d});
  for (std::size_t i = 0; i < n; ++i) {
    double r = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      a.at(i, j) = rng.normal();
      r += a.at(i, j) * a.at(i, j);
    }
    for (std::size_t j = 0; j < d; ++j) a.at(i, j) /= std::sqrt(r);
  }
  return a;
}

Array random_matrix(std::size_t n, std::size_t d, Rng& rng) {
  Array a(Shape{n, d});
  for (double& v : a.data()) v = rng.normal();
  return a;
}

// Direct dense evaluation of the symmetric InfoNCE loss, no tape.
double dense_clip_oracle(const Array& u, const Array& v, double tau) {
  const std::size_t n = u.rows(), d = u.cols();
  std::vector<double> s(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) acc += u.at(i, k) * v.at(j, k);
      s[i * n + j] = acc / tau;
    }
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0, col = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      row += std::exp(s[i * n + j]);
      col += std::exp(s[j * n + i]);
    }
    total += -std::log(std::exp(s[i * n + i]) / row) - std::log(std::exp(s[i * n + i]) / col);
  }
  return total / (2.0 * static_cast<double>(n));
}

// Two well separated classes: bright left half captioned "left", bright right
// half captioned "right".
Corpus separable_corpus(std::size_t n, std::uint64_t seed) {
  const Vocabulary& vocab = Vocabulary::builtin();
  Corpus corpus;
  corpus.header = {12, 12, 1, vocab.size(), 2};
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const int cls = static_cast<int>(i % 2);
    Array px(Shape{12, 12, 1});
    for (std::size_t y = 0; y < 12; ++y)
      for (std::size_t x = 0; x < 12; ++x) {
        const bool lit = cls == 0 ? x < 6 : x >= 6;
        px[y * 12 + x] = std::clamp((lit ? 0.8 : 0.2) + 0.05 * rng.normal(), 0.0, 1.0);
      }
    CorpusRecord r;
    r.image = {px, "s" + std::to_string(i)};
    r.caption = make_caption(cls == 0 ? "mass in the left lung" : "mass in the right lung", vocab, 16);
    r.label = cls;
    r.source_id = r.image.id;
    corpus.records.push_back(std::move(r));
  }
  return corpus;
}

}  // namespace

TEST_CASE("zero image with zero biases encodes to the zero vector") {
  const auto params = init_dual_encoder(small_config(), 1);
  const Array zero(Shape{12, 12, 1}, 0.0);
  const Embedding e = encode_image(params, zero);
  CHECK(e.vector.shape() == Shape{32});
  CHECK(max_abs(e.vector) == 0.0);
  CHECK_FALSE(e.normalized);
}

TEST_CASE("image encoding is deterministic") {
  const auto params = init_dual_encoder(small_config(), 2);
  Rng rng(3);
  const Array img = random_image(params.config, rng);
  CHECK(encode_image(params, img).vector == encode_image(params, img).vector);
}

TEST_CASE("image encoding rejects a mismatched shape") {
  const auto params = init_dual_encoder(small_config(), 2);
  CHECK_THROWS_AS(encode_image(params, Array(Shape{10, 12, 1}, 0.5)), ContractViolation);
}

TEST_CASE("pixel gradient of each output coordinate matches finite differences") {
  const auto params = init_dual_encoder(small_config(), 4);
  Rng rng(5);
  const Array img = random_image(params.config, rng).reshaped({1, 144});
  for (std::size_t coord : {0u, 7u, 31u}) {
    const LossFn loss = [&](Tape& tape, std::span<const Var> p) {
      const EncoderGraph g = bind_encoder(tape, params, false);
      const std::vector<std::size_t> idx{coord};
      return ops::sum(ops::pick(image_features(g, p[0]), idx));
    };
    CHECK(finite_diff_check(loss, {img}) < 1e-5);
  }
}

TEST_CASE("empty token sequence encodes as a pad-only sequence") {
  const auto params = init_dual_encoder(small_config(), 6);
  const std::vector<int> empty;
  const std::vector<int> pad{Vocabulary::kPad};
  CHECK(encode_text(params, empty).vector == encode_text(params, pad).vector);
}

TEST_CASE("token order matters when positions are enabled") {
  const auto params = init_dual_encoder(small_config(), 7);
  const auto& vocab = Vocabulary::builtin();
  const auto a = vocab.tokenize("left lung mass");
  const auto b = vocab.tokenize("mass lung left");
  CHECK(max_abs_diff(encode_text(params, a).vector, encode_text(params, b).vector) > 1e-6);

  auto cfg = small_config();
  cfg.positional = false;
  const auto bag = init_dual_encoder(cfg, 7);
  CHECK(max_abs_diff(encode_text(bag, a).vector, encode_text(bag, b).vector) < 1e-14);
}

TEST_CASE("out-of-range token is a contract violation") {
  const auto params = init_dual_encoder(small_config(), 8);
  const std::vector<int> bad{2, static_cast<int>(params.config.vocab_size)};
  CHECK_THROWS_AS(encode_text(params, bad), ContractViolation);
  const std::vector<int> negative{-1};
  CHECK_THROWS_AS(encode_text(params, negative), ContractViolation);
}

TEST_CASE("normalize") {
  const Embedding v{Array::vector({3, 4}), false};
  const Embedding n = normalize(v);
  CHECK(n.normalized);
  CHECK(n.vector[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(n.vector[1] == doctest::Approx(0.8).epsilon(1e-15));
  const Embedding again = normalize(n);
  CHECK(max_abs_diff(again.vector, n.vector) < 1e-15);
  CHECK_THROWS_AS(normalize(Embedding{Array::vector({0, 0}), false}), DegenerateEmbedding);
}

TEST_CASE("clip loss of a single pair is zero") {
  const Array u = Array::from_rows({{0.6, 0.8}});
  const Array v = Array::from_rows({{1.0, 0.0}});
  CHECK(clip_loss(u, v, 0.07) == 0.0);
}

TEST_CASE("clip loss with equal similarities is ln N") {
  Array same(Shape{4, 3}, 0.0);
  for (std::size_t i = 0; i < 4; ++i) same.at(i, 0) = 1.0;
  CHECK(clip_loss(same, same, 0.5) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("clip loss matches a dense softmax oracle") {
  Rng rng(11);
  for (int rep = 0; rep < 5; ++rep) {
    const Array u = random_unit_rows(8, 6, rng);
    const Array v = random_unit_rows(8, 6, rng);
    const double tau = 0.05 + rng.uniform();
    CHECK(std::abs(clip_loss(u, v, tau) - dense_clip_oracle(u, v, tau)) < 1e-10);
  }
}

TEST_CASE("clip loss is permutation equivariant") {
  Rng rng(12);
  const Array u = random_unit_rows(7, 5, rng);
  const Array v = random_unit_rows(7, 5, rng);
  std::vector<std::size_t> perm(7);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  Array pu(u.shape()), pv(v.shape());
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      pu.at(i, j) = u.at(perm[i], j);
      pv.at(i, j) = v.at(perm[i], j);
    }
  CHECK(std::abs(clip_loss(u, v, 0.1) - clip_loss(pu, pv, 0.1)) < 1e-12);
}

TEST_CASE("clip loss rejects unnormalized rows") {
  const Array u = Array::from_rows({{1.0, 0.0}, {0.0, 2.0}});
  CHECK_THROWS_AS(clip_loss(u, u, 0.1), ContractViolation);
}

TEST_CASE("clip loss gradient passes the finite-difference check") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Array u = random_matrix(6, 4, rng);
    const Array v = random_matrix(6, 4, rng);
    const Array log_tau = Array::scalar(std::log(0.2 + rng.uniform()));
    const LossFn loss = [](Tape&, std::span<const Var> p) {
      return clip_loss(ops::normalize_rows(p[0]), ops::normalize_rows(p[1]), p[2]);
    };
    CHECK(finite_diff_check(loss, {u, v, log_tau}) <= 1e-4);
  }
}

TEST_CASE("pretrain with zero learning rate leaves parameters unchanged") {
  const Corpus corpus = separable_corpus(16, 1);
  PretrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  cfg.optimizer.learning_rate = 0.0;
  const auto init = init_dual_encoder(encoder_config_for(corpus.header), 9);
  const auto result = pretrain_from(corpus, init, cfg, 9);
  CHECK(parameter_checksum(result.params) == parameter_checksum(init));
}

TEST_CASE("pretrain reduces the contrastive loss and is reproducible") {
  const Corpus corpus = separable_corpus(64, 2);
  PretrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 16;
  const auto a = pretrain(corpus, {}, cfg, 3);
  const auto b = pretrain(corpus, {}, cfg, 3);
  CHECK(parameter_checksum(a.params) == parameter_checksum(b.params));
  CHECK(a.log.epoch_loss.size() == 30);
  CHECK(corpus_clip_loss(a.params, corpus, 16) < a.log.initial_loss);
  CHECK(a.log.matched_cosine.back() > a.log.matched_cosine.front());
}

TEST_CASE("pretrain rejects an oversized batch and an empty corpus") {
  const Corpus corpus = separable_corpus(4, 3);
  PretrainConfig cfg;
  cfg.batch_size = 5;
  CHECK_THROWS_AS(pretrain(corpus, {}, cfg, 1), ContractViolation);
  CHECK_THROWS_AS(pretrain(Corpus{corpus.header, {}}, {}, cfg, 1), ContractViolation);
}

TEST_CASE("temperature stays clamped") {
  auto params = init_dual_encoder(small_config(), 1);
  CHECK(params.temperature() == doctest::Approx(0.07));
  params.log_temperature[0] = 50.0;
  params.clamp_temperature();
  CHECK(params.temperature() == doctest::Approx(100.0));
  params.log_temperature[0] = -50.0;
  params.clamp_temperature();
  CHECK(params.temperature() == doctest::Approx(1e-3));
}

TEST_CASE("checkpoint round trip") {
  const auto params = init_dual_encoder(small_config(), 13);
  const auto bytes = serialize_checkpoint(params);
  const auto back = deserialize_checkpoint(bytes);
  CHECK(back.config == params.config);
  CHECK(parameter_checksum(back) == parameter_checksum(params));
  CHECK(serialize_checkpoint(back) == bytes);

  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  CHECK_THROWS_AS(deserialize_checkpoint(truncated), IoError);
  auto corrupt = bytes;
  corrupt[0] = 'X';
  CHECK_THROWS_AS(deserialize_checkpoint(corrupt), IoError);

  const auto dir = std::filesystem::temp_directory_path() / "ranlab_ckpt_test";
  write_checkpoint(dir / "enc.ckpt", params);
  CHECK(parameter_checksum(read_checkpoint(dir / "enc.ckpt")) == parameter_checksum(params));
  std::filesystem::remove_all(dir);
}
