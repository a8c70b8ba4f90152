#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "ranlab/errors.hpp"
#include "ranlab/fusion_vqa.hpp"
#include "ranlab/gradcheck.hpp"
#include "ranlab/io.hpp"
#include "ranlab/noisy_dataset.hpp"
#include "ranlab/ops.hpp"
#include "ranlab/rng.hpp"

using namespace ranlab;

namespace {

Array random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Array a(Shape{r, c});
  for (double& v : a.data()) v = rng.normal() * scale;
  return a;
}

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Array& a) {
  Mat m(a.rows(), std::vector<double>(a.cols()));
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) m[i][j] = a.at(i, j);
  return m;
}

Mat mm(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

// Straight-line reimplementation of one attention stream.
std::vector<double> stream_oracle(const Mat& queries, const Mat& ctx, const Array& wq, const Array& wk,
                                  const Array& wv, const Array& wo, Mat* weights) {
  const Mat q = mm(queries, to_mat(wq)), k = mm(ctx, to_mat(wk)), v = mm(ctx, to_mat(wv));
  const double d = static_cast<double>(wq.rows());
  Mat a(q.size(), std::vector<double>(k.size()));
  for (std::size_t i = 0; i < q.size(); ++i) {
    double mx = -1e300;
    for (std::size_t j = 0; j < k.size(); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < q[i].size(); ++p) s += q[i][p] * k[j][p];
      a[i][j] = s / std::sqrt(d);
      mx = std::max(mx, a[i][j]);
    }
    double z = 0.0;
    for (double& x : a[i]) z += (x = std::exp(x - mx));
    for (double& x : a[i]) x /= z;
  }
  if (weights) *weights = a;
  const Mat out = mm(mm(a, v), to_mat(wo));
  std::vector<double> pooled(out[0].size(), 0.0);
  for (const auto& row : out)
    for (std::size_t p = 0; p < row.size(); ++p) pooled[p] += row[p] / static_cast<double>(out.size());
  return pooled;
}

std::vector<double> coattention_oracle(const Array& img, const Array& txt, const CoAttentionBlock& b) {
  const auto t = stream_oracle(to_mat(txt), to_mat(img), b.wq_text, b.wk_image, b.wv_image, b.wo_text, nullptr);
  const auto i = stream_oracle(to_mat(img), to_mat(txt), b.wq_image, b.wk_text, b.wv_text, b.wo_image, nullptr);
  std::vector<double> out(t.size());
  for (std::size_t p = 0; p < t.size(); ++p) out[p] = t[p] + i[p];
  return out;
}

}  // namespace

TEST_CASE("concat fusion") {
  CHECK(fuse_concat(Array::vector({1, 2}), Array::vector({3, 4})) == Array::vector({1, 2, 3, 4}));
  CHECK(fuse_concat(Array(Shape{3}, 0.0), Array(Shape{3}, 0.0)) == Array(Shape{6}, 0.0));
  const auto [v, q] = split_fused(Array::vector({1, 2, 3, 4}));
  CHECK(v == Array::vector({1, 2}));
  CHECK(q == Array::vector({3, 4}));
  CHECK_THROWS_AS(fuse_concat(Array::vector({1, 2}), Array::vector({3})), ContractViolation);
}

TEST_CASE("single tokens attend with weight one") {
  Rng rng(1);
  const CoAttentionBlock b = init_coattention(3, 1);
  const Array img = random_matrix(1, 3, rng), txt = random_matrix(1, 3, rng);
  AttentionMaps maps;
  const Array out = fuse_coattention(img, txt, b, &maps);
  CHECK(maps.text_to_image.at(0, 0) == 1.0);
  CHECK(maps.image_to_text.at(0, 0) == 1.0);
  // pooled value transforms of the single tokens
  const Mat a = mm(mm(to_mat(img), to_mat(b.wv_image)), to_mat(b.wo_text));
  const Mat c = mm(mm(to_mat(txt), to_mat(b.wv_text)), to_mat(b.wo_image));
  for (std::size_t p = 0; p < 3; ++p) CHECK(std::abs(out[p] - (a[0][p] + c[0][p])) < 1e-12);
}

TEST_CASE("uniform logits spread weight evenly") {
  Rng rng(2);
  CoAttentionBlock b = init_coattention(4, 2);
  b.wq_text = Array(Shape{4, 4}, 0.0);
  AttentionMaps maps;
  fuse_coattention(random_matrix(5, 4, rng), random_matrix(2, 4, rng), b, &maps);
  for (double w : maps.text_to_image.data()) CHECK(w == doctest::Approx(0.2).epsilon(1e-15));
}

TEST_CASE("co-attention matches a dense oracle and normalizes its rows") {
  Rng rng(3);
  for (int rep = 0; rep < 10; ++rep) {
    const std::size_t m = 1 + rng.below(9), l = 1 + rng.below(6), d = 2 + rng.below(5);
    const CoAttentionBlock b = init_coattention(d, static_cast<std::uint64_t>(rep));
    const Array img = random_matrix(m, d, rng, 2.0), txt = random_matrix(l, d, rng, 2.0);
    AttentionMaps maps;
    const Array out = fuse_coattention(img, txt, b, &maps);
    const auto oracle = coattention_oracle(img, txt, b);
    for (std::size_t p = 0; p < d; ++p) CHECK(std::abs(out[p] - oracle[p]) < 1e-10);
    for (const Array* a : {&maps.text_to_image, &maps.image_to_text})
      for (std::size_t i = 0; i < a->rows(); ++i) {
        double s = 0.0;
        for (double w : a->row(i)) s += w;
        CHECK(std::abs(s - 1.0) <= 1e-9);
      }
  }
}

TEST_CASE("permuting image tokens permutes attention and keeps the output") {
  Rng rng(4);
  const CoAttentionBlock b = init_coattention(4, 4);
  const Array img = random_matrix(6, 4, rng), txt = random_matrix(3, 4, rng);
  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  Array shuffled(Shape{6, 4});
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t p = 0; p < 4; ++p) shuffled.at(i, p) = img.at(perm[i], p);
  AttentionMaps a, c;
  const Array x = fuse_coattention(img, txt, b, &a), y = fuse_coattention(shuffled, txt, b, &c);
  CHECK(max_abs_diff(x, y) < 1e-12);
  for (std::size_t q = 0; q < 3; ++q)
    for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(c.text_to_image.at(q, i) - a.text_to_image.at(q, perm[i])) < 1e-15);
}

TEST_CASE("co-attention gradients pass the finite difference check") {
  Rng rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t m = 1 + rng.below(4), l = 1 + rng.below(4), d = 2 + rng.below(3);
    const CoAttentionBlock b = init_coattention(d, static_cast<std::uint64_t>(rep));
    std::vector<Array> params;
    for (const auto& [name, t] : b.tensors()) params.push_back(*t);
    params.push_back(random_matrix(m, d, rng));
    params.push_back(random_matrix(l, d, rng));
    const Array probe = random_matrix(1, d, rng);
    const LossFn loss = [&](Tape& tape, std::span<const Var> p) {
      const Var out = fuse_coattention(p.first(8), p[8], p[9]);
      return ops::sum(ops::mul(ops::reshape(out, {1, d}), tape.constant(probe)));
    };
    CHECK(finite_diff_check(loss, params) <= 1e-4);
  }
}

TEST_CASE("empty token sequences are rejected") {
  const CoAttentionBlock b = init_coattention(2, 1);
  CHECK_THROWS_AS(fuse_coattention(Array(Shape{0, 2}), Array(Shape{1, 2}, 1.0), b), ContractViolation);
  CHECK_THROWS_AS(fuse_coattention(Array(Shape{1, 3}, 1.0), Array(Shape{1, 2}, 1.0), b), ContractViolation);
}

TEST_CASE("classifier ties and bias shifts") {
  TransformHead h = init_head(TuneMode::LinearProbe, 4, 2, 0, 1);
  h.wc = Array(Shape{4, 2}, 0.5);
  CHECK(argmax_rows(vqa_classify(Array(Shape{4}, 0.0), h)) == std::vector<int>{0});

  Rng rng(6);
  const Array x = random_matrix(10, 4, rng);
  TransformHead g = init_head(TuneMode::MlpTune, 4, 5, 0, 2);
  const auto before = argmax_rows(vqa_classify(x, g));
  const Array s0 = vqa_classify(x, g);
  for (double& v : g.bc.data()) v += 3.25;
  const Array s1 = vqa_classify(x, g);
  CHECK(argmax_rows(s1) == before);
  for (std::size_t i = 0; i < s0.size(); ++i) CHECK(std::abs(s1[i] - s0[i] - 3.25) < 1e-12);
  CHECK_THROWS_AS(vqa_classify(Array(Shape{3}, 0.0), g), ContractViolation);
}

TEST_CASE("answer vocabulary") {
  const auto file = AnswerVocabulary::load(std::string(RANLAB_SOURCE_DIR) + "/data/vqa_answers.txt");
  CHECK(file.answers() == AnswerVocabulary::builtin().answers());
  CHECK(AnswerVocabulary::parse(file.to_text()).answers() == file.answers());
  CHECK(file.index("left") == 2);
  CHECK_THROWS_AS(file.index("maybe"), ContractViolation);
  CHECK_THROWS_AS(AnswerVocabulary::parse("yes\nno\nyes\n"), ContractViolation);
  CHECK_THROWS_AS(AnswerVocabulary::parse("yes\n"), ContractViolation);
}

TEST_CASE("synthetic questions carry answers from the record class") {
  SynthConfig sc;
  sc.records = 48;
  sc.classes = 8;
  const Corpus c = synth_corpus(sc, 1);
  const auto& answers = AnswerVocabulary::builtin();
  const VqaCorpus v = synth_vqa(c, answers, 16, 2);
  REQUIRE(v.samples.size() == c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    const ClassSpec spec = class_spec(static_cast<std::size_t>(*c.records[i].label));
    const std::string& q = v.samples[i].question.raw_text;
    const std::string& a = answers.answer(static_cast<std::size_t>(v.samples[i].answer));
    if (q == "which side") CHECK(a == spec.laterality);
    else if (q == "what body part") CHECK(a == spec.body_part);
    else CHECK(a == (spec.present && q == "is there " + spec.finding ? "yes" : "no"));
    CHECK(v.samples[i].image.pixels == c.records[i].image.pixels);
  }
  CHECK(synth_vqa(c, answers, 16, 2).answers() == v.answers());
}

TEST_CASE("trained co-attention head fits the synthetic VQA task") {
  SynthConfig sc;
  sc.records = 96;
  sc.classes = 12;
  const Corpus c = synth_corpus(sc, 3);
  const auto enc = init_dual_encoder(encoder_config_for(c.header), 3);
  const VqaTokens tokens = vqa_tokens(enc, synth_vqa(c, AnswerVocabulary::builtin(), 16, 3));
  CHECK(tokens.image.front().rows() == enc.config.image_tokens());

  RanConfig cfg;
  cfg.mode = TuneMode::Ran;
  cfg.epochs = 60;
  cfg.seed = 1;
  const VqaModel model = train_vqa(tokens, AnswerVocabulary::builtin().size(), cfg);
  const double acc = accuracy(predict_vqa(model, tokens), tokens.answers);
  MESSAGE("vqa train accuracy " << acc);
  CHECK(acc >= 0.9);
  CHECK(acc == model.tuned.log.back().train_accuracy);
}
