#include "ranlab/fusion_vqa.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>

#include "ranlab/errors.hpp"
#include "ranlab/io.hpp"
#include "ranlab/noisy_dataset.hpp"
#include "ranlab/ops.hpp"
#include "ranlab/rng.hpp"

namespace ranlab {

AnswerVocabulary::AnswerVocabulary(std::vector<std::string> answers) : answers_(std::move(answers)) {
  RANLAB_REQUIRE(answers_.size() >= 2, "answer vocabulary needs at least two answers");
  std::set<std::string> seen;
  for (const auto& a : answers_) {
    RANLAB_REQUIRE(!a.empty(), "answer vocabulary: empty answer");
    RANLAB_REQUIRE(seen.insert(a).second, "answer vocabulary: duplicate answer '" + a + "'");
  }
}

AnswerVocabulary AnswerVocabulary::parse(std::string_view text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.remove_suffix(1);
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.front()))) line.remove_prefix(1);
    if (!line.empty()) out.emplace_back(line);
    start = end + 1;
  }
  return AnswerVocabulary(std::move(out));
}

AnswerVocabulary AnswerVocabulary::load(const std::filesystem::path& path) {
  try {
    return parse(io::read_text(path));
  } catch (const ContractViolation& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

const AnswerVocabulary& AnswerVocabulary::builtin() {
  static const AnswerVocabulary v({"yes", "no", "left", "right", "chest", "abdomen", "head"});
  return v;
}

const std::string& AnswerVocabulary::answer(std::size_t i) const {
  RANLAB_REQUIRE(i < answers_.size(), "answer index out of range");
  return answers_[i];
}

int AnswerVocabulary::index(std::string_view answer) const {
  const auto it = std::find(answers_.begin(), answers_.end(), answer);
  RANLAB_REQUIRE(it != answers_.end(), "unknown answer '" + std::string(answer) + "'");
  return static_cast<int>(it - answers_.begin());
}

std::string AnswerVocabulary::to_text() const {
  std::string out;
  for (const auto& a : answers_) out += a + "\n";
  return out;
}

std::vector<int> VqaCorpus::answers() const {
  std::vector<int> out;
  for (const auto& s : samples) out.push_back(s.answer);
  return out;
}

VqaCorpus synth_vqa(const Corpus& corpus, const AnswerVocabulary& answers, std::size_t max_tokens,
                    std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x7a9));
  const Vocabulary& vocab = Vocabulary::builtin();
  VqaCorpus out{corpus.header, {}};
  for (const auto& r : corpus.records) {
    RANLAB_REQUIRE(r.label.has_value(), "synth_vqa: record '" + r.image.id + "' has no label");
    const ClassSpec spec = class_spec(static_cast<std::size_t>(*r.label));
    std::string question, answer;
    switch (rng.below(3)) {
      case 0: {
        const std::string finding = rng.bernoulli(0.5) ? "effusion" : "fracture";
        question = "is there " + finding;
        answer = spec.present && spec.finding == finding ? "yes" : "no";
        break;
      }
      case 1:
        question = "which side";
        answer = spec.laterality;
        break;
      default:
        question = "what body part";
        answer = spec.body_part;
    }
    out.samples.push_back({r.image, make_caption(question, vocab, max_tokens), answers.index(answer)});
  }
  return out;
}

Array fuse_concat(const Array& f_v, const Array& f_q) {
  RANLAB_REQUIRE(f_v.rank() == 1 && f_q.rank() == 1 && f_v.size() == f_q.size(),
                 "fuse_concat: expected two vectors of equal dimension");
  std::vector<double> v = f_v.values();
  v.insert(v.end(), f_q.data().begin(), f_q.data().end());
  return Array::vector(std::move(v));
}

std::pair<Array, Array> split_fused(const Array& fused) {
  RANLAB_REQUIRE(fused.rank() == 1 && fused.size() % 2 == 0, "split_fused: expected an even-length vector");
  const auto v = fused.values();
  const auto half = static_cast<std::ptrdiff_t>(v.size() / 2);
  return {Array::vector({v.begin(), v.begin() + half}), Array::vector({v.begin() + half, v.end()})};
}

std::vector<std::pair<std::string, Array*>> CoAttentionBlock::tensors() {
  return {{"wq_text", &wq_text},   {"wk_image", &wk_image}, {"wv_image", &wv_image}, {"wo_text", &wo_text},
          {"wq_image", &wq_image}, {"wk_text", &wk_text},   {"wv_text", &wv_text},   {"wo_image", &wo_image}};
}

std::vector<std::pair<std::string, const Array*>> CoAttentionBlock::tensors() const {
  std::vector<std::pair<std::string, const Array*>> out;
  for (auto& [name, ptr] : const_cast<CoAttentionBlock*>(this)->tensors()) out.emplace_back(name, ptr);
  return out;
}

CoAttentionBlock init_coattention(std::size_t dim, std::uint64_t seed) {
  RANLAB_REQUIRE(dim > 0, "co-attention: dim must be positive");
  Rng rng(mix_seed(seed, 0xc0a7));
  CoAttentionBlock b;
  b.dim = dim;
  const double s = std::sqrt(1.0 / static_cast<double>(dim));
  for (auto& [name, t] : b.tensors()) {
    *t = Array(Shape{dim, dim});
    for (double& v : t->data()) v = rng.normal() * s;
  }
  return b;
}

namespace {

Var attend(Var queries, Var keys, Var values, Var wq, Var wk, Var wv, Var wo, double scale, Array* weights) {
  const Var q = ops::matmul(queries, wq);
  const Var k = ops::matmul(keys, wk);
  const Var a = ops::softmax_rows(ops::scale(ops::matmul_nt(q, k), scale));
  if (weights) *weights = a.value();
  return ops::mean_rows(ops::matmul(ops::matmul(a, ops::matmul(values, wv)), wo));
}

}  // namespace

Var fuse_coattention(std::span<const Var> w, Var image_tokens, Var text_tokens, AttentionMaps* maps) {
  RANLAB_REQUIRE(w.size() == 8, "fuse_coattention: expected 8 block tensors");
  const Array& iv = image_tokens.value();
  const Array& tv = text_tokens.value();
  RANLAB_REQUIRE(iv.rank() == 2 && tv.rank() == 2, "fuse_coattention: tokens must be (count, D) matrices");
  RANLAB_REQUIRE(iv.rows() >= 1 && tv.rows() >= 1, "fuse_coattention: empty token sequence");
  const std::size_t d = w[0].value().rows();
  RANLAB_REQUIRE(iv.cols() == d && tv.cols() == d, "fuse_coattention: token width differs from block dim");
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  const Var from_text = attend(text_tokens, image_tokens, image_tokens, w[0], w[1], w[2], w[3], scale,
                               maps ? &maps->text_to_image : nullptr);
  const Var from_image = attend(image_tokens, text_tokens, text_tokens, w[4], w[5], w[6], w[7], scale,
                                maps ? &maps->image_to_text : nullptr);
  return ops::add(from_text, from_image);
}

Array fuse_coattention(const Array& image_tokens, const Array& text_tokens, const CoAttentionBlock& block,
                       AttentionMaps* maps) {
  Tape tape;
  std::vector<Var> w;
  for (const auto& [name, t] : block.tensors()) w.push_back(tape.constant(*t));
  return fuse_coattention(w, tape.constant(image_tokens), tape.constant(text_tokens), maps).value();
}

Array vqa_classify(const Array& fused, const TransformHead& classifier) {
  const Array x = fused.rank() == 1 ? fused.reshaped({1, fused.size()}) : fused;
  RANLAB_REQUIRE(x.rank() == 2 && x.cols() == classifier.wc.rows(), "vqa_classify: feature width mismatch");
  return head_logits(classifier, x);
}

VqaTokens vqa_tokens(const DualEncoderParams& encoder, const VqaCorpus& corpus) {
  RANLAB_REQUIRE(encoder.config.stage2_channels == encoder.config.token_dim,
                 "vqa_tokens: image and text token widths differ");
  VqaTokens out;
  Tape tape;
  const EncoderGraph g = bind_encoder(tape, encoder, false);
  const std::size_t m = encoder.config.image_tokens();
  for (const auto& s : corpus.samples) {
    const Array px = s.image.pixels.reshaped({1, s.image.pixels.size()});
    out.image.push_back(image_token_features(g, tape.constant(px)).value());
    RANLAB_REQUIRE(out.image.back().rows() == m, "vqa_tokens: unexpected image token count");
    out.text.push_back(text_token_features(g, {s.question.tokens}).first.value());
    out.answers.push_back(s.answer);
  }
  return out;
}

namespace {

Var fused_rows(Tape& tape, std::span<const Var> w, const VqaTokens& tokens, std::span<const std::size_t> rows) {
  std::vector<Var> fused;
  fused.reserve(rows.size());
  for (auto r : rows) fused.push_back(fuse_coattention(w, tape.constant(tokens.image[r]), tape.constant(tokens.text[r])));
  return ops::stack_rows(fused);
}

}  // namespace

VqaModel train_vqa(const VqaTokens& train, std::size_t answers, const RanConfig& cfg) {
  RANLAB_REQUIRE(train.size() >= 2 && train.image.size() == train.size() && train.text.size() == train.size(),
                 "train_vqa: need at least two samples with image and text tokens");
  VqaModel model;
  model.block = init_coattention(train.image.front().cols(), mix_seed(cfg.seed, 0xb10c));
  FeatureStage stage;
  stage.params = model.block.tensors();
  stage.produce = [&](Tape& tape, std::span<const Var> w, std::span<const std::size_t> rows) {
    return fused_rows(tape, w, train, rows);
  };
  model.tuned = fine_tune(stage, train.size(), train.answers, std::nullopt, answers, cfg);
  return model;
}

Array fused_features(const VqaTokens& tokens, const CoAttentionBlock& block) {
  RANLAB_REQUIRE(tokens.size() >= 1, "fused_features: no samples");
  Tape tape;
  std::vector<Var> w;
  for (const auto& [name, t] : block.tensors()) w.push_back(tape.constant(*t));
  std::vector<std::size_t> rows(tokens.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return fused_rows(tape, w, tokens, rows).value();
}

std::vector<int> predict_vqa(const VqaModel& model, const VqaTokens& tokens) {
  return argmax_rows(vqa_classify(fused_features(tokens, model.block), model.tuned.head));
}

}  // namespace ranlab
