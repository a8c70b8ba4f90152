#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ranlab/data.hpp"
#include "ranlab/encoders.hpp"
#include "ranlab/ran_finetune.hpp"
#include "ranlab/tape.hpp"

namespace ranlab {

/// Ordered, duplicate-free answer strings; line index is the class index.
class AnswerVocabulary {
 public:
  explicit AnswerVocabulary(std::vector<std::string> answers);
  /// One answer per line; blank lines are skipped.
  static AnswerVocabulary parse(std::string_view text);
  static AnswerVocabulary load(const std::filesystem::path& path);
  static const AnswerVocabulary& builtin();

  std::size_t size() const { return answers_.size(); }
  const std::string& answer(std::size_t i) const;
  /// ContractViolation for unknown answers.
  int index(std::string_view answer) const;
  const std::vector<std::string>& answers() const { return answers_; }
  std::string to_text() const;

 private:
  std::vector<std::string> answers_;
};

struct QuestionSample {
  ImageSample image;
  CaptionSample question;
  int answer = 0;
};

struct VqaCorpus {
  CorpusHeader header;
  std::vector<QuestionSample> samples;

  std::vector<int> answers() const;
};

/// One closed question per record of a synthetic corpus: presence of a
/// finding (yes/no), laterality or body part. Answers are caption keywords.
VqaCorpus synth_vqa(const Corpus& corpus, const AnswerVocabulary& answers, std::size_t max_tokens,
                    std::uint64_t seed);

/// f_v followed by f_q.
Array fuse_concat(const Array& f_v, const Array& f_q);
std::pair<Array, Array> split_fused(const Array& fused);

/// Single-head cross attention in both directions. Text queries attend image
/// keys/values and image queries attend text keys/values; each stream is
/// projected, mean-pooled over its queries, and the two are summed.
struct CoAttentionBlock {
  std::size_t dim = 0;
  Array wq_text, wk_image, wv_image, wo_text;
  Array wq_image, wk_text, wv_text, wo_image;

  std::vector<std::pair<std::string, Array*>> tensors();
  std::vector<std::pair<std::string, const Array*>> tensors() const;
};

CoAttentionBlock init_coattention(std::size_t dim, std::uint64_t seed);

/// Attention weights from one forward pass: (l, m) text->image and (m, l)
/// image->text.
struct AttentionMaps {
  Array text_to_image;
  Array image_to_text;
};

/// `w` holds the block tensors in tensors() order. Returns a (D) vector.
Var fuse_coattention(std::span<const Var> w, Var image_tokens, Var text_tokens, AttentionMaps* maps = nullptr);
Array fuse_coattention(const Array& image_tokens, const Array& text_tokens, const CoAttentionBlock& block,
                       AttentionMaps* maps = nullptr);

/// Scores over the answer vocabulary for (n, D) or (D) fused features.
Array vqa_classify(const Array& fused, const TransformHead& classifier);

/// Frozen encoder token states per sample: image patch tokens (m, D) and
/// question tokens (l, D).
struct VqaTokens {
  std::vector<Array> image;
  std::vector<Array> text;
  std::vector<int> answers;

  std::size_t size() const { return answers.size(); }
};

/// Requires the encoder's image token width to equal its text token width.
VqaTokens vqa_tokens(const DualEncoderParams& encoder, const VqaCorpus& corpus);

struct VqaModel {
  CoAttentionBlock block;
  FineTuneResult tuned;
};

/// Trains the co-attention block jointly with a head from cfg.mode. In Ran
/// mode the regularizers see F = fused and Z = MLP(fused).
VqaModel train_vqa(const VqaTokens& train, std::size_t answers, const RanConfig& cfg);

Array fused_features(const VqaTokens& tokens, const CoAttentionBlock& block);
std::vector<int> predict_vqa(const VqaModel& model, const VqaTokens& tokens);

}  // namespace ranlab
