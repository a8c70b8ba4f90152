#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "ranlab/array.hpp"
#include "ranlab/data.hpp"
#include "ranlab/encoders.hpp"

namespace ranlab {

/// Mann-Whitney AUC with midranks for ties. UndefinedMetric unless both
/// classes are present.
double auc(std::span<const double> scores, std::span<const int> labels);

/// Exact match of the argmax (one label per row) or per-label agreement of
/// scores thresholded at 0.5 (several labels per row).
enum class AccuracyRule { SingleLabel, MultiLabel };

struct MetricReport {
  /// Empty entries mark labels whose AUC is undefined.
  std::vector<std::optional<double>> per_label_auc;
  double macro_auc = 0.0;
  double accuracy = 0.0;
  std::size_t n_eval = 0;
  std::vector<std::size_t> undefined_labels;
  std::string fingerprint;

  nlohmann::json to_json() const;
};

MetricReport macro_metrics(const Array& scores, const Array& labels,
                           AccuracyRule rule = AccuracyRule::SingleLabel);

/// (n, k) 0/1 matrix with one 1 per row.
Array one_hot(std::span<const int> labels, std::size_t classes);
/// Row-wise softmax of a logit matrix.
Array softmax_scores(const Array& logits);

struct ZeroShotSpec {
  std::string positive_template = "{label}";
  std::string negative_template = "No {label}";
  std::vector<std::string> labels;

  /// Each template must hold exactly one "{label}".
  void validate() const;
  std::string positive(const std::string& label) const;
  std::string negative(const std::string& label) const;
};

struct ZeroShotPrediction {
  std::vector<bool> positive;
  /// cos(image, positive prompt) - cos(image, negative prompt).
  std::vector<double> margin;
};

/// Prompt embeddings for a spec, checked against the vocabulary.
struct ZeroShotPrompts {
  std::vector<Embedding> positive, negative;
};
ZeroShotPrompts encode_prompts(const DualEncoderParams& encoder, const ZeroShotSpec& spec,
                               const Vocabulary& vocab, std::size_t max_tokens);

/// Label j is positive iff its margin is strictly greater than zero.
ZeroShotPrediction zero_shot_classify(const DualEncoderParams& encoder, const ImageSample& image,
                                      const ZeroShotPrompts& prompts);
ZeroShotPrediction zero_shot_classify(const DualEncoderParams& encoder, const ImageSample& image,
                                      const ZeroShotSpec& spec, const Vocabulary& vocab,
                                      std::size_t max_tokens);

/// Ground truth for (record, label) pairs; nullopt leaves the pair unscored.
using LabelTruth = std::function<std::optional<bool>(const CorpusRecord&, const std::string&)>;
/// Synthetic corpora: only records showing the finding are scored, and the
/// truth is whether it is present. Each label is then balanced, so chance is 1/2.
std::optional<bool> synthetic_truth(const CorpusRecord& record, const std::string& label);

struct ZeroShotReport {
  std::size_t pairs = 0;
  double accuracy = 0.0;
  /// Binomial standard deviation of the accuracy under chance 1/2.
  double sigma = 0.0;
  /// (accuracy - 1/2) / sigma.
  double z_score = 0.0;
  MetricReport metrics;

  nlohmann::json to_json() const;
};

ZeroShotReport zero_shot_evaluate(const DualEncoderParams& encoder, const Corpus& corpus,
                                  const ZeroShotSpec& spec, const LabelTruth& truth = synthetic_truth,
                                  std::size_t max_tokens = 16);

}  // namespace ranlab
