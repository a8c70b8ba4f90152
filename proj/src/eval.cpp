#include "ranlab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ranlab/errors.hpp"
#include "ranlab/noisy_dataset.hpp"

namespace ranlab {

double auc(std::span<const double> scores, std::span<const int> labels) {
  RANLAB_REQUIRE(scores.size() == labels.size(), "auc: one label per score required");
  const std::size_t n = scores.size();
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n; ++i) {
    RANLAB_REQUIRE(labels[i] == 0 || labels[i] == 1, "auc: labels must be 0 or 1");
    RANLAB_REQUIRE(!std::isnan(scores[i]), "auc: NaN score");
    pos += static_cast<std::size_t>(labels[i]);
  }
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) throw UndefinedMetric("auc: labels contain a single class");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Sum of positive ranks, doubled so midranks stay integral.
  std::size_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const std::size_t twice_mid = i + j + 1;  // 2 * mean of 1-based ranks i+1..j
    for (std::size_t t = i; t < j; ++t)
      if (labels[order[t]] == 1) twice_rank_sum += twice_mid;
    i = j;
  }
  const std::size_t twice_u = twice_rank_sum - pos * (pos + 1);
  return static_cast<double>(twice_u) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& a : per_label_auc) per.push_back(a ? nlohmann::json(*a) : nlohmann::json(nullptr));
  return {{"per_label_auc", per},         {"macro_auc", macro_auc},
          {"accuracy", accuracy},         {"n_eval", n_eval},
          {"undefined_labels", undefined_labels}, {"fingerprint", fingerprint}};
}

MetricReport macro_metrics(const Array& scores, const Array& labels, AccuracyRule rule) {
  RANLAB_REQUIRE(scores.rank() == 2 && scores.shape() == labels.shape(), "macro_metrics: shapes differ");
  const std::size_t n = scores.rows(), k = scores.cols();
  RANLAB_REQUIRE(n > 0 && k > 0, "macro_metrics: empty score matrix");
  MetricReport r;
  r.n_eval = n;
  double sum = 0.0;
  std::size_t defined = 0;
  std::vector<double> col(n);
  std::vector<int> lab(n);
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      col[i] = scores.at(i, j);
      const double l = labels.at(i, j);
      RANLAB_REQUIRE(l == 0.0 || l == 1.0, "macro_metrics: labels must be 0 or 1");
      lab[i] = static_cast<int>(l);
    }
    try {
      const double a = auc(col, lab);
      r.per_label_auc.push_back(a);
      sum += a;
      ++defined;
    } catch (const UndefinedMetric&) {
      r.per_label_auc.push_back(std::nullopt);
      r.undefined_labels.push_back(j);
    }
  }
  if (defined == 0) throw UndefinedMetric("macro_metrics: every label has a single class");
  r.macro_auc = sum / static_cast<double>(defined);

  double hits = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = scores.row(i), l = labels.row(i);
    if (rule == AccuracyRule::SingleLabel) {
      const auto p = static_cast<std::size_t>(std::max_element(s.begin(), s.end()) - s.begin());
      hits += l[p] == 1.0 ? 1.0 : 0.0;
    } else {
      double agree = 0.0;
      for (std::size_t j = 0; j < k; ++j) agree += (s[j] > 0.5) == (l[j] == 1.0) ? 1.0 : 0.0;
      hits += agree / static_cast<double>(k);
    }
  }
  r.accuracy = hits / static_cast<double>(n);
  return r;
}

Array one_hot(std::span<const int> labels, std::size_t classes) {
  Array out(Shape{labels.size(), classes}, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    RANLAB_REQUIRE(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < classes, "one_hot: label outside [0,k)");
    out.at(i, static_cast<std::size_t>(labels[i])) = 1.0;
  }
  return out;
}

Array softmax_scores(const Array& logits) {
  RANLAB_REQUIRE(logits.rank() == 2, "softmax_scores: expected a matrix");
  Array out = logits;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto row = out.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double& v : row) z += (v = std::exp(v - mx));
    for (double& v : row) v /= z;
  }
  return out;
}

namespace {

constexpr std::string_view kPlaceholder = "{label}";

std::size_t count_placeholders(const std::string& t) {
  std::size_t c = 0;
  for (std::size_t p = t.find(kPlaceholder); p != std::string::npos; p = t.find(kPlaceholder, p + 1)) ++c;
  return c;
}

std::string fill(const std::string& t, const std::string& label) {
  std::string out = t;
  out.replace(out.find(kPlaceholder), kPlaceholder.size(), label);
  return out;
}

}  // namespace

void ZeroShotSpec::validate() const {
  RANLAB_REQUIRE(count_placeholders(positive_template) == 1, "zero-shot: positive template needs exactly one {label}");
  RANLAB_REQUIRE(count_placeholders(negative_template) == 1, "zero-shot: negative template needs exactly one {label}");
  RANLAB_REQUIRE(!labels.empty(), "zero-shot: no labels");
}

std::string ZeroShotSpec::positive(const std::string& label) const { return fill(positive_template, label); }
std::string ZeroShotSpec::negative(const std::string& label) const { return fill(negative_template, label); }

ZeroShotPrompts encode_prompts(const DualEncoderParams& encoder, const ZeroShotSpec& spec, const Vocabulary& vocab,
                               std::size_t max_tokens) {
  spec.validate();
  std::vector<std::string> bad;
  for (const auto& label : spec.labels) {
    const auto words = Vocabulary::split_words(label);
    if (words.empty() || std::any_of(words.begin(), words.end(), [&](const auto& w) { return !vocab.contains(w); }))
      bad.push_back(label);
  }
  if (!bad.empty()) {
    std::string list;
    for (const auto& b : bad) list += (list.empty() ? "'" : ", '") + b + "'";
    throw ContractViolation("zero-shot: labels not in vocabulary: " + list);
  }
  ZeroShotPrompts p;
  for (const auto& label : spec.labels) {
    p.positive.push_back(normalize(encode_text(encoder, make_caption(spec.positive(label), vocab, max_tokens))));
    p.negative.push_back(normalize(encode_text(encoder, make_caption(spec.negative(label), vocab, max_tokens))));
  }
  return p;
}

ZeroShotPrediction zero_shot_classify(const DualEncoderParams& encoder, const ImageSample& image,
                                      const ZeroShotPrompts& prompts) {
  const Embedding u = normalize(encode_image(encoder, image));
  ZeroShotPrediction out;
  for (std::size_t j = 0; j < prompts.positive.size(); ++j) {
    const double m = cosine(u, prompts.positive[j]) - cosine(u, prompts.negative[j]);
    out.margin.push_back(m);
    out.positive.push_back(m > 0.0);
  }
  return out;
}

ZeroShotPrediction zero_shot_classify(const DualEncoderParams& encoder, const ImageSample& image,
                                      const ZeroShotSpec& spec, const Vocabulary& vocab, std::size_t max_tokens) {
  return zero_shot_classify(encoder, image, encode_prompts(encoder, spec, vocab, max_tokens));
}

std::optional<bool> synthetic_truth(const CorpusRecord& record, const std::string& label) {
  RANLAB_REQUIRE(record.label.has_value(), "zero-shot: record '" + record.image.id + "' has no label");
  const ClassSpec spec = class_spec(static_cast<std::size_t>(*record.label));
  if (spec.finding != label) return std::nullopt;
  return spec.present;
}

nlohmann::json ZeroShotReport::to_json() const {
  return {{"pairs", pairs}, {"accuracy", accuracy}, {"sigma", sigma}, {"z_score", z_score}, {"metrics", metrics.to_json()}};
}

ZeroShotReport zero_shot_evaluate(const DualEncoderParams& encoder, const Corpus& corpus, const ZeroShotSpec& spec,
                                  const LabelTruth& truth, std::size_t max_tokens) {
  RANLAB_REQUIRE(!corpus.empty(), "zero-shot: corpus is empty");
  const ZeroShotPrompts prompts = encode_prompts(encoder, spec, Vocabulary::builtin(), max_tokens);
  const std::size_t n = corpus.size(), k = spec.labels.size();
  std::vector<std::vector<double>> margins(k);
  std::vector<std::vector<int>> truths(k);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto pred = zero_shot_classify(encoder, corpus.records[i].image, prompts);
    for (std::size_t j = 0; j < k; ++j) {
      const auto t = truth(corpus.records[i], spec.labels[j]);
      if (!t) continue;
      margins[j].push_back(pred.margin[j]);
      truths[j].push_back(*t ? 1 : 0);
      hits += pred.positive[j] == *t;
    }
  }
  ZeroShotReport r;
  for (const auto& t : truths) r.pairs += t.size();
  if (r.pairs == 0) throw UndefinedMetric("zero-shot: no scored (record, label) pairs");
  r.accuracy = static_cast<double>(hits) / static_cast<double>(r.pairs);
  r.sigma = std::sqrt(0.25 / static_cast<double>(r.pairs));
  r.z_score = (r.accuracy - 0.5) / r.sigma;

  MetricReport& m = r.metrics;
  double sum = 0.0;
  std::size_t defined = 0;
  for (std::size_t j = 0; j < k; ++j) {
    try {
      m.per_label_auc.push_back(auc(margins[j], truths[j]));
      sum += *m.per_label_auc.back();
      ++defined;
    } catch (const UndefinedMetric&) {
      m.per_label_auc.push_back(std::nullopt);
      m.undefined_labels.push_back(j);
    }
  }
  m.macro_auc = defined ? sum / static_cast<double>(defined) : std::nan("");
  m.accuracy = r.accuracy;
  m.n_eval = r.pairs;
  return r;
}

}  // namespace ranlab
