#include "ranlab/data.hpp"

#include <cctype>

#include "ranlab/errors.hpp"

namespace ranlab {

Vocabulary::Vocabulary(const std::vector<std::string>& words) {
  words_ = {"<pad>", "<unk>"};
  for (const auto& w : words) {
    RANLAB_REQUIRE(!w.empty(), "vocabulary words must be nonempty");
    RANLAB_REQUIRE(!lookup_.contains(w) && w != "<pad>" && w != "<unk>",
                   "duplicate vocabulary word '" + w + "'");
    lookup_.emplace(w, static_cast<int>(words_.size()));
    words_.push_back(w);
  }
}

const Vocabulary& Vocabulary::builtin() {
  static const Vocabulary vocab({
      // function words
      "no", "without", "not", "there", "is", "are", "a", "an", "the", "in", "of", "on", "at",
      "shows", "show", "with", "and", "evidence", "image", "scan", "radiograph", "view", "seen",
      "noted", "finding", "findings", "visible", "this", "does", "have", "any", "which", "what",
      "where", "side", "body", "part", "region", "area", "yes",
      // polarity and modifiers
      "present", "absent", "normal", "abnormal", "increased", "decreased", "positive", "negative",
      "left", "right", "mild", "severe", "small", "large", "acute", "chronic",
      // anatomy
      "chest", "abdomen", "head", "lung", "pelvis", "spine", "femur", "tibia", "humerus",
      "pleural",
      // findings
      "effusion", "fracture", "nodule", "opacity", "mass", "pneumothorax", "device",
  });
  return vocab;
}

const std::string& Vocabulary::word(int index) const {
  RANLAB_REQUIRE(index >= 0 && static_cast<std::size_t>(index) < words_.size(),
                 "token " + std::to_string(index) + " outside vocabulary of size " +
                     std::to_string(words_.size()));
  return words_[static_cast<std::size_t>(index)];
}

int Vocabulary::index(std::string_view word) const {
  const auto it = lookup_.find(std::string(word));
  return it == lookup_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view word) const { return lookup_.contains(std::string(word)); }

std::vector<std::string> Vocabulary::split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c == '_' || c == '-' || c >= 0x80) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::vector<int> Vocabulary::tokenize(std::string_view text) const {
  std::vector<int> out;
  for (const auto& w : split_words(text)) out.push_back(index(w));
  return out;
}

std::string Vocabulary::detokenize(const std::vector<int>& tokens) const {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += word(tokens[i]);
  }
  return out;
}

CaptionSample make_caption(std::string_view text, const Vocabulary& vocab, std::size_t max_tokens) {
  CaptionSample c;
  c.raw_text = std::string(text);
  c.tokens = vocab.tokenize(text);
  if (c.tokens.size() > max_tokens) {
    c.tokens.resize(max_tokens);
    c.truncated = true;
  }
  return c;
}

std::string_view provenance_name(Provenance p) {
  switch (p) {
    case Provenance::Clean: return "clean";
    case Provenance::ImageAdv: return "image-adv";
    case Provenance::CaptionAdv: return "caption-adv";
    case Provenance::RandomNoise: return "random-noise";
  }
  throw ContractViolation("unknown provenance tag");
}

Provenance parse_provenance(std::string_view name) {
  for (auto p : {Provenance::Clean, Provenance::ImageAdv, Provenance::CaptionAdv,
                 Provenance::RandomNoise})
    if (provenance_name(p) == name) return p;
  throw ContractViolation("unknown provenance '" + std::string(name) + "'");
}

void validate_image(const ImageSample& image, const CorpusHeader& header) {
  const Shape expected{header.height, header.width, header.channels};
  RANLAB_REQUIRE(image.pixels.shape() == expected,
                 "image '" + image.id + "' has shape " + shape_string(image.pixels.shape()) +
                     ", corpus declares " + shape_string(expected));
  for (double v : image.pixels.data())
    RANLAB_REQUIRE(v >= 0.0 && v <= 1.0, "image '" + image.id + "' has a pixel outside [0,1]");
}

void Corpus::validate() const {
  for (const auto& r : records) {
    validate_image(r.image, header);
    for (int t : r.caption.tokens)
      RANLAB_REQUIRE(t >= 0 && static_cast<std::size_t>(t) < header.vocab_size,
                     "record '" + r.image.id + "' has token outside the vocabulary");
    if (r.label)
      RANLAB_REQUIRE(*r.label >= 0 && static_cast<std::size_t>(*r.label) < header.num_classes,
                     "record '" + r.image.id + "' has label outside [0,k)");
  }
}

Array Corpus::image_matrix() const {
  RANLAB_REQUIRE(!records.empty(), "image_matrix of an empty corpus");
  const std::size_t p = header.pixels_per_image();
  Array m(Shape{records.size(), p});
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& px = records[i].image.pixels;
    RANLAB_REQUIRE(px.size() == p, "image size does not match corpus header");
    for (std::size_t j = 0; j < p; ++j) m[i * p + j] = px[j];
  }
  return m;
}

std::vector<int> Corpus::labels() const {
  std::vector<int> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    RANLAB_REQUIRE(r.label.has_value(), "record '" + r.image.id + "' has no label");
    out.push_back(*r.label);
  }
  return out;
}

}  // namespace ranlab
