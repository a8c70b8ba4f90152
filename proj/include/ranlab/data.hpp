#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ranlab/array.hpp"

namespace ranlab {

/// Word-level vocabulary. Index 0 is the pad token and index 1 the
/// unknown-word token.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kNumSpecial = 2;

  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}
  /// `words` excludes the two special tokens, which are always prepended.
  explicit Vocabulary(const std::vector<std::string>& words);

  /// The fixed toy vocabulary shipped with the synthetic corpora.
  static const Vocabulary& builtin();

  std::size_t size() const { return words_.size(); }
  const std::string& word(int index) const;
  /// Index of `word`, or kUnk.
  int index(std::string_view word) const;
  bool contains(std::string_view word) const;

  /// Lowercases, splits on whitespace and strips punctuation.
  static std::vector<std::string> split_words(std::string_view text);
  std::vector<int> tokenize(std::string_view text) const;
  std::string detokenize(const std::vector<int>& tokens) const;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> lookup_;
};

/// Image stored as an (H, W, C) array of pixels in [0, 1].
struct ImageSample {
  Array pixels;
  std::string id;
};

struct CaptionSample {
  std::vector<int> tokens;
  std::string raw_text;
  /// Set when tokenization dropped words beyond the configured maximum.
  bool truncated = false;
};

CaptionSample make_caption(std::string_view text, const Vocabulary& vocab, std::size_t max_tokens);

enum class Provenance : std::uint8_t { Clean = 0, ImageAdv = 1, CaptionAdv = 2, RandomNoise = 3 };

std::string_view provenance_name(Provenance p);
Provenance parse_provenance(std::string_view name);

struct CorpusRecord {
  ImageSample image;
  CaptionSample caption;
  std::optional<int> label;
  Provenance provenance = Provenance::Clean;
  std::string source_id;
};

struct CorpusHeader {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::size_t vocab_size = 0;
  std::size_t num_classes = 0;

  std::size_t pixels_per_image() const { return height * width * channels; }
  friend bool operator==(const CorpusHeader&, const CorpusHeader&) = default;
};

struct Corpus {
  CorpusHeader header;
  std::vector<CorpusRecord> records;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
  /// Checks every record against the header invariants; throws ContractViolation.
  void validate() const;
  /// Images as an (n, H*W*C) matrix, in record order.
  Array image_matrix() const;
  std::vector<int> labels() const;
};

/// Shape and range check of one image against a header.
void validate_image(const ImageSample& image, const CorpusHeader& header);

}  // namespace ranlab
