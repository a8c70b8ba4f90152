#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "ranlab/caption_attack.hpp"
#include "ranlab/data.hpp"
#include "ranlab/encoders.hpp"
#include "ranlab/image_attack.hpp"
#include "ranlab/rng.hpp"

namespace ranlab {

// ---------------------------------------------------------------------------
// Synthetic radiology-like corpora

enum class Domain { A, B };
std::string_view domain_name(Domain d);
Domain parse_domain(std::string_view name);

/// One class of the synthetic world: a finding at a body part on one side,
/// either present or absent. Classes are enumerated polarity fastest, then
/// laterality, then body part, then finding.
struct ClassSpec {
  std::string finding;
  std::string body_part;
  std::string laterality;
  bool present = true;

  friend bool operator==(const ClassSpec&, const ClassSpec&) = default;
};

inline constexpr std::size_t kNumSyntheticClasses = 24;

ClassSpec class_spec(std::size_t index);
std::string class_name(std::size_t index);
/// Class index implied by the caption's keywords, or nullopt when it names
/// no finding/body part/side. Negation words make the finding absent.
std::optional<std::size_t> class_from_caption(std::string_view text);

struct SynthConfig {
  std::size_t records = 200;
  std::size_t classes = 4;
  std::size_t height = 12;
  std::size_t width = 12;
  std::size_t channels = 1;
  std::size_t max_tokens = 16;
  Domain domain = Domain::A;
  /// Per-pixel Gaussian noise.
  double pixel_noise = 0.05;
  /// Mean intensity offset of domain-B images.
  double domain_shift = 0.15;

  void validate() const;
};

/// Balanced procedural corpus: record i has class i mod k. Images are a base
/// intensity, body-part texture, a side marker and a finding blob on that
/// side when present, plus noise; captions are templates naming the class.
Corpus synth_corpus(const SynthConfig& config, std::uint64_t seed);

/// Seeded split into (train, test), disjoint by record id.
std::pair<Corpus, Corpus> split_corpus(const Corpus& corpus, double train_fraction, std::uint64_t seed);
Corpus concat_corpora(const Corpus& a, const Corpus& b);

// ---------------------------------------------------------------------------
// Corpus files
//
// Header: "RANLABCP" magic, u32 version, u64 N, u32 H, W, C, vocab size, k.
// Then N framed records: u32 byte length followed by id, source_id, raw text
// (u32-prefixed strings), u8 truncated, u32 token count + i32 tokens,
// i32 label (-1 when absent), u8 provenance, H*W*C little-endian float64.

std::vector<std::uint8_t> serialize_corpus(const Corpus& corpus);
Corpus deserialize_corpus(std::span<const std::uint8_t> bytes);
void write_corpus(const std::filesystem::path& path, const Corpus& corpus);
Corpus read_corpus(const std::filesystem::path& path);
/// SHA-256 of the serialized corpus.
std::string corpus_checksum(const Corpus& corpus);

// ---------------------------------------------------------------------------
// Crafting

enum class NoiseKind { ImageAdv, CaptionAdv, RandomNoise };
std::string_view noise_kind_name(NoiseKind k);
NoiseKind parse_noise_kind(std::string_view name);
Provenance provenance_of(NoiseKind k);

struct NoiseSpec {
  double gamma = 0.0;
  NoiseKind kind = NoiseKind::ImageAdv;
  std::uint64_t seed = 0;
  AttackConfig attack;
  /// Caption objectives applied in order (at most kDefaultMaxEdits edits).
  std::vector<CaptionObjective> objectives{CaptionObjective::Opposite,
                                           CaptionObjective::SeverityLaterality,
                                           CaptionObjective::BodyPart};
  /// Random-noise baseline: word substitution rate and pixel noise.
  double random_rate = 0.2;
  double random_pixel_sigma = 8.0 / 255.0;

  void validate() const;
  nlohmann::json to_json() const;
};

/// floor(gamma * N), robust to gamma values like 0.05 that are inexact in binary.
std::size_t perturbed_count(double gamma, std::size_t n);
/// Sorted indices chosen by a seeded Fisher-Yates prefix.
std::vector<std::size_t> select_indices(std::size_t n, double gamma, std::uint64_t seed);

/// Perturbs one record. Implementations must be safe to call concurrently.
class Attacker {
 public:
  virtual ~Attacker() = default;
  virtual NoiseKind kind() const = 0;
  /// Returns the perturbed record and fills `meta`; throws on failure.
  virtual CorpusRecord perturb(const CorpusRecord& record, std::uint64_t seed,
                               nlohmann::json& meta) const = 0;
};

/// PGD toward the image of a record drawn from `targets`.
class ImageAttacker : public Attacker {
 public:
  ImageAttacker(const DualEncoderParams& surrogate, const Corpus& targets, AttackConfig cfg);
  NoiseKind kind() const override { return NoiseKind::ImageAdv; }
  CorpusRecord perturb(const CorpusRecord& record, std::uint64_t seed, nlohmann::json& meta) const override;

 private:
  const DualEncoderParams& surrogate_;
  const Corpus& targets_;
  AttackConfig cfg_;
};

/// Rule-based caption rewrite; the image is kept.
class CaptionAttacker : public Attacker {
 public:
  CaptionAttacker(const SwapDictionary& dict, std::vector<CaptionObjective> objectives,
                  const Vocabulary& vocab, std::size_t max_tokens,
                  std::size_t max_edits = kDefaultMaxEdits);
  NoiseKind kind() const override { return NoiseKind::CaptionAdv; }
  CorpusRecord perturb(const CorpusRecord& record, std::uint64_t seed, nlohmann::json& meta) const override;

 private:
  const SwapDictionary& dict_;
  std::vector<CaptionObjective> objectives_;
  const Vocabulary& vocab_;
  std::size_t max_tokens_;
  std::size_t max_edits_;
};

/// Gaussian pixel noise plus random word substitution.
class RandomNoiseAttacker : public Attacker {
 public:
  RandomNoiseAttacker(const Vocabulary& vocab, double rate, double pixel_sigma, std::size_t max_tokens);
  NoiseKind kind() const override { return NoiseKind::RandomNoise; }
  CorpusRecord perturb(const CorpusRecord& record, std::uint64_t seed, nlohmann::json& meta) const override;

 private:
  const Vocabulary& vocab_;
  double rate_;
  double pixel_sigma_;
  std::size_t max_tokens_;
};

struct CraftManifest {
  NoiseSpec spec;
  std::size_t n = 0;
  std::vector<std::size_t> perturbed_indices;
  /// One entry per perturbed index: {index, id, source_id, ...attack fields}.
  nlohmann::json records = nlohmann::json::array();
  std::string clean_checksum;
  std::string noisy_checksum;

  nlohmann::json to_json() const;
};

struct CraftResult {
  Corpus noisy;
  CraftManifest manifest;
};

/// Perturbs floor(gamma N) seeded records. Any attacker failure aborts the
/// whole call with the record id; nothing is returned partially.
CraftResult craft(const Corpus& clean, const NoiseSpec& spec, const Attacker& attacker,
                  std::size_t jobs = 1);

/// Writes corpus and `<corpus>.manifest.json` atomically.
void write_crafted(const std::filesystem::path& corpus_path, const CraftResult& result);

}  // namespace ranlab
