#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ranlab/data.hpp"

namespace ranlab {

/// The three caption attack objectives, plus the random-substitution
/// baseline used for random-noise corpora.
enum class CaptionObjective { BodyPart, Opposite, SeverityLaterality, Random };

std::string_view objective_name(CaptionObjective o);
CaptionObjective parse_objective(std::string_view name);

/// Word swaps for the rule-based engine.
///
/// File format: UTF-8 text with `[body_parts]`, `[opposites]` and
/// `[modifiers]` sections (plus optional `[negations]` and `[findings]`).
/// Body-part lines list a group of interchangeable words; opposite and
/// modifier lines hold one symmetric pair. `#` starts a comment.
struct SwapDictionary {
  std::vector<std::vector<std::string>> body_part_groups;
  std::vector<std::pair<std::string, std::string>> polarity_pairs;
  std::vector<std::pair<std::string, std::string>> severity_laterality_pairs;
  std::vector<std::string> negations;
  std::vector<std::string> findings;

  static SwapDictionary parse(std::string_view text);
  static SwapDictionary load(const std::filesystem::path& path);
  /// The dictionary shipped in data/swap_dictionary.txt.
  static const SwapDictionary& builtin();
  static std::string_view builtin_text();

  /// No word in two groups/pairs, no self-pairs. Throws ConfigError.
  void validate() const;
  const std::vector<std::string>* body_group_of(std::string_view word) const;
  std::optional<std::string> polarity_opposite(std::string_view word) const;
  std::optional<std::string> modifier_opposite(std::string_view word) const;
  bool is_negation(std::string_view word) const;
  bool is_finding(std::string_view word) const;
};

/// One word-level edit. `position` indexes the word sequence as it stood
/// when the edit was applied; an empty `original` is an insertion and an
/// empty `replacement` a deletion.
struct CaptionEdit {
  std::size_t position = 0;
  std::string original;
  std::string replacement;
  CaptionObjective tag = CaptionObjective::BodyPart;

  friend bool operator==(const CaptionEdit&, const CaptionEdit&) = default;
};

struct PerturbedCaption {
  std::string original;
  std::string perturbed;
  std::vector<CaptionEdit> edits;
  CaptionObjective objective = CaptionObjective::BodyPart;
  /// No dictionary term applied; perturbed equals the normalized original.
  bool no_hit = false;
  /// The LLM path failed and the rule-based engine produced this result.
  bool fallback = false;
  std::string fallback_reason;

  friend bool operator==(const PerturbedCaption&, const PerturbedCaption&) = default;
};

inline constexpr std::size_t kDefaultMaxEdits = 3;

/// Applies one objective. Words are lowercased and punctuation dropped, so
/// `perturbed` is the normalized word sequence joined by spaces.
PerturbedCaption perturb_rule_based(std::string_view caption, const SwapDictionary& dict,
                                    CaptionObjective objective, std::uint64_t seed);

/// Applies several objectives in order, stopping at `max_edits` edits.
/// `objective` of the result is the first objective that hit.
PerturbedCaption perturb_combined(std::string_view caption, const SwapDictionary& dict,
                                  std::span<const CaptionObjective> objectives, std::uint64_t seed,
                                  std::size_t max_edits = kDefaultMaxEdits);

/// Undoes the edits of a rule-based result (in reverse order).
std::string revert_edits(const PerturbedCaption& p);

/// Replaces each word with probability `rate` by a different word drawn
/// uniformly from the vocabulary's non-special words.
PerturbedCaption perturb_random(std::string_view caption, const Vocabulary& vocab, double rate,
                                std::uint64_t seed);

/// Word-level diff (LCS); adjacent delete/insert runs pair into substitutions.
std::vector<CaptionEdit> diff_words(const std::vector<std::string>& before,
                                    const std::vector<std::string>& after, CaptionObjective tag);

/// Chat-completion endpoint settings. Credentials are read from the
/// environment variable named by `auth_env`, never from config files.
struct LlmEndpointConfig {
  std::string base_url;  // e.g. http://127.0.0.1:8080
  std::string path = "/v1/chat/completions";
  std::string model = "llama3-8b";
  std::string auth_header = "Authorization";
  std::string auth_env = "RANLAB_LLM_TOKEN";
  std::string auth_prefix = "Bearer ";
  int timeout_ms = 10000;
  int max_retries = 2;
  int backoff_ms = 200;
  bool fallback = true;
  std::size_t max_in_flight = 4;
};

/// Default objective-specific instruction, containing "{caption}".
std::string_view default_prompt_template(CaptionObjective objective);
std::string render_prompt(std::string_view prompt_template, std::string_view caption);

/// Accepts a model response for `original` or throws ValidationError.
void validate_llm_response(std::string_view original, std::string_view response);

PerturbedCaption perturb_llm(std::string_view caption, const LlmEndpointConfig& endpoint,
                             std::string_view prompt_template, CaptionObjective objective,
                             const SwapDictionary& dict = SwapDictionary::builtin(),
                             std::uint64_t seed = 0);

/// Batched perturb_llm with at most `max_in_flight` concurrent requests;
/// results keep input order.
std::vector<PerturbedCaption> perturb_llm_all(const std::vector<std::string>& captions,
                                              const LlmEndpointConfig& endpoint,
                                              std::string_view prompt_template,
                                              CaptionObjective objective,
                                              const SwapDictionary& dict = SwapDictionary::builtin(),
                                              std::uint64_t seed = 0);

}  // namespace ranlab
