#include "ranlab/caption_attack.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <sstream>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "ranlab/errors.hpp"
#include "ranlab/io.hpp"
#include "ranlab/parallel.hpp"
#include "ranlab/rng.hpp"

namespace ranlab {

namespace detail {
extern const std::string_view kBuiltinDictionary;
}

std::string_view objective_name(CaptionObjective o) {
  switch (o) {
    case CaptionObjective::BodyPart: return "body-part";
    case CaptionObjective::Opposite: return "opposite";
    case CaptionObjective::SeverityLaterality: return "severity-laterality";
    case CaptionObjective::Random: return "random";
  }
  throw ContractViolation("unknown caption objective");
}

CaptionObjective parse_objective(std::string_view name) {
  for (auto o : {CaptionObjective::BodyPart, CaptionObjective::Opposite,
                 CaptionObjective::SeverityLaterality, CaptionObjective::Random})
    if (objective_name(o) == name) return o;
  throw ContractViolation("unknown caption objective '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Dictionary

SwapDictionary SwapDictionary::parse(std::string_view text) {
  SwapDictionary d;
  std::istringstream in{std::string(text)};
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::vector<std::string> words;
    for (std::string w; ls >> w;) {
      std::transform(w.begin(), w.end(), w.begin(),
                     [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
      words.push_back(w);
    }
    if (words.empty()) continue;
    const auto where = "dictionary line " + std::to_string(lineno) + ": ";
    if (words.size() == 1 && words[0].size() > 2 && words[0].front() == '[' && words[0].back() == ']') {
      section = words[0].substr(1, words[0].size() - 2);
      if (section != "body_parts" && section != "opposites" && section != "modifiers" &&
          section != "negations" && section != "findings")
        throw ConfigError(where + "unknown section [" + section + "]");
      continue;
    }
    if (section.empty()) throw ConfigError(where + "entry before any section header");
    if (section == "body_parts") {
      if (words.size() < 2) throw ConfigError(where + "a body-part group needs at least two words");
      d.body_part_groups.push_back(words);
    } else if (section == "opposites" || section == "modifiers") {
      if (words.size() != 2) throw ConfigError(where + "expected exactly one pair");
      (section == "opposites" ? d.polarity_pairs : d.severity_laterality_pairs)
          .emplace_back(words[0], words[1]);
    } else {
      auto& dst = section == "negations" ? d.negations : d.findings;
      dst.insert(dst.end(), words.begin(), words.end());
    }
  }
  d.validate();
  return d;
}

SwapDictionary SwapDictionary::load(const std::filesystem::path& path) {
  return parse(io::read_text(path));
}

std::string_view SwapDictionary::builtin_text() { return detail::kBuiltinDictionary; }

const SwapDictionary& SwapDictionary::builtin() {
  static const SwapDictionary d = parse(builtin_text());
  return d;
}

void SwapDictionary::validate() const {
  std::vector<std::string> seen;
  auto add = [&](const std::string& w) {
    if (std::find(seen.begin(), seen.end(), w) != seen.end())
      throw ConfigError("dictionary word '" + w + "' appears in more than one group");
    seen.push_back(w);
  };
  for (const auto& g : body_part_groups)
    for (const auto& w : g) add(w);
  for (const auto* pairs : {&polarity_pairs, &severity_laterality_pairs})
    for (const auto& [a, b] : *pairs) {
      if (a == b) throw ConfigError("dictionary pair maps '" + a + "' to itself");
      add(a);
      add(b);
    }
}

const std::vector<std::string>* SwapDictionary::body_group_of(std::string_view word) const {
  for (const auto& g : body_part_groups)
    if (std::find(g.begin(), g.end(), word) != g.end()) return &g;
  return nullptr;
}

namespace {

std::optional<std::string> pair_lookup(const std::vector<std::pair<std::string, std::string>>& pairs,
                                       std::string_view word) {
  for (const auto& [a, b] : pairs) {
    if (a == word) return b;
    if (b == word) return a;
  }
  return std::nullopt;
}

bool contains(const std::vector<std::string>& v, std::string_view w) {
  return std::find(v.begin(), v.end(), w) != v.end();
}

}  // namespace

std::optional<std::string> SwapDictionary::polarity_opposite(std::string_view word) const {
  return pair_lookup(polarity_pairs, word);
}

std::optional<std::string> SwapDictionary::modifier_opposite(std::string_view word) const {
  return pair_lookup(severity_laterality_pairs, word);
}

bool SwapDictionary::is_negation(std::string_view word) const { return contains(negations, word); }
bool SwapDictionary::is_finding(std::string_view word) const { return contains(findings, word); }

// ---------------------------------------------------------------------------
// Rule-based engine

namespace {

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out.push_back(' ');
    out += words[i];
  }
  return out;
}

template <typename Pred>
std::vector<std::size_t> positions(const std::vector<std::string>& words, Pred pred) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < words.size(); ++i)
    if (pred(words[i])) out.push_back(i);
  return out;
}

std::size_t pick(const std::vector<std::size_t>& candidates, Rng& rng) {
  return candidates[static_cast<std::size_t>(rng.below(candidates.size()))];
}

std::optional<CaptionEdit> apply_objective(std::vector<std::string>& words, const SwapDictionary& dict,
                                           CaptionObjective objective, Rng& rng) {
  switch (objective) {
    case CaptionObjective::BodyPart: {
      const auto cand = positions(words, [&](const auto& w) { return dict.body_group_of(w) != nullptr; });
      if (cand.empty()) return std::nullopt;
      const std::size_t at = pick(cand, rng);
      std::vector<std::string> others;
      for (const auto& w : *dict.body_group_of(words[at]))
        if (w != words[at]) others.push_back(w);
      CaptionEdit e{at, words[at], others[static_cast<std::size_t>(rng.below(others.size()))], objective};
      words[at] = e.replacement;
      return e;
    }
    case CaptionObjective::Opposite: {
      if (const auto neg = positions(words, [&](const auto& w) { return dict.is_negation(w); });
          !neg.empty()) {
        const std::size_t at = pick(neg, rng);
        CaptionEdit e{at, words[at], "", objective};
        words.erase(words.begin() + static_cast<std::ptrdiff_t>(at));
        return e;
      }
      if (const auto pol = positions(words, [&](const auto& w) { return dict.polarity_opposite(w).has_value(); });
          !pol.empty()) {
        const std::size_t at = pick(pol, rng);
        CaptionEdit e{at, words[at], *dict.polarity_opposite(words[at]), objective};
        words[at] = e.replacement;
        return e;
      }
      const auto fnd = positions(words, [&](const auto& w) { return dict.is_finding(w); });
      if (fnd.empty() || dict.negations.empty()) return std::nullopt;
      const std::size_t at = pick(fnd, rng);
      CaptionEdit e{at, "", dict.negations.front(), objective};
      words.insert(words.begin() + static_cast<std::ptrdiff_t>(at), e.replacement);
      return e;
    }
    case CaptionObjective::SeverityLaterality: {
      const auto cand = positions(words, [&](const auto& w) { return dict.modifier_opposite(w).has_value(); });
      if (cand.empty()) return std::nullopt;
      const std::size_t at = pick(cand, rng);
      CaptionEdit e{at, words[at], *dict.modifier_opposite(words[at]), objective};
      words[at] = e.replacement;
      return e;
    }
    case CaptionObjective::Random: break;
  }
  throw ContractViolation("the random objective is not a rule-based objective");
}

}  // namespace

PerturbedCaption perturb_combined(std::string_view caption, const SwapDictionary& dict,
                                  std::span<const CaptionObjective> objectives, std::uint64_t seed,
                                  std::size_t max_edits) {
  auto words = Vocabulary::split_words(caption);
  RANLAB_REQUIRE(!words.empty(), "caption attack: caption is empty");
  RANLAB_REQUIRE(!objectives.empty(), "caption attack: no objective given");
  PerturbedCaption out;
  out.original = std::string(caption);
  out.objective = objectives.front();
  bool first_hit = true;
  for (std::size_t i = 0; i < objectives.size() && out.edits.size() < max_edits; ++i) {
    Rng rng(mix_seed(seed, 0xca9 + static_cast<std::uint64_t>(objectives[i]) * 7919 + i));
    if (auto e = apply_objective(words, dict, objectives[i], rng)) {
      if (first_hit) out.objective = objectives[i];
      first_hit = false;
      out.edits.push_back(std::move(*e));
    }
  }
  out.no_hit = out.edits.empty();
  out.perturbed = join(words);
  return out;
}

PerturbedCaption perturb_rule_based(std::string_view caption, const SwapDictionary& dict,
                                    CaptionObjective objective, std::uint64_t seed) {
  const CaptionObjective one[] = {objective};
  return perturb_combined(caption, dict, one, seed, 1);
}

std::string revert_edits(const PerturbedCaption& p) {
  auto words = Vocabulary::split_words(p.perturbed);
  for (auto it = p.edits.rbegin(); it != p.edits.rend(); ++it) {
    const auto at = static_cast<std::ptrdiff_t>(it->position);
    RANLAB_REQUIRE(it->position <= words.size(), "revert_edits: edit position out of range");
    if (it->original.empty()) {
      words.erase(words.begin() + at);
    } else if (it->replacement.empty()) {
      words.insert(words.begin() + at, it->original);
    } else {
      words[it->position] = it->original;
    }
  }
  return join(words);
}

PerturbedCaption perturb_random(std::string_view caption, const Vocabulary& vocab, double rate,
                                std::uint64_t seed) {
  RANLAB_REQUIRE(rate >= 0.0 && rate <= 1.0, "perturb_random: rate must lie in [0,1]");
  const std::size_t pool = vocab.size() - static_cast<std::size_t>(Vocabulary::kNumSpecial);
  RANLAB_REQUIRE(pool > 0 || rate == 0.0, "perturb_random: vocabulary has no ordinary words");
  auto words = Vocabulary::split_words(caption);
  Rng rng(seed);
  PerturbedCaption out;
  out.original = std::string(caption);
  out.objective = CaptionObjective::Random;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (!rng.bernoulli(rate)) continue;
    const int own = vocab.contains(words[i]) ? vocab.index(words[i]) : -1;
    const bool can_skip_own = own >= Vocabulary::kNumSpecial;
    const std::size_t choices = can_skip_own ? pool - 1 : pool;
    if (choices == 0) continue;
    auto k = static_cast<int>(rng.below(choices)) + Vocabulary::kNumSpecial;
    if (can_skip_own && k >= own) ++k;
    const std::string& w = vocab.word(k);
    if (w == words[i]) continue;
    out.edits.push_back({i, words[i], w, CaptionObjective::Random});
    words[i] = w;
  }
  out.no_hit = out.edits.empty();
  out.perturbed = join(words);
  return out;
}

std::vector<CaptionEdit> diff_words(const std::vector<std::string>& before,
                                    const std::vector<std::string>& after, CaptionObjective tag) {
  const std::size_t n = before.size(), m = after.size();
  // suffix LCS lengths
  std::vector<std::size_t> lcs((n + 1) * (m + 1), 0);
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return lcs[i * (m + 1) + j]; };
  for (std::size_t i = n; i-- > 0;)
    for (std::size_t j = m; j-- > 0;)
      at(i, j) = before[i] == after[j] ? at(i + 1, j + 1) + 1 : std::max(at(i + 1, j), at(i, j + 1));

  std::vector<CaptionEdit> edits;
  std::vector<std::string> dels, ins;
  std::size_t cur = 0;
  auto flush = [&] {
    const std::size_t subs = std::min(dels.size(), ins.size());
    for (std::size_t k = 0; k < subs; ++k) edits.push_back({cur++, dels[k], ins[k], tag});
    for (std::size_t k = subs; k < dels.size(); ++k) edits.push_back({cur, dels[k], "", tag});
    for (std::size_t k = subs; k < ins.size(); ++k) edits.push_back({cur++, "", ins[k], tag});
    dels.clear();
    ins.clear();
  };
  std::size_t i = 0, j = 0;
  while (i < n || j < m) {
    if (i < n && j < m && before[i] == after[j]) {
      flush();
      ++i, ++j, ++cur;
    } else if (j == m || (i < n && at(i + 1, j) >= at(i, j + 1))) {
      dels.push_back(before[i++]);
    } else {
      ins.push_back(after[j++]);
    }
  }
  flush();
  return edits;
}

// ---------------------------------------------------------------------------
// LLM endpoint

std::string_view default_prompt_template(CaptionObjective objective) {
  switch (objective) {
    case CaptionObjective::BodyPart:
      return "Rewrite the radiology caption below so that it names a different body part. "
             "Change as few words as possible and reply with the new caption only.\n"
             "Caption: {caption}";
    case CaptionObjective::Opposite:
      return "Rewrite the radiology caption below so that its key finding means the opposite "
             "(present becomes absent and absent becomes present). Change as few words as "
             "possible and reply with the new caption only.\nCaption: {caption}";
    case CaptionObjective::SeverityLaterality:
      return "Rewrite the radiology caption below, swapping its side (left/right) or severity "
             "(mild/severe). Change as few words as possible and reply with the new caption "
             "only.\nCaption: {caption}";
    case CaptionObjective::Random: break;
  }
  throw ContractViolation("no prompt template for the random objective");
}

std::string render_prompt(std::string_view prompt_template, std::string_view caption) {
  constexpr std::string_view kSlot = "{caption}";
  const auto pos = prompt_template.find(kSlot);
  RANLAB_REQUIRE(pos != std::string_view::npos, "prompt template lacks the {caption} placeholder");
  std::string out(prompt_template.substr(0, pos));
  out += caption;
  out += prompt_template.substr(pos + kSlot.size());
  return out;
}

void validate_llm_response(std::string_view original, std::string_view response) {
  if (Vocabulary::split_words(response).empty()) throw ValidationError("LLM response is empty");
  if (Vocabulary::split_words(response) == Vocabulary::split_words(original))
    throw ValidationError("LLM response repeats the original caption");
  if (response.size() > 3 * original.size())
    throw ValidationError("LLM response is more than three times the caption length");
}

namespace {

std::string trim_response(std::string s) {
  const auto is_junk = [](unsigned char c) { return std::isspace(c) || c == '"' || c == '\''; };
  while (!s.empty() && is_junk(static_cast<unsigned char>(s.back()))) s.pop_back();
  std::size_t b = 0;
  while (b < s.size() && is_junk(static_cast<unsigned char>(s[b]))) ++b;
  return s.substr(b);
}

std::string request_completion(const LlmEndpointConfig& ep, const std::string& prompt) {
  const nlohmann::json body = {
      {"model", ep.model},
      {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})}};
  httplib::Headers headers;
  if (const char* token = std::getenv(ep.auth_env.c_str()); token && *token)
    headers.emplace(ep.auth_header, ep.auth_prefix + token);

  const int attempts = 1 + std::max(0, ep.max_retries);
  std::string last_error;
  for (int attempt = 1; attempt <= attempts; ++attempt) {
    httplib::Client client(ep.base_url);
    const auto timeout = std::chrono::milliseconds(ep.timeout_ms);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);
    const auto res = client.Post(ep.path, headers, body.dump(), "application/json");
    if (res && res->status == 200) {
      nlohmann::json reply;
      try {
        reply = nlohmann::json::parse(res->body);
        return reply.at("choices").at(0).at("message").at("content").get<std::string>();
      } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed LLM response: ") + e.what());
      }
    }
    last_error = res ? "HTTP status " + std::to_string(res->status) : httplib::to_string(res.error());
    if (attempt < attempts)
      std::this_thread::sleep_for(std::chrono::milliseconds(ep.backoff_ms << (attempt - 1)));
  }
  throw TransportError("LLM endpoint " + ep.base_url + ep.path + " failed after " +
                           std::to_string(attempts) + " attempts: " + last_error,
                       attempts);
}

}  // namespace

PerturbedCaption perturb_llm(std::string_view caption, const LlmEndpointConfig& endpoint,
                             std::string_view prompt_template, CaptionObjective objective,
                             const SwapDictionary& dict, std::uint64_t seed) {
  RANLAB_REQUIRE(!Vocabulary::split_words(caption).empty(), "caption attack: caption is empty");
  const std::string prompt = render_prompt(prompt_template, caption);
  try {
    const std::string response = trim_response(request_completion(endpoint, prompt));
    validate_llm_response(caption, response);
    PerturbedCaption out;
    out.original = std::string(caption);
    out.perturbed = response;
    out.objective = objective;
    out.edits = diff_words(Vocabulary::split_words(caption), Vocabulary::split_words(response), objective);
    return out;
  } catch (const TransportError& e) {
    if (!endpoint.fallback) throw;
    auto out = perturb_rule_based(caption, dict, objective, seed);
    out.fallback = true;
    out.fallback_reason = e.what();
    return out;
  } catch (const ValidationError& e) {
    if (!endpoint.fallback) throw;
    auto out = perturb_rule_based(caption, dict, objective, seed);
    out.fallback = true;
    out.fallback_reason = e.what();
    return out;
  }
}

std::vector<PerturbedCaption> perturb_llm_all(const std::vector<std::string>& captions,
                                              const LlmEndpointConfig& endpoint,
                                              std::string_view prompt_template,
                                              CaptionObjective objective,
                                              const SwapDictionary& dict, std::uint64_t seed) {
  std::vector<PerturbedCaption> out(captions.size());
  parallel_for(captions.size(), std::max<std::size_t>(1, endpoint.max_in_flight), [&](std::size_t i) {
    out[i] = perturb_llm(captions[i], endpoint, prompt_template, objective, dict, mix_seed(seed, i));
  });
  return out;
}

}  // namespace ranlab
