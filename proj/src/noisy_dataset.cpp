#include "ranlab/noisy_dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>

#include "ranlab/errors.hpp"
#include "ranlab/io.hpp"
#include "ranlab/parallel.hpp"

namespace ranlab {

namespace {

constexpr std::array<const char*, 2> kFindings{"effusion", "fracture"};
constexpr std::array<const char*, 3> kBodyParts{"chest", "abdomen", "head"};
constexpr std::array<const char*, 2> kSides{"left", "right"};

template <std::size_t N>
std::optional<std::size_t> find_word(const std::array<const char*, N>& table, const std::string& w) {
  for (std::size_t i = 0; i < N; ++i)
    if (w == table[i]) return i;
  return std::nullopt;
}

}  // namespace

std::string_view domain_name(Domain d) { return d == Domain::A ? "domain-A" : "domain-B"; }

Domain parse_domain(std::string_view name) {
  if (name == "domain-A" || name == "A") return Domain::A;
  if (name == "domain-B" || name == "B") return Domain::B;
  throw ContractViolation("unknown domain '" + std::string(name) + "'");
}

ClassSpec class_spec(std::size_t index) {
  RANLAB_REQUIRE(index < kNumSyntheticClasses, "class index " + std::to_string(index) + " out of range");
  ClassSpec c;
  c.present = index % 2 == 0;
  c.laterality = kSides[(index / 2) % 2];
  c.body_part = kBodyParts[(index / 4) % 3];
  c.finding = kFindings[index / 12];
  return c;
}

std::string class_name(std::size_t index) {
  const ClassSpec c = class_spec(index);
  return std::string(c.present ? "" : "no ") + c.finding + " " + c.laterality + " " + c.body_part;
}

std::optional<std::size_t> class_from_caption(std::string_view text) {
  std::optional<std::size_t> finding, body, side;
  bool present = true;
  for (const auto& w : Vocabulary::split_words(text)) {
    if (w == "no" || w == "without" || w == "not" || w == "absent") present = false;
    if (!finding) finding = find_word(kFindings, w);
    if (!body) body = find_word(kBodyParts, w);
    if (!side) side = find_word(kSides, w);
  }
  if (!finding || !body || !side) return std::nullopt;
  return ((*finding * 3 + *body) * 2 + *side) * 2 + (present ? 0 : 1);
}

void SynthConfig::validate() const {
  RANLAB_REQUIRE(classes >= 2 && classes <= kNumSyntheticClasses,
                 "synth: classes must lie in [2, " + std::to_string(kNumSyntheticClasses) + "]");
  RANLAB_REQUIRE(records >= classes, "synth: need at least one record per class");
  RANLAB_REQUIRE(height >= 4 && width >= 4 && channels >= 1, "synth: image too small");
  RANLAB_REQUIRE(pixel_noise >= 0.0, "synth: pixel_noise must be >= 0");
  RANLAB_REQUIRE(max_tokens >= 8, "synth: max_tokens must be >= 8");
}

namespace {

Array render(const ClassSpec& c, const SynthConfig& cfg, Rng& rng) {
  const std::size_t h = cfg.height, w = cfg.width, ch = cfg.channels;
  const bool b = cfg.domain == Domain::B;
  const double base = 0.3 + (b ? cfg.domain_shift : 0.0);
  const double phase = b ? std::numbers::pi / 2 : 0.0;
  const double two_pi = 2.0 * std::numbers::pi;
  const double cy = static_cast<double>(h) / 2.0;
  const double cx = (c.laterality == "left" ? 0.25 : 0.75) * static_cast<double>(w);
  const std::size_t marker_col = c.laterality == "left" ? 0 : w - 1;

  Array img(Shape{h, w, ch});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double fy = static_cast<double>(y), fx = static_cast<double>(x);
      double v = base;
      if (c.body_part == "chest") v += 0.08 * std::cos(two_pi * fy / 4.0 + phase);
      else if (c.body_part == "abdomen") v += 0.08 * std::cos(two_pi * fx / 4.0 + phase);
      else v += 0.08 * std::cos(two_pi * (fx + fy) / 4.0 + phase);
      if (x == marker_col) v += 0.15;
      if (c.present) {
        if (c.finding == "effusion") {
          const double r2 = (fy - cy) * (fy - cy) + (fx - cx) * (fx - cx);
          v += 0.35 * std::exp(-r2 / (2.0 * 1.5 * 1.5));
        } else if (std::abs(fx - cx) < 0.75 && std::abs(fy - cy) < static_cast<double>(h) / 4.0) {
          v += 0.35;
        }
      }
      for (std::size_t k = 0; k < ch; ++k)
        img[(y * w + x) * ch + k] = std::clamp(v + cfg.pixel_noise * rng.normal(), 0.0, 1.0);
    }
  return img;
}

std::string caption_text(const ClassSpec& c, std::size_t variant) {
  const std::string finding = (c.present ? "" : "no ") + c.finding;
  const std::string where = c.laterality + " " + c.body_part;
  switch (variant % 3) {
    case 0: return finding + " in the " + where;
    case 1: return where + " image shows " + finding;
    default: return finding + " seen in the " + where;
  }
}

}  // namespace

Corpus synth_corpus(const SynthConfig& config, std::uint64_t seed) {
  config.validate();
  const Vocabulary& vocab = Vocabulary::builtin();
  Corpus corpus;
  corpus.header = {config.height, config.width, config.channels, vocab.size(), config.classes};
  Rng rng(mix_seed(seed, config.domain == Domain::A ? 0xa : 0xb));
  const std::string prefix = config.domain == Domain::A ? "a" : "b";
  for (std::size_t i = 0; i < config.records; ++i) {
    const std::size_t cls = i % config.classes;
    const ClassSpec spec = class_spec(cls);
    CorpusRecord r;
    r.image.pixels = render(spec, config, rng);
    r.image.id = prefix + std::to_string(seed) + "-" + std::to_string(i);
    r.caption = make_caption(caption_text(spec, static_cast<std::size_t>(rng.below(3))), vocab,
                             config.max_tokens);
    r.label = static_cast<int>(cls);
    r.source_id = r.image.id;
    corpus.records.push_back(std::move(r));
  }
  return corpus;
}

std::pair<Corpus, Corpus> split_corpus(const Corpus& corpus, double train_fraction, std::uint64_t seed) {
  RANLAB_REQUIRE(train_fraction > 0.0 && train_fraction < 1.0, "split: train_fraction must lie in (0,1)");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < corpus.size(); ++i)
    by_class[corpus.records[i].label.value_or(-1)].push_back(i);
  Rng rng(mix_seed(seed, 0x5b1));
  std::vector<std::size_t> train_idx, test_idx;
  for (auto& [label, idx] : by_class) {
    rng.shuffle(idx);
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(idx.size())));
    for (std::size_t k = 0; k < idx.size(); ++k) (k < n_train ? train_idx : test_idx).push_back(idx[k]);
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());
  Corpus train{corpus.header, {}}, test{corpus.header, {}};
  for (auto i : train_idx) train.records.push_back(corpus.records[i]);
  for (auto i : test_idx) test.records.push_back(corpus.records[i]);
  return {std::move(train), std::move(test)};
}

Corpus concat_corpora(const Corpus& a, const Corpus& b) {
  RANLAB_REQUIRE(a.header == b.header, "concat: corpus headers differ");
  Corpus out = a;
  out.records.insert(out.records.end(), b.records.begin(), b.records.end());
  return out;
}

// ---------------------------------------------------------------------------
// Corpus files

namespace {

constexpr char kCorpusMagic[] = "RANLABCP";
constexpr std::uint32_t kCorpusVersion = 1;

std::uint32_t narrow(std::size_t v, const char* what) {
  if (v > 0xffffffffu) throw IoError(std::string("corpus field too large: ") + what);
  return static_cast<std::uint32_t>(v);
}

}  // namespace

std::vector<std::uint8_t> serialize_corpus(const Corpus& corpus) {
  const auto& h = corpus.header;
  io::ByteWriter w;
  w.raw(std::string_view(kCorpusMagic, 8));
  w.u32(kCorpusVersion);
  w.u64(corpus.size());
  w.u32(narrow(h.height, "height"));
  w.u32(narrow(h.width, "width"));
  w.u32(narrow(h.channels, "channels"));
  w.u32(narrow(h.vocab_size, "vocab size"));
  w.u32(narrow(h.num_classes, "classes"));
  for (const auto& r : corpus.records) {
    RANLAB_REQUIRE(r.image.pixels.size() == h.pixels_per_image(),
                   "record '" + r.image.id + "' does not match the corpus header");
    const std::size_t frame = w.size();
    w.u32(0);
    w.str(r.image.id);
    w.str(r.source_id);
    w.str(r.caption.raw_text);
    w.u8(r.caption.truncated ? 1 : 0);
    w.u32(narrow(r.caption.tokens.size(), "token count"));
    for (int t : r.caption.tokens) w.i32(t);
    w.i32(r.label.value_or(-1));
    w.u8(static_cast<std::uint8_t>(r.provenance));
    w.f64s(r.image.pixels.data());
    w.patch_u32(frame, narrow(w.size() - frame - 4, "record frame"));
  }
  return w.take();
}

Corpus deserialize_corpus(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  if (r.raw(8) != std::string_view(kCorpusMagic, 8)) throw IoError("not a ranlab corpus file");
  if (const auto v = r.u32(); v != kCorpusVersion)
    throw IoError("unsupported corpus version " + std::to_string(v));
  Corpus c;
  const std::uint64_t n = r.u64();
  c.header.height = r.u32();
  c.header.width = r.u32();
  c.header.channels = r.u32();
  c.header.vocab_size = r.u32();
  c.header.num_classes = r.u32();
  const Shape shape{c.header.height, c.header.width, c.header.channels};
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::size_t frame = r.u32();
    const std::size_t start = r.position();
    CorpusRecord rec;
    rec.image.id = r.str();
    rec.source_id = r.str();
    rec.caption.raw_text = r.str();
    rec.caption.truncated = r.u8() != 0;
    const std::uint32_t ntok = r.u32();
    if (ntok > r.remaining() / 4) throw IoError("corpus record token count is corrupt");
    rec.caption.tokens.resize(ntok);
    for (auto& t : rec.caption.tokens) t = r.i32();
    if (const int label = r.i32(); label >= 0) rec.label = label;
    const std::uint8_t prov = r.u8();
    if (prov > static_cast<std::uint8_t>(Provenance::RandomNoise))
      throw IoError("corpus record has unknown provenance tag");
    rec.provenance = static_cast<Provenance>(prov);
    rec.image.pixels = Array(shape);
    r.f64s(rec.image.pixels.data());
    if (r.position() - start != frame) throw IoError("corpus record frame length mismatch");
    c.records.push_back(std::move(rec));
  }
  if (!r.at_end()) throw IoError("trailing bytes after corpus records");
  try {
    c.validate();
  } catch (const ContractViolation& e) {
    throw IoError(std::string("corpus file is invalid: ") + e.what());
  }
  return c;
}

void write_corpus(const std::filesystem::path& path, const Corpus& corpus) {
  io::atomic_write(path, serialize_corpus(corpus));
}

Corpus read_corpus(const std::filesystem::path& path) { return deserialize_corpus(io::read_file(path)); }

std::string corpus_checksum(const Corpus& corpus) { return io::sha256_hex(serialize_corpus(corpus)); }

// ---------------------------------------------------------------------------
// Crafting

std::string_view noise_kind_name(NoiseKind k) {
  switch (k) {
    case NoiseKind::ImageAdv: return "image";
    case NoiseKind::CaptionAdv: return "caption";
    case NoiseKind::RandomNoise: return "random";
  }
  throw ContractViolation("unknown noise kind");
}

NoiseKind parse_noise_kind(std::string_view name) {
  for (auto k : {NoiseKind::ImageAdv, NoiseKind::CaptionAdv, NoiseKind::RandomNoise})
    if (noise_kind_name(k) == name) return k;
  throw ContractViolation("unknown noise kind '" + std::string(name) + "' (image, caption, random)");
}

Provenance provenance_of(NoiseKind k) {
  switch (k) {
    case NoiseKind::ImageAdv: return Provenance::ImageAdv;
    case NoiseKind::CaptionAdv: return Provenance::CaptionAdv;
    case NoiseKind::RandomNoise: return Provenance::RandomNoise;
  }
  throw ContractViolation("unknown noise kind");
}

void NoiseSpec::validate() const {
  RANLAB_REQUIRE(gamma >= 0.0 && gamma <= 1.0, "noise spec: gamma must lie in [0,1]");
  RANLAB_REQUIRE(random_rate >= 0.0 && random_rate <= 1.0, "noise spec: random_rate must lie in [0,1]");
  RANLAB_REQUIRE(random_pixel_sigma >= 0.0, "noise spec: random_pixel_sigma must be >= 0");
  attack.validate();
}

nlohmann::json NoiseSpec::to_json() const {
  nlohmann::json objs = nlohmann::json::array();
  for (auto o : objectives) objs.push_back(objective_name(o));
  return {{"gamma", gamma},
          {"kind", noise_kind_name(kind)},
          {"seed", seed},
          {"attack",
           {{"epsilon", attack.epsilon},
            {"step_size", attack.step_size},
            {"iterations", attack.iterations},
            {"norm_order", "inf"}}},
          {"caption_objectives", objs},
          {"random_rate", random_rate},
          {"random_pixel_sigma", random_pixel_sigma}};
}

std::size_t perturbed_count(double gamma, std::size_t n) {
  RANLAB_REQUIRE(gamma >= 0.0 && gamma <= 1.0, "gamma must lie in [0,1]");
  const double exact = gamma * static_cast<double>(n);
  return std::min(n, static_cast<std::size_t>(std::floor(exact + 1e-9 * std::max(1.0, exact))));
}

std::vector<std::size_t> select_indices(std::size_t n, double gamma, std::uint64_t seed) {
  const std::size_t count = perturbed_count(gamma, n);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(mix_seed(seed, 0x5e1ec7));
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

ImageAttacker::ImageAttacker(const DualEncoderParams& surrogate, const Corpus& targets, AttackConfig cfg)
    : surrogate_(surrogate), targets_(targets), cfg_(cfg) {
  RANLAB_REQUIRE(!targets.empty(), "image attacker: target pool is empty");
  cfg_.validate();
}

CorpusRecord ImageAttacker::perturb(const CorpusRecord& record, std::uint64_t seed,
                                    nlohmann::json& meta) const {
  Rng rng(seed);
  const CorpusRecord& target = targets_.records[static_cast<std::size_t>(rng.below(targets_.size()))];
  const AdversarialResult adv = pgd_attack(surrogate_, record.image.pixels, target.image.pixels, cfg_);
  if (adv.x_adv == record.image.pixels)
    throw Error("image attack left the image unchanged (epsilon " + std::to_string(cfg_.epsilon) + ")");
  CorpusRecord out = record;
  out.image.pixels = adv.x_adv;
  meta["target_id"] = target.image.id;
  meta["clean_similarity"] = adv.similarity_trace.front();
  meta["adv_similarity"] = adv.best_similarity();
  meta["converged_at"] = adv.converged_at;
  meta["linf"] = max_abs(adv.delta);
  return out;
}

CaptionAttacker::CaptionAttacker(const SwapDictionary& dict, std::vector<CaptionObjective> objectives,
                                 const Vocabulary& vocab, std::size_t max_tokens, std::size_t max_edits)
    : dict_(dict), objectives_(std::move(objectives)), vocab_(vocab), max_tokens_(max_tokens),
      max_edits_(max_edits) {
  RANLAB_REQUIRE(!objectives_.empty(), "caption attacker: no objectives");
  for (auto o : objectives_)
    RANLAB_REQUIRE(o != CaptionObjective::Random, "caption attacker: random is not an attack objective");
}

namespace {

nlohmann::json edits_json(const std::vector<CaptionEdit>& edits) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& e : edits)
    out.push_back({{"position", e.position},
                   {"original", e.original},
                   {"replacement", e.replacement},
                   {"objective", objective_name(e.tag)}});
  return out;
}

std::string caption_source(const CorpusRecord& r, const Vocabulary& vocab) {
  return r.caption.raw_text.empty() ? vocab.detokenize(r.caption.tokens) : r.caption.raw_text;
}

}  // namespace

CorpusRecord CaptionAttacker::perturb(const CorpusRecord& record, std::uint64_t seed,
                                      nlohmann::json& meta) const {
  const std::string text = caption_source(record, vocab_);
  const PerturbedCaption p = perturb_combined(text, dict_, objectives_, seed, max_edits_);
  if (p.no_hit) throw Error("no dictionary term applies to caption '" + text + "'");
  CorpusRecord out = record;
  out.caption = make_caption(p.perturbed, vocab_, max_tokens_);
  meta["original"] = p.original;
  meta["perturbed"] = p.perturbed;
  meta["objective"] = objective_name(p.objective);
  meta["edits"] = edits_json(p.edits);
  return out;
}

RandomNoiseAttacker::RandomNoiseAttacker(const Vocabulary& vocab, double rate, double pixel_sigma,
                                         std::size_t max_tokens)
    : vocab_(vocab), rate_(rate), pixel_sigma_(pixel_sigma), max_tokens_(max_tokens) {
  RANLAB_REQUIRE(rate >= 0.0 && rate <= 1.0, "random attacker: rate must lie in [0,1]");
  RANLAB_REQUIRE(pixel_sigma >= 0.0, "random attacker: pixel_sigma must be >= 0");
}

CorpusRecord RandomNoiseAttacker::perturb(const CorpusRecord& record, std::uint64_t seed,
                                          nlohmann::json& meta) const {
  Rng rng(seed);
  CorpusRecord out = record;
  for (double& v : out.image.pixels.data()) v = std::clamp(v + pixel_sigma_ * rng.normal(), 0.0, 1.0);
  const std::string text = caption_source(record, vocab_);
  PerturbedCaption p = perturb_random(text, vocab_, rate_, mix_seed(seed, 1));
  if (out.image.pixels == record.image.pixels && p.no_hit)
    p = perturb_random(text, vocab_, 1.0, mix_seed(seed, 2));
  out.caption = make_caption(p.perturbed, vocab_, max_tokens_);
  if (out.image.pixels == record.image.pixels && out.caption.tokens == record.caption.tokens)
    throw Error("random noise left the record unchanged");
  meta["caption_edits"] = p.edits.size();
  meta["perturbed"] = p.perturbed;
  meta["linf"] = max_abs_diff(out.image.pixels, record.image.pixels);
  return out;
}

nlohmann::json CraftManifest::to_json() const {
  return {{"spec", spec.to_json()},
          {"n", n},
          {"perturbed_count", perturbed_indices.size()},
          {"perturbed_indices", perturbed_indices},
          {"records", records},
          {"clean_checksum", clean_checksum},
          {"noisy_checksum", noisy_checksum}};
}

CraftResult craft(const Corpus& clean, const NoiseSpec& spec, const Attacker& attacker, std::size_t jobs) {
  spec.validate();
  RANLAB_REQUIRE(!clean.empty(), "craft: clean corpus is empty");
  RANLAB_REQUIRE(attacker.kind() == spec.kind,
                 "craft: attacker kind '" + std::string(noise_kind_name(attacker.kind())) +
                     "' does not match spec kind '" + std::string(noise_kind_name(spec.kind)) + "'");

  CraftResult result;
  auto& m = result.manifest;
  m.spec = spec;
  m.n = clean.size();
  m.perturbed_indices = select_indices(clean.size(), spec.gamma, spec.seed);

  std::vector<CorpusRecord> perturbed(m.perturbed_indices.size());
  std::vector<nlohmann::json> meta(m.perturbed_indices.size(), nlohmann::json::object());
  parallel_for(m.perturbed_indices.size(), jobs, [&](std::size_t k) {
    const std::size_t idx = m.perturbed_indices[k];
    const CorpusRecord& src = clean.records[idx];
    try {
      perturbed[k] = attacker.perturb(src, mix_seed(mix_seed(spec.seed, 0xc4af7), idx), meta[k]);
    } catch (const std::exception& e) {
      throw Error("craft aborted at record '" + src.image.id + "': " + e.what());
    }
    perturbed[k].provenance = provenance_of(spec.kind);
    perturbed[k].source_id = src.image.id;
  });

  result.noisy = clean;
  for (std::size_t k = 0; k < perturbed.size(); ++k) {
    const std::size_t idx = m.perturbed_indices[k];
    nlohmann::json entry = {{"index", idx},
                            {"id", perturbed[k].image.id},
                            {"source_id", clean.records[idx].image.id}};
    entry.update(meta[k]);
    m.records.push_back(std::move(entry));
    result.noisy.records[idx] = std::move(perturbed[k]);
  }
  m.clean_checksum = corpus_checksum(clean);
  m.noisy_checksum = corpus_checksum(result.noisy);
  return result;
}

void write_crafted(const std::filesystem::path& corpus_path, const CraftResult& result) {
  write_corpus(corpus_path, result.noisy);
  auto manifest_path = corpus_path;
  manifest_path += ".manifest.json";
  io::atomic_write(manifest_path, result.manifest.to_json().dump(2) + "\n");
}

}  // namespace ranlab
