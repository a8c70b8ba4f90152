#include "ranlab/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ranlab/errors.hpp"
#include "ranlab/io.hpp"
#include "ranlab/ops.hpp"
#include "ranlab/rng.hpp"

namespace ranlab {

std::size_t EncoderConfig::image_tokens() const {
  return (height / (patch * patch)) * (width / (patch * patch));
}

void EncoderConfig::validate() const {
  RANLAB_REQUIRE(height > 0 && width > 0 && channels > 0, "encoder: empty image shape");
  RANLAB_REQUIRE(patch > 0 && height % (patch * patch) == 0 && width % (patch * patch) == 0,
                 "encoder: image size must be divisible by patch^2");
  RANLAB_REQUIRE(stage1_channels > 0 && stage2_channels > 0 && token_dim > 0 && embed_dim > 0,
                 "encoder: layer widths must be positive");
  RANLAB_REQUIRE(vocab_size > 0, "encoder: vocabulary size must be positive");
  RANLAB_REQUIRE(max_tokens > 0, "encoder: max_tokens must be positive");
}

double DualEncoderParams::temperature() const { return std::exp(log_temperature[0]); }

std::vector<std::pair<std::string, Array*>> DualEncoderParams::tensors() {
  return {{"conv1_w", &conv1_w},
          {"conv1_b", &conv1_b},
          {"conv2_w", &conv2_w},
          {"conv2_b", &conv2_b},
          {"image_head_w", &image_head_w},
          {"image_head_b", &image_head_b},
          {"token_embedding", &token_embedding},
          {"position_embedding", &position_embedding},
          {"text_head_w", &text_head_w},
          {"text_head_b", &text_head_b},
          {"log_temperature", &log_temperature}};
}

std::vector<std::pair<std::string, const Array*>> DualEncoderParams::tensors() const {
  std::vector<std::pair<std::string, const Array*>> out;
  for (auto& [name, ptr] : const_cast<DualEncoderParams*>(this)->tensors())
    out.emplace_back(name, ptr);
  return out;
}

void DualEncoderParams::clamp_temperature() {
  log_temperature[0] =
      std::clamp(log_temperature[0], std::log(kMinTemperature), std::log(kMaxTemperature));
}

namespace {

Array normal_array(Shape shape, Rng& rng, double stddev) {
  Array a(std::move(shape));
  for (double& v : a.data()) v = rng.normal() * stddev;
  return a;
}

}  // namespace

DualEncoderParams init_dual_encoder(const EncoderConfig& c, std::uint64_t seed) {
  c.validate();
  Rng rng(mix_seed(seed, 0x1e1));
  const std::size_t p2 = c.patch * c.patch;
  const std::size_t flat = c.image_tokens() * c.stage2_channels;
  DualEncoderParams p;
  p.config = c;
  p.conv1_w = normal_array({p2 * c.channels, c.stage1_channels}, rng,
                           std::sqrt(2.0 / static_cast<double>(p2 * c.channels)));
  p.conv1_b = Array(Shape{c.stage1_channels}, 0.0);
  p.conv2_w = normal_array({p2 * c.stage1_channels, c.stage2_channels}, rng,
                           std::sqrt(2.0 / static_cast<double>(p2 * c.stage1_channels)));
  p.conv2_b = Array(Shape{c.stage2_channels}, 0.0);
  p.image_head_w = normal_array({flat, c.embed_dim}, rng, std::sqrt(1.0 / static_cast<double>(flat)));
  p.image_head_b = Array(Shape{c.embed_dim}, 0.0);
  p.token_embedding = normal_array({c.vocab_size, c.token_dim}, rng, 0.5);
  p.position_embedding = normal_array({c.max_tokens, c.token_dim}, rng, 0.2);
  p.text_head_w = normal_array({c.token_dim, c.embed_dim}, rng,
                               std::sqrt(1.0 / static_cast<double>(c.token_dim)));
  p.text_head_b = Array(Shape{c.embed_dim}, 0.0);
  p.log_temperature = Array::scalar(std::log(kInitialTemperature));
  return p;
}

std::string parameter_checksum(const DualEncoderParams& params) {
  io::ByteWriter w;
  for (const auto& [name, t] : params.tensors()) {
    w.str(name);
    w.f64s(t->data());
  }
  return io::sha256_hex(w.bytes());
}

EncoderGraph bind_encoder(Tape& tape, const DualEncoderParams& params, bool trainable) {
  EncoderGraph g;
  g.params = &params;
  for (const auto& [name, t] : params.tensors())
    g.vars.push_back(trainable ? tape.leaf(*t, name) : tape.constant(*t));
  return g;
}

Var image_token_features(const EncoderGraph& g, Var pixels) {
  const EncoderConfig& c = g.params->config;
  RANLAB_REQUIRE(pixels.value().rank() == 2 && pixels.value().cols() == c.pixels(),
                 "image batch has shape " + shape_string(pixels.shape()) + ", encoder expects (n, " +
                     std::to_string(c.pixels()) + ")");
  const std::size_t n = pixels.value().rows();
  const std::size_t h1 = c.height / c.patch, w1 = c.width / c.patch;
  Var x = ops::patchify(pixels, c.height, c.width, c.channels, c.patch);
  x = ops::smooth_relu(ops::add_row(ops::matmul(x, g.conv1_w()), g.conv1_b()));
  x = ops::reshape(x, {n, h1 * w1 * c.stage1_channels});
  x = ops::patchify(x, h1, w1, c.stage1_channels, c.patch);
  return ops::smooth_relu(ops::add_row(ops::matmul(x, g.conv2_w()), g.conv2_b()));
}

Var image_features(const EncoderGraph& g, Var pixels) {
  const EncoderConfig& c = g.params->config;
  const std::size_t n = pixels.value().rank() == 2 ? pixels.value().rows() : 0;
  Var tokens = image_token_features(g, pixels);
  Var flat = ops::reshape(tokens, {n, c.image_tokens() * c.stage2_channels});
  return ops::add_row(ops::matmul(flat, g.image_head_w()), g.image_head_b());
}

std::pair<Var, std::vector<std::size_t>> text_token_features(
    const EncoderGraph& g, const std::vector<std::vector<int>>& batch) {
  const EncoderConfig& c = g.params->config;
  RANLAB_REQUIRE(!batch.empty(), "text batch is empty");
  std::vector<std::size_t> tok, pos, lengths;
  for (const auto& seq : batch) {
    const std::size_t len = std::min(seq.size(), c.max_tokens);
    if (len == 0) {
      tok.push_back(Vocabulary::kPad);
      pos.push_back(0);
      lengths.push_back(1);
      continue;
    }
    for (std::size_t i = 0; i < len; ++i) {
      RANLAB_REQUIRE(seq[i] >= 0 && static_cast<std::size_t>(seq[i]) < c.vocab_size,
                     "token " + std::to_string(seq[i]) + " outside vocabulary of size " +
                         std::to_string(c.vocab_size));
      tok.push_back(static_cast<std::size_t>(seq[i]));
      pos.push_back(i);
    }
    lengths.push_back(len);
  }
  Var h = ops::gather_rows(g.token_embedding(), tok);
  if (c.positional) h = ops::add(h, ops::gather_rows(g.position_embedding(), pos));
  return {ops::tanh(h), std::move(lengths)};
}

Var text_features(const EncoderGraph& g, const std::vector<std::vector<int>>& batch) {
  auto [hidden, lengths] = text_token_features(g, batch);
  Var pooled = ops::segment_mean(hidden, lengths);
  return ops::add_row(ops::matmul(pooled, g.text_head_w()), g.text_head_b());
}

Embedding encode_image(const DualEncoderParams& params, const Array& pixels) {
  const EncoderConfig& c = params.config;
  const Shape expected{c.height, c.width, c.channels};
  RANLAB_REQUIRE(pixels.shape() == expected || pixels.shape() == Shape{c.pixels()},
                 "image shape " + shape_string(pixels.shape()) + " does not match encoder " +
                     shape_string(expected));
  Tape tape;
  const EncoderGraph g = bind_encoder(tape, params, false);
  const Var x = tape.constant(pixels.reshaped({1, c.pixels()}));
  return Embedding{image_features(g, x).value().reshaped({c.embed_dim}), false};
}

Embedding encode_image(const DualEncoderParams& params, const ImageSample& image) {
  return encode_image(params, image.pixels);
}

Embedding encode_text(const DualEncoderParams& params, std::span<const int> tokens) {
  Tape tape;
  const EncoderGraph g = bind_encoder(tape, params, false);
  const std::vector<std::vector<int>> batch{std::vector<int>(tokens.begin(), tokens.end())};
  return Embedding{text_features(g, batch).value().reshaped({params.config.embed_dim}), false};
}

Embedding encode_text(const DualEncoderParams& params, const CaptionSample& caption) {
  return encode_text(params, caption.tokens);
}

Array encode_images(const DualEncoderParams& params, const Corpus& corpus) {
  RANLAB_REQUIRE(!corpus.empty(), "encode_images: empty corpus");
  const std::size_t d = params.config.embed_dim;
  const Array images = corpus.image_matrix();
  const std::size_t n = images.rows(), p = images.cols();
  Array out(Shape{n, d});
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t count = std::min(kChunk, n - start);
    Tape tape;
    const EncoderGraph g = bind_encoder(tape, params, false);
    std::vector<double> chunk(images.values().begin() + static_cast<std::ptrdiff_t>(start * p),
                              images.values().begin() + static_cast<std::ptrdiff_t>((start + count) * p));
    const Var x = tape.constant(Array::matrix(count, p, std::move(chunk)));
    const Array& f = image_features(g, x).value();
    std::copy(f.data().begin(), f.data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(start * d));
  }
  return out;
}

Embedding normalize(const Embedding& v) {
  const double r = l2_norm(v.vector.data());
  if (!(r > 0.0)) throw DegenerateEmbedding("cannot normalize a zero-norm embedding");
  Embedding out{v.vector, true};
  for (double& x : out.vector.data()) x /= r;
  return out;
}

double cosine(const Embedding& a, const Embedding& b) {
  const Embedding na = a.normalized ? a : normalize(a);
  const Embedding nb = b.normalized ? b : normalize(b);
  return std::clamp(dot(na.vector.data(), nb.vector.data()), -1.0, 1.0);
}

namespace {

void require_unit_rows(const Array& m, const char* what) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double r = l2_norm(m.row(i));
    RANLAB_REQUIRE(std::abs(r - 1.0) <= 1e-6, std::string("clip_loss: ") + what + " row " +
                                                  std::to_string(i) + " is not unit-norm");
  }
}

}  // namespace

Var clip_loss(Var u, Var v, Var log_temperature) {
  RANLAB_REQUIRE(u.value().rank() == 2 && u.shape() == v.shape(),
                 "clip_loss: embeddings must be matching (n, d) matrices");
  RANLAB_REQUIRE(log_temperature.value().size() == 1, "clip_loss: temperature must be a scalar");
  require_unit_rows(u.value(), "image");
  require_unit_rows(v.value(), "text");
  const std::size_t n = u.value().rows();
  std::vector<std::size_t> diag(n);
  std::iota(diag.begin(), diag.end(), 0);
  const Var inv_tau = ops::exp(ops::neg(log_temperature));
  const Var logits = ops::scale_by(ops::matmul_nt(u, v), inv_tau);
  const Var image_to_text = ops::sum(ops::pick(ops::log_softmax_rows(logits), diag));
  const Var text_to_image =
      ops::sum(ops::pick(ops::log_softmax_rows(ops::transpose(logits)), diag));
  return ops::scale(ops::add(image_to_text, text_to_image), -1.0 / (2.0 * static_cast<double>(n)));
}

double clip_loss(const Array& image_embeddings, const Array& text_embeddings, double tau) {
  RANLAB_REQUIRE(tau > 0.0, "clip_loss: temperature must be positive");
  Tape tape;
  return clip_loss(tape.constant(image_embeddings), tape.constant(text_embeddings),
                   tape.constant(Array::scalar(std::log(tau))))
      .value()
      .item();
}

EncoderConfig encoder_config_for(const CorpusHeader& header, EncoderConfig base) {
  base.height = header.height;
  base.width = header.width;
  base.channels = header.channels;
  base.vocab_size = header.vocab_size;
  return base;
}

namespace {

struct Batch {
  Array pixels;
  std::vector<std::vector<int>> tokens;
};

Batch make_batch(const Corpus& corpus, std::span<const std::size_t> index) {
  const std::size_t p = corpus.header.pixels_per_image();
  Batch b{Array(Shape{index.size(), p}), {}};
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto& rec = corpus.records[index[i]];
    RANLAB_REQUIRE(rec.image.pixels.size() == p, "record image size does not match corpus header");
    std::copy(rec.image.pixels.data().begin(), rec.image.pixels.data().end(),
              b.pixels.data().begin() + static_cast<std::ptrdiff_t>(i * p));
    b.tokens.push_back(rec.caption.tokens);
  }
  return b;
}

}  // namespace

double corpus_clip_loss(const DualEncoderParams& params, const Corpus& corpus,
                        std::size_t batch_size) {
  RANLAB_REQUIRE(!corpus.empty() && batch_size > 0, "corpus_clip_loss: empty corpus or batch");
  double total = 0.0;
  std::size_t batches = 0;
  std::vector<std::size_t> idx(corpus.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t start = 0; start < idx.size(); start += batch_size, ++batches) {
    const std::size_t count = std::min(batch_size, idx.size() - start);
    const Batch b = make_batch(corpus, std::span(idx).subspan(start, count));
    Tape tape;
    const EncoderGraph g = bind_encoder(tape, params, false);
    const Var u = ops::normalize_rows(image_features(g, tape.constant(b.pixels)));
    const Var v = ops::normalize_rows(text_features(g, b.tokens));
    total += clip_loss(u, v, g.log_temperature()).value().item();
  }
  return total / static_cast<double>(batches);
}

double mean_matched_cosine(const DualEncoderParams& params, const Corpus& corpus,
                           std::size_t limit) {
  RANLAB_REQUIRE(!corpus.empty(), "mean_matched_cosine: empty corpus");
  const std::size_t n = limit == 0 ? corpus.size() : std::min(limit, corpus.size());
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  const Batch b = make_batch(corpus, idx);
  Tape tape;
  const EncoderGraph g = bind_encoder(tape, params, false);
  const Var u = ops::normalize_rows(image_features(g, tape.constant(b.pixels)));
  const Var v = ops::normalize_rows(text_features(g, b.tokens));
  const Array& s = ops::row_dot(u, v).value();
  double total = 0.0;
  for (double x : s.data()) total += x;
  return total / static_cast<double>(n);
}

PretrainResult pretrain_from(const Corpus& corpus, DualEncoderParams params,
                             const PretrainConfig& config, std::uint64_t seed) {
  RANLAB_REQUIRE(!corpus.empty(), "pretrain: corpus is empty");
  RANLAB_REQUIRE(config.batch_size > 0 && config.batch_size <= corpus.size(),
                 "pretrain: batch size must be in [1, corpus size]");
  RANLAB_REQUIRE(corpus.header.height == params.config.height &&
                     corpus.header.width == params.config.width &&
                     corpus.header.channels == params.config.channels &&
                     corpus.header.vocab_size <= params.config.vocab_size,
                 "pretrain: corpus header does not match the encoder configuration");

  const std::size_t n = corpus.size();
  const std::size_t per_epoch = (n + config.batch_size - 1) / config.batch_size;
  Adam adam(config.optimizer, per_epoch * config.epochs);
  Rng rng(mix_seed(seed, 0x5a7));

  PretrainResult result;
  result.log.initial_loss = corpus_clip_loss(params, corpus, config.batch_size);
  result.log.matched_cosine.push_back(mean_matched_cosine(params, corpus, config.probe_records));

  std::vector<Array*> slots;
  for (auto& [name, t] : params.tensors()) slots.push_back(t);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t start = b * config.batch_size;
      const std::size_t count = std::min(config.batch_size, n - start);
      const Batch batch = make_batch(corpus, std::span(order).subspan(start, count));
      try {
        Tape tape;
        const EncoderGraph g = bind_encoder(tape, params, true);
        const Var u = ops::normalize_rows(image_features(g, tape.constant(batch.pixels)));
        const Var v = ops::normalize_rows(text_features(g, batch.tokens));
        const Var loss = clip_loss(u, v, g.log_temperature());
        const auto grads = tape.grad(loss, g.vars);
        adam.step(slots, grads);
        params.clamp_temperature();
        epoch_loss += loss.value().item();
      } catch (const NumericError& e) {
        throw NumericError("pretrain diverged at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(b) + ": " + e.what());
      }
    }
    for (const Array* t : slots)
      if (!t->all_finite())
        throw NumericError("pretrain produced non-finite parameters at epoch " + std::to_string(epoch));
    result.log.epoch_loss.push_back(epoch_loss / static_cast<double>(per_epoch));
    result.log.matched_cosine.push_back(mean_matched_cosine(params, corpus, config.probe_records));
  }
  result.params = std::move(params);
  return result;
}

PretrainResult pretrain(const Corpus& corpus, const EncoderConfig& encoder,
                        const PretrainConfig& config, std::uint64_t seed) {
  return pretrain_from(corpus, init_dual_encoder(encoder_config_for(corpus.header, encoder), seed),
                       config, seed);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCheckpointMagic[] = "RANLABCK";
constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::pair<std::string, std::uint64_t>> config_entries(const EncoderConfig& c) {
  return {{"height", c.height},         {"width", c.width},
          {"channels", c.channels},     {"patch", c.patch},
          {"stage1_channels", c.stage1_channels},
          {"stage2_channels", c.stage2_channels},
          {"vocab_size", c.vocab_size}, {"token_dim", c.token_dim},
          {"max_tokens", c.max_tokens}, {"embed_dim", c.embed_dim},
          {"positional", c.positional ? 1u : 0u}};
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const DualEncoderParams& params) {
  io::ByteWriter w;
  w.raw(std::string_view(kCheckpointMagic, 8));
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(params.config.embed_dim));
  const auto entries = config_entries(params.config);
  w.u32(static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, value] : entries) {
    w.str(name);
    w.u64(value);
  }
  const auto tensors = params.tensors();
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t->rank()));
    for (auto d : t->shape()) w.u64(d);
    w.u64(offset);
    offset += t->size();
  }
  for (const auto& [name, t] : tensors) w.f64s(t->data());
  return w.take();
}

DualEncoderParams deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  if (r.raw(8) != std::string_view(kCheckpointMagic, 8)) throw IoError("not a ranlab checkpoint");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  const auto embed_dim = r.u32();
  EncoderConfig c;
  const auto n_entries = r.u32();
  for (std::uint32_t i = 0; i < n_entries; ++i) {
    const std::string name = r.str();
    const std::uint64_t v = r.u64();
    if (name == "height") c.height = v;
    else if (name == "width") c.width = v;
    else if (name == "channels") c.channels = v;
    else if (name == "patch") c.patch = v;
    else if (name == "stage1_channels") c.stage1_channels = v;
    else if (name == "stage2_channels") c.stage2_channels = v;
    else if (name == "vocab_size") c.vocab_size = v;
    else if (name == "token_dim") c.token_dim = v;
    else if (name == "max_tokens") c.max_tokens = v;
    else if (name == "embed_dim") c.embed_dim = v;
    else if (name == "positional") c.positional = v != 0;
    else throw IoError("unknown checkpoint config entry '" + name + "'");
  }
  if (c.embed_dim != embed_dim) throw IoError("checkpoint embed_dim disagrees with its config");
  c.validate();

  DualEncoderParams p;
  p.config = c;
  auto tensors = p.tensors();
  const auto n_layers = r.u32();
  if (n_layers != tensors.size()) throw IoError("checkpoint layer count mismatch");
  std::vector<std::pair<Shape, std::uint64_t>> table;
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    const std::string name = r.str();
    if (name != tensors[i].first) throw IoError("unexpected checkpoint layer '" + name + "'");
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u64();
    table.emplace_back(std::move(shape), r.u64());
  }
  const std::size_t data_start = r.position();
  std::uint64_t expected_offset = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (table[i].second != expected_offset || r.position() != data_start + 8 * expected_offset)
      throw IoError("checkpoint layer offsets are inconsistent");
    Array a(table[i].first, 0.0);
    r.f64s(a.data());
    expected_offset += a.size();
    *tensors[i].second = std::move(a);
  }
  if (!r.at_end()) throw IoError("trailing bytes after checkpoint data");
  for (const auto& [name, t] : tensors)
    if (!t->all_finite()) throw IoError("checkpoint tensor '" + name + "' is not finite");
  return p;
}

void write_checkpoint(const std::filesystem::path& path, const DualEncoderParams& params) {
  io::atomic_write(path, serialize_checkpoint(params));
}

DualEncoderParams read_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(io::read_file(path));
}

}  // namespace ranlab
