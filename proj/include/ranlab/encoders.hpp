#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ranlab/array.hpp"
#include "ranlab/data.hpp"
#include "ranlab/optim.hpp"
#include "ranlab/tape.hpp"

namespace ranlab {

/// Sizes of the toy dual encoder.
///
/// Image path: two non-overlapping patch convolutions (patch x patch, stride
/// = patch) with smooth rectifiers, flattened into an affine head.
/// Text path: token + position embeddings through tanh, mean-pooled over the
/// sequence, then an affine head. Both heads emit `embed_dim` values.
struct EncoderConfig {
  std::size_t height = 12;
  std::size_t width = 12;
  std::size_t channels = 1;
  std::size_t patch = 2;
  std::size_t stage1_channels = 8;
  std::size_t stage2_channels = 16;
  std::size_t vocab_size = 0;
  std::size_t token_dim = 16;
  std::size_t max_tokens = 16;
  std::size_t embed_dim = 32;
  bool positional = true;

  std::size_t pixels() const { return height * width * channels; }
  /// Number of stage-2 patch tokens per image.
  std::size_t image_tokens() const;
  void validate() const;
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

inline constexpr double kMinTemperature = 1e-3;
inline constexpr double kMaxTemperature = 100.0;
inline constexpr double kInitialTemperature = 0.07;

struct DualEncoderParams {
  EncoderConfig config;
  Array conv1_w, conv1_b;
  Array conv2_w, conv2_b;
  Array image_head_w, image_head_b;
  Array token_embedding, position_embedding;
  Array text_head_w, text_head_b;
  /// log of the softmax temperature; tau = exp(log_temperature).
  Array log_temperature;

  double temperature() const;
  /// Every trainable tensor, in a fixed order used by checkpoints and the optimizer.
  std::vector<std::pair<std::string, Array*>> tensors();
  std::vector<std::pair<std::string, const Array*>> tensors() const;
  /// Projects log_temperature back into [log 1e-3, log 100].
  void clamp_temperature();
};

/// Seeded initialization: scaled-normal weights, zero biases, tau = 0.07.
DualEncoderParams init_dual_encoder(const EncoderConfig& config, std::uint64_t seed);

/// SHA-256 over every tensor's raw bytes.
std::string parameter_checksum(const DualEncoderParams& params);

struct Embedding {
  Array vector;
  bool normalized = false;
};

/// Encoder tensors bound to a tape, either as leaves or as constants.
struct EncoderGraph {
  const DualEncoderParams* params = nullptr;
  std::vector<Var> vars;  // same order as DualEncoderParams::tensors()

  Var conv1_w() const { return vars[0]; }
  Var conv1_b() const { return vars[1]; }
  Var conv2_w() const { return vars[2]; }
  Var conv2_b() const { return vars[3]; }
  Var image_head_w() const { return vars[4]; }
  Var image_head_b() const { return vars[5]; }
  Var token_embedding() const { return vars[6]; }
  Var position_embedding() const { return vars[7]; }
  Var text_head_w() const { return vars[8]; }
  Var text_head_b() const { return vars[9]; }
  Var log_temperature() const { return vars[10]; }
};

EncoderGraph bind_encoder(Tape& tape, const DualEncoderParams& params, bool trainable);

/// (n, H*W*C) pixels -> (n * image_tokens, stage2_channels) patch features.
Var image_token_features(const EncoderGraph& g, Var pixels);
/// (n, H*W*C) pixels -> (n, embed_dim) unnormalized embeddings.
Var image_features(const EncoderGraph& g, Var pixels);
/// Per-token hidden states tanh(E[t] + P[pos]) for a batch, stacked, plus the
/// per-sequence lengths used. Empty sequences encode as a single pad token.
std::pair<Var, std::vector<std::size_t>> text_token_features(
    const EncoderGraph& g, const std::vector<std::vector<int>>& batch);
/// Token sequences -> (n, embed_dim) unnormalized embeddings.
Var text_features(const EncoderGraph& g, const std::vector<std::vector<int>>& batch);

Embedding encode_image(const DualEncoderParams& params, const Array& pixels);
Embedding encode_image(const DualEncoderParams& params, const ImageSample& image);
Embedding encode_text(const DualEncoderParams& params, std::span<const int> tokens);
Embedding encode_text(const DualEncoderParams& params, const CaptionSample& caption);
/// Batched unnormalized image embeddings for a whole corpus: (n, embed_dim).
Array encode_images(const DualEncoderParams& params, const Corpus& corpus);

/// Unit vector in the direction of v; DegenerateEmbedding when ||v|| = 0.
Embedding normalize(const Embedding& v);
double cosine(const Embedding& a, const Embedding& b);

/// Symmetric InfoNCE: (1/2N) sum_i (l_{u->v}^i + l_{v->u}^i) with
/// l_{u->v}^i = -log softmax_j(u_i . v_j / tau)[i]. Rows must be unit-norm
/// (within 1e-6).
double clip_loss(const Array& image_embeddings, const Array& text_embeddings, double tau);
/// Tape version; temperature given as log tau.
Var clip_loss(Var image_embeddings, Var text_embeddings, Var log_temperature);

struct PretrainConfig {
  OptimizerConfig optimizer;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  /// Records used for the matched-pair cosine trace (0 = all).
  std::size_t probe_records = 256;
};

struct PretrainLog {
  /// Mean batch loss per epoch.
  std::vector<double> epoch_loss;
  /// Full-corpus contrastive loss before the first step.
  double initial_loss = 0.0;
  /// Mean cosine of matched (image, caption) pairs at init and after each epoch.
  std::vector<double> matched_cosine;
};

struct PretrainResult {
  DualEncoderParams params;
  PretrainLog log;
};

/// Contrastive training of a freshly initialized encoder sized from the corpus
/// header. Identical (corpus, config, seed) give bit-identical parameters.
PretrainResult pretrain(const Corpus& corpus, const EncoderConfig& encoder,
                        const PretrainConfig& config, std::uint64_t seed);
/// Continue training from given parameters.
PretrainResult pretrain_from(const Corpus& corpus, DualEncoderParams params,
                             const PretrainConfig& config, std::uint64_t seed);

/// Encoder config matching a corpus header, other sizes from `base`.
EncoderConfig encoder_config_for(const CorpusHeader& header, EncoderConfig base = {});

/// Contrastive loss of `params` over the whole corpus, in batches.
double corpus_clip_loss(const DualEncoderParams& params, const Corpus& corpus,
                        std::size_t batch_size);
double mean_matched_cosine(const DualEncoderParams& params, const Corpus& corpus,
                           std::size_t limit = 0);

// Checkpoint format: "RANLABCK" magic, u32 version, u32 embed_dim, config
// block (u32 count, then name + u64 value pairs), layer table (u32 count, then
// name, u32 rank, u64 dims..., u64 offset in doubles), then every tensor as
// little-endian float64 in table order.
std::vector<std::uint8_t> serialize_checkpoint(const DualEncoderParams& params);
DualEncoderParams deserialize_checkpoint(std::span<const std::uint8_t> bytes);
void write_checkpoint(const std::filesystem::path& path, const DualEncoderParams& params);
DualEncoderParams read_checkpoint(const std::filesystem::path& path);

}  // namespace ranlab
