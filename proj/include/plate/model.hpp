#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <nlohmann/json.hpp>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "plate/autodiff.hpp"
#include "plate/tensor.hpp"

namespace plate {

using TokenId = std::int32_t;

// Reserved vocabulary ids shared by the corpus and the model.
inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kUnkId = 1;
inline constexpr TokenId kBosId = 2;
inline constexpr TokenId kEosId = 3;
inline constexpr TokenId kSepId = 4;
inline constexpr std::size_t kReservedTokens = 5;

enum class PositionEncoding { learned, sinusoidal };

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t ffn_dim = 256;
  std::size_t max_seq_len = 256;
  double dropout = 0.1;
  PositionEncoding positions = PositionEncoding::learned;

  std::size_t head_dim() const { return d_model / n_heads; }
  /// Throws std::invalid_argument on a zero extent, d_model % n_heads != 0,
  /// or a dropout rate outside [0, 1).
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Inference-time attention temperature coefficients: tau = sqrt(lambda * d)
/// for encoder self-attention, decoder cross-attention and decoder
/// self-attention respectively. Training always runs at (1, 1, 1).
struct AttentionTemperatures {
  double enc = 1.0;
  double cross = 1.0;
  double dec = 1.0;

  static AttentionTemperatures uniform(double lambda) { return {lambda, lambda, lambda}; }
  void validate() const;

  friend bool operator==(const AttentionTemperatures&, const AttentionTemperatures&) = default;
};

void to_json(nlohmann::json& j, const AttentionTemperatures& t);
void from_json(const nlohmann::json& j, AttentionTemperatures& t);

/// Named tensors in declaration order.
class Parameters {
 public:
  Parameter& add(std::string name, Tensor value);
  Parameter& at(std::string_view name);
  const Parameter& at(std::string_view name) const;
  bool contains(std::string_view name) const;
  /// Position in declaration order; throws std::out_of_range if unknown.
  std::size_t index_of(std::string_view name) const;

  std::span<Parameter> all() noexcept { return items_; }
  std::span<const Parameter> all() const noexcept { return items_; }
  std::size_t count() const noexcept { return items_.size(); }
  std::size_t scalar_count() const noexcept;
  void zero_grad();

  friend bool operator==(const Parameters& a, const Parameters& b);

 private:
  std::vector<Parameter> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Creates the full parameter set for `config` with seeded random init.
Parameters init_parameters(const ModelConfig& config, std::uint64_t seed);

/// Encoder-decoder transformer: configuration, weights and (optionally) the
/// token strings of its vocabulary, which the model file carries along.
struct Transformer {
  ModelConfig config;
  Parameters params;
  std::vector<std::string> vocabulary;

  static Transformer create(const ModelConfig& config, std::uint64_t seed);
};

// ---------------------------------------------------------------------------
// Model file: "PLATEMDL" magic, u32 format version, u64 length + JSON blob
// ({"config":..., "vocabulary":[...], "parameters":[{"name","shape"}...]}),
// then every parameter's values as little-endian f64, row-major, in the
// declared order.

std::vector<std::uint8_t> serialize_model(const Transformer& model);
Transformer deserialize_model(std::span<const std::uint8_t> bytes);
void save_model(const std::string& path, const Transformer& model);
Transformer load_model(const std::string& path);
/// SHA-256 hex of the serialized model.
std::string model_digest(const Transformer& model);

// ---------------------------------------------------------------------------
// Tape-based forward pass (training and teacher forcing).

/// A document / summary pair as raw token ids, without BOS or EOS.
struct SequencePair {
  std::span<const TokenId> source;
  std::span<const TokenId> target;
};

/// Packed batch: all sequences of a batch are stacked row-wise and the
/// attention segments keep them independent.
struct PackedBatch {
  std::vector<TokenId> src_ids, src_pos;
  std::vector<TokenId> tgt_ids, tgt_pos;  // decoder input (BOS + target)
  std::vector<TokenId> labels;            // target + EOS
  std::vector<AttentionSegment> enc_self, dec_self, cross;
  std::vector<double> row_weights;        // 1 / (|Y| * examples) per label row
  std::size_t examples = 0;
};

/// Appends EOS to each source and wraps each target in BOS/EOS, truncating
/// both so that they fit into max_seq_len. Throws on an empty target.
PackedBatch pack_batch(std::span<const SequencePair> pairs, const ModelConfig& config);

struct ForwardOptions {
  AttentionTemperatures temps{};
  bool train = false;                 // enables dropout
  std::mt19937_64* rng = nullptr;     // required when train && dropout > 0
  /// Receives decoder cross-attention weights: one entry per decoder
  /// layer, each holding one (tgt_len x src_len) matrix per (example, head).
  std::vector<std::vector<Tensor>>* cross_attention = nullptr;
};

/// Binds `model.params` as trainable leaves; backward fills their grads.
Var forward_logits(Tape& tape, Transformer& model, const PackedBatch& batch, const ForwardOptions& options);
/// Same graph with parameters bound as constants.
Var forward_logits(Tape& tape, const Transformer& model, const PackedBatch& batch,
                   const ForwardOptions& options);

/// Label-smoothed per-token-mean NLL of every example, averaged over the batch.
Var batch_loss(Tape& tape, Transformer& model, const PackedBatch& batch, double epsilon,
               const ForwardOptions& options);

/// Per-token mean label-smoothed NLL of one pair under teacher forcing with
/// dropout disabled. `summary` excludes BOS/EOS; throws if it is empty.
double forward_loss(std::span<const TokenId> document, std::span<const TokenId> summary, const Transformer& model,
                    double epsilon);

// ---------------------------------------------------------------------------
// Tape-free inference.

/// Encoder output plus per-layer cross-attention keys/values.
struct EncodedSource {
  std::vector<TokenId> tokens;  // source ids including the trailing EOS
  Tensor states;                // src_len x d_model
  std::vector<Tensor> cross_k;  // per decoder layer, src_len x d_model
  std::vector<Tensor> cross_v;

  std::size_t length() const { return tokens.size(); }
};

/// Source ids as the model sees them: truncated and terminated by EOS.
std::vector<TokenId> prepare_source(std::span<const TokenId> document, const ModelConfig& config);

/// Encoder states (len x d_model) for a document. Documents longer than the
/// model window are truncated. Throws std::invalid_argument if empty.
Tensor encode(std::span<const TokenId> document, const Transformer& model, const AttentionTemperatures& temps);
std::shared_ptr<const EncodedSource> encode_source(std::span<const TokenId> document, const Transformer& model,
                                                   const AttentionTemperatures& temps);

/// Output of one incremental decoder step.
struct StepOutput {
  std::vector<double> logits;  // vocab_size
  Tensor cross_attention;      // (decoder_layers * n_heads) x src_len, layer-major
};

/// Decoder with a key/value cache. Copyable, so beam hypotheses can fork.
class IncrementalDecoder {
 public:
  IncrementalDecoder(const Transformer& model, std::shared_ptr<const EncodedSource> source,
                     const AttentionTemperatures& temps);

  /// Feeds the next decoder input token and returns the distribution
  /// parameters for the token after it.
  StepOutput step(TokenId token);
  std::size_t length() const noexcept { return length_; }

 private:
  const Transformer* model_;
  std::shared_ptr<const EncodedSource> source_;
  AttentionTemperatures temps_;
  std::size_t length_ = 0;
  std::vector<std::vector<double>> self_k_, self_v_;  // per layer, length_ x d_model
};

struct DecodeStepResult {
  std::vector<double> logits;  // vocab_size, for the token after the prefix
  Tensor cross_attention;      // decoder_layers x n_heads x |prefix| x src_len
};

/// Runs the decoder over `prefix` (must start with BOS) and returns next-token
/// logits and every cross-attention weight. Throws if the prefix is empty,
/// does not start with BOS, or exceeds max_seq_len.
DecodeStepResult decode_step(std::span<const TokenId> prefix, const EncodedSource& source,
                             const Transformer& model, const AttentionTemperatures& temps);

}  // namespace plate
