#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "plate/model.hpp"
#include "plate/tensor.hpp"

namespace plate {

/// One decoder step: next-token logits and one cross-attention row over the
/// source (already aggregated over layers and heads).
struct StepScores {
  std::vector<double> logits;
  std::vector<double> attention;
};

/// Decoder state after consuming a prefix. Cloned when a beam forks.
class DecoderState {
 public:
  virtual ~DecoderState() = default;
  /// Scores for the first generated token.
  virtual StepScores start() = 0;
  /// Consumes `token` and scores the token after it.
  virtual StepScores feed(TokenId token) = 0;
  virtual std::unique_ptr<DecoderState> clone() const = 0;
};

/// Anything beam search and sampling can drive.
class StepModel {
 public:
  virtual ~StepModel() = default;
  virtual std::size_t vocab_size() const = 0;
  virtual TokenId eos() const = 0;
  virtual std::unique_ptr<DecoderState> begin(std::span<const TokenId> document,
                                              const AttentionTemperatures& temps) const = 0;
};

/// Which cross-attention maps form the trace; -1 averages over that axis.
struct TraceSelection {
  int layer = -1;
  int head = -1;
  friend bool operator==(const TraceSelection&, const TraceSelection&) = default;
};

/// Adapts a Transformer: encodes once, then decodes with a key/value cache.
class TransformerStepModel : public StepModel {
 public:
  explicit TransformerStepModel(const Transformer& model, TraceSelection trace = {});
  std::size_t vocab_size() const override;
  TokenId eos() const override { return kEosId; }
  std::unique_ptr<DecoderState> begin(std::span<const TokenId> document,
                                      const AttentionTemperatures& temps) const override;

 private:
  const Transformer* model_;
  TraceSelection trace_;
};

/// Attention temperature setting of a decode run: a fixed coefficient or a
/// range drawn once per document, with optional per-family overrides.
struct LambdaSpec {
  double lambda = 1.0;
  std::optional<std::pair<double, double>> range;
  std::optional<double> enc, cross, dec;

  static LambdaSpec fixed(double l) { return LambdaSpec{l, std::nullopt, std::nullopt, std::nullopt, std::nullopt}; }
  static LambdaSpec uniform_range(double a, double b) {
    return LambdaSpec{1.0, std::make_pair(a, b), std::nullopt, std::nullopt, std::nullopt};
  }
  bool is_random() const { return range.has_value(); }
  void validate() const;
  /// Draws from `rng` only in range mode.
  AttentionTemperatures resolve(std::mt19937_64& rng) const;

  friend bool operator==(const LambdaSpec&, const LambdaSpec&) = default;
};

enum class Sampler { beam, ancestral, nucleus };
std::string_view to_string(Sampler s);
Sampler parse_sampler(std::string_view s);

struct BeamConfig {
  std::size_t beam_size = 4;
  double length_penalty = 1.0;   // alpha in score = sum logp / len^alpha
  std::size_t min_length = 1;    // generated tokens before end-of-sequence is allowed
  std::size_t max_length = 64;   // generated tokens, end-of-sequence included
  LambdaSpec lambda{};
  double output_temperature = 1.0;
  Sampler sampler = Sampler::beam;
  double top_p = 1.0;
  std::uint64_t seed = 1;
  bool capture_attention = false;
  TraceSelection trace{};

  /// Throws std::invalid_argument on beam_size 0, min_length 0,
  /// min_length > max_length, T <= 0, top_p outside (0, 1] or a bad lambda.
  void validate() const;
  friend bool operator==(const BeamConfig&, const BeamConfig&) = default;
};

void to_json(nlohmann::json& j, const BeamConfig& c);
void from_json(const nlohmann::json& j, BeamConfig& c);
void to_json(nlohmann::json& j, const LambdaSpec& l);
void from_json(const nlohmann::json& j, LambdaSpec& l);

struct DecodeResult {
  std::vector<TokenId> tokens;     // generated tokens, end-of-sequence excluded
  bool ended = false;              // true when end-of-sequence was generated
  double log_prob = 0.0;           // sum over generated tokens, end-of-sequence included
  double score = 0.0;              // log_prob / steps^alpha
  AttentionTemperatures lambda{};  // coefficients actually applied
  Tensor attention;                // steps x src_len when captured, else empty

  std::size_t steps() const { return tokens.size() + (ended ? 1 : 0); }
};

/// Probability vector exp(z_i/T) / sum_j exp(z_j/T). Throws for T <= 0.
std::vector<double> apply_output_temperature(std::span<const double> logits, double T);

/// Smallest prefix of the probability-sorted vocabulary (ties by id) whose
/// mass reaches p, renormalized; other entries become 0. p >= 1 returns the
/// input unchanged. Throws for p <= 0.
std::vector<double> nucleus_filter(std::span<const double> probs, double p);

/// Uniform draw on [a, b]; a == b returns a. Throws unless 0 < a <= b.
double draw_random_lambda(double a, double b, std::mt19937_64& rng);

/// Next-token log-probabilities as the decoders see them: output temperature
/// applied and end-of-sequence masked while `generated` < min_length.
std::vector<double> step_log_probs(std::span<const double> logits, const BeamConfig& cfg, TokenId eos,
                                   std::size_t generated);

/// Beam search at fixed temperatures. Throws on an empty document.
DecodeResult beam_search(const StepModel& model, std::span<const TokenId> document, const BeamConfig& cfg,
                         const AttentionTemperatures& temps);

/// Ancestral (top_p ignored) or nucleus sampling.
DecodeResult sample_decode(const StepModel& model, std::span<const TokenId> document, const BeamConfig& cfg,
                           const AttentionTemperatures& temps, Sampler mode, double top_p, std::mt19937_64& rng);

/// Resolves lambda from `rng`, then runs the configured sampler with the
/// same generator.
DecodeResult decode_document(const StepModel& model, std::span<const TokenId> document, const BeamConfig& cfg,
                             std::mt19937_64& rng);

/// {doc_id, lambda, tokens, attention} for one decoded document.
nlohmann::ordered_json attention_dump(std::string_view doc_id, const DecodeResult& result,
                                      std::span<const std::string> tokens);

struct AttentionDump {
  std::string doc_id;
  AttentionTemperatures lambda;
  std::vector<std::string> tokens;
  Tensor attention;
};

/// Reads a file written from attention_dump. Throws ParseError when malformed.
AttentionDump load_attention_dump(const std::string& path);

}  // namespace plate
