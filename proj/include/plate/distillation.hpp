#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "plate/corpus.hpp"
#include "plate/decoding.hpp"
#include "plate/metrics.hpp"
#include "plate/model.hpp"

namespace plate {

enum class Schedule { linear_warmup_constant, inverse_sqrt };
std::string_view to_string(Schedule s);
Schedule parse_schedule(std::string_view s);

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t warmup_steps = 100;
  std::size_t steps = 2000;
  std::size_t batch_tokens = 2048;
  double label_smoothing = 0.1;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::uint64_t seed = 1;
  Schedule schedule = Schedule::linear_warmup_constant;
  std::size_t validation_interval = 200;  // 0 disables periodic validation

  /// Throws std::invalid_argument on warmup > steps, label smoothing outside
  /// [0, 1), a negative rate or decay, betas outside [0, 1) or batch_tokens 0.
  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Learning rate for update `step` (1-based).
double learning_rate_at(const TrainConfig& config, std::size_t step);

struct ValidationPoint {
  std::size_t step = 0;
  double loss = 0.0;
};

struct TrainResult {
  Transformer model;                       // best-validation checkpoint
  std::vector<double> train_loss;          // one entry per update
  std::vector<ValidationPoint> validation;
  std::size_t best_step = 0;
  std::optional<double> best_validation_loss;
};

/// Token ids of `words`. Throws std::invalid_argument naming the first word
/// that `vocab` does not contain.
std::vector<TokenId> encode_strict(const Vocabulary& vocab, const Words& words);

/// Trains `init` (which must carry its vocabulary) on `train` with
/// label-smoothed NLL at unit attention temperatures. Batches are filled up
/// to batch_tokens from a seeded shuffle. With a validation corpus the model
/// is scored every validation_interval updates and after the last one, and
/// the lowest-loss checkpoint is returned; otherwise the final weights.
/// Throws std::invalid_argument on an empty corpus or a word outside the
/// model vocabulary.
TrainResult train_model(const Corpus& train, const Corpus* valid, const TrainConfig& config, Transformer init);

/// Mean per-token NLL (no smoothing) of a corpus; unknown words map to <unk>.
double corpus_loss(const Corpus& corpus, const Transformer& model);

// ---------------------------------------------------------------------------
// Pseudo labels

struct PseudoLabelRecord {
  std::string id;
  Words document;
  Words summary;
  AttentionTemperatures lambda;
  std::string decoder_digest;
  std::string teacher_digest;

  friend bool operator==(const PseudoLabelRecord&, const PseudoLabelRecord&) = default;
};

struct PseudoLabelOptions {
  BeamConfig decode;
  std::size_t workers = 1;
  double max_failure_rate = 0.01;
  /// Keeps each decode's cross-attention trace in PseudoLabelRun::attention.
  bool keep_attention = false;
  /// When set, one attention dump per document goes to `<dir>/<id>.json`.
  std::optional<std::string> attention_dir;
};

struct DecodeFailure {
  std::string id;
  std::string message;
};

struct PseudoLabelRun {
  std::vector<PseudoLabelRecord> records;  // corpus order, failures left out
  std::vector<Tensor> attention;           // parallel to records when kept
  std::vector<DecodeFailure> failures;
};

/// Raised after a pseudo-label run whose failure rate exceeds the limit.
class PseudoLabelError : public std::runtime_error {
 public:
  PseudoLabelError(const std::string& what, std::vector<DecodeFailure> failures)
      : std::runtime_error(what), failures_(std::move(failures)) {}
  const std::vector<DecodeFailure>& failures() const noexcept { return failures_; }

 private:
  std::vector<DecodeFailure> failures_;
};

/// SHA-256 of the canonical JSON of a decoder configuration.
std::string decoder_digest(const BeamConfig& config);

/// Decodes every document of `corpus` with the teacher. Each document gets
/// its own generator seeded from (decode.seed, id), so results do not depend
/// on the worker count or order. Failing documents are logged to stderr and
/// skipped.
PseudoLabelRun generate_pseudo_labels(const Transformer& teacher, const Corpus& corpus,
                                      const PseudoLabelOptions& options);

nlohmann::ordered_json to_json(const PseudoLabelRecord& record);
std::string format_pseudo_jsonl(const std::vector<PseudoLabelRecord>& records);
void write_pseudo_jsonl(const std::vector<PseudoLabelRecord>& records, const std::string& path);
std::vector<PseudoLabelRecord> load_pseudo_jsonl(const std::string& path);
/// Records as a training corpus (split train).
Corpus pseudo_corpus(const std::vector<PseudoLabelRecord>& records);

// ---------------------------------------------------------------------------
// Students

enum class LayerSelection { first_k, maximally_spaced };
std::string_view to_string(LayerSelection s);
LayerSelection parse_layer_selection(std::string_view s);

/// Teacher layer indices a k-layer student copies out of L.
std::vector<std::size_t> select_layers(std::size_t teacher_layers, std::size_t student_layers, LayerSelection s);

/// Student whose embeddings, output projection, final norms and encoder
/// layers come from the teacher, with decoder layers picked by `selection`.
/// The encoder keeps its first student.encoder_layers layers. Throws
/// std::invalid_argument when widths, vocabulary or position layout differ
/// or the student has more layers than the teacher.
Transformer init_student_from_teacher(const Transformer& teacher, const ModelConfig& student,
                                      LayerSelection selection);

/// Decodes every document and scores it against the corpus summaries.
MetricsReport evaluate_model(const Transformer& model, const Corpus& corpus, const BeamConfig& decode,
                             const ReportOptions& options, std::size_t workers = 1,
                             std::vector<Words>* outputs = nullptr);

struct DistillationSetting {
  LambdaSpec lambda;
  std::string label;
};

struct DistillationOutcome {
  DistillationSetting setting;
  PseudoLabelRun pseudo;
  Transformer student;
  MetricsReport pseudo_report;  // the pseudo labels against their documents
  MetricsReport test_report;    // the student on the held-out gold split
  std::string pseudo_digest;
  std::string student_digest;
};

struct DistillationPlan {
  ModelConfig student;
  LayerSelection selection = LayerSelection::first_k;
  TrainConfig train;
  PseudoLabelOptions pseudo;
  BeamConfig student_decode;  // lambda is forced to 1
  ReportOptions report;
  std::optional<std::string> out_dir;
};

/// One pseudo corpus, student and report per setting. Every student starts
/// from the same teacher-derived initialization and trains with the same
/// seed, so settings differ only through their pseudo labels. With out_dir
/// set, artifacts and a manifest with their digests are written there.
std::vector<DistillationOutcome> run_distillation(const Transformer& teacher, const Corpus& train,
                                                  const Corpus* valid, const Corpus& test,
                                                  const std::vector<DistillationSetting>& grid,
                                                  const DistillationPlan& plan);

}  // namespace plate
