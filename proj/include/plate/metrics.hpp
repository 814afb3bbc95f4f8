#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "plate/corpus.hpp"
#include "plate/tensor.hpp"

namespace plate {

// Word-level metrics. Words are compared exactly as given.

enum class RougeMode { f1, limited_recall };
std::string_view to_string(RougeMode m);
RougeMode parse_rouge_mode(std::string_view s);

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Clipped n-gram overlap. A side with fewer than n words has no n-grams and
/// scores 0. Throws std::invalid_argument for n == 0.
RougeScore rouge_n_scores(std::span<const std::string> candidate, std::span<const std::string> reference,
                          std::size_t n);
/// f1 mode returns F1; limited_recall truncates the candidate to the
/// reference length first and returns recall.
double rouge_n(std::span<const std::string> candidate, std::span<const std::string> reference, std::size_t n,
               RougeMode mode);

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);
RougeScore rouge_l_scores(std::span<const std::string> candidate, std::span<const std::string> reference);
double rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference, RougeMode mode);

/// Share of the summary's n-gram occurrences (or distinct n-grams) that
/// never occur in the document. Throws if the summary has fewer than n words.
double novel_ngram_ratio(std::span<const std::string> summary, std::span<const std::string> document,
                         std::size_t n, bool distinct = false);

/// Greedy left-to-right longest-match fragments of the summary against the
/// document; returns the share of summary tokens inside fragments of at
/// least min_span words. Throws on an empty summary or min_span == 0.
double copied_span_fraction(std::span<const std::string> summary, std::span<const std::string> document,
                            std::size_t min_span = 5);

/// Index of the document sentence with the highest R1 F1 + R2 F1 against
/// `sentence`; ties go to the earliest.
std::size_t best_matching_sentence(const Words& sentence, const std::vector<Words>& document_sentences);

/// Share of summary sentences whose best-matching document sentence lies in
/// the first ceil(f * N) sentences. Throws on an empty document, an empty
/// summary or f outside (0, 1].
double leading_bias_fraction(const std::vector<Words>& summary_sentences,
                             const std::vector<Words>& document_sentences, double leading_fraction);

struct EvidentHistogram {
  std::vector<double> proportions;   // per bin, averaged over documents with evidence
  double evident_rate = 0.0;         // evident weights / all weights
  std::size_t evident_weights = 0;
  std::size_t total_weights = 0;
  std::size_t documents = 0;
  std::size_t documents_with_evidence = 0;
  bool defined = false;              // false when no weight is evident

  /// Share of the histogram in the last k bins.
  double tail_mass(std::size_t k) const;
};

/// `traces` holds one steps x src_len weight matrix per document. A weight is
/// evident when >= threshold; source position j (1-based) falls into bin
/// ceil(j * bins / src_len). Throws on an empty trace set, threshold outside
/// (0, 1) or bins == 0.
EvidentHistogram evident_attention_histogram(std::span<const Tensor> traces, double threshold = 0.15,
                                             std::size_t bins = 5);

struct LengthStats {
  double mean = 0.0;
  double median = 0.0;
};

/// Word counts, sentence separators excluded. Throws on an empty set.
LengthStats summary_length_stats(const std::vector<Words>& summaries);

struct BootstrapResult {
  double mean_difference = 0.0;  // mean(a) - mean(b)
  double lower = 0.0;
  double upper = 0.0;
  double p_value = 0.0;          // share of resamples with difference <= 0
};

/// Paired bootstrap over per-document scores.
BootstrapResult paired_bootstrap(std::span<const double> a, std::span<const double> b, std::size_t resamples = 1000,
                                 double confidence = 0.95, std::uint64_t seed = 1);

// ---------------------------------------------------------------------------

struct ReportOptions {
  RougeMode rouge_mode = RougeMode::f1;
  double leading_fraction = 0.4;
  std::size_t min_span = 5;
  bool distinct_ngrams = false;

  friend bool operator==(const ReportOptions&, const ReportOptions&) = default;
};

struct MetricsReport {
  std::string system;
  std::size_t documents = 0;
  RougeMode rouge_mode = RougeMode::f1;
  std::optional<double> rouge1, rouge2, rougeL;  // absent without references
  double avg_length = 0.0;
  double median_length = 0.0;
  std::vector<double> novel_ngrams;              // n = 1..4
  double copied_span_fraction = 0.0;
  double leading_fraction = 0.4;
  double leading_bias = 0.0;
  std::optional<EvidentHistogram> attention;
};

/// Scores `outputs` (one per document) against their source documents and,
/// when given, reference summaries. Summaries shorter than n are left out of
/// the novel n-gram average for that n.
MetricsReport compute_report(std::string system, const std::vector<Words>& outputs,
                             const std::vector<Words>& documents, const std::vector<Words>* references,
                             const ReportOptions& options);

nlohmann::ordered_json to_json(const MetricsReport& report);
nlohmann::ordered_json to_json(const EvidentHistogram& h);
/// Header plus one row per bin: bin,lower,upper,proportion.
std::string histogram_csv(const EvidentHistogram& h);
/// Header plus one row per report with its scalar statistics.
std::string reports_csv(std::span<const MetricsReport> reports);

}  // namespace plate
