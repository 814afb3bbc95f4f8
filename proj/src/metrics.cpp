#include "plate/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

namespace plate {

std::string_view to_string(RougeMode m) { return m == RougeMode::f1 ? "f1" : "limited_recall"; }

RougeMode parse_rouge_mode(std::string_view s) {
  if (s == "f1") return RougeMode::f1;
  if (s == "limited_recall") return RougeMode::limited_recall;
  throw std::invalid_argument("unknown ROUGE mode '" + std::string(s) + "'");
}

namespace {

using Gram = std::span<const std::string>;

bool gram_less(Gram a, Gram b) { return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end()); }
bool gram_equal(Gram a, Gram b) { return std::equal(a.begin(), a.end(), b.begin(), b.end()); }

std::vector<Gram> sorted_grams(std::span<const std::string> words, std::size_t n) {
  std::vector<Gram> out;
  if (words.size() < n) return out;
  out.reserve(words.size() - n + 1);
  for (std::size_t i = 0; i + n <= words.size(); ++i) out.push_back(words.subspan(i, n));
  std::sort(out.begin(), out.end(), gram_less);
  return out;
}

// Sum over grams of min(count in a, count in b), by merging sorted lists.
std::size_t clipped_overlap(const std::vector<Gram>& a, const std::vector<Gram>& b) {
  std::size_t i = 0, j = 0, hits = 0;
  while (i < a.size() && j < b.size()) {
    if (gram_less(a[i], b[j])) {
      ++i;
    } else if (gram_less(b[j], a[i])) {
      ++j;
    } else {
      ++hits;
      ++i;
      ++j;
    }
  }
  return hits;
}

RougeScore from_counts(std::size_t hits, std::size_t cand_total, std::size_t ref_total) {
  RougeScore s;
  s.precision = cand_total ? static_cast<double>(hits) / static_cast<double>(cand_total) : 0.0;
  s.recall = ref_total ? static_cast<double>(hits) / static_cast<double>(ref_total) : 0.0;
  const double denom = s.precision + s.recall;
  s.f1 = denom > 0.0 ? 2.0 * s.precision * s.recall / denom : 0.0;
  return s;
}

std::span<const std::string> truncate_to(std::span<const std::string> cand, std::size_t len) {
  return cand.first(std::min(cand.size(), len));
}

}  // namespace

RougeScore rouge_n_scores(std::span<const std::string> candidate, std::span<const std::string> reference,
                          std::size_t n) {
  if (n == 0) throw std::invalid_argument("rouge_n: n must be at least 1");
  const auto c = sorted_grams(candidate, n);
  const auto r = sorted_grams(reference, n);
  return from_counts(clipped_overlap(c, r), c.size(), r.size());
}

double rouge_n(std::span<const std::string> candidate, std::span<const std::string> reference, std::size_t n,
               RougeMode mode) {
  if (mode == RougeMode::limited_recall) {
    return rouge_n_scores(truncate_to(candidate, reference.size()), reference, n).recall;
  }
  return rouge_n_scores(candidate, reference, n).f1;
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  if (a.size() < b.size()) std::swap(a, b);
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

RougeScore rouge_l_scores(std::span<const std::string> candidate, std::span<const std::string> reference) {
  return from_counts(lcs_length(candidate, reference), candidate.size(), reference.size());
}

double rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference, RougeMode mode) {
  if (mode == RougeMode::limited_recall) {
    return rouge_l_scores(truncate_to(candidate, reference.size()), reference).recall;
  }
  return rouge_l_scores(candidate, reference).f1;
}

double novel_ngram_ratio(std::span<const std::string> summary, std::span<const std::string> document,
                         std::size_t n, bool distinct) {
  if (n == 0) throw std::invalid_argument("novel_ngram_ratio: n must be at least 1");
  if (summary.size() < n) {
    throw std::invalid_argument("novel_ngram_ratio: summary has fewer than " + std::to_string(n) + " words");
  }
  const auto doc = sorted_grams(document, n);
  auto grams = sorted_grams(summary, n);
  if (distinct) grams.erase(std::unique(grams.begin(), grams.end(), gram_equal), grams.end());
  std::size_t novel = 0;
  for (const auto& g : grams) {
    if (!std::binary_search(doc.begin(), doc.end(), g, gram_less)) ++novel;
  }
  return static_cast<double>(novel) / static_cast<double>(grams.size());
}

double copied_span_fraction(std::span<const std::string> summary, std::span<const std::string> document,
                            std::size_t min_span) {
  if (summary.empty()) throw std::invalid_argument("copied_span_fraction: empty summary");
  if (min_span == 0) throw std::invalid_argument("copied_span_fraction: min_span must be at least 1");
  std::size_t copied = 0;
  std::size_t i = 0;
  while (i < summary.size()) {
    std::size_t best = 0;
    for (std::size_t j = 0; j < document.size(); ++j) {
      std::size_t k = 0;
      while (i + k < summary.size() && j + k < document.size() && summary[i + k] == document[j + k]) ++k;
      best = std::max(best, k);
    }
    if (best == 0) {
      ++i;
      continue;
    }
    if (best >= min_span) copied += best;
    i += best;
  }
  return static_cast<double>(copied) / static_cast<double>(summary.size());
}

std::size_t best_matching_sentence(const Words& sentence, const std::vector<Words>& document_sentences) {
  std::size_t best = 0;
  double best_score = -1.0;
  for (std::size_t s = 0; s < document_sentences.size(); ++s) {
    const double score = rouge_n_scores(sentence, document_sentences[s], 1).f1 +
                         rouge_n_scores(sentence, document_sentences[s], 2).f1;
    if (score > best_score) {
      best_score = score;
      best = s;
    }
  }
  return best;
}

double leading_bias_fraction(const std::vector<Words>& summary_sentences,
                             const std::vector<Words>& document_sentences, double leading_fraction) {
  if (document_sentences.empty()) throw std::invalid_argument("leading_bias_fraction: empty document");
  if (summary_sentences.empty()) throw std::invalid_argument("leading_bias_fraction: empty summary");
  if (!(leading_fraction > 0.0 && leading_fraction <= 1.0)) {
    throw std::invalid_argument("leading_bias_fraction: fraction must lie in (0, 1]");
  }
  const auto window = static_cast<std::size_t>(
      std::ceil(leading_fraction * static_cast<double>(document_sentences.size()) - 1e-9));
  std::size_t leading = 0;
  for (const auto& s : summary_sentences) {
    if (best_matching_sentence(s, document_sentences) < window) ++leading;
  }
  return static_cast<double>(leading) / static_cast<double>(summary_sentences.size());
}

double EvidentHistogram::tail_mass(std::size_t k) const {
  double s = 0.0;
  for (std::size_t b = proportions.size() - std::min(k, proportions.size()); b < proportions.size(); ++b) {
    s += proportions[b];
  }
  return s;
}

EvidentHistogram evident_attention_histogram(std::span<const Tensor> traces, double threshold, std::size_t bins) {
  if (traces.empty()) throw std::invalid_argument("evident_attention_histogram: no traces");
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw std::invalid_argument("evident_attention_histogram: threshold must lie in (0, 1)");
  }
  if (bins == 0) throw std::invalid_argument("evident_attention_histogram: bins must be positive");
  EvidentHistogram h;
  h.proportions.assign(bins, 0.0);
  h.documents = traces.size();
  std::vector<std::size_t> counts(bins);
  for (const auto& t : traces) {
    if (t.rank() != 2) throw std::invalid_argument("evident_attention_histogram: traces must be steps x src_len");
    const std::size_t len = t.cols();
    std::fill(counts.begin(), counts.end(), 0);
    std::size_t doc_evident = 0;
    for (std::size_t r = 0; r < t.rows(); ++r) {
      for (std::size_t j = 1; j <= len; ++j) {
        if (t.at(r, j - 1) >= threshold) {
          ++counts[(j * bins + len - 1) / len - 1];
          ++doc_evident;
        }
      }
    }
    h.total_weights += t.size();
    h.evident_weights += doc_evident;
    if (doc_evident == 0) continue;
    ++h.documents_with_evidence;
    for (std::size_t b = 0; b < bins; ++b) {
      h.proportions[b] += static_cast<double>(counts[b]) / static_cast<double>(doc_evident);
    }
  }
  h.evident_rate = static_cast<double>(h.evident_weights) / static_cast<double>(h.total_weights);
  h.defined = h.documents_with_evidence > 0;
  if (h.defined) {
    for (auto& p : h.proportions) p /= static_cast<double>(h.documents_with_evidence);
  }
  return h;
}

LengthStats summary_length_stats(const std::vector<Words>& summaries) {
  if (summaries.empty()) throw std::invalid_argument("summary_length_stats: no summaries");
  std::vector<double> lens;
  lens.reserve(summaries.size());
  for (const auto& s : summaries) {
    lens.push_back(static_cast<double>(std::count_if(s.begin(), s.end(), [](const std::string& w) { return w != kSepToken; })));
  }
  LengthStats st;
  double total = 0.0;
  for (double l : lens) total += l;
  st.mean = total / static_cast<double>(lens.size());
  std::sort(lens.begin(), lens.end());
  const std::size_t m = lens.size() / 2;
  st.median = lens.size() % 2 ? lens[m] : 0.5 * (lens[m - 1] + lens[m]);
  return st;
}

BootstrapResult paired_bootstrap(std::span<const double> a, std::span<const double> b, std::size_t resamples,
                                 double confidence, std::uint64_t seed) {
  if (a.size() != b.size() || a.empty()) throw std::invalid_argument("paired_bootstrap: need equal, non-empty samples");
  if (resamples == 0 || !(confidence > 0.0 && confidence < 1.0)) {
    throw std::invalid_argument("paired_bootstrap: bad resample count or confidence");
  }
  const std::size_t n = a.size();
  std::vector<double> diff(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += (diff[i] = a[i] - b[i]);
  BootstrapResult r;
  r.mean_difference = total / static_cast<double>(n);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<double> means(resamples);
  std::size_t not_better = 0;
  for (auto& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += diff[pick(rng)];
    m = s / static_cast<double>(n);
    if (m <= 0.0) ++not_better;
  }
  std::sort(means.begin(), means.end());
  const double tail = (1.0 - confidence) / 2.0;
  auto quantile = [&](double q) {
    const auto idx = static_cast<std::size_t>(std::floor(q * static_cast<double>(resamples - 1) + 0.5));
    return means[std::min(idx, resamples - 1)];
  };
  r.lower = quantile(tail);
  r.upper = quantile(1.0 - tail);
  r.p_value = static_cast<double>(not_better) / static_cast<double>(resamples);
  return r;
}

// ---------------------------------------------------------------------------

MetricsReport compute_report(std::string system, const std::vector<Words>& outputs,
                             const std::vector<Words>& documents, const std::vector<Words>* references,
                             const ReportOptions& options) {
  if (outputs.size() != documents.size() || (references && references->size() != outputs.size())) {
    throw std::invalid_argument("compute_report: outputs, documents and references must align");
  }
  if (outputs.empty()) throw std::invalid_argument("compute_report: no outputs");
  MetricsReport rep;
  rep.system = std::move(system);
  rep.documents = outputs.size();
  rep.rouge_mode = options.rouge_mode;
  rep.leading_fraction = options.leading_fraction;
  const double n_docs = static_cast<double>(outputs.size());

  if (references) {
    double r1 = 0.0, r2 = 0.0, rl = 0.0;
    for (std::size_t i = 0; i < outputs.size(); ++i) {
      r1 += rouge_n(outputs[i], (*references)[i], 1, options.rouge_mode);
      r2 += rouge_n(outputs[i], (*references)[i], 2, options.rouge_mode);
      rl += rouge_l(outputs[i], (*references)[i], options.rouge_mode);
    }
    rep.rouge1 = r1 / n_docs;
    rep.rouge2 = r2 / n_docs;
    rep.rougeL = rl / n_docs;
  }

  const auto lengths = summary_length_stats(outputs);
  rep.avg_length = lengths.mean;
  rep.median_length = lengths.median;

  rep.novel_ngrams.assign(4, 0.0);
  for (std::size_t n = 1; n <= 4; ++n) {
    double total = 0.0;
    std::size_t counted = 0;
    for (std::size_t i = 0; i < outputs.size(); ++i) {
      if (outputs[i].size() < n) continue;
      total += novel_ngram_ratio(outputs[i], documents[i], n, options.distinct_ngrams);
      ++counted;
    }
    rep.novel_ngrams[n - 1] = counted ? total / static_cast<double>(counted) : 0.0;
  }

  double copied = 0.0, leading = 0.0;
  std::size_t copied_n = 0, leading_n = 0;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    if (!outputs[i].empty()) {
      copied += copied_span_fraction(outputs[i], documents[i], options.min_span);
      ++copied_n;
    }
    const auto ss = split_sentences(outputs[i]);
    const auto ds = split_sentences(documents[i]);
    if (!ss.empty() && !ds.empty()) {
      leading += leading_bias_fraction(ss, ds, options.leading_fraction);
      ++leading_n;
    }
  }
  rep.copied_span_fraction = copied_n ? copied / static_cast<double>(copied_n) : 0.0;
  rep.leading_bias = leading_n ? leading / static_cast<double>(leading_n) : 0.0;
  return rep;
}

nlohmann::ordered_json to_json(const EvidentHistogram& h) {
  nlohmann::ordered_json j;
  j["defined"] = h.defined;
  j["proportions"] = h.proportions;
  j["evident_rate"] = h.evident_rate;
  j["evident_weights"] = h.evident_weights;
  j["total_weights"] = h.total_weights;
  j["documents"] = h.documents;
  j["documents_with_evidence"] = h.documents_with_evidence;
  return j;
}

nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["system"] = r.system;
  j["documents"] = r.documents;
  if (r.rouge1) {
    j["rouge"] = {{"mode", to_string(r.rouge_mode)}, {"r1", *r.rouge1}, {"r2", *r.rouge2}, {"rl", *r.rougeL}};
  }
  j["avg_length"] = r.avg_length;
  j["median_length"] = r.median_length;
  j["novel_ngrams"] = {{"1", r.novel_ngrams.at(0)},
                       {"2", r.novel_ngrams.at(1)},
                       {"3", r.novel_ngrams.at(2)},
                       {"4", r.novel_ngrams.at(3)}};
  j["copied_span_fraction"] = r.copied_span_fraction;
  j["leading_fraction"] = r.leading_fraction;
  j["leading_bias"] = r.leading_bias;
  if (r.attention) j["attention"] = to_json(*r.attention);
  return j;
}

std::string histogram_csv(const EvidentHistogram& h) {
  std::ostringstream out;
  out << std::setprecision(17) << "bin,lower,upper,proportion\n";
  const double bins = static_cast<double>(h.proportions.size());
  for (std::size_t b = 0; b < h.proportions.size(); ++b) {
    out << b + 1 << ',' << static_cast<double>(b) / bins << ',' << static_cast<double>(b + 1) / bins << ','
        << h.proportions[b] << '\n';
  }
  return out.str();
}

std::string reports_csv(std::span<const MetricsReport> reports) {
  std::ostringstream out;
  out << std::setprecision(17)
      << "system,documents,rouge_mode,r1,r2,rl,avg_length,median_length,novel1,novel2,novel3,novel4,"
         "copied_span_fraction,leading_bias\n";
  auto opt = [&](const std::optional<double>& v) {
    if (v) out << *v;
    out << ',';
  };
  for (const auto& r : reports) {
    out << r.system << ',' << r.documents << ',' << to_string(r.rouge_mode) << ',';
    opt(r.rouge1);
    opt(r.rouge2);
    opt(r.rougeL);
    out << r.avg_length << ',' << r.median_length;
    for (double v : r.novel_ngrams) out << ',' << v;
    out << ',' << r.copied_span_fraction << ',' << r.leading_bias << '\n';
  }
  return out.str();
}

}  // namespace plate
