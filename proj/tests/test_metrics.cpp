#include <gtest/gtest.h>

#include <random>

#include "plate/metrics.hpp"
#include "support/rouge_oracle.hpp"

using namespace plate;

namespace {

Words w(std::string_view s) { return tokenize(s); }

Words random_words(std::mt19937_64& rng, std::size_t max_len, std::size_t alphabet) {
  std::uniform_int_distribution<std::size_t> len(0, max_len), pick(0, alphabet - 1);
  Words out(len(rng));
  for (auto& x : out) x = "t" + std::to_string(pick(rng));
  return out;
}

Words numbered(std::size_t from, std::size_t to) {
  Words out;
  for (std::size_t i = from; i <= to; ++i) out.push_back("w" + std::to_string(i));
  return out;
}

Tensor trace_with(std::size_t src_len, std::initializer_list<std::size_t> evident_positions) {
  // One row per evident position: weight 0.5 there, the rest spread thinly.
  Tensor t({evident_positions.size(), src_len});
  std::size_t r = 0;
  for (std::size_t pos : evident_positions) {
    for (std::size_t j = 0; j < src_len; ++j) t.at(r, j) = 0.5 / static_cast<double>(src_len - 1);
    t.at(r, pos - 1) = 0.5;
    ++r;
  }
  return t;
}

}  // namespace

TEST(RougeN, IdenticalSequencesScoreOne) {
  const auto a = w("the cat sat on the mat");
  for (std::size_t n : {1u, 2u, 3u}) {
    EXPECT_DOUBLE_EQ(rouge_n(a, a, n, RougeMode::f1), 1.0);
    EXPECT_DOUBLE_EQ(rouge_n(a, a, n, RougeMode::limited_recall), 1.0);
  }
}

TEST(RougeN, HandCountedOverlaps) {
  EXPECT_NEAR(rouge_n(w("the cat sat"), w("the cat ran"), 1, RougeMode::f1), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(rouge_n(w("the cat sat"), w("the cat ran"), 2, RougeMode::f1), 0.5, 1e-15);
  EXPECT_NEAR(rouge_n(w("a b c d"), w("a x"), 1, RougeMode::limited_recall), 0.5, 1e-15);
  EXPECT_DOUBLE_EQ(rouge_n(w("a a a"), w("a"), 1, RougeMode::f1), 0.5);  // clipped: P=1/3, R=1
}

TEST(RougeN, EdgeCases) {
  EXPECT_THROW(rouge_n(w("a"), w("a"), 0, RougeMode::f1), std::invalid_argument);
  EXPECT_EQ(rouge_n(Words{}, Words{}, 1, RougeMode::f1), 0.0);
  EXPECT_EQ(rouge_n(w("a"), w("a b"), 2, RougeMode::f1), 0.0);
}

TEST(RougeL, LcsExamples) {
  EXPECT_EQ(lcs_length(w("a b c d"), w("a c b d")), 3u);
  EXPECT_DOUBLE_EQ(rouge_l(w("a b c d"), w("a c b d"), RougeMode::f1), 0.75);
  EXPECT_EQ(rouge_l(w("a b"), w("c d"), RougeMode::f1), 0.0);
  EXPECT_DOUBLE_EQ(rouge_l(w("a b c d e"), w("a b c"), RougeMode::limited_recall), 1.0);
}

TEST(RougeProperty, MatchesBruteForceOracle) {
  using namespace plate::testing;
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto c = random_words(rng, 14, 6), r = random_words(rng, 14, 6);
    for (std::size_t n : {1u, 2u}) {
      const auto o = oracle_rouge_n(c, r, n);
      const auto s = rouge_n_scores(c, r, n);
      ASSERT_NEAR(s.precision, o.p, 1e-12);
      ASSERT_NEAR(s.recall, o.r, 1e-12);
      ASSERT_NEAR(rouge_n(c, r, n, RougeMode::f1), o.f, 1e-12);
      ASSERT_NEAR(rouge_n(c, r, n, RougeMode::limited_recall), oracle_rouge_n(oracle_truncate(c, r.size()), r, n).r,
                  1e-12);
    }
    ASSERT_NEAR(rouge_l(c, r, RougeMode::f1), oracle_rouge_l(c, r).f, 1e-12);
    ASSERT_NEAR(rouge_l(c, r, RougeMode::limited_recall), oracle_rouge_l(oracle_truncate(c, r.size()), r).r, 1e-12);
  }
}

TEST(RougeProperty, PrecisionRecallDuality) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    const auto a = random_words(rng, 12, 5), b = random_words(rng, 12, 5);
    for (std::size_t n : {1u, 2u, 3u}) {
      ASSERT_DOUBLE_EQ(rouge_n_scores(a, b, n).precision, rouge_n_scores(b, a, n).recall);
    }
    ASSERT_DOUBLE_EQ(rouge_l_scores(a, b).precision, rouge_l_scores(b, a).recall);
    ASSERT_EQ(rouge_n(a, b, 1, RougeMode::f1), rouge_n(a, b, 1, RougeMode::f1));
  }
}

TEST(NovelNgrams, HandEnumeration) {
  EXPECT_NEAR(novel_ngram_ratio(w("a b f"), w("a b c d e"), 1), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(novel_ngram_ratio(w("a b f"), w("a b c d e"), 2), 0.5, 1e-15);
  EXPECT_EQ(novel_ngram_ratio(w("b c d"), w("a b c d e"), 3), 0.0);
  EXPECT_EQ(novel_ngram_ratio(w("x y z"), w("a b c d e"), 1), 1.0);
  EXPECT_THROW(novel_ngram_ratio(w("a b"), w("a b c"), 3), std::invalid_argument);
}

TEST(NovelNgrams, PositionalVersusDistinct) {
  // "f f a": positional 2/3 novel unigrams, distinct {f, a} -> 1/2
  EXPECT_NEAR(novel_ngram_ratio(w("f f a"), w("a b"), 1), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(novel_ngram_ratio(w("f f a"), w("a b"), 1, true), 0.5, 1e-15);
}

TEST(NovelNgramsProperty, SummaryAgainstItselfIsZero) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    auto s = random_words(rng, 12, 8);
    if (s.size() < 4) continue;
    for (std::size_t n = 1; n <= 4; ++n) ASSERT_EQ(novel_ngram_ratio(s, s, n), 0.0);
  }
}

TEST(CopiedSpans, HandAlignment) {
  const auto doc = numbered(1, 20);
  Words summary = numbered(3, 8);
  summary.push_back("zzz");
  for (const auto& x : numbered(15, 16)) summary.push_back(x);
  EXPECT_NEAR(copied_span_fraction(summary, doc), 6.0 / 9.0, 1e-15);
  EXPECT_DOUBLE_EQ(copied_span_fraction(numbered(5, 14), doc), 1.0);
  EXPECT_EQ(copied_span_fraction(w("w1 w3 w5 w7 w9 w11"), doc), 0.0);
  EXPECT_THROW(copied_span_fraction(Words{}, doc), std::invalid_argument);
  EXPECT_THROW(copied_span_fraction(summary, doc, 0), std::invalid_argument);
}

TEST(CopiedSpansProperty, NonIncreasingInMinSpan) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const auto doc = random_words(rng, 30, 4);
    auto sum = random_words(rng, 15, 4);
    if (sum.empty()) continue;
    double prev = 2.0;
    for (std::size_t m = 1; m <= 8; ++m) {
      const double f = copied_span_fraction(sum, doc, m);
      ASSERT_LE(f, prev);
      ASSERT_GE(f, 0.0);
      prev = f;
    }
  }
}

TEST(LeadingBias, Examples) {
  std::vector<Words> doc;
  for (std::size_t s = 0; s < 10; ++s) doc.push_back(numbered(10 * s, 10 * s + 4));
  EXPECT_DOUBLE_EQ(leading_bias_fraction({doc[0], doc[8]}, doc, 0.4), 0.5);
  EXPECT_DOUBLE_EQ(leading_bias_fraction({doc[0], doc[8]}, doc, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(leading_bias_fraction({w("q r s")}, {w("a b c")}, 0.1), 1.0);
  EXPECT_THROW(leading_bias_fraction({w("a")}, {}, 0.4), std::invalid_argument);
  EXPECT_THROW(leading_bias_fraction({w("a")}, {w("a")}, 0.0), std::invalid_argument);
  // ties go to the earliest sentence
  EXPECT_EQ(best_matching_sentence(w("x"), {w("a"), w("x b"), w("x c")}), 1u);
  EXPECT_EQ(best_matching_sentence(w("zz"), {w("a"), w("b")}), 0u);
}

TEST(LeadingBias, WindowUsesCeiling) {
  std::vector<Words> doc;
  for (std::size_t s = 0; s < 11; ++s) doc.push_back(numbered(10 * s, 10 * s + 3));
  // ceil(0.4 * 11) = 5: sentence index 4 is leading, 5 is not
  EXPECT_DOUBLE_EQ(leading_bias_fraction({doc[4]}, doc, 0.4), 1.0);
  EXPECT_DOUBLE_EQ(leading_bias_fraction({doc[5]}, doc, 0.4), 0.0);
}

TEST(EvidentHistogram, HandBinning) {
  const std::vector<Tensor> traces{trace_with(10, {1, 2, 9})};
  const auto h = evident_attention_histogram(traces, 0.15, 5);
  ASSERT_TRUE(h.defined);
  EXPECT_NEAR(h.proportions[0], 2.0 / 3.0, 1e-15);
  EXPECT_EQ(h.proportions[1], 0.0);
  EXPECT_EQ(h.proportions[2], 0.0);
  EXPECT_EQ(h.proportions[3], 0.0);
  EXPECT_NEAR(h.proportions[4], 1.0 / 3.0, 1e-15);
  EXPECT_EQ(h.evident_weights, 3u);
  EXPECT_EQ(h.total_weights, 30u);
  EXPECT_NEAR(h.tail_mass(2), 1.0 / 3.0, 1e-15);
}

TEST(EvidentHistogram, PointMassAndUniformAndErrors) {
  const std::vector<Tensor> last{trace_with(7, {7, 7})};
  EXPECT_DOUBLE_EQ(evident_attention_histogram(last).proportions[4], 1.0);
  const std::vector<Tensor> uniform{Tensor({3, 8}, 1.0 / 8.0)};
  const auto u = evident_attention_histogram(uniform);
  EXPECT_FALSE(u.defined);
  EXPECT_EQ(u.evident_rate, 0.0);
  EXPECT_THROW(evident_attention_histogram(std::vector<Tensor>{}), std::invalid_argument);
  EXPECT_THROW(evident_attention_histogram(uniform, 0.0), std::invalid_argument);
  EXPECT_THROW(evident_attention_histogram(uniform, 0.15, 0), std::invalid_argument);
}

TEST(EvidentHistogram, AveragesPerDocumentProportions) {
  // doc A: all evidence in bin 1; doc B: half in bin 1, half in bin 5
  const std::vector<Tensor> traces{trace_with(10, {1, 1, 1, 1}), trace_with(10, {2, 10})};
  const auto h = evident_attention_histogram(traces);
  EXPECT_NEAR(h.proportions[0], 0.75, 1e-15);
  EXPECT_NEAR(h.proportions[4], 0.25, 1e-15);
  double s = 0.0;
  for (double p : h.proportions) s += p;
  EXPECT_NEAR(s, 1.0, 1e-12);
}

TEST(LengthStats, MeanMedianAndPermutation) {
  EXPECT_EQ(summary_length_stats({w("a b c d e f g")}).mean, 7.0);
  EXPECT_EQ(summary_length_stats({w("a b c d"), w("a b c d e f")}).mean, 5.0);
  const auto a = summary_length_stats({w("a"), w("a b c"), w("a b <sep> c d")});
  const auto b = summary_length_stats({w("a b <sep> c d"), w("a"), w("a b c")});
  EXPECT_EQ(a.mean, b.mean);
  EXPECT_EQ(a.median, 3.0);
  EXPECT_EQ(a.mean, 8.0 / 3.0);
  EXPECT_THROW(summary_length_stats({}), std::invalid_argument);
}

TEST(Bootstrap, DetectsAClearDifferenceAndIsDeterministic) {
  std::vector<double> a(200), b(200);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0.0, 0.1);
  for (std::size_t i = 0; i < a.size(); ++i) {
    b[i] = g(rng);
    a[i] = b[i] + 0.05 + g(rng) * 0.1;
  }
  const auto r = paired_bootstrap(a, b);
  EXPECT_GT(r.lower, 0.0);
  EXPECT_LT(r.lower, r.mean_difference);
  EXPECT_GT(r.upper, r.mean_difference);
  EXPECT_EQ(r.p_value, 0.0);
  const auto r2 = paired_bootstrap(a, b);
  EXPECT_EQ(r.lower, r2.lower);
  EXPECT_THROW(paired_bootstrap(a, std::vector<double>{1.0}), std::invalid_argument);
}

TEST(Report, ComputesEveryStatistic) {
  const std::vector<Words> docs{w("a b c d e <sep> f g h i j <sep> k l m n o")};
  const std::vector<Words> outs{w("a b c d e <sep> zz")};
  const std::vector<Words> refs{w("a b c d e")};
  const auto rep = compute_report("sys", outs, docs, &refs, {});
  ASSERT_TRUE(rep.rouge1.has_value());
  EXPECT_NEAR(*rep.rouge1, 2.0 * (5.0 / 7.0) * 1.0 / (5.0 / 7.0 + 1.0), 1e-12);
  EXPECT_EQ(rep.avg_length, 6.0);
  EXPECT_EQ(rep.novel_ngrams.size(), 4u);
  EXPECT_NEAR(rep.novel_ngrams[0], 1.0 / 7.0, 1e-12);
  EXPECT_NEAR(rep.copied_span_fraction, 6.0 / 7.0, 1e-12);  // "a b c d e <sep>" is one 6-word fragment
  EXPECT_DOUBLE_EQ(rep.leading_bias, 1.0);
  const auto j = to_json(rep);
  EXPECT_EQ(j["rouge"]["mode"], "f1");
  EXPECT_NE(reports_csv(std::vector<MetricsReport>{rep}).find("sys,1,f1,"), std::string::npos);
  const auto no_ref = compute_report("sys", outs, docs, nullptr, {});
  EXPECT_FALSE(no_ref.rouge1.has_value());
  EXPECT_FALSE(to_json(no_ref).contains("rouge"));
}
