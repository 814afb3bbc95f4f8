#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "plate/corpus.hpp"
#include "plate/errors.hpp"
#include "plate/metrics.hpp"

using namespace plate;

namespace {

double mean_leading_bias(const Corpus& c, double f) {
  double total = 0.0;
  for (const auto& ex : c) total += leading_bias_fraction(split_sentences(ex.summary), split_sentences(ex.document), f);
  return total / static_cast<double>(c.size());
}

double mean_novel_unigrams(const Corpus& c) {
  double total = 0.0;
  for (const auto& ex : c) total += novel_ngram_ratio(ex.summary, ex.document, 1);
  return total / static_cast<double>(c.size());
}

SynthConfig small_config(std::uint64_t seed) {
  SynthConfig cfg;
  cfg.docs = 1000;
  cfg.valid_docs = 0;
  cfg.test_docs = 0;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST(Tokenize, LowercasesAndSplitsOnWhitespace) {
  EXPECT_EQ(tokenize("  The Cat\tsat\n"), (Words{"the", "cat", "sat"}));
  EXPECT_TRUE(tokenize("   ").empty());
  EXPECT_EQ(join_words({"a", "b"}), "a b");
}

TEST(SplitSentences, SeparatorTokenOrPeriod) {
  EXPECT_EQ(split_sentences(tokenize("a b <sep> c")), (std::vector<Words>{{"a", "b"}, {"c"}}));
  EXPECT_EQ(split_sentences(tokenize("a b . c d .")), (std::vector<Words>{{"a", "b", "."}, {"c", "d", "."}}));
  EXPECT_EQ(split_sentences(tokenize("a b")), (std::vector<Words>{{"a", "b"}}));
}

TEST(Vocabulary, ReservedIdsAndFrequencyOrder) {
  Corpus c{{"1", tokenize("b a b c"), tokenize("a d"), Split::train}};
  const auto v = build_vocab(c, 1);
  EXPECT_EQ(v.token(kPadId), "<pad>");
  EXPECT_EQ(v.token(kUnkId), "<unk>");
  EXPECT_EQ(v.token(kBosId), "<s>");
  EXPECT_EQ(v.token(kEosId), "</s>");
  EXPECT_EQ(v.token(kSepId), "<sep>");
  // a:2, b:2, c:1, d:1 -> a b c d
  EXPECT_EQ(v.tokens(), (std::vector<std::string>{"<pad>", "<unk>", "<s>", "</s>", "<sep>", "a", "b", "c", "d"}));
  EXPECT_EQ(build_vocab(c, 1), v);
  const auto cut = build_vocab(c, 2);
  EXPECT_EQ(cut.size(), 7u);
  EXPECT_EQ(cut.id("c"), kUnkId);
  EXPECT_THROW(build_vocab(Corpus{}, 1), std::invalid_argument);
}

TEST(Vocabulary, EncodeDecodeRoundTrip) {
  const auto corpus = synth_corpus_generate(small_config(3));
  const auto v = build_vocab(corpus, 1);
  for (std::size_t i = 0; i < 50; ++i) {
    EXPECT_EQ(v.decode(v.encode(corpus[i].document)), corpus[i].document);
    EXPECT_EQ(v.decode(v.encode(corpus[i].summary)), corpus[i].summary);
  }
  EXPECT_EQ(Vocabulary::from_tokens(v.tokens()), v);
  EXPECT_THROW(Vocabulary::from_tokens({"a", "b"}), std::invalid_argument);
  auto dup = v.tokens();
  dup.push_back(dup.back());
  EXPECT_THROW(Vocabulary::from_tokens(dup), std::invalid_argument);
  EXPECT_THROW(v.token(static_cast<TokenId>(v.size())), std::out_of_range);
}

TEST(Jsonl, RoundTripAndEmptyFile) {
  const auto path = std::filesystem::temp_directory_path() / "plate_corpus_roundtrip.jsonl";
  SynthConfig cfg = small_config(4);
  cfg.docs = 20;
  cfg.valid_docs = 3;
  cfg.test_docs = 2;
  const auto corpus = synth_corpus_generate(cfg);
  write_jsonl(corpus, path.string());
  EXPECT_EQ(load_jsonl(path.string()), corpus);
  { std::ofstream(path.string(), std::ios::trunc); }
  EXPECT_TRUE(load_jsonl(path.string()).empty());
  std::filesystem::remove(path);
}

TEST(Jsonl, ErrorsCiteTheLine) {
  const std::string text =
      "{\"id\":\"a\",\"document\":\"x y\",\"summary\":\"x\"}\n"
      "\n"
      "{\"id\":\"b\",\"document\":\"x y\"}\n";
  try {
    parse_jsonl(text);
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
    EXPECT_NE(std::string(e.what()).find("summary"), std::string::npos);
  }
  EXPECT_THROW(parse_jsonl("{not json}\n"), ParseError);
  EXPECT_THROW(parse_jsonl("{\"id\":1,\"document\":\"a\",\"summary\":\"b\"}"), ParseError);
  EXPECT_EQ(parse_jsonl("{\"id\":\"a\",\"document\":\"A B\",\"summary\":\"a\"}").at(0).document,
            (Words{"a", "b"}));
}

TEST(ValidateCorpus, RejectsDuplicatesAndEmptyFields) {
  Corpus c{{"a", {"x"}, {"y"}, Split::train}, {"a", {"x"}, {"y"}, Split::train}};
  EXPECT_THROW(validate_corpus(c), std::invalid_argument);
  c[1].id = "b";
  EXPECT_NO_THROW(validate_corpus(c));
  c[1].summary.clear();
  EXPECT_THROW(validate_corpus(c), std::invalid_argument);
}

TEST(SynthConfig, ValidationAndJson) {
  SynthConfig c;
  EXPECT_NO_THROW(c.validate());
  nlohmann::json j = c;
  EXPECT_EQ(j.get<SynthConfig>(), c);
  c.key_sentences = 11;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = SynthConfig{};
  c.lead_skew = 1.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = SynthConfig{};
  c.paraphrase_rate = -0.1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(SynthCorpus, StructureAndDeterminism) {
  SynthConfig cfg = small_config(5);
  cfg.docs = 30;
  cfg.valid_docs = 5;
  cfg.test_docs = 4;
  const auto a = synth_corpus_generate(cfg);
  EXPECT_EQ(a, synth_corpus_generate(cfg));
  ASSERT_EQ(a.size(), 39u);
  EXPECT_EQ(a[29].split, Split::train);
  EXPECT_EQ(a[30].split, Split::valid);
  EXPECT_EQ(a[38].split, Split::test);
  EXPECT_NO_THROW(validate_corpus(a));
  const auto lex = synth_lexicon(cfg);
  for (const auto& ex : a) {
    const auto sents = split_sentences(ex.document);
    EXPECT_GE(sents.size(), cfg.min_sentences);
    EXPECT_LE(sents.size(), cfg.max_sentences);
    EXPECT_EQ(split_sentences(ex.summary).size(), cfg.key_sentences);
    for (const auto& s : split_sentences(ex.summary)) {
      EXPECT_TRUE(std::find(lex.markers.begin(), lex.markers.end(), s.front()) != lex.markers.end());
    }
  }
  cfg.seed = 6;
  EXPECT_NE(synth_corpus_generate(cfg), a);
}

TEST(SynthCorpus, NoParaphraseMeansVerbatimExtracts) {
  SynthConfig cfg = small_config(7);
  cfg.docs = 200;
  cfg.paraphrase_rate = 0.0;
  const auto c = synth_corpus_generate(cfg);
  EXPECT_EQ(mean_novel_unigrams(c), 0.0);
  for (const auto& ex : c) {
    const auto doc = split_sentences(ex.document);
    for (const auto& s : split_sentences(ex.summary)) EXPECT_NE(std::find(doc.begin(), doc.end(), s), doc.end());
  }
}

TEST(SynthCorpus, KeyPositionDraws) {
  std::mt19937_64 rng(1);
  EXPECT_EQ(draw_key_positions(10, 3, 1.0, rng), (std::vector<std::size_t>{0, 1, 2}));
  for (int i = 0; i < 100; ++i) {
    const auto p = draw_key_positions(6, 6, 0.3, rng);
    EXPECT_EQ(p, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5}));
  }
  EXPECT_THROW(draw_key_positions(2, 3, 0.5, rng), std::invalid_argument);
}

// Uniform key positions over 10..12 sentences put ceil(0.4 N) / N of them in
// the leading window; the average of 4/10, 5/11 and 5/12 is 0.4237.
TEST(SynthCorpus, UnskewedLeadingBiasIsNearFortyPercent) {
  SynthConfig cfg = small_config(11);
  cfg.lead_skew = 0.0;
  const double lb = mean_leading_bias(synth_corpus_generate(cfg), 0.4);
  EXPECT_NEAR(lb, 0.4, 0.05);
  EXPECT_NEAR(lb, (0.4 + 5.0 / 11.0 + 5.0 / 12.0) / 3.0, 0.04);
}

// Expected-value comparison: consecutive Monte Carlo means may differ by
// sampling noise, bounded here by three standard errors of the difference.
TEST(SynthCorpusProperty, LeadSkewNeverLowersLeadingBias) {
  for (std::uint64_t seed : {21u, 22u, 23u}) {
    double prev_mean = -1.0, prev_var = 0.0;
    for (double skew : {0.0, 0.2, 0.5, 0.8, 1.0}) {
      SynthConfig cfg = small_config(seed);
      cfg.lead_skew = skew;
      std::vector<double> per_doc;
      for (const auto& ex : synth_corpus_generate(cfg)) {
        per_doc.push_back(leading_bias_fraction(split_sentences(ex.summary), split_sentences(ex.document), 0.4));
      }
      const double n = static_cast<double>(per_doc.size());
      double mean = 0.0, var = 0.0;
      for (double x : per_doc) mean += x / n;
      for (double x : per_doc) var += (x - mean) * (x - mean) / (n - 1.0);
      if (prev_mean >= 0.0) {
        EXPECT_GE(mean, prev_mean - 3.0 * std::sqrt(var / n + prev_var / n)) << "seed " << seed << " skew " << skew;
      }
      prev_mean = mean;
      prev_var = var;
    }
    EXPECT_GT(prev_mean, 0.99);
  }
}

TEST(SynthCorpusProperty, ParaphraseRateNeverLowersNovelty) {
  for (std::uint64_t seed : {31u, 32u, 33u}) {
    double prev = -1.0;
    for (double rate : {0.0, 0.1, 0.3, 0.6, 1.0}) {
      SynthConfig cfg = small_config(seed);
      cfg.docs = 300;
      cfg.paraphrase_rate = rate;
      const double nov = mean_novel_unigrams(synth_corpus_generate(cfg));
      EXPECT_GE(nov, prev) << "seed " << seed << " rate " << rate;
      prev = nov;
    }
  }
}
