#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "plate/model.hpp"

namespace plate {

inline constexpr std::string_view kPadToken = "<pad>";
inline constexpr std::string_view kUnkToken = "<unk>";
inline constexpr std::string_view kBosToken = "<s>";
inline constexpr std::string_view kEosToken = "</s>";
inline constexpr std::string_view kSepToken = "<sep>";

using Words = std::vector<std::string>;

/// Lowercases and splits on ASCII whitespace.
Words tokenize(std::string_view text);
std::string join_words(const Words& words);

/// Splits on the sentence separator token; text without one is split after
/// every "." token instead. Separators are dropped, periods are kept.
std::vector<Words> split_sentences(const Words& words);

enum class Split { train, valid, test };
std::string_view to_string(Split s);
Split parse_split(std::string_view s);

struct Example {
  std::string id;
  Words document;
  Words summary;
  Split split = Split::train;

  friend bool operator==(const Example&, const Example&) = default;
};

using Corpus = std::vector<Example>;

/// Throws std::invalid_argument on an empty document or summary or a
/// duplicated id.
void validate_corpus(const Corpus& corpus);

/// One JSON object per line with "id", "document" and "summary" strings and
/// an optional "split". Blank lines are skipped. Throws ParseError naming
/// the line for malformed JSON or a missing field.
Corpus load_jsonl(const std::string& path);
Corpus parse_jsonl(std::string_view text);
void write_jsonl(const Corpus& corpus, const std::string& path);
std::string format_jsonl(const Corpus& corpus);

/// Token/id bijection with the five reserved ids at 0..4.
class Vocabulary {
 public:
  Vocabulary();
  /// Rebuilds from an id-ordered token list (as stored in a model file).
  /// Throws std::invalid_argument on duplicates or misplaced reserved tokens.
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  bool contains(std::string_view token) const;
  /// Unknown tokens map to kUnkId.
  TokenId id(std::string_view token) const;
  /// Throws std::out_of_range for an id outside the vocabulary.
  const std::string& token(TokenId id) const;

  std::vector<TokenId> encode(const Words& words) const;
  /// Pad, start and end ids are dropped.
  Words decode(std::span<const TokenId> ids) const;

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  void add(std::string token);
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

/// Every document and summary token with frequency >= min_freq, ordered by
/// frequency (descending) then token. Throws on an empty corpus.
Vocabulary build_vocab(const Corpus& corpus, std::size_t min_freq = 1);

// ---------------------------------------------------------------------------
// Synthetic summarization corpus.
//
// Documents are sequences of pseudo-word sentences joined by the separator.
// A few key sentences open with a marker word; the gold summary lists the key
// sentences in document order, each word swapped for its synonym with
// probability paraphrase_rate. Key positions are drawn one at a time with
// weight (1 - lead_skew)^index over the remaining sentences.

struct SynthConfig {
  std::size_t docs = 2000;        // train split
  std::size_t valid_docs = 200;
  std::size_t test_docs = 200;
  std::size_t min_sentences = 10;
  std::size_t max_sentences = 12;
  std::size_t min_words = 4;      // per sentence, marker included
  std::size_t max_words = 6;
  std::size_t vocab_size = 120;   // content pseudo-words (even, for pairing)
  std::size_t markers = 3;
  std::size_t key_sentences = 2;
  double lead_skew = 0.8;
  double paraphrase_rate = 0.3;
  std::uint64_t seed = 1;

  /// Throws std::invalid_argument on rates outside [0,1], an empty range,
  /// more key sentences than the shortest document, or too few words.
  void validate() const;
  friend bool operator==(const SynthConfig&, const SynthConfig&) = default;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

/// Pseudo-word lexicon of a synthetic corpus: content words, marker words
/// and the synonym pairing over content words.
struct SynthLexicon {
  std::vector<std::string> content;
  std::vector<std::string> markers;
  std::unordered_map<std::string, std::string> synonym;
};

SynthLexicon synth_lexicon(const SynthConfig& config);

/// Train, valid and test examples in that order; a pure function of config.
Corpus synth_corpus_generate(const SynthConfig& config);

/// Index of the key sentences in each generated document, as drawn.
std::vector<std::size_t> draw_key_positions(std::size_t sentences, std::size_t keys, double lead_skew,
                                            std::mt19937_64& rng);

}  // namespace plate
