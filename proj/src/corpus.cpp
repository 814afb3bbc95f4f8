#include "plate/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <unordered_set>

#include "plate/errors.hpp"

namespace plate {

Words tokenize(std::string_view text) {
  Words out;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::string join_words(const Words& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out.push_back(' ');
    out += words[i];
  }
  return out;
}

std::vector<Words> split_sentences(const Words& words) {
  const bool has_sep = std::find(words.begin(), words.end(), kSepToken) != words.end();
  std::vector<Words> out;
  Words cur;
  for (const auto& w : words) {
    if (has_sep && w == kSepToken) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
      continue;
    }
    cur.push_back(w);
    if (!has_sep && w == ".") {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "train";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "valid") return Split::valid;
  if (s == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + std::string(s) + "'");
}

void validate_corpus(const Corpus& corpus) {
  std::unordered_set<std::string> ids;
  for (const auto& ex : corpus) {
    if (ex.document.empty()) throw std::invalid_argument("example " + ex.id + ": empty document");
    if (ex.summary.empty()) throw std::invalid_argument("example " + ex.id + ": empty summary");
    if (!ids.insert(ex.id).second) throw std::invalid_argument("duplicate example id " + ex.id);
  }
}

// ---------------------------------------------------------------------------
// JSONL

namespace {

const std::string& required_string(const nlohmann::json& obj, const char* field, std::size_t line) {
  auto it = obj.find(field);
  if (it == obj.end()) throw ParseError(std::string("missing field \"") + field + "\"", line);
  if (!it->is_string()) throw ParseError(std::string("field \"") + field + "\" must be a string", line);
  return it->get_ref<const std::string&>();
}

}  // namespace

Corpus parse_jsonl(std::string_view text) {
  Corpus corpus;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto end = std::min(text.find('\n', pos), text.size());
    const auto line = text.substr(pos, end - pos);
    ++line_no;
    pos = end + 1;
    if (std::all_of(line.begin(), line.end(), [](char c) { return std::isspace(static_cast<unsigned char>(c)); })) {
      if (end == text.size()) break;
      continue;
    }
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("malformed JSON: ") + e.what(), line_no);
    }
    if (!obj.is_object()) throw ParseError("expected a JSON object", line_no);
    Example ex;
    ex.id = required_string(obj, "id", line_no);
    ex.document = tokenize(required_string(obj, "document", line_no));
    ex.summary = tokenize(required_string(obj, "summary", line_no));
    if (auto it = obj.find("split"); it != obj.end()) {
      try {
        ex.split = parse_split(it->get<std::string>());
      } catch (const std::exception& e) {
        throw ParseError(e.what(), line_no);
      }
    }
    corpus.push_back(std::move(ex));
    if (end == text.size()) break;
  }
  return corpus;
}

Corpus load_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_jsonl(ss.str());
}

std::string format_jsonl(const Corpus& corpus) {
  std::string out;
  for (const auto& ex : corpus) {
    nlohmann::ordered_json j;
    j["id"] = ex.id;
    j["document"] = join_words(ex.document);
    j["summary"] = join_words(ex.summary);
    j["split"] = to_string(ex.split);
    out += j.dump();
    out.push_back('\n');
  }
  return out;
}

void write_jsonl(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << format_jsonl(corpus);
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() {
  for (auto t : {kPadToken, kUnkToken, kBosToken, kEosToken, kSepToken}) add(std::string(t));
}

void Vocabulary::add(std::string token) {
  const auto id = static_cast<TokenId>(tokens_.size());
  if (!ids_.emplace(token, id).second) throw std::invalid_argument("duplicate vocabulary token '" + token + "'");
  tokens_.push_back(std::move(token));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  Vocabulary v;
  if (tokens.size() < kReservedTokens) throw std::invalid_argument("vocabulary lacks the reserved tokens");
  for (std::size_t i = 0; i < kReservedTokens; ++i) {
    if (tokens[i] != v.tokens_[i]) throw std::invalid_argument("reserved token misplaced at id " + std::to_string(i));
  }
  for (std::size_t i = kReservedTokens; i < tokens.size(); ++i) v.add(std::move(tokens[i]));
  return v;
}

bool Vocabulary::contains(std::string_view token) const { return ids_.contains(std::string(token)); }

TokenId Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Vocabulary::encode(const Words& words) const {
  std::vector<TokenId> out;
  out.reserve(words.size());
  for (const auto& w : words) out.push_back(id(w));
  return out;
}

Words Vocabulary::decode(std::span<const TokenId> ids) const {
  Words out;
  for (TokenId t : ids) {
    if (t == kPadId || t == kBosId || t == kEosId) continue;
    out.push_back(token(t));
  }
  return out;
}

Vocabulary build_vocab(const Corpus& corpus, std::size_t min_freq) {
  if (corpus.empty()) throw std::invalid_argument("build_vocab: empty corpus");
  std::map<std::string, std::size_t> freq;
  for (const auto& ex : corpus) {
    for (const auto& w : ex.document) ++freq[w];
    for (const auto& w : ex.summary) ++freq[w];
  }
  std::vector<std::pair<std::string, std::size_t>> items(freq.begin(), freq.end());
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  std::vector<std::string> tokens = v.tokens();
  for (auto& [tok, n] : items) {
    if (n < min_freq || v.contains(tok)) continue;
    tokens.push_back(tok);
  }
  return Vocabulary::from_tokens(std::move(tokens));
}

// ---------------------------------------------------------------------------
// Synthetic corpus

void SynthConfig::validate() const {
  auto rate = [](double r, const char* name) {
    if (!(r >= 0.0 && r <= 1.0)) throw std::invalid_argument(std::string(name) + " must lie in [0, 1]");
  };
  rate(lead_skew, "lead_skew");
  rate(paraphrase_rate, "paraphrase_rate");
  if (min_sentences == 0 || min_sentences > max_sentences) throw std::invalid_argument("empty sentence-count range");
  if (min_words < 2 || min_words > max_words) throw std::invalid_argument("sentence length range must start at 2");
  if (key_sentences == 0 || key_sentences > min_sentences) {
    throw std::invalid_argument("key_sentences must lie in [1, min_sentences]");
  }
  if (vocab_size < 2 || vocab_size % 2 != 0) throw std::invalid_argument("vocab_size must be even and >= 2");
  if (markers == 0) throw std::invalid_argument("markers must be positive");
}

void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"docs", c.docs},
       {"valid_docs", c.valid_docs},
       {"test_docs", c.test_docs},
       {"min_sentences", c.min_sentences},
       {"max_sentences", c.max_sentences},
       {"min_words", c.min_words},
       {"max_words", c.max_words},
       {"vocab_size", c.vocab_size},
       {"markers", c.markers},
       {"key_sentences", c.key_sentences},
       {"lead_skew", c.lead_skew},
       {"paraphrase_rate", c.paraphrase_rate},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
  SynthConfig d;
  c.docs = j.value("docs", d.docs);
  c.valid_docs = j.value("valid_docs", d.valid_docs);
  c.test_docs = j.value("test_docs", d.test_docs);
  c.min_sentences = j.value("min_sentences", d.min_sentences);
  c.max_sentences = j.value("max_sentences", d.max_sentences);
  c.min_words = j.value("min_words", d.min_words);
  c.max_words = j.value("max_words", d.max_words);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.markers = j.value("markers", d.markers);
  c.key_sentences = j.value("key_sentences", d.key_sentences);
  c.lead_skew = j.value("lead_skew", d.lead_skew);
  c.paraphrase_rate = j.value("paraphrase_rate", d.paraphrase_rate);
  c.seed = j.value("seed", d.seed);
}

namespace {

std::string pseudo_word(std::mt19937_64& rng) {
  static constexpr std::string_view consonants = "bdfgklmnprstvz";
  static constexpr std::string_view vowels = "aeiou";
  std::uniform_int_distribution<std::size_t> syllables(2, 3);
  std::uniform_int_distribution<std::size_t> c(0, consonants.size() - 1), v(0, vowels.size() - 1);
  std::string w;
  for (std::size_t s = syllables(rng); s > 0; --s) {
    w.push_back(consonants[c(rng)]);
    w.push_back(vowels[v(rng)]);
  }
  return w;
}

}  // namespace

SynthLexicon synth_lexicon(const SynthConfig& config) {
  config.validate();
  // The lexicon depends on the seed but not on corpus sizes.
  std::mt19937_64 rng(config.seed ^ 0x6c657869636f6eULL);
  std::set<std::string> seen;
  SynthLexicon lex;
  auto fresh = [&] {
    for (;;) {
      auto w = pseudo_word(rng);
      if (seen.insert(w).second) return w;
    }
  };
  for (std::size_t i = 0; i < config.vocab_size; ++i) lex.content.push_back(fresh());
  for (std::size_t i = 0; i < config.markers; ++i) lex.markers.push_back("key" + fresh());
  std::vector<std::size_t> order(lex.content.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t i = 0; i + 1 < order.size(); i += 2) {
    const auto& a = lex.content[order[i]];
    const auto& b = lex.content[order[i + 1]];
    lex.synonym[a] = b;
    lex.synonym[b] = a;
  }
  return lex;
}

std::vector<std::size_t> draw_key_positions(std::size_t sentences, std::size_t keys, double lead_skew,
                                            std::mt19937_64& rng) {
  if (keys > sentences) throw std::invalid_argument("more key sentences than sentences");
  const double q = 1.0 - lead_skew;
  std::vector<bool> taken(sentences, false);
  std::vector<std::size_t> picked;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t k = 0; k < keys; ++k) {
    double total = 0.0;
    std::vector<double> w(sentences, 0.0);
    for (std::size_t i = 0; i < sentences; ++i) {
      if (!taken[i]) total += (w[i] = std::pow(q, static_cast<double>(i)));
    }
    std::size_t choice = sentences;
    double u = unit(rng) * total;
    if (total > 0.0) {
      for (std::size_t i = 0; i < sentences; ++i) {
        if (taken[i] || w[i] == 0.0) continue;
        choice = i;
        if (u < w[i]) break;
        u -= w[i];
      }
    } else {
      choice = static_cast<std::size_t>(std::find(taken.begin(), taken.end(), false) - taken.begin());
    }
    taken[choice] = true;
    picked.push_back(choice);
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

Corpus synth_corpus_generate(const SynthConfig& config) {
  const auto lex = synth_lexicon(config);
  std::mt19937_64 rng(config.seed);
  std::uniform_int_distribution<std::size_t> n_sent(config.min_sentences, config.max_sentences);
  std::uniform_int_distribution<std::size_t> n_words(config.min_words, config.max_words);
  std::uniform_int_distribution<std::size_t> word(0, lex.content.size() - 1);
  std::uniform_int_distribution<std::size_t> marker(0, lex.markers.size() - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Corpus corpus;
  const std::size_t total = config.docs + config.valid_docs + config.test_docs;
  corpus.reserve(total);
  for (std::size_t d = 0; d < total; ++d) {
    Example ex;
    ex.split = d < config.docs ? Split::train : d < config.docs + config.valid_docs ? Split::valid : Split::test;
    ex.id = std::string(to_string(ex.split)) + "-" + std::to_string(d);
    const std::size_t sentences = n_sent(rng);
    const auto keys = draw_key_positions(sentences, config.key_sentences, config.lead_skew, rng);
    for (std::size_t s = 0; s < sentences; ++s) {
      const bool key = std::binary_search(keys.begin(), keys.end(), s);
      Words sentence;
      const std::size_t len = n_words(rng);
      if (key) sentence.push_back(lex.markers[marker(rng)]);
      while (sentence.size() < len) sentence.push_back(lex.content[word(rng)]);
      if (s) ex.document.emplace_back(kSepToken);
      ex.document.insert(ex.document.end(), sentence.begin(), sentence.end());
      if (key) {
        if (!ex.summary.empty()) ex.summary.emplace_back(kSepToken);
        for (const auto& w : sentence) {
          auto syn = lex.synonym.find(w);
          const double u = unit(rng);
          ex.summary.push_back(syn != lex.synonym.end() && u < config.paraphrase_rate ? syn->second : w);
        }
      }
    }
    corpus.push_back(std::move(ex));
  }
  return corpus;
}

}  // namespace plate
