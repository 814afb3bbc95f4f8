#include "plate/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "plate/errors.hpp"
#include "plate/kernels.hpp"

namespace plate {

// ---------------------------------------------------------------------------
// Transformer adapter

namespace {

class TransformerState : public DecoderState {
 public:
  TransformerState(const Transformer& model, std::shared_ptr<const EncodedSource> src,
                   const AttentionTemperatures& temps, TraceSelection trace)
      : model_(&model), decoder_(model, std::move(src), temps), trace_(trace) {}

  StepScores start() override { return convert(decoder_.step(kBosId)); }
  StepScores feed(TokenId token) override { return convert(decoder_.step(token)); }
  std::unique_ptr<DecoderState> clone() const override { return std::make_unique<TransformerState>(*this); }

 private:
  StepScores convert(StepOutput out) const {
    const auto& c = model_->config;
    const std::size_t src_len = out.cross_attention.cols();
    StepScores s;
    s.logits = std::move(out.logits);
    s.attention.assign(src_len, 0.0);
    std::size_t used = 0;
    for (std::size_t l = 0; l < c.decoder_layers; ++l) {
      if (trace_.layer >= 0 && static_cast<std::size_t>(trace_.layer) != l) continue;
      for (std::size_t h = 0; h < c.n_heads; ++h) {
        if (trace_.head >= 0 && static_cast<std::size_t>(trace_.head) != h) continue;
        const double* row = out.cross_attention.data() + (l * c.n_heads + h) * src_len;
        for (std::size_t j = 0; j < src_len; ++j) s.attention[j] += row[j];
        ++used;
      }
    }
    for (auto& w : s.attention) w /= static_cast<double>(used);
    return s;
  }

  const Transformer* model_;
  IncrementalDecoder decoder_;
  TraceSelection trace_;
};

}  // namespace

TransformerStepModel::TransformerStepModel(const Transformer& model, TraceSelection trace)
    : model_(&model), trace_(trace) {
  const auto& c = model.config;
  if ((trace.layer >= 0 && static_cast<std::size_t>(trace.layer) >= c.decoder_layers) ||
      (trace.head >= 0 && static_cast<std::size_t>(trace.head) >= c.n_heads)) {
    throw std::invalid_argument("trace selection names a layer or head the model does not have");
  }
}

std::size_t TransformerStepModel::vocab_size() const { return model_->config.vocab_size; }

std::unique_ptr<DecoderState> TransformerStepModel::begin(std::span<const TokenId> document,
                                                          const AttentionTemperatures& temps) const {
  return std::make_unique<TransformerState>(*model_, encode_source(document, *model_, temps), temps, trace_);
}

// ---------------------------------------------------------------------------
// Configuration

void LambdaSpec::validate() const {
  auto positive = [](double v, const char* what) {
    if (!(v > 0.0)) throw std::invalid_argument(std::string(what) + " must be positive");
  };
  positive(lambda, "lambda");
  if (range) {
    positive(range->first, "lambda range lower bound");
    if (range->first > range->second) throw std::invalid_argument("lambda range lower bound exceeds upper bound");
  }
  if (enc) positive(*enc, "lambda_enc");
  if (cross) positive(*cross, "lambda_cross");
  if (dec) positive(*dec, "lambda_dec");
}

AttentionTemperatures LambdaSpec::resolve(std::mt19937_64& rng) const {
  validate();
  const double base = range ? draw_random_lambda(range->first, range->second, rng) : lambda;
  return {enc.value_or(base), cross.value_or(base), dec.value_or(base)};
}

std::string_view to_string(Sampler s) {
  switch (s) {
    case Sampler::beam: return "beam";
    case Sampler::ancestral: return "ancestral";
    case Sampler::nucleus: return "nucleus";
  }
  return "beam";
}

Sampler parse_sampler(std::string_view s) {
  if (s == "beam") return Sampler::beam;
  if (s == "ancestral") return Sampler::ancestral;
  if (s == "nucleus") return Sampler::nucleus;
  throw std::invalid_argument("unknown sampler '" + std::string(s) + "'");
}

void BeamConfig::validate() const {
  if (beam_size == 0) throw std::invalid_argument("beam_size must be at least 1");
  if (min_length == 0) throw std::invalid_argument("min_length must be at least 1");
  if (min_length > max_length) throw std::invalid_argument("min_length exceeds max_length");
  if (!(output_temperature > 0.0)) throw std::invalid_argument("output temperature must be positive");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw std::invalid_argument("top_p must lie in (0, 1]");
  lambda.validate();
}

void to_json(nlohmann::json& j, const LambdaSpec& l) {
  j = nlohmann::json::object();
  if (l.range) {
    j["range"] = {l.range->first, l.range->second};
  } else {
    j["lambda"] = l.lambda;
  }
  if (l.enc) j["enc"] = *l.enc;
  if (l.cross) j["cross"] = *l.cross;
  if (l.dec) j["dec"] = *l.dec;
}

void from_json(const nlohmann::json& j, LambdaSpec& l) {
  l = LambdaSpec{};
  if (j.is_number()) {
    l.lambda = j.get<double>();
    return;
  }
  l.lambda = j.value("lambda", 1.0);
  if (j.contains("range")) {
    const auto& r = j.at("range");
    if (!r.is_array() || r.size() != 2) throw std::invalid_argument("lambda range must be [a, b]");
    l.range = std::make_pair(r[0].get<double>(), r[1].get<double>());
  }
  if (j.contains("enc")) l.enc = j.at("enc").get<double>();
  if (j.contains("cross")) l.cross = j.at("cross").get<double>();
  if (j.contains("dec")) l.dec = j.at("dec").get<double>();
}

void to_json(nlohmann::json& j, const BeamConfig& c) {
  j = {{"beam_size", c.beam_size},
       {"length_penalty", c.length_penalty},
       {"min_length", c.min_length},
       {"max_length", c.max_length},
       {"lambda", c.lambda},
       {"output_temperature", c.output_temperature},
       {"sampler", to_string(c.sampler)},
       {"top_p", c.top_p},
       {"seed", c.seed},
       {"capture_attention", c.capture_attention},
       {"trace_layer", c.trace.layer},
       {"trace_head", c.trace.head}};
}

void from_json(const nlohmann::json& j, BeamConfig& c) {
  BeamConfig d;
  c.beam_size = j.value("beam_size", d.beam_size);
  c.length_penalty = j.value("length_penalty", d.length_penalty);
  c.min_length = j.value("min_length", d.min_length);
  c.max_length = j.value("max_length", d.max_length);
  c.lambda = j.contains("lambda") ? j.at("lambda").get<LambdaSpec>() : d.lambda;
  c.output_temperature = j.value("output_temperature", d.output_temperature);
  c.sampler = parse_sampler(j.value("sampler", std::string(to_string(d.sampler))));
  c.top_p = j.value("top_p", d.top_p);
  c.seed = j.value("seed", d.seed);
  c.capture_attention = j.value("capture_attention", d.capture_attention);
  c.trace.layer = j.value("trace_layer", d.trace.layer);
  c.trace.head = j.value("trace_head", d.trace.head);
}

// ---------------------------------------------------------------------------
// Distribution helpers

std::vector<double> apply_output_temperature(std::span<const double> logits, double T) {
  return softmax_with_temperature(logits, T);
}

std::vector<double> nucleus_filter(std::span<const double> probs, double p) {
  if (!(p > 0.0)) throw std::invalid_argument("nucleus mass p must be positive");
  std::vector<double> out(probs.begin(), probs.end());
  if (p >= 1.0) return out;
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  double mass = 0.0;
  std::size_t keep = 0;
  while (keep < order.size()) {
    mass += probs[order[keep++]];
    if (mass >= p - 1e-12) break;
  }
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t i = 0; i < keep; ++i) out[order[i]] = probs[order[i]] / mass;
  return out;
}

double draw_random_lambda(double a, double b, std::mt19937_64& rng) {
  if (!(a > 0.0) || a > b) throw std::invalid_argument("lambda range needs 0 < a <= b");
  if (a == b) return a;
  return std::uniform_real_distribution<double>(a, b)(rng);
}

std::vector<double> step_log_probs(std::span<const double> logits, const BeamConfig& cfg, TokenId eos,
                                   std::size_t generated) {
  std::vector<double> z(logits.begin(), logits.end());
  if (generated < cfg.min_length) z.at(static_cast<std::size_t>(eos)) = -std::numeric_limits<double>::infinity();
  if (std::none_of(z.begin(), z.end(), [](double v) { return std::isfinite(v); })) {
    throw InvalidState("no token has finite probability at this step");
  }
#ifdef PLATE_TEMPERATURE_FREE
  const double mx = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double v : z) sum += std::exp(v - mx);
  const double log_sum = std::log(sum);
  for (auto& v : z) v = v - mx - log_sum;
  return z;
#else
  return log_softmax_with_temperature(z, cfg.output_temperature);
#endif
}

// ---------------------------------------------------------------------------
// Beam search

namespace {

struct TraceNode {
  std::vector<double> attention;
  std::shared_ptr<const TraceNode> prev;
};

Tensor trace_tensor(const std::shared_ptr<const TraceNode>& last, std::size_t steps) {
  if (!last || steps == 0) return Tensor{};
  const std::size_t width = last->attention.size();
  Tensor t({steps, width});
  std::size_t r = steps;
  for (auto node = last; node && r > 0; node = node->prev) {
    --r;
    std::copy(node->attention.begin(), node->attention.end(), t.data() + r * width);
  }
  return t;
}

struct Hypothesis {
  std::unique_ptr<DecoderState> state;
  std::vector<TokenId> tokens;
  double log_prob = 0.0;
  StepScores next;
  std::shared_ptr<const TraceNode> trace;
};

struct Finished {
  DecodeResult result;
  std::size_t step = 0;
};

double normalized(double log_prob, std::size_t steps, double alpha) {
  return log_prob / std::pow(static_cast<double>(steps), alpha);
}

bool better_finished(const Finished& a, const Finished& b) {
  if (a.result.score != b.result.score) return a.result.score > b.result.score;
  if (a.step != b.step) return a.step < b.step;
  return a.result.tokens < b.result.tokens;
}

void check_document(std::span<const TokenId> document) {
  if (document.empty()) throw std::invalid_argument("cannot decode an empty document");
}

}  // namespace

DecodeResult beam_search(const StepModel& model, std::span<const TokenId> document, const BeamConfig& cfg,
                         const AttentionTemperatures& temps) {
  cfg.validate();
  check_document(document);
  const TokenId eos = model.eos();
  const std::size_t beam = cfg.beam_size;

  std::vector<Hypothesis> live(1);
  live[0].state = model.begin(document, temps);
  live[0].next = live[0].state->start();
  std::vector<Finished> finished;

  struct Candidate {
    std::size_t parent;
    TokenId token;
    double log_prob;
  };

  for (std::size_t t = 1; t <= cfg.max_length && !live.empty(); ++t) {
    std::vector<Candidate> cands;
    for (std::size_t h = 0; h < live.size(); ++h) {
      const auto lp = step_log_probs(live[h].next.logits, cfg, eos, live[h].tokens.size());
      for (std::size_t v = 0; v < lp.size(); ++v) {
        if (lp[v] == -std::numeric_limits<double>::infinity()) continue;
        cands.push_back({h, static_cast<TokenId>(v), live[h].log_prob + lp[v]});
      }
    }
    std::sort(cands.begin(), cands.end(), [&](const Candidate& a, const Candidate& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      const auto& ta = live[a.parent].tokens;
      const auto& tb = live[b.parent].tokens;
      if (ta != tb) return ta < tb;
      return a.token < b.token;
    });

    std::vector<const Candidate*> keep;
    for (std::size_t r = 0; r < cands.size(); ++r) {
      const auto& c = cands[r];
      const bool ends = c.token == eos || t == cfg.max_length;
      if (ends) {
        if (r >= beam) continue;
        const auto& parent = live[c.parent];
        Finished f;
        f.step = t;
        f.result.tokens = parent.tokens;
        f.result.ended = c.token == eos;
        if (!f.result.ended) f.result.tokens.push_back(c.token);
        f.result.log_prob = c.log_prob;
        f.result.score = normalized(c.log_prob, t, cfg.length_penalty);
        f.result.lambda = temps;
        if (cfg.capture_attention) {
          auto node = std::make_shared<TraceNode>(TraceNode{parent.next.attention, parent.trace});
          f.result.attention = trace_tensor(node, t);
        }
        finished.push_back(std::move(f));
      } else if (keep.size() < beam) {
        keep.push_back(&c);
      }
    }
    if (finished.size() >= beam) break;

    std::vector<std::size_t> uses(live.size(), 0);
    for (const auto* c : keep) ++uses[c->parent];
    std::vector<Hypothesis> next_live;
    next_live.reserve(keep.size());
    for (const auto* c : keep) {
      auto& parent = live[c->parent];
      Hypothesis h;
      h.state = --uses[c->parent] == 0 ? std::move(parent.state) : parent.state->clone();
      h.tokens = parent.tokens;
      h.tokens.push_back(c->token);
      h.log_prob = c->log_prob;
      if (cfg.capture_attention) {
        h.trace = std::make_shared<TraceNode>(TraceNode{parent.next.attention, parent.trace});
      }
      h.next = h.state->feed(c->token);
      next_live.push_back(std::move(h));
    }
    live = std::move(next_live);
  }

  if (finished.empty()) throw InvalidState("beam search finished no hypothesis");
  auto best = std::min_element(finished.begin(), finished.end(), better_finished);
  return std::move(best->result);
}

// ---------------------------------------------------------------------------
// Sampling

DecodeResult sample_decode(const StepModel& model, std::span<const TokenId> document, const BeamConfig& cfg,
                           const AttentionTemperatures& temps, Sampler mode, double top_p, std::mt19937_64& rng) {
  cfg.validate();
  check_document(document);
  if (!(top_p > 0.0 && top_p <= 1.0)) throw std::invalid_argument("top_p must lie in (0, 1]");
  if (mode == Sampler::beam) throw std::invalid_argument("sample_decode needs a sampling mode");
  const TokenId eos = model.eos();
  auto state = model.begin(document, temps);
  StepScores next = state->start();
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  DecodeResult res;
  res.lambda = temps;
  std::vector<std::vector<double>> rows;
  for (std::size_t t = 1; t <= cfg.max_length; ++t) {
    const auto lp = step_log_probs(next.logits, cfg, eos, res.tokens.size());
    std::vector<double> probs(lp.size());
    for (std::size_t v = 0; v < lp.size(); ++v) probs[v] = std::exp(lp[v]);
    if (mode == Sampler::nucleus) probs = nucleus_filter(probs, top_p);
    const double u = unit(rng);
    double cum = 0.0;
    std::size_t pick = probs.size();
    for (std::size_t v = 0; v < probs.size(); ++v) {
      if (probs[v] <= 0.0) continue;
      pick = v;
      cum += probs[v];
      if (u < cum) break;
    }
    const auto tok = static_cast<TokenId>(pick);
    res.log_prob += lp[pick];
    if (cfg.capture_attention) rows.push_back(next.attention);
    if (tok == eos) {
      res.ended = true;
      break;
    }
    res.tokens.push_back(tok);
    if (t < cfg.max_length) next = state->feed(tok);
  }
  res.score = normalized(res.log_prob, res.steps(), cfg.length_penalty);
  if (cfg.capture_attention && !rows.empty()) {
    res.attention = Tensor({rows.size(), rows.front().size()});
    for (std::size_t r = 0; r < rows.size(); ++r) std::copy(rows[r].begin(), rows[r].end(), res.attention.data() + r * rows[r].size());
  }
  return res;
}

DecodeResult decode_document(const StepModel& model, std::span<const TokenId> document, const BeamConfig& cfg,
                             std::mt19937_64& rng) {
  const auto temps = cfg.lambda.resolve(rng);
  if (cfg.sampler == Sampler::beam) return beam_search(model, document, cfg, temps);
  return sample_decode(model, document, cfg, temps, cfg.sampler, cfg.top_p, rng);
}

// ---------------------------------------------------------------------------
// Attention dumps

nlohmann::ordered_json attention_dump(std::string_view doc_id, const DecodeResult& result,
                                      std::span<const std::string> tokens) {
  nlohmann::ordered_json j;
  j["doc_id"] = doc_id;
  const auto& l = result.lambda;
  if (l.enc == l.cross && l.cross == l.dec) {
    j["lambda"] = l.cross;
  } else {
    j["lambda"] = {{"enc", l.enc}, {"cross", l.cross}, {"dec", l.dec}};
  }
  j["tokens"] = std::vector<std::string>(tokens.begin(), tokens.end());
  auto rows = nlohmann::ordered_json::array();
  if (!result.attention.empty()) {
    for (std::size_t r = 0; r < result.attention.rows(); ++r) {
      const auto row = result.attention.row(r);
      rows.push_back(std::vector<double>(row.begin(), row.end()));
    }
  }
  j["attention"] = std::move(rows);
  return j;
}

AttentionDump load_attention_dump(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  AttentionDump d;
  try {
    const auto j = nlohmann::json::parse(ss.str());
    d.doc_id = j.at("doc_id").get<std::string>();
    const auto& l = j.at("lambda");
    if (l.is_number()) {
      d.lambda = AttentionTemperatures::uniform(l.get<double>());
    } else {
      d.lambda = {l.at("enc").get<double>(), l.at("cross").get<double>(), l.at("dec").get<double>()};
    }
    d.tokens = j.at("tokens").get<std::vector<std::string>>();
    const auto rows = j.at("attention").get<std::vector<std::vector<double>>>();
    if (!rows.empty()) {
      d.attention = Tensor({rows.size(), rows.front().size()});
      for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != rows.front().size()) throw ParseError(path + ": ragged attention rows");
        std::copy(rows[r].begin(), rows[r].end(), d.attention.data() + r * rows[r].size());
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  return d;
}

}  // namespace plate
