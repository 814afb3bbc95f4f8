#include "plate/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include "plate/digest.hpp"
#include "plate/errors.hpp"
#include "plate/kernels.hpp"

namespace plate {

// ---------------------------------------------------------------------------
// Configuration

void ModelConfig::validate() const {
  if (vocab_size == 0 || d_model == 0 || n_heads == 0 || encoder_layers == 0 || decoder_layers == 0 ||
      ffn_dim == 0 || max_seq_len < 2) {
    throw std::invalid_argument("model config extents must be positive (max_seq_len >= 2)");
  }
  if (d_model % n_heads != 0) throw std::invalid_argument("d_model must be divisible by n_heads");
  if (vocab_size <= static_cast<std::size_t>(kSepId)) {
    throw std::invalid_argument("vocab_size must cover the reserved tokens");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must be in [0, 1)");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size},
                     {"d_model", c.d_model},
                     {"n_heads", c.n_heads},
                     {"encoder_layers", c.encoder_layers},
                     {"decoder_layers", c.decoder_layers},
                     {"ffn_dim", c.ffn_dim},
                     {"max_seq_len", c.max_seq_len},
                     {"dropout", c.dropout},
                     {"positions", c.positions == PositionEncoding::learned ? "learned" : "sinusoidal"}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.d_model = j.value("d_model", d.d_model);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.encoder_layers = j.value("encoder_layers", d.encoder_layers);
  c.decoder_layers = j.value("decoder_layers", d.decoder_layers);
  c.ffn_dim = j.value("ffn_dim", d.ffn_dim);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.dropout = j.value("dropout", d.dropout);
  const auto pos = j.value("positions", std::string("learned"));
  if (pos == "learned") {
    c.positions = PositionEncoding::learned;
  } else if (pos == "sinusoidal") {
    c.positions = PositionEncoding::sinusoidal;
  } else {
    throw std::invalid_argument("unknown position encoding '" + pos + "'");
  }
}

void AttentionTemperatures::validate() const {
  if (!(enc > 0.0 && cross > 0.0 && dec > 0.0)) {
    throw std::invalid_argument("attention temperature coefficients must be positive");
  }
}

void to_json(nlohmann::json& j, const AttentionTemperatures& t) {
  j = nlohmann::json{{"enc", t.enc}, {"cross", t.cross}, {"dec", t.dec}};
}

void from_json(const nlohmann::json& j, AttentionTemperatures& t) {
  t.enc = j.value("enc", 1.0);
  t.cross = j.value("cross", 1.0);
  t.dec = j.value("dec", 1.0);
}

// ---------------------------------------------------------------------------
// Parameters

Parameter& Parameters::add(std::string name, Tensor value) {
  if (index_.contains(name)) throw std::invalid_argument("duplicate parameter " + name);
  index_.emplace(name, items_.size());
  items_.push_back(Parameter{std::move(name), std::move(value), {}});
  return items_.back();
}

std::size_t Parameters::index_of(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw std::out_of_range("no parameter named " + std::string(name));
  return it->second;
}

Parameter& Parameters::at(std::string_view name) { return items_[index_of(name)]; }
const Parameter& Parameters::at(std::string_view name) const { return items_[index_of(name)]; }
bool Parameters::contains(std::string_view name) const { return index_.contains(std::string(name)); }

std::size_t Parameters::scalar_count() const noexcept {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.value.size();
  return n;
}

void Parameters::zero_grad() {
  for (auto& p : items_) p.zero_grad();
}

bool operator==(const Parameters& a, const Parameters& b) {
  if (a.items_.size() != b.items_.size()) return false;
  for (std::size_t i = 0; i < a.items_.size(); ++i) {
    if (a.items_[i].name != b.items_[i].name || !(a.items_[i].value == b.items_[i].value)) return false;
  }
  return true;
}

namespace {

std::string layer_prefix(const char* stack, std::size_t layer) {
  return std::string(stack) + "." + std::to_string(layer);
}

void add_linear(Parameters& p, const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> unif(-bound, bound);
  Tensor w({in, out});
  for (auto& v : w.values()) v = unif(rng);
  p.add(name + ".weight", std::move(w));
  p.add(name + ".bias", Tensor({out}));
}

void add_norm(Parameters& p, const std::string& name, std::size_t width) {
  p.add(name + ".gain", Tensor({width}, 1.0));
  p.add(name + ".bias", Tensor({width}));
}

void add_attention(Parameters& p, const std::string& name, std::size_t d, std::mt19937_64& rng) {
  for (const char* proj : {".q", ".k", ".v", ".o"}) add_linear(p, name + proj, d, d, rng);
}

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

}  // namespace

Parameters init_parameters(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const auto d = config.d_model;
  Parameters p;
  p.add("embed.tokens", normal_tensor({config.vocab_size, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng));
  if (config.positions == PositionEncoding::learned) {
    p.add("encoder.positions", normal_tensor({config.max_seq_len, d}, 0.02, rng));
    p.add("decoder.positions", normal_tensor({config.max_seq_len, d}, 0.02, rng));
  }
  for (std::size_t l = 0; l < config.encoder_layers; ++l) {
    const auto pre = layer_prefix("encoder", l);
    add_norm(p, pre + ".self_attn_norm", d);
    add_attention(p, pre + ".self_attn", d, rng);
    add_norm(p, pre + ".ffn_norm", d);
    add_linear(p, pre + ".ffn.fc1", d, config.ffn_dim, rng);
    add_linear(p, pre + ".ffn.fc2", config.ffn_dim, d, rng);
  }
  add_norm(p, "encoder.final_norm", d);
  for (std::size_t l = 0; l < config.decoder_layers; ++l) {
    const auto pre = layer_prefix("decoder", l);
    add_norm(p, pre + ".self_attn_norm", d);
    add_attention(p, pre + ".self_attn", d, rng);
    add_norm(p, pre + ".cross_attn_norm", d);
    add_attention(p, pre + ".cross_attn", d, rng);
    add_norm(p, pre + ".ffn_norm", d);
    add_linear(p, pre + ".ffn.fc1", d, config.ffn_dim, rng);
    add_linear(p, pre + ".ffn.fc2", config.ffn_dim, d, rng);
  }
  add_norm(p, "decoder.final_norm", d);
  add_linear(p, "output", d, config.vocab_size, rng);
  return p;
}

Transformer Transformer::create(const ModelConfig& config, std::uint64_t seed) {
  return Transformer{config, init_parameters(config, seed), {}};
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

constexpr char kMagic[8] = {'P', 'L', 'A', 'T', 'E', 'M', 'D', 'L'};
constexpr std::uint32_t kFormatVersion = 1;

template <class T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(std::begin(buf), std::end(buf));
  out.insert(out.end(), std::begin(buf), std::end(buf));
}

template <class T>
T get_le(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  if (pos + sizeof(T) > bytes.size()) throw ParseError("model file truncated");
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, bytes.data() + pos, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(std::begin(buf), std::end(buf));
  pos += sizeof(T);
  T value;
  std::memcpy(&value, buf, sizeof(T));
  return value;
}

}  // namespace

std::vector<std::uint8_t> serialize_model(const Transformer& model) {
  nlohmann::json header;
  header["config"] = model.config;
  header["vocabulary"] = model.vocabulary;
  auto& plist = header["parameters"] = nlohmann::json::array();
  for (const auto& p : model.params.all()) plist.push_back({{"name", p.name}, {"shape", p.value.shape()}});
  const std::string blob = header.dump();

  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_le<std::uint32_t>(out, kFormatVersion);
  put_le<std::uint64_t>(out, blob.size());
  out.insert(out.end(), blob.begin(), blob.end());
  out.reserve(out.size() + model.params.scalar_count() * 8);
  for (const auto& p : model.params.all())
    for (double v : p.value.values()) put_le<double>(out, v);
  return out;
}

Transformer deserialize_model(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof(kMagic) || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin())) {
    throw ParseError("not a model file (bad magic)");
  }
  std::size_t pos = sizeof(kMagic);
  const auto version = get_le<std::uint32_t>(bytes, pos);
  if (version != kFormatVersion) throw ParseError("unsupported model format version " + std::to_string(version));
  const auto blob_len = get_le<std::uint64_t>(bytes, pos);
  if (pos + blob_len > bytes.size()) throw ParseError("model file truncated in header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                   bytes.begin() + static_cast<std::ptrdiff_t>(pos + blob_len));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("model header: ") + e.what());
  }
  pos += blob_len;

  Transformer model;
  model.config = header.at("config").get<ModelConfig>();
  model.config.validate();
  model.vocabulary = header.value("vocabulary", std::vector<std::string>{});
  for (const auto& entry : header.at("parameters")) {
    Tensor t(entry.at("shape").get<Shape>());
    for (auto& v : t.values()) v = get_le<double>(bytes, pos);
    model.params.add(entry.at("name").get<std::string>(), std::move(t));
  }
  if (pos != bytes.size()) throw ParseError("trailing bytes after model parameters");
  // The stored layout must be the one this config implies.
  const auto expected = init_parameters(model.config, 0);
  if (expected.count() != model.params.count()) throw ParseError("parameter set does not match config");
  for (std::size_t i = 0; i < expected.count(); ++i) {
    const auto& e = expected.all()[i];
    const auto& g = model.params.all()[i];
    if (e.name != g.name || !e.value.same_shape(g.value)) {
      throw ParseError("parameter " + g.name + " does not match config layout");
    }
  }
  return model;
}

void save_model(const std::string& path, const Transformer& model) {
  const auto bytes = serialize_model(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path);
}

Transformer load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

std::string model_digest(const Transformer& model) { return sha256_hex(serialize_model(model)); }

// ---------------------------------------------------------------------------
// Shared helpers

namespace {

std::vector<double> sinusoid_row(std::size_t pos, std::size_t d) {
  std::vector<double> row(d);
  for (std::size_t i = 0; i < d; ++i) {
    const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
    row[i] = (i % 2 == 0) ? std::sin(static_cast<double>(pos) * rate) : std::cos(static_cast<double>(pos) * rate);
  }
  return row;
}

Tensor sinusoid_rows(std::span<const TokenId> positions, std::size_t d) {
  Tensor t({positions.size(), d});
  for (std::size_t r = 0; r < positions.size(); ++r) {
    const auto row = sinusoid_row(static_cast<std::size_t>(positions[r]), d);
    std::copy(row.begin(), row.end(), t.data() + r * d);
  }
  return t;
}

std::size_t max_body(const ModelConfig& c) { return c.max_seq_len - 1; }

}  // namespace

std::vector<TokenId> prepare_source(std::span<const TokenId> document, const ModelConfig& config) {
  if (document.empty()) throw std::invalid_argument("empty document");
  const auto n = std::min(document.size(), max_body(config));
  std::vector<TokenId> ids(document.begin(), document.begin() + static_cast<std::ptrdiff_t>(n));
  ids.push_back(kEosId);
  return ids;
}

PackedBatch pack_batch(std::span<const SequencePair> pairs, const ModelConfig& config) {
  if (pairs.empty()) throw std::invalid_argument("empty batch");
  PackedBatch b;
  b.examples = pairs.size();
  for (const auto& pair : pairs) {
    if (pair.target.empty()) throw std::invalid_argument("empty summary");
    const auto src = prepare_source(pair.source, config);
    for (const auto id : src) {
      if (id < 0 || static_cast<std::size_t>(id) >= config.vocab_size) {
        throw std::invalid_argument("source token id " + std::to_string(id) + " outside the model vocabulary");
      }
    }
    const std::size_t src_begin = b.src_ids.size();
    for (std::size_t i = 0; i < src.size(); ++i) {
      b.src_ids.push_back(src[i]);
      b.src_pos.push_back(static_cast<TokenId>(i));
    }
    const auto tlen = std::min(pair.target.size(), max_body(config));
    const std::size_t tgt_begin = b.tgt_ids.size();
    b.tgt_ids.push_back(kBosId);
    for (std::size_t i = 0; i < tlen; ++i) {
      const auto id = pair.target[i];
      if (id < 0 || static_cast<std::size_t>(id) >= config.vocab_size) {
        throw std::invalid_argument("target token id " + std::to_string(id) + " outside the model vocabulary");
      }
      b.tgt_ids.push_back(id);
      b.labels.push_back(id);
    }
    b.labels.push_back(kEosId);
    const auto steps = tlen + 1;
    for (std::size_t i = 0; i < steps; ++i) {
      b.tgt_pos.push_back(static_cast<TokenId>(i));
      b.row_weights.push_back(1.0 / (static_cast<double>(steps) * static_cast<double>(pairs.size())));
    }
    b.enc_self.push_back({src_begin, src.size(), src_begin, src.size(), false});
    b.dec_self.push_back({tgt_begin, steps, tgt_begin, steps, true});
    b.cross.push_back({tgt_begin, steps, src_begin, src.size(), false});
  }
  return b;
}

// ---------------------------------------------------------------------------
// Tape forward

namespace {

class Bound {
 public:
  Bound(const Parameters& params, std::vector<Var> vars) : params_(&params), vars_(std::move(vars)) {}
  Var operator()(const std::string& name) const { return vars_[params_->index_of(name)]; }

 private:
  const Parameters* params_;
  std::vector<Var> vars_;
};

struct GraphContext {
  Tape& tape;
  const Bound& P;
  const ModelConfig& config;
  const ForwardOptions& options;

  Var drop(Var x) const {
    if (!options.train || config.dropout == 0.0) return x;
    if (options.rng == nullptr) throw std::invalid_argument("training forward requires an RNG for dropout");
    return dropout(x, config.dropout, *options.rng);
  }

  Var norm(Var x, const std::string& name) const {
    return layer_norm(x, P(name + ".gain"), P(name + ".bias"), 1e-5);
  }

  Var proj(Var x, const std::string& name) const { return linear(x, P(name + ".weight"), P(name + ".bias")); }

  Var attention(Var queries, Var keys, const std::string& name, std::span<const AttentionSegment> segments,
                double lambda, std::vector<Tensor>* capture) const {
    Var q = proj(queries, name + ".q");
    Var k = proj(keys, name + ".k");
    Var v = proj(keys, name + ".v");
    Var ctx = multi_head_attention(q, k, v, segments, config.n_heads, lambda, capture);
    return proj(ctx, name + ".o");
  }

  Var ffn(Var x, const std::string& name) const {
    return proj(gelu(proj(x, name + ".fc1")), name + ".fc2");
  }

  Var embed(std::span<const TokenId> ids, std::span<const TokenId> pos, const char* stack) const {
    Var tok = embedding(P("embed.tokens"), ids);
    Var p = config.positions == PositionEncoding::learned
                ? embedding(P(std::string(stack) + ".positions"), pos)
                : tape.constant(sinusoid_rows(pos, config.d_model));
    return drop(tok + p);
  }
};

Var build_graph(Tape& tape, const Bound& P, const ModelConfig& config, const PackedBatch& batch,
                const ForwardOptions& options) {
  options.temps.validate();
  GraphContext g{tape, P, config, options};

  Var x = g.embed(batch.src_ids, batch.src_pos, "encoder");
  for (std::size_t l = 0; l < config.encoder_layers; ++l) {
    const auto pre = layer_prefix("encoder", l);
    Var h = g.norm(x, pre + ".self_attn_norm");
    x = x + g.drop(g.attention(h, h, pre + ".self_attn", batch.enc_self, options.temps.enc, nullptr));
    h = g.norm(x, pre + ".ffn_norm");
    x = x + g.drop(g.ffn(h, pre + ".ffn"));
  }
  Var enc = g.norm(x, "encoder.final_norm");

  if (options.cross_attention) options.cross_attention->assign(config.decoder_layers, {});
  Var y = g.embed(batch.tgt_ids, batch.tgt_pos, "decoder");
  for (std::size_t l = 0; l < config.decoder_layers; ++l) {
    const auto pre = layer_prefix("decoder", l);
    Var h = g.norm(y, pre + ".self_attn_norm");
    y = y + g.drop(g.attention(h, h, pre + ".self_attn", batch.dec_self, options.temps.dec, nullptr));
    h = g.norm(y, pre + ".cross_attn_norm");
    auto* capture = options.cross_attention ? &(*options.cross_attention)[l] : nullptr;
    y = y + g.drop(g.attention(h, enc, pre + ".cross_attn", batch.cross, options.temps.cross, capture));
    h = g.norm(y, pre + ".ffn_norm");
    y = y + g.drop(g.ffn(h, pre + ".ffn"));
  }
  y = g.norm(y, "decoder.final_norm");
  return g.proj(y, "output");
}

}  // namespace

Var forward_logits(Tape& tape, Transformer& model, const PackedBatch& batch, const ForwardOptions& options) {
  std::vector<Var> vars;
  vars.reserve(model.params.count());
  for (auto& p : model.params.all()) vars.push_back(tape.parameter(p));
  Bound bound(model.params, std::move(vars));
  return build_graph(tape, bound, model.config, batch, options);
}

Var forward_logits(Tape& tape, const Transformer& model, const PackedBatch& batch, const ForwardOptions& options) {
  std::vector<Var> vars;
  vars.reserve(model.params.count());
  for (const auto& p : model.params.all()) vars.push_back(tape.constant(p.value));
  Bound bound(model.params, std::move(vars));
  return build_graph(tape, bound, model.config, batch, options);
}

Var batch_loss(Tape& tape, Transformer& model, const PackedBatch& batch, double epsilon,
               const ForwardOptions& options) {
  Var logits = forward_logits(tape, model, batch, options);
  return label_smoothed_nll(logits, batch.labels, epsilon, batch.row_weights);
}

double forward_loss(std::span<const TokenId> document, std::span<const TokenId> summary, const Transformer& model,
                    double epsilon) {
  if (summary.empty()) throw std::invalid_argument("forward_loss: empty summary");
  const SequencePair pair{document, summary};
  const auto batch = pack_batch(std::span<const SequencePair>(&pair, 1), model.config);
  Tape tape;
  Var logits = forward_logits(tape, model, batch, ForwardOptions{});
  return label_smoothed_nll(logits, batch.labels, epsilon, batch.row_weights).value().item();
}

// ---------------------------------------------------------------------------
// Tape-free inference

namespace {

struct Weights {
  const Parameters& p;
  const double* operator()(const std::string& name) const { return p.at(name).value.data(); }
};

void add_position_rows(const Transformer& model, const char* stack, std::size_t first, std::size_t count,
                       double* rows) {
  const auto d = model.config.d_model;
  if (model.config.positions == PositionEncoding::learned) {
    const double* table = model.params.at(std::string(stack) + ".positions").value.data();
    for (std::size_t r = 0; r < count; ++r)
      for (std::size_t c = 0; c < d; ++c) rows[r * d + c] += table[(first + r) * d + c];
  } else {
    for (std::size_t r = 0; r < count; ++r) {
      const auto row = sinusoid_row(first + r, d);
      for (std::size_t c = 0; c < d; ++c) rows[r * d + c] += row[c];
    }
  }
}

void embed_rows(const Transformer& model, std::span<const TokenId> ids, double* rows) {
  const auto d = model.config.d_model;
  const double* table = model.params.at("embed.tokens").value.data();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= model.config.vocab_size) {
      throw std::invalid_argument("token id " + std::to_string(ids[r]) + " outside the model vocabulary");
    }
    std::copy_n(table + static_cast<std::size_t>(ids[r]) * d, d, rows + r * d);
  }
}

void norm_rows(const Weights& W, const std::string& name, const double* x, double* y, std::size_t n,
               std::size_t d) {
  kernels::layer_norm(x, W(name + ".gain"), W(name + ".bias"), y, n, d, 1e-5);
}

void proj_rows(const Weights& W, const std::string& name, const double* x, double* y, std::size_t n,
               std::size_t in, std::size_t out) {
  kernels::linear(x, W(name + ".weight"), W(name + ".bias"), y, n, in, out);
}

// x += FFN(norm(x)) for n rows.
void ffn_residual(const Weights& W, const ModelConfig& c, const std::string& pre, double* x, std::size_t n) {
  const auto d = c.d_model;
  std::vector<double> h(n * d), mid(n * c.ffn_dim), out(n * d);
  norm_rows(W, pre + ".ffn_norm", x, h.data(), n, d);
  proj_rows(W, pre + ".ffn.fc1", h.data(), mid.data(), n, d, c.ffn_dim);
  for (auto& v : mid) v = kernels::gelu(v);
  proj_rows(W, pre + ".ffn.fc2", mid.data(), out.data(), n, c.ffn_dim, d);
  for (std::size_t i = 0; i < n * d; ++i) x[i] += out[i];
}

// Multi-head attention of `n` query rows against `m` key/value rows.
// `weights_out` (heads x n x m) is optional.
void attend(const ModelConfig& c, const double* q, const double* k, const double* v, std::size_t n,
            std::size_t m, bool causal, double lambda, double* ctx, double* weights_out) {
  const auto d = c.d_model, dh = c.head_dim();
  const double sc = attention_scale(lambda, dh);
  std::vector<double> scratch(n * m);
  kernels::AttentionMask mask;
  mask.causal = causal;
  for (std::size_t h = 0; h < c.n_heads; ++h) {
    double* w = weights_out ? weights_out + h * n * m : scratch.data();
    kernels::HeadView view{q + h * dh, k + h * dh, v + h * dh, d, d, d, n, m, dh};
    kernels::attention_head(view, sc, mask, w, ctx + h * dh, d);
  }
}

}  // namespace

std::shared_ptr<const EncodedSource> encode_source(std::span<const TokenId> document, const Transformer& model,
                                                   const AttentionTemperatures& temps) {
  temps.validate();
  const auto& c = model.config;
  const Weights W{model.params};
  const auto d = c.d_model;
  auto src = std::make_shared<EncodedSource>();
  src->tokens = prepare_source(document, c);
  const auto n = src->tokens.size();

  std::vector<double> x(n * d), h(n * d), q(n * d), k(n * d), v(n * d), ctx(n * d), o(n * d);
  embed_rows(model, src->tokens, x.data());
  add_position_rows(model, "encoder", 0, n, x.data());
  for (std::size_t l = 0; l < c.encoder_layers; ++l) {
    const auto pre = layer_prefix("encoder", l);
    norm_rows(W, pre + ".self_attn_norm", x.data(), h.data(), n, d);
    proj_rows(W, pre + ".self_attn.q", h.data(), q.data(), n, d, d);
    proj_rows(W, pre + ".self_attn.k", h.data(), k.data(), n, d, d);
    proj_rows(W, pre + ".self_attn.v", h.data(), v.data(), n, d, d);
    attend(c, q.data(), k.data(), v.data(), n, n, false, temps.enc, ctx.data(), nullptr);
    proj_rows(W, pre + ".self_attn.o", ctx.data(), o.data(), n, d, d);
    for (std::size_t i = 0; i < n * d; ++i) x[i] += o[i];
    ffn_residual(W, c, pre, x.data(), n);
  }
  src->states = Tensor({n, d});
  norm_rows(W, "encoder.final_norm", x.data(), src->states.data(), n, d);
  for (std::size_t l = 0; l < c.decoder_layers; ++l) {
    const auto pre = layer_prefix("decoder", l) + ".cross_attn";
    Tensor ck({n, d}), cv({n, d});
    proj_rows(W, pre + ".k", src->states.data(), ck.data(), n, d, d);
    proj_rows(W, pre + ".v", src->states.data(), cv.data(), n, d, d);
    src->cross_k.push_back(std::move(ck));
    src->cross_v.push_back(std::move(cv));
  }
  return src;
}

Tensor encode(std::span<const TokenId> document, const Transformer& model, const AttentionTemperatures& temps) {
  return encode_source(document, model, temps)->states;
}

IncrementalDecoder::IncrementalDecoder(const Transformer& model, std::shared_ptr<const EncodedSource> source,
                                       const AttentionTemperatures& temps)
    : model_(&model), source_(std::move(source)), temps_(temps),
      self_k_(model.config.decoder_layers), self_v_(model.config.decoder_layers) {
  temps_.validate();
  if (!source_) throw std::invalid_argument("decoder needs an encoded source");
}

StepOutput IncrementalDecoder::step(TokenId token) {
  const auto& c = model_->config;
  if (length_ >= c.max_seq_len) {
    throw std::invalid_argument("decoder prefix exceeds max_seq_len " + std::to_string(c.max_seq_len));
  }
  const Weights W{model_->params};
  const auto d = c.d_model;
  const auto src_len = source_->length();
  const auto pos = length_;

  std::vector<double> x(d), h(d), q(d), k(d), v(d), ctx(d), o(d);
  embed_rows(*model_, std::span<const TokenId>(&token, 1), x.data());
  add_position_rows(*model_, "decoder", pos, 1, x.data());

  StepOutput out;
  out.cross_attention = Tensor({c.decoder_layers * c.n_heads, src_len});
  for (std::size_t l = 0; l < c.decoder_layers; ++l) {
    const auto pre = layer_prefix("decoder", l);
    norm_rows(W, pre + ".self_attn_norm", x.data(), h.data(), 1, d);
    proj_rows(W, pre + ".self_attn.q", h.data(), q.data(), 1, d, d);
    proj_rows(W, pre + ".self_attn.k", h.data(), k.data(), 1, d, d);
    proj_rows(W, pre + ".self_attn.v", h.data(), v.data(), 1, d, d);
    self_k_[l].insert(self_k_[l].end(), k.begin(), k.end());
    self_v_[l].insert(self_v_[l].end(), v.begin(), v.end());
    attend(c, q.data(), self_k_[l].data(), self_v_[l].data(), 1, pos + 1, false, temps_.dec, ctx.data(), nullptr);
    proj_rows(W, pre + ".self_attn.o", ctx.data(), o.data(), 1, d, d);
    for (std::size_t i = 0; i < d; ++i) x[i] += o[i];

    norm_rows(W, pre + ".cross_attn_norm", x.data(), h.data(), 1, d);
    proj_rows(W, pre + ".cross_attn.q", h.data(), q.data(), 1, d, d);
    attend(c, q.data(), source_->cross_k[l].data(), source_->cross_v[l].data(), 1, src_len, false, temps_.cross,
           ctx.data(), out.cross_attention.data() + l * c.n_heads * src_len);
    proj_rows(W, pre + ".cross_attn.o", ctx.data(), o.data(), 1, d, d);
    for (std::size_t i = 0; i < d; ++i) x[i] += o[i];

    ffn_residual(W, c, pre, x.data(), 1);
  }
  norm_rows(W, "decoder.final_norm", x.data(), h.data(), 1, d);
  out.logits.resize(c.vocab_size);
  proj_rows(W, "output", h.data(), out.logits.data(), 1, d, c.vocab_size);
  ++length_;
  return out;
}

DecodeStepResult decode_step(std::span<const TokenId> prefix, const EncodedSource& source,
                             const Transformer& model, const AttentionTemperatures& temps) {
  const auto& c = model.config;
  if (prefix.empty() || prefix.front() != kBosId) {
    throw std::invalid_argument("decode_step: prefix must start with the start-of-sequence token");
  }
  if (prefix.size() > c.max_seq_len) {
    throw std::invalid_argument("decode_step: prefix of " + std::to_string(prefix.size()) +
                                " tokens exceeds max_seq_len " + std::to_string(c.max_seq_len));
  }
  // Non-owning alias: the caller keeps `source` alive for this call.
  std::shared_ptr<const EncodedSource> alias(std::shared_ptr<const EncodedSource>{}, &source);
  IncrementalDecoder dec(model, alias, temps);
  const auto src_len = source.length();
  DecodeStepResult result;
  result.cross_attention = Tensor({c.decoder_layers, c.n_heads, prefix.size(), src_len});
  for (std::size_t t = 0; t < prefix.size(); ++t) {
    auto step = dec.step(prefix[t]);
    for (std::size_t lh = 0; lh < c.decoder_layers * c.n_heads; ++lh) {
      std::copy_n(step.cross_attention.data() + lh * src_len, src_len,
                  result.cross_attention.data() + (lh * prefix.size() + t) * src_len);
    }
    if (t + 1 == prefix.size()) result.logits = std::move(step.logits);
  }
  return result;
}

}  // namespace plate
