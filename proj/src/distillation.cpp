#include "plate/distillation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "plate/digest.hpp"
#include "plate/errors.hpp"
#include "plate/optim.hpp"

namespace plate {

std::string_view to_string(Schedule s) {
  return s == Schedule::inverse_sqrt ? "inverse_sqrt" : "linear_warmup_constant";
}

Schedule parse_schedule(std::string_view s) {
  if (s == "linear_warmup_constant") return Schedule::linear_warmup_constant;
  if (s == "inverse_sqrt") return Schedule::inverse_sqrt;
  throw std::invalid_argument("unknown schedule: " + std::string(s));
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("learning rate must be >= 0");
  if (warmup_steps > steps) throw std::invalid_argument("warmup steps exceed total steps");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw std::invalid_argument("label smoothing must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("Adam betas must be in [0, 1)");
  }
  if (batch_tokens == 0) throw std::invalid_argument("batch_tokens must be positive");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate},
                     {"warmup_steps", c.warmup_steps},
                     {"steps", c.steps},
                     {"batch_tokens", c.batch_tokens},
                     {"label_smoothing", c.label_smoothing},
                     {"weight_decay", c.weight_decay},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"seed", c.seed},
                     {"schedule", to_string(c.schedule)},
                     {"validation_interval", c.validation_interval}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.steps = j.value("steps", d.steps);
  c.batch_tokens = j.value("batch_tokens", d.batch_tokens);
  c.label_smoothing = j.value("label_smoothing", d.label_smoothing);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.seed = j.value("seed", d.seed);
  c.schedule = parse_schedule(j.value("schedule", std::string(to_string(d.schedule))));
  c.validation_interval = j.value("validation_interval", d.validation_interval);
}

double learning_rate_at(const TrainConfig& config, std::size_t step) {
  const double s = static_cast<double>(std::max<std::size_t>(step, 1));
  const double w = static_cast<double>(config.warmup_steps);
  switch (config.schedule) {
    case Schedule::linear_warmup_constant:
      return w > 0.0 && s < w ? config.learning_rate * s / w : config.learning_rate;
    case Schedule::inverse_sqrt:
      if (w > 0.0 && s < w) return config.learning_rate * s / w;
      return config.learning_rate * std::sqrt(std::max(w, 1.0) / s);
  }
  return config.learning_rate;
}

// ---------------------------------------------------------------------------
// Training

namespace {

struct EncodedPair {
  std::vector<TokenId> source;
  std::vector<TokenId> target;
};

Vocabulary model_vocabulary(const Transformer& model) {
  if (model.vocabulary.size() != model.config.vocab_size) {
    throw std::invalid_argument("model carries " + std::to_string(model.vocabulary.size()) +
                                " vocabulary tokens but is configured for " +
                                std::to_string(model.config.vocab_size));
  }
  return Vocabulary::from_tokens(model.vocabulary);
}

std::size_t pair_cost(const EncodedPair& p, const ModelConfig& c) {
  return std::min(p.source.size() + 1, c.max_seq_len) + std::min(p.target.size() + 2, c.max_seq_len + 1);
}

template <class Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace

std::vector<TokenId> encode_strict(const Vocabulary& vocab, const Words& words) {
  std::vector<TokenId> ids;
  ids.reserve(words.size());
  for (const auto& w : words) {
    if (!vocab.contains(w)) throw std::invalid_argument("word not in model vocabulary: " + w);
    ids.push_back(vocab.id(w));
  }
  return ids;
}

double corpus_loss(const Corpus& corpus, const Transformer& model) {
  if (corpus.empty()) throw std::invalid_argument("empty corpus");
  const auto vocab = model_vocabulary(model);
  double total = 0.0;
  for (const auto& ex : corpus) {
    total += forward_loss(vocab.encode(ex.document), vocab.encode(ex.summary), model, 0.0);
  }
  return total / static_cast<double>(corpus.size());
}

TrainResult train_model(const Corpus& train, const Corpus* valid, const TrainConfig& config, Transformer init) {
  config.validate();
  if (train.empty()) throw std::invalid_argument("empty training corpus");
  const auto vocab = model_vocabulary(init);
  std::vector<EncodedPair> pairs;
  pairs.reserve(train.size());
  for (const auto& ex : train) {
    if (ex.summary.empty()) throw std::invalid_argument("empty summary in " + ex.id);
    pairs.push_back({encode_strict(vocab, ex.document), encode_strict(vocab, ex.summary)});
  }

  TrainResult result;
  result.model = std::move(init);
  Transformer& model = result.model;
  std::vector<AdamState> states;
  for (const auto& p : model.params.all()) states.push_back(AdamState::for_param(p.value));
  std::mt19937_64 order_rng(config.seed);
  std::mt19937_64 dropout_rng(derive_seed(config.seed, "dropout"));
  std::vector<std::size_t> order(pairs.size());
  std::size_t cursor = order.size();

  const auto next_batch = [&] {
    std::vector<SequencePair> batch;
    std::size_t tokens = 0;
    while (true) {
      if (cursor == order.size()) {
        if (!batch.empty()) break;
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), order_rng);
        cursor = 0;
      }
      const auto& p = pairs[order[cursor]];
      const auto cost = pair_cost(p, model.config);
      if (!batch.empty() && tokens + cost > config.batch_tokens) break;
      batch.push_back({p.source, p.target});
      tokens += cost;
      ++cursor;
    }
    return pack_batch(batch, model.config);
  };

  std::optional<Parameters> best;
  const auto validate_at = [&](std::size_t step) {
    if (valid == nullptr || valid->empty()) return;
    const double loss = corpus_loss(*valid, model);
    result.validation.push_back({step, loss});
    if (!result.best_validation_loss || loss < *result.best_validation_loss) {
      result.best_validation_loss = loss;
      result.best_step = step;
      best = model.params;
    }
  };

  ForwardOptions options;
  options.train = true;
  options.rng = &dropout_rng;
  result.train_loss.reserve(config.steps);
  for (std::size_t step = 1; step <= config.steps; ++step) {
    const auto batch = next_batch();
    Tape tape;
    model.params.zero_grad();
    const Var loss = batch_loss(tape, model, batch, config.label_smoothing, options);
    result.train_loss.push_back(loss.value().item());
    tape.backward(loss);
    AdamOptions adam{learning_rate_at(config, step), config.beta1, config.beta2, 1e-8, config.weight_decay};
    auto params = model.params.all();
    for (std::size_t i = 0; i < params.size(); ++i) adam_step(params[i].value, params[i].grad, states[i], adam);
    if ((config.validation_interval > 0 && step % config.validation_interval == 0 && step != config.steps)) {
      validate_at(step);
    }
  }
  validate_at(config.steps);
  if (best) {
    model.params = std::move(*best);
  } else {
    result.best_step = config.steps;
  }
  for (auto& p : model.params.all()) p.grad = Tensor{};
  return result;
}

// ---------------------------------------------------------------------------
// Pseudo labels

namespace {

nlohmann::json lambda_json(const AttentionTemperatures& t) {
  if (t.enc == t.cross && t.cross == t.dec) return t.cross;
  return t;
}

AttentionTemperatures lambda_from_json(const nlohmann::json& j) {
  if (j.is_number()) return AttentionTemperatures::uniform(j.get<double>());
  if (!j.is_object()) throw std::invalid_argument("lambda must be a number or an object");
  return j.get<AttentionTemperatures>();
}

}  // namespace

std::string decoder_digest(const BeamConfig& config) { return sha256_hex(nlohmann::json(config).dump()); }

PseudoLabelRun generate_pseudo_labels(const Transformer& teacher, const Corpus& corpus,
                                      const PseudoLabelOptions& options) {
  options.decode.validate();
  if (!(options.max_failure_rate >= 0.0)) throw std::invalid_argument("max_failure_rate must be >= 0");
  const auto vocab = model_vocabulary(teacher);
  const auto teacher_digest = model_digest(teacher);
  const auto dec_digest = decoder_digest(options.decode);
  BeamConfig cfg = options.decode;
  cfg.capture_attention = cfg.capture_attention || options.keep_attention || options.attention_dir.has_value();
  if (options.attention_dir) std::filesystem::create_directories(*options.attention_dir);
  const TransformerStepModel step_model(teacher, cfg.trace);

  struct Slot {
    std::optional<PseudoLabelRecord> record;
    Tensor attention;
    std::string error;
  };
  std::vector<Slot> slots(corpus.size());
  parallel_for(corpus.size(), options.workers, [&](std::size_t i) {
    const auto& ex = corpus[i];
    try {
      std::mt19937_64 rng(derive_seed(cfg.seed, ex.id));
      const auto result = decode_document(step_model, vocab.encode(ex.document), cfg, rng);
      Words summary = vocab.decode(result.tokens);
      if (summary.empty()) throw InvalidState("decoder produced no words");
      if (options.attention_dir) {
        std::vector<std::string> toks;
        for (auto t : result.tokens) toks.push_back(vocab.token(t));
        if (result.ended) toks.push_back(vocab.token(kEosId));
        std::ofstream out(std::filesystem::path(*options.attention_dir) / (ex.id + ".json"));
        out << attention_dump(ex.id, result, toks).dump() << '\n';
        if (!out) throw std::runtime_error("cannot write attention dump for " + ex.id);
      }
      slots[i].record = PseudoLabelRecord{ex.id, ex.document, std::move(summary), result.lambda, dec_digest,
                                          teacher_digest};
      if (options.keep_attention) slots[i].attention = result.attention;
    } catch (const std::exception& e) {
      slots[i].error = e.what();
    }
  });

  PseudoLabelRun run;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (!slots[i].record) {
      std::cerr << "pseudo: skipped " << corpus[i].id << ": " << slots[i].error << '\n';
      run.failures.push_back({corpus[i].id, slots[i].error});
      continue;
    }
    run.records.push_back(std::move(*slots[i].record));
    if (options.keep_attention) run.attention.push_back(std::move(slots[i].attention));
  }
  if (static_cast<double>(run.failures.size()) > options.max_failure_rate * static_cast<double>(corpus.size())) {
    throw PseudoLabelError(std::to_string(run.failures.size()) + " of " + std::to_string(corpus.size()) +
                               " documents failed to decode",
                           run.failures);
  }
  return run;
}

nlohmann::ordered_json to_json(const PseudoLabelRecord& r) {
  nlohmann::ordered_json j;
  j["id"] = r.id;
  j["document"] = join_words(r.document);
  j["summary"] = join_words(r.summary);
  j["lambda"] = lambda_json(r.lambda);
  j["teacher_digest"] = r.teacher_digest;
  j["decoder_digest"] = r.decoder_digest;
  return j;
}

std::string format_pseudo_jsonl(const std::vector<PseudoLabelRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    out += to_json(r).dump();
    out += '\n';
  }
  return out;
}

void write_pseudo_jsonl(const std::vector<PseudoLabelRecord>& records, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << format_pseudo_jsonl(records);
  if (!out) throw std::runtime_error("failed writing " + path);
}

std::vector<PseudoLabelRecord> load_pseudo_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<PseudoLabelRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      PseudoLabelRecord r;
      r.id = j.at("id").get<std::string>();
      r.document = tokenize(j.at("document").get<std::string>());
      r.summary = tokenize(j.at("summary").get<std::string>());
      r.lambda = lambda_from_json(j.at("lambda"));
      r.teacher_digest = j.at("teacher_digest").get<std::string>();
      r.decoder_digest = j.value("decoder_digest", std::string());
      records.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw ParseError(e.what(), line_no);
    }
  }
  return records;
}

Corpus pseudo_corpus(const std::vector<PseudoLabelRecord>& records) {
  Corpus c;
  c.reserve(records.size());
  for (const auto& r : records) c.push_back({r.id, r.document, r.summary, Split::train});
  return c;
}

// ---------------------------------------------------------------------------
// Students

std::string_view to_string(LayerSelection s) { return s == LayerSelection::first_k ? "first_k" : "maximally_spaced"; }

LayerSelection parse_layer_selection(std::string_view s) {
  if (s == "first_k") return LayerSelection::first_k;
  if (s == "maximally_spaced") return LayerSelection::maximally_spaced;
  throw std::invalid_argument("unknown layer selection: " + std::string(s));
}

std::vector<std::size_t> select_layers(std::size_t teacher_layers, std::size_t student_layers, LayerSelection s) {
  if (student_layers == 0 || student_layers > teacher_layers) {
    throw std::invalid_argument("student needs between 1 and " + std::to_string(teacher_layers) + " layers");
  }
  std::vector<std::size_t> out(student_layers);
  for (std::size_t j = 0; j < student_layers; ++j) {
    if (s == LayerSelection::first_k || student_layers == 1) {
      out[j] = j;
    } else {
      out[j] = static_cast<std::size_t>(std::lround(static_cast<double>(j * (teacher_layers - 1)) /
                                                    static_cast<double>(student_layers - 1)));
    }
  }
  return out;
}

Transformer init_student_from_teacher(const Transformer& teacher, const ModelConfig& student,
                                      LayerSelection selection) {
  student.validate();
  const auto& t = teacher.config;
  if (student.d_model != t.d_model || student.ffn_dim != t.ffn_dim) {
    throw std::invalid_argument("student width differs from the teacher");
  }
  if (student.vocab_size != t.vocab_size) throw std::invalid_argument("student vocabulary differs from the teacher");
  if (student.positions != t.positions || student.max_seq_len != t.max_seq_len) {
    throw std::invalid_argument("student position layout differs from the teacher");
  }
  const auto enc = select_layers(t.encoder_layers, student.encoder_layers, LayerSelection::first_k);
  const auto dec = select_layers(t.decoder_layers, student.decoder_layers, selection);

  Transformer s = Transformer::create(student, 0);
  s.vocabulary = teacher.vocabulary;
  for (auto& p : s.params.all()) {
    std::string source = p.name;
    const auto dot = p.name.find('.');
    const auto stack = p.name.substr(0, dot);
    if (dot != std::string::npos && (stack == "encoder" || stack == "decoder")) {
      const auto dot2 = p.name.find('.', dot + 1);
      const auto index = p.name.substr(dot + 1, dot2 - dot - 1);
      if (!index.empty() && std::all_of(index.begin(), index.end(), [](char c) { return c >= '0' && c <= '9'; })) {
        const auto& map = stack == "encoder" ? enc : dec;
        source = stack + "." + std::to_string(map.at(std::stoul(index))) + p.name.substr(dot2);
      }
    }
    p.value = teacher.params.at(source).value;
  }
  return s;
}

MetricsReport evaluate_model(const Transformer& model, const Corpus& corpus, const BeamConfig& decode,
                             const ReportOptions& options, std::size_t workers, std::vector<Words>* outputs) {
  decode.validate();
  if (corpus.empty()) throw std::invalid_argument("empty evaluation corpus");
  const auto vocab = model_vocabulary(model);
  const TransformerStepModel step_model(model, decode.trace);
  std::vector<Words> out(corpus.size()), docs, refs;
  parallel_for(corpus.size(), workers, [&](std::size_t i) {
    std::mt19937_64 rng(derive_seed(decode.seed, corpus[i].id));
    out[i] = vocab.decode(decode_document(step_model, vocab.encode(corpus[i].document), decode, rng).tokens);
  });
  for (const auto& ex : corpus) {
    docs.push_back(ex.document);
    refs.push_back(ex.summary);
  }
  auto report = compute_report("model", out, docs, &refs, options);
  if (outputs) *outputs = std::move(out);
  return report;
}

namespace {

nlohmann::ordered_json report_options_json(const ReportOptions& o) {
  nlohmann::ordered_json j;
  j["rouge_mode"] = to_string(o.rouge_mode);
  j["leading_fraction"] = o.leading_fraction;
  j["min_span"] = o.min_span;
  j["distinct_ngrams"] = o.distinct_ngrams;
  return j;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace

std::vector<DistillationOutcome> run_distillation(const Transformer& teacher, const Corpus& train,
                                                  const Corpus* valid, const Corpus& test,
                                                  const std::vector<DistillationSetting>& grid,
                                                  const DistillationPlan& plan) {
  plan.train.validate();
  plan.student_decode.validate();
  for (const auto& s : grid) s.lambda.validate();
  if (grid.empty()) throw std::invalid_argument("empty lambda grid");
  const Transformer init = init_student_from_teacher(teacher, plan.student, plan.selection);
  BeamConfig student_decode = plan.student_decode;
  student_decode.lambda = LambdaSpec::fixed(1.0);
  std::map<std::string, const Example*> gold;
  for (const auto& ex : train) gold[ex.id] = &ex;

  std::vector<DistillationOutcome> outcomes;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    DistillationOutcome o;
    o.setting = grid[i];
    if (o.setting.label.empty()) o.setting.label = "setting-" + std::to_string(i);
    PseudoLabelOptions popts = plan.pseudo;
    popts.decode.lambda = o.setting.lambda;
    o.pseudo = generate_pseudo_labels(teacher, train, popts);
    o.pseudo_digest = sha256_hex(format_pseudo_jsonl(o.pseudo.records));

    std::vector<Words> summaries, docs, refs;
    for (const auto& r : o.pseudo.records) {
      summaries.push_back(r.summary);
      docs.push_back(r.document);
      refs.push_back(gold.at(r.id)->summary);
    }
    o.pseudo_report = compute_report("pseudo-" + o.setting.label, summaries, docs, &refs, plan.report);
    if (!o.pseudo.attention.empty()) o.pseudo_report.attention = evident_attention_histogram(o.pseudo.attention);

    o.student = train_model(pseudo_corpus(o.pseudo.records), valid, plan.train, init).model;
    o.student_digest = model_digest(o.student);
    o.test_report = evaluate_model(o.student, test, student_decode, plan.report, plan.pseudo.workers);
    o.test_report.system = "student-" + o.setting.label;
    outcomes.push_back(std::move(o));
  }

  if (plan.out_dir) {
    const std::filesystem::path dir(*plan.out_dir);
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["teacher_digest"] = model_digest(teacher);
    manifest["student_config"] = plan.student;
    manifest["layer_selection"] = to_string(plan.selection);
    manifest["train"] = plan.train;
    manifest["pseudo_decode"] = plan.pseudo.decode;
    manifest["student_decode"] = student_decode;
    manifest["report"] = report_options_json(plan.report);
    manifest["settings"] = nlohmann::json::array();
    for (const auto& o : outcomes) {
      const auto pseudo_file = "pseudo-" + o.setting.label + ".jsonl";
      const auto student_file = "student-" + o.setting.label + ".bin";
      const auto report_file = "report-" + o.setting.label + ".json";
      write_pseudo_jsonl(o.pseudo.records, (dir / pseudo_file).string());
      save_model((dir / student_file).string(), o.student);
      nlohmann::ordered_json reports;
      reports["pseudo"] = to_json(o.pseudo_report);
      reports["test"] = to_json(o.test_report);
      write_text(dir / report_file, reports.dump(2) + "\n");
      nlohmann::json s;
      s["label"] = o.setting.label;
      s["lambda"] = o.setting.lambda;
      s["pseudo"] = {{"path", pseudo_file}, {"sha256", o.pseudo_digest}, {"teacher_digest", manifest["teacher_digest"]}};
      s["student"] = {{"path", student_file}, {"sha256", o.student_digest}, {"pseudo_digest", o.pseudo_digest}};
      s["report"] = {{"path", report_file}, {"sha256", file_digest((dir / report_file).string())}};
      manifest["settings"].push_back(std::move(s));
    }
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  }
  return outcomes;
}

}  // namespace plate
