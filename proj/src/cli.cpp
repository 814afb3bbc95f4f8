#include "plate/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "plate/digest.hpp"
#include "plate/errors.hpp"

namespace plate::cli {

namespace fs = std::filesystem;

namespace {

constexpr int kManifestVersion = 1;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::json report_options_json(const ReportOptions& o) {
  return {{"rouge_mode", to_string(o.rouge_mode)},
          {"leading_fraction", o.leading_fraction},
          {"min_span", o.min_span},
          {"distinct_ngrams", o.distinct_ngrams}};
}

ReportOptions report_options_from(const nlohmann::json& j) {
  ReportOptions o;
  o.rouge_mode = parse_rouge_mode(j.value("rouge_mode", std::string(to_string(o.rouge_mode))));
  o.leading_fraction = j.value("leading_fraction", o.leading_fraction);
  o.min_span = j.value("min_span", o.min_span);
  o.distinct_ngrams = j.value("distinct_ngrams", o.distinct_ngrams);
  return o;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const std::string& path, const std::string& text) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path);
}

nlohmann::json read_json(const std::string& path) {
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path + ": " + e.what());
  }
}

const std::string& path_of(const RunConfig& c, const std::string& role, const std::string& flag) {
  const auto it = c.paths.find(role);
  if (it == c.paths.end() || it->second.empty()) throw UsageError("missing required option " + flag);
  return it->second;
}

std::optional<std::string> optional_path(const RunConfig& c, const std::string& role) {
  const auto it = c.paths.find(role);
  if (it == c.paths.end() || it->second.empty()) return std::nullopt;
  return it->second;
}

Corpus corpus_split(const Corpus& c, Split s) {
  Corpus out;
  for (const auto& ex : c) {
    if (ex.split == s) out.push_back(ex);
  }
  return out;
}

// Roles each command reads and writes. Entries ending in '/' are directories.
struct CommandSpec {
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::vector<std::string> required;  // flag names, role = name without dashes
};

const std::map<std::string, CommandSpec>& command_specs() {
  static const std::map<std::string, CommandSpec> specs{
      {"synth", {{}, {"out/"}, {"--out"}}},
      {"train", {{"corpus", "valid"}, {"out", "loss_curve"}, {"--corpus", "--out"}}},
      {"pseudo", {{"model", "corpus"}, {"out", "dump_attention/"}, {"--model", "--corpus", "--out"}}},
      {"distill", {{"teacher", "pseudo", "valid"}, {"out", "loss_curve"}, {"--teacher", "--pseudo", "--out"}}},
      {"eval", {{"model", "corpus"}, {"report", "outputs"}, {"--model", "--corpus", "--report"}}},
      {"analyze", {{"system", "corpus", "attn/"}, {"report"}, {"--system", "--corpus", "--report"}}},
      {"attn-stats", {{"attn/"}, {"csv", "report"}, {"--attn", "--csv"}}},
  };
  return specs;
}

std::string strip_dir_marker(const std::string& role) {
  return !role.empty() && role.back() == '/' ? role.substr(0, role.size() - 1) : role;
}

std::string digest_of(const std::string& path, bool directory) {
  return directory ? directory_digest(path) : file_digest(path);
}

nlohmann::json digests(const RunConfig& c, const std::vector<std::string>& roles) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& r : roles) {
    const auto role = strip_dir_marker(r);
    if (auto p = optional_path(c, role)) out[role] = {{"path", *p}, {"sha256", digest_of(*p, r.back() == '/')}};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands

void run_synth(const RunConfig& c) {
  const auto dir = path_of(c, "out", "--out");
  fs::create_directories(dir);
  const auto corpus = synth_corpus_generate(c.synth);
  write_jsonl(corpus_split(corpus, Split::train), (fs::path(dir) / "train.jsonl").string());
  write_jsonl(corpus_split(corpus, Split::valid), (fs::path(dir) / "valid.jsonl").string());
  write_jsonl(corpus_split(corpus, Split::test), (fs::path(dir) / "test.jsonl").string());
}

std::string loss_curve_csv(const TrainResult& r) {
  std::map<std::size_t, double> valid;
  for (const auto& v : r.validation) valid[v.step] = v.loss;
  std::ostringstream s;
  s.precision(17);
  s << "step,train_loss,valid_loss\n";
  for (std::size_t i = 0; i < r.train_loss.size(); ++i) {
    s << i + 1 << ',' << r.train_loss[i] << ',';
    if (auto it = valid.find(i + 1); it != valid.end()) s << it->second;
    s << '\n';
  }
  return s.str();
}

// Replaces words outside the vocabulary by <unk>.
Corpus restrict_to(const Corpus& corpus, const Vocabulary& vocab) {
  Corpus out = corpus;
  for (auto& ex : out) {
    for (auto* words : {&ex.document, &ex.summary}) {
      for (auto& w : *words) {
        if (!vocab.contains(w)) w = vocab.token(kUnkId);
      }
    }
  }
  return out;
}

void finish_training(const RunConfig& c, const TrainResult& r, std::ostream& log) {
  save_model(path_of(c, "out", "--out"), r.model);
  if (auto curve = optional_path(c, "loss_curve")) write_text(*curve, loss_curve_csv(r));
  log << "trained " << r.train_loss.size() << " steps, final loss " << (r.train_loss.empty() ? 0.0 : r.train_loss.back());
  if (r.best_validation_loss) log << ", best validation loss " << *r.best_validation_loss << " at step " << r.best_step;
  log << '\n';
}

void run_train(const RunConfig& c, std::ostream& log) {
  const auto train = load_jsonl(path_of(c, "corpus", "--corpus"));
  validate_corpus(train);
  const auto vocab = build_vocab(train, c.min_freq);
  ModelConfig mc = c.model;
  mc.vocab_size = vocab.size();
  Transformer model = Transformer::create(mc, c.train.seed);
  model.vocabulary = vocab.tokens();
  std::optional<Corpus> valid;
  if (auto v = optional_path(c, "valid")) valid = load_jsonl(*v);
  finish_training(c, train_model(restrict_to(train, vocab), valid ? &*valid : nullptr, c.train, std::move(model)),
                  log);
}

void run_pseudo(const RunConfig& c, std::ostream& log) {
  const auto teacher = load_model(path_of(c, "model", "--model"));
  const auto corpus = load_jsonl(path_of(c, "corpus", "--corpus"));
  PseudoLabelOptions o;
  o.decode = c.decode;
  o.workers = c.workers;
  o.max_failure_rate = c.max_failure_rate;
  o.attention_dir = optional_path(c, "dump_attention");
  const auto run = generate_pseudo_labels(teacher, corpus, o);
  write_pseudo_jsonl(run.records, path_of(c, "out", "--out"));
  log << "wrote " << run.records.size() << " pseudo labels";
  if (!run.failures.empty()) log << ", skipped " << run.failures.size();
  log << '\n';
}

void run_distill(const RunConfig& c, std::ostream& log) {
  const auto teacher = load_model(path_of(c, "teacher", "--teacher"));
  nlohmann::json merged = teacher.config;
  merged.merge_patch(c.student);
  const auto student_config = merged.get<ModelConfig>();
  const auto pseudo = load_jsonl(path_of(c, "pseudo", "--pseudo"));
  std::optional<Corpus> valid;
  if (auto v = optional_path(c, "valid")) valid = load_jsonl(*v);
  const auto init = init_student_from_teacher(teacher, student_config, c.init);
  finish_training(c, train_model(pseudo, valid ? &*valid : nullptr, c.train, init), log);
}

void run_eval(const RunConfig& c, std::ostream& log) {
  const auto model = load_model(path_of(c, "model", "--model"));
  const auto corpus = load_jsonl(path_of(c, "corpus", "--corpus"));
  std::vector<Words> outputs;
  auto report = evaluate_model(model, corpus, c.decode, c.report, c.workers, &outputs);
  report.system = fs::path(path_of(c, "model", "--model")).filename().string();
  write_text(path_of(c, "report", "--report"), to_json(report).dump(2) + "\n");
  if (auto out = optional_path(c, "outputs")) {
    Corpus system;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      system.push_back({corpus[i].id, corpus[i].document, outputs[i], corpus[i].split});
    }
    write_jsonl(system, *out);
  }
  log << "ROUGE-1 " << report.rouge1.value_or(0.0) << ", ROUGE-2 " << report.rouge2.value_or(0.0) << ", ROUGE-L "
      << report.rougeL.value_or(0.0) << '\n';
}

std::vector<Tensor> load_attention_dir(const std::string& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::invalid_argument("no attention dumps in " + dir);
  std::vector<Tensor> traces;
  for (const auto& f : files) traces.push_back(load_attention_dump(f.string()).attention);
  return traces;
}

void run_analyze(const RunConfig& c, std::ostream& log) {
  const auto system = load_jsonl(path_of(c, "system", "--system"));
  const auto corpus = load_jsonl(path_of(c, "corpus", "--corpus"));
  std::map<std::string, const Example*> by_id;
  for (const auto& ex : corpus) by_id[ex.id] = &ex;
  std::vector<Words> outputs, docs, refs;
  for (const auto& ex : system) {
    const auto it = by_id.find(ex.id);
    if (it == by_id.end()) throw std::invalid_argument("system output " + ex.id + " has no source document");
    outputs.push_back(ex.summary);
    docs.push_back(it->second->document);
    refs.push_back(it->second->summary);
  }
  if (outputs.empty()) throw std::invalid_argument("empty system file");
  auto report =
      compute_report(fs::path(path_of(c, "system", "--system")).filename().string(), outputs, docs, &refs, c.report);
  if (auto attn = optional_path(c, "attn")) {
    report.attention = evident_attention_histogram(load_attention_dir(*attn), c.threshold, c.bins);
  }
  write_text(path_of(c, "report", "--report"), to_json(report).dump(2) + "\n");
  log << "analyzed " << outputs.size() << " outputs: mean length " << report.avg_length << ", novel bigrams "
      << report.novel_ngrams[1] << '\n';
}

void run_attn_stats(const RunConfig& c, std::ostream& log) {
  const auto h = evident_attention_histogram(load_attention_dir(path_of(c, "attn", "--attn")), c.threshold, c.bins);
  write_text(path_of(c, "csv", "--csv"), histogram_csv(h));
  if (auto r = optional_path(c, "report")) write_text(*r, to_json(h).dump(2) + "\n");
  log << "evident rate " << h.evident_rate << " over " << h.documents << " documents\n";
}

nlohmann::json execute_logged(const std::string& command, const RunConfig& config, std::ostream& log) {
  const auto spec_it = command_specs().find(command);
  if (spec_it == command_specs().end()) throw UsageError("unknown command " + command);
  const auto& spec = spec_it->second;
  for (const auto& flag : spec.required) path_of(config, flag.substr(2), flag);
  nlohmann::json manifest;
  manifest["manifest_version"] = kManifestVersion;
  manifest["command"] = command;
  manifest["config"] = to_json(config);
  manifest["inputs"] = digests(config, spec.inputs);

  if (command == "synth") run_synth(config);
  else if (command == "train") run_train(config, log);
  else if (command == "pseudo") run_pseudo(config, log);
  else if (command == "distill") run_distill(config, log);
  else if (command == "eval") run_eval(config, log);
  else if (command == "analyze") run_analyze(config, log);
  else run_attn_stats(config, log);

  manifest["outputs"] = digests(config, spec.outputs);
  write_text(manifest_path(command, config), manifest.dump(2) + "\n");
  return manifest;
}

// ---------------------------------------------------------------------------
// Flag handling

// Flags are parsed first and applied to the merged configuration afterwards,
// so that they win over the config file.
class Bindings {
 public:
  template <class T>
  CLI::Option* option(CLI::App* app, const std::string& flag, const std::string& help,
                      std::function<void(RunConfig&, const T&)> set) {
    auto* o = app->add_option(flag, help);
    if constexpr (std::is_same_v<T, std::string>) {
      o->type_name("TEXT");
    } else {
      o->type_name(std::is_integral_v<T> ? "INT" : "FLOAT");
    }
    items_.push_back({o, [o, set](RunConfig& c) { set(c, o->as<T>()); }});
    return o;
  }

  CLI::Option* path(CLI::App* app, const std::string& flag, const std::string& role, const std::string& help) {
    return option<std::string>(app, flag, help, [role](RunConfig& c, const std::string& v) { c.paths[role] = v; });
  }

  CLI::Option* flag(CLI::App* app, const std::string& flag, const std::string& help,
                    std::function<void(RunConfig&)> set) {
    auto* o = app->add_flag(flag, help);
    items_.push_back({o, [set](RunConfig& c) { set(c); }});
    return o;
  }

  void apply(RunConfig& c) const {
    for (const auto& [opt, set] : items_) {
      if (opt->count() > 0) set(c);
    }
  }

 private:
  std::vector<std::pair<CLI::Option*, std::function<void(RunConfig&)>>> items_;
};

void add_seed(CLI::App* app, Bindings& b) {
  b.option<std::uint64_t>(app, "--seed", "seed for every random choice of the run",
                          [](RunConfig& c, const std::uint64_t& s) {
                            c.synth.seed = s;
                            c.train.seed = s;
                            c.decode.seed = s;
                          });
}

void add_train_flags(CLI::App* app, Bindings& b) {
  b.option<std::size_t>(app, "--steps", "optimizer updates", [](RunConfig& c, const std::size_t& v) { c.train.steps = v; });
  b.option<std::size_t>(app, "--warmup", "warmup updates", [](RunConfig& c, const std::size_t& v) { c.train.warmup_steps = v; });
  b.option<double>(app, "--lr", "peak learning rate", [](RunConfig& c, const double& v) { c.train.learning_rate = v; });
  b.option<std::size_t>(app, "--batch-tokens", "tokens per batch",
                        [](RunConfig& c, const std::size_t& v) { c.train.batch_tokens = v; });
  b.option<double>(app, "--label-smoothing", "label smoothing epsilon",
                   [](RunConfig& c, const double& v) { c.train.label_smoothing = v; });
  b.option<double>(app, "--weight-decay", "decoupled weight decay",
                   [](RunConfig& c, const double& v) { c.train.weight_decay = v; });
  b.option<std::string>(app, "--schedule", "linear_warmup_constant|inverse_sqrt",
                        [](RunConfig& c, const std::string& v) { c.train.schedule = parse_schedule(v); });
  b.option<std::size_t>(app, "--validation-interval", "updates between validation passes (0: end only)",
                        [](RunConfig& c, const std::size_t& v) { c.train.validation_interval = v; });
  b.path(app, "--valid", "valid", "validation corpus (JSONL)");
  b.path(app, "--loss-curve", "loss_curve", "CSV of per-step losses");
}

void add_decode_flags(CLI::App* app, Bindings& b) {
  b.option<std::size_t>(app, "--beam", "beam width", [](RunConfig& c, const std::size_t& v) { c.decode.beam_size = v; });
  b.option<double>(app, "--length-penalty", "length penalty alpha",
                   [](RunConfig& c, const double& v) { c.decode.length_penalty = v; });
  b.option<std::size_t>(app, "--min-len", "minimum generated tokens",
                        [](RunConfig& c, const std::size_t& v) { c.decode.min_length = v; });
  b.option<std::size_t>(app, "--max-len", "maximum generated tokens, end token included",
                        [](RunConfig& c, const std::size_t& v) { c.decode.max_length = v; });
  b.option<double>(app, "--output-temp", "output softmax temperature",
                   [](RunConfig& c, const double& v) { c.decode.output_temperature = v; });
  b.option<std::string>(app, "--sampler", "beam|ancestral|nucleus",
                        [](RunConfig& c, const std::string& v) { c.decode.sampler = parse_sampler(v); });
  b.option<double>(app, "--top-p", "nucleus mass", [](RunConfig& c, const double& v) { c.decode.top_p = v; });
  b.option<std::size_t>(app, "--workers", "decoding threads", [](RunConfig& c, const std::size_t& v) { c.workers = v; });
}

void add_report_flags(CLI::App* app, Bindings& b) {
  b.option<std::string>(app, "--rouge-mode", "f1|limited_recall",
                        [](RunConfig& c, const std::string& v) { c.report.rouge_mode = parse_rouge_mode(v); });
  b.option<double>(app, "--leading-fraction", "leading window as a share of the document",
                   [](RunConfig& c, const double& v) { c.report.leading_fraction = v; });
  b.option<std::size_t>(app, "--min-span", "shortest copied span counted",
                        [](RunConfig& c, const std::size_t& v) { c.report.min_span = v; });
  b.flag(app, "--distinct-ngrams", "count distinct n-grams only", [](RunConfig& c) { c.report.distinct_ngrams = true; });
}

void add_model_flags(CLI::App* app, Bindings& b) {
  b.option<std::size_t>(app, "--d-model", "model width", [](RunConfig& c, const std::size_t& v) { c.model.d_model = v; });
  b.option<std::size_t>(app, "--heads", "attention heads", [](RunConfig& c, const std::size_t& v) { c.model.n_heads = v; });
  b.option<std::size_t>(app, "--encoder-layers", "encoder layers",
                        [](RunConfig& c, const std::size_t& v) { c.model.encoder_layers = v; });
  b.option<std::size_t>(app, "--decoder-layers", "decoder layers",
                        [](RunConfig& c, const std::size_t& v) { c.model.decoder_layers = v; });
  b.option<std::size_t>(app, "--ffn-dim", "feed-forward width", [](RunConfig& c, const std::size_t& v) { c.model.ffn_dim = v; });
  b.option<std::size_t>(app, "--max-seq-len", "longest sequence",
                        [](RunConfig& c, const std::size_t& v) { c.model.max_seq_len = v; });
  b.option<double>(app, "--dropout", "dropout rate", [](RunConfig& c, const double& v) { c.model.dropout = v; });
  b.option<std::string>(app, "--positions", "learned|sinusoidal", [](RunConfig& c, const std::string& v) {
    nlohmann::json j = c.model;
    j["positions"] = v;
    c.model = j.get<ModelConfig>();
  });
  b.option<std::size_t>(app, "--min-freq", "vocabulary frequency cutoff",
                        [](RunConfig& c, const std::size_t& v) { c.min_freq = v; });
}

void check_config_keys(const nlohmann::json& j) {
  if (!j.is_object()) throw ParseError("config file must hold a JSON object");
  static const std::set<std::string> known{"synth",   "model",     "train", "decode", "report",
                                           "min_freq", "workers",  "max_failure_rate", "init",
                                           "threshold", "bins",    "student", "paths"};
  for (const auto& [k, v] : j.items()) {
    if (!known.contains(k)) throw ParseError("unknown config key: " + k);
  }
}

int replay(const std::string& manifest_file, const std::optional<std::string>& out_dir, std::ostream& out) {
  const auto manifest = read_json(manifest_file);
  const auto command = manifest.at("command").get<std::string>();
  auto config = run_config_from_json(manifest.at("config"));
  for (const auto& [role, entry] : manifest.at("inputs").items()) {
    const auto& path = entry.at("path").get<std::string>();
    const bool dir = fs::is_directory(path);
    if (!fs::exists(path) || digest_of(path, dir) != entry.at("sha256").get<std::string>()) {
      throw std::runtime_error("input " + role + " (" + path + ") no longer matches the manifest");
    }
  }
  if (out_dir) {
    fs::create_directories(*out_dir);
    for (const auto& [role, entry] : manifest.at("outputs").items()) {
      config.paths[role] = (fs::path(*out_dir) / fs::path(entry.at("path").get<std::string>()).filename()).string();
    }
  }
  const auto fresh = execute_logged(command, config, out);
  bool identical = true;
  for (const auto& [role, entry] : manifest.at("outputs").items()) {
    const auto& now = fresh.at("outputs").at(role);
    const bool same = now.at("sha256") == entry.at("sha256");
    identical = identical && same;
    out << role << ' ' << (same ? "identical" : "DIFFERS") << ' ' << now.at("path").get<std::string>() << '\n';
  }
  return identical ? 0 : 1;
}

}  // namespace

// ---------------------------------------------------------------------------

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["synth"] = c.synth;
  j["model"] = c.model;
  j["train"] = c.train;
  j["decode"] = c.decode;
  j["report"] = report_options_json(c.report);
  j["min_freq"] = c.min_freq;
  j["workers"] = c.workers;
  j["max_failure_rate"] = c.max_failure_rate;
  j["init"] = to_string(c.init);
  j["threshold"] = c.threshold;
  j["bins"] = c.bins;
  j["student"] = c.student;
  j["paths"] = c.paths;
  return j;
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  check_config_keys(j);
  RunConfig c;
  if (j.contains("synth")) c.synth = j["synth"].get<SynthConfig>();
  if (j.contains("model")) c.model = j["model"].get<ModelConfig>();
  if (j.contains("train")) c.train = j["train"].get<TrainConfig>();
  if (j.contains("decode")) c.decode = j["decode"].get<BeamConfig>();
  if (j.contains("report")) c.report = report_options_from(j["report"]);
  c.min_freq = j.value("min_freq", c.min_freq);
  c.workers = j.value("workers", c.workers);
  c.max_failure_rate = j.value("max_failure_rate", c.max_failure_rate);
  if (j.contains("init")) c.init = parse_layer_selection(j["init"].get<std::string>());
  c.threshold = j.value("threshold", c.threshold);
  c.bins = j.value("bins", c.bins);
  if (j.contains("student")) c.student = j["student"];
  if (j.contains("paths")) c.paths = j["paths"].get<std::map<std::string, std::string>>();
  return c;
}

std::string directory_digest(const std::string& path) {
  if (!fs::is_directory(path)) throw std::runtime_error("not a directory: " + path);
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(path)) {
    if (e.is_regular_file() && e.path().filename() != "manifest.json") names.push_back(e.path().filename().string());
  }
  std::sort(names.begin(), names.end());
  std::string listing;
  for (const auto& n : names) listing += n + ' ' + file_digest((fs::path(path) / n).string()) + '\n';
  return sha256_hex(listing);
}

std::string manifest_path(const std::string& command, const RunConfig& config) {
  if (command == "synth") return (fs::path(path_of(config, "out", "--out")) / "manifest.json").string();
  if (command == "eval" || command == "analyze") return path_of(config, "report", "--report") + ".manifest.json";
  if (command == "attn-stats") return path_of(config, "csv", "--csv") + ".manifest.json";
  return path_of(config, "out", "--out") + ".manifest.json";
}

nlohmann::json execute(const std::string& command, const RunConfig& config) {
  std::ostringstream sink;
  return execute_logged(command, config, sink);
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Attention-temperature pseudo-labeling laboratory"};
  app.name(args.empty() ? "plate" : fs::path(args[0]).filename().string());
  app.require_subcommand(1);
  Bindings b;
  std::string config_file;
  const auto config_option = [&](CLI::App* sub) {
    sub->add_option("--config", config_file, "JSON configuration; flags take precedence");
  };

  auto* synth = app.add_subcommand("synth", "generate a synthetic summarization corpus");
  config_option(synth);
  add_seed(synth, b);
  b.path(synth, "--out", "out", "output directory");
  b.option<std::size_t>(synth, "--docs", "training documents", [](RunConfig& c, const std::size_t& v) { c.synth.docs = v; });
  b.option<std::size_t>(synth, "--valid-docs", "validation documents",
                        [](RunConfig& c, const std::size_t& v) { c.synth.valid_docs = v; });
  b.option<std::size_t>(synth, "--test-docs", "test documents",
                        [](RunConfig& c, const std::size_t& v) { c.synth.test_docs = v; });
  b.option<double>(synth, "--lead-skew", "bias of key sentences toward the start",
                   [](RunConfig& c, const double& v) { c.synth.lead_skew = v; });
  b.option<double>(synth, "--paraphrase", "synonym substitution rate in summaries",
                   [](RunConfig& c, const double& v) { c.synth.paraphrase_rate = v; });
  b.option<std::size_t>(synth, "--vocab", "content words", [](RunConfig& c, const std::size_t& v) { c.synth.vocab_size = v; });
  b.option<std::size_t>(synth, "--key-sentences", "summary sentences",
                        [](RunConfig& c, const std::size_t& v) { c.synth.key_sentences = v; });

  auto* train = app.add_subcommand("train", "train a model on gold pairs");
  config_option(train);
  add_seed(train, b);
  b.path(train, "--corpus", "corpus", "training corpus (JSONL)");
  b.path(train, "--out", "out", "model file to write");
  add_train_flags(train, b);
  add_model_flags(train, b);

  auto* pseudo = app.add_subcommand("pseudo", "generate pseudo summaries with a teacher");
  config_option(pseudo);
  add_seed(pseudo, b);
  b.path(pseudo, "--model", "model", "teacher model file");
  b.path(pseudo, "--corpus", "corpus", "documents to label (JSONL)");
  b.path(pseudo, "--out", "out", "pseudo corpus to write (JSONL)");
  auto* fixed = b.option<double>(pseudo, "--lambda", "attention temperature coefficient", [](RunConfig& c, const double& v) {
    auto keep = c.decode.lambda;
    c.decode.lambda = LambdaSpec::fixed(v);
    c.decode.lambda.enc = keep.enc;
    c.decode.lambda.cross = keep.cross;
    c.decode.lambda.dec = keep.dec;
  });
  auto* range = pseudo->add_option("--lambda-range", "draw lambda per document from [A, B]")->expected(2)->type_name("A B");
  range->excludes(fixed);
  b.option<double>(pseudo, "--lambda-enc", "encoder self-attention coefficient",
                   [](RunConfig& c, const double& v) { c.decode.lambda.enc = v; });
  b.option<double>(pseudo, "--lambda-cross", "cross-attention coefficient",
                   [](RunConfig& c, const double& v) { c.decode.lambda.cross = v; });
  b.option<double>(pseudo, "--lambda-dec", "decoder self-attention coefficient",
                   [](RunConfig& c, const double& v) { c.decode.lambda.dec = v; });
  b.path(pseudo, "--dump-attention", "dump_attention", "directory for per-document attention dumps");
  b.option<double>(pseudo, "--max-failure-rate", "share of failed documents tolerated",
                   [](RunConfig& c, const double& v) { c.max_failure_rate = v; });
  add_decode_flags(pseudo, b);

  auto* distill = app.add_subcommand("distill", "train a student on pseudo labels");
  config_option(distill);
  add_seed(distill, b);
  b.path(distill, "--teacher", "teacher", "teacher model file");
  std::string student_file;
  distill->add_option("--student-config", student_file, "JSON model configuration of the student");
  b.option<std::string>(distill, "--init", "first_k|maximally_spaced",
                        [](RunConfig& c, const std::string& v) { c.init = parse_layer_selection(v); });
  b.path(distill, "--pseudo", "pseudo", "pseudo corpus (JSONL)");
  b.path(distill, "--out", "out", "student model file to write");
  add_train_flags(distill, b);

  auto* eval = app.add_subcommand("eval", "decode a corpus and score it");
  config_option(eval);
  add_seed(eval, b);
  b.path(eval, "--model", "model", "model file");
  b.path(eval, "--corpus", "corpus", "evaluation corpus (JSONL)");
  b.path(eval, "--report", "report", "JSON report to write");
  b.path(eval, "--outputs", "outputs", "system outputs to write (JSONL)");
  add_decode_flags(eval, b);
  add_report_flags(eval, b);

  auto* analyze = app.add_subcommand("analyze", "statistics of system outputs against their sources");
  config_option(analyze);
  b.path(analyze, "--system", "system", "system outputs or pseudo corpus (JSONL)");
  b.path(analyze, "--corpus", "corpus", "source corpus (JSONL)");
  b.path(analyze, "--report", "report", "JSON report to write");
  b.path(analyze, "--attn", "attn", "attention dump directory");
  b.option<double>(analyze, "--threshold", "evident attention threshold",
                   [](RunConfig& c, const double& v) { c.threshold = v; });
  b.option<std::size_t>(analyze, "--bins", "position bins", [](RunConfig& c, const std::size_t& v) { c.bins = v; });
  add_report_flags(analyze, b);

  auto* attn = app.add_subcommand("attn-stats", "evident attention histogram of attention dumps");
  config_option(attn);
  b.path(attn, "--attn", "attn", "attention dump directory");
  b.path(attn, "--csv", "csv", "histogram CSV to write");
  b.path(attn, "--report", "report", "JSON histogram to write");
  b.option<double>(attn, "--threshold", "evident attention threshold",
                   [](RunConfig& c, const double& v) { c.threshold = v; });
  b.option<std::size_t>(attn, "--bins", "position bins", [](RunConfig& c, const std::size_t& v) { c.bins = v; });

  auto* replay_cmd = app.add_subcommand("replay", "re-run a manifest and compare output digests");
  std::string manifest_file, replay_dir;
  replay_cmd->add_option("--manifest", manifest_file, "manifest of a completed run")->required();
  replay_cmd->add_option("--out-dir", replay_dir, "write outputs here instead of their recorded paths");

  std::vector<std::string> argv_tail(args.begin() + (args.empty() ? 0 : 1), args.end());
  std::reverse(argv_tail.begin(), argv_tail.end());
  try {
    app.parse(argv_tail);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return 2;
  }
  CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  try {
    if (command == "replay") {
      return replay(manifest_file, replay_dir.empty() ? std::nullopt : std::optional<std::string>(replay_dir), out);
    }
    RunConfig config = config_file.empty() ? RunConfig{} : run_config_from_json(read_json(config_file));
    b.apply(config);
    if (command == "pseudo" && range->count() > 0) {
      const auto v = range->as<std::vector<double>>();
      auto keep = config.decode.lambda;
      config.decode.lambda = LambdaSpec::uniform_range(v.at(0), v.at(1));
      config.decode.lambda.enc = keep.enc;
      config.decode.lambda.cross = keep.cross;
      config.decode.lambda.dec = keep.dec;
    }
    if (command == "distill") {
      if (!student_file.empty()) config.student = read_json(student_file);
      if (!config.student.is_object()) throw UsageError("student configuration must be a JSON object");
    }
    execute_logged(command, config, out);
    return 0;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n' << sub->help();
    return 2;
  } catch (const CLI::ConversionError& e) {
    err << "error: " << e.what() << '\n' << sub->help();
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace plate::cli
