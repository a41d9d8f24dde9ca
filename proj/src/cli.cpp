#include "slmt/cli.hpp"

#include <fmt/chrono.h>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <fstream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "slmt/checkpoint.hpp"
#include "slmt/corpus.hpp"
#include "slmt/evaluation.hpp"
#include "slmt/training.hpp"

namespace slmt::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr const char* kToolVersion = "0.1.0";

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw corpus::DataError("cannot open " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw corpus::DataError("cannot write " + path.string());
}

std::string now_utc() {
  return fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", fmt::gmtime(std::chrono::system_clock::to_time_t(std::chrono::system_clock::now())));
}

std::string hex(std::uint64_t v) { return fmt::format("{:016x}", v); }

// Provenance record written next to every artifact. Timestamps live only here,
// so the artifacts themselves stay byte-identical across reruns.
class RunManifest {
 public:
  RunManifest(std::string command, int argc, char** argv) : command_(std::move(command)), started_(now_utc()) {
    for (int i = 0; i < argc; ++i) argv_.emplace_back(argv[i]);
  }
  void set_config_digest(std::uint64_t d) { config_digest_ = hex(d); }
  void set_seed(std::uint64_t s) { seed_ = s; }
  void input(const fs::path& p) { add(inputs_, p); }
  void output(const fs::path& p) { add(outputs_, p); }

  void write(const fs::path& path) const {
    ordered_json j;
    j["command"] = command_;
    j["argv"] = argv_;
    j["tool_version"] = kToolVersion;
    j["config_digest"] = config_digest_.empty() ? ordered_json(nullptr) : ordered_json(config_digest_);
    j["seed"] = seed_ ? ordered_json(*seed_) : ordered_json(nullptr);
    auto files = [](const std::vector<std::pair<std::string, std::string>>& list) {
      ordered_json arr = ordered_json::array();
      for (const auto& [p, d] : list) arr.push_back({{"path", p}, {"fnv1a64", d}});
      return arr;
    };
    j["inputs"] = files(inputs_);
    j["outputs"] = files(outputs_);
    j["started_at"] = started_;
    j["finished_at"] = now_utc();
    write_text(path, j.dump(2) + "\n");
  }

 private:
  static void add(std::vector<std::pair<std::string, std::string>>& list, const fs::path& p) {
    if (fs::is_directory(p)) {
      std::vector<fs::path> files;
      for (const auto& e : fs::recursive_directory_iterator(p)) {
        if (e.is_regular_file() && e.path().filename() != "run_manifest.json") files.push_back(e.path());
      }
      std::sort(files.begin(), files.end());
      for (const auto& f : files) list.emplace_back(f.string(), file_digest(f));
    } else {
      list.emplace_back(p.string(), file_digest(p));
    }
  }

  std::string command_;
  std::vector<std::string> argv_;
  std::string started_;
  std::string config_digest_;
  std::optional<std::uint64_t> seed_;
  std::vector<std::pair<std::string, std::string>> inputs_;
  std::vector<std::pair<std::string, std::string>> outputs_;
};

int language_index(const std::string& name, const std::vector<corpus::LanguageSpec>& languages) {
  for (const auto& l : languages) {
    if (l.name == name) return l.id;
  }
  std::string valid;
  for (const auto& l : languages) valid += (valid.empty() ? "" : ", ") + l.name;
  throw UsageError("unknown language '" + name + "' (known: " + valid + ")");
}

struct LoadedModel {
  std::unique_ptr<TranslationModel<float>> model;
  corpus::Corpus corpus;  // languages and options only
};

LoadedModel load_model(const fs::path& path) {
  const auto ckpt = Checkpoint::load(path);
  const auto cfg = train::config_from_checkpoint(ckpt);
  LoadedModel out;
  out.model = std::make_unique<TranslationModel<float>>(cfg, 0);
  train::load_parameters(out.model->params(), ckpt);
  const auto* manifest = ckpt.find("meta.manifest");
  if (!manifest) throw corpus::DataError("checkpoint carries no corpus manifest");
  out.corpus = corpus::corpus_from_manifest(manifest->text());
  if (out.corpus.vocabulary().size() != cfg.vocab_size) throw corpus::DataError("checkpoint vocabulary mismatch");
  return out;
}

// ---- gen-data -------------------------------------------------------------------

struct GenDataArgs {
  corpus::GenerateOptions options;
  std::string center = "L0";
  std::string out;
};

int cmd_gen_data(const GenDataArgs& a, RunManifest& manifest) {
  auto o = a.options;
  if (o.n_languages < 3) throw UsageError("--languages must be >= 3 so that zero-shot directions exist");
  if (a.center.size() < 2 || a.center[0] != 'L') throw UsageError("--center must name a language such as L0");
  try {
    o.center = std::stoi(a.center.substr(1));
  } catch (const std::exception&) {
    throw UsageError("--center must name a language such as L0");
  }
  if (o.center < 0 || static_cast<std::size_t>(o.center) >= o.n_languages) {
    throw UsageError("--center " + a.center + " is not one of the generated languages");
  }
  corpus::Corpus c;
  try {
    c = corpus::generate_corpus(o);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  corpus::write_corpus(c, a.out);
  manifest.set_seed(o.seed);
  manifest.output(a.out);
  manifest.write(fs::path(a.out) / "run_manifest.json");
  fmt::print("wrote {}: {} languages, {} supervised train directions, {} test directions\n", a.out,
             c.languages.size(), c.splits.at("train").size(), c.splits.at("test").size());
  return kOk;
}

// ---- train ----------------------------------------------------------------------

struct TrainArgs {
  std::string corpus;
  std::string out;
  std::string config;
  std::string resume;
  std::vector<std::string> sets;
  std::map<std::string, std::string> flags;  // config key -> value, empty when unset
  bool no_disentangler = false;
  bool no_det_loss = false;
  bool no_ling_encoder = false;
};

void apply_setting(const std::string& key, const std::string& value, ModelConfig& mc, train::TrainRunConfig& tc) {
  if (tc.apply(key, value)) return;
  mc.apply({{key, value}});
}

std::vector<corpus::Batch> validation_batches(const corpus::Corpus& c) {
  std::vector<corpus::Batch> out;
  auto it = c.splits.find("valid");
  if (it == c.splits.end()) return out;
  constexpr std::size_t kRows = 64;
  for (const auto& [dir, examples] : it->second) {
    for (std::size_t i = 0; i < examples.size(); i += kRows) {
      const auto end = std::min(examples.size(), i + kRows);
      out.push_back(corpus::make_batch({examples.begin() + static_cast<std::ptrdiff_t>(i),
                                        examples.begin() + static_cast<std::ptrdiff_t>(end)}));
    }
  }
  return out;
}

double validation_bleu(const TranslationModel<float>& model, const corpus::Corpus& c) {
  const auto vocab = c.vocabulary();
  const auto refs = eval::test_references(c, "valid");
  double total = 0.0;
  for (const auto& [dir, examples] : c.splits.at("valid")) {
    std::vector<std::vector<std::int32_t>> sources;
    for (const auto& ex : examples) sources.push_back(ex.source);
    const auto out = eval::translate_greedy_batch(model, sources, vocab.language_token(dir.target),
                                                  corpus::Vocabulary::kEos, eval::DecodeConfig{});
    std::vector<eval::Sentence> hyps;
    for (const auto& o : out) hyps.push_back(corpus::surface_tokens(o, vocab));
    total += eval::corpus_bleu(hyps, refs.at(dir));
  }
  return total / static_cast<double>(c.splits.at("valid").size());
}

// Keeps the records of a JSON-lines log up to and including `step`.
void truncate_log(const fs::path& path, std::uint64_t step) {
  if (!fs::exists(path)) return;
  std::string kept;
  for (const auto& line : corpus::read_lines(path)) {
    if (line.empty()) continue;
    if (nlohmann::json::parse(line).at("step").get<std::uint64_t>() <= step) kept += line + "\n";
  }
  write_text(path, kept);
}

int cmd_train(const TrainArgs& a, RunManifest& manifest) {
  ModelConfig mc;
  train::TrainRunConfig tc;
  if (!a.config.empty()) {
    for (const auto& [k, v] : parse_key_values(read_text(a.config))) apply_setting(k, v, mc, tc);
    manifest.input(a.config);
  }
  for (const auto& s : a.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
    apply_setting(s.substr(0, eq), s.substr(eq + 1), mc, tc);
  }
  for (const auto& [k, v] : a.flags) {
    if (!v.empty()) apply_setting(k, v, mc, tc);
  }
  if (a.no_disentangler) mc.use_disentangler = false;
  if (a.no_det_loss) mc.use_det_loss = false;
  if (a.no_ling_encoder) mc.use_ling_encoder = false;

  const auto c = corpus::load_corpus(a.corpus);
  manifest.input(fs::path(a.corpus) / "manifest.json");
  const auto vocab_size = c.vocabulary().size();
  if (mc.vocab_size != 0 && mc.vocab_size != vocab_size) {
    throw ConfigError(fmt::format("config: vocab_size {} does not match the corpus ({})", mc.vocab_size, vocab_size));
  }
  mc.vocab_size = vocab_size;
  mc.validate();
  tc.validate();

  const fs::path out(a.out);
  fs::create_directories(out);
  TranslationModel<float> model(mc, tc.seed);
  train::Trainer<float> trainer(model, tc, c.training_examples());
  const std::string corpus_manifest = read_text(fs::path(a.corpus) / "manifest.json");

  if (!a.resume.empty()) {
    const auto ckpt = Checkpoint::load(a.resume);
    manifest.input(a.resume);
    if (ckpt.config_digest != mc.digest()) {
      throw corpus::DataError("--resume: the checkpoint was written for a different model configuration");
    }
    auto stored = train::TrainRunConfig{};
    for (const auto& [k, v] : parse_key_values(ckpt.at("meta.train").text())) stored.apply(k, v);
    stored.total_steps = tc.total_steps;
    if (stored.to_text() != tc.to_text()) {
      throw corpus::DataError("--resume: training settings differ from the checkpoint (only the step budget may change)");
    }
    trainer.restore(ckpt);
    spdlog::info("resumed from {} at step {}", a.resume, trainer.steps_done());
  }
  const auto log_path = out / "train.log.jsonl";
  const auto valid_path = out / "valid.jsonl";
  if (a.resume.empty()) {
    write_text(log_path, "");
    write_text(valid_path, "");
  } else {
    truncate_log(log_path, trainer.steps_done());
    truncate_log(valid_path, trainer.steps_done());
  }
  write_text(out / "config.txt", mc.to_text() + tc.to_text());

  const auto valid = validation_batches(c);
  std::ofstream log(log_path, std::ios::binary | std::ios::app);
  std::ofstream valid_log(valid_path, std::ios::binary | std::ios::app);
  manifest.set_config_digest(mc.digest());
  manifest.set_seed(tc.seed);

  while (trainer.steps_done() < tc.total_steps) {
    const auto r = trainer.step();
    log << objectives::to_record(r.step, r.losses) << '\n';
    if (r.step % 100 == 0) {
      spdlog::info("step {} l_joint {:.4f} l_ce {:.4f} lr {:.3g}", r.step, r.losses.l_joint, r.losses.l_ce, r.lr);
    }
    if (r.step % tc.checkpoint_interval == 0 || r.step == tc.total_steps) {
      log.flush();
      const auto name = fmt::format("ckpt-{:08d}.slmt", r.step);
      train::make_checkpoint(model, &trainer.optimizer(), corpus_manifest, tc.to_text()).save(out / name);
      ordered_json rec;
      rec["step"] = r.step;
      rec["checkpoint"] = name;
      if (!valid.empty()) rec["valid_ce"] = train::validation_ce(model, valid);
      if (tc.select_metric == "valid_bleu") rec["valid_bleu"] = validation_bleu(model, c);
      valid_log << rec.dump() << '\n';
      valid_log.flush();
    }
  }
  log.close();
  valid_log.close();

  std::vector<train::CheckpointScore> scores;
  for (const auto& line : corpus::read_lines(valid_path)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (j.contains(tc.select_metric)) scores.push_back({j.at("step").get<std::uint64_t>(), j.at(tc.select_metric).get<double>()});
  }
  if (scores.size() >= tc.select_top) {
    const auto sel =
        train::checkpoint_select(scores, tc.keep_last, tc.select_top, tc.select_metric == "valid_bleu");
    ordered_json j;
    j["metric"] = tc.select_metric;
    j["last_k"] = tc.keep_last;
    j["top_n"] = tc.select_top;
    ordered_json picked = ordered_json::array();
    for (const auto& s : sel.selected) {
      picked.push_back({{"step", s.step}, {"checkpoint", fmt::format("ckpt-{:08d}.slmt", s.step)}, {"metric", s.metric}});
    }
    j["selected"] = picked;
    j["mean_metric"] = sel.mean_metric;
    write_text(out / "selection.json", j.dump(2) + "\n");
  } else {
    spdlog::warn("only {} checkpoints evaluated; selection needs {}", scores.size(), tc.select_top);
  }
  manifest.output(out);
  manifest.write(out / "run_manifest.json");
  fmt::print("trained {} steps; checkpoints and logs in {}\n", trainer.steps_done(), a.out);
  return kOk;
}

// ---- translate ------------------------------------------------------------------

struct TranslateArgs {
  std::string checkpoint;
  std::string input;
  std::string corpus;
  std::string split = "test";
  std::string tgt_lang;
  std::string src_lang;
  std::string out;
  eval::DecodeConfig decode;
};

int infer_language(const std::vector<std::string>& tokens, const std::vector<corpus::LanguageSpec>& languages) {
  std::map<int, std::size_t> counts;
  for (const auto& t : tokens) {
    if (auto l = eval::token_language(t, languages)) ++counts[*l];
  }
  for (const auto& [lang, n] : counts) {
    if (2 * n > tokens.size()) return lang;
  }
  throw corpus::DataError("cannot infer the source language; pass --src-lang");
}

int cmd_translate(const TranslateArgs& a, RunManifest& manifest) {
  a.decode.validate();
  if (a.input.empty() == a.corpus.empty()) throw UsageError("give exactly one of --input or --corpus");
  auto loaded = load_model(a.checkpoint);
  const auto& model = *loaded.model;
  const auto& languages = loaded.corpus.languages;
  const auto vocab = loaded.corpus.vocabulary();
  manifest.input(a.checkpoint);
  manifest.set_config_digest(model.config().digest());

  if (!a.input.empty()) {
    if (a.tgt_lang.empty()) throw UsageError("--tgt-lang is required with --input");
    const int target = language_index(a.tgt_lang, languages);
    const std::optional<int> forced = a.src_lang.empty() ? std::nullopt : std::optional(language_index(a.src_lang, languages));
    std::string text;
    for (const auto& line : corpus::read_lines(a.input)) {
      const auto tokens = corpus::split_tokens(line);
      if (tokens.empty()) throw corpus::DataError("empty source line in " + a.input);
      const int source = forced ? *forced : infer_language(tokens, languages);
      std::vector<std::int32_t> ids{vocab.language_token(source)};
      for (const auto& t : tokens) ids.push_back(vocab.id(t));
      const auto hyp = eval::translate(model, ids, vocab.language_token(target), corpus::Vocabulary::kEos, a.decode);
      text += corpus::join_tokens(corpus::surface_tokens(hyp, vocab)) + "\n";
    }
    write_text(a.out, text);
    manifest.input(a.input);
    manifest.output(a.out);
    manifest.write(a.out + ".manifest.json");
    return kOk;
  }

  const auto c = corpus::load_corpus(a.corpus);
  if (c.languages.size() != languages.size() || c.vocabulary().size() != vocab.size()) {
    throw corpus::DataError("corpus does not match the checkpoint's vocabulary");
  }
  const auto hyps = eval::translate_split(model, c, a.decode, a.split);
  fs::create_directories(a.out);
  for (const auto& [dir, sentences] : hyps) {
    std::string text;
    for (const auto& s : sentences) text += corpus::join_tokens(s) + "\n";
    write_text(fs::path(a.out) / (corpus::direction_name(dir, c.languages) + ".hyp"), text);
  }
  manifest.input(fs::path(a.corpus) / "manifest.json");
  manifest.output(a.out);
  manifest.write(fs::path(a.out) / "run_manifest.json");
  return kOk;
}

// ---- evaluate -------------------------------------------------------------------

struct EvaluateArgs {
  std::string corpus;
  std::string hyp;
  std::string split = "test";
  std::string out;
  std::string in_target_with;
};

eval::DirectionOutputs read_hypotheses(const fs::path& dir, const corpus::Corpus& c, const eval::DirectionOutputs& refs) {
  eval::DirectionOutputs out;
  for (const auto& [d, r] : refs) {
    const auto path = dir / (corpus::direction_name(d, c.languages) + ".hyp");
    auto& hyps = out[d];
    for (const auto& line : corpus::read_lines(path)) hyps.push_back(corpus::split_tokens(line));
    if (hyps.size() != r.size()) {
      throw corpus::DataError(fmt::format("{}: {} lines for {} references", path.string(), hyps.size(), r.size()));
    }
  }
  return out;
}

int cmd_evaluate(const EvaluateArgs& a, RunManifest& manifest) {
  const auto c = corpus::load_corpus(a.corpus);
  const auto refs = eval::test_references(c, a.split);
  const auto hyps = read_hypotheses(a.hyp, c, refs);
  std::optional<eval::DirectionOutputs> other;
  if (!a.in_target_with.empty()) other = read_hypotheses(a.in_target_with, c, refs);
  const auto report = eval::evaluate(c, hyps, refs, other ? &*other : nullptr);
  write_text(a.out, report.to_json());
  manifest.input(fs::path(a.corpus) / "manifest.json");
  manifest.input(a.hyp);
  if (other) manifest.input(a.in_target_with);
  manifest.output(a.out);
  manifest.write(a.out + ".manifest.json");
  fmt::print("supervised BLEU {:.2f} (off-target {:.3f}); zero-shot BLEU {:.2f} (off-target {:.3f})\n",
             report.supervised_bleu, report.supervised_off_target, report.zero_shot_bleu, report.zero_shot_off_target);
  return kOk;
}

// ---- analyze --------------------------------------------------------------------

struct AnalyzeArgs {
  std::string checkpoint;
  std::string sentences;
  std::string taps;
  std::string out;
};

int cmd_analyze(const AnalyzeArgs& a, RunManifest& manifest) {
  std::vector<eval::Tap> taps;
  try {
    if (!a.taps.empty()) taps = eval::parse_taps(a.taps);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  auto loaded = load_model(a.checkpoint);
  const auto& model = *loaded.model;
  if (taps.empty()) {
    for (const auto& name : eval::tap_names()) {
      const auto tap = eval::tap_from_string(name);
      const bool dis = tap == eval::Tap::semantic_ffn || tap == eval::Tap::language_ffn;
      const bool ling = tap == eval::Tap::linguistic_encoder || tap == eval::Tap::fusion_layer;
      if ((dis && !model.disentangler()) || (ling && !model.linguistic_encoder())) continue;
      taps.push_back(tap);
    }
  }
  std::vector<eval::TapVectors> vectors;
  const auto sentences = eval::read_labeled_sentences(a.sentences, loaded.corpus);
  try {
    vectors = eval::extract_representations(model, sentences, taps);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const fs::path out(a.out);
  write_text(out / "representations.tsv",
             eval::export_text(model.config().digest(), sentences, vectors, loaded.corpus.languages));
  write_text(out / "summary.json", eval::summary_json(eval::summarize(sentences, vectors)));
  manifest.set_config_digest(model.config().digest());
  manifest.input(a.checkpoint);
  manifest.input(a.sentences);
  manifest.output(out / "representations.tsv");
  manifest.output(out / "summary.json");
  manifest.write(out / "run_manifest.json");
  return kOk;
}

}  // namespace

std::string file_digest(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  return hex(fnv1a64(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size())));
}

int run(int argc, char** argv) {
  CLI::App app{"Zero-shot multilingual translation with disentangled representations"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic multilingual corpus");
  gen_cmd->add_option("--languages", gen.options.n_languages, "Number of languages (>= 3)")->capture_default_str();
  gen_cmd->add_option("--center", gen.center, "Center language paired with every other one")->capture_default_str();
  gen_cmd->add_option("--pairs", gen.options.pairs_per_direction, "Training pairs per supervised direction")
      ->capture_default_str();
  gen_cmd->add_option("--valid", gen.options.valid_size, "Validation sentences per supervised direction")
      ->capture_default_str();
  gen_cmd->add_option("--test", gen.options.test_size, "Multiway test sentences (all directions)")
      ->capture_default_str();
  gen_cmd->add_option("--min-len", gen.options.min_len, "Minimum sentence length")->capture_default_str();
  gen_cmd->add_option("--max-len", gen.options.max_len, "Maximum sentence length")->capture_default_str();
  gen_cmd->add_option("--semantic-vocab", gen.options.semantic_vocab, "Shared semantic vocabulary size")
      ->capture_default_str();
  gen_cmd->add_option("--seed", gen.options.seed, "Random seed")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();

  TrainArgs tr;
  const ModelConfig md;
  const train::TrainRunConfig td;
  auto* train_cmd = app.add_subcommand("train", "Train a model (all components on by default)");
  train_cmd->add_option("--corpus", tr.corpus, "Corpus directory from gen-data")->required();
  train_cmd->add_option("--out", tr.out, "Run directory for checkpoints and logs")->required();
  train_cmd->add_option("--config", tr.config, "key=value config file (flags override it)");
  train_cmd->add_option("--set", tr.sets, "Extra key=value override (repeatable)");
  train_cmd->add_option("--resume", tr.resume, "Continue from a checkpoint of the same run");
  train_cmd->add_flag("--no-disentangler", tr.no_disentangler, "Switch off the disentangler");
  train_cmd->add_flag("--no-det-loss", tr.no_det_loss, "Switch off the disentangling losses");
  train_cmd->add_flag("--no-ling-encoder", tr.no_ling_encoder, "Switch off the linguistic encoder and fusion layer");
  auto flag = [&](const char* name, const char* key, std::string help) {
    train_cmd->add_option(name, tr.flags[key], std::move(help));
  };
  flag("--seed", "seed", fmt::format("Seed for every random stream [default: {}]", td.seed));
  flag("--steps", "total_steps", fmt::format("Total optimizer steps [default: {}]", td.total_steps));
  flag("--lr", "peak_lr", fmt::format("Peak learning rate [default: {}, the reference recipe]", td.peak_lr));
  flag("--warmup", "warmup", fmt::format("Warmup steps [default: {}; reference recipe 4000]", td.warmup));
  flag("--max-tokens", "max_tokens", fmt::format("Real tokens per batch [default: {}]", td.max_tokens));
  flag("--checkpoint-interval", "checkpoint_interval",
       fmt::format("Steps between checkpoints [default: {}]", td.checkpoint_interval));
  flag("--clip-norm", "clip_norm", "Global gradient-norm clip, 0 = off [default: 0]");
  flag("--keep-last", "keep_last", fmt::format("Checkpoints considered for selection [default: {}]", td.keep_last));
  flag("--select-top", "select_top", fmt::format("Checkpoints selected [default: {}]", td.select_top));
  flag("--select-metric", "select_metric", "valid_ce or valid_bleu [default: valid_ce]");
  flag("--dropout", "dropout_p", fmt::format("Dropout rate [default: {}; reference recipe 0.3 or 0.1]", md.dropout_p));
  flag("--label-smoothing", "label_smoothing",
       fmt::format("Label smoothing [default: {}, the reference recipe]", md.label_smoothing));
  flag("--lambda", "lambda", fmt::format("Weight of the disentangling loss [default: {}, the reference recipe]", md.lambda));
  flag("--lambda1", "lambda1", fmt::format("Weight of the reconstruction term [default: {}, the reference recipe]", md.lambda1));
  flag("--lambda2", "lambda2", fmt::format("Weight of the negative pairs [default: {}, the reference recipe]", md.lambda2));
  flag("--d-model", "d_model", fmt::format("Model width [default: {}; base Transformer 512]", md.d_model));
  flag("--heads", "n_heads", fmt::format("Attention heads [default: {}; base Transformer 8]", md.n_heads));
  flag("--ffn", "ffn_dim", fmt::format("Feed-forward width [default: {}; base Transformer 2048]", md.ffn_dim));
  flag("--enc-layers", "n_enc_layers", fmt::format("Encoder layers [default: {}; base Transformer 6]", md.n_enc_layers));
  flag("--dec-layers", "n_dec_layers", fmt::format("Decoder layers [default: {}; base Transformer 6]", md.n_dec_layers));
  flag("--ling-layers", "n_ling_layers",
       fmt::format("Linguistic encoder layers [default: {}, the reference recipe]", md.n_ling_layers));
  flag("--max-len", "max_len", fmt::format("Maximum sequence length [default: {}]", md.max_len));

  TranslateArgs tl;
  auto* tl_cmd = app.add_subcommand("translate", "Translate a file or a whole corpus split");
  tl_cmd->add_option("--checkpoint", tl.checkpoint, "Model checkpoint")->required();
  tl_cmd->add_option("--input", tl.input, "Source file, one sentence per line");
  tl_cmd->add_option("--corpus", tl.corpus, "Translate every direction of a corpus split instead");
  tl_cmd->add_option("--split", tl.split, "Split for --corpus")->capture_default_str();
  tl_cmd->add_option("--tgt-lang", tl.tgt_lang, "Target language (required with --input)");
  tl_cmd->add_option("--src-lang", tl.src_lang, "Source language (inferred from the tokens when omitted)");
  tl_cmd->add_option("--out", tl.out, "Output file (--input) or directory (--corpus)")->required();
  tl_cmd->add_option("--beam", tl.decode.beam, "Beam size (reference recipe: 5)")->capture_default_str();
  tl_cmd->add_option("--lenpen", tl.decode.length_penalty, "Length penalty (reference recipe: 1)")->capture_default_str();
  tl_cmd->add_option("--max-len", tl.decode.max_len, "Maximum output length, 0 = 2 * source + 10")
      ->capture_default_str();

  EvaluateArgs ev;
  auto* ev_cmd = app.add_subcommand("evaluate", "Score hypotheses: BLEU and off-target rate per direction");
  ev_cmd->add_option("--corpus", ev.corpus, "Corpus directory with references")->required();
  ev_cmd->add_option("--hyp", ev.hyp, "Directory of <src>-<tgt>.hyp files")->required();
  ev_cmd->add_option("--split", ev.split, "Reference split")->capture_default_str();
  ev_cmd->add_option("--out", ev.out, "Report file (JSON)")->required();
  ev_cmd->add_option("--in-target-with", ev.in_target_with,
                     "Second system's hypothesis directory: also score both on their common in-target subset");

  AnalyzeArgs an;
  auto* an_cmd = app.add_subcommand("analyze", "Export pooled representations and similarity statistics");
  an_cmd->add_option("--checkpoint", an.checkpoint, "Model checkpoint")->required();
  an_cmd->add_option("--sentences", an.sentences, "id<TAB>language<TAB>tokens file (analysis.tsv of a corpus)")
      ->required();
  std::string tap_help = "Comma-separated taps (default: all available):";
  for (const auto& n : eval::tap_names()) tap_help += " " + n;
  an_cmd->add_option("--taps", an.taps, tap_help);
  an_cmd->add_option("--out", an.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen_cmd) {
      RunManifest m("gen-data", argc, argv);
      return cmd_gen_data(gen, m);
    }
    if (*train_cmd) {
      RunManifest m("train", argc, argv);
      return cmd_train(tr, m);
    }
    if (*tl_cmd) {
      RunManifest m("translate", argc, argv);
      return cmd_translate(tl, m);
    }
    if (*ev_cmd) {
      RunManifest m("evaluate", argc, argv);
      return cmd_evaluate(ev, m);
    }
    if (*an_cmd) {
      RunManifest m("analyze", argc, argv);
      return cmd_analyze(an, m);
    }
  } catch (const UsageError& e) {
    fmt::print(stderr, "error: {}\n\n{}", e.what(), app.get_subcommands().front()->help());
    return kUsage;
  } catch (const ConfigError& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kUsage;
  } catch (const train::NumericalError& e) {
    fmt::print(stderr, "numerical abort: {}\n", e.what());
    return kNumerical;
  } catch (const std::invalid_argument& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    fmt::print(stderr, "data error: {}\n", e.what());
    return kData;
  }
  return kUsage;
}

}  // namespace slmt::cli
