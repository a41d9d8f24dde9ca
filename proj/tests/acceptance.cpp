#include <sys/wait.h>

#include <CLI11.hpp>
#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <json.hpp>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include <fmt/core.h>
#include <spdlog/spdlog.h>

#include "slmt/autodiff.hpp"
#include "slmt/decoding.hpp"
#include "slmt/evaluation.hpp"
#include "slmt/metrics.hpp"
#include "slmt/objectives.hpp"
#include "slmt/training.hpp"
#include "support.hpp"

using namespace slmt;
namespace fs = std::filesystem;
using T64 = ad::Tensor<double>;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

T64 leaf(ad::Shape shape, std::uint64_t seed) {
  const auto n = ad::numel(shape);
  return T64::from_data(std::move(shape), random_values(n, seed), true);
}

T64 constant(ad::Shape shape, std::uint64_t seed) {
  const auto n = ad::numel(shape);
  return T64::from_data(std::move(shape), random_values(n, seed));
}

// Random batch masks with at least one real position per row.
TokenMatrix random_mask(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::int32_t>> seqs;
  for (std::size_t r = 0; r < rows; ++r) seqs.emplace_back(1 + rng() % cols, 5);
  seqs[0].resize(cols, 5);
  return TokenMatrix::from_rows(seqs, 0);
}

std::vector<objectives::PairSample> random_samples(std::size_t sentences, std::size_t count, std::uint64_t seed,
                                                   objectives::PairKind kind) {
  std::mt19937_64 rng(seed);
  std::vector<objectives::PairSample> out;
  while (out.size() < count) {
    objectives::PairSample s{rng() % sentences, rng() % sentences, rng() % sentences, kind};
    if (s.anchor != s.positive && s.anchor != s.negative) out.push_back(s);
  }
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Every regular file under root; run manifests are compared without their two wall-clock fields.
std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), root).string();
    auto text = slurp(e.path());
    if (e.path().filename() == "run_manifest.json") {
      auto j = nlohmann::ordered_json::parse(text);
      j.erase("started_at");
      j.erase("finished_at");
      text = j.dump();
    }
    out[rel] = text;
  }
  return out;
}

int slmt_cli(const std::string& args) {
  const std::string cmd = std::string(SLMT_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// ---- 1 -------------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  std::map<std::string, std::pair<int, double>> tally;  // passed instances, worst error
  auto record = [&](const std::string& eq, bool passed, double err) {
    auto& [n, worst] = tally[eq];
    n += passed ? 1 : 0;
    worst = std::max(worst, err);
  };
  ad::GradCheckOptions opt;  // tol 1e-4

  for (std::uint64_t seed : {1, 2, 3}) {
    // Cross-entropy on its logits, and through the whole plain model.
    const auto gold = TokenMatrix::from_rows({{3, 4, 1}, {2, 1}}, 0);
    auto logits = leaf({2, 3, 7}, seed);
    for (double eps : {0.0, 0.1}) {
      auto r = ad::grad_check([&](const T64& x) { return objectives::cross_entropy(x, gold, eps); }, logits, opt);
      record("cross-entropy", r.passed, r.max_rel_error);
    }
    TranslationModel<double> model(testing::tiny_config(13, false, false, false), seed);
    const auto src = TokenMatrix::from_rows({{2, 5, 6, 7}, {3, 9, 10}}, 0);
    const auto dec = TokenMatrix::from_rows({{4, 8, 9, 11}, {4, 12, 5}}, 0);
    const auto g = TokenMatrix::from_rows({{8, 9, 11, 1}, {12, 5, 1}}, 0);
    auto ce = [&] { return objectives::cross_entropy(model.forward(src, dec, {}).logits, g, 0.1); };
    const auto fd = testing::fd_check_parameters(model.params(), ce, 2, seed);
    record("cross-entropy", fd.max_rel_error <= 1e-4, fd.max_rel_error);

    auto sem = leaf({6, 8}, seed + 10);
    const auto ss = random_samples(6, 6, seed + 20, objectives::PairKind::semantic);
    auto r3 = ad::grad_check([&](const T64& x) { return objectives::semantic_loss(x, ss, 0.2); }, sem, opt);
    record("semantic", r3.passed, r3.max_rel_error);

    auto lang = leaf({6, 8}, seed + 30);
    const auto ls = random_samples(6, 6, seed + 40, objectives::PairKind::language);
    auto r4 = ad::grad_check([&](const T64& x) { return objectives::language_loss(x, ls, 0.2); }, lang, opt);
    record("language", r4.passed, r4.max_rel_error);

    const auto mask = random_mask(2, 5, seed);
    auto h = leaf({2, 5, 8}, seed + 50), hs = leaf({2, 5, 8}, seed + 51), hl = leaf({2, 5, 8}, seed + 52);
    const auto hc = constant({2, 5, 8}, seed + 50), hsc = constant({2, 5, 8}, seed + 51),
               hlc = constant({2, 5, 8}, seed + 52);
    const std::array<ad::GradCheckReport, 3> recon{
        ad::grad_check([&](const T64& x) { return objectives::reconstruction_loss(x, hsc, hlc, mask); }, h, opt),
        ad::grad_check([&](const T64& x) { return objectives::reconstruction_loss(hc, x, hlc, mask); }, hs, opt),
        ad::grad_check([&](const T64& x) { return objectives::reconstruction_loss(hc, hsc, x, mask); }, hl, opt)};
    for (const auto& r : recon) record("reconstruction", r.passed, r.max_rel_error);

    // Joint loss composed from free inputs: every input gets checked.
    const double lambda = 0.05, lambda1 = 0.2, d_avg = objectives::average_length(mask);
    const auto lc = constant({2, 3, 7}, seed);
    const auto semc = constant({6, 8}, seed + 10), langc = constant({6, 8}, seed + 30);
    auto joint = [&](const T64& lg, const T64& s, const T64& l, const T64& hh, const T64& a, const T64& b) {
      auto det = ad::add(ad::add(objectives::semantic_loss(s, ss, 0.2), objectives::language_loss(l, ls, 0.2)),
                         ad::scale(objectives::reconstruction_loss(hh, a, b, mask), lambda1));
      return ad::add(objectives::cross_entropy(lg, gold, 0.1), ad::scale(det, lambda * d_avg));
    };
    std::vector<ad::GradCheckReport> parts;
    parts.push_back(ad::grad_check([&](const T64& x) { return joint(x, semc, langc, hc, hsc, hlc); }, logits, opt));
    parts.push_back(ad::grad_check([&](const T64& x) { return joint(lc, x, langc, hc, hsc, hlc); }, sem, opt));
    parts.push_back(ad::grad_check([&](const T64& x) { return joint(lc, semc, x, hc, hsc, hlc); }, lang, opt));
    parts.push_back(ad::grad_check([&](const T64& x) { return joint(lc, semc, langc, x, hsc, hlc); }, h, opt));
    parts.push_back(ad::grad_check([&](const T64& x) { return joint(lc, semc, langc, hc, x, hlc); }, hs, opt));
    parts.push_back(ad::grad_check([&](const T64& x) { return joint(lc, semc, langc, hc, hsc, x); }, hl, opt));
    bool all = true;
    double worst = 0;
    for (const auto& p : parts) {
      all = all && p.passed;
      worst = std::max(worst, p.max_rel_error);
    }
    record("joint (free inputs)", all, worst);
  }

  // Joint loss through the full model's parameters. The reconstruction target h
  // is a stop-gradient, so the numeric side removes the h-only movement of that term.
  auto copts = testing::small_corpus_options(3);
  const auto c = corpus::generate_corpus(copts);
  const auto examples = c.training_examples();
  const auto batches = corpus::make_batches(examples, 120, 1, 0);
  for (std::uint64_t seed : {1, 2, 3}) {
    TranslationModel<double> model(testing::tiny_config(c.vocabulary().size(), true, true, true), seed);
    const auto& batch = batches[seed % batches.size()];
    auto loss = [&] { return train::compute_losses(model, batch, RngStreams(seed), 1, false).joint; };
    const auto base = model.forward(batch.source, batch.decoder_input, ForwardContexts::eval());
    const auto sem0 = base.source.disentangled->semantic.detach();
    const auto lang0 = base.source.disentangled->language.detach();
    const auto& cfg = model.config();
    const double weight = cfg.lambda * cfg.lambda1 * objectives::average_length(batch.source);
    auto value = [&] {
      const auto h = model.forward(batch.source, batch.decoder_input, ForwardContexts::eval()).source.encoder.states;
      return loss().item() - weight * objectives::reconstruction_loss(h, sem0, lang0, batch.source).item();
    };
    const auto fd = testing::fd_check_parameters(model.params(), loss, 2, seed, 1e-5, value);
    record("joint (model)", fd.max_rel_error <= 1e-4, fd.max_rel_error);
  }

  const double elapsed = seconds_since(t0);
  bool pass = elapsed < 120.0;
  std::string detail;
  for (const auto& [eq, v] : tally) {
    const auto& [n, worst] = v;
    pass = pass && n >= 3 && worst <= 1e-4;
    detail += fmt::format("{}: {} ok, max rel {:.1e}; ", eq, n, worst);
  }
  detail += fmt::format("{:.1f}s", elapsed);
  return {pass, detail};
}

// ---- 2 -------------------------------------------------------------------------

double fsum_oracle(double a, double b, double c) {
  const __float128 s = static_cast<__float128>(a) + static_cast<__float128>(b) + static_cast<__float128>(c);
  return static_cast<double>(s);
}

Outcome loss_identities(const fs::path& work) {
  const auto dir = work / "c2";
  fs::remove_all(dir);
  const auto corpus_dir = (dir / "corpus").string();
  if (slmt_cli("gen-data --languages 4 --pairs 300 --valid 20 --test 20 --seed 5 --out " + corpus_dir) != 0) {
    return {false, "gen-data failed"};
  }
  const auto run = (dir / "run").string();
  if (slmt_cli("train --corpus " + corpus_dir + " --out " + run +
               " --steps 500 --warmup 100 --lr 2e-3 --d-model 32 --heads 4 --ffn 64 --enc-layers 1 --dec-layers 1"
               " --ling-layers 1 --max-tokens 400 --checkpoint-interval 500 --keep-last 1 --select-top 1") != 0) {
    return {false, "train failed"};
  }
  const double lambda = 0.05, lambda1 = 0.2;  // defaults used by the run
  std::size_t steps = 0, bad_det = 0, bad_joint = 0;
  for (const auto& line : corpus::read_lines(fs::path(run) / "train.log.jsonl")) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    const double ce = j.at("l_ce"), sem = j.at("l_sem"), lang = j.at("l_lang"), rec = j.at("l_recons");
    const double det = j.at("l_det"), joint = j.at("l_joint"), d_avg = j.at("d_avg");
    ++steps;
    if (det != fsum_oracle(sem, lang, lambda1 * rec)) ++bad_det;
    if (joint != ce + lambda * d_avg * det) ++bad_joint;
  }
  const auto b = objectives::joint_loss(1.0, 0.3, 0.4, 0.5, 10.0, {0.05, 0.2, true});
  const bool example = b.l_det == 0.8;
  const bool pass = steps == 500 && bad_det == 0 && bad_joint == 0 && example;
  return {pass, fmt::format("{} logged steps, {} l_det and {} l_joint mismatches; (0.3, 0.4, 0.5) gives l_det {:.17g}",
                            steps, bad_det, bad_joint, b.l_det)};
}

// ---- 3 -------------------------------------------------------------------------

Outcome reconstruction_identity() {
  double worst = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto mask = random_mask(3, 6, seed);
    const auto h = constant({3, 6, 16}, seed);
    const auto sem = constant({3, 6, 16}, seed + 100);
    const auto lang = ad::sub(h, sem);
    worst = std::max(worst, objectives::reconstruction_loss(h, sem, lang, mask).item());
  }
  return {worst <= 1e-12, fmt::format("max l_recons {:.2e} over 10 constructed batches", worst)};
}

// ---- 4 -------------------------------------------------------------------------

// A plain Transformer trained with cross-entropy and Adam, built from the core
// modules only, against the translation model with every component off.
Outcome baseline_equivalence() {
  auto copts = testing::small_corpus_options(11);
  copts.pairs_per_direction = 60;
  const auto c = corpus::generate_corpus(copts);
  const auto vocab = c.vocabulary();
  ModelConfig cfg;
  cfg.vocab_size = vocab.size();
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.ffn_dim = 32;
  cfg.n_enc_layers = 2;
  cfg.n_dec_layers = 2;
  cfg.max_len = 32;
  cfg.dropout_p = 0.1;
  cfg.use_disentangler = cfg.use_det_loss = cfg.use_ling_encoder = false;
  train::TrainRunConfig tc;
  tc.seed = 9;
  tc.total_steps = 60;
  tc.warmup = 10;
  tc.peak_lr = 2e-3;
  tc.max_tokens = 200;
  const auto examples = c.training_examples();

  TranslationModel<float> model(cfg, tc.seed);
  train::Trainer<float> trainer(model, tc, examples);
  for (std::uint64_t s = 0; s < tc.total_steps; ++s) trainer.step();

  ParameterSet<float> ref_params;
  const RngStreams streams(tc.seed);
  auto init = streams.stream("init.transformer");
  Transformer<float> ref(cfg, ref_params, init);
  train::Adam<float> ref_adam(ref_params, tc.adam);
  std::uint64_t epoch = 0;
  auto batches = corpus::make_batches(examples, tc.max_tokens, tc.seed, epoch);
  std::size_t cursor = 0;
  for (std::uint64_t step = 1; step <= tc.total_steps; ++step) {
    if (cursor == batches.size()) {
      batches = corpus::make_batches(examples, tc.max_tokens, tc.seed, ++epoch);
      cursor = 0;
    }
    const auto& batch = batches[cursor++];
    auto enc_rng = streams.stream("dropout.encoder", step);
    auto dec_rng = streams.stream("dropout.decoder", step);
    auto enc = ref.encode(batch.source, nn::RunContext{true, cfg.dropout_p, &enc_rng});
    auto states = ref.decode_teacher_forced(enc.states, enc.mask, batch.decoder_input,
                                            nn::RunContext{true, cfg.dropout_p, &dec_rng});
    auto loss = objectives::cross_entropy(ref.output_logits(states), batch.gold, cfg.label_smoothing);
    ref_params.zero_grad();
    ad::backward(loss);
    ref_adam.step(train::lr_at(step, tc.peak_lr, tc.warmup));
  }

  Checkpoint ref_ckpt;
  train::save_parameters(ref_params, ref_ckpt);
  ref_adam.save(ref_ckpt);
  const auto ckpt = train::make_checkpoint(model, &trainer.optimizer(), "", "");
  std::size_t compared = 0, differing = 0;
  std::set<std::string> names;
  for (const auto& e : ckpt.entries) {
    if (e.name.rfind("meta.", 0) == 0) continue;
    names.insert(e.name);
    const auto* r = ref_ckpt.find(e.name);
    ++compared;
    if (!r || r->shape != e.shape || r->bytes != e.bytes) ++differing;
  }
  const bool same_entries = names.size() == ref_ckpt.entries.size();

  // Greedy translations from the reference modules against the model's decoder.
  std::size_t sentences = 0, translation_diffs = 0;
  ad::NoGradGuard no_grad;
  for (const auto& [dir, ex] : c.splits.at("test")) {
    const auto tag = vocab.language_token(dir.target);
    for (const auto& e : ex) {
      const auto src = TokenMatrix::from_rows({e.source}, 0);
      auto enc = ref.encode(src, {});
      auto cache = ref.start_cache(enc.states);
      eval::DecodeConfig dc;
      dc.beam = 1;
      const auto limit = eval::resolve_max_len(dc, e.source.size(), cfg.max_len);
      std::vector<std::int32_t> out;
      std::int32_t next = tag;
      for (std::size_t pos = 0; pos < limit; ++pos) {
        const std::vector<std::int32_t> ids{next};
        auto emb = ref.embed_step(ids, pos, {});
        auto logits = ref.output_logits(ref.decode_step(cache, emb, enc.states, enc.mask, {}));
        const auto& d = logits.data();
        next = static_cast<std::int32_t>(std::max_element(d.begin(), d.end()) - d.begin());
        if (next == corpus::Vocabulary::kEos || pos + 1 == limit) break;
        out.push_back(next);
      }
      ++sentences;
      if (eval::translate(model, e.source, tag, corpus::Vocabulary::kEos, dc) != out) ++translation_diffs;
    }
  }
  const bool pass = differing == 0 && same_entries && compared > 0 && translation_diffs == 0;
  return {pass, fmt::format("{} checkpoint entries after {} steps, {} differ; {} greedy translations, {} differ",
                            compared, tc.total_steps, differing + (same_entries ? 0 : 1), sentences,
                            translation_diffs)};
}

// ---- 5 and 6 -------------------------------------------------------------------

struct Variant {
  std::string name;
  bool dis, det, ling;
};

struct DeskSettings {
  std::uint64_t steps = 5000;
  double lr = 2e-3;
  std::uint64_t warmup = 1000;
  double dropout = 0.0;
  std::size_t max_tokens = 1024;
  std::uint64_t checkpoint_interval = 500;
  std::uint64_t seed = 1;
};

// Test scores averaged over the selected checkpoints.
struct Scores {
  double supervised_bleu = 0;
  double zero_shot_bleu = 0;
  double zero_shot_off_target = 0;
};

struct VariantResult {
  Scores report;
  std::string steps;
  double seconds = 0;
};

eval::EvalReport evaluate_greedy(const corpus::Corpus& c, const TranslationModel<float>& model) {
  eval::DecodeConfig dc;
  dc.beam = 1;
  const auto vocab = c.vocabulary();
  eval::DirectionOutputs hyps;
  for (const auto& [dir, ex] : c.splits.at("test")) {
    std::vector<std::vector<std::int32_t>> sources;
    for (const auto& e : ex) sources.push_back(e.source);
    for (const auto& out : eval::translate_greedy_batch(model, sources, vocab.language_token(dir.target),
                                                        corpus::Vocabulary::kEos, dc)) {
      hyps[dir].push_back(corpus::surface_tokens(out, vocab));
    }
  }
  return eval::evaluate(c, hyps, eval::test_references(c));
}

std::vector<corpus::Batch> validation_batches(const corpus::Corpus& c) {
  std::vector<corpus::Batch> out;
  for (const auto& [dir, ex] : c.splits.at("valid")) {
    for (std::size_t i = 0; i < ex.size(); i += 64) {
      const auto end = std::min(ex.size(), i + 64);
      out.push_back(corpus::make_batch({ex.begin() + static_cast<std::ptrdiff_t>(i),
                                        ex.begin() + static_cast<std::ptrdiff_t>(end)}));
    }
  }
  return out;
}

// Trains one variant, keeps the best three of the last six checkpoints by
// validation cross-entropy and averages their test scores.
VariantResult train_and_evaluate(const corpus::Corpus& c, const Variant& v, const DeskSettings& s,
                                 std::unique_ptr<TranslationModel<float>>* keep) {
  const auto t0 = Clock::now();
  ModelConfig cfg;
  cfg.vocab_size = c.vocabulary().size();
  cfg.dropout_p = s.dropout;
  cfg.use_disentangler = v.dis;
  cfg.use_det_loss = v.det;
  cfg.use_ling_encoder = v.ling;
  auto model = std::make_unique<TranslationModel<float>>(cfg, s.seed);
  train::TrainRunConfig tc;
  tc.seed = s.seed;
  tc.total_steps = s.steps;
  tc.peak_lr = s.lr;
  tc.warmup = s.warmup;
  tc.max_tokens = s.max_tokens;
  train::Trainer<float> trainer(*model, tc, c.training_examples());
  const auto valid = validation_batches(c);
  std::map<std::uint64_t, Checkpoint> saved;
  std::vector<train::CheckpointScore> scores;
  for (std::uint64_t i = 1; i <= s.steps; ++i) {
    const auto r = trainer.step();
    if (i % s.checkpoint_interval != 0) continue;
    const double ce = train::validation_ce(*model, valid);
    spdlog::info("{} step {} l_ce {:.3f} l_det {:.3f} valid_ce {:.4f}", v.name, i, r.losses.l_ce, r.losses.l_det, ce);
    scores.push_back({i, ce});
    train::save_parameters(model->params(), saved[i]);
    if (saved.size() > tc.keep_last) saved.erase(saved.begin());
  }
  const auto selection = train::checkpoint_select(scores, tc.keep_last, tc.select_top, false);

  VariantResult out;
  for (const auto& pick : selection.selected) {
    train::load_parameters(model->params(), saved.at(pick.step));
    const auto rep = evaluate_greedy(c, *model);
    spdlog::info("{} step {}: supervised {:.2f}, zero-shot {:.2f}, zero-shot off-target {:.3f}", v.name, pick.step,
                 rep.supervised_bleu, rep.zero_shot_bleu, rep.zero_shot_off_target);
    out.report.supervised_bleu += rep.supervised_bleu;
    out.report.zero_shot_bleu += rep.zero_shot_bleu;
    out.report.zero_shot_off_target += rep.zero_shot_off_target;
    out.steps += (out.steps.empty() ? "" : ",") + std::to_string(pick.step);
  }
  const auto n = static_cast<double>(selection.selected.size());
  out.report.supervised_bleu /= n;
  out.report.zero_shot_bleu /= n;
  out.report.zero_shot_off_target /= n;
  // The best checkpoint stays loaded for the representation analysis.
  train::load_parameters(model->params(), saved.at(selection.selected.front().step));
  out.seconds = seconds_since(t0);
  spdlog::info("{} (steps {}): supervised {:.2f}, zero-shot {:.2f}, zero-shot off-target {:.3f} ({:.0f}s)", v.name,
               out.steps, out.report.supervised_bleu, out.report.zero_shot_bleu, out.report.zero_shot_off_target,
               out.seconds);
  if (keep) *keep = std::move(model);
  return out;
}

Outcome desk_reproduction(const corpus::Corpus& c, const DeskSettings& s,
                          std::unique_ptr<TranslationModel<float>>& full_model) {
  const auto t0 = Clock::now();
  const auto base = train_and_evaluate(c, {"baseline", false, false, false}, s, nullptr);
  const auto row3 = train_and_evaluate(c, {"disentangler+objective", true, true, false}, s, nullptr);
  const auto row4 = train_and_evaluate(c, {"linguistic encoder", false, false, true}, s, nullptr);
  const auto full = train_and_evaluate(c, {"full", true, true, true}, s, &full_model);
  const double elapsed = seconds_since(t0);

  const auto& F = full.report;
  const auto& B = base.report;
  const bool a = F.zero_shot_bleu >= B.zero_shot_bleu + 5.0;
  const bool b = F.zero_shot_off_target <= B.zero_shot_off_target;
  const bool cc = F.supervised_bleu >= B.supervised_bleu - 1.0;
  const double best_ablation = std::max(row3.report.zero_shot_bleu, row4.report.zero_shot_bleu);
  const bool d = F.zero_shot_bleu >= best_ablation - 0.5;
  const bool in_time = elapsed <= 1800.0;
  auto mark = [](bool ok) { return ok ? "ok" : "FAIL"; };
  return {a && b && cc && d && in_time,
          fmt::format("(a) zero-shot {:.2f} vs baseline {:.2f} {}; (b) off-target {:.3f} vs {:.3f} {}; "
                      "(c) supervised {:.2f} vs {:.2f} {}; (d) vs max({:.2f}, {:.2f}) {}; {} steps each, {:.0f}s {}",
                      F.zero_shot_bleu, B.zero_shot_bleu, mark(a), F.zero_shot_off_target, B.zero_shot_off_target,
                      mark(b), F.supervised_bleu, B.supervised_bleu, mark(cc), row3.report.zero_shot_bleu,
                      row4.report.zero_shot_bleu, mark(d), s.steps, elapsed, mark(in_time))};
}

Outcome representation_properties(const corpus::Corpus& c, const TranslationModel<float>& model) {
  const auto vocab = c.vocabulary();
  std::vector<eval::LabeledSentence> sentences;
  for (std::size_t id = 0; id < c.test_pool.size(); ++id) {
    for (const auto& l : c.languages) {
      eval::LabeledSentence s;
      s.id = id;
      s.language = l.id;
      s.ids.push_back(vocab.language_token(l.id));
      for (const auto& t : l.realize(c.test_pool[id])) s.ids.push_back(vocab.id(t));
      sentences.push_back(std::move(s));
    }
  }
  const auto taps = eval::extract_representations(
      model, sentences, {eval::Tap::semantic_ffn, eval::Tap::language_ffn, eval::Tap::linguistic_encoder});
  const auto sum = eval::summarize(sentences, taps);
  const double sem_gap = *sum[0].parallel_pair - *sum[0].random_pair;
  const double lang_gap = sum[1].within_language - sum[1].between_language;
  const double ling_gap = sum[2].within_language - sum[2].between_language;
  const bool pass = sem_gap >= 0.1 && lang_gap >= 0.05 && ling_gap >= 0.05;
  return {pass, fmt::format("semantic-ffn parallel {:.3f} vs random {:.3f} (gap {:.3f}); language-ffn within-between "
                            "gap {:.3f}; linguistic-encoder gap {:.3f}; {} sentences",
                            *sum[0].parallel_pair, *sum[0].random_pair, sem_gap, lang_gap, ling_gap,
                            sentences.size())};
}

// ---- 7 -------------------------------------------------------------------------

using Prefix = std::vector<std::int32_t>;
using ProbFn = std::function<std::vector<double>(const Prefix&)>;

class TableScorer final : public eval::StepScorer {
 public:
  TableScorer(std::size_t vocab, ProbFn probs) : vocab_(vocab), probs_(std::move(probs)), rows_(1) {}
  std::size_t vocab_size() const override { return vocab_; }
  std::vector<double> advance(std::span<const std::int32_t> tokens) override {
    std::vector<double> out;
    for (std::size_t r = 0; r < tokens.size(); ++r) {
      rows_[r].push_back(tokens[r]);
      for (double p : probs_(rows_[r])) out.push_back(std::log(p));
    }
    return out;
  }
  void reorder(std::span<const std::size_t> rows) override {
    std::vector<Prefix> next;
    for (auto r : rows) next.push_back(rows_[r]);
    rows_ = std::move(next);
  }

 private:
  std::size_t vocab_;
  ProbFn probs_;
  std::vector<Prefix> rows_;
};

std::pair<Prefix, double> exhaustive(std::size_t vocab, std::size_t max_len, double penalty, const ProbFn& probs) {
  std::pair<Prefix, double> best{{}, -1e300};
  std::function<void(Prefix, Prefix, double)> walk = [&](Prefix fed, Prefix out, double lp) {
    const auto p = probs(fed);
    const double score = (lp + std::log(p[0])) / std::pow(static_cast<double>(out.size() + 1), penalty);
    if (score > best.second) best = {out, score};
    if (out.size() + 1 >= max_len) return;
    for (std::int32_t w = 1; w < static_cast<std::int32_t>(vocab); ++w) {
      auto f = fed, o = out;
      f.push_back(w);
      o.push_back(w);
      walk(f, o, lp + std::log(p[static_cast<std::size_t>(w)]));
    }
  };
  walk({9}, {}, 0.0);
  return best;
}

Outcome decoding_oracles() {
  // beam 1 against greedy on every model variant.
  const auto c = corpus::generate_corpus(testing::small_corpus_options(5));
  const auto vocab = c.vocabulary();
  std::size_t greedy_cases = 0, greedy_diffs = 0;
  for (std::uint64_t seed : {1, 2, 3, 4}) {
    TranslationModel<double> model(testing::tiny_config(vocab.size(), seed % 2 == 0, seed % 2 == 0, seed > 2), seed);
    for (const auto& [dir, ex] : c.splits.at("test")) {
      for (const auto& e : ex) {
        const auto src = TokenMatrix::from_rows({e.source}, 0);
        eval::ModelScorer<double> a(model, src), b(model, src);
        const auto max_len = eval::resolve_max_len({}, e.source.size(), model.config().max_len);
        const auto tag = vocab.language_token(dir.target);
        const auto beam = eval::beam_search(a, tag, corpus::Vocabulary::kEos, max_len, 1, 1.0);
        const auto greedy = eval::greedy_search(b, tag, corpus::Vocabulary::kEos, max_len, 1.0);
        ++greedy_cases;
        if (beam.tokens != greedy.tokens || beam.logprob != greedy.logprob) ++greedy_diffs;
      }
    }
  }

  // Three tokens: 0 = eos, 1, 2. The first greedy choice is not on the best path.
  const ProbFn hand = [](const Prefix& fed) -> std::vector<double> {
    if (fed.size() == 1) return {0.1, 0.5, 0.4};
    if (fed.back() == 1) return {0.2, 0.45, 0.35};
    if (fed.size() == 2) return {0.05, 0.05, 0.9};
    return {0.85, 0.1, 0.05};
  };
  std::size_t exhaustive_cases = 0, exhaustive_diffs = 0;
  for (std::size_t max_len : {2, 3, 4}) {
    for (double penalty : {0.0, 0.5, 1.0}) {
      TableScorer scorer(3, hand);
      const auto got = eval::beam_search(scorer, 9, 0, max_len, 5, penalty);
      const auto want = exhaustive(3, max_len, penalty, hand);
      ++exhaustive_cases;
      if (got.tokens != want.first || std::abs(got.score - want.second) > 1e-12) ++exhaustive_diffs;
    }
  }

  // Incremental decoding against the teacher-forced pass, float models.
  double worst = 0;
  for (int variant = 0; variant < 4; ++variant) {
    const bool dis = variant & 1, ling = variant & 2;
    ModelConfig cfg;
    cfg.vocab_size = vocab.size();
    cfg.use_disentangler = cfg.use_det_loss = dis;
    cfg.use_ling_encoder = ling;
    TranslationModel<float> model(cfg, 7 + variant);
    const auto& ex = c.splits.at("test").begin()->second;
    std::vector<std::vector<std::int32_t>> srcs, decs;
    for (std::size_t i = 0; i < 4; ++i) {
      srcs.push_back(ex[i].source);
      decs.push_back(ex[(i + 1) % 4].target);
    }
    std::size_t len = 0;
    for (auto& d : decs) len = std::max(len, d.size());
    for (auto& d : decs) d.resize(len, 5 + static_cast<std::int32_t>(len % 3));
    const auto src = TokenMatrix::from_rows(srcs, 0);
    auto full = model.forward(src, TokenMatrix::from_rows(decs, 0), {});
    auto state = model.begin_decode(src);
    const std::size_t V = cfg.vocab_size;
    for (std::size_t pos = 0; pos < len; ++pos) {
      std::vector<std::int32_t> ids;
      for (auto& d : decs) ids.push_back(d[pos]);
      auto logits = model.step(state, ids);
      for (std::size_t b = 0; b < decs.size(); ++b) {
        for (std::size_t k = 0; k < V; ++k) {
          const double diff = std::abs(static_cast<double>(logits.data()[b * V + k]) -
                                       static_cast<double>(full.logits.data()[(b * len + pos) * V + k]));
          worst = std::max(worst, diff);
        }
      }
    }
  }
  const bool pass = greedy_diffs == 0 && exhaustive_diffs == 0 && worst <= 1e-5;
  return {pass, fmt::format("beam 1 vs greedy {}/{} equal; beam 5 vs exhaustive {}/{} equal; incremental max |diff| "
                            "{:.2e}",
                            greedy_cases - greedy_diffs, greedy_cases, exhaustive_cases - exhaustive_diffs,
                            exhaustive_cases, worst)};
}

// ---- 8 -------------------------------------------------------------------------

Outcome metric_oracles(const corpus::Corpus& desk) {
  using eval::Sentence;
  const auto refs = eval::test_references(desk);
  bool self_ok = true;
  for (const auto& [dir, r] : refs) self_ok = self_ok && eval::corpus_bleu(r, r) == 100.0;

  const std::vector<Sentence> hyps{{"a", "b", "c", "d", "e"}, {"x", "y", "z", "w"}};
  const std::vector<Sentence> two{{"a", "b", "c", "d", "f"}, {"x", "y", "z", "w", "v"}};
  const double hand = 100.0 * std::exp(1.0 - 10.0 / 9.0) * std::pow(384.0 / 945.0, 0.25);
  const double got = eval::corpus_bleu(hyps, two);
  const bool hand_ok = std::abs(got - hand) <= 1e-6;

  // Brute force: a token is in language L iff L realizes it for some semantic id.
  std::vector<std::set<std::string>> owned(desk.languages.size());
  for (const auto& l : desk.languages) {
    for (std::uint32_t s = 0; s < desk.options.semantic_vocab; ++s) {
      owned[static_cast<std::size_t>(l.id)].insert(l.realize({s}).front());
    }
  }
  auto brute = [&](const std::vector<Sentence>& hs, int target) {
    std::size_t off = 0;
    for (const auto& h : hs) {
      std::size_t counted = 0, hits = 0;
      for (const auto& t : h) {
        if (t.front() == '<') continue;
        ++counted;
        hits += owned[static_cast<std::size_t>(target)].count(t);
      }
      off += 2 * hits > counted ? 0 : 1;
    }
    return static_cast<double>(off) / static_cast<double>(hs.size());
  };
  const auto vocab = desk.vocabulary();
  std::mt19937_64 rng(17);
  std::size_t sets = 0, off_diffs = 0;
  for (const auto& [dir, ex] : desk.splits.at("test")) {
    std::vector<Sentence> target_side, source_side, mixed;
    for (const auto& e : ex) {
      target_side.push_back(corpus::surface_tokens(e.target, vocab));
      source_side.push_back(corpus::surface_tokens(e.source, vocab));
      // Interleave tokens of both sides plus specials.
      Sentence m;
      const auto t = corpus::surface_tokens(e.target, vocab);
      const auto s = corpus::surface_tokens(e.source, vocab);
      for (std::size_t i = 0; i < std::max(t.size(), s.size()); ++i) {
        if (i < t.size() && rng() % 3 != 0) m.push_back(t[i]);
        if (i < s.size() && rng() % 2 == 0) m.push_back(s[i]);
        if (rng() % 7 == 0) m.push_back("<eos>");
      }
      mixed.push_back(m);
    }
    for (const auto* hs : {&target_side, &source_side, &mixed}) {
      ++sets;
      if (eval::off_target_rate(*hs, dir.target, desk.languages) != brute(*hs, dir.target)) ++off_diffs;
    }
  }

  // Five sentences in language 1 of a 3-language, 6-symbol setup (tokens 6..11).
  const auto langs = corpus::make_languages(3, 6, 11);
  auto in1 = [](std::initializer_list<int> ids) {
    Sentence s;
    for (int i : ids) s.push_back(std::to_string(6 + i));
    return s;
  };
  auto in2 = [](std::initializer_list<int> ids) {
    Sentence s;
    for (int i : ids) s.push_back(std::to_string(12 + i));
    return s;
  };
  const std::vector<Sentence> five{in1({0, 1, 2, 3}), in1({1, 2, 3, 4}), in1({2, 3, 4, 5}), in1({5, 4, 3, 2}),
                                   in1({0, 2, 4, 1})};
  const std::vector<Sentence> sys_a{five[0], in2({1, 2, 3, 4}), five[2], five[3], Sentence{}};
  const std::vector<Sentence> sys_b{five[0], five[1], in1({2, 3, 4, 0}), in2({5, 4, 3, 2}), five[4]};
  const auto it = eval::in_target_bleu({sys_a, sys_b}, five, 1, langs);
  const double b_hand = 100.0 * std::pow(7.0 / 8 * 5.0 / 6 * 3.0 / 4 * 1.0 / 2, 0.25);
  const bool it_ok = it.subset == std::vector<std::size_t>{0, 2} && it.bleu.size() == 2 && it.bleu[0] == 100.0 &&
                     std::abs(it.bleu[1] - b_hand) <= 1e-9;

  const bool pass = self_ok && hand_ok && off_diffs == 0 && it_ok;
  return {pass, fmt::format("BLEU(ref, ref) = 100 on all {} directions: {}; 2-sentence BLEU {:.9f} vs hand {:.9f}; "
                            "off-target {}/{} test sets match brute force; in-target subset {}",
                            refs.size(), self_ok ? "yes" : "no", got, hand, sets - off_diffs, sets,
                            it_ok ? "matches" : "differs")};
}

// ---- 9 -------------------------------------------------------------------------

Outcome reproducibility(const fs::path& work) {
  const auto dir = work / "c9";
  fs::remove_all(dir);
  auto at = [&](const std::string& rel) { return (dir / rel).string(); };
  const std::string gen = "gen-data --languages 3 --pairs 40 --valid 6 --test 8 --min-len 2 --max-len 6 "
                          "--semantic-vocab 8 --seed 21";
  const std::string model_flags =
      " --d-model 16 --heads 2 --ffn 32 --enc-layers 1 --dec-layers 1 --ling-layers 1 --warmup 5 "
      "--checkpoint-interval 10 --max-tokens 80 --keep-last 3 --select-top 2 --seed 4";
  std::vector<std::string> failures;
  // Each command runs twice into the same output path; everything it wrote must match.
  auto capture = [&](const fs::path& out) {
    if (fs::is_directory(out)) return snapshot(out);
    std::map<std::string, std::string> files{{"report", slurp(out)}};
    fs::path manifest = out;
    manifest += ".manifest.json";
    if (fs::exists(manifest)) {
      auto j = nlohmann::ordered_json::parse(slurp(manifest));
      j.erase("started_at");
      j.erase("finished_at");
      files["manifest"] = j.dump();
    }
    return files;
  };
  auto twice = [&](const std::string& name, const std::string& cmd) {
    const fs::path out = at(name);
    if (slmt_cli(cmd + " --out " + out.string()) != 0) {
      failures.push_back(name + " exited non-zero");
      return;
    }
    const auto first = capture(out);
    fs::remove_all(out);
    if (slmt_cli(cmd + " --out " + out.string()) != 0 || capture(out) != first) failures.push_back(name);
  };
  twice("gen", gen);
  twice("train", "train --corpus " + at("gen") + model_flags + " --steps 30");
  const auto ckpt = at("train/ckpt-00000030.slmt");
  twice("translate", "translate --checkpoint " + ckpt + " --corpus " + at("gen") + " --beam 3");
  if (slmt_cli("translate --checkpoint " + ckpt + " --corpus " + at("gen") + " --beam 1 --out " + at("greedy")) != 0) {
    failures.push_back("translate --beam 1 exited non-zero");
  }
  twice("evaluate", "evaluate --corpus " + at("gen") + " --hyp " + at("translate") + " --in-target-with " +
                        at("greedy"));
  twice("analyze", "analyze --checkpoint " + ckpt + " --sentences " + at("gen/analysis.tsv"));

  // Interrupted at step 10, resumed to 30.
  const std::string part = "train --corpus " + at("gen") + model_flags + " --out " + at("resumed");
  bool resume_ok = slmt_cli(part + " --steps 10") == 0 &&
                   slmt_cli(part + " --steps 30 --resume " + at("resumed/ckpt-00000010.slmt")) == 0;
  resume_ok = resume_ok && slurp(at("resumed/train.log.jsonl")) == slurp(at("train/train.log.jsonl")) &&
              slurp(at("resumed/ckpt-00000030.slmt")) == slurp(ckpt);
  if (!resume_ok) failures.push_back("resume");

  std::string detail = "gen-data, train, translate, evaluate, analyze reruns byte-identical; resumed loss stream and "
                       "final checkpoint identical";
  if (!failures.empty()) {
    detail = "differs:";
    for (const auto& f : failures) detail += " " + f;
  }
  return {failures.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite: one PASS/FAIL line per criterion"};
  std::string work = (fs::temp_directory_path() / "slmt_acceptance").string();
  DeskSettings desk;
  std::vector<int> only;
  app.add_option("--work", work, "Scratch directory")->capture_default_str();
  app.add_option("--steps", desk.steps, "Training steps per model for the desk reproduction")->capture_default_str();
  app.add_option("--lr", desk.lr, "Peak learning rate for the desk reproduction")->capture_default_str();
  app.add_option("--warmup", desk.warmup, "Warmup steps for the desk reproduction")->capture_default_str();
  app.add_option("--dropout", desk.dropout, "Dropout for the desk reproduction")->capture_default_str();
  app.add_option("--only", only, "Run only these criteria");
  CLI11_PARSE(app, argc, argv);
  spdlog::set_pattern("[%T] %v");
  fs::create_directories(work);

  auto wanted = [&](int k) { return only.empty() || std::find(only.begin(), only.end(), k) != only.end(); };
  std::map<int, Outcome> results;
  auto run = [&](int k, const std::function<Outcome()>& fn) {
    if (!wanted(k)) return;
    const auto t0 = Clock::now();
    try {
      results[k] = fn();
    } catch (const std::exception& e) {
      results[k] = {false, std::string("exception: ") + e.what()};
    }
    spdlog::info("criterion {} finished in {:.0f}s: {}", k, seconds_since(t0), results[k].pass ? "PASS" : "FAIL");
  };

  corpus::GenerateOptions desk_options;  // default desk corpus
  const auto desk_corpus = corpus::generate_corpus(desk_options);
  std::unique_ptr<TranslationModel<float>> full_model;

  run(1, gradient_suite);
  run(2, [&] { return loss_identities(work); });
  run(3, reconstruction_identity);
  run(4, baseline_equivalence);
  run(7, decoding_oracles);
  run(8, [&] { return metric_oracles(desk_corpus); });
  run(9, [&] { return reproducibility(work); });
  if (wanted(5) || wanted(6)) {
    run(5, [&] { return desk_reproduction(desk_corpus, desk, full_model); });
    run(6, [&] {
      if (!full_model) return Outcome{false, "the full model was not trained"};
      return representation_properties(desk_corpus, *full_model);
    });
  }

  static const std::array<const char*, 9> titles{
      "gradient suite",          "exact loss identities",  "reconstruction identity",
      "baseline equivalence",    "desk-scale reproduction", "representation properties",
      "decoding oracles",        "metric oracles",          "reproducibility"};
  bool all = true;
  for (const auto& [k, r] : results) {
    fmt::print("criterion {} ({}): {} | {}\n", k, titles[static_cast<std::size_t>(k - 1)], r.pass ? "PASS" : "FAIL",
               r.detail);
    all = all && r.pass;
  }
  std::fflush(stdout);
  return all ? 0 : 1;
}
