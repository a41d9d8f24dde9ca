#include <cmath>
#include <sstream>

#include "doctest.h"
#include "slmt/evaluation.hpp"
#include "support.hpp"

using namespace slmt;
using namespace slmt::eval;

namespace {

double cos_oracle(const std::vector<double>& a, const std::vector<double>& b) {
  long double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<long double>(a[i]) * b[i];
    na += static_cast<long double>(a[i]) * a[i];
    nb += static_cast<long double>(b[i]) * b[i];
  }
  return static_cast<double>(dot / (std::sqrt(na) * std::sqrt(nb)));
}

std::vector<LabeledSentence> labeled_pool(const corpus::Corpus& c) {
  const auto vocab = c.vocabulary();
  std::vector<LabeledSentence> out;
  for (std::size_t id = 0; id < c.test_pool.size(); ++id) {
    for (const auto& l : c.languages) {
      LabeledSentence s;
      s.id = id;
      s.language = l.id;
      s.ids.push_back(vocab.language_token(l.id));
      for (const auto& t : l.realize(c.test_pool[id])) s.ids.push_back(vocab.id(t));
      out.push_back(s);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("summary averages follow the pair definitions") {
  // ids 0,1 in languages 0,1.
  const std::vector<LabeledSentence> s{{0, 0, {}}, {1, 0, {}}, {0, 1, {}}, {1, 1, {}}};
  const std::vector<std::vector<double>> v{{1, 0, 0}, {1, 1, 0}, {0, 1, 1}, {2, -1, 3}};
  const auto sum = summarize(s, {{Tap::encoder_output, v}, {Tap::decoder_output, v}});
  REQUIRE(sum.size() == 2);
  const double within = (cos_oracle(v[0], v[1]) + cos_oracle(v[2], v[3])) / 2;
  const double parallel = (cos_oracle(v[0], v[2]) + cos_oracle(v[1], v[3])) / 2;
  const double random = (cos_oracle(v[0], v[3]) + cos_oracle(v[1], v[2])) / 2;
  CHECK(sum[0].within_language == doctest::Approx(within).epsilon(1e-7));
  CHECK(sum[0].between_language == doctest::Approx((parallel + random) / 2).epsilon(1e-7));
  CHECK(*sum[0].parallel_pair == doctest::Approx(parallel).epsilon(1e-7));
  CHECK(*sum[0].random_pair == doctest::Approx(random).epsilon(1e-7));
  CHECK_FALSE(sum[1].parallel_pair.has_value());
  CHECK_THROWS(summarize(s, {{Tap::encoder_output, {v[0]}}}));
}

TEST_CASE("tap names parse and unavailable taps are refused") {
  CHECK(parse_taps("semantic-ffn,language-ffn") == std::vector<Tap>{Tap::semantic_ffn, Tap::language_ffn});
  CHECK(tap_from_string("fusion-layer") == Tap::fusion_layer);
  CHECK_THROWS_AS(tap_from_string("nope"), std::invalid_argument);
  const auto c = corpus::generate_corpus(testing::small_corpus_options(1));
  TranslationModel<float> plain(testing::tiny_config(c.vocabulary().size(), false, false, false), 1);
  const auto sentences = labeled_pool(c);
  CHECK_THROWS_AS(extract_representations(plain, sentences, {Tap::semantic_ffn}), std::invalid_argument);
  CHECK_THROWS_AS(extract_representations(plain, sentences, {Tap::linguistic_encoder}), std::invalid_argument);
}

TEST_CASE("pooled representations do not depend on batch composition") {
  auto opts = testing::small_corpus_options(2);
  opts.test_size = 30;
  const auto c = corpus::generate_corpus(opts);
  TranslationModel<double> model(testing::tiny_config(c.vocabulary().size(), true, true, true), 4);
  const auto sentences = labeled_pool(c);
  REQUIRE(sentences.size() > 64);
  const std::vector<Tap> taps{Tap::encoder_output, Tap::semantic_ffn, Tap::language_ffn, Tap::decoder_embedding,
                              Tap::linguistic_encoder, Tap::decoder_output, Tap::fusion_layer};
  const auto all = extract_representations(model, sentences, taps);
  for (std::size_t i : {std::size_t{0}, std::size_t{65}, sentences.size() - 1}) {
    const auto one = extract_representations(model, {sentences[i]}, taps);
    for (std::size_t t = 0; t < taps.size(); ++t) {
      for (std::size_t k = 0; k < one[t].vectors[0].size(); ++k) {
        CHECK(std::abs(one[t].vectors[0][k] - all[t].vectors[i][k]) <= 1.5e-6);
      }
    }
  }
}

TEST_CASE("export text has one line per sentence and tap and parses back") {
  const auto c = corpus::generate_corpus(testing::small_corpus_options(3));
  TranslationModel<float> model(testing::tiny_config(c.vocabulary().size(), true, true, false), 2);
  const auto sentences = labeled_pool(c);
  const auto taps = extract_representations(model, sentences, {Tap::semantic_ffn, Tap::language_ffn});
  const auto text = export_text(0xabcULL, sentences, taps, c.languages);
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  CHECK(line == "# slmt-representations config_digest=0000000000000abc dim=8");
  std::size_t n = 0;
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string id, lang, tap;
    std::getline(row, id, '\t');
    std::getline(row, lang, '\t');
    std::getline(row, tap, '\t');
    const auto& s = sentences[n / 2];
    CHECK(id == std::to_string(s.id));
    CHECK(lang == c.languages[static_cast<std::size_t>(s.language)].name);
    CHECK(tap == (n % 2 ? "language-ffn" : "semantic-ffn"));
    std::vector<double> v;
    double x;
    while (row >> x) v.push_back(x);
    CHECK(v == taps[n % 2].vectors[n / 2]);
    ++n;
  }
  CHECK(n == 2 * sentences.size());
}

TEST_CASE("evaluation averages split supervised and zero-shot rows") {
  const auto c = corpus::generate_corpus(testing::small_corpus_options(4));
  const auto refs = test_references(c);
  auto report = evaluate(c, refs, refs);
  CHECK(report.rows.size() == 6);
  CHECK(report.supervised_bleu == 100.0);
  CHECK(report.zero_shot_bleu == 100.0);
  CHECK(report.zero_shot_off_target == 0.0);

  // Copying the source is off-target everywhere.
  DirectionOutputs copies;
  const auto vocab = c.vocabulary();
  for (const auto& [dir, ex] : c.splits.at("test")) {
    for (const auto& e : ex) copies[dir].push_back(corpus::surface_tokens(e.source, vocab));
  }
  report = evaluate(c, copies, refs, &refs);
  CHECK(report.supervised_off_target == 1.0);
  CHECK(report.zero_shot_off_target == 1.0);
  CHECK(report.has_in_target);
  CHECK(*report.rows[0].in_target_sentences == 0);
  CHECK_FALSE(report.rows[0].in_target_bleu.has_value());

  const auto back = EvalReport::from_json(report.to_json());
  CHECK(back.to_json() == report.to_json());

  auto missing = refs;
  missing.erase(missing.begin());
  CHECK_THROWS_AS(evaluate(c, missing, refs), corpus::DataError);
}
