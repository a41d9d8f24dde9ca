#include "slmt/evaluation.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <cmath>
#include <stdexcept>

#include "json.hpp"
#include "slmt/objectives.hpp"

namespace slmt::eval {

using nlohmann::ordered_json;

std::string EvalReport::to_json() const {
  ordered_json j;
  j["format"] = "slmt-eval";
  j["version"] = 1;
  ordered_json rows_json = ordered_json::array();
  for (const auto& r : rows) {
    ordered_json row;
    row["direction"] = r.direction;
    row["supervised"] = r.supervised;
    row["bleu"] = r.bleu;
    row["off_target"] = r.off_target;
    row["sentences"] = r.sentences;
    if (r.in_target_sentences) {
      row["in_target_sentences"] = *r.in_target_sentences;
      row["in_target_bleu"] = r.in_target_bleu ? ordered_json(*r.in_target_bleu) : ordered_json(nullptr);
      row["other_in_target_bleu"] =
          r.other_in_target_bleu ? ordered_json(*r.other_in_target_bleu) : ordered_json(nullptr);
    }
    rows_json.push_back(std::move(row));
  }
  j["directions"] = std::move(rows_json);
  j["supervised_average"] = {{"bleu", supervised_bleu}, {"off_target", supervised_off_target}};
  j["zero_shot_average"] = {{"bleu", zero_shot_bleu}, {"off_target", zero_shot_off_target}};
  j["in_target_protocol"] = has_in_target;
  return j.dump(2) + "\n";
}

EvalReport EvalReport::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  EvalReport r;
  for (const auto& row : j.at("directions")) {
    DirectionResult d;
    d.direction = row.at("direction").get<std::string>();
    d.supervised = row.at("supervised").get<bool>();
    d.bleu = row.at("bleu").get<double>();
    d.off_target = row.at("off_target").get<double>();
    d.sentences = row.at("sentences").get<std::size_t>();
    if (row.contains("in_target_sentences")) {
      d.in_target_sentences = row.at("in_target_sentences").get<std::size_t>();
      if (!row.at("in_target_bleu").is_null()) d.in_target_bleu = row.at("in_target_bleu").get<double>();
      if (!row.at("other_in_target_bleu").is_null()) {
        d.other_in_target_bleu = row.at("other_in_target_bleu").get<double>();
      }
    }
    r.rows.push_back(std::move(d));
  }
  r.supervised_bleu = j.at("supervised_average").at("bleu").get<double>();
  r.supervised_off_target = j.at("supervised_average").at("off_target").get<double>();
  r.zero_shot_bleu = j.at("zero_shot_average").at("bleu").get<double>();
  r.zero_shot_off_target = j.at("zero_shot_average").at("off_target").get<double>();
  r.has_in_target = j.at("in_target_protocol").get<bool>();
  return r;
}

EvalReport evaluate(const corpus::Corpus& corpus, const DirectionOutputs& hyps, const DirectionOutputs& refs,
                    const DirectionOutputs* other) {
  EvalReport report;
  report.has_in_target = other != nullptr;
  double sup_bleu = 0.0, sup_off = 0.0, zs_bleu = 0.0, zs_off = 0.0;
  std::size_t n_sup = 0, n_zs = 0;
  for (const auto& [dir, ref] : refs) {
    auto it = hyps.find(dir);
    if (it == hyps.end()) {
      throw corpus::DataError("evaluate: no hypotheses for " + corpus::direction_name(dir, corpus.languages));
    }
    const auto& hyp = it->second;
    const std::string name = corpus::direction_name(dir, corpus.languages);
    if (hyp.size() != ref.size()) {
      throw corpus::DataError(fmt::format("evaluate: {} has {} hypotheses for {} references", name, hyp.size(),
                                          ref.size()));
    }
    DirectionResult row;
    row.direction = name;
    row.supervised = corpus.is_supervised(dir);
    row.bleu = corpus_bleu(hyp, ref);
    row.off_target = off_target_rate(hyp, dir.target, corpus.languages);
    row.sentences = hyp.size();
    if (other) {
      auto ot = other->find(dir);
      if (ot == other->end() || ot->second.size() != ref.size()) {
        throw corpus::DataError("evaluate: comparison system is missing or misaligned for " + name);
      }
      const auto res = in_target_bleu({hyp, ot->second}, ref, dir.target, corpus.languages);
      row.in_target_sentences = res.subset.size();
      if (!res.subset.empty()) {
        row.in_target_bleu = res.bleu[0];
        row.other_in_target_bleu = res.bleu[1];
      }
    }
    if (row.supervised) {
      sup_bleu += row.bleu;
      sup_off += row.off_target;
      ++n_sup;
    } else {
      zs_bleu += row.bleu;
      zs_off += row.off_target;
      ++n_zs;
    }
    report.rows.push_back(std::move(row));
  }
  if (n_sup) {
    report.supervised_bleu = sup_bleu / static_cast<double>(n_sup);
    report.supervised_off_target = sup_off / static_cast<double>(n_sup);
  }
  if (n_zs) {
    report.zero_shot_bleu = zs_bleu / static_cast<double>(n_zs);
    report.zero_shot_off_target = zs_off / static_cast<double>(n_zs);
  }
  return report;
}

DirectionOutputs test_references(const corpus::Corpus& corpus, const std::string& split) {
  DirectionOutputs out;
  const auto vocab = corpus.vocabulary();
  auto it = corpus.splits.find(split);
  if (it == corpus.splits.end()) throw corpus::DataError("corpus has no '" + split + "' split");
  for (const auto& [dir, examples] : it->second) {
    auto& refs = out[dir];
    for (const auto& ex : examples) refs.push_back(corpus::surface_tokens(ex.target, vocab));
  }
  return out;
}

template <typename T>
DirectionOutputs translate_split(const TranslationModel<T>& model, const corpus::Corpus& corpus,
                                 const DecodeConfig& config, const std::string& split) {
  DirectionOutputs out;
  const auto vocab = corpus.vocabulary();
  auto it = corpus.splits.find(split);
  if (it == corpus.splits.end()) throw corpus::DataError("corpus has no '" + split + "' split");
  for (const auto& [dir, examples] : it->second) {
    auto& hyps = out[dir];
    const auto tag = vocab.language_token(dir.target);
    for (const auto& ex : examples) {
      hyps.push_back(corpus::surface_tokens(translate(model, ex.source, tag, corpus::Vocabulary::kEos, config), vocab));
    }
  }
  return out;
}

// ---- representations -------------------------------------------------------

const std::vector<std::string>& tap_names() {
  static const std::vector<std::string> names{"encoder-output",     "semantic-ffn",   "language-ffn",
                                              "decoder-embedding",  "linguistic-encoder", "decoder-output",
                                              "fusion-layer"};
  return names;
}

std::string to_string(Tap tap) { return tap_names().at(static_cast<std::size_t>(tap)); }

Tap tap_from_string(const std::string& name) {
  const auto& names = tap_names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return static_cast<Tap>(i);
  }
  std::string valid;
  for (const auto& n : names) valid += (valid.empty() ? "" : ", ") + n;
  throw std::invalid_argument("unknown tap '" + name + "'; valid taps: " + valid);
}

std::vector<Tap> parse_taps(const std::string& comma_separated) {
  std::vector<Tap> out;
  std::size_t start = 0;
  while (start <= comma_separated.size()) {
    auto comma = comma_separated.find(',', start);
    if (comma == std::string::npos) comma = comma_separated.size();
    const auto name = comma_separated.substr(start, comma - start);
    if (!name.empty()) out.push_back(tap_from_string(name));
    start = comma + 1;
  }
  if (out.empty()) throw std::invalid_argument("no taps requested");
  return out;
}

bool encoder_side(Tap tap) {
  return tap == Tap::encoder_output || tap == Tap::semantic_ffn || tap == Tap::language_ffn;
}

namespace {

double round6(double v) {
  const double r = std::round(v * 1e6) / 1e6;
  return r == 0.0 ? 0.0 : r;  // no negative zero in the export
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / ((std::sqrt(na) + 1e-8) * (std::sqrt(nb) + 1e-8));
}

template <typename T>
std::vector<std::vector<double>> pooled_rows(const ad::Tensor<T>& states, const TokenMatrix& m) {
  auto pooled = objectives::pool(states, std::span<const std::uint8_t>(m.mask));
  const std::size_t d = pooled.dim(1);
  std::vector<std::vector<double>> out(m.rows, std::vector<double>(d));
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t k = 0; k < d; ++k) out[r][k] = round6(static_cast<double>(pooled.data()[r * d + k]));
  }
  return out;
}

}  // namespace

template <typename T>
std::vector<TapVectors> extract_representations(const TranslationModel<T>& model,
                                                const std::vector<LabeledSentence>& sentences,
                                                const std::vector<Tap>& taps) {
  for (auto tap : taps) {
    const bool needs_dis = tap == Tap::semantic_ffn || tap == Tap::language_ffn;
    const bool needs_ling = tap == Tap::linguistic_encoder || tap == Tap::fusion_layer;
    if ((needs_dis && !model.disentangler()) || (needs_ling && !model.linguistic_encoder())) {
      throw std::invalid_argument("tap '" + to_string(tap) + "' is not available: the component is switched off");
    }
  }
  std::vector<TapVectors> out;
  for (auto tap : taps) out.push_back({tap, {}});
  ad::NoGradGuard no_grad;
  constexpr std::size_t kChunk = 64;
  for (std::size_t begin = 0; begin < sentences.size(); begin += kChunk) {
    const std::size_t end = std::min(sentences.size(), begin + kChunk);
    std::vector<std::vector<std::int32_t>> rows;
    for (std::size_t i = begin; i < end; ++i) rows.push_back(sentences[i].ids);
    const auto m = TokenMatrix::from_rows(rows, corpus::Vocabulary::kPad);
    auto fwd = model.forward(m, m, ForwardContexts::eval());
    for (auto& tv : out) {
      ad::Tensor<T> states;
      switch (tv.tap) {
        case Tap::encoder_output: states = fwd.source.encoder.states; break;
        case Tap::semantic_ffn: states = fwd.source.disentangled->semantic; break;
        case Tap::language_ffn: states = fwd.source.disentangled->language; break;
        case Tap::decoder_embedding: states = fwd.decoder_embedded; break;
        case Tap::linguistic_encoder: states = fwd.linguistic_states; break;
        case Tap::decoder_output: states = fwd.decoder_states; break;
        case Tap::fusion_layer: states = fwd.output_states; break;
      }
      auto vecs = pooled_rows(states, m);
      tv.vectors.insert(tv.vectors.end(), std::make_move_iterator(vecs.begin()), std::make_move_iterator(vecs.end()));
    }
  }
  return out;
}

std::vector<TapSummary> summarize(const std::vector<LabeledSentence>& sentences, const std::vector<TapVectors>& taps) {
  std::vector<TapSummary> out;
  const std::size_t n = sentences.size();
  for (const auto& tv : taps) {
    if (tv.vectors.size() != n) throw std::invalid_argument("summarize: vector count differs from sentence count");
    double within = 0.0, between = 0.0, parallel = 0.0, random = 0.0;
    std::size_t n_within = 0, n_between = 0, n_parallel = 0, n_random = 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const double c = cosine(tv.vectors[i], tv.vectors[j]);
        const bool same_lang = sentences[i].language == sentences[j].language;
        const bool same_id = sentences[i].id == sentences[j].id;
        if (same_lang) {
          if (!same_id) {
            within += c;
            ++n_within;
          }
          continue;
        }
        between += c;
        ++n_between;
        if (same_id) {
          parallel += c;
          ++n_parallel;
        } else {
          random += c;
          ++n_random;
        }
      }
    }
    TapSummary s;
    s.tap = to_string(tv.tap);
    s.within_language = n_within ? within / static_cast<double>(n_within) : 0.0;
    s.between_language = n_between ? between / static_cast<double>(n_between) : 0.0;
    if (encoder_side(tv.tap)) {
      if (n_parallel) s.parallel_pair = parallel / static_cast<double>(n_parallel);
      if (n_random) s.random_pair = random / static_cast<double>(n_random);
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::string export_text(std::uint64_t config_digest, const std::vector<LabeledSentence>& sentences,
                        const std::vector<TapVectors>& taps, const std::vector<corpus::LanguageSpec>& languages) {
  std::string out;
  const std::size_t dim = taps.empty() || taps.front().vectors.empty() ? 0 : taps.front().vectors.front().size();
  out += fmt::format("# slmt-representations config_digest={:016x} dim={}\n", config_digest, dim);
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    for (const auto& tv : taps) {
      out += fmt::format("{}\t{}\t{}\t", sentences[i].id, languages.at(sentences[i].language).name, to_string(tv.tap));
      const auto& v = tv.vectors.at(i);
      out += fmt::format("{:.6f}", fmt::join(v, " "));
      out += '\n';
    }
  }
  return out;
}

std::string summary_json(const std::vector<TapSummary>& summary) {
  ordered_json j = ordered_json::array();
  for (const auto& s : summary) {
    ordered_json row;
    row["tap"] = s.tap;
    row["within_language"] = s.within_language;
    row["between_language"] = s.between_language;
    row["parallel_pair"] = s.parallel_pair ? ordered_json(*s.parallel_pair) : ordered_json(nullptr);
    row["random_pair"] = s.random_pair ? ordered_json(*s.random_pair) : ordered_json(nullptr);
    j.push_back(std::move(row));
  }
  return j.dump(2) + "\n";
}

std::vector<LabeledSentence> read_labeled_sentences(const std::filesystem::path& path, const corpus::Corpus& corpus) {
  const auto vocab = corpus.vocabulary();
  std::vector<LabeledSentence> out;
  std::size_t lineno = 0;
  for (const auto& line : corpus::read_lines(path)) {
    ++lineno;
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) {
      throw corpus::DataError(fmt::format("{}:{}: expected id<TAB>language<TAB>tokens", path.string(), lineno));
    }
    LabeledSentence s;
    try {
      s.id = std::stoul(line.substr(0, t1));
    } catch (const std::exception&) {
      throw corpus::DataError(fmt::format("{}:{}: bad sentence id", path.string(), lineno));
    }
    s.language = corpus.language(line.substr(t1 + 1, t2 - t1 - 1)).id;
    const auto tokens = corpus::split_tokens(line.substr(t2 + 1));
    if (tokens.empty()) throw corpus::DataError(fmt::format("{}:{}: empty sentence", path.string(), lineno));
    s.ids.push_back(vocab.language_token(s.language));
    for (const auto& tok : tokens) s.ids.push_back(vocab.id(tok));
    out.push_back(std::move(s));
  }
  return out;
}

template DirectionOutputs translate_split(const TranslationModel<float>&, const corpus::Corpus&, const DecodeConfig&,
                                          const std::string&);
template DirectionOutputs translate_split(const TranslationModel<double>&, const corpus::Corpus&, const DecodeConfig&,
                                          const std::string&);
template std::vector<TapVectors> extract_representations(const TranslationModel<float>&,
                                                         const std::vector<LabeledSentence>&, const std::vector<Tap>&);
template std::vector<TapVectors> extract_representations(const TranslationModel<double>&,
                                                         const std::vector<LabeledSentence>&, const std::vector<Tap>&);

}  // namespace slmt::eval
