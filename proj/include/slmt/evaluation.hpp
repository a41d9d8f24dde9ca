#pragma once

// Evaluation protocol over a corpus test split: per-direction BLEU and
// off-target rate with supervised / zero-shot averages, the in-target subset
// comparison, and pooled-representation export for similarity analysis.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "slmt/corpus.hpp"
#include "slmt/decoding.hpp"
#include "slmt/metrics.hpp"
#include "slmt/model.hpp"

namespace slmt::eval {

struct DirectionResult {
  std::string direction;  // "L1-L2"
  bool supervised = false;
  double bleu = 0.0;
  double off_target = 0.0;
  std::size_t sentences = 0;
  // Filled by the in-target protocol.
  std::optional<std::size_t> in_target_sentences;
  std::optional<double> in_target_bleu;
  std::optional<double> other_in_target_bleu;
};

struct EvalReport {
  std::vector<DirectionResult> rows;
  double supervised_bleu = 0.0;
  double zero_shot_bleu = 0.0;
  double supervised_off_target = 0.0;
  double zero_shot_off_target = 0.0;
  bool has_in_target = false;

  std::string to_json() const;
  static EvalReport from_json(const std::string& text);
};

using DirectionOutputs = std::map<corpus::Direction, std::vector<Sentence>>;

// Hypotheses and references keyed by direction. When `other` is given, the
// in-target block compares both systems on their common in-target subset.
EvalReport evaluate(const corpus::Corpus& corpus, const DirectionOutputs& hyps, const DirectionOutputs& refs,
                    const DirectionOutputs* other = nullptr);

// References of the test split as surface tokens.
DirectionOutputs test_references(const corpus::Corpus& corpus, const std::string& split = "test");

// Decodes every source of the split into its direction's target language.
template <typename T>
DirectionOutputs translate_split(const TranslationModel<T>& model, const corpus::Corpus& corpus,
                                 const DecodeConfig& config, const std::string& split = "test");

// ---- representations -------------------------------------------------------

enum class Tap {
  encoder_output,
  semantic_ffn,
  language_ffn,
  decoder_embedding,
  linguistic_encoder,
  decoder_output,
  fusion_layer,
};

const std::vector<std::string>& tap_names();
std::string to_string(Tap tap);
// Throws std::invalid_argument listing the valid names.
Tap tap_from_string(const std::string& name);
std::vector<Tap> parse_taps(const std::string& comma_separated);
bool encoder_side(Tap tap);

struct LabeledSentence {
  std::size_t id = 0;  // parallel sentences share an id
  int language = 0;
  std::vector<std::int32_t> ids;  // tagged
};

struct TapVectors {
  Tap tap;
  std::vector<std::vector<double>> vectors;  // one per sentence, already rounded to 6 decimals
};

// Mean-pooled vectors (tag included, padding excluded). Decoder-side taps feed
// the sentence itself as decoder input against its own encoding.
template <typename T>
std::vector<TapVectors> extract_representations(const TranslationModel<T>& model,
                                                const std::vector<LabeledSentence>& sentences,
                                                const std::vector<Tap>& taps);

struct TapSummary {
  std::string tap;
  double within_language = 0.0;   // same language, different id
  double between_language = 0.0;  // different language, any id
  std::optional<double> parallel_pair;  // different language, same id (encoder-side taps)
  std::optional<double> random_pair;    // different language, different id (encoder-side taps)
};

std::vector<TapSummary> summarize(const std::vector<LabeledSentence>& sentences, const std::vector<TapVectors>& taps);

// "# slmt-representations config_digest=<hex> dim=<d>" then one line per
// (sentence, tap): id \t language \t tap \t v1 v2 ... (6 decimals).
std::string export_text(std::uint64_t config_digest, const std::vector<LabeledSentence>& sentences,
                        const std::vector<TapVectors>& taps, const std::vector<corpus::LanguageSpec>& languages);
std::string summary_json(const std::vector<TapSummary>& summary);

// analysis.tsv of a corpus directory: id \t language \t tokens.
std::vector<LabeledSentence> read_labeled_sentences(const std::filesystem::path& path, const corpus::Corpus& corpus);

}  // namespace slmt::eval
