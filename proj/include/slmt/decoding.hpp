#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "slmt/model.hpp"

namespace slmt::eval {

struct DecodeConfig {
  std::size_t beam = 5;
  double length_penalty = 1.0;
  // Cap on generated tokens (eos included). 0 means 2 * source length + 10,
  // further capped by the model's max_len - 1.
  std::size_t max_len = 0;

  void validate() const;
};

// Anything that can score next tokens for a set of hypothesis rows.
class StepScorer {
 public:
  virtual ~StepScorer() = default;
  virtual std::size_t vocab_size() const = 0;
  // Feeds tokens[r] to row r and returns next-token log-probabilities,
  // row-major [rows, vocab].
  virtual std::vector<double> advance(std::span<const std::int32_t> tokens) = 0;
  // New row i continues old row rows[i].
  virtual void reorder(std::span<const std::size_t> rows) = 0;
};

struct Hypothesis {
  std::vector<std::int32_t> tokens;  // generated tokens, final eos excluded
  double logprob = 0.0;
  double score = 0.0;  // logprob / (tokens + 1)^penalty
};

// Beam search from a single initial row. `first` is fed at position 0 (the
// target-language tag). Each step ranks the best 2*beam expansions; an eos
// expansion ranked inside the top `beam` finishes a hypothesis, the best `beam`
// non-eos expansions continue. eos is forced at max_len. Search stops once
// `beam` hypotheses have finished; the best length-normalized one is returned.
// Ties are broken towards lower row, then lower token id.
Hypothesis beam_search(StepScorer& scorer, std::int32_t first, std::int32_t eos, std::size_t max_len,
                       std::size_t beam, double length_penalty);

// Argmax decoding (lowest id on ties) until eos or max_len.
Hypothesis greedy_search(StepScorer& scorer, std::int32_t first, std::int32_t eos, std::size_t max_len,
                         double length_penalty);

// log-softmax of one row of logits, in double.
std::vector<double> log_softmax(std::span<const double> logits);

template <typename T>
class ModelScorer final : public StepScorer {
 public:
  ModelScorer(const TranslationModel<T>& model, const TokenMatrix& source);
  std::size_t vocab_size() const override { return model_->config().vocab_size; }
  std::vector<double> advance(std::span<const std::int32_t> tokens) override;
  void reorder(std::span<const std::size_t> rows) override;

 private:
  const TranslationModel<T>* model_;
  DecodeState<T> state_;
};

std::size_t resolve_max_len(const DecodeConfig& config, std::size_t source_len, std::size_t model_max_len);

// Translates one tagged source sentence (ids with leading language tag) into
// the language whose tag is `target_tag`. Returns generated ids without eos.
template <typename T>
std::vector<std::int32_t> translate(const TranslationModel<T>& model, const std::vector<std::int32_t>& source,
                                    std::int32_t target_tag, std::int32_t eos, const DecodeConfig& config);

// Greedy decoding of many sentences at once (one batched model pass per step).
template <typename T>
std::vector<std::vector<std::int32_t>> translate_greedy_batch(const TranslationModel<T>& model,
                                                              const std::vector<std::vector<std::int32_t>>& sources,
                                                              std::int32_t target_tag, std::int32_t eos,
                                                              const DecodeConfig& config);

}  // namespace slmt::eval
