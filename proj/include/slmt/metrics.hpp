#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "slmt/corpus.hpp"

namespace slmt::eval {

using Sentence = std::vector<std::string>;

struct BleuStats {
  std::array<std::size_t, 4> matches{};  // clipped n-gram matches, n = 1..4
  std::array<std::size_t, 4> totals{};   // hypothesis n-grams
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;

  BleuStats& operator+=(const BleuStats& o);
};

BleuStats sentence_stats(const Sentence& hyp, const Sentence& ref);

// 100 * BP * exp(mean log p_n); 0 when any order has no match (no smoothing).
double bleu_from_stats(const BleuStats& stats);

// Corpus BLEU-4 with counts pooled over all sentences. Throws on an empty or
// misaligned corpus.
double corpus_bleu(const std::vector<Sentence>& hyps, const std::vector<Sentence>& refs);

// Language owning a surface token; nullopt for specials and unknown strings.
std::optional<int> token_language(const std::string& token, const std::vector<corpus::LanguageSpec>& languages);
bool is_special_token(const std::string& token);

// In-target iff a strict majority of the non-special tokens belong to the target
// language. Empty output (or only specials) and ties are off-target.
bool in_target(const Sentence& hyp, int target, const std::vector<corpus::LanguageSpec>& languages);
double off_target_rate(const std::vector<Sentence>& hyps, int target,
                       const std::vector<corpus::LanguageSpec>& languages);

struct InTargetResult {
  std::vector<std::size_t> subset;  // sentence indices where every system is in-target
  std::vector<double> bleu;         // per system on the subset; empty when the subset is
};

// systems[s][i] is system s's output for sentence i.
InTargetResult in_target_bleu(const std::vector<std::vector<Sentence>>& systems, const std::vector<Sentence>& refs,
                              int target, const std::vector<corpus::LanguageSpec>& languages);

}  // namespace slmt::eval
