#pragma once

// Training objectives: token-level label-smoothed cross-entropy, the
// cosine-based semantic and language losses over in-batch samples, the
// reconstruction constraint, and their composition into the joint loss.

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "slmt/autodiff.hpp"
#include "slmt/tokens.hpp"

namespace slmt::objectives {

template <typename T>
using Tensor = ad::Tensor<T>;

// R(.): mean over unmasked positions. states [b, len, d], mask [b * len] -> [b, d].
template <typename T>
Tensor<T> pool(const Tensor<T>& states, std::span<const std::uint8_t> mask);

// Batch-average number of unmasked positions per row.
double average_length(const TokenMatrix& m);

enum class PairKind { semantic, language };

struct PairSample {
  std::size_t anchor = 0;
  std::size_t positive = 0;
  std::size_t negative = 0;
  PairKind kind = PairKind::semantic;
};

// Sentences of a batch of n parallel pairs: indices [0, n) are the sources,
// [n, 2n) the targets; partner[i] is the other side of sentence i's pair.
struct SentenceLayout {
  std::vector<int> language;
  std::vector<std::size_t> partner;
  std::size_t pairs = 0;

  static SentenceLayout from_languages(std::span<const int> source_language, std::span<const int> target_language);
};

struct SampleSet {
  std::vector<PairSample> semantic;
  std::vector<PairSample> language;
  std::size_t language_skipped = 0;  // anchors with no same-language partner
};

// One semantic and (when possible) one language sample per source sentence.
//   semantic: positive = parallel partner; negative = any other sentence of the
//             batch except the anchor and its partner, any language.
//   language: positive = another sentence of the anchor's language (either side
//             of any pair); negative = a sentence of a different language.
// Throws std::invalid_argument when a semantic negative cannot exist (one pair).
SampleSet sample_pairs(const SentenceLayout& layout, std::mt19937_64& rng);

// mean(1 - cos(anchor, positive)) + lambda2 * mean(1 + cos(anchor, negative)),
// over rows of `pooled` [sentences, d].
template <typename T>
Tensor<T> contrastive_loss(const Tensor<T>& pooled, std::span<const PairSample> samples, double lambda2);

// Semantic loss over pooled h_sem; throws on an empty sample list.
template <typename T>
Tensor<T> semantic_loss(const Tensor<T>& pooled_semantic, std::span<const PairSample> samples, double lambda2);

// Language loss over pooled h_lang; an empty sample list contributes 0 and logs a warning.
template <typename T>
Tensor<T> language_loss(const Tensor<T>& pooled_language, std::span<const PairSample> samples, double lambda2);

// Mean over sentences of ||h - h_sem - h_lang|| (unmasked positions and all
// features) divided by the batch-average length.
template <typename T>
Tensor<T> reconstruction_loss(const Tensor<T>& h, const Tensor<T>& h_sem, const Tensor<T>& h_lang,
                              const TokenMatrix& mask);

// logits [b, t, V] against gold ids [b, t]; mean over non-pad gold tokens.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const TokenMatrix& gold, double smoothing);

struct LossBreakdown {
  double l_ce = 0.0;
  double l_sem = 0.0;
  double l_lang = 0.0;
  double l_recons = 0.0;
  double l_det = 0.0;
  double l_joint = 0.0;
  double d_avg = 0.0;
};

struct LossWeights {
  double lambda = 0.05;
  double lambda1 = 0.2;
  bool use_det_loss = true;
};

// Correctly rounded sum of the terms (one rounding of the exact real sum).
double exact_sum(std::initializer_list<double> terms);

// l_det = l_sem + l_lang + lambda1 * l_recons     summed with exact_sum
// l_joint = l_ce + (lambda * d_avg) * l_det       (l_ce alone when use_det_loss is off)
LossBreakdown joint_loss(double l_ce, double l_sem, double l_lang, double l_recons, double d_avg,
                         const LossWeights& weights);

// One JSON object per line: {"step":..,"l_ce":..,...,"d_avg":..}. Values are
// written with round-trip precision.
std::string to_record(std::uint64_t step, const LossBreakdown& b);
LossBreakdown from_record(const std::string& line, std::uint64_t* step = nullptr);

}  // namespace slmt::objectives
