#include "slmt/objectives.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "json.hpp"
#include "slmt/rng.hpp"

namespace slmt::objectives {

template <typename T>
Tensor<T> pool(const Tensor<T>& states, std::span<const std::uint8_t> mask) {
  if (states.rank() != 3) throw ad::ShapeError("pool", {states.shape()}, "expected [b, len, d]");
  return ad::masked_mean(states, mask, 1);
}

double average_length(const TokenMatrix& m) {
  if (m.rows == 0) throw std::invalid_argument("average_length: empty batch");
  std::size_t total = 0;
  for (auto v : m.mask) total += v ? 1 : 0;
  return static_cast<double>(total) / static_cast<double>(m.rows);
}

SentenceLayout SentenceLayout::from_languages(std::span<const int> source_language,
                                              std::span<const int> target_language) {
  if (source_language.size() != target_language.size()) {
    throw std::invalid_argument("SentenceLayout: source/target counts differ");
  }
  SentenceLayout layout;
  layout.pairs = source_language.size();
  const std::size_t n = layout.pairs;
  layout.language.assign(source_language.begin(), source_language.end());
  layout.language.insert(layout.language.end(), target_language.begin(), target_language.end());
  layout.partner.resize(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    layout.partner[i] = n + i;
    layout.partner[n + i] = i;
  }
  return layout;
}

SampleSet sample_pairs(const SentenceLayout& layout, std::mt19937_64& rng) {
  const std::size_t n = layout.pairs;
  const std::size_t total = layout.language.size();
  if (n < 2) throw std::invalid_argument("sample_pairs: need at least two parallel pairs for semantic negatives");
  SampleSet out;
  std::vector<std::size_t> candidates;
  for (std::size_t a = 0; a < n; ++a) {
    const std::size_t partner = layout.partner[a];

    candidates.clear();
    for (std::size_t s = 0; s < total; ++s) {
      if (s != a && s != partner) candidates.push_back(s);
    }
    const std::size_t sem_negative = candidates[uniform_index(rng, candidates.size())];
    out.semantic.push_back({a, partner, sem_negative, PairKind::semantic});

    candidates.clear();
    for (std::size_t s = 0; s < total; ++s) {
      if (s != a && layout.language[s] == layout.language[a]) candidates.push_back(s);
    }
    std::vector<std::size_t> others;
    for (std::size_t s = 0; s < total; ++s) {
      if (layout.language[s] != layout.language[a]) others.push_back(s);
    }
    if (candidates.empty() || others.empty()) {
      ++out.language_skipped;
      continue;
    }
    const std::size_t positive = candidates[uniform_index(rng, candidates.size())];
    const std::size_t negative = others[uniform_index(rng, others.size())];
    out.language.push_back({a, positive, negative, PairKind::language});
  }
  return out;
}

template <typename T>
Tensor<T> contrastive_loss(const Tensor<T>& pooled, std::span<const PairSample> samples, double lambda2) {
  if (samples.empty()) throw std::invalid_argument("contrastive loss: empty sample list");
  if (pooled.rank() != 2) throw ad::ShapeError("contrastive_loss", {pooled.shape()}, "expected [n, d]");
  std::vector<std::size_t> anchors, positives, negatives;
  for (const auto& s : samples) {
    anchors.push_back(s.anchor);
    positives.push_back(s.positive);
    negatives.push_back(s.negative);
  }
  auto a = ad::gather_rows(pooled, anchors);
  auto pos = ad::cosine_similarity(a, ad::gather_rows(pooled, positives));
  auto neg = ad::cosine_similarity(a, ad::gather_rows(pooled, negatives));
  const auto one = Tensor<T>::scalar(T(1));
  auto positive_term = ad::sub(one, ad::mean(pos));
  auto negative_term = ad::add(one, ad::mean(neg));
  return ad::add(positive_term, ad::scale(negative_term, T(lambda2)));
}

template <typename T>
Tensor<T> semantic_loss(const Tensor<T>& pooled_semantic, std::span<const PairSample> samples, double lambda2) {
  for (const auto& s : samples) {
    if (s.kind != PairKind::semantic) throw std::invalid_argument("semantic_loss: language-kind sample given");
  }
  return contrastive_loss(pooled_semantic, samples, lambda2);
}

template <typename T>
Tensor<T> language_loss(const Tensor<T>& pooled_language, std::span<const PairSample> samples, double lambda2) {
  if (samples.empty()) {
    spdlog::warn("language loss: no anchor has a same-language partner in this batch; term is 0");
    return Tensor<T>::scalar(T(0));
  }
  for (const auto& s : samples) {
    if (s.kind != PairKind::language) throw std::invalid_argument("language_loss: semantic-kind sample given");
  }
  return contrastive_loss(pooled_language, samples, lambda2);
}

template <typename T>
Tensor<T> reconstruction_loss(const Tensor<T>& h, const Tensor<T>& h_sem, const Tensor<T>& h_lang,
                              const TokenMatrix& mask) {
  if (h.shape() != h_sem.shape() || h.shape() != h_lang.shape() || h.rank() != 3) {
    throw ad::ShapeError("reconstruction_loss", {h.shape(), h_sem.shape(), h_lang.shape()});
  }
  const std::size_t b = h.dim(0), len = h.dim(1), d = h.dim(2);
  if (mask.rows != b || mask.cols != len) {
    throw ad::ShapeError("reconstruction_loss", {h.shape(), {mask.rows, mask.cols}}, "mask shape");
  }
  std::vector<T> keep(b * len * d);
  for (std::size_t p = 0; p < b * len; ++p) std::fill_n(keep.data() + p * d, d, mask.mask[p] ? T(1) : T(0));
  auto residual = ad::mul(ad::sub(ad::sub(h, h_sem), h_lang), Tensor<T>::from_data(h.shape(), std::move(keep)));
  const double d_avg = average_length(mask);
  return ad::scale(ad::mean(ad::l2_norm(residual)), T(1.0 / d_avg));
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const TokenMatrix& gold, double smoothing) {
  if (logits.rank() != 3 || logits.dim(0) != gold.rows || logits.dim(1) != gold.cols) {
    throw ad::ShapeError("cross_entropy", {logits.shape(), {gold.rows, gold.cols}});
  }
  auto flat = ad::reshape(logits, {gold.rows * gold.cols, logits.dim(2)});
  return ad::label_smoothed_cross_entropy(flat, std::span<const std::int32_t>(gold.ids),
                                          std::span<const std::uint8_t>(gold.mask), T(smoothing));
}

double exact_sum(std::initializer_list<double> terms) {
  // Shewchuk's non-overlapping partials: the running sum is kept exactly and
  // rounded once at the end.
  std::vector<double> partials;
  for (double x : terms) {
    std::size_t used = 0;
    for (double y : partials) {
      if (std::abs(x) < std::abs(y)) std::swap(x, y);
      const double hi = x + y;
      const double lo = y - (hi - x);
      if (lo != 0.0) partials[used++] = lo;
      x = hi;
    }
    partials.resize(used);
    partials.push_back(x);
  }
  double total = 0.0;
  while (!partials.empty()) {
    const double x = total;
    const double y = partials.back();
    partials.pop_back();
    total = x + y;
    const double lo = y - (total - x);
    if (lo != 0.0) {
      // Half-way cases: look at the next partial to decide the rounding direction.
      if (!partials.empty() && ((lo < 0.0 && partials.back() < 0.0) || (lo > 0.0 && partials.back() > 0.0))) {
        const double twice = 2.0 * lo;
        const double bumped = total + twice;
        if (twice == bumped - total) total = bumped;
      }
      break;
    }
  }
  return total;
}

LossBreakdown joint_loss(double l_ce, double l_sem, double l_lang, double l_recons, double d_avg,
                         const LossWeights& weights) {
  if (weights.lambda < 0.0 || weights.lambda1 < 0.0) throw std::invalid_argument("joint_loss: negative weight");
  LossBreakdown b;
  b.l_ce = l_ce;
  b.d_avg = d_avg;
  if (!weights.use_det_loss) {
    b.l_joint = l_ce;
    return b;
  }
  b.l_sem = l_sem;
  b.l_lang = l_lang;
  b.l_recons = l_recons;
  b.l_det = exact_sum({l_sem, l_lang, weights.lambda1 * l_recons});
  b.l_joint = l_ce + weights.lambda * d_avg * b.l_det;
  return b;
}

std::string to_record(std::uint64_t step, const LossBreakdown& b) {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["l_ce"] = b.l_ce;
  j["l_sem"] = b.l_sem;
  j["l_lang"] = b.l_lang;
  j["l_recons"] = b.l_recons;
  j["l_det"] = b.l_det;
  j["l_joint"] = b.l_joint;
  j["d_avg"] = b.d_avg;
  return j.dump();
}

LossBreakdown from_record(const std::string& line, std::uint64_t* step) {
  const auto j = nlohmann::json::parse(line);
  LossBreakdown b;
  b.l_ce = j.at("l_ce").get<double>();
  b.l_sem = j.at("l_sem").get<double>();
  b.l_lang = j.at("l_lang").get<double>();
  b.l_recons = j.at("l_recons").get<double>();
  b.l_det = j.at("l_det").get<double>();
  b.l_joint = j.at("l_joint").get<double>();
  b.d_avg = j.at("d_avg").get<double>();
  if (step) *step = j.at("step").get<std::uint64_t>();
  return b;
}

#define SLMT_INSTANTIATE(T)                                                                                     \
  template Tensor<T> pool(const Tensor<T>&, std::span<const std::uint8_t>);                                     \
  template Tensor<T> contrastive_loss(const Tensor<T>&, std::span<const PairSample>, double);                   \
  template Tensor<T> semantic_loss(const Tensor<T>&, std::span<const PairSample>, double);                      \
  template Tensor<T> language_loss(const Tensor<T>&, std::span<const PairSample>, double);                      \
  template Tensor<T> reconstruction_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const TokenMatrix&); \
  template Tensor<T> cross_entropy(const Tensor<T>&, const TokenMatrix&, double);

SLMT_INSTANTIATE(float)
SLMT_INSTANTIATE(double)

#undef SLMT_INSTANTIATE

}  // namespace slmt::objectives
