#include "slmt/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace slmt::eval {

void DecodeConfig::validate() const {
  if (beam == 0) throw std::invalid_argument("decode: beam must be >= 1");
  if (!(length_penalty >= 0.0)) throw std::invalid_argument("decode: length penalty must be >= 0");
}

std::vector<double> log_softmax(std::span<const double> logits) {
  const double peak = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double v : logits) total += std::exp(v - peak);
  const double log_total = peak + std::log(total);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - log_total;
  return out;
}

namespace {

double normalized(double logprob, std::size_t length, double penalty) {
  return logprob / std::pow(static_cast<double>(length), penalty);
}

struct Candidate {
  double logprob;
  std::size_t row;
  std::int32_t token;
};

struct Live {
  std::vector<std::int32_t> tokens;
  double logprob = 0.0;
};

}  // namespace

Hypothesis beam_search(StepScorer& scorer, std::int32_t first, std::int32_t eos, std::size_t max_len,
                       std::size_t beam, double length_penalty) {
  if (beam == 0) throw std::invalid_argument("beam_search: beam must be >= 1");
  if (max_len == 0) throw std::invalid_argument("beam_search: max_len must be >= 1");
  const std::size_t vocab = scorer.vocab_size();
  std::vector<Live> live(1);
  std::vector<std::int32_t> feed{first};
  std::vector<Hypothesis> finished;
  std::vector<Candidate> cands;

  for (std::size_t t = 1; t <= max_len && !live.empty(); ++t) {
    const auto lp = scorer.advance(feed);
    if (lp.size() != live.size() * vocab) throw std::logic_error("beam_search: scorer returned a wrong row count");
    cands.clear();
    for (std::size_t r = 0; r < live.size(); ++r) {
      if (t == max_len) {
        cands.push_back({live[r].logprob + lp[r * vocab + static_cast<std::size_t>(eos)], r, eos});
        continue;
      }
      for (std::size_t w = 0; w < vocab; ++w) {
        cands.push_back({live[r].logprob + lp[r * vocab + w], r, static_cast<std::int32_t>(w)});
      }
    }
    const std::size_t pool = std::min(cands.size(), 2 * beam);
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(pool), cands.end(),
                      [](const Candidate& a, const Candidate& b) {
                        if (a.logprob != b.logprob) return a.logprob > b.logprob;
                        if (a.row != b.row) return a.row < b.row;
                        return a.token < b.token;
                      });
    std::vector<Live> next;
    std::vector<std::size_t> rows;
    for (std::size_t rank = 0; rank < pool; ++rank) {
      const auto& c = cands[rank];
      if (c.token == eos) {
        if (rank < beam) {
          Hypothesis h;
          h.tokens = live[c.row].tokens;
          h.logprob = c.logprob;
          h.score = normalized(c.logprob, h.tokens.size() + 1, length_penalty);
          finished.push_back(std::move(h));
        }
      } else if (next.size() < beam) {
        Live l{live[c.row].tokens, c.logprob};
        l.tokens.push_back(c.token);
        next.push_back(std::move(l));
        rows.push_back(c.row);
      }
    }
    if (finished.size() >= beam) break;
    live = std::move(next);
    if (live.empty()) break;
    scorer.reorder(rows);
    feed.clear();
    for (const auto& l : live) feed.push_back(l.tokens.back());
  }
  if (finished.empty()) throw std::logic_error("beam_search: no hypothesis finished");
  // Stable: among equal scores the earliest finished wins.
  auto best = std::max_element(finished.begin(), finished.end(),
                               [](const Hypothesis& a, const Hypothesis& b) { return a.score < b.score; });
  return *best;
}

Hypothesis greedy_search(StepScorer& scorer, std::int32_t first, std::int32_t eos, std::size_t max_len,
                         double length_penalty) {
  if (max_len == 0) throw std::invalid_argument("greedy_search: max_len must be >= 1");
  Hypothesis h;
  std::int32_t feed = first;
  for (std::size_t t = 1; t <= max_len; ++t) {
    const auto lp = scorer.advance(std::span<const std::int32_t>(&feed, 1));
    std::int32_t pick = eos;
    if (t < max_len) {
      pick = 0;
      for (std::size_t w = 1; w < lp.size(); ++w) {
        if (lp[w] > lp[static_cast<std::size_t>(pick)]) pick = static_cast<std::int32_t>(w);
      }
    }
    h.logprob += lp[static_cast<std::size_t>(pick)];
    if (pick == eos) break;
    h.tokens.push_back(pick);
    feed = pick;
  }
  h.score = normalized(h.logprob, h.tokens.size() + 1, length_penalty);
  return h;
}

template <typename T>
ModelScorer<T>::ModelScorer(const TranslationModel<T>& model, const TokenMatrix& source)
    : model_(&model), state_(model.begin_decode(source)) {}

template <typename T>
std::vector<double> ModelScorer<T>::advance(std::span<const std::int32_t> tokens) {
  const auto logits = model_->step(state_, tokens);
  const std::size_t vocab = vocab_size();
  std::vector<double> out(tokens.size() * vocab);
  std::vector<double> row(vocab);
  const auto data = logits.data();
  for (std::size_t r = 0; r < tokens.size(); ++r) {
    for (std::size_t w = 0; w < vocab; ++w) row[w] = static_cast<double>(data[r * vocab + w]);
    auto lp = log_softmax(row);
    std::copy(lp.begin(), lp.end(), out.begin() + static_cast<std::ptrdiff_t>(r * vocab));
  }
  return out;
}

template <typename T>
void ModelScorer<T>::reorder(std::span<const std::size_t> rows) {
  model_->reorder(state_, rows);
}

std::size_t resolve_max_len(const DecodeConfig& config, std::size_t source_len, std::size_t model_max_len) {
  if (model_max_len < 2) throw std::invalid_argument("decode: model max_len too small");
  std::size_t cap = config.max_len ? config.max_len : 2 * source_len + 10;
  return std::min(cap, model_max_len - 1);
}

template <typename T>
std::vector<std::int32_t> translate(const TranslationModel<T>& model, const std::vector<std::int32_t>& source,
                                    std::int32_t target_tag, std::int32_t eos, const DecodeConfig& config) {
  config.validate();
  if (source.empty()) throw std::invalid_argument("translate: empty source");
  ModelScorer<T> scorer(model, TokenMatrix::from_rows({source}, 0));
  const auto max_len = resolve_max_len(config, source.size(), model.config().max_len);
  return beam_search(scorer, target_tag, eos, max_len, config.beam, config.length_penalty).tokens;
}

template <typename T>
std::vector<std::vector<std::int32_t>> translate_greedy_batch(const TranslationModel<T>& model,
                                                              const std::vector<std::vector<std::int32_t>>& sources,
                                                              std::int32_t target_tag, std::int32_t eos,
                                                              const DecodeConfig& config) {
  if (sources.empty()) return {};
  std::size_t longest = 0;
  for (const auto& s : sources) {
    if (s.empty()) throw std::invalid_argument("translate: empty source");
    longest = std::max(longest, s.size());
  }
  const std::size_t max_len = resolve_max_len(config, longest, model.config().max_len);
  std::vector<std::size_t> limits(sources.size());
  for (std::size_t i = 0; i < sources.size(); ++i) {
    limits[i] = resolve_max_len(config, sources[i].size(), model.config().max_len);
  }
  auto state = model.begin_decode(TokenMatrix::from_rows(sources, 0));
  const std::size_t vocab = model.config().vocab_size;
  std::vector<std::vector<std::int32_t>> out(sources.size());
  std::vector<bool> done(sources.size(), false);
  std::vector<std::int32_t> feed(sources.size(), target_tag);
  for (std::size_t t = 1; t <= max_len; ++t) {
    const auto logits = model.step(state, feed);
    const auto data = logits.data();
    bool all_done = true;
    for (std::size_t r = 0; r < sources.size(); ++r) {
      if (done[r]) continue;
      std::int32_t pick = eos;
      if (t < limits[r]) {
        pick = 0;
        for (std::size_t w = 1; w < vocab; ++w) {
          if (data[r * vocab + w] > data[r * vocab + static_cast<std::size_t>(pick)]) pick = static_cast<std::int32_t>(w);
        }
      }
      if (pick == eos) {
        done[r] = true;
      } else {
        out[r].push_back(pick);
        feed[r] = pick;
        all_done = false;
      }
    }
    if (all_done) break;
  }
  return out;
}

template class ModelScorer<float>;
template class ModelScorer<double>;
template std::vector<std::int32_t> translate(const TranslationModel<float>&, const std::vector<std::int32_t>&,
                                             std::int32_t, std::int32_t, const DecodeConfig&);
template std::vector<std::int32_t> translate(const TranslationModel<double>&, const std::vector<std::int32_t>&,
                                             std::int32_t, std::int32_t, const DecodeConfig&);
template std::vector<std::vector<std::int32_t>> translate_greedy_batch(const TranslationModel<float>&,
                                                                       const std::vector<std::vector<std::int32_t>>&,
                                                                       std::int32_t, std::int32_t,
                                                                       const DecodeConfig&);
template std::vector<std::vector<std::int32_t>> translate_greedy_batch(const TranslationModel<double>&,
                                                                       const std::vector<std::vector<std::int32_t>>&,
                                                                       std::int32_t, std::int32_t,
                                                                       const DecodeConfig&);

}  // namespace slmt::eval
