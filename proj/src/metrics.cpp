#include "slmt/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <stdexcept>

namespace slmt::eval {

BleuStats& BleuStats::operator+=(const BleuStats& o) {
  for (std::size_t n = 0; n < 4; ++n) {
    matches[n] += o.matches[n];
    totals[n] += o.totals[n];
  }
  hyp_len += o.hyp_len;
  ref_len += o.ref_len;
  return *this;
}

namespace {

std::map<std::vector<std::string>, std::size_t> ngram_counts(const Sentence& s, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i) {
    ++counts[std::vector<std::string>(s.begin() + static_cast<std::ptrdiff_t>(i),
                                      s.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

}  // namespace

BleuStats sentence_stats(const Sentence& hyp, const Sentence& ref) {
  BleuStats st;
  st.hyp_len = hyp.size();
  st.ref_len = ref.size();
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto h = ngram_counts(hyp, n);
    const auto r = ngram_counts(ref, n);
    for (const auto& [gram, count] : h) {
      st.totals[n - 1] += count;
      if (auto it = r.find(gram); it != r.end()) st.matches[n - 1] += std::min(count, it->second);
    }
  }
  return st;
}

double bleu_from_stats(const BleuStats& st) {
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (st.matches[n] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(st.matches[n]) / static_cast<double>(st.totals[n]));
  }
  const double ratio = static_cast<double>(st.ref_len) / static_cast<double>(st.hyp_len);
  const double bp = std::exp(std::min(0.0, 1.0 - ratio));
  return 100.0 * bp * std::exp(log_sum / 4.0);
}

double corpus_bleu(const std::vector<Sentence>& hyps, const std::vector<Sentence>& refs) {
  if (hyps.empty()) throw std::invalid_argument("corpus_bleu: empty corpus");
  if (hyps.size() != refs.size()) throw std::invalid_argument("corpus_bleu: hypothesis/reference counts differ");
  BleuStats total;
  for (std::size_t i = 0; i < hyps.size(); ++i) total += sentence_stats(hyps[i], refs[i]);
  return bleu_from_stats(total);
}

bool is_special_token(const std::string& token) { return !token.empty() && token.front() == '<'; }

std::optional<int> token_language(const std::string& token, const std::vector<corpus::LanguageSpec>& languages) {
  if (token.empty() || is_special_token(token)) return std::nullopt;
  std::uint32_t index = 0;
  auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), index);
  if (ec != std::errc() || ptr != token.data() + token.size()) return std::nullopt;
  for (const auto& lang : languages) {
    if (lang.owns(index)) return lang.id;
  }
  return std::nullopt;
}

bool in_target(const Sentence& hyp, int target, const std::vector<corpus::LanguageSpec>& languages) {
  std::size_t counted = 0;
  std::size_t hits = 0;
  for (const auto& tok : hyp) {
    if (is_special_token(tok)) continue;
    ++counted;
    if (token_language(tok, languages) == target) ++hits;
  }
  return counted > 0 && 2 * hits > counted;
}

double off_target_rate(const std::vector<Sentence>& hyps, int target,
                       const std::vector<corpus::LanguageSpec>& languages) {
  if (hyps.empty()) return 0.0;
  std::size_t off = 0;
  for (const auto& h : hyps) off += in_target(h, target, languages) ? 0 : 1;
  return static_cast<double>(off) / static_cast<double>(hyps.size());
}

InTargetResult in_target_bleu(const std::vector<std::vector<Sentence>>& systems, const std::vector<Sentence>& refs,
                              int target, const std::vector<corpus::LanguageSpec>& languages) {
  if (systems.size() < 2) throw std::invalid_argument("in_target_bleu: need at least two systems");
  for (const auto& sys : systems) {
    if (sys.size() != refs.size()) throw std::invalid_argument("in_target_bleu: systems are not aligned");
  }
  InTargetResult out;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    bool all = true;
    for (const auto& sys : systems) all = all && in_target(sys[i], target, languages);
    if (all) out.subset.push_back(i);
  }
  if (out.subset.empty()) return out;
  std::vector<Sentence> sub_refs;
  for (auto i : out.subset) sub_refs.push_back(refs[i]);
  for (const auto& sys : systems) {
    std::vector<Sentence> sub;
    for (auto i : out.subset) sub.push_back(sys[i]);
    out.bleu.push_back(corpus_bleu(sub, sub_refs));
  }
  return out;
}

}  // namespace slmt::eval
