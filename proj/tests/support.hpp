#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "slmt/corpus.hpp"
#include "slmt/model.hpp"

namespace slmt::testing {

inline corpus::GenerateOptions small_corpus_options(std::uint64_t seed = 7) {
  corpus::GenerateOptions o;
  o.n_languages = 3;
  o.pairs_per_direction = 24;
  o.valid_size = 4;
  o.test_size = 6;
  o.min_len = 2;
  o.max_len = 5;
  o.semantic_vocab = 6;
  o.seed = seed;
  return o;
}

inline ModelConfig tiny_config(std::size_t vocab, bool dis, bool det, bool ling) {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.ffn_dim = 12;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.n_ling_layers = 1;
  c.vocab_size = vocab;
  c.max_len = 24;
  c.dropout_p = 0.0;
  c.use_disentangler = dis;
  c.use_det_loss = det;
  c.use_ling_encoder = ling;
  return c;
}

struct FdResult {
  std::size_t coords = 0;
  double max_rel_error = 0.0;
  std::string worst;
};

// Central differences over a seeded subset of parameter coordinates, compared
// with the analytic gradient left on the parameters by one backward of `loss`.
// Relative error uses the same 1e-4 denominator floor as ad::grad_check.
// `value`, when given, is the function differenced numerically instead of `loss`.
inline FdResult fd_check_parameters(ParameterSet<double>& params, const std::function<ad::Tensor<double>()>& loss,
                                    std::size_t per_tensor, std::uint64_t seed, double step = 1e-5,
                                    std::function<double()> value = nullptr) {
  if (!value) value = [&] { return loss().item(); };
  params.zero_grad();
  ad::backward(loss());
  std::map<std::string, std::vector<double>> analytic;
  for (auto& [name, t] : params) {
    analytic[name] = t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                  : std::vector<double>(t.numel(), 0.0);
  }
  params.zero_grad();

  FdResult out;
  std::mt19937_64 rng(seed);
  ad::NoGradGuard no_grad;
  for (auto& [name, t] : params) {
    for (std::size_t k = 0; k < std::min(per_tensor, t.numel()); ++k) {
      const std::size_t i = per_tensor >= t.numel() ? k : rng() % t.numel();
      auto data = t.mutable_data();
      const double saved = data[i];
      data[i] = saved + step;
      const double up = value();
      data[i] = saved - step;
      const double down = value();
      data[i] = saved;
      const double numeric = (up - down) / (2 * step);
      const double a = analytic[name][i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-4});
      ++out.coords;
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        out.worst = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return out;
}

}  // namespace slmt::testing
