#pragma once

// Decoder-side linguistic encoder and the fusion layer that merges its output
// with the decoder output.

#include <vector>

#include "slmt/config.hpp"
#include "slmt/layers.hpp"

namespace slmt {

// A short stack of causally masked encoder layers over the decoder's own
// input embeddings.
template <typename T>
class LinguisticEncoder {
 public:
  using Cache = std::vector<nn::KvCache<T>>;

  LinguisticEncoder(const ModelConfig& config, ParameterSet<T>& params, std::mt19937_64& init_rng)
      : d_model_(config.d_model) {
    for (std::size_t i = 0; i < config.n_ling_layers; ++i) {
      layers_.emplace_back(params, "lingenc.layers." + std::to_string(i), config.d_model, config.n_heads,
                           config.ffn_dim, init_rng);
    }
    norm_ = nn::LayerNorm<T>(params, "lingenc.final_ln", config.d_model);
  }

  // embedded: decoder input embeddings [b, t, d_model] -> h_lingEnc [b, t, d_model].
  ad::Tensor<T> encode(const ad::Tensor<T>& embedded, const nn::RunContext& ctx) const {
    check_width(embedded);
    auto x = embedded;
    for (const auto& layer : layers_) x = layer(x, {}, true, ctx);
    return norm_(x);
  }

  Cache start_cache() const { return Cache(layers_.size()); }

  // One new position [b, 1, d_model].
  ad::Tensor<T> step(const ad::Tensor<T>& embedded, Cache& cache, const nn::RunContext& ctx) const {
    check_width(embedded);
    auto x = embedded;
    for (std::size_t i = 0; i < layers_.size(); ++i) x = layers_[i].step(x, cache[i], ctx);
    return norm_(x);
  }

 private:
  void check_width(const ad::Tensor<T>& x) const {
    if (x.rank() != 3 || x.dim(2) != d_model_) {
      throw ad::ShapeError("linguistic_encode", {x.shape()}, "expected [b, t, d_model]");
    }
  }

  std::size_t d_model_;
  std::vector<nn::EncoderLayer<T>> layers_;
  nn::LayerNorm<T> norm_;
};

// h = outer(ReLU(inner([h_dec; h_lingEnc]))), inner: 2*d_model -> ffn_dim,
// outer: ffn_dim -> d_model.
template <typename T>
class FusionLayer {
 public:
  FusionLayer(const ModelConfig& config, ParameterSet<T>& params, std::mt19937_64& init_rng)
      : inner_(params, "fusion.inner", 2 * config.d_model, config.ffn_dim, init_rng),
        outer_(params, "fusion.outer", config.ffn_dim, config.d_model, init_rng) {}

  ad::Tensor<T> fuse(const ad::Tensor<T>& decoder_states, const ad::Tensor<T>& linguistic_states) const {
    if (decoder_states.shape() != linguistic_states.shape() || decoder_states.rank() < 1) {
      throw ad::ShapeError("fuse", {decoder_states.shape(), linguistic_states.shape()});
    }
    const std::size_t axis = decoder_states.rank() - 1;
    return outer_(ad::relu(inner_(ad::concat<T>({decoder_states, linguistic_states}, axis))));
  }

  const nn::Linear<T>& inner() const { return inner_; }
  const nn::Linear<T>& outer() const { return outer_; }

 private:
  nn::Linear<T> inner_;
  nn::Linear<T> outer_;
};

}  // namespace slmt
