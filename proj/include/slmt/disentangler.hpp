#pragma once

// Splits final encoder states into a semantic part and a language part with
// two plain feed-forward branches. The branches have no residual and no
// normalization, so their sum is a genuine reconstruction of the input.

#include <optional>

#include "slmt/config.hpp"
#include "slmt/layers.hpp"
#include "slmt/transformer.hpp"

namespace slmt {

template <typename T>
struct DisentangledStates {
  ad::Tensor<T> semantic;  // h_sem [b, len, d_model]
  ad::Tensor<T> language;  // h_lang [b, len, d_model]
  ad::Tensor<T> original;  // h, the encoder states both branches consumed
};

template <typename T>
class Disentangler {
 public:
  Disentangler(const ModelConfig& config, ParameterSet<T>& params, std::mt19937_64& init_rng)
      : d_model_(config.d_model),
        semantic_(params, "disentangler.semantic", config.d_model, config.ffn_dim, config.d_model, init_rng),
        language_(params, "disentangler.language", config.d_model, config.ffn_dim, config.d_model, init_rng) {}

  DisentangledStates<T> disentangle(const ad::Tensor<T>& states) const {
    if (states.rank() < 1 || states.shape().back() != d_model_) {
      throw ad::ShapeError("disentangle", {states.shape()}, "width must equal d_model");
    }
    return {semantic_(states), language_(states), states};
  }
  DisentangledStates<T> disentangle(const EncoderOutput<T>& enc) const { return disentangle(enc.states); }

  const nn::FeedForward<T>& semantic_branch() const { return semantic_; }
  const nn::FeedForward<T>& language_branch() const { return language_; }

 private:
  std::size_t d_model_;
  nn::FeedForward<T> semantic_;
  nn::FeedForward<T> language_;
};

// Cross-attention memory for the decoder: h_sem when the disentangler is on,
// the raw encoder states otherwise. Used identically in training and decoding.
template <typename T>
const ad::Tensor<T>& decoder_feed(const EncoderOutput<T>& enc, const std::optional<DisentangledStates<T>>& states,
                                  const ModelConfig& config) {
  if (!config.use_disentangler) return enc.states;
  if (!states) throw std::logic_error("decoder_feed: disentangler enabled but no disentangled states given");
  return states->semantic;
}

}  // namespace slmt
