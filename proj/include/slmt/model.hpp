#pragma once

// The full translation system: Transformer, optional disentangler on the
// encoder side, optional linguistic encoder + fusion on the decoder side. With
// every component switched off it is exactly the plain Transformer: the
// optional parts then own no parameters and draw no random numbers.

#include <memory>
#include <optional>
#include <span>

#include "slmt/disentangler.hpp"
#include "slmt/linguistic.hpp"
#include "slmt/transformer.hpp"

namespace slmt {

// Dropout contexts, one per component so that toggling a component leaves the
// draws of the others unchanged.
struct ForwardContexts {
  nn::RunContext encoder;
  nn::RunContext decoder;
  nn::RunContext linguistic;

  static ForwardContexts eval() { return {}; }
};

template <typename T>
struct EncodedSource {
  EncoderOutput<T> encoder;
  std::optional<DisentangledStates<T>> disentangled;
  ad::Tensor<T> memory;  // what the decoder cross-attends to
};

template <typename T>
struct ModelForward {
  EncodedSource<T> source;
  ad::Tensor<T> decoder_embedded;   // decoder input embeddings
  ad::Tensor<T> decoder_states;     // h_dec
  ad::Tensor<T> linguistic_states;  // h_lingEnc, undefined when the component is off
  ad::Tensor<T> output_states;      // fused states, or h_dec when fusion is off
  ad::Tensor<T> logits;
};

template <typename T>
struct DecodeState {
  EncodedSource<T> source;
  DecoderCache<T> decoder;
  typename LinguisticEncoder<T>::Cache linguistic;
  std::size_t length = 0;
};

template <typename T>
class TranslationModel {
 public:
  using Tensor = ad::Tensor<T>;

  TranslationModel(const ModelConfig& config, std::uint64_t seed);

  TranslationModel(const TranslationModel&) = delete;
  TranslationModel& operator=(const TranslationModel&) = delete;

  const ModelConfig& config() const { return config_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }
  const Transformer<T>& transformer() const { return *transformer_; }
  const Disentangler<T>* disentangler() const { return disentangler_.get(); }
  const LinguisticEncoder<T>* linguistic_encoder() const { return linguistic_.get(); }
  const FusionLayer<T>* fusion() const { return fusion_.get(); }

  EncodedSource<T> encode_source(const TokenMatrix& source, const nn::RunContext& ctx) const;

  // Teacher-forced pass over a batch.
  ModelForward<T> forward(const TokenMatrix& source, const TokenMatrix& decoder_input,
                          const ForwardContexts& ctx) const;

  // Output side given an encoded source: decoder, linguistic encoder, fusion, logits.
  ModelForward<T> forward_decoder(EncodedSource<T> source, const TokenMatrix& decoder_input,
                                  const ForwardContexts& ctx) const;

  // Incremental decoding in eval mode.
  DecodeState<T> begin_decode(const TokenMatrix& source) const;
  // Feeds ids[b] at the next position; returns logits [b, vocab].
  Tensor step(DecodeState<T>& state, std::span<const std::int32_t> ids) const;
  // Same, returning the logit-ready state [b, 1, d_model].
  Tensor step_states(DecodeState<T>& state, std::span<const std::int32_t> ids) const;
  // Keeps/duplicates rows of every cached tensor (beam bookkeeping).
  void reorder(DecodeState<T>& state, std::span<const std::size_t> rows) const;

 private:
  ModelConfig config_;
  ParameterSet<T> params_;
  std::unique_ptr<Transformer<T>> transformer_;
  std::unique_ptr<Disentangler<T>> disentangler_;
  std::unique_ptr<LinguisticEncoder<T>> linguistic_;
  std::unique_ptr<FusionLayer<T>> fusion_;
};

}  // namespace slmt
