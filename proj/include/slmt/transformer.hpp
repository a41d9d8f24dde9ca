#pragma once

// Encoder-decoder Transformer with shared source/target embeddings, sinusoidal
// positions, pre-norm blocks and an output projection tied to the embedding.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "slmt/config.hpp"
#include "slmt/layers.hpp"
#include "slmt/params.hpp"
#include "slmt/tokens.hpp"

namespace slmt {

// h(x): final encoder states [batch, src_len, d_model] and the source mask.
template <typename T>
struct EncoderOutput {
  ad::Tensor<T> states;
  std::vector<std::uint8_t> mask;
  std::size_t batch = 0;
  std::size_t length = 0;
};

// Incremental decoder state. Bound to one Transformer instance and one
// encoder memory tensor.
template <typename T>
struct DecoderCache {
  std::vector<nn::DecoderLayerCache<T>> layers;
  const void* owner = nullptr;
  std::uint64_t memory_id = 0;
  std::size_t length = 0;
};

class CacheError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename T>
class Transformer {
 public:
  using Tensor = ad::Tensor<T>;

  Transformer(const ModelConfig& config, ParameterSet<T>& params, std::mt19937_64& init_rng);

  const ModelConfig& config() const { return config_; }
  const Tensor& embedding_table() const { return embed_; }

  EncoderOutput<T> encode(const TokenMatrix& source, const nn::RunContext& ctx) const;

  // Token embedding * sqrt(d) + position encoding, then dropout. This is the
  // decoder's input and also the linguistic encoder's input.
  Tensor embed_target(const TokenMatrix& decoder_input, const nn::RunContext& ctx) const;
  Tensor embed_step(std::span<const std::int32_t> ids, std::size_t position, const nn::RunContext& ctx) const;

  // Causal decoder over embedded inputs -> [batch, tgt_len, d_model].
  Tensor decode_embedded(const Tensor& embedded, const Tensor& memory, std::span<const std::uint8_t> memory_mask,
                         const nn::RunContext& ctx) const;
  Tensor decode_teacher_forced(const Tensor& memory, std::span<const std::uint8_t> memory_mask,
                               const TokenMatrix& decoder_input, const nn::RunContext& ctx) const;

  DecoderCache<T> start_cache(const Tensor& memory) const;
  // Feeds one embedded position [batch, 1, d_model]; returns the decoder state
  // for it, equal to the last position of the teacher-forced run.
  Tensor decode_step(DecoderCache<T>& cache, const Tensor& embedded, const Tensor& memory,
                     std::span<const std::uint8_t> memory_mask, const nn::RunContext& ctx) const;

  // states [..., d_model] -> logits [..., vocab]. No softmax.
  Tensor output_logits(const Tensor& states) const;

  void check_ids(const TokenMatrix& m) const;

 private:
  Tensor positions(std::size_t batch, std::size_t length, std::size_t offset) const;

  ModelConfig config_;
  Tensor embed_;
  std::vector<T> position_table_;
  std::vector<nn::EncoderLayer<T>> encoder_;
  nn::LayerNorm<T> encoder_norm_;
  std::vector<nn::DecoderLayer<T>> decoder_;
  nn::LayerNorm<T> decoder_norm_;
};

// Sinusoidal position table [max_len, d_model].
template <typename T>
std::vector<T> sinusoidal_positions(std::size_t max_len, std::size_t d_model);

}  // namespace slmt
