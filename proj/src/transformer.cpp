#include "slmt/transformer.hpp"

#include <cmath>
#include <string>

namespace slmt {

template <typename T>
std::vector<T> sinusoidal_positions(std::size_t max_len, std::size_t d_model) {
  std::vector<T> table(max_len * d_model);
  for (std::size_t pos = 0; pos < max_len; ++pos) {
    for (std::size_t i = 0; i < d_model; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d_model));
      table[pos * d_model + i] = static_cast<T>(std::sin(static_cast<double>(pos) * freq));
      if (i + 1 < d_model) table[pos * d_model + i + 1] = static_cast<T>(std::cos(static_cast<double>(pos) * freq));
    }
  }
  return table;
}

template <typename T>
Transformer<T>::Transformer(const ModelConfig& config, ParameterSet<T>& params, std::mt19937_64& init_rng)
    : config_(config) {
  config_.validate();
  const std::size_t d = config_.d_model;
  // Token embeddings are scaled by sqrt(d) on input, so keep their own scale near 1/sqrt(d).
  embed_ = params.add_uniform("embed.weight", {config_.vocab_size, d}, std::sqrt(3.0 / static_cast<double>(d)),
                              init_rng);
  position_table_ = sinusoidal_positions<T>(config_.max_len, d);
  for (std::size_t i = 0; i < config_.n_enc_layers; ++i) {
    encoder_.emplace_back(params, "encoder.layers." + std::to_string(i), d, config_.n_heads, config_.ffn_dim,
                          init_rng);
  }
  encoder_norm_ = nn::LayerNorm<T>(params, "encoder.final_ln", d);
  for (std::size_t i = 0; i < config_.n_dec_layers; ++i) {
    decoder_.emplace_back(params, "decoder.layers." + std::to_string(i), d, config_.n_heads, config_.ffn_dim,
                          init_rng);
  }
  decoder_norm_ = nn::LayerNorm<T>(params, "decoder.final_ln", d);
}

template <typename T>
void Transformer<T>::check_ids(const TokenMatrix& m) const {
  if (m.cols == 0 || m.rows == 0) throw std::invalid_argument("empty token matrix");
  if (m.cols > config_.max_len) {
    throw std::invalid_argument("sequence length " + std::to_string(m.cols) + " exceeds max_len " +
                                std::to_string(config_.max_len));
  }
  for (auto id : m.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
      throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(config_.vocab_size));
    }
  }
}

template <typename T>
ad::Tensor<T> Transformer<T>::positions(std::size_t batch, std::size_t length, std::size_t offset) const {
  const std::size_t d = config_.d_model;
  if (offset + length > config_.max_len) {
    throw std::invalid_argument("position " + std::to_string(offset + length) + " exceeds max_len " +
                                std::to_string(config_.max_len));
  }
  std::vector<T> values(batch * length * d);
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(position_table_.data() + offset * d, length * d, values.data() + b * length * d);
  }
  return Tensor::from_data({batch, length, d}, std::move(values));
}

template <typename T>
EncoderOutput<T> Transformer<T>::encode(const TokenMatrix& source, const nn::RunContext& ctx) const {
  check_ids(source);
  const T emb_scale = T(std::sqrt(static_cast<double>(config_.d_model)));
  auto x = ad::scale(ad::embedding(embed_, std::span<const std::int32_t>(source.ids), {source.rows, source.cols}),
                     emb_scale);
  x = ctx.drop(ad::add(x, positions(source.rows, source.cols, 0)));
  for (const auto& layer : encoder_) x = layer(x, source.mask, false, ctx);
  return {encoder_norm_(x), source.mask, source.rows, source.cols};
}

template <typename T>
ad::Tensor<T> Transformer<T>::embed_target(const TokenMatrix& decoder_input, const nn::RunContext& ctx) const {
  check_ids(decoder_input);
  const T emb_scale = T(std::sqrt(static_cast<double>(config_.d_model)));
  auto x = ad::scale(
      ad::embedding(embed_, std::span<const std::int32_t>(decoder_input.ids), {decoder_input.rows, decoder_input.cols}),
      emb_scale);
  return ctx.drop(ad::add(x, positions(decoder_input.rows, decoder_input.cols, 0)));
}

template <typename T>
ad::Tensor<T> Transformer<T>::embed_step(std::span<const std::int32_t> ids, std::size_t position,
                                         const nn::RunContext& ctx) const {
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
      throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
    }
  }
  const T emb_scale = T(std::sqrt(static_cast<double>(config_.d_model)));
  auto x = ad::scale(ad::embedding(embed_, ids, {ids.size(), 1}), emb_scale);
  return ctx.drop(ad::add(x, positions(ids.size(), 1, position)));
}

template <typename T>
ad::Tensor<T> Transformer<T>::decode_embedded(const Tensor& embedded, const Tensor& memory,
                                              std::span<const std::uint8_t> memory_mask,
                                              const nn::RunContext& ctx) const {
  if (embedded.rank() != 3 || embedded.dim(1) == 0) {
    throw ad::ShapeError("decode", {embedded.shape()}, "zero-length target");
  }
  if (memory.rank() != 3 || memory.dim(0) != embedded.dim(0) || memory.dim(2) != config_.d_model ||
      embedded.dim(2) != config_.d_model) {
    throw ad::ShapeError("decode", {embedded.shape(), memory.shape()});
  }
  auto x = embedded;
  for (const auto& layer : decoder_) x = layer(x, memory, memory_mask, ctx);
  return decoder_norm_(x);
}

template <typename T>
ad::Tensor<T> Transformer<T>::decode_teacher_forced(const Tensor& memory, std::span<const std::uint8_t> memory_mask,
                                                    const TokenMatrix& decoder_input,
                                                    const nn::RunContext& ctx) const {
  if (decoder_input.cols == 0) throw std::invalid_argument("decode: zero-length target");
  return decode_embedded(embed_target(decoder_input, ctx), memory, memory_mask, ctx);
}

template <typename T>
DecoderCache<T> Transformer<T>::start_cache(const Tensor& memory) const {
  DecoderCache<T> cache;
  cache.owner = this;
  cache.memory_id = memory.id();
  for (const auto& layer : decoder_) cache.layers.push_back({{}, layer.project_memory(memory)});
  return cache;
}

template <typename T>
ad::Tensor<T> Transformer<T>::decode_step(DecoderCache<T>& cache, const Tensor& embedded, const Tensor& memory,
                                          std::span<const std::uint8_t> memory_mask,
                                          const nn::RunContext& ctx) const {
  if (cache.owner != this) throw CacheError("decode_step: cache belongs to a different model");
  if (cache.memory_id != memory.id()) throw CacheError("decode_step: cache was built for a different encoder feed");
  if (embedded.rank() != 3 || embedded.dim(1) != 1 || embedded.dim(2) != config_.d_model) {
    throw ad::ShapeError("decode_step", {embedded.shape()});
  }
  auto x = embedded;
  for (std::size_t i = 0; i < decoder_.size(); ++i) x = decoder_[i].step(x, cache.layers[i], memory_mask, ctx);
  ++cache.length;
  return decoder_norm_(x);
}

template <typename T>
ad::Tensor<T> Transformer<T>::output_logits(const Tensor& states) const {
  if (states.rank() < 1 || states.shape().back() != config_.d_model) {
    throw ad::ShapeError("output_logits", {states.shape()}, "width must equal d_model");
  }
  return ad::matmul(states, embed_, true);
}

template class Transformer<float>;
template class Transformer<double>;
template std::vector<float> sinusoidal_positions<float>(std::size_t, std::size_t);
template std::vector<double> sinusoidal_positions<double>(std::size_t, std::size_t);

}  // namespace slmt
