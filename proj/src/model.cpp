#include "slmt/model.hpp"

#include "slmt/rng.hpp"

namespace slmt {

namespace {

// Gathers leading-axis groups of a head-split tensor [b*h, t, dh].
template <typename T>
ad::Tensor<T> gather_groups(const ad::Tensor<T>& x, std::size_t batch, std::span<const std::size_t> rows) {
  if (!x.defined()) return x;
  const std::size_t per_row = x.numel() / batch;
  const std::size_t heads = x.dim(0) / batch;
  auto flat = ad::reshape(x, {batch, per_row});
  auto picked = ad::gather_rows(flat, rows);
  return ad::reshape(picked, {rows.size() * heads, x.dim(1), x.dim(2)});
}

}  // namespace

template <typename T>
TranslationModel<T>::TranslationModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  RngStreams streams(seed);
  auto transformer_rng = streams.stream("init.transformer");
  transformer_ = std::make_unique<Transformer<T>>(config_, params_, transformer_rng);
  if (config_.use_disentangler) {
    auto rng = streams.stream("init.disentangler");
    disentangler_ = std::make_unique<Disentangler<T>>(config_, params_, rng);
  }
  if (config_.use_ling_encoder) {
    auto ling_rng = streams.stream("init.lingenc");
    linguistic_ = std::make_unique<LinguisticEncoder<T>>(config_, params_, ling_rng);
    auto fusion_rng = streams.stream("init.fusion");
    fusion_ = std::make_unique<FusionLayer<T>>(config_, params_, fusion_rng);
  }
}

template <typename T>
EncodedSource<T> TranslationModel<T>::encode_source(const TokenMatrix& source, const nn::RunContext& ctx) const {
  EncodedSource<T> out;
  out.encoder = transformer_->encode(source, ctx);
  if (disentangler_) out.disentangled = disentangler_->disentangle(out.encoder);
  out.memory = decoder_feed(out.encoder, out.disentangled, config_);
  return out;
}

template <typename T>
ModelForward<T> TranslationModel<T>::forward(const TokenMatrix& source, const TokenMatrix& decoder_input,
                                             const ForwardContexts& ctx) const {
  return forward_decoder(encode_source(source, ctx.encoder), decoder_input, ctx);
}

template <typename T>
ModelForward<T> TranslationModel<T>::forward_decoder(EncodedSource<T> source, const TokenMatrix& decoder_input,
                                                     const ForwardContexts& ctx) const {
  ModelForward<T> out;
  out.source = std::move(source);
  if (decoder_input.rows != out.source.encoder.batch) {
    throw ad::ShapeError("forward", {{decoder_input.rows}, {out.source.encoder.batch}}, "batch sizes differ");
  }
  out.decoder_embedded = transformer_->embed_target(decoder_input, ctx.decoder);
  out.decoder_states =
      transformer_->decode_embedded(out.decoder_embedded, out.source.memory, out.source.encoder.mask, ctx.decoder);
  if (linguistic_) {
    out.linguistic_states = linguistic_->encode(out.decoder_embedded, ctx.linguistic);
    out.output_states = fusion_->fuse(out.decoder_states, out.linguistic_states);
  } else {
    out.output_states = out.decoder_states;
  }
  out.logits = transformer_->output_logits(out.output_states);
  return out;
}

template <typename T>
DecodeState<T> TranslationModel<T>::begin_decode(const TokenMatrix& source) const {
  ad::NoGradGuard no_grad;
  DecodeState<T> state;
  state.source = encode_source(source, nn::RunContext{});
  state.decoder = transformer_->start_cache(state.source.memory);
  if (linguistic_) state.linguistic = linguistic_->start_cache();
  return state;
}

template <typename T>
ad::Tensor<T> TranslationModel<T>::step_states(DecodeState<T>& state, std::span<const std::int32_t> ids) const {
  ad::NoGradGuard no_grad;
  const nn::RunContext eval{};
  if (ids.size() != state.source.encoder.batch) {
    throw ad::ShapeError("step", {{ids.size()}, {state.source.encoder.batch}}, "one id per row");
  }
  auto embedded = transformer_->embed_step(ids, state.length, eval);
  auto h = transformer_->decode_step(state.decoder, embedded, state.source.memory, state.source.encoder.mask, eval);
  if (linguistic_) h = fusion_->fuse(h, linguistic_->step(embedded, state.linguistic, eval));
  ++state.length;
  return h;
}

template <typename T>
ad::Tensor<T> TranslationModel<T>::step(DecodeState<T>& state, std::span<const std::int32_t> ids) const {
  ad::NoGradGuard no_grad;
  auto h = step_states(state, ids);
  return ad::reshape(transformer_->output_logits(h), {ids.size(), config_.vocab_size});
}

template <typename T>
void TranslationModel<T>::reorder(DecodeState<T>& state, std::span<const std::size_t> rows) const {
  ad::NoGradGuard no_grad;
  auto& enc = state.source.encoder;
  const std::size_t batch = enc.batch;
  const std::size_t len = enc.length;
  auto pick = [&](const ad::Tensor<T>& t) { return t.defined() ? ad::gather_rows(t, rows) : t; };
  enc.states = pick(enc.states);
  std::vector<std::uint8_t> mask(rows.size() * len);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(enc.mask.data() + rows[i] * len, len, mask.data() + i * len);
  }
  enc.mask = std::move(mask);
  enc.batch = rows.size();
  if (state.source.disentangled) {
    auto& d = *state.source.disentangled;
    d.semantic = pick(d.semantic);
    d.language = pick(d.language);
    d.original = enc.states;
  }
  state.source.memory = config_.use_disentangler ? state.source.disentangled->semantic : enc.states;
  for (auto& layer : state.decoder.layers) {
    layer.self.keys = gather_groups(layer.self.keys, batch, rows);
    layer.self.values = gather_groups(layer.self.values, batch, rows);
    layer.cross.keys = gather_groups(layer.cross.keys, batch, rows);
    layer.cross.values = gather_groups(layer.cross.values, batch, rows);
  }
  state.decoder.memory_id = state.source.memory.id();
  for (auto& cache : state.linguistic) {
    cache.keys = gather_groups(cache.keys, batch, rows);
    cache.values = gather_groups(cache.values, batch, rows);
  }
}

template class TranslationModel<float>;
template class TranslationModel<double>;

}  // namespace slmt
