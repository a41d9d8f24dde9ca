#pragma once

// Building blocks shared by the encoder, decoder, disentangler and the
// linguistic encoder. All blocks are pre-norm.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "slmt/autodiff.hpp"
#include "slmt/params.hpp"

namespace slmt::nn {

template <typename T>
using Tensor = ad::Tensor<T>;

// Train/eval switch plus the dropout stream for one forward pass.
struct RunContext {
  bool training = false;
  double dropout_p = 0.0;
  std::mt19937_64* rng = nullptr;

  template <typename T>
  Tensor<T> drop(const Tensor<T>& x) const {
    if (!training || dropout_p == 0.0) return x;
    return ad::dropout(x, dropout_p, true, *rng);
  }
};

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(ParameterSet<T>& params, const std::string& prefix, std::size_t in, std::size_t out,
         std::mt19937_64& rng)
      : in_(in), out_(out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight_ = params.add_uniform(prefix + ".weight", {in, out}, bound, rng);
    bias_ = params.add_uniform(prefix + ".bias", {out}, bound, rng);
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    return ad::add_bias(ad::matmul(x, weight_), bias_);
  }

  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }
  const Tensor<T>& weight() const { return weight_; }
  const Tensor<T>& bias() const { return bias_; }

 private:
  std::size_t in_ = 0, out_ = 0;
  Tensor<T> weight_, bias_;
};

template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterSet<T>& params, const std::string& prefix, std::size_t dim) {
    gain_ = params.add_constant(prefix + ".gain", {dim}, T(1));
    bias_ = params.add_constant(prefix + ".bias", {dim}, T(0));
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return ad::layer_norm(x, gain_, bias_); }

 private:
  Tensor<T> gain_, bias_;
};

// Linear -> ReLU -> Linear.
template <typename T>
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(ParameterSet<T>& params, const std::string& prefix, std::size_t in, std::size_t hidden,
              std::size_t out, std::mt19937_64& rng)
      : fc1_(params, prefix + ".fc1", in, hidden, rng), fc2_(params, prefix + ".fc2", hidden, out, rng) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return fc2_(ad::relu(fc1_(x))); }

  const Linear<T>& fc1() const { return fc1_; }
  const Linear<T>& fc2() const { return fc2_; }

 private:
  Linear<T> fc1_, fc2_;
};

// Additive attention mask of shape [batch * heads, tq, tk]: 0 where visible,
// -1e9 where the key is padding or (causal) lies in the future of the query.
// Returns an undefined tensor when nothing is masked.
template <typename T>
Tensor<T> attention_mask(std::size_t batch, std::size_t heads, std::size_t tq, std::size_t tk,
                         std::span<const std::uint8_t> key_mask, bool causal) {
  bool any = false;
  std::vector<T> mask(batch * heads * tq * tk, T(0));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t q = 0; q < tq; ++q) {
      for (std::size_t k = 0; k < tk; ++k) {
        const bool hidden = (!key_mask.empty() && !key_mask[b * tk + k]) || (causal && k > q);
        if (!hidden) continue;
        any = true;
        for (std::size_t h = 0; h < heads; ++h) mask[((b * heads + h) * tq + q) * tk + k] = T(-1e9);
      }
    }
  }
  if (!any) return {};
  return Tensor<T>::from_data({batch * heads, tq, tk}, std::move(mask));
}

// Keys/values of one attention block in head-split layout [batch*heads, t, d_head].
template <typename T>
struct KvCache {
  Tensor<T> keys;
  Tensor<T> values;
  std::size_t length() const { return keys.defined() ? keys.dim(1) : 0; }
};

template <typename T>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterSet<T>& params, const std::string& prefix, std::size_t d_model,
                     std::size_t heads, std::mt19937_64& rng)
      : d_model_(d_model),
        heads_(heads),
        q_(params, prefix + ".q", d_model, d_model, rng),
        k_(params, prefix + ".k", d_model, d_model, rng),
        v_(params, prefix + ".v", d_model, d_model, rng),
        o_(params, prefix + ".o", d_model, d_model, rng) {}

  // query [b, tq, d] attends over memory [b, tk, d]. key_mask is [b * tk]
  // (nonzero = visible) or empty.
  Tensor<T> operator()(const Tensor<T>& query, const Tensor<T>& memory,
                       std::span<const std::uint8_t> key_mask, bool causal, const RunContext& ctx) const {
    const std::size_t b = query.dim(0), tq = query.dim(1), tk = memory.dim(1);
    auto q = split_heads(q_(query));
    auto k = split_heads(k_(memory));
    auto v = split_heads(v_(memory));
    return attend(q, k, v, attention_mask<T>(b, heads_, tq, tk, key_mask, causal), b, ctx);
  }

  // Memory-side projections, computed once per source for incremental decoding.
  KvCache<T> project_memory(const Tensor<T>& memory) const {
    return {split_heads(k_(memory)), split_heads(v_(memory))};
  }

  // One new query position [b, 1, d] against cached memory projections.
  Tensor<T> attend_cached(const Tensor<T>& query, const KvCache<T>& memory,
                          std::span<const std::uint8_t> key_mask, const RunContext& ctx) const {
    const std::size_t b = query.dim(0);
    auto q = split_heads(q_(query));
    return attend(q, memory.keys, memory.values,
                  attention_mask<T>(b, heads_, 1, memory.length(), key_mask, false), b, ctx);
  }

  // Causal self-attention for one new position: appends its key/value to the
  // cache, then attends over the whole cache.
  Tensor<T> self_attend_step(const Tensor<T>& x, KvCache<T>& cache, const RunContext& ctx) const {
    const std::size_t b = x.dim(0);
    auto q = split_heads(q_(x));
    auto k = split_heads(k_(x));
    auto v = split_heads(v_(x));
    if (cache.keys.defined()) {
      cache.keys = ad::concat<T>({cache.keys, k}, 1);
      cache.values = ad::concat<T>({cache.values, v}, 1);
    } else {
      cache.keys = k;
      cache.values = v;
    }
    return attend(q, cache.keys, cache.values, {}, b, ctx);
  }

 private:
  // [b, t, d] -> [b*h, t, d/h]
  Tensor<T> split_heads(const Tensor<T>& x) const {
    const std::size_t b = x.dim(0), t = x.dim(1), dh = d_model_ / heads_;
    auto r = ad::reshape(x, {b, t, heads_, dh});
    return ad::reshape(ad::transpose(r, {0, 2, 1, 3}), {b * heads_, t, dh});
  }

  Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>& mask,
                   std::size_t b, const RunContext& ctx) const {
    const std::size_t dh = d_model_ / heads_;
    const std::size_t tq = q.dim(1);
    auto scores = ad::scale(ad::batched_matmul(q, k, true), T(1.0 / std::sqrt(static_cast<double>(dh))));
    if (mask.defined()) scores = ad::add(scores, mask);
    auto probs = ctx.drop(ad::softmax(scores));
    auto ctxv = ad::batched_matmul(probs, v);  // [b*h, tq, dh]
    auto merged = ad::reshape(ad::transpose(ad::reshape(ctxv, {b, heads_, tq, dh}), {0, 2, 1, 3}),
                              {b, tq, d_model_});
    return o_(merged);
  }

  std::size_t d_model_ = 0, heads_ = 1;
  Linear<T> q_, k_, v_, o_;
};

// Self-attention block + feed-forward block, each pre-norm with a residual.
// Causal masking is chosen per call so the same layer type serves the source
// encoder and the linguistic encoder.
template <typename T>
class EncoderLayer {
 public:
  EncoderLayer() = default;
  EncoderLayer(ParameterSet<T>& params, const std::string& prefix, std::size_t d_model, std::size_t heads,
               std::size_t ffn_dim, std::mt19937_64& rng)
      : ln1_(params, prefix + ".ln1", d_model),
        attn_(params, prefix + ".self_attn", d_model, heads, rng),
        ln2_(params, prefix + ".ln2", d_model),
        ffn_(params, prefix + ".ffn", d_model, ffn_dim, d_model, rng) {}

  Tensor<T> operator()(const Tensor<T>& x, std::span<const std::uint8_t> key_mask, bool causal,
                       const RunContext& ctx) const {
    auto h = ln1_(x);
    auto y = ad::add(x, ctx.drop(attn_(h, h, key_mask, causal, ctx)));
    return ad::add(y, ctx.drop(ffn_(ln2_(y))));
  }

  // Incremental causal form: x is the newest position [b, 1, d].
  Tensor<T> step(const Tensor<T>& x, KvCache<T>& cache, const RunContext& ctx) const {
    auto y = ad::add(x, ctx.drop(attn_.self_attend_step(ln1_(x), cache, ctx)));
    return ad::add(y, ctx.drop(ffn_(ln2_(y))));
  }

 private:
  LayerNorm<T> ln1_;
  MultiHeadAttention<T> attn_;
  LayerNorm<T> ln2_;
  FeedForward<T> ffn_;
};

template <typename T>
struct DecoderLayerCache {
  KvCache<T> self;
  KvCache<T> cross;
};

template <typename T>
class DecoderLayer {
 public:
  DecoderLayer() = default;
  DecoderLayer(ParameterSet<T>& params, const std::string& prefix, std::size_t d_model, std::size_t heads,
               std::size_t ffn_dim, std::mt19937_64& rng)
      : ln1_(params, prefix + ".ln1", d_model),
        self_attn_(params, prefix + ".self_attn", d_model, heads, rng),
        ln2_(params, prefix + ".ln2", d_model),
        cross_attn_(params, prefix + ".cross_attn", d_model, heads, rng),
        ln3_(params, prefix + ".ln3", d_model),
        ffn_(params, prefix + ".ffn", d_model, ffn_dim, d_model, rng) {}

  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>& memory, std::span<const std::uint8_t> memory_mask,
                       const RunContext& ctx) const {
    auto h = ln1_(x);
    auto y = ad::add(x, ctx.drop(self_attn_(h, h, {}, true, ctx)));
    y = ad::add(y, ctx.drop(cross_attn_(ln2_(y), memory, memory_mask, false, ctx)));
    return ad::add(y, ctx.drop(ffn_(ln3_(y))));
  }

  KvCache<T> project_memory(const Tensor<T>& memory) const { return cross_attn_.project_memory(memory); }

  Tensor<T> step(const Tensor<T>& x, DecoderLayerCache<T>& cache, std::span<const std::uint8_t> memory_mask,
                 const RunContext& ctx) const {
    auto y = ad::add(x, ctx.drop(self_attn_.self_attend_step(ln1_(x), cache.self, ctx)));
    y = ad::add(y, ctx.drop(cross_attn_.attend_cached(ln2_(y), cache.cross, memory_mask, ctx)));
    return ad::add(y, ctx.drop(ffn_(ln3_(y))));
  }

 private:
  LayerNorm<T> ln1_;
  MultiHeadAttention<T> self_attn_;
  LayerNorm<T> ln2_;
  MultiHeadAttention<T> cross_attn_;
  LayerNorm<T> ln3_;
  FeedForward<T> ffn_;
};

}  // namespace slmt::nn
