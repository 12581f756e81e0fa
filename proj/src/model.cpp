#include "parshare/model.hpp"

#include <algorithm>
#include <cmath>

#include "parshare/errors.hpp"

namespace parshare {

TokenBatch TokenBatch::from_sequences(const std::vector<std::vector<int>>& sequences, int pad_id) {
  if (sequences.empty()) throw LengthError("cannot batch zero sequences");
  TokenBatch out;
  out.batch = sequences.size();
  for (const auto& s : sequences) {
    if (s.empty()) throw LengthError("cannot batch an empty sequence");
    out.time = std::max(out.time, s.size());
  }
  out.ids.assign(out.batch * out.time, pad_id);
  for (std::size_t b = 0; b < out.batch; ++b) {
    std::copy(sequences[b].begin(), sequences[b].end(), out.ids.begin() + b * out.time);
    out.lengths.push_back(sequences[b].size());
  }
  return out;
}

template <typename T>
Tensor<T> sinusoidal_positions(std::size_t length, std::size_t d_model, std::size_t max_position) {
  if (length > max_position) {
    throw LengthError("sequence length " + std::to_string(length) + " exceeds max_position " +
                      std::to_string(max_position));
  }
  std::vector<T> v(length * d_model);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t c = 0; c < d_model; ++c) {
      const std::size_t pair = c / 2;
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, 2.0 * static_cast<double>(pair) / static_cast<double>(d_model));
      v[pos * d_model + c] = static_cast<T>(c % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return Tensor<T>({length, d_model}, std::move(v));
}

template <typename T>
Tensor<T> causal_mask(std::size_t length) {
  std::vector<T> v(length * length, T(0));
  for (std::size_t i = 0; i < length; ++i) {
    for (std::size_t j = i + 1; j < length; ++j) v[i * length + j] = masked_value<T>();
  }
  return Tensor<T>({length, length}, std::move(v));
}

template <typename T>
Tensor<T> attention_mask(const TokenBatch& keys, std::size_t query_length, bool causal) {
  const std::size_t tk = keys.time;
  std::vector<T> v(keys.batch * query_length * tk, T(0));
  for (std::size_t b = 0; b < keys.batch; ++b) {
    for (std::size_t i = 0; i < query_length; ++i) {
      T* row = v.data() + (b * query_length + i) * tk;
      for (std::size_t j = 0; j < tk; ++j) {
        if (j >= keys.lengths[b] || (causal && j > i)) row[j] = masked_value<T>();
      }
    }
  }
  return Tensor<T>({keys.batch, query_length, tk}, std::move(v));
}

template <typename T>
Tensor<T> embed(Graph<T>& g, const TokenBatch& tokens, const Tensor<T>& w_e, const ModelConfig& config) {
  const std::size_t d = w_e.cols();
  auto rows = g.gather_rows(w_e, tokens.ids);
  auto scaled = g.scale(rows, static_cast<T>(std::sqrt(static_cast<double>(d))));
  auto pe = sinusoidal_positions<T>(tokens.time, d, static_cast<std::size_t>(config.max_position));
  std::vector<T> tiled;
  tiled.reserve(tokens.batch * pe.size());
  for (std::size_t b = 0; b < tokens.batch; ++b) tiled.insert(tiled.end(), pe.data().begin(), pe.data().end());
  auto x = g.add_constant(scaled, Tensor<T>({tokens.batch * tokens.time, d}, std::move(tiled)));
  return g.dropout(x, config.dropout);
}

template <typename T>
Tensor<T> multi_head_attention(Graph<T>& g, const Tensor<T>& q_in, const Tensor<T>& kv_in,
                               const AttentionParams<T>& p, const Tensor<T>& mask, std::size_t batch,
                               const ModelConfig& config) {
  const auto heads = static_cast<std::size_t>(config.heads);
  auto q = g.split_heads(g.matmul(q_in, p.q), batch, heads);
  auto k = g.split_heads(g.matmul(kv_in, p.k), batch, heads);
  auto v = g.split_heads(g.matmul(kv_in, p.v), batch, heads);
  const double width = config.scaling == ScoreScaling::kPerHead ? config.head_width() : config.d_model;
  auto scores = g.scale(g.matmul(q, k, true), static_cast<T>(1.0 / std::sqrt(width)));
  auto alpha = g.dropout(g.softmax_rows(g.masked_fill(scores, mask, heads)), config.dropout);
  auto merged = g.merge_heads(g.matmul(alpha, v), batch, heads);
  return g.matmul(merged, p.f);
}

template <typename T>
Tensor<T> feed_forward(Graph<T>& g, const Tensor<T>& z, const FfnParams<T>& p, double dropout) {
  auto hidden = g.dropout(g.relu(g.add_row(g.matmul(z, p.l1), p.b1)), dropout);
  return g.add_row(g.matmul(hidden, p.l2), p.b2);
}

template <typename T>
Transformer<T>::Transformer(const ParameterTable<T>& table, const std::string& language)
    : config_(table.config()) {
  const std::string& target = table.plan().route(language);
  auto get = [&](Component c, int layer, Sublayer s, Role r) { return table.slot({c, layer, s, r, target}); };
  auto attention = [&](Component c, int layer, Sublayer s) {
    return AttentionParams<T>{get(c, layer, s, Role::kK), get(c, layer, s, Role::kQ), get(c, layer, s, Role::kV),
                              get(c, layer, s, Role::kF)};
  };
  auto norm = [&](Component c, int layer, Sublayer s) {
    return NormParams<T>{get(c, layer, s, Role::kGain), get(c, layer, s, Role::kBias)};
  };
  auto ffn = [&](Component c, int layer) {
    return FfnParams<T>{get(c, layer, Sublayer::kFfn, Role::kL1), get(c, layer, Sublayer::kFfn, Role::kB1),
                        get(c, layer, Sublayer::kFfn, Role::kL2), get(c, layer, Sublayer::kFfn, Role::kB2)};
  };

  w_e_ = get(Component::kEmbedding, 0, Sublayer::kNone, Role::kE);
  for (int l = 1; l <= config_.num_layers; ++l) {
    Layer enc;
    enc.self_attn = attention(Component::kEncoder, l, Sublayer::kSelfAttn);
    enc.self_norm = norm(Component::kEncoder, l, Sublayer::kSelfAttn);
    enc.ffn = ffn(Component::kEncoder, l);
    enc.ffn_norm = norm(Component::kEncoder, l, Sublayer::kFfn);
    encoder_.push_back(std::move(enc));

    Layer dec;
    dec.self_attn = attention(Component::kDecoder, l, Sublayer::kSelfAttn);
    dec.self_norm = norm(Component::kDecoder, l, Sublayer::kSelfAttn);
    dec.cross_attn = attention(Component::kDecoder, l, Sublayer::kEncDecAttn);
    dec.cross_norm = norm(Component::kDecoder, l, Sublayer::kEncDecAttn);
    dec.ffn = ffn(Component::kDecoder, l);
    dec.ffn_norm = norm(Component::kDecoder, l, Sublayer::kFfn);
    decoder_.push_back(std::move(dec));
  }
  if (config_.norm == NormPlacement::kPre) {
    encoder_final_ = norm(Component::kEncoder, 0, Sublayer::kNormFinal);
    decoder_final_ = norm(Component::kDecoder, 0, Sublayer::kNormFinal);
  }
}

template <typename T>
Tensor<T> Transformer<T>::sublayer(Graph<T>& g, const Tensor<T>& x, const NormParams<T>& norm,
                                   const std::function<Tensor<T>(const Tensor<T>&)>& body) const {
  if (config_.norm == NormPlacement::kPre) {
    return g.add(x, g.dropout(body(g.layer_norm(x, norm.gain, norm.bias)), config_.dropout));
  }
  return g.layer_norm(g.add(x, g.dropout(body(x), config_.dropout)), norm.gain, norm.bias);
}

template <typename T>
Tensor<T> Transformer<T>::encode(Graph<T>& g, const TokenBatch& src) const {
  auto x = embed(g, src, w_e_, config_);
  auto mask = attention_mask<T>(src, src.time, false);
  for (const auto& layer : encoder_) {
    x = sublayer(g, x, layer.self_norm, [&](const Tensor<T>& h) {
      return multi_head_attention(g, h, h, layer.self_attn, mask, src.batch, config_);
    });
    x = sublayer(g, x, layer.ffn_norm, [&](const Tensor<T>& h) { return feed_forward(g, h, layer.ffn, config_.dropout); });
  }
  if (config_.norm == NormPlacement::kPre) x = g.layer_norm(x, encoder_final_.gain, encoder_final_.bias);
  return x;
}

template <typename T>
Tensor<T> Transformer<T>::decode(Graph<T>& g, const TokenBatch& tgt_in, const Tensor<T>& enc_out,
                                 const TokenBatch& src) const {
  if (tgt_in.batch != src.batch) {
    throw DimensionError("decoder batch " + std::to_string(tgt_in.batch) + " does not match encoder batch " +
                         std::to_string(src.batch));
  }
  auto x = embed(g, tgt_in, w_e_, config_);
  auto self_mask = attention_mask<T>(tgt_in, tgt_in.time, true);
  auto cross_mask = attention_mask<T>(src, tgt_in.time, false);
  for (const auto& layer : decoder_) {
    x = sublayer(g, x, layer.self_norm, [&](const Tensor<T>& h) {
      return multi_head_attention(g, h, h, layer.self_attn, self_mask, tgt_in.batch, config_);
    });
    x = sublayer(g, x, layer.cross_norm, [&](const Tensor<T>& h) {
      return multi_head_attention(g, h, enc_out, layer.cross_attn, cross_mask, tgt_in.batch, config_);
    });
    x = sublayer(g, x, layer.ffn_norm, [&](const Tensor<T>& h) { return feed_forward(g, h, layer.ffn, config_.dropout); });
  }
  if (config_.norm == NormPlacement::kPre) x = g.layer_norm(x, decoder_final_.gain, decoder_final_.bias);
  return x;
}

template <typename T>
Tensor<T> Transformer<T>::logits(Graph<T>& g, const Tensor<T>& dec_out) const {
  return output_logits(g, dec_out, w_e_);
}

template <typename T>
Tensor<T> encoder_forward(Graph<T>& g, const TokenBatch& src, const ParameterTable<T>& table,
                          const std::string& language) {
  return Transformer<T>(table, language).encode(g, src);
}

template <typename T>
Tensor<T> decoder_forward(Graph<T>& g, const TokenBatch& tgt_in, const Tensor<T>& enc_out, const TokenBatch& src,
                          const ParameterTable<T>& table, const std::string& language) {
  return Transformer<T>(table, language).decode(g, tgt_in, enc_out, src);
}

template <typename T>
Tensor<T> output_logits(Graph<T>& g, const Tensor<T>& dec_out, const Tensor<T>& w_e) {
  return g.matmul(dec_out, w_e, true);
}

#define PARSHARE_INSTANTIATE(T)                                                                               \
  template Tensor<T> sinusoidal_positions<T>(std::size_t, std::size_t, std::size_t);                          \
  template Tensor<T> causal_mask<T>(std::size_t);                                                             \
  template Tensor<T> attention_mask<T>(const TokenBatch&, std::size_t, bool);                                 \
  template Tensor<T> embed<T>(Graph<T>&, const TokenBatch&, const Tensor<T>&, const ModelConfig&);            \
  template Tensor<T> multi_head_attention<T>(Graph<T>&, const Tensor<T>&, const Tensor<T>&,                   \
                                             const AttentionParams<T>&, const Tensor<T>&, std::size_t,        \
                                             const ModelConfig&);                                             \
  template Tensor<T> feed_forward<T>(Graph<T>&, const Tensor<T>&, const FfnParams<T>&, double);               \
  template class Transformer<T>;                                                                              \
  template Tensor<T> encoder_forward<T>(Graph<T>&, const TokenBatch&, const ParameterTable<T>&,               \
                                        const std::string&);                                                  \
  template Tensor<T> decoder_forward<T>(Graph<T>&, const TokenBatch&, const Tensor<T>&, const TokenBatch&,    \
                                        const ParameterTable<T>&, const std::string&);                        \
  template Tensor<T> output_logits<T>(Graph<T>&, const Tensor<T>&, const Tensor<T>&);

PARSHARE_INSTANTIATE(float)
PARSHARE_INSTANTIATE(double)

}  // namespace parshare
