#pragma once

#include <string>

#include "parshare/graph.hpp"
#include "parshare/model_config.hpp"
#include "parshare/sharing.hpp"
#include "parshare/token_batch.hpp"

namespace parshare {

template <typename T>
struct AttentionParams {
  Tensor<T> k, q, v, f;
};

template <typename T>
struct FfnParams {
  Tensor<T> l1, b1, l2, b2;
};

template <typename T>
struct NormParams {
  Tensor<T> gain, bias;
};

// [length x d_model] table; throws LengthError past max_position.
template <typename T>
Tensor<T> sinusoidal_positions(std::size_t length, std::size_t d_model, std::size_t max_position = 1024);

// [T x T] with 0 on and below the diagonal, masked_value() above it.
template <typename T>
Tensor<T> causal_mask(std::size_t length);

// [batch x q x k]: key positions past each sequence length are masked, and
// query i additionally sees only keys j <= i when causal is set.
template <typename T>
Tensor<T> attention_mask(const TokenBatch& keys, std::size_t query_length, bool causal);

// Lookup, scale by sqrt(d_model), add positions, dropout -> [B*T x d_model].
template <typename T>
Tensor<T> embed(Graph<T>& g, const TokenBatch& tokens, const Tensor<T>& w_e, const ModelConfig& config);

// q_in [B*Tq x d], kv_in [B*Tk x d], mask [B x Tq x Tk] -> [B*Tq x d].
template <typename T>
Tensor<T> multi_head_attention(Graph<T>& g, const Tensor<T>& q_in, const Tensor<T>& kv_in,
                               const AttentionParams<T>& p, const Tensor<T>& mask, std::size_t batch,
                               const ModelConfig& config);

template <typename T>
Tensor<T> feed_forward(Graph<T>& g, const Tensor<T>& z, const FfnParams<T>& p, double dropout);

// Resolves every slot of one target's model from a parameter table. The
// encoder and embedding are looked up under the same target; the plan decides
// whether they alias across targets.
template <typename T>
class Transformer {
 public:
  // Throws PlanError when the plan does not serve `language`.
  Transformer(const ParameterTable<T>& table, const std::string& language);

  const ModelConfig& config() const { return config_; }
  const Tensor<T>& embedding() const { return w_e_; }

  // -> [B*Ts x d]
  Tensor<T> encode(Graph<T>& g, const TokenBatch& src) const;
  // tgt_in starts with bos; -> [B*Tt x d]
  Tensor<T> decode(Graph<T>& g, const TokenBatch& tgt_in, const Tensor<T>& enc_out, const TokenBatch& src) const;
  // dec_out * W_E^T -> [rows x V]
  Tensor<T> logits(Graph<T>& g, const Tensor<T>& dec_out) const;

 private:
  struct Layer {
    AttentionParams<T> self_attn, cross_attn;
    NormParams<T> self_norm, cross_norm, ffn_norm;
    FfnParams<T> ffn;
  };

  Tensor<T> sublayer(Graph<T>& g, const Tensor<T>& x, const NormParams<T>& norm,
                     const std::function<Tensor<T>(const Tensor<T>&)>& body) const;

  ModelConfig config_;
  Tensor<T> w_e_;
  std::vector<Layer> encoder_, decoder_;
  NormParams<T> encoder_final_, decoder_final_;
};

template <typename T>
Tensor<T> encoder_forward(Graph<T>& g, const TokenBatch& src, const ParameterTable<T>& table,
                          const std::string& language);

template <typename T>
Tensor<T> decoder_forward(Graph<T>& g, const TokenBatch& tgt_in, const Tensor<T>& enc_out, const TokenBatch& src,
                          const ParameterTable<T>& table, const std::string& language);

template <typename T>
Tensor<T> output_logits(Graph<T>& g, const Tensor<T>& dec_out, const Tensor<T>& w_e);

}  // namespace parshare
