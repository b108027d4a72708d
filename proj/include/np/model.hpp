#pragma once

#include <optional>
#include <vector>

#include "np/tape.hpp"

namespace np {

enum class AttnScale : uint8_t { kPerHeadDim, kEmbedDim };

const char* attn_scale_name(AttnScale s);
AttnScale attn_scale_from(const std::string& s);

struct ModelConfig {
  i64 d = 64;        // embedding dim
  i64 d_e = 256;     // FFN hidden dim
  i64 k0 = 8;        // initial heads per layer
  i64 n_layers = 4;
  i64 vocab = 32;
  i64 max_len = 32;
  i64 n_classes = 4;
  u64 seed = 1;
  bool qkv_bias = false;
  AttnScale attn_scale = AttnScale::kPerHeadDim;

  i64 head_dim() const { return d / k0; }
  void validate() const;
};

// Concatenated [Q|K|V] projection plus output projection, with surviving-head
// bookkeeping. With k live heads, head slot s occupies columns
// [s*dh, (s+1)*dh) of each of the Q, K, V segments of `a` and rows
// [s*dh, (s+1)*dh) of `w_o`.
struct AttentionLayer {
  i64 d = 0;
  i64 dh = 0;
  std::vector<i64> head_ids;  // surviving heads' original indices, ascending
  Param a;                    // d x (3*k*dh)
  std::optional<Param> qkv_bias;  // 3*k*dh
  Param w_o;                  // (k*dh) x d
  Param o_bias;               // d

  i64 heads() const { return static_cast<i64>(head_ids.size()); }
  i64 seg() const { return heads() * dh; }  // width of one of the Q/K/V segments
};

// Mutable view of one head's parameter blocks. a(r, j) addresses the d x 3*dh
// block [Q_h | K_h | V_h]; wo(r, c) addresses the head's dh x d rows of w_o.
// Writes go straight through to the layer.
struct HeadSlice {
  AttentionLayer* layer = nullptr;
  i64 slot = -1;

  float& a(i64 r, i64 j);
  float a(i64 r, i64 j) const;
  float& wo(i64 r, i64 c);
  float wo(i64 r, i64 c) const;
  float& bias(i64 j);  // requires qkv_bias; j in [0, 3*dh)

  Tensor a_block() const;   // d x 3*dh copy
  Tensor wo_block() const;  // dh x d copy
};

HeadSlice head_slice(AttentionLayer& layer, i64 slot);

// Physically removes head columns from a (and qkv_bias entries) and rows from
// w_o; a layer keeps at least one head.
void prune_head(AttentionLayer& layer, i64 slot);
void prune_heads(AttentionLayer& layer, std::vector<i64> slots);

struct MlpLayer {
  Param l_in;   // d_e x d ; row i = fan-in of hidden neuron i
  Param b_in;   // d_e
  Param l_out;  // d x d_e ; column i = fan-out of hidden neuron i
  Param b_out;  // d
};

struct Block {
  AttentionLayer attn;
  Param ln1_gain, ln1_bias;
  MlpLayer mlp;
  Param ln2_gain, ln2_bias;
};

struct Batch {
  i64 batch = 0;
  i64 seq = 0;
  std::vector<int32_t> tokens;   // batch*seq, row-major, 0-padded
  std::vector<int32_t> lengths;  // per example, in [1, seq]
  std::vector<int32_t> labels;   // per example; may be empty for inference
};

struct Model {
  ModelConfig cfg;
  Param tok_emb;     // vocab x d
  Param pos_emb;     // max_len x d
  std::vector<Block> blocks;
  Param classifier;  // d x n_classes, applied to mean-pooled final states

  std::vector<Param*> params();
  std::vector<const Param*> params() const;
  i64 param_count() const;
};

// Weights uniform(-0.05, 0.05) from the counter generator; biases zero, norm
// gains one. Deterministic per seed.
Model init_model(const ModelConfig& cfg);

// Tape builders. attention_forward covers projection, per-head scaled
// dot-product attention (keys restricted to real tokens), concat and output
// projection; residual add and layer norm happen in the caller block.
int attention_forward(Tape& tape, AttentionLayer& layer, int x, i64 batch, i64 seq,
                      const std::vector<int32_t>& lengths, AttnScale scale_mode);

struct ForwardResult {
  int logits = -1;
  int loss = -1;  // -1 when the batch has no labels
};
ForwardResult model_forward(Tape& tape, Model& m, const Batch& b);

// Out-of-tape convenience: forward and copy the logits out.
Tensor logits_of(Model& m, const Batch& b);

}  // namespace np
