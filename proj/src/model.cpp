#include "np/model.hpp"

#include <algorithm>
#include <cmath>

#include "np/rng.hpp"

namespace np {

const char* attn_scale_name(AttnScale s) {
  return s == AttnScale::kPerHeadDim ? "per_head_dim" : "embed_dim";
}

AttnScale attn_scale_from(const std::string& s) {
  if (s == "per_head_dim") return AttnScale::kPerHeadDim;
  if (s == "embed_dim") return AttnScale::kEmbedDim;
  fail("attn_scale: unknown value '" + s + "' (per_head_dim|embed_dim)");
}

void ModelConfig::validate() const {
  require(d >= 1, "config.d: must be >= 1");
  require(d_e >= 1, "config.d_e: must be >= 1");
  require(k0 >= 1, "config.k0: must be >= 1");
  require(d % k0 == 0, "config.k0: d=" + std::to_string(d) + " not divisible by k0=" +
                           std::to_string(k0));
  require(n_layers >= 1, "config.n_layers: must be >= 1");
  require(vocab >= 1, "config.vocab: must be >= 1");
  require(max_len >= 1, "config.max_len: must be >= 1");
  require(n_classes >= 2, "config.n_classes: must be >= 2");
}

namespace {

Tensor uniform_tensor(Shape shape, u64 seed, const std::string& stream_name, float s) {
  Tensor t = Tensor::zeros(std::move(shape));
  const u64 stream = rng::stream_of(stream_name);
  for (size_t i = 0; i < t.data.size(); ++i)
    t.data[i] = rng::uniform(seed, stream, static_cast<u64>(i), -s, s);
  return t;
}

constexpr float kInitScale = 0.05f;

}  // namespace

float& HeadSlice::a(i64 r, i64 j) {
  const i64 dh = layer->dh;
  const i64 part = j / dh, c = j % dh;
  return layer->a.value.at(r, part * layer->seg() + slot * dh + c);
}

float HeadSlice::a(i64 r, i64 j) const {
  return const_cast<HeadSlice*>(this)->a(r, j);
}

float& HeadSlice::wo(i64 r, i64 c) { return layer->w_o.value.at(slot * layer->dh + r, c); }

float HeadSlice::wo(i64 r, i64 c) const { return const_cast<HeadSlice*>(this)->wo(r, c); }

float& HeadSlice::bias(i64 j) {
  require(layer->qkv_bias.has_value(), "head_slice: layer has no qkv_bias");
  const i64 dh = layer->dh;
  const i64 part = j / dh, c = j % dh;
  return layer->qkv_bias->value.data[static_cast<size_t>(part * layer->seg() + slot * dh + c)];
}

Tensor HeadSlice::a_block() const {
  Tensor t = Tensor::zeros({layer->d, 3 * layer->dh});
  for (i64 r = 0; r < layer->d; ++r)
    for (i64 j = 0; j < 3 * layer->dh; ++j) t.at(r, j) = a(r, j);
  return t;
}

Tensor HeadSlice::wo_block() const {
  Tensor t = Tensor::zeros({layer->dh, layer->d});
  for (i64 r = 0; r < layer->dh; ++r)
    for (i64 c = 0; c < layer->d; ++c) t.at(r, c) = wo(r, c);
  return t;
}

HeadSlice head_slice(AttentionLayer& layer, i64 slot) {
  require(slot >= 0 && slot < layer.heads(),
          "head_slice: slot " + std::to_string(slot) + " outside [0," +
              std::to_string(layer.heads()) + ")");
  return HeadSlice{&layer, slot};
}

void prune_heads(AttentionLayer& layer, std::vector<i64> slots) {
  std::sort(slots.begin(), slots.end());
  slots.erase(std::unique(slots.begin(), slots.end()), slots.end());
  const i64 k = layer.heads(), dh = layer.dh, d = layer.d;
  for (i64 s : slots)
    require(s >= 0 && s < k,
            "prune_heads: slot " + std::to_string(s) + " outside [0," + std::to_string(k) + ")");
  require(static_cast<i64>(slots.size()) < k, "prune_heads: a layer keeps at least one head");
  if (slots.empty()) return;

  std::vector<i64> kept;
  for (i64 s = 0; s < k; ++s)
    if (!std::binary_search(slots.begin(), slots.end(), s)) kept.push_back(s);
  const i64 k2 = static_cast<i64>(kept.size());

  Tensor a2 = Tensor::zeros({d, 3 * k2 * dh});
  for (i64 r = 0; r < d; ++r)
    for (i64 part = 0; part < 3; ++part)
      for (i64 s2 = 0; s2 < k2; ++s2)
        for (i64 c = 0; c < dh; ++c)
          a2.at(r, part * k2 * dh + s2 * dh + c) =
              layer.a.value.at(r, part * k * dh + kept[static_cast<size_t>(s2)] * dh + c);
  layer.a = Param(layer.a.name, std::move(a2));

  if (layer.qkv_bias) {
    Tensor b2 = Tensor::zeros({3 * k2 * dh});
    for (i64 part = 0; part < 3; ++part)
      for (i64 s2 = 0; s2 < k2; ++s2)
        for (i64 c = 0; c < dh; ++c)
          b2.data[static_cast<size_t>(part * k2 * dh + s2 * dh + c)] =
              layer.qkv_bias->value
                  .data[static_cast<size_t>(part * k * dh + kept[static_cast<size_t>(s2)] * dh + c)];
    layer.qkv_bias = Param(layer.qkv_bias->name, std::move(b2));
  }

  Tensor w2 = Tensor::zeros({k2 * dh, d});
  for (i64 s2 = 0; s2 < k2; ++s2)
    for (i64 r = 0; r < dh; ++r)
      for (i64 c = 0; c < d; ++c)
        w2.at(s2 * dh + r, c) = layer.w_o.value.at(kept[static_cast<size_t>(s2)] * dh + r, c);
  layer.w_o = Param(layer.w_o.name, std::move(w2));

  std::vector<i64> ids2;
  for (i64 s : kept) ids2.push_back(layer.head_ids[static_cast<size_t>(s)]);
  layer.head_ids = std::move(ids2);
}

void prune_head(AttentionLayer& layer, i64 slot) {
  require(layer.heads() >= 2, "prune_head: cannot remove the last head of a layer");
  prune_heads(layer, {slot});
}

std::vector<Param*> Model::params() {
  std::vector<Param*> out = {&tok_emb, &pos_emb};
  for (Block& b : blocks) {
    out.push_back(&b.attn.a);
    if (b.attn.qkv_bias) out.push_back(&*b.attn.qkv_bias);
    out.push_back(&b.attn.w_o);
    out.push_back(&b.attn.o_bias);
    out.push_back(&b.ln1_gain);
    out.push_back(&b.ln1_bias);
    out.push_back(&b.mlp.l_in);
    out.push_back(&b.mlp.b_in);
    out.push_back(&b.mlp.l_out);
    out.push_back(&b.mlp.b_out);
    out.push_back(&b.ln2_gain);
    out.push_back(&b.ln2_bias);
  }
  out.push_back(&classifier);
  return out;
}

std::vector<const Param*> Model::params() const {
  std::vector<const Param*> out;
  for (Param* p : const_cast<Model*>(this)->params()) out.push_back(p);
  return out;
}

i64 Model::param_count() const {
  i64 n = 0;
  for (const Param* p : params()) n += p->value.numel();
  return n;
}

Model init_model(const ModelConfig& cfg) {
  cfg.validate();
  const u64 seed = cfg.seed;
  const i64 dh = cfg.head_dim();

  Model m{cfg,
          Param("tok_emb", uniform_tensor({cfg.vocab, cfg.d}, seed, "tok_emb", kInitScale)),
          Param("pos_emb", uniform_tensor({cfg.max_len, cfg.d}, seed, "pos_emb", kInitScale)),
          {},
          Param("cls", uniform_tensor({cfg.d, cfg.n_classes}, seed, "cls", kInitScale))};

  for (i64 l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "b" + std::to_string(l) + ".";
    std::vector<i64> ids(static_cast<size_t>(cfg.k0));
    for (i64 i = 0; i < cfg.k0; ++i) ids[static_cast<size_t>(i)] = i;

    AttentionLayer attn{
        cfg.d,
        dh,
        std::move(ids),
        Param(p + "a", uniform_tensor({cfg.d, 3 * cfg.k0 * dh}, seed, p + "a", kInitScale)),
        std::nullopt,
        Param(p + "w_o", uniform_tensor({cfg.k0 * dh, cfg.d}, seed, p + "w_o", kInitScale)),
        Param(p + "o_bias", Tensor::zeros({cfg.d}))};
    if (cfg.qkv_bias) attn.qkv_bias = Param(p + "qkv_bias", Tensor::zeros({3 * cfg.k0 * dh}));

    MlpLayer mlp{
        Param(p + "l_in", uniform_tensor({cfg.d_e, cfg.d}, seed, p + "l_in", kInitScale)),
        Param(p + "b_in", Tensor::zeros({cfg.d_e})),
        Param(p + "l_out", uniform_tensor({cfg.d, cfg.d_e}, seed, p + "l_out", kInitScale)),
        Param(p + "b_out", Tensor::zeros({cfg.d}))};

    m.blocks.push_back(Block{std::move(attn),
                             Param(p + "ln1.gain", Tensor::full({cfg.d}, 1.f)),
                             Param(p + "ln1.bias", Tensor::zeros({cfg.d})),
                             std::move(mlp),
                             Param(p + "ln2.gain", Tensor::full({cfg.d}, 1.f)),
                             Param(p + "ln2.bias", Tensor::zeros({cfg.d}))});
  }
  return m;
}

int attention_forward(Tape& t, AttentionLayer& layer, int x, i64 batch, i64 seq,
                      const std::vector<int32_t>& lengths, AttnScale scale_mode) {
  const i64 k = layer.heads(), dh = layer.dh, seg = layer.seg();
  require(static_cast<i64>(lengths.size()) == batch, "attention_forward: lengths size mismatch");

  int xa = t.matmul(x, t.leaf(layer.a));  // (batch*seq) x 3*seg
  if (layer.qkv_bias) xa = t.add_rowvec(xa, t.leaf(*layer.qkv_bias));

  const i64 scale_dim = scale_mode == AttnScale::kPerHeadDim ? dh : layer.d;
  const float factor = 1.f / std::sqrt(static_cast<float>(scale_dim));

  std::vector<int32_t> row_valid(static_cast<size_t>(batch * seq));
  for (i64 r = 0; r < batch * seq; ++r)
    row_valid[static_cast<size_t>(r)] = lengths[static_cast<size_t>(r / seq)];

  std::vector<int> head_ctx;
  for (i64 s = 0; s < k; ++s) {
    int q = t.reshape(t.col_slice(xa, 0 * seg + s * dh, dh), {batch, seq, dh});
    int kk = t.reshape(t.col_slice(xa, 1 * seg + s * dh, dh), {batch, seq, dh});
    int v = t.reshape(t.col_slice(xa, 2 * seg + s * dh, dh), {batch, seq, dh});
    int scores = t.scale(t.bmm(q, t.transpose_last2(kk)), factor);  // batch,seq,seq
    int probs = t.softmax_rows(t.reshape(scores, {batch * seq, seq}), row_valid);
    int ctx = t.bmm(t.reshape(probs, {batch, seq, seq}), v);  // batch,seq,dh
    head_ctx.push_back(t.reshape(ctx, {batch * seq, dh}));
  }
  const int hcat = head_ctx.size() == 1 ? head_ctx[0] : t.concat_cols(head_ctx);
  return t.add_rowvec(t.matmul(hcat, t.leaf(layer.w_o)), t.leaf(layer.o_bias));
}

ForwardResult model_forward(Tape& t, Model& m, const Batch& b) {
  require(b.batch >= 1 && b.seq >= 1, "model_forward: empty batch");
  require(b.seq <= m.cfg.max_len, "model_forward: seq " + std::to_string(b.seq) +
                                      " exceeds max_len " + std::to_string(m.cfg.max_len));
  require(static_cast<i64>(b.tokens.size()) == b.batch * b.seq,
          "model_forward: tokens size mismatch");
  require(static_cast<i64>(b.lengths.size()) == b.batch, "model_forward: lengths size mismatch");
  require(b.labels.empty() || static_cast<i64>(b.labels.size()) == b.batch,
          "model_forward: labels size mismatch");

  std::vector<int32_t> pos(static_cast<size_t>(b.batch * b.seq));
  for (i64 r = 0; r < b.batch * b.seq; ++r) pos[static_cast<size_t>(r)] = int32_t(r % b.seq);

  int x = t.add(t.embedding(t.leaf(m.tok_emb), b.tokens),
                t.embedding(t.leaf(m.pos_emb), pos));
  for (Block& blk : m.blocks) {
    int attn = attention_forward(t, blk.attn, x, b.batch, b.seq, b.lengths, m.cfg.attn_scale);
    x = t.layer_norm_rows(t.add(x, attn), t.leaf(blk.ln1_gain), t.leaf(blk.ln1_bias));
    int h = t.relu(
        t.add_rowvec(t.matmul(x, t.transpose(t.leaf(blk.mlp.l_in))), t.leaf(blk.mlp.b_in)));
    int o = t.add_rowvec(t.matmul(h, t.transpose(t.leaf(blk.mlp.l_out))), t.leaf(blk.mlp.b_out));
    x = t.layer_norm_rows(t.add(x, o), t.leaf(blk.ln2_gain), t.leaf(blk.ln2_bias));
  }
  int pooled = t.mean_pool_seq(x, b.batch, b.seq, b.lengths);
  ForwardResult r;
  r.logits = t.matmul(pooled, t.leaf(m.classifier));
  if (!b.labels.empty()) r.loss = t.cross_entropy_logits(r.logits, b.labels);
  return r;
}

Tensor logits_of(Model& m, const Batch& b) {
  Tape t;
  Batch nolabel = b;
  nolabel.labels.clear();
  ForwardResult r = model_forward(t, m, nolabel);
  return t.value(r.logits);
}

}  // namespace np
