#include "np/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "np/rng.hpp"

namespace np {

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kConst: return "const";
    case Op::kMatMul: return "matmul";
    case Op::kBmm: return "bmm";
    case Op::kTranspose: return "transpose";
    case Op::kTransposeLast2: return "transpose_last2";
    case Op::kReshape: return "reshape";
    case Op::kColSlice: return "col_slice";
    case Op::kConcatCols: return "concat_cols";
    case Op::kAdd: return "add";
    case Op::kAddRowVec: return "add_rowvec";
    case Op::kScale: return "scale";
    case Op::kRelu: return "relu";
    case Op::kSoftmaxRows: return "softmax_rows";
    case Op::kLayerNormRows: return "layer_norm_rows";
    case Op::kEmbedding: return "embedding";
    case Op::kMeanAll: return "mean_all";
    case Op::kMeanPoolSeq: return "mean_pool_seq";
    case Op::kCrossEntropyLogits: return "cross_entropy_logits";
  }
  return "?";
}

namespace {

// Forward kernels are templated so the float32 engine and the float64 oracle
// replay share one implementation. Accumulation order is fixed left-to-right.

template <class T>
void f_matmul(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
  std::fill(c, c + m * n, T(0));
  for (i64 i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (i64 p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (i64 j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
void f_transpose(const T* a, T* c, i64 m, i64 n) {
  for (i64 i = 0; i < m; ++i)
    for (i64 j = 0; j < n; ++j) c[j * m + i] = a[i * n + j];
}

template <class T>
void f_softmax_rows(const T* x, T* y, i64 rows, i64 cols, const int32_t* valid) {
  for (i64 r = 0; r < rows; ++r) {
    const i64 w = valid ? valid[r] : cols;
    const T* xr = x + r * cols;
    T* yr = y + r * cols;
    T mx = xr[0];
    for (i64 j = 1; j < w; ++j) mx = std::max(mx, xr[j]);
    T sum = T(0);
    for (i64 j = 0; j < w; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    for (i64 j = 0; j < w; ++j) yr[j] /= sum;
    for (i64 j = w; j < cols; ++j) yr[j] = T(0);
  }
}

template <class T>
void f_layer_norm(const T* x, const T* g, const T* b, T* y, i64 rows, i64 n) {
  for (i64 r = 0; r < rows; ++r) {
    const T* xr = x + r * n;
    T* yr = y + r * n;
    T mean = T(0);
    for (i64 j = 0; j < n; ++j) mean += xr[j];
    mean /= T(n);
    T var = T(0);
    for (i64 j = 0; j < n; ++j) {
      const T d = xr[j] - mean;
      var += d * d;
    }
    var /= T(n);
    const T inv = T(1) / std::sqrt(var + T(kLayerNormEps));
    for (i64 j = 0; j < n; ++j) yr[j] = (xr[j] - mean) * inv * g[j] + b[j];
  }
}

template <class T>
void f_cross_entropy(const T* logits, const int32_t* labels, T* out, i64 rows, i64 cols) {
  T total = T(0);
  for (i64 r = 0; r < rows; ++r) {
    const T* xr = logits + r * cols;
    T mx = xr[0];
    for (i64 j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    T sum = T(0);
    for (i64 j = 0; j < cols; ++j) sum += std::exp(xr[j] - mx);
    total += std::log(sum) + mx - xr[labels[r]];
  }
  out[0] = total / T(rows);
}

i64 last_dim(const Shape& s) { return s.back(); }

template <class T>
void compute_node(const Node& n, const std::vector<const T*>& in,
                  const std::vector<const Shape*>& ish, T* out) {
  switch (n.op) {
    case Op::kMatMul:
      f_matmul(in[0], in[1], out, (*ish[0])[0], (*ish[0])[1], (*ish[1])[1]);
      break;
    case Op::kBmm: {
      const i64 b = (*ish[0])[0], m = (*ish[0])[1], k = (*ish[0])[2], nn = (*ish[1])[2];
      for (i64 q = 0; q < b; ++q)
        f_matmul(in[0] + q * m * k, in[1] + q * k * nn, out + q * m * nn, m, k, nn);
      break;
    }
    case Op::kTranspose:
      f_transpose(in[0], out, (*ish[0])[0], (*ish[0])[1]);
      break;
    case Op::kTransposeLast2: {
      const i64 b = (*ish[0])[0], m = (*ish[0])[1], k = (*ish[0])[2];
      for (i64 q = 0; q < b; ++q) f_transpose(in[0] + q * m * k, out + q * m * k, m, k);
      break;
    }
    case Op::kReshape:
      std::copy(in[0], in[0] + shape_numel(n.shape), out);
      break;
    case Op::kColSlice: {
      const i64 rows = (*ish[0])[0], cols = (*ish[0])[1];
      for (i64 r = 0; r < rows; ++r)
        std::copy(in[0] + r * cols + n.a0, in[0] + r * cols + n.a0 + n.a1, out + r * n.a1);
      break;
    }
    case Op::kConcatCols: {
      const i64 rows = (*ish[0])[0];
      const i64 w = last_dim(n.shape);
      i64 off = 0;
      for (size_t p = 0; p < in.size(); ++p) {
        const i64 cp = (*ish[p])[1];
        for (i64 r = 0; r < rows; ++r)
          std::copy(in[p] + r * cp, in[p] + (r + 1) * cp, out + r * w + off);
        off += cp;
      }
      break;
    }
    case Op::kAdd: {
      const i64 nn = shape_numel(n.shape);
      for (i64 i = 0; i < nn; ++i) out[i] = in[0][i] + in[1][i];
      break;
    }
    case Op::kAddRowVec: {
      const i64 rows = (*ish[0])[0], w = (*ish[0])[1];
      for (i64 r = 0; r < rows; ++r)
        for (i64 j = 0; j < w; ++j) out[r * w + j] = in[0][r * w + j] + in[1][j];
      break;
    }
    case Op::kScale: {
      const i64 nn = shape_numel(n.shape);
      const T c = T(n.scalar);
      for (i64 i = 0; i < nn; ++i) out[i] = in[0][i] * c;
      break;
    }
    case Op::kRelu: {
      const i64 nn = shape_numel(n.shape);
      for (i64 i = 0; i < nn; ++i) out[i] = in[0][i] > T(0) ? in[0][i] : T(0);
      break;
    }
    case Op::kSoftmaxRows:
      f_softmax_rows(in[0], out, (*ish[0])[0], (*ish[0])[1],
                     n.idx.empty() ? nullptr : n.idx.data());
      break;
    case Op::kLayerNormRows:
      f_layer_norm(in[0], in[1], in[2], out, (*ish[0])[0], (*ish[0])[1]);
      break;
    case Op::kEmbedding: {
      const i64 d = (*ish[0])[1];
      for (size_t r = 0; r < n.idx.size(); ++r)
        std::copy(in[0] + i64(n.idx[r]) * d, in[0] + (i64(n.idx[r]) + 1) * d,
                  out + i64(r) * d);
      break;
    }
    case Op::kMeanAll: {
      const i64 nn = shape_numel(*ish[0]);
      T s = T(0);
      for (i64 i = 0; i < nn; ++i) s += in[0][i];
      out[0] = s / T(nn);
      break;
    }
    case Op::kMeanPoolSeq: {
      const i64 seq = n.a1, d = (*ish[0])[1];
      for (size_t b = 0; b < n.idx.size(); ++b) {
        const i64 len = n.idx[b];
        T* ob = out + i64(b) * d;
        std::fill(ob, ob + d, T(0));
        for (i64 t = 0; t < len; ++t) {
          const T* row = in[0] + (i64(b) * seq + t) * d;
          for (i64 j = 0; j < d; ++j) ob[j] += row[j];
        }
        for (i64 j = 0; j < d; ++j) ob[j] /= T(len);
      }
      break;
    }
    case Op::kCrossEntropyLogits:
      f_cross_entropy(in[0], n.idx.data(), out, (*ish[0])[0], (*ish[0])[1]);
      break;
    case Op::kLeaf:
    case Op::kConst:
      break;
  }
}

}  // namespace

void Tape::check_id(int id, const char* who) const {
  require(id >= 0 && id < static_cast<int>(nodes_.size()),
          std::string(who) + ": node id " + std::to_string(id) + " out of range");
}

const Tensor& Tape::value(int id) const {
  check_id(id, "value");
  const Node& n = nodes_[static_cast<size_t>(id)];
  return n.op == Op::kLeaf ? n.param->value : n.value;
}

const Shape& Tape::shape_of(int id) const {
  check_id(id, "shape_of");
  return nodes_[static_cast<size_t>(id)].shape;
}

const Tensor& Tape::grad_of(int id) const {
  check_id(id, "grad_of");
  return nodes_[static_cast<size_t>(id)].grad;
}

int Tape::push(Node n) {
  if (n.op != Op::kLeaf && n.op != Op::kConst) {
    std::vector<const float*> in;
    std::vector<const Shape*> ish;
    for (int id : n.inputs) {
      in.push_back(value(id).data.data());
      ish.push_back(&nodes_[static_cast<size_t>(id)].shape);
    }
    n.value = Tensor::zeros(n.shape);
    compute_node<float>(n, in, ish, n.value.data.data());
  }
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

int Tape::leaf(Param& p) {
  Node n;
  n.op = Op::kLeaf;
  n.shape = p.value.shape;
  n.param = &p;
  return push(std::move(n));
}

int Tape::constant(Tensor t) {
  Node n;
  n.op = Op::kConst;
  n.shape = t.shape;
  n.value = std::move(t);
  return push(std::move(n));
}

int Tape::matmul(int a, int b) {
  check_id(a, "matmul");
  check_id(b, "matmul");
  const Shape &sa = shape_of(a), &sb = shape_of(b);
  require(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0],
          "matmul: shape mismatch " + shape_str(sa) + " x " + shape_str(sb));
  Node n;
  n.op = Op::kMatMul;
  n.inputs = {a, b};
  n.shape = {sa[0], sb[1]};
  return push(std::move(n));
}

int Tape::bmm(int a, int b) {
  check_id(a, "bmm");
  check_id(b, "bmm");
  const Shape &sa = shape_of(a), &sb = shape_of(b);
  require(sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0] && sa[2] == sb[1],
          "bmm: shape mismatch " + shape_str(sa) + " x " + shape_str(sb));
  Node n;
  n.op = Op::kBmm;
  n.inputs = {a, b};
  n.shape = {sa[0], sa[1], sb[2]};
  return push(std::move(n));
}

int Tape::transpose(int a) {
  check_id(a, "transpose");
  const Shape& s = shape_of(a);
  require(s.size() == 2, "transpose: want rank-2, got " + shape_str(s));
  Node n;
  n.op = Op::kTranspose;
  n.inputs = {a};
  n.shape = {s[1], s[0]};
  return push(std::move(n));
}

int Tape::transpose_last2(int a) {
  check_id(a, "transpose_last2");
  const Shape& s = shape_of(a);
  require(s.size() == 3, "transpose_last2: want rank-3, got " + shape_str(s));
  Node n;
  n.op = Op::kTransposeLast2;
  n.inputs = {a};
  n.shape = {s[0], s[2], s[1]};
  return push(std::move(n));
}

int Tape::reshape(int a, Shape s) {
  check_id(a, "reshape");
  require(shape_numel(s) == shape_numel(shape_of(a)),
          "reshape: element count mismatch " + shape_str(shape_of(a)) + " -> " + shape_str(s));
  Node n;
  n.op = Op::kReshape;
  n.inputs = {a};
  n.shape = std::move(s);
  return push(std::move(n));
}

int Tape::col_slice(int a, i64 start, i64 len) {
  check_id(a, "col_slice");
  const Shape& s = shape_of(a);
  require(s.size() == 2, "col_slice: want rank-2, got " + shape_str(s));
  require(start >= 0 && len >= 1 && start + len <= s[1],
          "col_slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
              ") outside " + shape_str(s));
  Node n;
  n.op = Op::kColSlice;
  n.inputs = {a};
  n.shape = {s[0], len};
  n.a0 = start;
  n.a1 = len;
  return push(std::move(n));
}

int Tape::concat_cols(const std::vector<int>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  i64 rows = -1, width = 0;
  for (int id : parts) {
    check_id(id, "concat_cols");
    const Shape& s = shape_of(id);
    require(s.size() == 2, "concat_cols: want rank-2, got " + shape_str(s));
    require(rows < 0 || s[0] == rows, "concat_cols: row mismatch " + shape_str(s));
    rows = s[0];
    width += s[1];
  }
  Node n;
  n.op = Op::kConcatCols;
  n.inputs = parts;
  n.shape = {rows, width};
  return push(std::move(n));
}

int Tape::add(int a, int b) {
  check_id(a, "add");
  check_id(b, "add");
  require(shape_of(a) == shape_of(b),
          "add: shape mismatch " + shape_str(shape_of(a)) + " vs " + shape_str(shape_of(b)));
  Node n;
  n.op = Op::kAdd;
  n.inputs = {a, b};
  n.shape = shape_of(a);
  return push(std::move(n));
}

int Tape::add_rowvec(int a, int v) {
  check_id(a, "add_rowvec");
  check_id(v, "add_rowvec");
  const Shape &sa = shape_of(a), &sv = shape_of(v);
  require(sa.size() == 2 && sv.size() == 1 && sv[0] == sa[1],
          "add_rowvec: shape mismatch " + shape_str(sa) + " vs " + shape_str(sv));
  Node n;
  n.op = Op::kAddRowVec;
  n.inputs = {a, v};
  n.shape = sa;
  return push(std::move(n));
}

int Tape::scale(int a, float c) {
  check_id(a, "scale");
  Node n;
  n.op = Op::kScale;
  n.inputs = {a};
  n.shape = shape_of(a);
  n.scalar = c;
  return push(std::move(n));
}

int Tape::relu(int a) {
  check_id(a, "relu");
  Node n;
  n.op = Op::kRelu;
  n.inputs = {a};
  n.shape = shape_of(a);
  return push(std::move(n));
}

int Tape::softmax_rows(int a, std::vector<int32_t> row_valid) {
  check_id(a, "softmax_rows");
  const Shape& s = shape_of(a);
  require(s.size() == 2, "softmax_rows: want rank-2, got " + shape_str(s));
  if (!row_valid.empty()) {
    require(static_cast<i64>(row_valid.size()) == s[0],
            "softmax_rows: row_valid size " + std::to_string(row_valid.size()) +
                " vs rows " + std::to_string(s[0]));
    for (int32_t w : row_valid)
      require(w >= 1 && w <= s[1], "softmax_rows: valid count " + std::to_string(w) +
                                       " outside [1," + std::to_string(s[1]) + "]");
  }
  Node n;
  n.op = Op::kSoftmaxRows;
  n.inputs = {a};
  n.shape = s;
  n.idx = std::move(row_valid);
  return push(std::move(n));
}

int Tape::layer_norm_rows(int x, int gain, int bias) {
  check_id(x, "layer_norm_rows");
  check_id(gain, "layer_norm_rows");
  check_id(bias, "layer_norm_rows");
  const Shape &sx = shape_of(x), &sg = shape_of(gain), &sb = shape_of(bias);
  require(sx.size() == 2 && sg.size() == 1 && sb.size() == 1 && sg[0] == sx[1] && sb[0] == sx[1],
          "layer_norm_rows: shape mismatch x" + shape_str(sx) + " gain" + shape_str(sg) +
              " bias" + shape_str(sb));
  Node n;
  n.op = Op::kLayerNormRows;
  n.inputs = {x, gain, bias};
  n.shape = sx;
  return push(std::move(n));
}

int Tape::embedding(int table, std::vector<int32_t> ids) {
  check_id(table, "embedding");
  const Shape& s = shape_of(table);
  require(s.size() == 2, "embedding: table must be rank-2, got " + shape_str(s));
  require(!ids.empty(), "embedding: empty id list");
  for (int32_t id : ids)
    require(id >= 0 && id < s[0],
            "embedding: id " + std::to_string(id) + " outside vocab " + std::to_string(s[0]));
  Node n;
  n.op = Op::kEmbedding;
  n.inputs = {table};
  n.shape = {static_cast<i64>(ids.size()), s[1]};
  n.idx = std::move(ids);
  return push(std::move(n));
}

int Tape::mean_all(int a) {
  check_id(a, "mean_all");
  Node n;
  n.op = Op::kMeanAll;
  n.inputs = {a};
  n.shape = {1};
  return push(std::move(n));
}

int Tape::mean_pool_seq(int a, i64 batch, i64 seq, std::vector<int32_t> lengths) {
  check_id(a, "mean_pool_seq");
  const Shape& s = shape_of(a);
  require(s.size() == 2 && s[0] == batch * seq,
          "mean_pool_seq: input " + shape_str(s) + " vs batch*seq " +
              std::to_string(batch * seq));
  require(static_cast<i64>(lengths.size()) == batch, "mean_pool_seq: lengths size mismatch");
  for (int32_t len : lengths)
    require(len >= 1 && len <= seq, "mean_pool_seq: length " + std::to_string(len) +
                                        " outside [1," + std::to_string(seq) + "]");
  Node n;
  n.op = Op::kMeanPoolSeq;
  n.inputs = {a};
  n.shape = {batch, s[1]};
  n.a0 = batch;
  n.a1 = seq;
  n.idx = std::move(lengths);
  return push(std::move(n));
}

int Tape::cross_entropy_logits(int logits, std::vector<int32_t> labels) {
  check_id(logits, "cross_entropy_logits");
  const Shape& s = shape_of(logits);
  require(s.size() == 2, "cross_entropy_logits: want rank-2 logits, got " + shape_str(s));
  require(static_cast<i64>(labels.size()) == s[0], "cross_entropy_logits: label count " +
                                                       std::to_string(labels.size()) +
                                                       " vs rows " + std::to_string(s[0]));
  for (int32_t l : labels)
    require(l >= 0 && l < s[1], "cross_entropy_logits: label " + std::to_string(l) +
                                    " outside [0," + std::to_string(s[1]) + ")");
  Node n;
  n.op = Op::kCrossEntropyLogits;
  n.inputs = {logits};
  n.shape = {1};
  n.idx = std::move(labels);
  return push(std::move(n));
}

void Tape::backward(int loss) {
  check_id(loss, "backward");
  require(shape_numel(nodes_[static_cast<size_t>(loss)].shape) == 1,
          "backward: loss must be scalar, got " +
              shape_str(nodes_[static_cast<size_t>(loss)].shape));
  for (int i = 0; i <= loss; ++i)
    nodes_[static_cast<size_t>(i)].grad = Tensor::zeros(nodes_[static_cast<size_t>(i)].shape);
  nodes_[static_cast<size_t>(loss)].grad.data[0] = 1.f;

  for (int id = loss; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    const float* gy = n.grad.data.data();
    switch (n.op) {
      case Op::kLeaf:
      case Op::kConst:
        break;
      case Op::kMatMul: {
        const Tensor &A = value(n.inputs[0]), &B = value(n.inputs[1]);
        float* ga = nodes_[static_cast<size_t>(n.inputs[0])].grad.data.data();
        float* gb = nodes_[static_cast<size_t>(n.inputs[1])].grad.data.data();
        const i64 m = A.shape[0], k = A.shape[1], w = B.shape[1];
        for (i64 i = 0; i < m; ++i)
          for (i64 p = 0; p < k; ++p) {
            float s = 0.f;
            for (i64 j = 0; j < w; ++j) s += gy[i * w + j] * B.data[static_cast<size_t>(p * w + j)];
            ga[i * k + p] += s;
          }
        for (i64 i = 0; i < m; ++i)
          for (i64 p = 0; p < k; ++p) {
            const float av = A.data[static_cast<size_t>(i * k + p)];
            for (i64 j = 0; j < w; ++j) gb[p * w + j] += av * gy[i * w + j];
          }
        break;
      }
      case Op::kBmm: {
        const Tensor &A = value(n.inputs[0]), &B = value(n.inputs[1]);
        float* ga = nodes_[static_cast<size_t>(n.inputs[0])].grad.data.data();
        float* gb = nodes_[static_cast<size_t>(n.inputs[1])].grad.data.data();
        const i64 nb = A.shape[0], m = A.shape[1], k = A.shape[2], w = B.shape[2];
        for (i64 q = 0; q < nb; ++q) {
          const float* Aq = A.data.data() + q * m * k;
          const float* Bq = B.data.data() + q * k * w;
          const float* gq = gy + q * m * w;
          float* gaq = ga + q * m * k;
          float* gbq = gb + q * k * w;
          for (i64 i = 0; i < m; ++i)
            for (i64 p = 0; p < k; ++p) {
              float s = 0.f;
              for (i64 j = 0; j < w; ++j) s += gq[i * w + j] * Bq[p * w + j];
              gaq[i * k + p] += s;
            }
          for (i64 i = 0; i < m; ++i)
            for (i64 p = 0; p < k; ++p) {
              const float av = Aq[i * k + p];
              for (i64 j = 0; j < w; ++j) gbq[p * w + j] += av * gq[i * w + j];
            }
        }
        break;
      }
      case Op::kTranspose: {
        float* ga = nodes_[static_cast<size_t>(n.inputs[0])].grad.data.data();
        const i64 m = shape_of(n.inputs[0])[0], w = shape_of(n.inputs[0])[1];
        for (i64 i = 0; i < m; ++i)
          for (i64 j = 0; j < w; ++j) ga[i * w + j] += gy[j * m + i];
        break;
      }
      case Op::kTransposeLast2: {
        float* ga = nodes_[static_cast<size_t>(n.inputs[0])].grad.data.data();
        const i64 nb = shape_of(n.inputs[0])[0], m = shape_of(n.inputs[0])[1],
                  w = shape_of(n.inputs[0])[2];
        for (i64 q = 0; q < nb; ++q)
          for (i64 i = 0; i < m; ++i)
            for (i64 j = 0; j < w; ++j) ga[q * m * w + i * w + j] += gy[q * m * w + j * m + i];
        break;
      }
      case Op::kReshape: {
        float* ga = nodes_[static_cast<size_t>(n.inputs[0])].grad.data.data();
        const i64 nn = shape_numel(n.shape);
        for (i64 i = 0; i < nn; ++i) ga[i] += gy[i];
        break;
      }
      case Op::kColSlice: {
        float* ga = nodes_[static_cast<size_t>(n.inputs[0])].grad.data.data();
        const i64 rows = shape_of(n.inputs[0])[0], cols = shape_of(n.inputs[0])[1];
        for (i64 r = 0; r < rows; ++r)
          for (i64 j = 0; j < n.a1; ++j) ga[r * cols + n.a0 + j] += gy[r * n.a1 + j];
        break;
      }
      case Op::kConcatCols: {
        const i64 rows = n.shape[0], w = n.shape[1];
        i64 off = 0;
        for (int pid : n.inputs) {
          float* gp = nodes_[static_cast<size_t>(pid)].grad.data.data();
          const i64 cp = shape_of(pid)[1];
          for (i64 r = 0; r < rows; ++r)
            for (i64 j = 0; j < cp; ++j) gp[r * cp + j] += gy[r * w + off + j];
          off += cp;
        }
        break;
      }
      case Op::kAdd: {
        float* ga = nodes_[static_cast<size_t>(n.inputs[0])].grad.data.data();
        float* gb = nodes_[static_cast<size_t>(n.inputs[1])].grad.data.data();
        const i64 nn = shape_numel(n.shape);
        for (i64 i = 0; i < nn; ++i) {
          ga[i] += gy[i];
          gb[i] += gy[i];
        }
        break;
      }
      case Op::kAddRowVec: {
        float* ga = nodes_[static_cast<size_t>(n.inputs[0])].grad.data.data();
        float* gv = nodes_[static_cast<size_t>(n.inputs[1])].grad.data.data();
        const i64 rows = n.shape[0], w = n.shape[1];
        for (i64 r = 0; r < rows; ++r)
          for (i64 j = 0; j < w; ++j) {
            ga[r * w + j] += gy[r * w + j];
            gv[j] += gy[r * w + j];
          }
        break;
      }
      case Op::kScale: {
        float* ga = nodes_[static_cast<size_t>(n.inputs[0])].grad.data.data();
        const i64 nn = shape_numel(n.shape);
        for (i64 i = 0; i < nn; ++i) ga[i] += n.scalar * gy[i];
        break;
      }
      case Op::kRelu: {
        const Tensor& X = value(n.inputs[0]);
        float* ga = nodes_[static_cast<size_t>(n.inputs[0])].grad.data.data();
        const i64 nn = shape_numel(n.shape);
        for (i64 i = 0; i < nn; ++i)
          if (X.data[static_cast<size_t>(i)] > 0.f) ga[i] += gy[i];
        break;
      }
      case Op::kSoftmaxRows: {
        const Tensor& Y = n.value;
        float* ga = nodes_[static_cast<size_t>(n.inputs[0])].grad.data.data();
        const i64 rows = n.shape[0], cols = n.shape[1];
        for (i64 r = 0; r < rows; ++r) {
          const i64 w = n.idx.empty() ? cols : n.idx[static_cast<size_t>(r)];
          const float* yr = Y.data.data() + r * cols;
          const float* gr = gy + r * cols;
          float dot = 0.f;
          for (i64 j = 0; j < w; ++j) dot += gr[j] * yr[j];
          for (i64 j = 0; j < w; ++j) ga[r * cols + j] += yr[j] * (gr[j] - dot);
        }
        break;
      }
      case Op::kLayerNormRows: {
        const Tensor& X = value(n.inputs[0]);
        const Tensor& G = value(n.inputs[1]);
        float* gx = nodes_[static_cast<size_t>(n.inputs[0])].grad.data.data();
        float* gg = nodes_[static_cast<size_t>(n.inputs[1])].grad.data.data();
        float* gbv = nodes_[static_cast<size_t>(n.inputs[2])].grad.data.data();
        const i64 rows = n.shape[0], w = n.shape[1];
        std::vector<float> xhat(static_cast<size_t>(w));
        for (i64 r = 0; r < rows; ++r) {
          const float* xr = X.data.data() + r * w;
          const float* gr = gy + r * w;
          float mean = 0.f;
          for (i64 j = 0; j < w; ++j) mean += xr[j];
          mean /= float(w);
          float var = 0.f;
          for (i64 j = 0; j < w; ++j) {
            const float d = xr[j] - mean;
            var += d * d;
          }
          var /= float(w);
          const float inv = 1.f / std::sqrt(var + kLayerNormEps);
          for (i64 j = 0; j < w; ++j) xhat[static_cast<size_t>(j)] = (xr[j] - mean) * inv;
          float m1 = 0.f, m2 = 0.f;
          for (i64 j = 0; j < w; ++j) {
            const float dxh = gr[j] * G.data[static_cast<size_t>(j)];
            m1 += dxh;
            m2 += dxh * xhat[static_cast<size_t>(j)];
          }
          m1 /= float(w);
          m2 /= float(w);
          for (i64 j = 0; j < w; ++j) {
            const float dxh = gr[j] * G.data[static_cast<size_t>(j)];
            gx[r * w + j] += inv * (dxh - m1 - xhat[static_cast<size_t>(j)] * m2);
            gg[j] += gr[j] * xhat[static_cast<size_t>(j)];
            gbv[j] += gr[j];
          }
        }
        break;
      }
      case Op::kEmbedding: {
        float* gt = nodes_[static_cast<size_t>(n.inputs[0])].grad.data.data();
        const i64 d = n.shape[1];
        for (size_t r = 0; r < n.idx.size(); ++r)
          for (i64 j = 0; j < d; ++j) gt[i64(n.idx[r]) * d + j] += gy[i64(r) * d + j];
        break;
      }
      case Op::kMeanAll: {
        float* ga = nodes_[static_cast<size_t>(n.inputs[0])].grad.data.data();
        const i64 nn = shape_numel(shape_of(n.inputs[0]));
        const float g0 = gy[0] / float(nn);
        for (i64 i = 0; i < nn; ++i) ga[i] += g0;
        break;
      }
      case Op::kMeanPoolSeq: {
        float* ga = nodes_[static_cast<size_t>(n.inputs[0])].grad.data.data();
        const i64 seq = n.a1, d = n.shape[1];
        for (size_t b = 0; b < n.idx.size(); ++b) {
          const i64 len = n.idx[b];
          for (i64 t = 0; t < len; ++t)
            for (i64 j = 0; j < d; ++j)
              ga[(i64(b) * seq + t) * d + j] += gy[i64(b) * d + j] / float(len);
        }
        break;
      }
      case Op::kCrossEntropyLogits: {
        const Tensor& L = value(n.inputs[0]);
        float* gl = nodes_[static_cast<size_t>(n.inputs[0])].grad.data.data();
        const i64 rows = L.shape[0], cols = L.shape[1];
        const float g0 = gy[0] / float(rows);
        std::vector<float> p(static_cast<size_t>(cols));
        for (i64 r = 0; r < rows; ++r) {
          const float* xr = L.data.data() + r * cols;
          float mx = xr[0];
          for (i64 j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
          float sum = 0.f;
          for (i64 j = 0; j < cols; ++j) {
            p[static_cast<size_t>(j)] = std::exp(xr[j] - mx);
            sum += p[static_cast<size_t>(j)];
          }
          for (i64 j = 0; j < cols; ++j) {
            const float soft = p[static_cast<size_t>(j)] / sum;
            const float ind = (j == n.idx[static_cast<size_t>(r)]) ? 1.f : 0.f;
            gl[r * cols + j] += g0 * (soft - ind);
          }
        }
        break;
      }
    }
  }

  for (int id = 0; id <= loss; ++id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.op != Op::kLeaf) continue;
    for (size_t i = 0; i < n.grad.data.size(); ++i) n.param->grad.data[i] += n.grad.data[i];
  }
}

double Tape::replay_double(int out, const Param* perturb, i64 index, double delta) const {
  check_id(out, "replay_double");
  std::vector<std::vector<double>> vals(static_cast<size_t>(out) + 1);
  for (int id = 0; id <= out; ++id) {
    const Node& n = nodes_[static_cast<size_t>(id)];
    std::vector<double>& v = vals[static_cast<size_t>(id)];
    if (n.op == Op::kLeaf) {
      v.assign(n.param->value.data.begin(), n.param->value.data.end());
      if (n.param == perturb) v[static_cast<size_t>(index)] += delta;
      continue;
    }
    if (n.op == Op::kConst) {
      v.assign(n.value.data.begin(), n.value.data.end());
      continue;
    }
    std::vector<const double*> in;
    std::vector<const Shape*> ish;
    for (int pid : n.inputs) {
      in.push_back(vals[static_cast<size_t>(pid)].data());
      ish.push_back(&nodes_[static_cast<size_t>(pid)].shape);
    }
    v.assign(static_cast<size_t>(shape_numel(n.shape)), 0.0);
    compute_node<double>(n, in, ish, v.data());
  }
  return vals[static_cast<size_t>(out)][0];
}

FdReport finite_diff_check(Tape& tape, int loss, const std::vector<Param*>& params,
                           const FdOptions& opts) {
  require(opts.h > 0.0 && opts.h <= 0.1,
          "finite_diff_check: h must be in (0, 0.1], got " + std::to_string(opts.h));
  require(!params.empty(), "finite_diff_check: no params");

  for (Param* p : params) p->zero_grad();
  tape.backward(loss);
  if (opts.extra_grads) opts.extra_grads();

  FdReport rep;
  const i64 max_attempts = 500 * std::max(1, opts.samples);
  i64 attempts = 0;
  u64 ctr = 0;
  const u64 stream = rng::stream_of("finite_diff_check");
  while (rep.checked < opts.samples && attempts < max_attempts) {
    ++attempts;
    Param* p = params[rng::below(opts.seed, stream, ctr++, params.size())];
    const i64 nn = p->value.numel();
    const i64 at = static_cast<i64>(rng::below(opts.seed, stream, ctr++, static_cast<u64>(nn)));
    if (opts.skip && opts.skip(*p, at)) {
      ++rep.skipped;
      continue;
    }
    const double fp = tape.replay_double(loss, p, at, opts.h) +
                      (opts.extra_value ? opts.extra_value(*p, at, opts.h) : 0.0);
    const double fm = tape.replay_double(loss, p, at, -opts.h) +
                      (opts.extra_value ? opts.extra_value(*p, at, -opts.h) : 0.0);
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      rep.nonfinite = true;
      rep.max_rel_err = std::numeric_limits<double>::infinity();
      rep.worst_param = p->name;
      rep.worst_index = at;
      ++rep.checked;
      continue;
    }
    const double fd = (fp - fm) / (2.0 * opts.h);
    const double g = static_cast<double>(p->grad.data[static_cast<size_t>(at)]);
    const double rel = std::abs(g - fd) / std::max(1.0, std::abs(fd));
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_param = p->name;
      rep.worst_index = at;
      rep.worst_analytic = g;
      rep.worst_fd = fd;
    }
    ++rep.checked;
  }
  return rep;
}

}  // namespace np
