#pragma once

#include <functional>
#include <vector>

#include "np/tensor.hpp"

namespace np {

inline constexpr float kLayerNormEps = 1e-5f;

enum class Op : uint8_t {
  kLeaf,
  kConst,
  kMatMul,
  kBmm,
  kTranspose,
  kTransposeLast2,
  kReshape,
  kColSlice,
  kConcatCols,
  kAdd,
  kAddRowVec,
  kScale,
  kRelu,
  kSoftmaxRows,
  kLayerNormRows,
  kEmbedding,
  kMeanAll,
  kMeanPoolSeq,
  kCrossEntropyLogits,
};

const char* op_name(Op op);

struct Node {
  Op op;
  std::vector<int> inputs;
  Shape shape;
  Tensor value;             // owned; empty for kLeaf (lives in the Param)
  Tensor grad;              // allocated per backward sweep
  Param* param = nullptr;   // kLeaf only
  float scalar = 0.f;       // kScale factor
  i64 a0 = 0, a1 = 0;       // op-specific: slice start/len, pool batch/seq
  std::vector<int32_t> idx; // ids / labels / row-valid counts / lengths
};

// Define-by-run record of primitive-op applications. Forward values are
// computed eagerly as nodes are pushed, so the node list is topologically
// ordered by construction; backward() replays it in reverse.
class Tape {
 public:
  int leaf(Param& p);
  int constant(Tensor t);
  int matmul(int a, int b);
  int bmm(int a, int b);
  int transpose(int a);
  int transpose_last2(int a);
  int reshape(int a, Shape s);
  int col_slice(int a, i64 start, i64 len);
  int concat_cols(const std::vector<int>& parts);
  int add(int a, int b);
  int add_rowvec(int a, int v);
  int scale(int a, float c);
  int relu(int a);
  // Row-wise softmax; when row_valid is non-empty it gives the number of
  // leading columns that participate per row, the rest are written as 0.
  int softmax_rows(int a, std::vector<int32_t> row_valid = {});
  int layer_norm_rows(int x, int gain, int bias);
  int embedding(int table, std::vector<int32_t> ids);
  int mean_all(int a);
  // Input (batch*seq, d) -> (batch, d), averaging the first lengths[b] rows
  // of each sequence.
  int mean_pool_seq(int a, i64 batch, i64 seq, std::vector<int32_t> lengths);
  // Mean over rows of (logsumexp(row) - row[label]).
  int cross_entropy_logits(int logits, std::vector<int32_t> labels);

  const Tensor& value(int id) const;
  const Shape& shape_of(int id) const;
  const Tensor& grad_of(int id) const;  // valid after backward
  i64 size() const { return static_cast<i64>(nodes_.size()); }
  void clear() { nodes_.clear(); }

  // Reverse-mode sweep from a scalar node. Accumulates d loss / d param into
  // each referenced Param's grad (running it twice without zeroing doubles
  // the grads).
  void backward(int loss);

  // Re-evaluates the recorded computation in float64, with one leaf
  // coordinate optionally shifted by delta. Oracle support for finite
  // differences; the engine itself stays float32.
  double replay_double(int out, const Param* perturb = nullptr, i64 index = 0,
                       double delta = 0.0) const;

 private:
  int push(Node n);
  void check_id(int id, const char* who) const;
  std::vector<Node> nodes_;
};

struct FdOptions {
  double h = 1e-3;  // central-difference step, required in (0, 0.1]
  int samples = 100;
  u64 seed = 0x5eed;
  // Coordinates for which skip() returns true are excluded from sampling
  // (non-differentiable points are the caller's to rule out).
  std::function<bool(const Param&, i64)> skip;
  // Optional extra objective term f(param, index, delta): value of the term
  // with that one coordinate shifted by delta. Its analytic gradients are
  // added by extra_grads() after the tape backward.
  std::function<double(const Param&, i64, double)> extra_value;
  std::function<void()> extra_grads;
};

struct FdReport {
  double max_rel_err = 0.0;
  i64 checked = 0;
  i64 skipped = 0;
  bool nonfinite = false;
  std::string worst_param;
  i64 worst_index = -1;
  double worst_analytic = 0.0;
  double worst_fd = 0.0;
};

// Central finite differences of (recorded loss + extra term) against analytic
// gradients over sampled coordinates of the given params. Relative error is
// |analytic - fd| / max(1, |fd|). Param grads are zeroed and recomputed here.
FdReport finite_diff_check(Tape& tape, int loss, const std::vector<Param*>& params,
                           const FdOptions& opts = {});

}  // namespace np
