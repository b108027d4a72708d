#include "np/headprune.hpp"

#include <algorithm>
#include <cmath>

namespace np {

SimilarityMatrix SimilarityMatrix::identity(i64 k) {
  SimilarityMatrix s{k, std::vector<uint8_t>(static_cast<size_t>(k * k), 0)};
  for (i64 i = 0; i < k; ++i) s.set(i, i, true);
  return s;
}

bool SimilarityMatrix::any_off_diagonal() const {
  for (i64 i = 0; i < k; ++i)
    for (i64 j = 0; j < k; ++j)
      if (i != j && at(i, j)) return true;
  return false;
}

void SimilarityMatrix::validate() const {
  require(k >= 1 && static_cast<i64>(bits.size()) == k * k, "similarity: bad dimensions");
  for (i64 i = 0; i < k; ++i) {
    require(at(i, i) == 1, "similarity: zero diagonal at " + std::to_string(i));
    for (i64 j = 0; j < k; ++j)
      require(at(i, j) == at(j, i), "similarity: asymmetric at (" + std::to_string(i) + "," +
                                        std::to_string(j) + ")");
  }
}

float head_distance(const AttentionLayer& layer, i64 i, i64 j) {
  require(i != j, "head_distance: i == j");
  require(i >= 0 && i < layer.heads() && j >= 0 && j < layer.heads(),
          "head_distance: head index outside [0," + std::to_string(layer.heads()) + ")");
  auto& l = const_cast<AttentionLayer&>(layer);
  const HeadSlice hi = head_slice(l, i), hj = head_slice(l, j);
  float dist = 0.f;
  for (i64 r = 0; r < layer.d; ++r)
    for (i64 c = 0; c < 3 * layer.dh; ++c)
      dist = std::max(dist, std::fabs(hi.a(r, c) - hj.a(r, c)));
  return dist;
}

SimilarityMatrix build_similarity(const AttentionLayer& layer, float theta) {
  require(theta >= 0.f, "build_similarity: theta must be >= 0");
  const i64 k = layer.heads();
  SimilarityMatrix s = SimilarityMatrix::identity(k);
  for (i64 i = 0; i < k; ++i)
    for (i64 j = i + 1; j < k; ++j) {
      const bool close = head_distance(layer, i, j) <= theta;
      s.set(i, j, close);
      s.set(j, i, close);
    }
  return s;
}

DominatorMatrix find_dominating(const SimilarityMatrix& s) {
  s.validate();
  const i64 k = s.k;
  DominatorMatrix d{k, std::vector<uint8_t>(static_cast<size_t>(k * k), 0),
                    std::vector<i64>(static_cast<size_t>(k), 0)};
  for (i64 i = 0; i < k; ++i) d.bits[static_cast<size_t>(i * k + i)] = 1;

  for (i64 i = 0; i < k; ++i) {
    i64 jstar = i;
    for (i64 j = 0; j < k; ++j) {
      // s_vec = S[jstar,:] - S[j,:]
      bool has_plus = false, has_minus = false, all_zero = true;
      for (i64 c = 0; c < k; ++c) {
        const int diff = int(s.at(jstar, c)) - int(s.at(j, c));
        if (diff > 0) has_plus = true;
        if (diff < 0) has_minus = true;
        if (diff != 0) all_zero = false;
      }
      if ((!has_plus && has_minus) || (all_zero && jstar < j)) jstar = j;
    }
    d.bits[static_cast<size_t>(i * k + jstar)] = 1;
    d.dominator[static_cast<size_t>(i)] = jstar;
  }
  return d;
}

const char* merge_target_name(MergeTarget t) {
  return t == MergeTarget::kOutputProjection ? "wo" : "lin";
}

MergeTarget merge_target_from(const std::string& s) {
  if (s == "wo" || s == "output_projection") return MergeTarget::kOutputProjection;
  if (s == "lin" || s == "mlp_in_columns") return MergeTarget::kMlpInColumns;
  fail("merge_target: unknown value '" + s + "' (wo|lin)");
}

PruneReport elim_redundant(AttentionLayer& layer, MlpLayer& mlp, float theta,
                           MergeTarget target) {
  require(theta >= 0.f, "elim_redundant: theta must be >= 0");
  require(layer.heads() >= 1, "elim_redundant: layer has no heads");
  PruneReport report;

  const SimilarityMatrix s = build_similarity(layer, theta);
  if (!s.any_off_diagonal()) return report;  // no_similar early exit

  const DominatorMatrix dom = find_dominating(s);
  const i64 k = layer.heads(), dh = layer.dh, d = layer.d;
  std::vector<i64> marked;
  for (i64 i = 0; i < k; ++i) {
    const i64 j = dom.dominator[static_cast<size_t>(i)];
    if (j == i) continue;
    if (target == MergeTarget::kOutputProjection) {
      HeadSlice src = head_slice(layer, i), dst = head_slice(layer, j);
      for (i64 r = 0; r < dh; ++r)
        for (i64 c = 0; c < d; ++c) dst.wo(r, c) += src.wo(r, c);
    } else {
      // L_in column blocks are addressed by original head position; the
      // embedding width never shrinks.
      const i64 src_col = layer.head_ids[static_cast<size_t>(i)] * dh;
      const i64 dst_col = layer.head_ids[static_cast<size_t>(j)] * dh;
      Tensor& lin = mlp.l_in.value;
      require(src_col + dh <= lin.cols() && dst_col + dh <= lin.cols(),
              "elim_redundant: L_in narrower than the original head layout");
      for (i64 r = 0; r < lin.rows(); ++r)
        for (i64 c = 0; c < dh; ++c) lin.at(r, dst_col + c) += lin.at(r, src_col + c);
    }
    report.events.push_back(PruneEvent{layer.head_ids[static_cast<size_t>(i)],
                                       layer.head_ids[static_cast<size_t>(j)],
                                       head_distance(layer, i, j)});
    marked.push_back(i);
  }

  // The scan cannot dominate the lexicographically maximal head, so at least
  // one head always survives; the pop is a guard for that invariant.
  if (static_cast<i64>(marked.size()) == k && !marked.empty()) {
    marked.pop_back();
    report.events.pop_back();
  }
  if (!marked.empty()) prune_heads(layer, marked);
  return report;
}

}  // namespace np
