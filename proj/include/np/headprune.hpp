#pragma once

#include <vector>

#include "np/model.hpp"

namespace np {

struct SimilarityMatrix {
  i64 k = 0;
  std::vector<uint8_t> bits;  // k*k, row-major

  static SimilarityMatrix identity(i64 k);
  uint8_t at(i64 i, i64 j) const { return bits[static_cast<size_t>(i * k + j)]; }
  void set(i64 i, i64 j, bool v) { bits[static_cast<size_t>(i * k + j)] = v ? 1 : 0; }
  bool any_off_diagonal() const;
  void validate() const;  // symmetric with unit diagonal
};

struct DominatorMatrix {
  i64 k = 0;
  std::vector<uint8_t> bits;    // identity-initialized, plus one scan entry per row
  std::vector<i64> dominator;   // scan result j* per row (may equal the row index)

  uint8_t at(i64 i, i64 j) const { return bits[static_cast<size_t>(i * k + j)]; }
};

// Max over corresponding entries of |A_{H_i} - A_{H_j}| (the d x 3*dh blocks).
float head_distance(const AttentionLayer& layer, i64 i, i64 j);

// S[i,j] = 1 iff head_distance(i,j) <= theta (inclusive), diagonal 1.
SimilarityMatrix build_similarity(const AttentionLayer& layer, float theta);

// Quadratic-scan dominating-set approximation: for each i a candidate j*
// (initially i) is replaced by j when j's similarity row strictly contains
// j*'s, or when the rows are equal and j* < j (later-head bias).
DominatorMatrix find_dominating(const SimilarityMatrix& s);

enum class MergeTarget : uint8_t { kOutputProjection, kMlpInColumns };

const char* merge_target_name(MergeTarget t);
MergeTarget merge_target_from(const std::string& s);

struct PruneEvent {
  i64 pruned_id = -1;     // original head ids
  i64 dominator_id = -1;
  float distance = 0.f;
};

struct PruneReport {
  i64 layer = -1;
  std::vector<PruneEvent> events;
};

// Builds S over the live heads; returns unchanged with an empty report when
// no off-diagonal similarity exists. Otherwise merges each dominated head
// into its dominator in increasing slot order (chains accumulate in place)
// and prunes all dominated heads in one pass afterwards. kOutputProjection
// adds the dominated head's w_o rows into the dominator's; kMlpInColumns adds
// the head's original L_in column block into the dominator's. The last
// surviving head of a layer is never removed.
PruneReport elim_redundant(AttentionLayer& layer, MlpLayer& mlp, float theta,
                           MergeTarget target = MergeTarget::kOutputProjection);

}  // namespace np
