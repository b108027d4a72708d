#pragma once

#include <string>
#include <vector>

#include "np/model.hpp"

namespace np {

struct Example {
  std::vector<int32_t> tokens;
  int32_t label = 0;
};

struct Dataset {
  std::string name;
  std::vector<Example> train;
  std::vector<Example> eval;
  u64 seed = 0;
  i64 vocab = 0;
  i64 n_classes = 0;
};

// Key-value retrieval: m (key, value) pairs followed by a query key; the
// label is the class of the value paired with the query. Keys come from
// [0, 2m), values from [2m, 2m + n_classes); keys are distinct within an
// example. Train and eval draw from disjoint counter ranges.
Dataset gen_retrieval(u64 seed, i64 n_train, i64 n_eval, i64 pairs, i64 vocab,
                      i64 n_classes);

// Majority vote over class tokens; ties break toward the smallest class id.
Dataset gen_majority(u64 seed, i64 n_train, i64 n_eval, i64 len, i64 n_classes, i64 vocab);

// Seeded permutation split into fixed-size batches; the last partial batch is
// kept.
std::vector<std::vector<i64>> batch_indices(i64 n, i64 batch_size, u64 epoch_seed);

// Pads with token 0 up to the longest sequence in the batch; attention and
// pooling are restricted to real tokens via the lengths.
Batch make_batch(const std::vector<Example>& examples, const std::vector<i64>& idxs);

// Line format: "tok tok ... tok<TAB>label\n".
void write_dataset(const std::string& path, const std::vector<Example>& examples);
std::vector<Example> read_dataset(const std::string& path);

}  // namespace np
