#include "np/data.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "np/rng.hpp"

namespace np {

namespace {

Example make_retrieval_example(u64 seed, u64 index, i64 m, i64 n_classes) {
  // Draw m distinct keys from [0, 2m) by partial Fisher-Yates.
  std::vector<int32_t> pool(static_cast<size_t>(2 * m));
  for (i64 i = 0; i < 2 * m; ++i) pool[static_cast<size_t>(i)] = int32_t(i);
  u64 ctr = 0;
  for (i64 i = 0; i < m; ++i) {
    const u64 j = i + rng::below(seed, index, ctr++, static_cast<u64>(2 * m - i));
    std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
  }
  Example ex;
  ex.tokens.reserve(static_cast<size_t>(2 * m + 1));
  std::vector<int32_t> values(static_cast<size_t>(m));
  for (i64 i = 0; i < m; ++i) {
    values[static_cast<size_t>(i)] =
        int32_t(2 * m + i64(rng::below(seed, index, ctr++, static_cast<u64>(n_classes))));
    ex.tokens.push_back(pool[static_cast<size_t>(i)]);
    ex.tokens.push_back(values[static_cast<size_t>(i)]);
  }
  const i64 q = static_cast<i64>(rng::below(seed, index, ctr++, static_cast<u64>(m)));
  ex.tokens.push_back(pool[static_cast<size_t>(q)]);
  ex.label = values[static_cast<size_t>(q)] - int32_t(2 * m);
  return ex;
}

Example make_majority_example(u64 seed, u64 index, i64 len, i64 n_classes) {
  Example ex;
  ex.tokens.resize(static_cast<size_t>(len));
  std::vector<i64> counts(static_cast<size_t>(n_classes), 0);
  for (i64 i = 0; i < len; ++i) {
    const int32_t tok =
        int32_t(rng::below(seed, index, static_cast<u64>(i), static_cast<u64>(n_classes)));
    ex.tokens[static_cast<size_t>(i)] = tok;
    ++counts[static_cast<size_t>(tok)];
  }
  i64 best = 0;
  for (i64 c = 1; c < n_classes; ++c)
    if (counts[static_cast<size_t>(c)] > counts[static_cast<size_t>(best)]) best = c;
  ex.label = int32_t(best);
  return ex;
}

}  // namespace

Dataset gen_retrieval(u64 seed, i64 n_train, i64 n_eval, i64 pairs, i64 vocab, i64 n_classes) {
  require(pairs >= 1, "gen_retrieval: pairs must be >= 1");
  require(n_classes >= 2, "gen_retrieval: n_classes must be >= 2");
  require(vocab >= 2 * pairs + n_classes,
          "gen_retrieval: vocab " + std::to_string(vocab) + " too small, need >= " +
              std::to_string(2 * pairs + n_classes));
  require(n_train >= 1 && n_eval >= 0, "gen_retrieval: bad split sizes");
  Dataset ds;
  ds.name = "retrieval";
  ds.seed = seed;
  ds.vocab = vocab;
  ds.n_classes = n_classes;
  for (i64 i = 0; i < n_train; ++i)
    ds.train.push_back(make_retrieval_example(seed, static_cast<u64>(i), pairs, n_classes));
  for (i64 i = 0; i < n_eval; ++i)
    ds.eval.push_back(
        make_retrieval_example(seed, static_cast<u64>(n_train + i), pairs, n_classes));
  return ds;
}

Dataset gen_majority(u64 seed, i64 n_train, i64 n_eval, i64 len, i64 n_classes, i64 vocab) {
  require(len >= 1, "gen_majority: len must be >= 1");
  require(n_classes >= 2, "gen_majority: n_classes must be >= 2");
  require(vocab >= n_classes, "gen_majority: vocab smaller than n_classes");
  require(n_train >= 1 && n_eval >= 0, "gen_majority: bad split sizes");
  Dataset ds;
  ds.name = "majority";
  ds.seed = seed;
  ds.vocab = vocab;
  ds.n_classes = n_classes;
  for (i64 i = 0; i < n_train; ++i)
    ds.train.push_back(make_majority_example(seed, static_cast<u64>(i), len, n_classes));
  for (i64 i = 0; i < n_eval; ++i)
    ds.eval.push_back(make_majority_example(seed, static_cast<u64>(n_train + i), len, n_classes));
  return ds;
}

std::vector<std::vector<i64>> batch_indices(i64 n, i64 batch_size, u64 epoch_seed) {
  require(batch_size >= 1, "batch_indices: batch_size must be >= 1");
  require(n >= 1, "batch_indices: empty dataset");
  std::vector<i64> order(static_cast<size_t>(n));
  for (i64 i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  rng::shuffle(order, epoch_seed, rng::stream_of("batches"));
  std::vector<std::vector<i64>> out;
  for (i64 at = 0; at < n; at += batch_size) {
    const i64 end = std::min(n, at + batch_size);
    out.emplace_back(order.begin() + at, order.begin() + end);
  }
  return out;
}

Batch make_batch(const std::vector<Example>& examples, const std::vector<i64>& idxs) {
  require(!idxs.empty(), "make_batch: empty index list");
  Batch b;
  b.batch = static_cast<i64>(idxs.size());
  for (i64 ix : idxs) {
    require(ix >= 0 && ix < static_cast<i64>(examples.size()), "make_batch: index out of range");
    const Example& ex = examples[static_cast<size_t>(ix)];
    require(!ex.tokens.empty(), "make_batch: empty example");
    b.seq = std::max(b.seq, static_cast<i64>(ex.tokens.size()));
  }
  b.tokens.assign(static_cast<size_t>(b.batch * b.seq), 0);
  for (i64 r = 0; r < b.batch; ++r) {
    const Example& ex = examples[static_cast<size_t>(idxs[static_cast<size_t>(r)])];
    std::copy(ex.tokens.begin(), ex.tokens.end(), b.tokens.begin() + r * b.seq);
    b.lengths.push_back(int32_t(ex.tokens.size()));
    b.labels.push_back(ex.label);
  }
  return b;
}

void write_dataset(const std::string& path, const std::vector<Example>& examples) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "write_dataset: cannot open " + path);
  for (const Example& ex : examples) {
    for (size_t i = 0; i < ex.tokens.size(); ++i) {
      if (i) out << ' ';
      out << ex.tokens[i];
    }
    out << '\t' << ex.label << '\n';
  }
  require(out.good(), "write_dataset: write failed for " + path);
}

std::vector<Example> read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "read_dataset: cannot open " + path);
  std::vector<Example> out;
  std::string line;
  i64 lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const size_t tab = line.find('\t');
    require(tab != std::string::npos,
            "read_dataset: missing tab at " + path + ":" + std::to_string(lineno));
    Example ex;
    std::istringstream toks(line.substr(0, tab));
    i64 t;
    while (toks >> t) ex.tokens.push_back(int32_t(t));
    require(!ex.tokens.empty(),
            "read_dataset: no tokens at " + path + ":" + std::to_string(lineno));
    ex.label = int32_t(std::stol(line.substr(tab + 1)));
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace np
