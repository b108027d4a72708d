#pragma once

#include <vector>

#include "np/model.hpp"

namespace np {

struct RegConfig {
  float alpha = 0.f;        // attention penalty weight
  float beta = 0.f;         // MLP penalty weight
  float eps_count = 1e-4f;  // near-zero count threshold
  float group_floor = 1e-12f;  // guard for the group-norm denominator
  i64 count_offset = 0;        // uniform n0 added to every row count; 0 = off
  void validate() const;
};

// n[i] = #{j : |M[i,j]| < eps}, strict inequality.
std::vector<i64> count_near_zero(const Tensor& m, float eps);

// Degree-weighted L1: (1/d) * n_in . |L_in| . 1 + (1/d_e) * n_out . |L_out| . 1
// with counts recomputed from the current weights and treated as constants.
double r_mlp(const Tensor& l_in, const Tensor& l_out, float eps, i64 count_offset = 0);

// d/dL_in[i,j] = (1/d) * n_in[i] * sign(L_in[i,j]); sign(0)=0. Writes the
// unscaled penalty gradients into g_in / g_out (overwrites).
void r_mlp_grad(const Tensor& l_in, const Tensor& l_out, float eps, i64 count_offset,
                Tensor& g_in, Tensor& g_out);

// Row-group l1^0.5 over the live [Q|K|V] concatenation:
// sum_i sqrt(sum_j |A[i,j]|).
double r_attn(const Tensor& a);

// d/dA[i,j] = sign(A[i,j]) / (2*sqrt(max(g_i, delta))); rows with
// g_i < delta get a zero gradient row. Overwrites g.
void r_attn_grad(const Tensor& a, float delta, Tensor& g);

// Frozen-count double-precision forms for finite-difference oracles.
double r_mlp_with_counts(const double* lin, i64 lin_rows, i64 lin_cols, const double* lout,
                         i64 lout_rows, i64 lout_cols, const std::vector<i64>& n_in,
                         const std::vector<i64>& n_out);
double r_attn_of(const double* a, i64 rows, i64 cols);

struct RegReport {
  std::vector<double> attn_per_layer;
  std::vector<double> mlp_per_layer;
  double attn_total = 0.0;
  double mlp_total = 0.0;
};

RegReport reg_values(const Model& m, const RegConfig& cfg);

// loss = task_loss + sum_l [alpha * r_attn(A_l) + beta * r_mlp(L_l)]; the
// penalty subgradients are accumulated into the corresponding Param grads.
// With alpha = beta = 0 this is a no-op returning task_loss (no zero-adds).
double total_regularized_loss(Model& m, double task_loss, const RegConfig& cfg);

}  // namespace np
