#include "np/regularizers.hpp"

#include <cmath>

namespace np {

void RegConfig::validate() const {
  require(alpha >= 0.f, "reg.alpha: must be >= 0");
  require(beta >= 0.f, "reg.beta: must be >= 0");
  require(eps_count > 0.f, "reg.eps_count: must be > 0");
  require(group_floor > 0.f, "reg.group_floor: must be > 0");
  require(count_offset >= 0, "reg.count_offset: must be >= 0");
}

std::vector<i64> count_near_zero(const Tensor& m, float eps) {
  require(eps > 0.f, "count_near_zero: eps must be > 0");
  require(m.rank() == 2, "count_near_zero: want rank-2, got " + shape_str(m.shape));
  std::vector<i64> n(static_cast<size_t>(m.rows()), 0);
  for (i64 i = 0; i < m.rows(); ++i)
    for (i64 j = 0; j < m.cols(); ++j)
      if (std::fabs(m.at(i, j)) < eps) ++n[static_cast<size_t>(i)];
  return n;
}

namespace {

void check_mlp_shapes(const Tensor& l_in, const Tensor& l_out) {
  require(l_in.rank() == 2 && l_out.rank() == 2 && l_out.rows() == l_in.cols() &&
              l_out.cols() == l_in.rows(),
          "r_mlp: shape mismatch L_in " + shape_str(l_in.shape) + " vs L_out " +
              shape_str(l_out.shape));
}

double weighted_abs_rows(const Tensor& m, const std::vector<i64>& n, i64 row_len) {
  double total = 0.0;
  for (i64 i = 0; i < m.rows(); ++i) {
    double row = 0.0;
    for (i64 j = 0; j < m.cols(); ++j) row += std::fabs(static_cast<double>(m.at(i, j)));
    total += static_cast<double>(n[static_cast<size_t>(i)]) * row;
  }
  return total / static_cast<double>(row_len);
}

inline float sign_of(float x) { return x > 0.f ? 1.f : (x < 0.f ? -1.f : 0.f); }

}  // namespace

double r_mlp(const Tensor& l_in, const Tensor& l_out, float eps, i64 count_offset) {
  check_mlp_shapes(l_in, l_out);
  std::vector<i64> n_in = count_near_zero(l_in, eps);
  std::vector<i64> n_out = count_near_zero(l_out, eps);
  for (i64& v : n_in) v += count_offset;
  for (i64& v : n_out) v += count_offset;
  return weighted_abs_rows(l_in, n_in, l_in.cols()) +
         weighted_abs_rows(l_out, n_out, l_out.cols());
}

void r_mlp_grad(const Tensor& l_in, const Tensor& l_out, float eps, i64 count_offset,
                Tensor& g_in, Tensor& g_out) {
  check_mlp_shapes(l_in, l_out);
  g_in = Tensor::zeros(l_in.shape);
  g_out = Tensor::zeros(l_out.shape);
  const std::vector<i64> n_in = count_near_zero(l_in, eps);
  const std::vector<i64> n_out = count_near_zero(l_out, eps);
  const float inv_d = 1.f / static_cast<float>(l_in.cols());
  const float inv_de = 1.f / static_cast<float>(l_out.cols());
  for (i64 i = 0; i < l_in.rows(); ++i) {
    const float w = inv_d * static_cast<float>(n_in[static_cast<size_t>(i)] + count_offset);
    for (i64 j = 0; j < l_in.cols(); ++j) g_in.at(i, j) = w * sign_of(l_in.at(i, j));
  }
  for (i64 i = 0; i < l_out.rows(); ++i) {
    const float w = inv_de * static_cast<float>(n_out[static_cast<size_t>(i)] + count_offset);
    for (i64 j = 0; j < l_out.cols(); ++j) g_out.at(i, j) = w * sign_of(l_out.at(i, j));
  }
}

double r_attn(const Tensor& a) {
  require(a.rank() == 2, "r_attn: want rank-2, got " + shape_str(a.shape));
  double total = 0.0;
  for (i64 i = 0; i < a.rows(); ++i) {
    double g = 0.0;
    for (i64 j = 0; j < a.cols(); ++j) g += std::fabs(static_cast<double>(a.at(i, j)));
    total += std::sqrt(g);
  }
  return total;
}

void r_attn_grad(const Tensor& a, float delta, Tensor& g) {
  require(a.rank() == 2, "r_attn_grad: want rank-2, got " + shape_str(a.shape));
  require(delta > 0.f, "r_attn_grad: delta must be > 0");
  g = Tensor::zeros(a.shape);
  for (i64 i = 0; i < a.rows(); ++i) {
    double gi = 0.0;
    for (i64 j = 0; j < a.cols(); ++j) gi += std::fabs(static_cast<double>(a.at(i, j)));
    if (gi < static_cast<double>(delta)) continue;  // subgradient 0 at the singularity
    const float scale = 1.f / (2.f * std::sqrt(static_cast<float>(
                                  std::max(gi, static_cast<double>(delta)))));
    for (i64 j = 0; j < a.cols(); ++j) g.at(i, j) = scale * sign_of(a.at(i, j));
  }
}

double r_mlp_with_counts(const double* lin, i64 lin_rows, i64 lin_cols, const double* lout,
                         i64 lout_rows, i64 lout_cols, const std::vector<i64>& n_in,
                         const std::vector<i64>& n_out) {
  double total = 0.0;
  for (i64 i = 0; i < lin_rows; ++i) {
    double row = 0.0;
    for (i64 j = 0; j < lin_cols; ++j) row += std::fabs(lin[i * lin_cols + j]);
    total += static_cast<double>(n_in[static_cast<size_t>(i)]) * row / double(lin_cols);
  }
  for (i64 i = 0; i < lout_rows; ++i) {
    double row = 0.0;
    for (i64 j = 0; j < lout_cols; ++j) row += std::fabs(lout[i * lout_cols + j]);
    total += static_cast<double>(n_out[static_cast<size_t>(i)]) * row / double(lout_cols);
  }
  return total;
}

double r_attn_of(const double* a, i64 rows, i64 cols) {
  double total = 0.0;
  for (i64 i = 0; i < rows; ++i) {
    double g = 0.0;
    for (i64 j = 0; j < cols; ++j) g += std::fabs(a[i * cols + j]);
    total += std::sqrt(g);
  }
  return total;
}

RegReport reg_values(const Model& m, const RegConfig& cfg) {
  cfg.validate();
  RegReport rep;
  for (const Block& b : m.blocks) {
    const double ra = r_attn(b.attn.a.value);
    const double rm = r_mlp(b.mlp.l_in.value, b.mlp.l_out.value, cfg.eps_count, cfg.count_offset);
    rep.attn_per_layer.push_back(ra);
    rep.mlp_per_layer.push_back(rm);
    rep.attn_total += ra;
    rep.mlp_total += rm;
  }
  return rep;
}

double total_regularized_loss(Model& m, double task_loss, const RegConfig& cfg) {
  cfg.validate();
  if (cfg.alpha == 0.f && cfg.beta == 0.f) return task_loss;
  double penalty = 0.0;
  Tensor g, g2;
  for (Block& b : m.blocks) {
    if (cfg.alpha > 0.f) {
      penalty += cfg.alpha * r_attn(b.attn.a.value);
      r_attn_grad(b.attn.a.value, cfg.group_floor, g);
      float* dst = b.attn.a.grad.data.data();
      for (size_t i = 0; i < g.data.size(); ++i) dst[i] += cfg.alpha * g.data[i];
    }
    if (cfg.beta > 0.f) {
      penalty += cfg.beta * r_mlp(b.mlp.l_in.value, b.mlp.l_out.value, cfg.eps_count,
                                  cfg.count_offset);
      r_mlp_grad(b.mlp.l_in.value, b.mlp.l_out.value, cfg.eps_count, cfg.count_offset, g, g2);
      float* din = b.mlp.l_in.grad.data.data();
      for (size_t i = 0; i < g.data.size(); ++i) din[i] += cfg.beta * g.data[i];
      float* dout = b.mlp.l_out.grad.data.data();
      for (size_t i = 0; i < g2.data.size(); ++i) dout[i] += cfg.beta * g2.data[i];
    }
  }
  return task_loss + penalty;
}

}  // namespace np
