#pragma once

// Independent oracles shared by the unit tests and the acceptance binary.
// Nothing here calls the code paths it is used to check.

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include "tokensel/rng.hpp"
#include "tokensel/types.hpp"

namespace testsupport {

using tokensel::LabeledDataset;
using tokensel::Matrix;
using tokensel::ModelState;
using tokensel::Rng;
using tokensel::TokenId;
using tokensel::Vector;

inline Vector gaussian(Rng& rng, Eigen::Index n, double scale) {
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = scale * rng.normal();
  return v;
}

inline ModelState random_state(Rng& rng, std::size_t vocab, std::size_t dim) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  ModelState st;
  st.embeddings.resize(static_cast<Eigen::Index>(vocab), static_cast<Eigen::Index>(dim));
  for (Eigen::Index s = 0; s < st.embeddings.rows(); ++s)
    st.embeddings.row(s) = gaussian(rng, st.embeddings.cols(), scale).transpose();
  st.cls = gaussian(rng, static_cast<Eigen::Index>(dim), scale);
  st.readout = gaussian(rng, static_cast<Eigen::Index>(dim), scale);
  return st;
}

// n sequences of length up to max_len (at least 1) over `vocab` tokens, labels random.
inline LabeledDataset random_dataset(Rng& rng, std::size_t n, std::size_t max_len,
                                     std::size_t vocab, bool fixed_length = false) {
  LabeledDataset d;
  d.vocab.size = vocab;
  for (std::size_t k = 0; k < n; ++k) {
    tokensel::Example ex;
    const std::size_t len = fixed_length ? max_len : 1 + rng.below(max_len);
    for (std::size_t i = 0; i < len; ++i) ex.tokens.push_back(static_cast<TokenId>(rng.below(vocab)));
    ex.label = rng.below(2) ? 1 : -1;
    d.examples.push_back(std::move(ex));
  }
  return d;
}

// Least-norm point of {p : A p = b}; nullopt when the system is inconsistent.
inline std::optional<Vector> least_norm_solve(const Matrix& a, const Vector& b) {
  if (a.rows() == 0) return Vector::Zero(a.cols());
  const Eigen::MatrixXd dense = a;
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(dense);
  Vector p = cod.solve(b);
  if ((dense * p - b).norm() > 1e-9 * (1.0 + b.norm())) return std::nullopt;
  return p;
}

// min |p|^2 s.t. rows p >= 1, ties p = 0 by enumerating every candidate active set.
// The optimum is the least-norm point of its own active set, and every feasible
// candidate has norm at least the optimum, so the smallest feasible candidate wins.
inline std::optional<Vector> brute_force_qp(const Matrix& rows, const Matrix& ties) {
  const auto m = rows.rows();
  const auto d = rows.cols();
  std::optional<Vector> best;
  for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << m); ++mask) {
    const int k = std::popcount(mask);
    Matrix a(k + ties.rows(), d);
    Vector b = Vector::Zero(k + ties.rows());
    int r = 0;
    for (Eigen::Index i = 0; i < m; ++i)
      if (mask >> i & 1) {
        a.row(r) = rows.row(i);
        b[r++] = 1.0;
      }
    for (Eigen::Index j = 0; j < ties.rows(); ++j) a.row(r++) = ties.row(j);
    const auto p = least_norm_solve(a, b);
    if (!p) continue;
    if (((rows * *p).array() < 1.0 - 1e-10).any()) continue;
    if (ties.rows() > 0 && (ties * *p).cwiseAbs().maxCoeff() > 1e-10) continue;
    if (!best || p->norm() < best->norm()) best = *p;
  }
  return best;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// Average ranks, ties sharing the mean rank.
inline std::vector<double> ranks(const std::vector<double>& x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j);
    i = j + 1;
  }
  return r;
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  return pearson(ranks(a), ranks(b));
}

inline double median(std::vector<double> x) {
  std::sort(x.begin(), x.end());
  const auto n = x.size();
  return n % 2 ? x[n / 2] : 0.5 * (x[n / 2 - 1] + x[n / 2]);
}

}  // namespace testsupport
