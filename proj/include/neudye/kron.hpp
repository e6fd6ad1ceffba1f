#pragma once

#include "neudye/common.hpp"

#include <span>
#include <vector>

namespace neudye {

/// Schur complement of an admittance matrix onto the retained node set:
///   Y_rr - Y_re * Y_ee^{-1} * Y_er
/// The retained ordering of the result follows `retained`. Throws
/// `ErrorKind::DegenerateNetwork` when the eliminated block is singular.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> kron_reduce(
    const Eigen::MatrixBase<Derived>& Y, std::span<const Index> retained) {
  using Scalar = typename Derived::Scalar;
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  const Index n = Y.rows();
  if (Y.cols() != n) throw Error(ErrorKind::Structural, "kron_reduce: matrix is not square");

  std::vector<char> keep(static_cast<std::size_t>(n), 0);
  for (Index r : retained) {
    if (r < 0 || r >= n) throw Error(ErrorKind::Structural, "kron_reduce: retained index out of range");
    if (keep[r]) throw Error(ErrorKind::Structural, "kron_reduce: duplicate retained index");
    keep[r] = 1;
  }
  std::vector<Index> eliminated;
  for (Index i = 0; i < n; ++i)
    if (!keep[i]) eliminated.push_back(i);

  const Index nr = static_cast<Index>(retained.size());
  const Index ne = static_cast<Index>(eliminated.size());

  Mat Yrr(nr, nr), Yre(nr, ne), Yer(ne, nr), Yee(ne, ne);
  for (Index i = 0; i < nr; ++i) {
    for (Index j = 0; j < nr; ++j) Yrr(i, j) = Y(retained[i], retained[j]);
    for (Index j = 0; j < ne; ++j) Yre(i, j) = Y(retained[i], eliminated[j]);
  }
  for (Index i = 0; i < ne; ++i) {
    for (Index j = 0; j < nr; ++j) Yer(i, j) = Y(eliminated[i], retained[j]);
    for (Index j = 0; j < ne; ++j) Yee(i, j) = Y(eliminated[i], eliminated[j]);
  }
  if (ne == 0) return Yrr;

  Eigen::FullPivLU<Mat> lu(Yee);
  if (!lu.isInvertible())
    throw Error(ErrorKind::DegenerateNetwork, "kron_reduce: eliminated block is singular");
  return Yrr - Yre * lu.solve(Yer);
}

template <typename Derived>
auto kron_reduce(const Eigen::MatrixBase<Derived>& Y, const std::vector<Index>& retained) {
  return kron_reduce(Y, std::span<const Index>(retained.data(), retained.size()));
}

}  // namespace neudye
