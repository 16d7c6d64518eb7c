#pragma once

#include <Eigen/IterativeLinearSolvers>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include "pampere/error.hpp"

namespace pampere {

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

struct LinearSolveStats {
  int krylov_iterations = 0;
  bool used_direct = false;
};

/// BiCGSTAB with a diagonal preconditioner to relative tolerance `rtol`;
/// falls back to sparse LU when the Krylov iteration breaks down.
inline Eigen::VectorXd solve_sparse(const SparseMatrix& J, const Eigen::VectorXd& rhs, double rtol,
                                    int max_iterations, LinearSolveStats* stats = nullptr) {
  Eigen::BiCGSTAB<SparseMatrix, Eigen::DiagonalPreconditioner<double>> krylov;
  krylov.setTolerance(rtol);
  krylov.setMaxIterations(max_iterations);
  krylov.compute(J);
  Eigen::VectorXd x = krylov.solve(rhs);
  if (krylov.info() == Eigen::Success && x.allFinite()) {
    if (stats) stats->krylov_iterations += static_cast<int>(krylov.iterations());
    return x;
  }
  Eigen::SparseMatrix<double> Jc(J);
  Jc.makeCompressed();
  Eigen::SparseLU<Eigen::SparseMatrix<double>, Eigen::COLAMDOrdering<int>> lu;
  lu.compute(Jc);
  if (lu.info() != Eigen::Success)
    throw Error(ErrorKind::non_convergence, "linearized system is singular");
  x = lu.solve(rhs);
  if (lu.info() != Eigen::Success || !x.allFinite())
    throw Error(ErrorKind::non_convergence, "sparse LU solve failed");
  if (stats) stats->used_direct = true;
  return x;
}

}  // namespace pampere
