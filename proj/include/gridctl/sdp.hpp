#pragma once

// Operator-splitting conic solver for problems
//
//   minimize    c'x
//   subject to  Ax + s = b,   s in K = {0}^z  x  R+^l  x  PSD(k1) x ... x PSD(kp)
//
// via Douglas-Rachford splitting on the homogeneous self-dual embedding
// (the SCS family of algorithms). PSD blocks are handled in scaled svec
// coordinates so the cone is self-dual under the Euclidean inner product.
// Rows belonging to one PSD block share a single equilibration scale, which
// keeps the cone invariant under the preconditioning.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>
#include <cstdio>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <Eigen/Sparse>

namespace gridctl::sdp {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using SpMat = Eigen::SparseMatrix<double>;

struct ConeSpec {
  int zero = 0;
  int nonneg = 0;
  std::vector<int> psd;  // matrix orders

  int rows() const {
    int r = zero + nonneg;
    for (int k : psd) r += k * (k + 1) / 2;
    return r;
  }
};

struct Settings {
  int max_iters = 200000;
  int check_every = 250;
  double eps = 1e-9;            // primal/dual residual and gap target
  double eps_inaccurate = 1e-5; // acceptance threshold for "inaccurate"
  double alpha = 1.5;           // over-relaxation (ignored when acceleration is on)
  int ruiz_iters = 15;
  int aa_memory = 10;           // Anderson acceleration history (0 disables)
  bool verbose = false;
};

enum class Status { Optimal, Inaccurate, PrimalInfeasible, DualInfeasible, MaxIters };

inline const char* status_name(Status s) {
  switch (s) {
    case Status::Optimal: return "optimal";
    case Status::Inaccurate: return "inaccurate";
    case Status::PrimalInfeasible: return "primal-infeasible";
    case Status::DualInfeasible: return "dual-infeasible";
    case Status::MaxIters: return "max-iters";
  }
  return "?";
}

struct Solution {
  Status status = Status::MaxIters;
  VectorXd x, y, s;
  double primal_obj = 0.0, dual_obj = 0.0;
  double res_primal = 0.0, res_dual = 0.0, res_gap = 0.0;
  int iterations = 0;
  bool ok() const { return status == Status::Optimal || status == Status::Inaccurate; }
};

namespace detail {

inline int svec_len(int n) { return n * (n + 1) / 2; }

/// svec with sqrt(2) off-diagonal scaling, column-major lower triangle.
inline void svec(const MatrixXd& S, double* out) {
  const int n = static_cast<int>(S.rows());
  const double w = std::numbers::sqrt2 * 0.5;
  int k = 0;
  for (int j = 0; j < n; ++j) {
    out[k++] = S(j, j);
    for (int i = j + 1; i < n; ++i) out[k++] = w * (S(i, j) + S(j, i));
  }
}

inline void unsvec(const double* in, int n, MatrixXd& S) {
  const double inv_r2 = 1.0 / std::numbers::sqrt2;
  S.resize(n, n);
  int k = 0;
  for (int j = 0; j < n; ++j) {
    S(j, j) = in[k++];
    for (int i = j + 1; i < n; ++i) {
      const double v = in[k++] * inv_r2;
      S(i, j) = v;
      S(j, i) = v;
    }
  }
}

/// Euclidean projection onto the PSD cone in svec coordinates.
inline void project_psd(double* block, int n, MatrixXd& scratch) {
  unsvec(block, n, scratch);
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(scratch);
  const VectorXd& ev = es.eigenvalues();
  if (ev(0) >= 0.0) return;
  if (ev(n - 1) <= 0.0) {
    std::fill(block, block + svec_len(n), 0.0);
    return;
  }
  MatrixXd out = MatrixXd::Zero(n, n);
  for (int k = 0; k < n; ++k)
    if (ev(k) > 0.0)
      out.noalias() +=
          ev(k) * es.eigenvectors().col(k) * es.eigenvectors().col(k).transpose();
  svec(out, block);
}

}  // namespace detail

class Problem {
 public:
  SpMat A;
  VectorXd b, c;
  ConeSpec cones;

  Solution solve(const Settings& st = {}) const {
    const int n = static_cast<int>(A.cols());
    const int m = static_cast<int>(A.rows());
    if (cones.rows() != m) throw std::invalid_argument("sdp: cone rows != matrix rows");

    // ---- cone-aware Ruiz equilibration -------------------------------
    VectorXd d = VectorXd::Ones(m), e = VectorXd::Ones(n);
    SpMat As = A;
    {
      std::vector<int> row_group(m, -1);
      {
        int r = cones.zero + cones.nonneg;
        int blk = 0;
        for (int k : cones.psd) {
          for (int i = 0; i < detail::svec_len(k); ++i) row_group[r++] = blk;
          ++blk;
        }
      }
      for (int pass = 0; pass < st.ruiz_iters; ++pass) {
        VectorXd rmax = VectorXd::Zero(m), cmax = VectorXd::Zero(n);
        for (int j = 0; j < As.outerSize(); ++j)
          for (SpMat::InnerIterator it(As, j); it; ++it) {
            const double a = std::abs(it.value());
            rmax(it.row()) = std::max(rmax(it.row()), a);
            cmax(j) = std::max(cmax(j), a);
          }
        std::vector<double> bmax(cones.psd.size(), 0.0);
        for (int r = 0; r < m; ++r)
          if (row_group[r] >= 0) bmax[row_group[r]] = std::max(bmax[row_group[r]], rmax(r));
        for (int r = 0; r < m; ++r)
          if (row_group[r] >= 0) rmax(r) = bmax[row_group[r]];
        VectorXd dr(m), dc(n);
        for (int r = 0; r < m; ++r) dr(r) = rmax(r) > 0 ? 1.0 / std::sqrt(rmax(r)) : 1.0;
        for (int j = 0; j < n; ++j) dc(j) = cmax(j) > 0 ? 1.0 / std::sqrt(cmax(j)) : 1.0;
        As = dr.asDiagonal() * As * dc.asDiagonal();
        d = d.cwiseProduct(dr);
        e = e.cwiseProduct(dc);
      }
    }
    VectorXd bs = d.cwiseProduct(b);
    VectorXd cs = e.cwiseProduct(c);
    const double b_scale = std::max(bs.norm(), 1e-10);
    const double c_scale = std::max(cs.norm(), 1e-10);
    bs /= b_scale;
    cs /= c_scale;

    // ---- cached factorization of I + A'A ------------------------------
    MatrixXd gram = MatrixXd(SpMat(As.transpose() * As));
    gram.diagonal().array() += 1.0;
    Eigen::LLT<MatrixXd> llt(gram);
    if (llt.info() != Eigen::Success)
      throw std::runtime_error("sdp: factorization of I + A'A failed");
    const SpMat AsT = As.transpose();

    auto solve_P = [&](const VectorXd& r1, const VectorXd& r2, VectorXd& p, VectorXd& q) {
      p = llt.solve(r1 - AsT * r2);
      q = r2 + As * p;
    };
    VectorXd gx, gy;
    solve_P(cs, bs, gx, gy);
    const double denom = 1.0 + cs.dot(gx) + bs.dot(gy);
    if (!(denom > 1e-14)) throw std::runtime_error("sdp: degenerate embedding");

    auto project_dual_cone = [&](VectorXd& y) {
      for (int i = cones.zero; i < cones.zero + cones.nonneg; ++i) y(i) = std::max(0.0, y(i));
      int r = cones.zero + cones.nonneg;
      MatrixXd scratch;
      for (int k : cones.psd) {
        detail::project_psd(y.data() + r, k, scratch);
        r += detail::svec_len(k);
      }
    };

    // ---- Douglas-Rachford on the embedding ----------------------------
    // state W = (ux, uy, ut, vy, vt); one DR pass maps W -> W'
    const int wdim = n + 2 * m + 2;
    VectorXd W = VectorXd::Zero(wdim);
    W(n + m) = 1.0;      // ut
    W(wdim - 1) = 1.0;   // vt

    auto dr_pass = [&](const VectorXd& Win) {
      VectorXd ux = Win.head(n);
      VectorXd uy = Win.segment(n, m);
      double ut = Win(n + m);
      VectorXd vy = Win.segment(n + m + 1, m);
      double vt = Win(wdim - 1);
      VectorXd px, py;
      solve_P(ux, uy + vy, px, py);
      const double tt = (ut + vt + cs.dot(px) + bs.dot(py)) / denom;
      const VectorXd tx = px - tt * gx;
      const VectorXd ty = py - tt * gy;
      const double a = st.aa_memory > 0 ? 1.0 : st.alpha;
      const VectorXd rx = a * tx + (1 - a) * ux;
      const VectorXd ry = a * ty + (1 - a) * uy;
      const double rt = a * tt + (1 - a) * ut;
      ux = rx;  // free block, v_x stays zero
      uy = ry - vy;
      project_dual_cone(uy);
      ut = std::max(0.0, rt - vt);
      vy += uy - ry;
      vt += ut - rt;
      VectorXd Wout(wdim);
      Wout << ux, uy, ut, vy, vt;
      return Wout;
    };

    Solution sol;
    VectorXd best_x, best_y, best_s;
    double best_err = std::numeric_limits<double>::infinity();
    const double bn = bs.norm(), cn = cs.norm();

    // Anderson acceleration (type II) history on the DR map
    const int M = st.aa_memory;
    std::vector<VectorXd> hist_dw, hist_dg;
    VectorXd prev_W, prev_g;
    int aa_reject = 0;

    int it = 0;
    for (; it < st.max_iters; ++it) {
      const VectorXd Wn = dr_pass(W);
      const VectorXd g = Wn - W;
      if (M > 0) {
        if (prev_W.size() > 0) {
          hist_dw.push_back(W - prev_W);
          hist_dg.push_back(g - prev_g);
          if (static_cast<int>(hist_dw.size()) > M) {
            hist_dw.erase(hist_dw.begin());
            hist_dg.erase(hist_dg.begin());
          }
        }
        prev_W = W;
        prev_g = g;
        const int h = static_cast<int>(hist_dw.size());
        bool accepted = false;
        if (h >= 1) {
          MatrixXd F(wdim, h), Xh(wdim, h);
          for (int k = 0; k < h; ++k) {
            F.col(k) = hist_dg[k];
            Xh.col(k) = hist_dw[k];
          }
          MatrixXd FtF = F.transpose() * F;
          FtF.diagonal().array() += 1e-12 * std::max(1.0, FtF.trace());
          const VectorXd gamma = FtF.ldlt().solve(F.transpose() * g);
          const VectorXd Waa = W + g - (Xh + F) * gamma;
          const VectorXd Waa_n = dr_pass(Waa);
          const VectorXd gaa = Waa_n - Waa;
          if (gaa.norm() < g.norm()) {
            hist_dw.push_back(Waa - prev_W);
            hist_dg.push_back(gaa - prev_g);
            if (static_cast<int>(hist_dw.size()) > M) {
              hist_dw.erase(hist_dw.begin());
              hist_dg.erase(hist_dg.begin());
            }
            prev_W = Waa;
            prev_g = gaa;
            W = Waa_n;
            accepted = true;
            aa_reject = 0;
          } else {
            ++aa_reject;
            if (aa_reject > 20) {
              hist_dw.clear();
              hist_dg.clear();
              prev_W.resize(0);
              aa_reject = 0;
            }
          }
        }
        if (!accepted) W = Wn;
      } else {
        W = Wn;
      }

      if ((it + 1) % st.check_every != 0 && it + 1 != st.max_iters) continue;
      const VectorXd ux = W.head(n);
      const VectorXd uy = W.segment(n, m);
      const double ut = W(n + m);
      const VectorXd vy = W.segment(n + m + 1, m);

      if (ut > 1e-9) {
        const VectorXd x = ux / ut;
        const VectorXd y = uy / ut;
        const VectorXd s = vy / ut;
        const double rp = (As * x + s - bs).norm() / (1.0 + bn);
        const double rd = (AsT * y + cs).norm() / (1.0 + cn);
        const double pobj = cs.dot(x), dobj = -bs.dot(y);
        const double rg = std::abs(pobj - dobj) / (1.0 + std::abs(pobj) + std::abs(dobj));
        const double err = std::max({rp, rd, rg});
        if (err < best_err) {
          best_err = err;
          best_x = x;
          best_y = y;
          best_s = s;
          sol.res_primal = rp;
          sol.res_dual = rd;
          sol.res_gap = rg;
        }
        if (st.verbose && (it + 1) % 2000 == 0)
          std::printf("  it=%d rp=%.3e rd=%.3e gap=%.3e tau=%.3e\n", it + 1, rp, rd, rg, ut);
        if (err <= st.eps) {
          sol.status = Status::Optimal;
          ++it;
          break;
        }
      } else if (it > 2000) {
        // tau collapsed: look for an infeasibility certificate
        const double bty = bs.dot(uy);
        if (bty < 0 && (AsT * uy).norm() <= 1e-9 * (-bty)) {
          sol.status = Status::PrimalInfeasible;
          sol.iterations = it + 1;
          sol.y = d.cwiseProduct(uy / (-bty));
          return sol;
        }
        const double ctx = cs.dot(ux);
        if (ctx < 0 && (As * ux + vy).norm() <= 1e-9 * (-ctx)) {
          sol.status = Status::DualInfeasible;
          sol.iterations = it + 1;
          sol.x = e.cwiseProduct(ux / (-ctx));
          return sol;
        }
      }
    }
    sol.iterations = it;

    if (best_x.size() == 0) {
      sol.status = Status::PrimalInfeasible;
      return sol;
    }
    if (sol.status != Status::Optimal)
      sol.status = best_err <= st.eps_inaccurate ? Status::Inaccurate : Status::MaxIters;

    sol.x = e.cwiseProduct(best_x) * b_scale;
    sol.y = d.cwiseProduct(best_y) * c_scale;
    sol.s = best_s.cwiseQuotient(d) * b_scale;
    sol.primal_obj = c.dot(sol.x);
    sol.dual_obj = -b.dot(sol.y);
    return sol;
  }
};

// ------------------------------------------------------------------------
// LMI modeling layer: matrix variables and symmetric constraint blocks.
// ------------------------------------------------------------------------

/// Handle to a matrix variable (symmetric n x n, rectangular p x q, scalar).
struct VarHandle {
  int id = -1;
  int rows = 0, cols = 0;
  bool symmetric = false;
  int offset = 0;  // first scalar index
  int count = 0;
};

/// Builds conic data from affine symmetric matrix expressions. Each PSD
/// block states expr(x) >= 0 (Loewner); each LP row states expr(x) >= 0.
class LmiBuilder {
 public:
  VarHandle add_sym(int nn) {
    VarHandle v{next_id_++, nn, nn, true, n_vars_, detail::svec_len(nn)};
    n_vars_ += v.count;
    return v;
  }
  VarHandle add_rect(int p, int q) {
    VarHandle v{next_id_++, p, q, false, n_vars_, p * q};
    n_vars_ += v.count;
    return v;
  }
  VarHandle add_scalar() { return add_rect(1, 1); }

  /// Scalar index of entry (i,j); symmetric variables are packed with
  /// sqrt(2)-scaled off-diagonals, hence the weight.
  static std::pair<int, double> entry_index(const VarHandle& v, int i, int j) {
    if (!v.symmetric) return {v.offset + j * v.rows + i, 1.0};
    const int lo = std::min(i, j), hi = std::max(i, j);
    int idx = 0;
    for (int col = 0; col < lo; ++col) idx += v.rows - col;
    idx += hi - lo;
    return {v.offset + idx, i == j ? 1.0 : 1.0 / std::numbers::sqrt2};
  }

  int add_psd_block(int size) {
    blocks_.push_back(Block{size, MatrixXd::Zero(size, size), {}});
    return static_cast<int>(blocks_.size()) - 1;
  }

  int add_nonneg_row() {
    lp_rows_.push_back(LpRow{0.0, {}});
    return static_cast<int>(lp_rows_.size()) - 1;
  }
  void lp_const(int row, double v) { lp_rows_[row].c0 += v; }
  void lp_coeff(int row, const VarHandle& var, int i, int j, double coeff) {
    auto [idx, w] = entry_index(var, i, j);
    lp_rows_[row].terms.push_back({idx, coeff * w});
  }

  void block_const(int blk, int r0, int c0, const MatrixXd& C) {
    blocks_[blk].C0.block(r0, c0, C.rows(), C.cols()) += C;
  }

  /// Adds coeff * L * X * R (X optionally transposed) into the block at
  /// offset (r0, c0). Zero entries of L and R are skipped.
  void block_term(int blk, int r0, int c0, const MatrixXd& L, const VarHandle& var,
                  const MatrixXd& R, bool transpose_var, double coeff) {
    const int xr = transpose_var ? var.cols : var.rows;
    const int xc = transpose_var ? var.rows : var.cols;
    if (L.cols() != xr || R.rows() != xc)
      throw std::invalid_argument("block_term: inner dimensions do not match");
    Block& B = blocks_[blk];
    for (int i = 0; i < L.rows(); ++i)
      for (int k = 0; k < xr; ++k) {
        const double lv = L(i, k);
        if (lv == 0.0) continue;
        for (int l = 0; l < xc; ++l) {
          const int vi = transpose_var ? l : k;
          const int vj = transpose_var ? k : l;
          for (int j = 0; j < R.cols(); ++j) {
            const double rv = R(l, j);
            if (rv == 0.0) continue;
            auto [idx, w] = entry_index(var, vi, vj);
            B.terms.push_back({r0 + i, c0 + j, idx, coeff * lv * rv * w});
          }
        }
      }
  }

  /// coeff * X (or X') placed at the offset.
  void block_var(int blk, int r0, int c0, const VarHandle& var, bool transpose_var,
                 double coeff) {
    const int p = transpose_var ? var.cols : var.rows;
    const int q = transpose_var ? var.rows : var.cols;
    block_term(blk, r0, c0, MatrixXd::Identity(p, p), var, MatrixXd::Identity(q, q),
               transpose_var, coeff);
  }

  void objective(const VarHandle& var, int i, int j, double coeff) {
    auto [idx, w] = entry_index(var, i, j);
    obj_.push_back({idx, coeff * w});
  }

  /// Assembles the conic problem; rows ordered [nonneg; psd blocks].
  Problem build() const {
    Problem P;
    P.cones.zero = 0;
    P.cones.nonneg = static_cast<int>(lp_rows_.size());
    int m = P.cones.nonneg;
    for (const Block& B : blocks_) {
      P.cones.psd.push_back(B.size);
      m += detail::svec_len(B.size);
    }
    P.b = VectorXd::Zero(m);
    P.c = VectorXd::Zero(n_vars_);
    for (const auto& [idx, coeff] : obj_) P.c(idx) += coeff;

    std::vector<Eigen::Triplet<double>> trip;
    int r = 0;
    // expr >= 0  <=>  -expr + s = 0 with s in cone; so A row = -coeffs, b = const
    for (const LpRow& row : lp_rows_) {
      P.b(r) = row.c0;
      for (const auto& [idx, coeff] : row.terms) trip.emplace_back(r, idx, -coeff);
      ++r;
    }
    const double r2h = std::numbers::sqrt2 * 0.5;
    for (const Block& B : blocks_) {
      auto svec_row = [&](int i, int j) {
        const int lo = std::min(i, j), hi = std::max(i, j);
        int idx = 0;
        for (int col = 0; col < lo; ++col) idx += B.size - col;
        return r + idx + (hi - lo);
      };
      for (int j = 0; j < B.size; ++j) {
        P.b(svec_row(j, j)) = B.C0(j, j);
        for (int i = j + 1; i < B.size; ++i)
          P.b(svec_row(i, j)) = r2h * (B.C0(i, j) + B.C0(j, i));
      }
      for (const Term& t : B.terms) {
        const double w = t.i == t.j ? 1.0 : r2h;
        trip.emplace_back(svec_row(t.i, t.j), t.var_idx, -w * t.coeff);
      }
      r += detail::svec_len(B.size);
    }
    P.A.resize(m, n_vars_);
    P.A.setFromTriplets(trip.begin(), trip.end());
    return P;
  }

  static MatrixXd value(const VarHandle& v, const VectorXd& x) {
    MatrixXd M(v.rows, v.cols);
    if (!v.symmetric) {
      for (int j = 0; j < v.cols; ++j)
        for (int i = 0; i < v.rows; ++i) M(i, j) = x(v.offset + j * v.rows + i);
      return M;
    }
    int idx = v.offset;
    const double inv_r2 = 1.0 / std::numbers::sqrt2;
    for (int j = 0; j < v.cols; ++j) {
      M(j, j) = x(idx++);
      for (int i = j + 1; i < v.rows; ++i) {
        const double val = x(idx++) * inv_r2;
        M(i, j) = val;
        M(j, i) = val;
      }
    }
    return M;
  }

  int n_vars() const { return n_vars_; }

 private:
  struct Term {
    int i, j, var_idx;
    double coeff;
  };
  struct Block {
    int size;
    MatrixXd C0;
    std::vector<Term> terms;
  };
  struct LpRow {
    double c0;
    std::vector<std::pair<int, double>> terms;
  };
  int next_id_ = 0;
  int n_vars_ = 0;
  std::vector<Block> blocks_;
  std::vector<LpRow> lp_rows_;
  std::vector<std::pair<int, double>> obj_;
};

}  // namespace gridctl::sdp
