#pragma once

#include <vector>

#include "x2edit/tensor.hpp"

namespace x2edit {

// Dense primitives with paired forward and analytic vector-Jacobian products.
// Shapes are validated on entry; every public result is finite unless the
// documented error fires first.

// (m,k) x (k,p) -> (m,p)
Tensor matmul(const Tensor& a, const Tensor& b);
// Accumulates nothing: outputs are fresh tensors. da = dout * b^T, db = a^T * dout.
void matmul_vjp(const Tensor& a, const Tensor& b, const Tensor& dout,
                Tensor* da, Tensor* db);

// Softmax along `axis` (negative axes count from the back), computed with
// max-subtraction.
Tensor softmax(const Tensor& x, int axis = -1);
// dx from y = softmax(x) and dy: dx = y * (dy - sum(dy * y)) along the axis.
Tensor softmax_vjp(const Tensor& y, const Tensor& dy, int axis = -1);

inline constexpr double kL2NormalizeEps = 1e-12;

struct L2NormalizeCache {
    Tensor z;                    // normalized rows
    std::vector<Scalar> norms;   // per-row Euclidean norms of the input
};

// Row-wise L2 normalization of a rank-2 tensor. Rows with norm < eps raise
// DegenerateInputError.
Tensor l2_normalize(const Tensor& x, L2NormalizeCache* cache = nullptr);
Tensor l2_normalize_vjp(const L2NormalizeCache& cache, const Tensor& dz);

struct AttentionCache {
    Tensor q, k, v;      // (b,H,n,dh)
    Tensor weights;      // (b,H,n,n) softmax rows
};

// Full-sequence (non-causal) scaled dot-product attention per head:
// softmax(q k^T / sqrt(dh)) v for q,k,v of shape (b,H,n,dh).
Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v,
                      AttentionCache* cache = nullptr);
void attention_core_vjp(const AttentionCache& cache, const Tensor& dout,
                        Tensor* dq, Tensor* dk, Tensor* dv);

// Gather / scatter of full rows of a (rows, cols) matrix view; used by the
// sparse expert evaluation path.
Tensor gather_rows(const Tensor& x, Index cols, const std::vector<Index>& rows);
void scatter_add_rows(Tensor& dst, Index cols, const std::vector<Index>& rows,
                      const Tensor& src);

}  // namespace x2edit
