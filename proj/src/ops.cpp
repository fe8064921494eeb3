#include "x2edit/ops.hpp"

#include <cmath>

#include "x2edit/error.hpp"

namespace x2edit {

namespace {

void require_rank2(const Tensor& t, const char* name) {
    if (t.rank() != 2) {
        throw DimensionError(std::string(name) + " must be rank 2");
    }
}

int normalize_axis(const Tensor& x, int axis) {
    const int r = x.rank();
    if (axis < 0) {
        axis += r;
    }
    if (axis < 0 || axis >= r) {
        throw DimensionError("softmax axis out of range");
    }
    return axis;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul lhs");
    require_rank2(b, "matmul rhs");
    if (a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul inner dimensions disagree");
    }
    Tensor out({a.dim(0), b.dim(1)});
    out.mat().noalias() = a.mat() * b.mat();
    return out;
}

void matmul_vjp(const Tensor& a, const Tensor& b, const Tensor& dout,
                Tensor* da, Tensor* db) {
    if (dout.rank() != 2 || dout.dim(0) != a.dim(0) || dout.dim(1) != b.dim(1)) {
        throw DimensionError("matmul_vjp cotangent shape mismatch");
    }
    if (da != nullptr) {
        *da = Tensor(a.shape());
        da->mat().noalias() = dout.mat() * b.mat().transpose();
    }
    if (db != nullptr) {
        *db = Tensor(b.shape());
        db->mat().noalias() = a.mat().transpose() * dout.mat();
    }
}

Tensor softmax(const Tensor& x, int axis) {
    if (!x.all_finite()) {
        throw NumericalError("softmax input must be finite");
    }
    const int ax = normalize_axis(x, axis);
    const auto& shape = x.shape();
    const Index m = shape[static_cast<std::size_t>(ax)];
    Index inner = 1;
    for (int d = ax + 1; d < x.rank(); ++d) {
        inner *= shape[static_cast<std::size_t>(d)];
    }
    Index outer = x.size() / (m * inner);

    Tensor y(x.shape());
    for (Index o = 0; o < outer; ++o) {
        for (Index i = 0; i < inner; ++i) {
            const Index base = o * m * inner + i;
            Scalar max_v = x[base];
            for (Index j = 1; j < m; ++j) {
                max_v = std::max(max_v, x[base + j * inner]);
            }
            Scalar sum = 0.0;
            for (Index j = 0; j < m; ++j) {
                const Scalar e = std::exp(x[base + j * inner] - max_v);
                y[base + j * inner] = e;
                sum += e;
            }
            for (Index j = 0; j < m; ++j) {
                y[base + j * inner] /= sum;
            }
        }
    }
    return y;
}

Tensor softmax_vjp(const Tensor& y, const Tensor& dy, int axis) {
    if (!y.same_shape(dy)) {
        throw DimensionError("softmax_vjp shape mismatch");
    }
    const int ax = normalize_axis(y, axis);
    const auto& shape = y.shape();
    const Index m = shape[static_cast<std::size_t>(ax)];
    Index inner = 1;
    for (int d = ax + 1; d < y.rank(); ++d) {
        inner *= shape[static_cast<std::size_t>(d)];
    }
    Index outer = y.size() / (m * inner);

    Tensor dx(y.shape());
    for (Index o = 0; o < outer; ++o) {
        for (Index i = 0; i < inner; ++i) {
            const Index base = o * m * inner + i;
            Scalar dot = 0.0;
            for (Index j = 0; j < m; ++j) {
                dot += dy[base + j * inner] * y[base + j * inner];
            }
            for (Index j = 0; j < m; ++j) {
                const Index idx = base + j * inner;
                dx[idx] = y[idx] * (dy[idx] - dot);
            }
        }
    }
    return dx;
}

Tensor l2_normalize(const Tensor& x, L2NormalizeCache* cache) {
    require_rank2(x, "l2_normalize input");
    const Index rows = x.dim(0);
    const Index cols = x.dim(1);
    Tensor z(x.shape());
    std::vector<Scalar> norms(static_cast<std::size_t>(rows));
    for (Index i = 0; i < rows; ++i) {
        const Scalar norm = ConstVecMap(x.data() + i * cols, cols).norm();
        if (norm < kL2NormalizeEps) {
            throw DegenerateInputError("l2_normalize row norm below eps");
        }
        norms[static_cast<std::size_t>(i)] = norm;
        VecMap(z.data() + i * cols, cols) =
            ConstVecMap(x.data() + i * cols, cols) / norm;
    }
    if (cache != nullptr) {
        cache->z = z;
        cache->norms = std::move(norms);
    }
    return z;
}

Tensor l2_normalize_vjp(const L2NormalizeCache& cache, const Tensor& dz) {
    const Tensor& z = cache.z;
    if (!z.same_shape(dz)) {
        throw DimensionError("l2_normalize_vjp shape mismatch");
    }
    const Index rows = z.dim(0);
    const Index cols = z.dim(1);
    Tensor dx(z.shape());
    for (Index i = 0; i < rows; ++i) {
        ConstVecMap zi(z.data() + i * cols, cols);
        ConstVecMap gi(dz.data() + i * cols, cols);
        const Scalar dot = zi.dot(gi);
        VecMap(dx.data() + i * cols, cols) =
            (gi - dot * zi) / cache.norms[static_cast<std::size_t>(i)];
    }
    return dx;
}

Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v,
                      AttentionCache* cache) {
    if (q.rank() != 4 || !q.same_shape(k) || !q.same_shape(v)) {
        throw DimensionError("attention_core expects matching (b,H,n,dh) inputs");
    }
    const Index b = q.dim(0);
    const Index heads = q.dim(1);
    const Index n = q.dim(2);
    const Index dh = q.dim(3);
    const Scalar inv_sqrt_dh = 1.0 / std::sqrt(static_cast<Scalar>(dh));

    Tensor out(q.shape());
    Tensor weights({b, heads, n, n});
    for (Index bi = 0; bi < b; ++bi) {
        for (Index h = 0; h < heads; ++h) {
            const Index off = (bi * heads + h) * n * dh;
            ConstMatMap qm(q.data() + off, n, dh);
            ConstMatMap km(k.data() + off, n, dh);
            ConstMatMap vm(v.data() + off, n, dh);
            MatMap wm(weights.data() + (bi * heads + h) * n * n, n, n);
            wm.noalias() = qm * km.transpose() * inv_sqrt_dh;
            // row-wise softmax with max subtraction
            for (Index i = 0; i < n; ++i) {
                auto row = wm.row(i);
                const Scalar mx = row.maxCoeff();
                row = (row.array() - mx).exp();
                row /= row.sum();
            }
            MatMap om(out.data() + off, n, dh);
            om.noalias() = wm * vm;
        }
    }
    if (cache != nullptr) {
        cache->q = q;
        cache->k = k;
        cache->v = v;
        cache->weights = std::move(weights);
    }
    return out;
}

void attention_core_vjp(const AttentionCache& cache, const Tensor& dout,
                        Tensor* dq, Tensor* dk, Tensor* dv) {
    const Tensor& q = cache.q;
    if (!dout.same_shape(q)) {
        throw DimensionError("attention_core_vjp cotangent shape mismatch");
    }
    const Index b = q.dim(0);
    const Index heads = q.dim(1);
    const Index n = q.dim(2);
    const Index dh = q.dim(3);
    const Scalar inv_sqrt_dh = 1.0 / std::sqrt(static_cast<Scalar>(dh));

    *dq = Tensor(q.shape());
    *dk = Tensor(q.shape());
    *dv = Tensor(q.shape());
    for (Index bi = 0; bi < b; ++bi) {
        for (Index h = 0; h < heads; ++h) {
            const Index off = (bi * heads + h) * n * dh;
            ConstMatMap qm(q.data() + off, n, dh);
            ConstMatMap km(cache.k.data() + off, n, dh);
            ConstMatMap vm(cache.v.data() + off, n, dh);
            ConstMatMap wm(cache.weights.data() + (bi * heads + h) * n * n, n, n);
            ConstMatMap dom(dout.data() + off, n, dh);

            // out = W v
            MatrixRM dW = dom * vm.transpose();
            MatMap(dv->data() + off, n, dh).noalias() = wm.transpose() * dom;

            // softmax rows: dS = W * (dW - rowsum(dW * W))
            MatrixRM dS(n, n);
            for (Index i = 0; i < n; ++i) {
                const Scalar dot = dW.row(i).cwiseProduct(wm.row(i)).sum();
                dS.row(i) = wm.row(i).array() * (dW.row(i).array() - dot);
            }
            dS *= inv_sqrt_dh;
            MatMap(dq->data() + off, n, dh).noalias() = dS * km;
            MatMap(dk->data() + off, n, dh).noalias() = dS.transpose() * qm;
        }
    }
}

Tensor gather_rows(const Tensor& x, Index cols, const std::vector<Index>& rows) {
    Tensor out({std::max<Index>(Index(1), static_cast<Index>(rows.size())), cols});
    for (std::size_t r = 0; r < rows.size(); ++r) {
        VecMap(out.data() + static_cast<Index>(r) * cols, cols) =
            ConstVecMap(x.data() + rows[r] * cols, cols);
    }
    return out;
}

void scatter_add_rows(Tensor& dst, Index cols, const std::vector<Index>& rows,
                      const Tensor& src) {
    for (std::size_t r = 0; r < rows.size(); ++r) {
        VecMap(dst.data() + rows[r] * cols, cols) +=
            ConstVecMap(src.data() + static_cast<Index>(r) * cols, cols);
    }
}

}  // namespace x2edit
