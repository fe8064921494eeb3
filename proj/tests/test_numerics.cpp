#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>
#include <vector>

#include "x2edit/error.hpp"
#include "x2edit/grad_check.hpp"
#include "x2edit/ops.hpp"
#include "x2edit/rng.hpp"
#include "x2edit/tensor.hpp"

using namespace x2edit;

namespace {

Tensor random_tensor(std::vector<Index> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i) {
        t[i] = rng.uniform(lo, hi);
    }
    return t;
}

// independent triple-loop reference for matmul
Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
    const Index m = a.dim(0), k = a.dim(1), p = b.dim(1);
    Tensor out({m, p});
    for (Index i = 0; i < m; ++i) {
        for (Index j = 0; j < p; ++j) {
            double acc = 0.0;
            for (Index t = 0; t < k; ++t) {
                acc += a.at(i, t) * b.at(t, j);
            }
            out.at(i, j) = acc;
        }
    }
    return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.same_shape(b));
    double m = 0.0;
    for (Index i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

// scalar probe <r, op(x)> for vjp checking
double dot_all(const Tensor& a, const Tensor& b) {
    double acc = 0.0;
    for (Index i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

}  // namespace

TEST_CASE("matmul matches identity, annihilator and triple-loop oracle") {
    Rng rng(42);
    Tensor m = random_tensor({3, 3}, rng);
    Tensor eye({3, 3});
    for (Index i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
    CHECK(max_abs_diff(matmul(eye, m), m) == 0.0);

    Tensor zeros({3, 4});
    Tensor mz = matmul(m, zeros);
    for (Index i = 0; i < mz.size(); ++i) CHECK(mz[i] == 0.0);

    Tensor a = random_tensor({4, 5}, rng);
    Tensor b = random_tensor({5, 3}, rng);
    CHECK(max_abs_diff(matmul(a, b), matmul_oracle(a, b)) < 1e-12);

    CHECK_THROWS_AS(matmul(a, random_tensor({4, 3}, rng)), DimensionError);
}

TEST_CASE("softmax closed forms and extended-precision oracle") {
    Tensor uniform = Tensor::from_data({3}, {0.0, 0.0, 0.0});
    Tensor su = softmax(uniform);
    for (Index i = 0; i < 3; ++i) CHECK(su[i] == Catch::Approx(1.0 / 3).epsilon(1e-14));

    Tensor two = Tensor::from_data({2}, {std::log(2.0), 0.0});
    Tensor st = softmax(two);
    CHECK(st[0] == Catch::Approx(2.0 / 3).epsilon(1e-14));
    CHECK(st[1] == Catch::Approx(1.0 / 3).epsilon(1e-14));

    Rng rng(7);
    Tensor x = random_tensor({12}, rng, -3.0, 3.0);
    Tensor y = softmax(x);
    // direct exp/sum in long double
    long double sum = 0.0L;
    std::vector<long double> e(12);
    for (int i = 0; i < 12; ++i) {
        e[static_cast<std::size_t>(i)] = std::exp(static_cast<long double>(x[i]));
        sum += e[static_cast<std::size_t>(i)];
    }
    for (int i = 0; i < 12; ++i) {
        const double expected = static_cast<double>(e[static_cast<std::size_t>(i)] / sum);
        CHECK(std::abs(y[i] - expected) / expected < 1e-12);
    }
}

TEST_CASE("softmax rows sum to one for any finite input") {
    Rng rng(11);
    for (Index len : {2, 3, 17, 256, 4096}) {
        Tensor x = random_tensor({len}, rng, -30.0, 30.0);
        Tensor y = softmax(x);
        double sum = 0.0;
        for (Index i = 0; i < len; ++i) {
            CHECK(y[i] > 0.0);
            sum += y[i];
        }
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
    // axis handling on a rank-3 tensor, middle axis
    Tensor x = random_tensor({2, 5, 3}, rng);
    Tensor y = softmax(x, 1);
    for (Index b = 0; b < 2; ++b) {
        for (Index c = 0; c < 3; ++c) {
            double sum = 0.0;
            for (Index j = 0; j < 5; ++j) sum += y.at(b, j, c);
            CHECK(std::abs(sum - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("l2_normalize basics") {
    Tensor v = Tensor::from_data({1, 2}, {3.0, 4.0});
    Tensor z = l2_normalize(v);
    CHECK(z[0] == Catch::Approx(0.6).epsilon(1e-14));
    CHECK(z[1] == Catch::Approx(0.8).epsilon(1e-14));

    Tensor unit = Tensor::from_data({1, 2}, {1.0, 0.0});
    CHECK(max_abs_diff(l2_normalize(unit), unit) == 0.0);

    Tensor zero({2, 3});
    zero.at(0, 0) = 1.0;  // second row is all zeros
    CHECK_THROWS_AS(l2_normalize(zero), DegenerateInputError);
}

TEST_CASE("l2_normalize rows have unit norm and are scale invariant") {
    Rng rng(3);
    for (int rep = 0; rep < 20; ++rep) {
        Tensor x = random_tensor({4, 9}, rng);
        Tensor z = l2_normalize(x);
        for (Index i = 0; i < 4; ++i) {
            CHECK(std::abs(ConstVecMap(z.data() + i * 9, 9).norm() - 1.0) < 1e-12);
        }
        const double scale = rng.uniform(0.1, 10.0);
        Tensor xs = x;
        xs.vec() *= scale;
        CHECK(max_abs_diff(l2_normalize(xs), z) < 1e-12);
    }
}

TEST_CASE("attention_core single token and uniform-weight cases") {
    Rng rng(5);
    Tensor q1 = random_tensor({1, 2, 1, 4}, rng);
    Tensor k1 = random_tensor({1, 2, 1, 4}, rng);
    Tensor v1 = random_tensor({1, 2, 1, 4}, rng);
    CHECK(max_abs_diff(attention_core(q1, k1, v1), v1) == 0.0);

    // zero queries give uniform weights: every output row is the mean of v
    Tensor q({1, 1, 5, 4});
    Tensor k = random_tensor({1, 1, 5, 4}, rng);
    Tensor v = random_tensor({1, 1, 5, 4}, rng);
    Tensor out = attention_core(q, k, v);
    for (Index j = 0; j < 5; ++j) {
        for (Index c = 0; c < 4; ++c) {
            double mean = 0.0;
            for (Index t = 0; t < 5; ++t) mean += v.at(0, 0, t, c);
            mean /= 5.0;
            CHECK(out.at(0, 0, j, c) == Catch::Approx(mean).margin(1e-14));
        }
    }
}

TEST_CASE("attention_core matches naive reference") {
    Rng rng(9);
    const Index b = 1, H = 2, n = 5, dh = 4;
    Tensor q = random_tensor({b, H, n, dh}, rng);
    Tensor k = random_tensor({b, H, n, dh}, rng);
    Tensor v = random_tensor({b, H, n, dh}, rng);
    Tensor out = attention_core(q, k, v);

    // naive O(n^2) reference with explicit loops
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    for (Index h = 0; h < H; ++h) {
        for (Index i = 0; i < n; ++i) {
            std::vector<double> scores(static_cast<std::size_t>(n));
            double mx = -1e300;
            for (Index j = 0; j < n; ++j) {
                double s = 0.0;
                for (Index c = 0; c < dh; ++c) s += q.at(0, h, i, c) * k.at(0, h, j, c);
                scores[static_cast<std::size_t>(j)] = s * inv;
                mx = std::max(mx, scores[static_cast<std::size_t>(j)]);
            }
            double denom = 0.0;
            for (Index j = 0; j < n; ++j) {
                scores[static_cast<std::size_t>(j)] = std::exp(scores[static_cast<std::size_t>(j)] - mx);
                denom += scores[static_cast<std::size_t>(j)];
            }
            for (Index c = 0; c < dh; ++c) {
                double acc = 0.0;
                for (Index j = 0; j < n; ++j) {
                    acc += scores[static_cast<std::size_t>(j)] / denom * v.at(0, h, j, c);
                }
                CHECK(std::abs(out.at(0, h, i, c) - acc) < 1e-12);
            }
        }
    }
}

TEST_CASE("attention_core is permutation equivariant over tokens") {
    Rng rng(13);
    const Index n = 6, dh = 3;
    Tensor q = random_tensor({1, 1, n, dh}, rng);
    Tensor k = random_tensor({1, 1, n, dh}, rng);
    Tensor v = random_tensor({1, 1, n, dh}, rng);
    Tensor out = attention_core(q, k, v);

    std::vector<Index> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), Index(0));
    for (Index i = n - 1; i > 0; --i) {
        std::swap(perm[static_cast<std::size_t>(i)],
                  perm[static_cast<std::size_t>(rng.uniform_int(static_cast<std::uint64_t>(i + 1)))]);
    }
    auto permute = [&](const Tensor& t) {
        Tensor p(t.shape());
        for (Index i = 0; i < n; ++i) {
            for (Index c = 0; c < dh; ++c) {
                p.at(0, 0, i, c) = t.at(0, 0, perm[static_cast<std::size_t>(i)], c);
            }
        }
        return p;
    };
    Tensor out_p = attention_core(permute(q), permute(k), permute(v));
    CHECK(max_abs_diff(out_p, permute(out)) < 1e-12);
}

TEST_CASE("finite_diff_check is exact on a linear map") {
    Rng rng(17);
    Tensor w = random_tensor({6, 4}, rng);
    Tensor x = random_tensor({1, 6}, rng);
    Tensor r = random_tensor({1, 4}, rng);

    auto loss = [&](const Tensor& xt) { return dot_all(matmul(xt, w), r); };
    Tensor dx, dw;
    matmul_vjp(x, w, r, &dx, &dw);
    GradCheckReport rep = finite_diff_check("linear", loss, dx, x, 6, 1e-9, rng);
    CHECK(rep.pass);
    CHECK(rep.max_rel_err < 1e-9);
    CHECK(rep.pass == (rep.max_rel_err <= rep.tolerance));
}

TEST_CASE("finite_diff_check flags a corrupted gradient") {
    Rng rng(19);
    Tensor w = random_tensor({5, 5}, rng);
    Tensor x = random_tensor({1, 5}, rng);
    Tensor r = random_tensor({1, 5}, rng);
    auto loss = [&](const Tensor& xt) { return dot_all(matmul(xt, w), r); };
    Tensor dx, dw;
    matmul_vjp(x, w, r, &dx, &dw);
    dx[2] += 0.5;
    GradCheckReport rep = finite_diff_check("corrupted", loss, dx, x, 5, 1e-6, rng);
    CHECK_FALSE(rep.pass);
}

TEST_CASE("registered op gradients pass finite differences at random points") {
    Rng rng(23);
    const int points = 100;
    const int probes = 4;
    const double tol = 1e-4;

    for (int p = 0; p < points; ++p) {
        // matmul, both arguments
        Tensor a = random_tensor({3, 4}, rng);
        Tensor b = random_tensor({4, 2}, rng);
        Tensor r = random_tensor({3, 2}, rng);
        Tensor da, db;
        matmul_vjp(a, b, r, &da, &db);
        CHECK(finite_diff_check("matmul/a", [&](const Tensor& t) {
                  return dot_all(matmul(t, b), r);
              }, da, a, probes, tol, rng).pass);
        CHECK(finite_diff_check("matmul/b", [&](const Tensor& t) {
                  return dot_all(matmul(a, t), r);
              }, db, b, probes, tol, rng).pass);

        // softmax at moderate logits
        Tensor x = random_tensor({2, 6}, rng, -2.0, 2.0);
        Tensor rs = random_tensor({2, 6}, rng);
        Tensor y = softmax(x, -1);
        Tensor dx = softmax_vjp(y, rs, -1);
        CHECK(finite_diff_check("softmax", [&](const Tensor& t) {
                  return dot_all(softmax(t, -1), rs);
              }, dx, x, probes, tol, rng).pass);

        // l2_normalize away from the degenerate origin
        Tensor xn = random_tensor({3, 5}, rng, 0.2, 1.0);
        Tensor rn = random_tensor({3, 5}, rng);
        L2NormalizeCache cache;
        l2_normalize(xn, &cache);
        Tensor dn = l2_normalize_vjp(cache, rn);
        CHECK(finite_diff_check("l2_normalize", [&](const Tensor& t) {
                  return dot_all(l2_normalize(t), rn);
              }, dn, xn, probes, tol, rng).pass);

        // attention_core, all three inputs
        Tensor q = random_tensor({1, 2, 3, 2}, rng);
        Tensor k = random_tensor({1, 2, 3, 2}, rng);
        Tensor v = random_tensor({1, 2, 3, 2}, rng);
        Tensor ra = random_tensor({1, 2, 3, 2}, rng);
        AttentionCache ac;
        attention_core(q, k, v, &ac);
        Tensor dq, dk, dv;
        attention_core_vjp(ac, ra, &dq, &dk, &dv);
        CHECK(finite_diff_check("attention/q", [&](const Tensor& t) {
                  return dot_all(attention_core(t, k, v), ra);
              }, dq, q, probes, tol, rng).pass);
        CHECK(finite_diff_check("attention/k", [&](const Tensor& t) {
                  return dot_all(attention_core(q, t, v), ra);
              }, dk, k, probes, tol, rng).pass);
        CHECK(finite_diff_check("attention/v", [&](const Tensor& t) {
                  return dot_all(attention_core(q, k, t), ra);
              }, dv, v, probes, tol, rng).pass);
    }
}
