#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "x2edit/contrastive.hpp"
#include "x2edit/error.hpp"
#include "x2edit/grad_check.hpp"
#include "x2edit/rng.hpp"

using namespace x2edit;

namespace {

Tensor random_tensor(std::vector<Index> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i) {
        t[i] = rng.uniform(lo, hi);
    }
    return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.same_shape(b));
    double m = 0.0;
    for (Index i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

// Brute-force evaluation of the task-contrastive loss straight from the
// definition, entirely in extended precision and independent of the library
// code paths.
double infonce_oracle(const Tensor& raw, const std::vector<int>& y, double tau,
                      bool include_self, double metric_factor) {
    const Index b = raw.dim(0);
    const Index m = raw.dim(1);
    std::vector<std::vector<long double>> z(static_cast<std::size_t>(b),
                                            std::vector<long double>(static_cast<std::size_t>(m)));
    for (Index i = 0; i < b; ++i) {
        long double norm = 0.0L;
        for (Index c = 0; c < m; ++c) {
            const long double v = raw.at(i, c);
            norm += v * v;
        }
        norm = std::sqrt(norm);
        for (Index c = 0; c < m; ++c) {
            z[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)] =
                static_cast<long double>(raw.at(i, c)) / norm;
        }
    }
    long double total = 0.0L;
    int active = 0;
    for (Index i = 0; i < b; ++i) {
        bool has_positive = false;
        for (Index j = 0; j < b; ++j) {
            if (i != j && y[static_cast<std::size_t>(i)] == y[static_cast<std::size_t>(j)]) {
                has_positive = true;
            }
        }
        if (!has_positive) {
            continue;
        }
        long double numerator = 0.0L;
        long double denominator = 0.0L;
        for (Index k = 0; k < b; ++k) {
            if (i == k && !include_self) {
                continue;
            }
            long double dist = 0.0L;
            for (Index c = 0; c < m; ++c) {
                const long double d = z[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)] -
                                      z[static_cast<std::size_t>(k)][static_cast<std::size_t>(c)];
                dist += d * d;
            }
            if (metric_factor == 1.0) {
                dist /= 2.0L;  // cosine distance = half the squared chord length
            }
            const long double e = std::exp(-dist / static_cast<long double>(tau));
            denominator += e;
            if (i != k && y[static_cast<std::size_t>(i)] == y[static_cast<std::size_t>(k)]) {
                numerator += e;
            }
        }
        total += -std::log(numerator / denominator);
        ++active;
    }
    return active > 0 ? static_cast<double>(total / active) : 0.0;
}

}  // namespace

TEST_CASE("flatten_normalize produces unit rows and is scale invariant") {
    Rng rng(1);
    HiddenBatch hb{random_tensor({3, 4, 5}, rng), {0, 1, 0}, 0};
    Tensor z = flatten_normalize(hb);
    REQUIRE(z.shape() == std::vector<Index>{3, 20});
    for (Index i = 0; i < 3; ++i) {
        CHECK(std::abs(ConstVecMap(z.data() + i * 20, 20).norm() - 1.0) < 1e-12);
    }

    HiddenBatch scaled = hb;
    scaled.h.vec() *= 5.0;
    CHECK(max_abs_diff(flatten_normalize(scaled), z) < 1e-12);

    // matches the reshape + normalize composition
    Tensor expected = l2_normalize(hb.h.reshaped({3, 20}));
    CHECK(max_abs_diff(z, expected) == 0.0);

    HiddenBatch degenerate{Tensor({1, 2, 2}), {0}, 0};
    CHECK_THROWS_AS(flatten_normalize(degenerate), DegenerateInputError);
}

TEST_CASE("pairwise_sq_dist closed forms") {
    // identical rows -> all zeros
    Tensor same({3, 4});
    for (Index i = 0; i < 3; ++i) same.at(i, 0) = 1.0;
    DistanceMatrix zero = pairwise_sq_dist(same);
    for (Index i = 0; i < zero.d.size(); ++i) CHECK(zero.d[i] == 0.0);

    // orthonormal rows -> 2 off the diagonal
    Tensor ortho({3, 3});
    for (Index i = 0; i < 3; ++i) ortho.at(i, i) = 1.0;
    DistanceMatrix two = pairwise_sq_dist(ortho);
    for (Index i = 0; i < 3; ++i) {
        for (Index j = 0; j < 3; ++j) {
            CHECK(two.d.at(i, j) == (i == j ? 0.0 : 2.0));
        }
    }

    // antipodal rows -> 4
    Tensor anti({2, 2});
    anti.at(0, 0) = 1.0;
    anti.at(1, 0) = -1.0;
    CHECK(pairwise_sq_dist(anti).d.at(0, 1) == 4.0);
}

TEST_CASE("distance matrix invariants hold on random batches") {
    Rng rng(2);
    for (int rep = 0; rep < 1000; ++rep) {
        const Index b = 2 + static_cast<Index>(rng.uniform_int(7));
        Tensor z = l2_normalize(random_tensor({b, 6}, rng));
        DistanceMatrix dist = pairwise_sq_dist(z);
        for (Index i = 0; i < b; ++i) {
            CHECK(dist.d.at(i, i) == 0.0);
            for (Index j = 0; j < b; ++j) {
                CHECK(std::abs(dist.d.at(i, j) - dist.d.at(j, i)) < 1e-12);
                CHECK(dist.d.at(i, j) >= 0.0);
                CHECK(dist.d.at(i, j) <= 4.0 + 1e-9);
            }
        }
    }
}

TEST_CASE("build_task_mask marks same-task distinct pairs") {
    TaskMask mask = build_task_mask({1, 1, 2});
    const std::vector<double> expected{0, 1, 0, 1, 0, 0, 0, 0, 0};
    for (Index i = 0; i < 9; ++i) CHECK(mask.m[i] == expected[static_cast<std::size_t>(i)]);
    CHECK(mask.positive_counts == std::vector<int>{1, 1, 0});

    TaskMask none = build_task_mask({0, 1, 2, 3});
    for (Index i = 0; i < none.m.size(); ++i) CHECK(none.m[i] == 0.0);

    TaskMask all = build_task_mask({5, 5, 5, 5});
    for (Index i = 0; i < 4; ++i) {
        for (Index j = 0; j < 4; ++j) {
            CHECK(all.m.at(i, j) == (i == j ? 0.0 : 1.0));
        }
    }
}

TEST_CASE("task_infonce closed form: coincident positive pair") {
    // two identical unit rows of the same task at tau = 0.5: D = 0 everywhere,
    // numerator exp(0) = 1, denominator 1 + 1 = 2, so the loss is ln 2
    Tensor z({2, 3});
    z.at(0, 0) = 1.0;
    z.at(1, 0) = 1.0;
    InfoNceResult r = task_infonce(pairwise_sq_dist(z), build_task_mask({3, 3}), 0.5);
    CHECK(r.active == 2);
    CHECK(std::abs(r.loss - std::log(2.0)) < 1e-12);
    CHECK(std::abs(r.per_sample[0] - std::log(2.0)) < 1e-12);
    CHECK(std::abs(r.per_sample[1] - std::log(2.0)) < 1e-12);
}

TEST_CASE("task_infonce with no positives is zero and inactive") {
    Rng rng(3);
    Tensor z = l2_normalize(random_tensor({2, 5}, rng));
    InfoNceResult r = task_infonce(pairwise_sq_dist(z), build_task_mask({1, 2}), 0.5);
    CHECK(r.loss == 0.0);
    CHECK(r.active == 0);

    CHECK_THROWS_AS(task_infonce(pairwise_sq_dist(z), build_task_mask({1, 1}), 0.0),
                    ParameterError);
    CHECK_THROWS_AS(task_infonce(pairwise_sq_dist(z), build_task_mask({1, 1}), -1.0),
                    ParameterError);
}

TEST_CASE("task_infonce matches the extended-precision oracle") {
    Rng rng(4);
    const std::vector<int> y{0, 0, 1, 1, 2, 2};
    for (int rep = 0; rep < 200; ++rep) {
        Tensor raw = random_tensor({6, 10}, rng, -1.0, 1.0);
        Tensor z = l2_normalize(raw);
        InfoNceResult r = task_infonce(pairwise_sq_dist(z), build_task_mask(y), 0.5);
        const double expected = infonce_oracle(raw, y, 0.5, true, 2.0);
        CHECK(std::abs(r.loss - expected) / std::abs(expected) < 1e-10);
    }
}

TEST_CASE("excluding the self term matches the oracle without it") {
    Rng rng(14);
    const std::vector<int> y{0, 0, 1, 1};
    for (int rep = 0; rep < 50; ++rep) {
        Tensor raw = random_tensor({4, 7}, rng);
        Tensor z = l2_normalize(raw);
        InfoNceResult r =
            task_infonce(pairwise_sq_dist(z), build_task_mask(y), 0.5, /*self=*/false);
        const double expected = infonce_oracle(raw, y, 0.5, false, 2.0);
        CHECK(std::abs(r.loss - expected) / std::abs(expected) < 1e-10);
    }

    // the gradient path honors the switch as well
    InfoNceOptions opts;
    opts.include_self_term = false;
    Tensor raw = random_tensor({4, 7}, rng);
    TaskInfoNceGrad grad = task_infonce_grad(raw, y, opts);
    auto loss = [&](const Tensor& t) { return task_infonce_grad(t, y, opts).loss; };
    CHECK(finite_diff_check("no_self_term", loss, grad.dz, raw, 30, 1e-5, rng).pass);
}

TEST_CASE("task_infonce loss is positive whenever a positive exists") {
    Rng rng(5);
    for (int rep = 0; rep < 200; ++rep) {
        const Index b = 2 + static_cast<Index>(rng.uniform_int(6));
        std::vector<int> y(static_cast<std::size_t>(b));
        for (auto& v : y) v = static_cast<int>(rng.uniform_int(3));
        Tensor z = l2_normalize(random_tensor({b, 8}, rng));
        InfoNceResult r = task_infonce(pairwise_sq_dist(z), build_task_mask(y), 0.5);
        if (r.active > 0) {
            CHECK(r.loss > 0.0);
        } else {
            CHECK(r.loss == 0.0);
        }
    }
}

TEST_CASE("task_infonce is invariant to joint permutation and input scale") {
    Rng rng(6);
    const std::vector<int> y{0, 1, 0, 2, 1, 0};
    Tensor raw = random_tensor({6, 12}, rng);
    InfoNceOptions opts;
    TaskInfoNceGrad base = task_infonce_grad(raw, y, opts);

    // joint permutation of rows and labels
    const std::vector<Index> perm{3, 0, 5, 1, 4, 2};
    Tensor praw({6, 12});
    std::vector<int> py(6);
    for (Index i = 0; i < 6; ++i) {
        py[static_cast<std::size_t>(i)] = y[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
        for (Index c = 0; c < 12; ++c) {
            praw.at(i, c) = raw.at(perm[static_cast<std::size_t>(i)], c);
        }
    }
    TaskInfoNceGrad permuted = task_infonce_grad(praw, py, opts);
    CHECK(std::abs(base.loss - permuted.loss) < 1e-12);

    // positive rescaling of the hidden states
    Tensor scaled = raw;
    scaled.vec() *= 37.5;
    TaskInfoNceGrad rescaled = task_infonce_grad(scaled, y, opts);
    CHECK(std::abs(base.loss - rescaled.loss) < 1e-10);
}

TEST_CASE("widening the inter-task gap never increases the loss") {
    // two coincident positive pairs; the cross-task angle theta controls the
    // inter-task distance while intra-task distances stay zero
    double previous = 1e300;
    for (int step = 1; step <= 16; ++step) {
        const double theta = step * (M_PI / 16.0);
        Tensor z({4, 2});
        z.at(0, 0) = 1.0;
        z.at(1, 0) = 1.0;
        z.at(2, 0) = std::cos(theta);
        z.at(2, 1) = std::sin(theta);
        z.at(3, 0) = std::cos(theta);
        z.at(3, 1) = std::sin(theta);
        InfoNceResult r = task_infonce(pairwise_sq_dist(z), build_task_mask({0, 0, 1, 1}), 0.5);
        CHECK(r.loss <= previous + 1e-12);
        previous = r.loss;
    }
}

TEST_CASE("task_infonce_grad handles inactive batches and symmetric pairs") {
    Rng rng(7);
    InfoNceOptions opts;

    // all samples inactive: constant loss, zero gradient
    Tensor raw = random_tensor({3, 6}, rng);
    TaskInfoNceGrad none = task_infonce_grad(raw, {0, 1, 2}, opts);
    CHECK(none.loss == 0.0);
    CHECK(none.active == 0);
    for (Index i = 0; i < none.dz.size(); ++i) CHECK(none.dz[i] == 0.0);

    // a lone positive pair: chord-direction components are equal and opposite
    Tensor pair = l2_normalize(random_tensor({2, 5}, rng));
    TaskInfoNceGrad sym = task_infonce_grad(pair, {4, 4}, opts);
    Eigen::VectorXd chord = ConstVecMap(pair.data(), 5) - ConstVecMap(pair.data() + 5, 5);
    chord.normalize();
    const double p0 = ConstVecMap(sym.dz.data(), 5).dot(chord);
    const double p1 = ConstVecMap(sym.dz.data() + 5, 5).dot(chord);
    CHECK(std::abs(p0 + p1) < 1e-12);
}

TEST_CASE("task_infonce_grad passes finite differences") {
    Rng rng(8);
    const std::vector<int> y{0, 0, 1, 1, 2, 2};
    InfoNceOptions opts;
    Tensor raw = random_tensor({6, 9}, rng, -1.0, 1.0);
    TaskInfoNceGrad grad = task_infonce_grad(raw, y, opts);
    auto loss = [&](const Tensor& t) { return task_infonce_grad(t, y, opts).loss; };
    GradCheckReport rep = finite_diff_check("task_infonce", loss, grad.dz, raw, 50, 1e-5, rng);
    CHECK(rep.pass);

    // the cosine metric variant backpropagates correctly too
    opts.metric = ContrastiveMetric::kCosine;
    TaskInfoNceGrad gcos = task_infonce_grad(raw, y, opts);
    auto loss_cos = [&](const Tensor& t) { return task_infonce_grad(t, y, opts).loss; };
    CHECK(finite_diff_check("task_infonce_cosine", loss_cos, gcos.dz, raw, 50, 1e-5, rng).pass);
    CHECK(std::abs(gcos.loss - infonce_oracle(raw, y, 0.5, true, 1.0)) < 1e-10);
}

TEST_CASE("sharded loss equals the single-device loss") {
    Rng rng(9);
    const std::vector<int> y{0, 0, 1, 1, 2, 2};
    Tensor h = random_tensor({6, 2, 4}, rng);

    auto shard = [&](Index lo, Index hi) {
        HiddenBatch hb;
        hb.h = Tensor({hi - lo, 2, 4});
        std::copy(h.data() + lo * 8, h.data() + hi * 8, hb.h.data());
        hb.y.assign(y.begin() + lo, y.begin() + hi);
        return hb;
    };

    InfoNceOptions opts;
    Tensor z = l2_normalize(h.reshaped({6, 8}));
    InfoNceResult single = task_infonce(pairwise_sq_dist(z), build_task_mask(y), opts.tau);

    // degenerate sharding
    ShardedInfoNce w1 = sharded_task_infonce(ShardedBatch{{shard(0, 6)}}, opts);
    CHECK(std::abs(w1.loss - single.loss) < 1e-15);
    CHECK(w1.active == single.active);

    // two workers
    ShardedInfoNce w2 = sharded_task_infonce(ShardedBatch{{shard(0, 3), shard(3, 6)}}, opts, true);
    CHECK(std::abs(w2.loss - single.loss) < 1e-9);

    // gathered remote rows are constants: remote gradients are exactly zero
    REQUIRE(w2.worker_grads.size() == 2);
    for (Index i = 3 * 8; i < 6 * 8; ++i) CHECK(w2.worker_grads[0][i] == 0.0);
    for (Index i = 0; i < 3 * 8; ++i) CHECK(w2.worker_grads[1][i] == 0.0);

    // summed worker gradients reproduce the single-device gradient
    TaskInfoNceGrad full = task_infonce_grad(h.reshaped({6, 8}), y, opts);
    Tensor summed({6, 8});
    summed.vec() = w2.worker_grads[0].vec() + w2.worker_grads[1].vec();
    CHECK(max_abs_diff(summed, full.dz) < 1e-12);

    CHECK_THROWS_AS(sharded_task_infonce(ShardedBatch{}, opts), ShardError);
}

TEST_CASE("sharded equivalence holds for all partitions of an 8-sample batch") {
    Rng rng(10);
    const std::vector<int> y{0, 1, 0, 1, 2, 2, 3, 0};
    Tensor h = random_tensor({8, 3, 3}, rng);
    Tensor z = l2_normalize(h.reshaped({8, 9}));
    InfoNceOptions opts;
    const double single = task_infonce(pairwise_sq_dist(z), build_task_mask(y), opts.tau).loss;

    auto shard = [&](Index lo, Index hi) {
        HiddenBatch hb;
        hb.h = Tensor({hi - lo, 3, 3});
        std::copy(h.data() + lo * 9, h.data() + hi * 9, hb.h.data());
        hb.y.assign(y.begin() + lo, y.begin() + hi);
        return hb;
    };

    for (int workers : {1, 2, 4}) {
        ShardedBatch sb;
        const Index per = 8 / workers;
        for (int w = 0; w < workers; ++w) {
            sb.shards.push_back(shard(w * per, (w + 1) * per));
        }
        ShardedInfoNce r = sharded_task_infonce(sb, opts);
        CHECK(std::abs(r.loss - single) < 1e-9);
    }
}

TEST_CASE("multi_layer_task_loss averages per-layer losses") {
    Rng rng(11);
    const std::vector<int> y{0, 0, 1, 1};
    InfoNceOptions opts;

    std::vector<HiddenBatch> layers;
    for (int l = 0; l < 3; ++l) {
        layers.push_back({random_tensor({4, 2, 3}, rng), y, l});
    }

    MultiLayerTaskLoss single = multi_layer_task_loss({layers[0]}, opts);
    Tensor z = l2_normalize(layers[0].h.reshaped({4, 6}));
    const double direct = task_infonce(pairwise_sq_dist(z), build_task_mask(y), opts.tau).loss;
    CHECK(std::abs(single.loss - direct) < 1e-14);

    MultiLayerTaskLoss same = multi_layer_task_loss({layers[0], layers[0], layers[0]}, opts);
    CHECK(std::abs(same.loss - direct) < 1e-13);

    MultiLayerTaskLoss three = multi_layer_task_loss(layers, opts);
    const double mean = (three.per_layer[0] + three.per_layer[1] + three.per_layer[2]) / 3.0;
    CHECK(std::abs(three.loss - mean) < 1e-13);

    std::vector<HiddenBatch> bad = layers;
    bad[1].y = {0, 0, 1, 2};
    CHECK_THROWS_AS(multi_layer_task_loss(bad, opts), ConsistencyError);
}

TEST_CASE("separability ratio reflects cluster structure") {
    // tight same-task clusters far from each other: ratio well below 1
    Tensor h({4, 1, 2});
    h.at(0, 0, 0) = 1.0;
    h.at(1, 0, 0) = 1.0;
    h.at(1, 0, 1) = 0.01;
    h.at(2, 0, 1) = 1.0;
    h.at(3, 0, 1) = 1.0;
    h.at(3, 0, 0) = 0.01;
    HiddenBatch hb{h, {0, 0, 1, 1}, 0};
    const double ratio = separability_ratio(hb);
    CHECK(ratio < 0.1);

    HiddenBatch lone{h, {0, 1, 2, 3}, 0};
    CHECK(std::isnan(separability_ratio(lone)));
}
