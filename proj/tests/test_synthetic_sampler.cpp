#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <set>

#include "x2edit/error.hpp"
#include "x2edit/rng.hpp"
#include "x2edit/sampler.hpp"
#include "x2edit/synthetic.hpp"

using namespace x2edit;

namespace {

Tensor random_field(Index n, Index d, Rng& rng) {
    Tensor t({n, d});
    for (Index i = 0; i < t.size(); ++i) {
        t[i] = rng.gaussian();
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

}  // namespace

TEST_CASE("default task universe ends with the reserved other id") {
    auto specs = default_task_specs(15);
    REQUIRE(specs.size() == 15);
    for (int t = 0; t < 15; ++t) {
        CHECK(specs[static_cast<std::size_t>(t)].task_id == t);
    }
    CHECK(specs.back().kind == TransformKind::kIdentity);
    CHECK(specs.back().name == "other");
    // the first 14 names are distinct transforms
    std::set<std::string> names;
    for (int t = 0; t < 14; ++t) names.insert(specs[static_cast<std::size_t>(t)].name);
    CHECK(names.size() == 14);
}

TEST_CASE("channel negation flips exactly the negated channel") {
    Rng rng(1);
    Tensor src = random_field(16, 4, rng);
    SyntheticTaskSpec spec;
    spec.kind = TransformKind::kChannelNegation;
    spec.iparam0 = 2;
    Tensor out = apply_task_transform(spec, src);
    for (Index j = 0; j < 16; ++j) {
        for (Index c = 0; c < 4; ++c) {
            CHECK(out.at(j, c) == (c == 2 ? -src.at(j, c) : src.at(j, c)));
        }
    }
    spec.iparam0 = -1;
    Tensor all = apply_task_transform(spec, src);
    for (Index i = 0; i < all.size(); ++i) {
        CHECK(all[i] == -src[i]);
    }
}

TEST_CASE("transforms are involutive, invertible or idempotent as declared") {
    Rng rng(2);
    Tensor src = random_field(16, 4, rng);

    SyntheticTaskSpec flip;
    flip.kind = TransformKind::kGridFlip;
    flip.iparam0 = 0;
    CHECK(max_abs_diff(apply_task_transform(flip, apply_task_transform(flip, src)), src) == 0.0);
    flip.iparam0 = 1;
    CHECK(max_abs_diff(apply_task_transform(flip, apply_task_transform(flip, src)), src) == 0.0);

    SyntheticTaskSpec swap;
    swap.kind = TransformKind::kChannelSwap;
    swap.iparam0 = 0;
    swap.iparam1 = 3;
    CHECK(max_abs_diff(apply_task_transform(swap, apply_task_transform(swap, src)), src) == 0.0);

    SyntheticTaskSpec shift;
    shift.kind = TransformKind::kCyclicShift;
    shift.iparam0 = 5;
    SyntheticTaskSpec unshift = shift;
    unshift.iparam0 = 11;
    CHECK(max_abs_diff(apply_task_transform(unshift, apply_task_transform(shift, src)), src) == 0.0);

    SyntheticTaskSpec smooth;
    smooth.kind = TransformKind::kSmoothing;
    for (int mode : {0, 1}) {
        smooth.iparam0 = mode;
        Tensor once = apply_task_transform(smooth, src);
        CHECK(max_abs_diff(apply_task_transform(smooth, once), once) == 0.0);
    }

    SyntheticTaskSpec scale;
    scale.kind = TransformKind::kGlobalScale;
    scale.fparam = 0.5;
    SyntheticTaskSpec unscale = scale;
    unscale.fparam = 2.0;
    CHECK(max_abs_diff(apply_task_transform(unscale, apply_task_transform(scale, src)), src) <
          1e-15);

    // grid kinds reject non-square token counts
    Tensor ragged = random_field(12, 4, rng);
    CHECK_THROWS_AS(apply_task_transform(flip, ragged), TaskSpecError);
}

TEST_CASE("synthetic batches are deterministic and respect the task draw") {
    auto specs = default_task_specs(5);
    SyntheticDataConfig dc;
    dc.n_src = dc.n_tgt = 16;
    dc.d_in = 4;

    auto build = [&]() {
        SamplerState sampler = make_sampler(5, 64);
        Rng rs = Rng::stream(11, "sampler");
        Rng rd = Rng::stream(11, "data");
        Rng rn = Rng::stream(11, "noise");
        return make_synthetic_batch(specs, sampler, 6, dc, rs, rd, rn);
    };
    auto a = build();
    auto b = build();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].y == b[i].y);
        CHECK(a[i].t == b[i].t);
        CHECK(std::memcmp(a[i].src.data(), b[i].src.data(),
                          static_cast<std::size_t>(a[i].src.size()) * 8) == 0);
        CHECK(std::memcmp(a[i].eps.data(), b[i].eps.data(),
                          static_cast<std::size_t>(a[i].eps.size()) * 8) == 0);
        // x0 is the task transform of src
        Tensor expected =
            apply_task_transform(specs[static_cast<std::size_t>(a[i].y)], a[i].src);
        CHECK(max_abs_diff(a[i].x0, expected) == 0.0);
        CHECK(a[i].t > 0.0);
        CHECK(a[i].t < 1.0);
    }
}

TEST_CASE("every task id appears over many draws") {
    auto specs = default_task_specs(15);
    SamplerState sampler = make_sampler(15, 1024);
    Rng rs(3), rd(4), rn(5);
    SyntheticDataConfig dc;
    dc.n_src = dc.n_tgt = 4;
    dc.d_in = 4;
    std::set<int> seen;
    for (int rep = 0; rep < 1000; ++rep) {
        for (const FlowSample& s : make_synthetic_batch(specs, sampler, 10, dc, rs, rd, rn)) {
            seen.insert(s.y);
        }
    }
    CHECK(seen.size() == 15);
}

TEST_CASE("balanced sampler is uniform from an empty cache") {
    Rng rng(6);
    std::vector<int> counts(15, 0);
    const int draws = 30000;
    for (int rep = 0; rep < draws; ++rep) {
        SamplerState fresh = make_sampler(15, 1024);
        ++counts[static_cast<std::size_t>(balanced_sample(fresh, rng))];
    }
    for (int t = 0; t < 15; ++t) {
        const double freq = static_cast<double>(counts[static_cast<std::size_t>(t)]) / draws;
        CHECK(std::abs(freq - 1.0 / 15) < 0.015);
    }
}

TEST_CASE("a cache full of one task makes that task the rarest draw") {
    Rng rng(7);
    SamplerState loaded = make_sampler(15, 256);
    loaded.cache.assign(256, 3);
    loaded.counts[3] = 256;

    std::vector<int> counts(15, 0);
    const int draws = 50000;
    for (int rep = 0; rep < draws; ++rep) {
        SamplerState copy = loaded;
        ++counts[static_cast<std::size_t>(balanced_sample(copy, rng))];
    }
    for (int t = 0; t < 15; ++t) {
        if (t != 3) {
            CHECK(counts[3] < counts[static_cast<std::size_t>(t)]);
        }
    }
}

TEST_CASE("long-run frequencies converge to uniform from any starting cache") {
    Rng rng(8);
    // adversarial start: cache stuffed with a single task
    SamplerState state = make_sampler(15, 1024);
    state.cache.assign(1024, 0);
    state.counts[0] = 1024;

    std::vector<int> counts(15, 0);
    const int draws = 100000;
    for (int rep = 0; rep < draws; ++rep) {
        ++counts[static_cast<std::size_t>(balanced_sample(state, rng))];
    }
    for (int t = 0; t < 15; ++t) {
        const double freq = static_cast<double>(counts[static_cast<std::size_t>(t)]) / draws;
        CHECK(std::abs(freq - 1.0 / 15) < 0.02);
    }
}

TEST_CASE("sampler misuse raises task and parameter errors") {
    CHECK_THROWS_AS(make_sampler(0, 10), ParameterError);
    auto specs = default_task_specs(5);
    SamplerState sampler = make_sampler(7, 16);  // wrong universe size
    Rng rs(9), rd(10), rn(11);
    SyntheticDataConfig dc;
    dc.n_src = dc.n_tgt = 4;
    dc.d_in = 2;
    CHECK_THROWS_AS(make_synthetic_batch(specs, sampler, 3, dc, rs, rd, rn), TaskSpecError);
}
