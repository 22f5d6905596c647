#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "ropecast/flow.hpp"
#include "ropecast/loss.hpp"

using namespace ropecast;

namespace {

LatentGrid<double> random_grid(Rng& rng, int r, int c, int ch) {
    LatentGrid<double> g(r, c, ch);
    for (auto& v : g.data) v = rng.next_normal();
    return g;
}

}  // namespace

TEST(FlowSample, EndpointAtDataTime) {
    Rng rng(1);
    auto x1 = random_grid(rng, 2, 3, 4);
    auto s = make_flow_sample_at(x1, 0.0, rng);
    for (size_t i = 0; i < x1.data.size(); ++i) {
        EXPECT_DOUBLE_EQ(s.z_t.data[i], x1.data[i]);
        EXPECT_DOUBLE_EQ(s.u_target.data[i], s.epsilon.data[i] - x1.data[i]);
    }
}

TEST(FlowSample, EndpointAtNoiseTime) {
    Rng rng(2);
    auto x1 = random_grid(rng, 2, 3, 4);
    auto s = make_flow_sample_at(x1, 1.0, rng);
    for (size_t i = 0; i < x1.data.size(); ++i) EXPECT_DOUBLE_EQ(s.z_t.data[i], s.epsilon.data[i]);
}

TEST(FlowSample, PathInvariantHoldsExactly) {
    Rng rng(3);
    auto x1 = random_grid(rng, 3, 3, 2);
    for (int trial = 0; trial < 20; ++trial) {
        auto s = make_flow_sample(x1, rng);
        EXPECT_GT(s.t, 0.0 - 1e-12);
        EXPECT_LT(s.t, 1.0);
        for (size_t i = 0; i < x1.data.size(); ++i) {
            EXPECT_DOUBLE_EQ(s.z_t.data[i], (1.0 - s.t) * x1.data[i] + s.t * s.epsilon.data[i]);
            EXPECT_DOUBLE_EQ(s.u_target.data[i], s.epsilon.data[i] - x1.data[i]);
        }
    }
}

TEST(FlowSample, MonteCarloMeanAtHalfTime) {
    // With x1 = 0 and t fixed at 0.5, z_t = 0.5 * eps, so each channel's mean
    // over N draws is 0 within 3 sigma / sqrt(N).
    const int N = 100000;
    LatentGrid<double> x1(1, 1, 4);  // zeros
    Rng rng(5);
    std::vector<double> sums(4, 0.0);
    for (int i = 0; i < N; ++i) {
        auto s = make_flow_sample_at(x1, 0.5, rng);
        for (int c = 0; c < 4; ++c) sums[c] += s.z_t.data[c];
    }
    const double sigma = 0.5;
    const double bound = 3.0 * sigma / std::sqrt(static_cast<double>(N));
    for (int c = 0; c < 4; ++c) EXPECT_LT(std::abs(sums[c] / N), bound);
}

TEST(FlowSample, RejectsNonFiniteInput) {
    LatentGrid<double> x1(1, 1, 1);
    x1.data[0] = std::numeric_limits<double>::quiet_NaN();
    Rng rng(7);
    EXPECT_THROW(make_flow_sample(x1, rng), std::invalid_argument);
}

TEST(FlowSample, LogitNormalTimesStayInUnitInterval) {
    Rng rng(8);
    double lo = 1.0, hi = 0.0;
    for (int i = 0; i < 2000; ++i) {
        const double t = draw_time(rng, TimeDistribution::logit_normal);
        EXPECT_GT(t, 0.0);
        EXPECT_LT(t, 1.0);
        lo = std::min(lo, t);
        hi = std::max(hi, t);
    }
    // Mass concentrates away from the endpoints but spans most of (0,1).
    EXPECT_LT(lo, 0.1);
    EXPECT_GT(hi, 0.9);
}

TEST(MaskedLoss, PerfectPredictionIsZero) {
    Matrix<double> u(4, 3);
    Rng rng(11);
    for (auto& v : u.data) v = rng.next_normal();
    std::vector<uint8_t> mask{0, 1, 1, 0};
    EXPECT_DOUBLE_EQ(masked_cfm_loss(u, u, mask), 0.0);
}

TEST(MaskedLoss, GarbageOutsideMaskIgnored) {
    Rng rng(13);
    Matrix<double> u(4, 3), pred(4, 3);
    for (auto& v : u.data) v = rng.next_normal();
    pred = u;
    std::vector<uint8_t> mask{0, 1, 1, 0};
    const double base = masked_cfm_loss(pred, u, mask);
    // Perturb non-target rows with garbage, including NaN.
    for (int c = 0; c < 3; ++c) {
        pred.at(0, c) = 1e30;
        pred.at(3, c) = std::numeric_limits<double>::quiet_NaN();
    }
    const double perturbed = masked_cfm_loss(pred, u, mask);
    EXPECT_EQ(base, perturbed);  // bitwise equal
}

TEST(MaskedLoss, ConstantOffset) {
    Matrix<double> u(2, 4), pred(2, 4);
    for (auto& v : u.data) v = 0.5;
    std::vector<uint8_t> mask{1, 1};
    EXPECT_DOUBLE_EQ(masked_cfm_loss(pred, u, mask), 0.25);
}

TEST(MaskedLoss, EmptyMaskRejected) {
    Matrix<double> u(2, 2);
    std::vector<uint8_t> mask{0, 0};
    EXPECT_THROW(masked_cfm_loss(u, u, mask), std::invalid_argument);
}

namespace {

struct OracleSetup {
    TaskSpec task{TaskKind::tryon, 1};
    std::vector<ConditionSpec<double>> conds;
    LatentGrid<double> x1;
    LatentGrid<double> eps;
};

// Constant-velocity oracle: with v = eps - x1 and z starting at eps, any Euler
// step count lands exactly on x1. The sampler's own noise draw must be used as
// eps, so capture it from the first assembled state.
OracleSetup oracle_setup(uint64_t data_seed) {
    Rng rng(data_seed);
    OracleSetup s;
    s.conds.push_back({LatentGrid<double>(2, 2, 3), 1, true, ConditionRole::model_image});
    for (auto& v : s.conds[0].grid.data) v = rng.next_normal();
    s.x1 = LatentGrid<double>(2, 2, 3);
    for (auto& v : s.x1.data) v = rng.next_normal();
    return s;
}

}  // namespace

TEST(EulerSampler, ConstantOracleRecoversDataForAnyStepCount) {
    for (int steps : {1, 5, 20}) {
        OracleSetup s = oracle_setup(17);
        LatentGrid<double> captured_eps;
        bool first = true;
        VelocityFn<double> oracle = [&](const TokenSequence<double>& seq, double) {
            auto z = gather_target(seq);
            if (first) {
                captured_eps = z;  // z at t=1 is exactly the initial noise
                first = false;
            }
            LatentGrid<double> v = captured_eps;
            for (size_t i = 0; i < v.data.size(); ++i)
                v.data[i] = captured_eps.data[i] - s.x1.data[i];
            return v;
        };
        auto out =
            euler_sample(oracle, s.task, s.conds, ShapeRC{2, 2}, 3, steps, /*seed=*/99);
        for (size_t i = 0; i < out.data.size(); ++i)
            EXPECT_NEAR(out.data[i], s.x1.data[i], 1e-6) << "steps=" << steps;
    }
}

TEST(EulerSampler, ZeroStepsRejected) {
    OracleSetup s = oracle_setup(19);
    VelocityFn<double> zero = [](const TokenSequence<double>& seq, double) {
        return LatentGrid<double>(seq.target_rows, seq.target_cols, seq.channels());
    };
    EXPECT_THROW(euler_sample(zero, s.task, s.conds, ShapeRC{2, 2}, 3, 0, 1),
                 std::invalid_argument);
}

TEST(EulerSampler, DeterministicGivenSeed) {
    OracleSetup s = oracle_setup(23);
    VelocityFn<double> field = [](const TokenSequence<double>& seq, double t) {
        auto z = gather_target(seq);
        for (auto& v : z.data) v = 0.3 * v + t;
        return z;
    };
    auto a = euler_sample(field, s.task, s.conds, ShapeRC{2, 2}, 3, 7, 42);
    auto b = euler_sample(field, s.task, s.conds, ShapeRC{2, 2}, 3, 7, 42);
    EXPECT_EQ(a.data, b.data);
    auto c = euler_sample(field, s.task, s.conds, ShapeRC{2, 2}, 3, 7, 43);
    EXPECT_NE(a.data, c.data);
}

TEST(EulerSampler, ConditionsStayCleanAtEveryStep) {
    OracleSetup s = oracle_setup(29);
    VelocityFn<double> field = [](const TokenSequence<double>& seq, double) {
        auto z = gather_target(seq);
        for (auto& v : z.data) v *= 0.5;
        return z;
    };
    int observed = 0;
    StepObserver<double> observer = [&](int, double, const TokenSequence<double>& seq) {
        ++observed;
        int ci = 0;
        for (int i = 0; i < seq.length(); ++i) {
            if (seq.segment[i] != Segment::condition) continue;
            for (int c = 0; c < seq.channels(); ++c)
                ASSERT_EQ(seq.tokens.at(i, c), s.conds[0].grid.data[ci * 3 + c]);
            ++ci;
        }
    };
    euler_sample(field, s.task, s.conds, ShapeRC{2, 2}, 3, 6, 12, {}, &observer);
    EXPECT_EQ(observed, 6);
}

TEST(EulerSampler, NonFiniteStateAbortsWithStepIndex) {
    OracleSetup s = oracle_setup(31);
    VelocityFn<double> bad = [](const TokenSequence<double>& seq, double) {
        LatentGrid<double> v(seq.target_rows, seq.target_cols, seq.channels());
        for (auto& x : v.data) x = std::numeric_limits<double>::infinity();
        return v;
    };
    try {
        euler_sample(bad, s.task, s.conds, ShapeRC{2, 2}, 3, 4, 5);
        FAIL() << "expected abort";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
    }
}

TEST(BatchElement, NoisedConditionArmSupervisesConditions) {
    Rng rng(37);
    std::vector<ConditionSpec<double>> conds{
        {random_grid(rng, 2, 2, 3), 1, true, ConditionRole::model_image}};
    auto x1 = random_grid(rng, 2, 2, 3);

    Rng er1(41);
    auto clean = make_batch_element(TaskSpec{TaskKind::tryon, 1}, conds, x1, er1);
    EXPECT_EQ(clean.supervised, clean.seq.loss_mask);
    // Clean conditions appear verbatim in the sequence.
    int ci = 0;
    for (int i = 0; i < clean.seq.length(); ++i) {
        if (clean.seq.segment[i] != Segment::condition) continue;
        for (int c = 0; c < 3; ++c)
            EXPECT_EQ(clean.seq.tokens.at(i, c), conds[0].grid.data[ci * 3 + c]);
        ++ci;
    }

    Rng er2(41);
    BatchOptions opts;
    opts.clean_latents = false;
    auto noised = make_batch_element(TaskSpec{TaskKind::tryon, 1}, conds, x1, er2, opts);
    int supervised_conditions = 0;
    bool any_token_differs = false;
    for (int i = 0; i < noised.seq.length(); ++i) {
        if (noised.seq.segment[i] != Segment::condition) continue;
        supervised_conditions += noised.supervised[i];
        for (int c = 0; c < 3; ++c)
            any_token_differs |= noised.seq.tokens.at(i, c) != clean.seq.tokens.at(i, c);
    }
    EXPECT_EQ(supervised_conditions, 4);
    EXPECT_TRUE(any_token_differs);
}
