#include <gtest/gtest.h>

#include <cmath>

#include "ropecast/loss.hpp"
#include "ropecast/model.hpp"
#include "ropecast/rng.hpp"

using namespace ropecast;

namespace {

LatentGrid<double> random_grid(Rng& rng, int r, int c, int ch) {
    LatentGrid<double> g(r, c, ch);
    for (auto& v : g.data) v = rng.next_normal();
    return g;
}

// Small mixed sequence: 1 task token, one aligned condition, one offset
// condition, 2x2 target.
TokenSequence<double> tiny_sequence(Rng& rng, int channels) {
    std::vector<ConditionSpec<double>> conds;
    conds.push_back({random_grid(rng, 2, 2, channels), 1, true, ConditionRole::model_image});
    conds.push_back({random_grid(rng, 2, 2, channels), 2, false, ConditionRole::garment_image});
    return assemble(TaskSpec{TaskKind::tryon, 1}, conds, random_grid(rng, 2, 2, channels));
}

ModelConfig micro_config(int depth, bool parallel = false) {
    ModelConfig cfg = make_model_config(8, 1, depth, 1);
    cfg.mlp_ratio = 2;
    cfg.parallel_blocks = parallel;
    return cfg;
}

}  // namespace

TEST(ModelForward, DepthZeroIsAffine) {
    ModelConfig cfg = micro_config(0);
    auto freqs = make_frequencies<double>(cfg.rope);
    Parameters<double> p = zero_parameters<double>(cfg);
    randomize_parameters(p, 99);

    Rng rng(1);
    auto seq0 = tiny_sequence(rng, cfg.token_channels());
    auto a = seq0, b = seq0, ab = seq0, zero = seq0;
    Rng r2(2);
    for (size_t i = 0; i < seq0.tokens.data.size(); ++i) {
        a.tokens.data[i] = r2.next_normal();
        b.tokens.data[i] = r2.next_normal();
        ab.tokens.data[i] = a.tokens.data[i] + b.tokens.data[i];
        zero.tokens.data[i] = 0.0;
    }
    auto fa = forward(p, a, 0.3, cfg, freqs);
    auto fb = forward(p, b, 0.3, cfg, freqs);
    auto fab = forward(p, ab, 0.3, cfg, freqs);
    auto f0 = forward(p, zero, 0.3, cfg, freqs);
    for (size_t i = 0; i < fa.data.size(); ++i)
        EXPECT_NEAR(fab.data[i] - fa.data[i] - fb.data[i] + f0.data[i], 0.0, 1e-12);
}

TEST(ModelForward, Deterministic) {
    ModelConfig cfg = make_model_config(16, 2, 2, 1);
    auto freqs = make_frequencies<double>(cfg.rope);
    Parameters<double> p = init_parameters<double>(cfg, 5);
    randomize_parameters(p, 5, 0.1);
    Rng rng(3);
    auto seq = tiny_sequence(rng, cfg.token_channels());
    auto out1 = forward(p, seq, 0.7, cfg, freqs);
    auto out2 = forward(p, seq, 0.7, cfg, freqs);
    EXPECT_EQ(out1.data, out2.data);  // bit-identical
}

TEST(ModelForward, HeadPermutationInvariance) {
    ModelConfig cfg = make_model_config(16, 2, 1, 1);
    auto freqs = make_frequencies<double>(cfg.rope);
    Parameters<double> p = zero_parameters<double>(cfg);
    randomize_parameters(p, 7, 0.2);
    Rng rng(11);
    auto seq = tiny_sequence(rng, cfg.token_channels());
    auto base = forward(p, seq, 0.4, cfg, freqs);

    // Swap the two heads: output columns of w_q/w_k/w_v and biases, plus the
    // matching input rows of w_o.
    const int hd = cfg.head_dim();
    Parameters<double> q = p;
    auto& blk = q.blocks[0];
    auto swap_out_cols = [&](Matrix<double>& w, std::vector<double>& b) {
        for (int r = 0; r < w.rows; ++r)
            for (int c = 0; c < hd; ++c) std::swap(w.at(r, c), w.at(r, hd + c));
        for (int c = 0; c < hd; ++c) std::swap(b[c], b[hd + c]);
    };
    swap_out_cols(blk.w_q, blk.b_q);
    swap_out_cols(blk.w_k, blk.b_k);
    swap_out_cols(blk.w_v, blk.b_v);
    for (int c = 0; c < hd; ++c)
        for (int j = 0; j < cfg.d_model; ++j) std::swap(blk.w_o.at(c, j), blk.w_o.at(hd + c, j));

    auto permuted = forward(q, seq, 0.4, cfg, freqs);
    for (size_t i = 0; i < base.data.size(); ++i)
        EXPECT_NEAR(base.data[i], permuted.data[i], 1e-12);
}

TEST(ModelForward, ZeroFrequencyHookIgnoresPositions) {
    ModelConfig cfg = make_model_config(16, 2, 2, 1);
    auto zfreqs = zero_frequencies<double>(cfg.rope);
    Parameters<double> p = zero_parameters<double>(cfg);
    randomize_parameters(p, 13, 0.2);
    Rng rng(17);
    auto seq = tiny_sequence(rng, cfg.token_channels());
    auto base = forward(p, seq, 0.2, cfg, zfreqs);
    auto doubled = seq;
    for (auto& pos : doubled.positions) pos.y *= 2;
    auto out = forward(p, doubled, 0.2, cfg, zfreqs);
    EXPECT_EQ(base.data, out.data);
}

TEST(ModelForward, ShiftInvarianceEndToEnd) {
    ModelConfig cfg = make_model_config(16, 2, 2, 1);
    auto freqs = make_frequencies<double>(cfg.rope);
    Parameters<double> p = zero_parameters<double>(cfg);
    randomize_parameters(p, 19, 0.2);
    Rng rng(23);
    auto seq = tiny_sequence(rng, cfg.token_channels());
    auto base = forward(p, seq, 0.6, cfg, freqs);
    auto shifted = seq;
    for (auto& pos : shifted.positions) {
        pos.y += 5;
        pos.x += 9;
    }
    auto out = forward(p, shifted, 0.6, cfg, freqs);
    for (size_t i = 0; i < base.data.size(); ++i) EXPECT_NEAR(base.data[i], out.data[i], 1e-6);
}

TEST(ModelForward, SoftmaxRowsSumToOne) {
    ModelConfig cfg = make_model_config(16, 2, 2, 1);
    auto freqs = make_frequencies<double>(cfg.rope);
    Parameters<double> p = zero_parameters<double>(cfg);
    randomize_parameters(p, 29, 0.3);
    Rng rng(31);
    auto seq = tiny_sequence(rng, cfg.token_channels());
    ForwardCache<double> cache;
    forward(p, seq, 0.5, cfg, freqs, cache);
    for (const auto& bc : cache.blocks)
        for (const auto& probs : bc.probs)
            for (int i = 0; i < probs.rows; ++i) {
                double s = 0.0;
                for (int j = 0; j < probs.cols; ++j) s += probs.at(i, j);
                EXPECT_NEAR(s, 1.0, 1e-6);
            }
}

TEST(ModelForward, NonFiniteActivationsFailFastWithBlockIndex) {
    ModelConfig cfg = make_model_config(16, 2, 2, 1);
    auto freqs = make_frequencies<double>(cfg.rope);
    Parameters<double> p = zero_parameters<double>(cfg);
    randomize_parameters(p, 37, 0.2);
    Rng rng(41);
    auto seq = tiny_sequence(rng, cfg.token_channels());
    seq.tokens.at(0, 0) = std::numeric_limits<double>::infinity();
    try {
        forward(p, seq, 0.5, cfg, freqs);
        FAIL() << "expected failure on non-finite activations";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("block 0"), std::string::npos);
    }
}

TEST(ModelForward, TimeOutsideUnitIntervalRejected) {
    ModelConfig cfg = micro_config(1);
    auto freqs = make_frequencies<double>(cfg.rope);
    Parameters<double> p = zero_parameters<double>(cfg);
    Rng rng(42);
    auto seq = tiny_sequence(rng, cfg.token_channels());
    EXPECT_THROW(forward(p, seq, -0.1, cfg, freqs), std::invalid_argument);
    EXPECT_THROW(forward(p, seq, 1.5, cfg, freqs), std::invalid_argument);
}

TEST(ModelForward, InitialVelocityIsZero) {
    ModelConfig cfg = make_model_config(32, 2, 2, 2);
    auto freqs = make_frequencies<double>(cfg.rope);
    Parameters<double> p = init_parameters<double>(cfg, 1234);
    Rng rng(43);
    auto seq = tiny_sequence(rng, cfg.token_channels());
    auto out = forward(p, seq, 0.5, cfg, freqs);
    for (double v : out.data) EXPECT_EQ(v, 0.0);
}

TEST(ModelLoss, ZeroParamsLossEqualsMeanSquaredTarget) {
    // With a zero output projection the prediction is identically zero, so the
    // loss is the mean squared norm of u over masked tokens.
    ModelConfig cfg = micro_config(1);
    auto freqs = make_frequencies<double>(cfg.rope);
    Parameters<double> p = zero_parameters<double>(cfg);

    Rng rng(47);
    LatentGrid<double> x1 = random_grid(rng, 2, 2, cfg.token_channels());
    std::vector<ConditionSpec<double>> conds{
        {random_grid(rng, 2, 2, cfg.token_channels()), 1, true, ConditionRole::model_image}};
    Rng elem_rng(48);
    TrainingBatch<double> batch;
    batch.elements.push_back(
        make_batch_element(TaskSpec{TaskKind::tryon, 1}, conds, x1, elem_rng));

    auto [loss, grads] = loss_and_gradients(p, batch, cfg, freqs);
    const auto& el = batch.elements[0];
    double expect = 0.0;
    for (double u : el.flow.u_target.data) expect += u * u;
    expect /= static_cast<double>(el.flow.u_target.data.size());
    EXPECT_NEAR(loss, expect, 1e-12);
}

TEST(ModelLoss, ThreadCountDoesNotChangeResult) {
    ModelConfig cfg = micro_config(1);
    auto freqs = make_frequencies<double>(cfg.rope);
    Parameters<double> p = init_parameters<double>(cfg, 3);
    randomize_parameters(p, 3, 0.1);

    Rng rng(53);
    TrainingBatch<double> batch;
    for (int e = 0; e < 4; ++e) {
        std::vector<ConditionSpec<double>> conds{
            {random_grid(rng, 2, 2, cfg.token_channels()), 1, true, ConditionRole::model_image}};
        Rng er(mix_seed(7, 0, e));
        batch.elements.push_back(make_batch_element(
            TaskSpec{TaskKind::tryon, 1}, conds, random_grid(rng, 2, 2, cfg.token_channels()),
            er));
    }
    auto [l1, g1] = loss_and_gradients(p, batch, cfg, freqs, 1);
    auto [l2, g2] = loss_and_gradients(p, batch, cfg, freqs, 3);
    EXPECT_EQ(l1, l2);
    auto t1 = tensor_list(g1);
    auto t2 = tensor_list(g2);
    for (size_t k = 0; k < t1.size(); ++k) EXPECT_EQ(*t1[k], *t2[k]);
}
