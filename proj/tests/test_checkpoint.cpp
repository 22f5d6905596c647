#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "ropecast/checkpoint.hpp"
#include "ropecast/train.hpp"

using namespace ropecast;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const char* name) {
    fs::path dir = fs::temp_directory_path() / "ropecast_tests";
    fs::create_directories(dir);
    fs::path p = dir / name;
    fs::remove(p);
    return p;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
    const fs::path path = temp_file("roundtrip.rpk");
    Checkpoint<float> ckpt;
    ckpt.meta = {{"kind", "test"}, {"step", 42}};
    Rng rng(1);
    TensorEntry<float> t1{"alpha", {2, 3}, {}};
    for (int i = 0; i < 6; ++i) t1.data.push_back(static_cast<float>(rng.next_normal()));
    TensorEntry<float> t2{"beta", {4}, {0.f, -1.f, 3.25f, 1e-30f}};
    ckpt.tensors = {t1, t2};
    save_checkpoint(path, ckpt);

    auto loaded = load_checkpoint<float>(path);
    EXPECT_EQ(loaded.meta.at("step").get<int>(), 42);
    ASSERT_EQ(loaded.tensors.size(), 2u);
    EXPECT_EQ(loaded.tensors[0].name, "alpha");
    EXPECT_EQ(loaded.tensors[0].shape, (std::vector<int>{2, 3}));
    EXPECT_EQ(loaded.tensors[0].data, t1.data);
    EXPECT_EQ(loaded.tensors[1].data, t2.data);
}

TEST(Checkpoint, ChecksumDetectsCorruption) {
    const fs::path path = temp_file("corrupt.rpk");
    Checkpoint<float> ckpt;
    ckpt.meta = {{"kind", "test"}};
    ckpt.tensors = {{"t", {2}, {1.f, 2.f}}};
    save_checkpoint(path, ckpt);
    // Flip one byte in the middle.
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(30);
    char c = 0;
    f.read(&c, 1);
    f.seekp(30);
    c = static_cast<char>(c ^ 0xff);
    f.write(&c, 1);
    f.close();
    EXPECT_THROW(load_checkpoint<float>(path), std::runtime_error);
}

TEST(Checkpoint, MissingFileReported) {
    EXPECT_THROW(load_checkpoint<float>("/nonexistent/nowhere.rpk"), std::runtime_error);
}

TEST(Checkpoint, DtypeMismatchRejected) {
    const fs::path path = temp_file("dtype.rpk");
    Checkpoint<float> ckpt;
    ckpt.meta = {{"kind", "test"}};
    ckpt.tensors = {{"t", {1}, {1.f}}};
    save_checkpoint(path, ckpt);
    EXPECT_THROW(load_checkpoint<double>(path), std::runtime_error);
}

TEST(Checkpoint, TrainStateRoundTrip) {
    const fs::path path = temp_file("state.rpk");
    ModelConfig cfg = make_model_config(16, 2, 1, 2);
    TrainConfig tcfg;
    tcfg.seed = 9;
    TrainState<float> state;
    state.params = init_parameters<float>(cfg, 9);
    state.opt = AdamWState<float>::init(cfg);
    Rng rng(2);
    for_each_tensor(state.opt.m, [&](const std::string&, std::vector<float>& v, bool) {
        for (auto& x : v) x = static_cast<float>(rng.next_normal());
    });
    state.step = 17;
    state.opt.step = 17;
    save_train_checkpoint(path, state, cfg, tcfg);

    auto loaded = load_train_checkpoint<float>(path, cfg);
    EXPECT_EQ(loaded.step, 17);
    auto a = tensor_list(state.params);
    auto b = tensor_list(loaded.params);
    for (size_t k = 0; k < a.size(); ++k) EXPECT_EQ(*a[k], *b[k]);
    auto ma = tensor_list(state.opt.m);
    auto mb = tensor_list(loaded.opt.m);
    for (size_t k = 0; k < ma.size(); ++k) EXPECT_EQ(*ma[k], *mb[k]);

    // Config is recoverable from the header.
    ModelConfig peeked = checkpoint_model_config(path);
    EXPECT_EQ(peeked.d_model, cfg.d_model);
    EXPECT_EQ(peeked.rope.d_w, cfg.rope.d_w);
}

TEST(Checkpoint, ShapeMismatchRejected) {
    const fs::path path = temp_file("shape.rpk");
    ModelConfig cfg = make_model_config(16, 2, 1, 2);
    TrainConfig tcfg;
    TrainState<float> state;
    state.params = init_parameters<float>(cfg, 1);
    state.opt = AdamWState<float>::init(cfg);
    save_train_checkpoint(path, state, cfg, tcfg);
    ModelConfig other = make_model_config(32, 2, 1, 2);
    EXPECT_THROW(load_train_checkpoint<float>(path, other), std::runtime_error);
}
