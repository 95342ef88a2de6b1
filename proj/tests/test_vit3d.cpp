#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "radiopipe/error.hpp"
#include "radiopipe/rng.hpp"
#include "radiopipe/vit3d.hpp"

using namespace radiopipe;

namespace {

Volume random_volume(int h, int w, int d, uint64_t seed) {
    Rng rng(seed);
    Volume v = Volume::zeros(h, w, d);
    for (auto& x : v.voxels) x = static_cast<float>(rng.uniform());
    return v;
}

template <typename S>
Tensor<S> random_tensor(std::vector<int> shape, Rng& rng, double scale = 0.5) {
    Tensor<S> t = Tensor<S>::zeros(std::move(shape));
    for (auto& x : t.data) x = static_cast<S>(rng.normal() * scale);
    return t;
}

// Scalar probe loss sum(c .* f(x)) turns a tensor-valued map into something
// finite differences can grip; c is a fixed random direction.
template <typename Forward>
double probe(const Tensor<double>& c, Forward&& forward) {
    const Tensor<double> out = forward();
    double loss = 0.0;
    for (size_t i = 0; i < out.data.size(); ++i) loss += c.data[i] * out.data[i];
    return loss;
}

// Guarded comparison: relative for healthy gradients, absolute for entries
// near zero, both far above central-difference noise at h = 1e-6.
template <typename Forward>
void check_grad_fd(Tensor<double>& param, const Tensor<double>& analytic, const Tensor<double>& c,
                   Forward&& forward, double tol = 1e-6) {
    REQUIRE(analytic.data.size() == param.data.size());
    const double h = 1e-6;
    for (size_t i = 0; i < param.data.size(); ++i) {
        const double saved = param.data[i];
        param.data[i] = saved + h;
        const double up = probe(c, forward);
        param.data[i] = saved - h;
        const double down = probe(c, forward);
        param.data[i] = saved;
        const double fd = (up - down) / (2.0 * h);
        const double a = analytic.data[i];
        CHECK(std::abs(fd - a) <= tol * std::max({1.0, std::abs(fd), std::abs(a)}));
    }
}

}  // namespace

// ----------------------------- patchify -----------------------------

TEST_CASE("patchify obeys the shape law at working scale") {
    const Volume v = Volume::zeros(256, 256, 64);
    const Tensor<float> p32 = patchify(v, 32);
    CHECK(p32.rows() == 128);
    CHECK(p32.cols() == 32768);
    const Tensor<float> p16 = patchify(v, 16);
    CHECK(p16.rows() == 1024);
    CHECK(p16.cols() == 4096);
}

TEST_CASE("unpatchify inverts patchify on random volumes") {
    for (const int p : {2, 4}) {
        const Volume v = random_volume(8, 4, 6, 60 + static_cast<uint64_t>(p));
        const Tensor<float> patches = patchify(v, p);
        const Volume back = unpatchify(patches, 8, 4, 6, p);
        CHECK(back.voxels == v.voxels);
    }
}

TEST_CASE("patchify layout: cube order is depth-major, cube-local flattening z,h,w") {
    // 4x4x4 volume with voxel value = linear storage index, patch 2.
    Volume v = Volume::zeros(4, 4, 4);
    for (size_t i = 0; i < v.voxels.size(); ++i) v.voxels[i] = static_cast<float>(i);
    const Tensor<float> t = patchify(v, 2);
    REQUIRE(t.rows() == 8);
    REQUIRE(t.cols() == 8);
    // Patch row for cube (ph,pw,pd) is (pd*2+ph)*2+pw; entry for offset
    // (dh,dw,dz) is (dz*2+dh)*2+dw. Cross-check a handful against at().
    CHECK(t.at(0, 0) == v.at(0, 0, 0));
    CHECK(t.at(0, 1) == v.at(0, 1, 0));
    CHECK(t.at(0, 2) == v.at(1, 0, 0));
    CHECK(t.at(0, 4) == v.at(0, 0, 1));
    CHECK(t.at(1, 0) == v.at(0, 2, 0));   // cube one step right
    CHECK(t.at(2, 0) == v.at(2, 0, 0));   // cube one step down
    CHECK(t.at(4, 0) == v.at(0, 0, 2));   // cube one step deep
    CHECK(t.at(7, 7) == v.at(3, 3, 3));
}

TEST_CASE("patchify rejects indivisible dims") {
    const Volume v = Volume::zeros(6, 6, 6);
    CHECK_THROWS_WITH_AS(patchify(v, 4), doctest::Contains("IndivisibleDims"), Error);
    CHECK_THROWS_WITH_AS(patchify(v, 0), doctest::Contains("IndivisibleDims"), Error);
    const Tensor<float> patches = Tensor<float>::zeros({8, 8});
    CHECK_THROWS_WITH_AS(unpatchify(patches, 4, 4, 2, 2), doctest::Contains("ShapeMismatch"),
                         Error);
}

// ----------------------------- config -----------------------------

TEST_CASE("config validation names the offending constraint") {
    Vit3dConfig cfg;
    cfg.image_height = 30;
    CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("IndivisibleDims"), Error);
    cfg = Vit3dConfig{};
    cfg.embed_dim = 30;  // not divisible by 16 heads
    CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("ShapeMismatch"), Error);
    cfg = Vit3dConfig{};
    cfg.dropout_rate = 1.0;
    CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("UsageError"), Error);
    CHECK_NOTHROW(Vit3dConfig{}.validate());
}

// ----------------------------- embedding -----------------------------

TEST_CASE("patch embedding equals the naive projection plus positions") {
    Vit3dConfig cfg;
    cfg.image_height = cfg.image_width = cfg.image_depth = 4;
    cfg.patch_size = 2;
    cfg.embed_dim = 6;
    cfg.num_heads = 2;
    Rng rng(70);
    Vit3dParams<double> params = init_params<double>(cfg, rng);
    const Volume v = random_volume(4, 4, 4, 71);
    const Tensor<double> patches = patchify<double>(v, 2);
    const Tensor<double> tokens = embed_patches(patches, params);

    REQUIRE(tokens.rows() == 9);
    REQUIRE(tokens.cols() == 6);
    for (int j = 0; j < 6; ++j) {
        CHECK(tokens.at(0, j) ==
              doctest::Approx(params.class_token.at(0, j) + params.pos_embed.at(0, j))
                  .epsilon(1e-12));
    }
    for (int i = 0; i < 8; ++i) {
        for (int j = 0; j < 6; ++j) {
            double acc = params.patch_bias.data[static_cast<size_t>(j)];
            for (int k = 0; k < 8; ++k) acc += patches.at(i, k) * params.patch_weight.at(k, j);
            acc += params.pos_embed.at(i + 1, j);
            CHECK(tokens.at(i + 1, j) == doctest::Approx(acc).epsilon(1e-9));
        }
    }
}

// ----------------------------- layer norm -----------------------------

TEST_CASE("layer norm matches the frozen two-point example") {
    Tensor<double> x = Tensor<double>::zeros({1, 2});
    x.at(0, 0) = 1.0;
    x.at(0, 1) = 3.0;
    Tensor<double> gamma = Tensor<double>::zeros({2});
    Tensor<double> beta = Tensor<double>::zeros({2});
    gamma.data = {1.0, 1.0};
    LayerNormCache<double> cache;
    const Tensor<double> out = layer_norm_forward(x, gamma, beta, cache);
    // mean 2, population variance 1: x_hat = +/- 1/sqrt(1 + 1e-5)
    CHECK(out.at(0, 0) == doctest::Approx(-0.9999950000374997).epsilon(1e-12));
    CHECK(out.at(0, 1) == doctest::Approx(+0.9999950000374997).epsilon(1e-12));
}

TEST_CASE("layer norm maps constant rows to beta") {
    Tensor<double> x = Tensor<double>::zeros({2, 3});
    for (auto& v : x.data) v = 7.25;
    Tensor<double> gamma = Tensor<double>::zeros({3});
    Tensor<double> beta = Tensor<double>::zeros({3});
    gamma.data = {2.0, 2.0, 2.0};
    beta.data = {0.5, -0.5, 1.5};
    LayerNormCache<double> cache;
    const Tensor<double> out = layer_norm_forward(x, gamma, beta, cache);
    for (int i = 0; i < 2; ++i) {
        CHECK(out.at(i, 0) == doctest::Approx(0.5).epsilon(1e-9));
        CHECK(out.at(i, 1) == doctest::Approx(-0.5).epsilon(1e-9));
        CHECK(out.at(i, 2) == doctest::Approx(1.5).epsilon(1e-9));
    }
}

TEST_CASE("layer norm backward agrees with finite differences") {
    Rng rng(72);
    Tensor<double> x = random_tensor<double>({3, 5}, rng);
    Tensor<double> gamma = random_tensor<double>({5}, rng, 0.3);
    for (auto& g : gamma.data) g += 1.0;
    Tensor<double> beta = random_tensor<double>({5}, rng, 0.3);
    const Tensor<double> c = random_tensor<double>({3, 5}, rng);

    LayerNormCache<double> cache;
    layer_norm_forward(x, gamma, beta, cache);
    Tensor<double> dgamma = Tensor<double>::zeros({5});
    Tensor<double> dbeta = Tensor<double>::zeros({5});
    const Tensor<double> dx = layer_norm_backward(c, gamma, cache, dgamma, dbeta);

    auto forward = [&] {
        LayerNormCache<double> scratch;
        return layer_norm_forward(x, gamma, beta, scratch);
    };
    check_grad_fd(x, dx, c, forward);
    check_grad_fd(gamma, dgamma, c, forward);
    check_grad_fd(beta, dbeta, c, forward);
}

// ----------------------------- attention -----------------------------

namespace {

BlockParams<double> random_block(const Vit3dConfig& cfg, Rng& rng) {
    Vit3dParams<double> p = init_params<double>(cfg, rng);
    return p.blocks[0];
}

}  // namespace

TEST_CASE("attention rows are probability distributions") {
    Vit3dConfig cfg;
    cfg.image_height = cfg.image_width = cfg.image_depth = 4;
    cfg.patch_size = 2;
    cfg.embed_dim = 8;
    cfg.num_heads = 2;
    cfg.num_blocks = 1;
    Rng rng(73);
    const BlockParams<double> p = random_block(cfg, rng);
    const Tensor<double> x = random_tensor<double>({5, 8}, rng);
    AttentionCache<double> cache;
    attention_forward(x, p, 2, cache);
    REQUIRE(cache.attn.shape == std::vector<int>{2, 5, 5});
    for (int h = 0; h < 2; ++h) {
        for (int i = 0; i < 5; ++i) {
            double row_sum = 0.0;
            for (int j = 0; j < 5; ++j) {
                const double a = cache.attn.data[static_cast<size_t>((h * 5 + i) * 5 + j)];
                CHECK(a >= 0.0);
                row_sum += a;
            }
            CHECK(row_sum == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("attention with zero value path broadcasts the output bias") {
    Vit3dConfig cfg;
    cfg.image_height = cfg.image_width = cfg.image_depth = 4;
    cfg.patch_size = 2;
    cfg.embed_dim = 8;
    cfg.num_heads = 2;
    cfg.num_blocks = 1;
    Rng rng(74);
    BlockParams<double> p = random_block(cfg, rng);
    for (auto& v : p.wv.data) v = 0.0;
    for (auto& v : p.bv.data) v = 0.0;
    for (size_t j = 0; j < p.bo.data.size(); ++j) p.bo.data[j] = 0.125 * static_cast<double>(j);
    const Tensor<double> x = random_tensor<double>({4, 8}, rng);
    AttentionCache<double> cache;
    const Tensor<double> out = attention_forward(x, p, 2, cache);
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 8; ++j) {
            CHECK(out.at(i, j) == doctest::Approx(0.125 * j).epsilon(1e-12));
        }
    }
}

TEST_CASE("attention backward agrees with finite differences") {
    Vit3dConfig cfg;
    cfg.image_height = cfg.image_width = cfg.image_depth = 4;
    cfg.patch_size = 2;
    cfg.embed_dim = 8;
    cfg.num_heads = 2;
    cfg.num_blocks = 1;
    Rng rng(75);
    BlockParams<double> p = random_block(cfg, rng);
    Tensor<double> x = random_tensor<double>({5, 8}, rng);
    const Tensor<double> c = random_tensor<double>({5, 8}, rng);

    AttentionCache<double> cache;
    attention_forward(x, p, 2, cache);
    AttentionGrads<double> grads;
    const Tensor<double> dx = attention_backward(c, p, 2, cache, grads);

    auto forward = [&] {
        AttentionCache<double> scratch;
        return attention_forward(x, p, 2, scratch);
    };
    check_grad_fd(x, dx, c, forward);
    check_grad_fd(p.wq, grads.wq, c, forward);
    check_grad_fd(p.bq, grads.bq, c, forward);
    check_grad_fd(p.wk, grads.wk, c, forward);
    check_grad_fd(p.bk, grads.bk, c, forward);
    check_grad_fd(p.wv, grads.wv, c, forward);
    check_grad_fd(p.bv, grads.bv, c, forward);
    check_grad_fd(p.wo, grads.wo, c, forward);
    check_grad_fd(p.bo, grads.bo, c, forward);
}

// ----------------------------- mlp -----------------------------

TEST_CASE("gelu matches frozen tanh-form values") {
    CHECK(gelu(1.0) == doctest::Approx(0.8411919906082768).epsilon(1e-12));
    CHECK(gelu(-2.0) == doctest::Approx(-0.04540230591222494).epsilon(1e-12));
    CHECK(gelu(0.5) == doctest::Approx(0.34571400982514394).epsilon(1e-12));
    CHECK(gelu(0.0) == 0.0);
    // derivative sanity: symmetric finite difference
    const double h = 1e-6;
    for (const double x : {-2.0, -0.3, 0.0, 0.7, 1.9}) {
        const double fd = (gelu(x + h) - gelu(x - h)) / (2 * h);
        CHECK(gelu_grad(x) == doctest::Approx(fd).epsilon(1e-6));
    }
}

TEST_CASE("mlp with zero weights yields its output bias") {
    Vit3dConfig cfg;
    cfg.image_height = cfg.image_width = cfg.image_depth = 4;
    cfg.patch_size = 2;
    cfg.embed_dim = 8;
    cfg.num_heads = 2;
    cfg.num_blocks = 1;
    BlockParams<double> p = Vit3dParams<double>::zeros(cfg).blocks[0];
    Rng rng(76);
    const Tensor<double> x = random_tensor<double>({3, 8}, rng);
    MlpCache<double> cache;
    const Tensor<double> out = mlp_forward(x, p, cache);
    for (double v : out.data) CHECK(v == 0.0);
}

TEST_CASE("mlp backward agrees with finite differences") {
    Vit3dConfig cfg;
    cfg.image_height = cfg.image_width = cfg.image_depth = 4;
    cfg.patch_size = 2;
    cfg.embed_dim = 8;
    cfg.num_heads = 2;
    cfg.num_blocks = 1;
    cfg.mlp_hidden_dim = 12;
    Rng rng(77);
    BlockParams<double> p = random_block(cfg, rng);
    Tensor<double> x = random_tensor<double>({4, 8}, rng);
    const Tensor<double> c = random_tensor<double>({4, 8}, rng);

    MlpCache<double> cache;
    mlp_forward(x, p, cache);
    MlpGrads<double> grads;
    const Tensor<double> dx = mlp_backward(c, p, cache, grads);

    auto forward = [&] {
        MlpCache<double> scratch;
        return mlp_forward(x, p, scratch);
    };
    check_grad_fd(x, dx, c, forward);
    check_grad_fd(p.w1, grads.w1, c, forward);
    check_grad_fd(p.b1, grads.b1, c, forward);
    check_grad_fd(p.w2, grads.w2, c, forward);
    check_grad_fd(p.b2, grads.b2, c, forward);
}

// ----------------------------- encoder block -----------------------------

TEST_CASE("block with zero projection outputs reduces to the identity") {
    Vit3dConfig cfg;
    cfg.image_height = cfg.image_width = cfg.image_depth = 4;
    cfg.patch_size = 2;
    cfg.embed_dim = 8;
    cfg.num_heads = 2;
    cfg.num_blocks = 1;
    Rng rng(78);
    BlockParams<double> p = random_block(cfg, rng);
    // Both residual branches end in a linear map; zeroing those weights and
    // biases leaves only the skip connections.
    for (auto& v : p.wo.data) v = 0.0;
    for (auto& v : p.bo.data) v = 0.0;
    for (auto& v : p.w2.data) v = 0.0;
    for (auto& v : p.b2.data) v = 0.0;
    const Tensor<double> x = random_tensor<double>({5, 8}, rng);
    Rng drop_rng(1);
    BlockCache<double> cache;
    const Tensor<double> out =
        encoder_block_forward(x, p, 2, 0.0, Mode::Eval, drop_rng, cache);
    for (size_t i = 0; i < x.data.size(); ++i) {
        CHECK(out.data[i] == doctest::Approx(x.data[i]).epsilon(1e-12));
    }
}

TEST_CASE("block backward agrees with finite differences") {
    Vit3dConfig cfg;
    cfg.image_height = cfg.image_width = cfg.image_depth = 4;
    cfg.patch_size = 2;
    cfg.embed_dim = 8;
    cfg.num_heads = 2;
    cfg.num_blocks = 1;
    Rng rng(79);
    BlockParams<double> p = random_block(cfg, rng);
    Tensor<double> x = random_tensor<double>({5, 8}, rng);
    const Tensor<double> c = random_tensor<double>({5, 8}, rng);

    Rng drop_rng(1);
    BlockCache<double> cache;
    encoder_block_forward(x, p, 2, 0.0, Mode::Train, drop_rng, cache);
    BlockGrads<double> grads;
    const Tensor<double> dx = encoder_block_backward(c, p, 2, cache, grads);

    auto forward = [&] {
        Rng scratch_rng(1);
        BlockCache<double> scratch;
        return encoder_block_forward(x, p, 2, 0.0, Mode::Train, scratch_rng, scratch);
    };
    check_grad_fd(x, dx, c, forward);
    check_grad_fd(p.ln1_gamma, grads.ln1_gamma, c, forward);
    check_grad_fd(p.ln1_beta, grads.ln1_beta, c, forward);
    check_grad_fd(p.wq, grads.attn.wq, c, forward);
    check_grad_fd(p.wv, grads.attn.wv, c, forward);
    check_grad_fd(p.ln2_gamma, grads.ln2_gamma, c, forward);
    check_grad_fd(p.w1, grads.mlp.w1, c, forward);
    check_grad_fd(p.b2, grads.mlp.b2, c, forward);
}

// ----------------------------- dropout -----------------------------

TEST_CASE("dropout mask is inverted: entries are 0 or 1/(1-rate), mean 1") {
    Rng rng(80);
    const double rate = 0.3;
    const auto mask = dropout_mask<float>(1000000, rate, rng);
    const float keep = static_cast<float>(1.0 / 0.7);
    double sum = 0.0;
    size_t zeros = 0;
    for (float m : mask) {
        CHECK((m == 0.0f || m == keep));
        sum += m;
        zeros += m == 0.0f;
    }
    CHECK(sum / static_cast<double>(mask.size()) == doctest::Approx(1.0).epsilon(0.02));
    CHECK(static_cast<double>(zeros) / static_cast<double>(mask.size()) ==
          doctest::Approx(rate).epsilon(0.02));
}

TEST_CASE("dropout rate zero consumes no randomness") {
    Rng a(81), b(81);
    dropout_mask<float>(512, 0.0, a);
    CHECK(a.next_u64() == b.next_u64());
}

// ----------------------------- full model -----------------------------

namespace {

Vit3dConfig tiny_config(double dropout = 0.0) {
    Vit3dConfig cfg;
    cfg.image_height = cfg.image_width = cfg.image_depth = 8;
    cfg.patch_size = 4;
    cfg.embed_dim = 8;
    cfg.num_blocks = 1;
    cfg.num_heads = 2;
    cfg.dropout_rate = dropout;
    cfg.mlp_hidden_dim = 12;
    return cfg;
}

}  // namespace

TEST_CASE("zero-parameter model emits probability one half") {
    Vit3dModel<float> model(tiny_config());
    const Volume v = random_volume(8, 8, 8, 90);
    Rng rng(1);
    const auto out = model.forward(v, Mode::Eval, rng);
    CHECK(out.logit == 0.0f);
    CHECK(out.prob == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("head bias shifts the logit by exactly its value") {
    Vit3dModel<float> model(tiny_config());
    model.params.head_bias.data[0] = 1.75f;
    const Volume v = random_volume(8, 8, 8, 91);
    Rng rng(1);
    const auto out = model.forward(v, Mode::Eval, rng);
    CHECK(out.logit == 1.75f);
    CHECK(out.prob == doctest::Approx(1.0 / (1.0 + std::exp(-1.75))).epsilon(1e-9));
}

TEST_CASE("eval forward is deterministic and dropout-free") {
    Vit3dConfig cfg = tiny_config(0.5);  // aggressive dropout must not fire in eval
    Vit3dModel<float> model(cfg);
    Rng init(92);
    model.params = init_params<float>(cfg, init);
    const Volume v = random_volume(8, 8, 8, 93);
    Rng r1(1), r2(999);
    const auto a = model.forward(v, Mode::Eval, r1);
    const auto b = model.forward(v, Mode::Eval, r2);
    CHECK(a.logit == b.logit);
    // eval must not consume randomness
    Rng r3(7), r4(7);
    model.forward(v, Mode::Eval, r3);
    CHECK(r3.next_u64() == r4.next_u64());
}

TEST_CASE("train forward with dropout off matches eval bitwise") {
    Vit3dConfig cfg = tiny_config(0.0);
    Vit3dModel<float> model(cfg);
    Rng init(94);
    model.params = init_params<float>(cfg, init);
    const Volume v = random_volume(8, 8, 8, 95);
    Rng r1(1), r2(1);
    const auto train_out = model.forward(v, Mode::Train, r1);
    const auto eval_out = model.forward(v, Mode::Eval, r2);
    CHECK(train_out.logit == eval_out.logit);
}

TEST_CASE("with zero positional embeddings the logit ignores patch order") {
    Vit3dConfig cfg = tiny_config();
    Vit3dModel<float> model(cfg);
    Rng init(96);
    model.params = init_params<float>(cfg, init);
    for (auto& x : model.params.pos_embed.data) x = 0.0f;

    const Volume v = random_volume(8, 8, 8, 97);
    // Swap two patch cubes: without positions the token set is unchanged.
    Tensor<float> patches = patchify(v, 4);
    for (int j = 0; j < patches.cols(); ++j) std::swap(patches.at(1, j), patches.at(6, j));
    const Volume swapped = unpatchify(patches, 8, 8, 8, 4);

    Rng r1(1), r2(1);
    const auto a = model.forward(v, Mode::Eval, r1);
    const auto b = model.forward(swapped, Mode::Eval, r2);
    CHECK(std::abs(a.logit - b.logit) < 1e-5f);
}

TEST_CASE("model rejects mismatched volume shapes") {
    Vit3dModel<float> model(tiny_config());
    const Volume v = random_volume(8, 8, 4, 98);
    Rng rng(1);
    CHECK_THROWS_WITH_AS(model.forward(v, Mode::Eval, rng), doctest::Contains("ShapeMismatch"),
                         Error);
}

TEST_CASE("backward requires a recorded train forward") {
    Vit3dModel<float> model(tiny_config());
    CHECK_THROWS_WITH_AS(model.backward(1.0f), doctest::Contains("NoRecordedForward"), Error);
    const Volume v = random_volume(8, 8, 8, 99);
    Rng rng(1);
    model.forward(v, Mode::Eval, rng);
    CHECK_THROWS_WITH_AS(model.backward(1.0f), doctest::Contains("NoRecordedForward"), Error);
    model.forward(v, Mode::Train, rng);
    CHECK_NOTHROW(model.backward(1.0f));
}

TEST_CASE("zero upstream gradient produces all-zero parameter gradients") {
    Vit3dConfig cfg = tiny_config();
    Vit3dModel<float> model(cfg);
    Rng init(100);
    model.params = init_params<float>(cfg, init);
    const Volume v = random_volume(8, 8, 8, 101);
    Rng rng(1);
    model.forward(v, Mode::Train, rng);
    Vit3dParams<float> g = model.backward(0.0f);
    g.for_each([](const std::string&, const Tensor<float>& t) {
        for (float x : t.data) CHECK(x == 0.0f);
    });
}

TEST_CASE("head bias gradient is exactly the upstream dlogit") {
    Vit3dConfig cfg = tiny_config();
    Vit3dModel<float> model(cfg);
    Rng init(102);
    model.params = init_params<float>(cfg, init);
    const Volume v = random_volume(8, 8, 8, 103);
    Rng rng(1);
    model.forward(v, Mode::Train, rng);
    const Vit3dParams<float> g = model.backward(-0.375f);
    CHECK(g.head_bias.data[0] == -0.375f);
}

TEST_CASE("whole-model gradients agree with finite differences in double") {
    const Vit3dConfig cfg = tiny_config();
    Vit3dModel<double> model(cfg);
    Rng init(104);
    model.params = init_params<double>(cfg, init);
    const Volume v = random_volume(8, 8, 8, 105);

    Rng fwd_rng(1);
    model.forward(v, Mode::Train, fwd_rng);
    Vit3dParams<double> analytic = model.backward(1.0);

    Rng coord_rng(106);
    const double h = 1e-6;
    model.params.for_each([&](const std::string& name, Tensor<double>& t) {
        Tensor<double>* grad = nullptr;
        analytic.for_each([&](const std::string& gname, Tensor<double>& gt) {
            if (gname == name) grad = &gt;
        });
        REQUIRE(grad != nullptr);
        for (int rep = 0; rep < 6; ++rep) {
            const size_t i = static_cast<size_t>(coord_rng.below(t.data.size()));
            const double saved = t.data[i];
            Rng up_rng(1);
            t.data[i] = saved + h;
            const double up = static_cast<double>(model.forward(v, Mode::Train, up_rng).logit);
            Rng down_rng(1);
            t.data[i] = saved - h;
            const double down = static_cast<double>(model.forward(v, Mode::Train, down_rng).logit);
            t.data[i] = saved;
            const double fd = (up - down) / (2.0 * h);
            const double a = grad->data[i];
            CAPTURE(name);
            CAPTURE(i);
            CHECK(std::abs(fd - a) <= 1e-6 * std::max({1.0, std::abs(fd), std::abs(a)}));
        }
    });
}
