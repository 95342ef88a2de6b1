#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "radiopipe/error.hpp"
#include "radiopipe/rng.hpp"
#include "radiopipe/tensor.hpp"
#include "radiopipe/volume.hpp"

namespace radiopipe {

enum class Mode { Train, Eval };

struct Vit3dConfig {
    int image_height = 256;
    int image_width = 256;
    int image_depth = 64;
    int patch_size = 32;
    int embed_dim = 128;
    int num_blocks = 2;
    int num_heads = 16;
    double dropout_rate = 0.1;
    int mlp_hidden_dim = 0;  // 0 means 4 * embed_dim

    int hidden_dim() const { return mlp_hidden_dim > 0 ? mlp_hidden_dim : 4 * embed_dim; }
    int64_t patch_volume() const {
        return static_cast<int64_t>(patch_size) * patch_size * patch_size;
    }
    int num_patches() const {
        return (image_height / patch_size) * (image_width / patch_size) *
               (image_depth / patch_size);
    }
    int num_tokens() const { return num_patches() + 1; }

    void validate() const {
        if (patch_size <= 0 || image_height % patch_size || image_width % patch_size ||
            image_depth % patch_size) {
            fail("IndivisibleDims", "image " + std::to_string(image_height) + "x" +
                                        std::to_string(image_width) + "x" +
                                        std::to_string(image_depth) +
                                        " not divisible by patch " +
                                        std::to_string(patch_size));
        }
        if (embed_dim <= 0 || num_heads <= 0 || embed_dim % num_heads) {
            fail("ShapeMismatch", "embed_dim " + std::to_string(embed_dim) +
                                      " not divisible by num_heads " +
                                      std::to_string(num_heads));
        }
        if (num_blocks <= 0) fail("ShapeMismatch", "num_blocks must be positive");
        if (dropout_rate < 0 || dropout_rate >= 1) {
            fail("UsageError", "dropout_rate must be in [0, 1)");
        }
    }
};

// ----------------------------- parameters -----------------------------

template <typename S = float>
struct BlockParams {
    Tensor<S> ln1_gamma, ln1_beta;
    Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<S> ln2_gamma, ln2_beta;
    Tensor<S> w1, b1, w2, b2;
};

template <typename S = float>
struct Vit3dParams {
    Tensor<S> patch_weight;  // (p^3, d)
    Tensor<S> patch_bias;    // (d)
    Tensor<S> class_token;   // (1, d)
    Tensor<S> pos_embed;     // (N+1, d)
    std::vector<BlockParams<S>> blocks;
    Tensor<S> norm_gamma, norm_beta;  // final layer norm
    Tensor<S> head_weight;            // (d, 1)
    Tensor<S> head_bias;              // (1)

    static Vit3dParams zeros(const Vit3dConfig& cfg) {
        cfg.validate();
        const int d = cfg.embed_dim;
        const int hidden = cfg.hidden_dim();
        Vit3dParams p;
        p.patch_weight = Tensor<S>::zeros({static_cast<int>(cfg.patch_volume()), d});
        p.patch_bias = Tensor<S>::zeros({d});
        p.class_token = Tensor<S>::zeros({1, d});
        p.pos_embed = Tensor<S>::zeros({cfg.num_tokens(), d});
        p.blocks.resize(static_cast<size_t>(cfg.num_blocks));
        for (auto& b : p.blocks) {
            b.ln1_gamma = Tensor<S>::zeros({d});
            b.ln1_beta = Tensor<S>::zeros({d});
            b.wq = Tensor<S>::zeros({d, d});
            b.bq = Tensor<S>::zeros({d});
            b.wk = Tensor<S>::zeros({d, d});
            b.bk = Tensor<S>::zeros({d});
            b.wv = Tensor<S>::zeros({d, d});
            b.bv = Tensor<S>::zeros({d});
            b.wo = Tensor<S>::zeros({d, d});
            b.bo = Tensor<S>::zeros({d});
            b.ln2_gamma = Tensor<S>::zeros({d});
            b.ln2_beta = Tensor<S>::zeros({d});
            b.w1 = Tensor<S>::zeros({d, hidden});
            b.b1 = Tensor<S>::zeros({hidden});
            b.w2 = Tensor<S>::zeros({hidden, d});
            b.b2 = Tensor<S>::zeros({d});
        }
        p.norm_gamma = Tensor<S>::zeros({d});
        p.norm_beta = Tensor<S>::zeros({d});
        p.head_weight = Tensor<S>::zeros({d, 1});
        p.head_bias = Tensor<S>::zeros({1});
        return p;
    }

    // Canonical tensor enumeration; checkpoint manifests and the optimizer
    // both follow this order.
    template <typename Fn>
    void for_each(Fn&& fn) {
        fn("patch_embed.weight", patch_weight);
        fn("patch_embed.bias", patch_bias);
        fn("class_token", class_token);
        fn("pos_embed", pos_embed);
        for (size_t i = 0; i < blocks.size(); ++i) {
            const std::string prefix = "blocks." + std::to_string(i) + ".";
            auto& b = blocks[i];
            fn(prefix + "ln1.gamma", b.ln1_gamma);
            fn(prefix + "ln1.beta", b.ln1_beta);
            fn(prefix + "attn.q.weight", b.wq);
            fn(prefix + "attn.q.bias", b.bq);
            fn(prefix + "attn.k.weight", b.wk);
            fn(prefix + "attn.k.bias", b.bk);
            fn(prefix + "attn.v.weight", b.wv);
            fn(prefix + "attn.v.bias", b.bv);
            fn(prefix + "attn.out.weight", b.wo);
            fn(prefix + "attn.out.bias", b.bo);
            fn(prefix + "ln2.gamma", b.ln2_gamma);
            fn(prefix + "ln2.beta", b.ln2_beta);
            fn(prefix + "mlp.fc1.weight", b.w1);
            fn(prefix + "mlp.fc1.bias", b.b1);
            fn(prefix + "mlp.fc2.weight", b.w2);
            fn(prefix + "mlp.fc2.bias", b.b2);
        }
        fn("norm.gamma", norm_gamma);
        fn("norm.beta", norm_beta);
        fn("head.weight", head_weight);
        fn("head.bias", head_bias);
    }

    template <typename Fn>
    void for_each(Fn&& fn) const {
        const_cast<Vit3dParams*>(this)->for_each(
            [&](const std::string& name, Tensor<S>& t) { fn(name, std::as_const(t)); });
    }
};

// Truncated-normal weights, unit layer-norm scales, zero everything else.
template <typename S>
Vit3dParams<S> init_params(const Vit3dConfig& cfg, Rng& rng) {
    Vit3dParams<S> p = Vit3dParams<S>::zeros(cfg);
    p.for_each([&](const std::string& name, Tensor<S>& t) {
        const bool is_weight =
            name.ends_with(".weight") || name == "class_token";
        const bool is_scale = name.ends_with(".gamma");
        if (is_weight) {
            for (S& x : t.data) x = static_cast<S>(rng.truncated_normal(0.02));
        } else if (is_scale) {
            for (S& x : t.data) x = S(1);
        }
        // biases, beta, pos_embed stay zero
    });
    return p;
}

// ----------------------------- patchify -----------------------------

// Cubes enumerated depth-major then row-major, each cube flattened the same
// way, so the map is a fixed voxel permutation.
template <typename S = float>
Tensor<S> patchify(const Volume& v, int p) {
    if (p <= 0 || v.height % p || v.width % p || v.depth % p) {
        fail("IndivisibleDims", "volume " + std::to_string(v.height) + "x" +
                                    std::to_string(v.width) + "x" + std::to_string(v.depth) +
                                    " not divisible by patch " + std::to_string(p));
    }
    const int gh = v.height / p, gw = v.width / p, gd = v.depth / p;
    const int n = gh * gw * gd;
    const int pv = p * p * p;
    Tensor<S> out = Tensor<S>::zeros({n, pv});
    for (int pd = 0; pd < gd; ++pd) {
        for (int ph = 0; ph < gh; ++ph) {
            for (int pw = 0; pw < gw; ++pw) {
                const int row = (pd * gh + ph) * gw + pw;
                S* dst = &out.data[static_cast<size_t>(row) * pv];
                for (int dz = 0; dz < p; ++dz) {
                    for (int dh = 0; dh < p; ++dh) {
                        for (int dw = 0; dw < p; ++dw) {
                            dst[(dz * p + dh) * p + dw] = static_cast<S>(
                                v.at(ph * p + dh, pw * p + dw, pd * p + dz));
                        }
                    }
                }
            }
        }
    }
    return out;
}

template <typename S = float>
Volume unpatchify(const Tensor<S>& patches, int height, int width, int depth, int p) {
    if (p <= 0 || height % p || width % p || depth % p) {
        fail("IndivisibleDims", "target dims not divisible by patch");
    }
    const int gh = height / p, gw = width / p, gd = depth / p;
    const int pv = p * p * p;
    if (patches.rows() != gh * gw * gd || patches.cols() != pv) {
        fail("ShapeMismatch", "patch tensor " + detail::shape_string(patches.shape) +
                                  " does not tile " + std::to_string(height) + "x" +
                                  std::to_string(width) + "x" + std::to_string(depth));
    }
    Volume v = Volume::zeros(height, width, depth);
    for (int pd = 0; pd < gd; ++pd) {
        for (int ph = 0; ph < gh; ++ph) {
            for (int pw = 0; pw < gw; ++pw) {
                const int row = (pd * gh + ph) * gw + pw;
                const S* src = &patches.data[static_cast<size_t>(row) * pv];
                for (int dz = 0; dz < p; ++dz) {
                    for (int dh = 0; dh < p; ++dh) {
                        for (int dw = 0; dw < p; ++dw) {
                            v.at(ph * p + dh, pw * p + dw, pd * p + dz) =
                                static_cast<float>(src[(dz * p + dh) * p + dw]);
                        }
                    }
                }
            }
        }
    }
    return v;
}

// embed_patches: linear map + bias, class token prepended, positions added.
template <typename S>
Tensor<S> embed_patches(const Tensor<S>& patches, const Vit3dParams<S>& params) {
    if (patches.cols() != params.patch_weight.rows()) {
        fail("ShapeMismatch", "patch width " + std::to_string(patches.cols()) +
                                  " vs embedding input " +
                                  std::to_string(params.patch_weight.rows()));
    }
    const int n = patches.rows();
    const int d = params.patch_weight.cols();
    if (params.pos_embed.rows() != n + 1) {
        fail("ShapeMismatch", "pos_embed rows " + std::to_string(params.pos_embed.rows()) +
                                  " vs tokens " + std::to_string(n + 1));
    }
    Tensor<S> projected = matmul(patches, params.patch_weight);
    add_bias_rows(projected, params.patch_bias);
    Tensor<S> tokens = Tensor<S>::zeros({n + 1, d});
    for (int j = 0; j < d; ++j) tokens.at(0, j) = params.class_token.at(0, j);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) tokens.at(i + 1, j) = projected.at(i, j);
    }
    for (int i = 0; i < n + 1; ++i) {
        for (int j = 0; j < d; ++j) tokens.at(i, j) += params.pos_embed.at(i, j);
    }
    return tokens;
}

// ----------------------------- layer norm -----------------------------

template <typename S>
struct LayerNormCache {
    Tensor<S> x_hat;
    std::vector<S> inv_std;
};

template <typename S>
Tensor<S> layer_norm_forward(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                             LayerNormCache<S>& cache, S eps = S(1e-5)) {
    const int rows = x.rows(), d = x.cols();
    cache.x_hat = Tensor<S>::zeros({rows, d});
    cache.inv_std.assign(static_cast<size_t>(rows), S(0));
    Tensor<S> out = Tensor<S>::zeros({rows, d});
    for (int i = 0; i < rows; ++i) {
        S mean = S(0);
        for (int j = 0; j < d; ++j) mean += x.at(i, j);
        mean /= static_cast<S>(d);
        S var = S(0);
        for (int j = 0; j < d; ++j) {
            const S c = x.at(i, j) - mean;
            var += c * c;
        }
        var /= static_cast<S>(d);
        const S inv = S(1) / std::sqrt(var + eps);
        cache.inv_std[static_cast<size_t>(i)] = inv;
        for (int j = 0; j < d; ++j) {
            const S xh = (x.at(i, j) - mean) * inv;
            cache.x_hat.at(i, j) = xh;
            out.at(i, j) = gamma.data[static_cast<size_t>(j)] * xh +
                           beta.data[static_cast<size_t>(j)];
        }
    }
    return out;
}

template <typename S>
Tensor<S> layer_norm_backward(const Tensor<S>& dout, const Tensor<S>& gamma,
                              const LayerNormCache<S>& cache, Tensor<S>& dgamma,
                              Tensor<S>& dbeta) {
    const int rows = dout.rows(), d = dout.cols();
    Tensor<S> dx = Tensor<S>::zeros({rows, d});
    for (int i = 0; i < rows; ++i) {
        S sum_dxhat = S(0), sum_dxhat_xhat = S(0);
        for (int j = 0; j < d; ++j) {
            const S g = dout.at(i, j);
            const S xh = cache.x_hat.at(i, j);
            dbeta.data[static_cast<size_t>(j)] += g;
            dgamma.data[static_cast<size_t>(j)] += g * xh;
            const S dxh = g * gamma.data[static_cast<size_t>(j)];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh;
        }
        const S inv = cache.inv_std[static_cast<size_t>(i)];
        const S inv_d = S(1) / static_cast<S>(d);
        for (int j = 0; j < d; ++j) {
            const S dxh = dout.at(i, j) * gamma.data[static_cast<size_t>(j)];
            dx.at(i, j) = inv * (dxh - sum_dxhat * inv_d -
                                 cache.x_hat.at(i, j) * sum_dxhat_xhat * inv_d);
        }
    }
    return dx;
}

// ----------------------------- attention -----------------------------

template <typename S>
struct AttentionCache {
    Tensor<S> x, q, k, v;
    Tensor<S> attn;    // (heads, T, T) flattened
    Tensor<S> concat;  // (T, d) heads side by side
};

template <typename S>
struct AttentionGrads {
    Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename S>
Tensor<S> attention_forward(const Tensor<S>& x, const BlockParams<S>& p, int heads,
                            AttentionCache<S>& cache) {
    const int t = x.rows(), d = x.cols();
    if (d % heads) fail("ShapeMismatch", "width not divisible by head count");
    const int hd = d / heads;
    const S scale = S(1) / std::sqrt(static_cast<S>(hd));

    cache.x = x;
    cache.q = matmul(x, p.wq);
    add_bias_rows(cache.q, p.bq);
    cache.k = matmul(x, p.wk);
    add_bias_rows(cache.k, p.bk);
    cache.v = matmul(x, p.wv);
    add_bias_rows(cache.v, p.bv);
    cache.attn = Tensor<S>::zeros({heads, t, t});
    cache.concat = Tensor<S>::zeros({t, d});

    std::vector<S> row(static_cast<size_t>(t));
    for (int h = 0; h < heads; ++h) {
        const int off = h * hd;
        S* attn_h = &cache.attn.data[static_cast<size_t>(h) * t * t];
        for (int i = 0; i < t; ++i) {
            S row_max = -std::numeric_limits<S>::infinity();
            for (int j = 0; j < t; ++j) {
                S s = S(0);
                for (int c = 0; c < hd; ++c) s += cache.q.at(i, off + c) * cache.k.at(j, off + c);
                s *= scale;
                row[static_cast<size_t>(j)] = s;
                row_max = std::max(row_max, s);
            }
            S denom = S(0);
            for (int j = 0; j < t; ++j) {
                const S e = std::exp(row[static_cast<size_t>(j)] - row_max);
                row[static_cast<size_t>(j)] = e;
                denom += e;
            }
            for (int j = 0; j < t; ++j) {
                attn_h[static_cast<size_t>(i) * t + j] = row[static_cast<size_t>(j)] / denom;
            }
            for (int c = 0; c < hd; ++c) {
                S acc = S(0);
                for (int j = 0; j < t; ++j) {
                    acc += attn_h[static_cast<size_t>(i) * t + j] * cache.v.at(j, off + c);
                }
                cache.concat.at(i, off + c) = acc;
            }
        }
    }
    Tensor<S> out = matmul(cache.concat, p.wo);
    add_bias_rows(out, p.bo);
    return out;
}

template <typename S>
Tensor<S> attention_backward(const Tensor<S>& dout, const BlockParams<S>& p, int heads,
                             const AttentionCache<S>& cache, AttentionGrads<S>& grads) {
    const int t = cache.x.rows(), d = cache.x.cols();
    const int hd = d / heads;
    const S scale = S(1) / std::sqrt(static_cast<S>(hd));

    grads.bo = column_sums(dout);
    grads.wo = matmul_tn(cache.concat, dout);
    const Tensor<S> dconcat = matmul_nt(dout, p.wo);

    Tensor<S> dq = Tensor<S>::zeros({t, d});
    Tensor<S> dk = Tensor<S>::zeros({t, d});
    Tensor<S> dv = Tensor<S>::zeros({t, d});
    std::vector<S> dattn(static_cast<size_t>(t));
    for (int h = 0; h < heads; ++h) {
        const int off = h * hd;
        const S* attn_h = &cache.attn.data[static_cast<size_t>(h) * t * t];
        for (int i = 0; i < t; ++i) {
            // through the attn x V product
            S dot = S(0);
            for (int j = 0; j < t; ++j) {
                S g = S(0);
                for (int c = 0; c < hd; ++c) g += dconcat.at(i, off + c) * cache.v.at(j, off + c);
                dattn[static_cast<size_t>(j)] = g;
                dot += g * attn_h[static_cast<size_t>(i) * t + j];
            }
            for (int j = 0; j < t; ++j) {
                const S a = attn_h[static_cast<size_t>(i) * t + j];
                for (int c = 0; c < hd; ++c) {
                    dv.at(j, off + c) += a * dconcat.at(i, off + c);
                }
                // softmax backward, then the scaled dot product
                const S dscore = a * (dattn[static_cast<size_t>(j)] - dot) * scale;
                for (int c = 0; c < hd; ++c) {
                    dq.at(i, off + c) += dscore * cache.k.at(j, off + c);
                    dk.at(j, off + c) += dscore * cache.q.at(i, off + c);
                }
            }
        }
    }

    grads.wq = matmul_tn(cache.x, dq);
    grads.bq = column_sums(dq);
    grads.wk = matmul_tn(cache.x, dk);
    grads.bk = column_sums(dk);
    grads.wv = matmul_tn(cache.x, dv);
    grads.bv = column_sums(dv);

    Tensor<S> dx = matmul_nt(dq, p.wq);
    const Tensor<S> dxk = matmul_nt(dk, p.wk);
    const Tensor<S> dxv = matmul_nt(dv, p.wv);
    for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += dxk.data[i] + dxv.data[i];
    return dx;
}

// ----------------------------- mlp -----------------------------

// tanh-form GELU, fixed project-wide.
template <typename S>
S gelu(S x) {
    const S c = static_cast<S>(std::sqrt(2.0 / std::numbers::pi));
    const S u = c * (x + S(0.044715) * x * x * x);
    return S(0.5) * x * (S(1) + std::tanh(u));
}

template <typename S>
S gelu_grad(S x) {
    const S c = static_cast<S>(std::sqrt(2.0 / std::numbers::pi));
    const S u = c * (x + S(0.044715) * x * x * x);
    const S th = std::tanh(u);
    const S du = c * (S(1) + S(3) * S(0.044715) * x * x);
    return S(0.5) * (S(1) + th) + S(0.5) * x * (S(1) - th * th) * du;
}

template <typename S>
struct MlpCache {
    Tensor<S> x, pre, act;
};

template <typename S>
struct MlpGrads {
    Tensor<S> w1, b1, w2, b2;
};

template <typename S>
Tensor<S> mlp_forward(const Tensor<S>& x, const BlockParams<S>& p, MlpCache<S>& cache) {
    cache.x = x;
    cache.pre = matmul(x, p.w1);
    add_bias_rows(cache.pre, p.b1);
    cache.act = cache.pre;
    for (S& v : cache.act.data) v = gelu(v);
    Tensor<S> out = matmul(cache.act, p.w2);
    add_bias_rows(out, p.b2);
    return out;
}

template <typename S>
Tensor<S> mlp_backward(const Tensor<S>& dout, const BlockParams<S>& p, const MlpCache<S>& cache,
                       MlpGrads<S>& grads) {
    grads.b2 = column_sums(dout);
    grads.w2 = matmul_tn(cache.act, dout);
    Tensor<S> dact = matmul_nt(dout, p.w2);
    for (size_t i = 0; i < dact.data.size(); ++i) dact.data[i] *= gelu_grad(cache.pre.data[i]);
    grads.b1 = column_sums(dact);
    grads.w1 = matmul_tn(cache.x, dact);
    return matmul_nt(dact, p.w1);
}

// ----------------------------- dropout -----------------------------

// Inverted dropout scales: 1/(1-rate) for kept entries, 0 for dropped ones,
// so the expectation is exactly the input.
template <typename S>
std::vector<S> dropout_mask(size_t n, double rate, Rng& rng) {
    std::vector<S> mask(n, S(1));
    if (rate <= 0) return mask;
    const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
    for (size_t i = 0; i < n; ++i) {
        mask[i] = rng.bernoulli(rate) ? S(0) : keep_scale;
    }
    return mask;
}

// ----------------------------- encoder block -----------------------------

template <typename S>
struct BlockCache {
    LayerNormCache<S> ln1;
    AttentionCache<S> attn;
    std::vector<S> mask_attn;
    LayerNormCache<S> ln2;
    MlpCache<S> mlp;
    std::vector<S> mask_mlp;
};

template <typename S>
struct BlockGrads {
    Tensor<S> ln1_gamma, ln1_beta;
    AttentionGrads<S> attn;
    Tensor<S> ln2_gamma, ln2_beta;
    MlpGrads<S> mlp;
};

// Pre-norm residual wiring: x + Drop(MHA(LN1(x))), then + Drop(MLP(LN2(.))).
template <typename S>
Tensor<S> encoder_block_forward(const Tensor<S>& x, const BlockParams<S>& p, int heads,
                                double dropout_rate, Mode mode, Rng& rng,
                                BlockCache<S>& cache) {
    const bool drop = mode == Mode::Train && dropout_rate > 0;

    Tensor<S> normed = layer_norm_forward(x, p.ln1_gamma, p.ln1_beta, cache.ln1);
    Tensor<S> attn_out = attention_forward(normed, p, heads, cache.attn);
    cache.mask_attn.clear();
    if (drop) {
        cache.mask_attn = dropout_mask<S>(attn_out.data.size(), dropout_rate, rng);
        for (size_t i = 0; i < attn_out.data.size(); ++i) attn_out.data[i] *= cache.mask_attn[i];
    }
    Tensor<S> mid = x;
    for (size_t i = 0; i < mid.data.size(); ++i) mid.data[i] += attn_out.data[i];

    Tensor<S> normed2 = layer_norm_forward(mid, p.ln2_gamma, p.ln2_beta, cache.ln2);
    Tensor<S> mlp_out = mlp_forward(normed2, p, cache.mlp);
    cache.mask_mlp.clear();
    if (drop) {
        cache.mask_mlp = dropout_mask<S>(mlp_out.data.size(), dropout_rate, rng);
        for (size_t i = 0; i < mlp_out.data.size(); ++i) mlp_out.data[i] *= cache.mask_mlp[i];
    }
    Tensor<S> out = mid;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += mlp_out.data[i];
    return out;
}

template <typename S>
Tensor<S> encoder_block_backward(const Tensor<S>& dout, const BlockParams<S>& p, int heads,
                                 const BlockCache<S>& cache, BlockGrads<S>& grads) {
    const int d = dout.cols();
    grads.ln1_gamma = Tensor<S>::zeros({d});
    grads.ln1_beta = Tensor<S>::zeros({d});
    grads.ln2_gamma = Tensor<S>::zeros({d});
    grads.ln2_beta = Tensor<S>::zeros({d});

    Tensor<S> dmlp = dout;
    if (!cache.mask_mlp.empty()) {
        for (size_t i = 0; i < dmlp.data.size(); ++i) dmlp.data[i] *= cache.mask_mlp[i];
    }
    Tensor<S> dnormed2 = mlp_backward(dmlp, p, cache.mlp, grads.mlp);
    Tensor<S> dmid = layer_norm_backward(dnormed2, p.ln2_gamma, cache.ln2, grads.ln2_gamma,
                                         grads.ln2_beta);
    for (size_t i = 0; i < dmid.data.size(); ++i) dmid.data[i] += dout.data[i];

    Tensor<S> dattn = dmid;
    if (!cache.mask_attn.empty()) {
        for (size_t i = 0; i < dattn.data.size(); ++i) dattn.data[i] *= cache.mask_attn[i];
    }
    Tensor<S> dnormed = attention_backward(dattn, p, heads, cache.attn, grads.attn);
    Tensor<S> dx = layer_norm_backward(dnormed, p.ln1_gamma, cache.ln1, grads.ln1_gamma,
                                       grads.ln1_beta);
    for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += dmid.data[i];
    return dx;
}

// ----------------------------- full model -----------------------------

template <typename S = float>
struct Vit3dModel {
    Vit3dConfig config;
    Vit3dParams<S> params;

    Vit3dModel() = default;
    explicit Vit3dModel(Vit3dConfig cfg) : config(cfg), params(Vit3dParams<S>::zeros(cfg)) {}

    struct Output {
        S logit;
        double prob;
    };

    Output forward(const Volume& v, Mode mode, Rng& rng) {
        if (v.height != config.image_height || v.width != config.image_width ||
            v.depth != config.image_depth) {
            fail("ShapeMismatch", "volume " + std::to_string(v.height) + "x" +
                                      std::to_string(v.width) + "x" + std::to_string(v.depth) +
                                      " vs config " + std::to_string(config.image_height) + "x" +
                                      std::to_string(config.image_width) + "x" +
                                      std::to_string(config.image_depth));
        }
        patches_ = patchify<S>(v, config.patch_size);
        Tensor<S> tokens = embed_patches(patches_, params);

        const bool drop = mode == Mode::Train && config.dropout_rate > 0;
        mask_embed_.clear();
        if (drop) {
            mask_embed_ = dropout_mask<S>(tokens.data.size(), config.dropout_rate, rng);
            for (size_t i = 0; i < tokens.data.size(); ++i) tokens.data[i] *= mask_embed_[i];
        }

        block_caches_.assign(params.blocks.size(), BlockCache<S>{});
        for (size_t b = 0; b < params.blocks.size(); ++b) {
            tokens = encoder_block_forward(tokens, params.blocks[b], config.num_heads,
                                           config.dropout_rate, mode, rng, block_caches_[b]);
        }
        final_in_rows_ = tokens.rows();
        Tensor<S> normed = layer_norm_forward(tokens, params.norm_gamma, params.norm_beta,
                                              final_ln_);
        class_row_ = Tensor<S>::zeros({1, tokens.cols()});
        for (int j = 0; j < tokens.cols(); ++j) class_row_.at(0, j) = normed.at(0, j);

        S logit = params.head_bias.data[0];
        for (int j = 0; j < tokens.cols(); ++j) {
            logit += class_row_.at(0, j) * params.head_weight.at(j, 0);
        }
        recorded_ = mode == Mode::Train;

        // sigmoid in double, clamped away from the endpoints
        const double z = static_cast<double>(logit);
        double prob = 1.0 / (1.0 + std::exp(-z));
        prob = std::min(std::max(prob, 1e-12), 1.0 - 1e-12);
        return Output{logit, prob};
    }

    // Gradients of a scalar loss given dLoss/dlogit; shapes mirror params.
    Vit3dParams<S> backward(S dlogit) {
        if (!recorded_) fail("NoRecordedForward", "backward requires a train-mode forward");
        Vit3dParams<S> g = Vit3dParams<S>::zeros(config);
        const int d = config.embed_dim;
        const int t = final_in_rows_;

        g.head_bias.data[0] = dlogit;
        Tensor<S> dnormed = Tensor<S>::zeros({t, d});
        for (int j = 0; j < d; ++j) {
            g.head_weight.at(j, 0) = class_row_.at(0, j) * dlogit;
            dnormed.at(0, j) = params.head_weight.at(j, 0) * dlogit;
        }
        Tensor<S> dtokens = layer_norm_backward(dnormed, params.norm_gamma, final_ln_,
                                                g.norm_gamma, g.norm_beta);

        for (size_t b = params.blocks.size(); b-- > 0;) {
            BlockGrads<S> bg;
            dtokens = encoder_block_backward(dtokens, params.blocks[b], config.num_heads,
                                             block_caches_[b], bg);
            auto& dst = g.blocks[b];
            dst.ln1_gamma = std::move(bg.ln1_gamma);
            dst.ln1_beta = std::move(bg.ln1_beta);
            dst.wq = std::move(bg.attn.wq);
            dst.bq = std::move(bg.attn.bq);
            dst.wk = std::move(bg.attn.wk);
            dst.bk = std::move(bg.attn.bk);
            dst.wv = std::move(bg.attn.wv);
            dst.bv = std::move(bg.attn.bv);
            dst.wo = std::move(bg.attn.wo);
            dst.bo = std::move(bg.attn.bo);
            dst.ln2_gamma = std::move(bg.ln2_gamma);
            dst.ln2_beta = std::move(bg.ln2_beta);
            dst.w1 = std::move(bg.mlp.w1);
            dst.b1 = std::move(bg.mlp.b1);
            dst.w2 = std::move(bg.mlp.w2);
            dst.b2 = std::move(bg.mlp.b2);
        }

        if (!mask_embed_.empty()) {
            for (size_t i = 0; i < dtokens.data.size(); ++i) dtokens.data[i] *= mask_embed_[i];
        }
        // tokens = [class_token; patches x W + b] + pos_embed
        g.pos_embed = dtokens;
        for (int j = 0; j < d; ++j) g.class_token.at(0, j) = dtokens.at(0, j);
        Tensor<S> dprojected = Tensor<S>::zeros({t - 1, d});
        for (int i = 0; i < t - 1; ++i) {
            for (int j = 0; j < d; ++j) dprojected.at(i, j) = dtokens.at(i + 1, j);
        }
        g.patch_bias = column_sums(dprojected);
        g.patch_weight = matmul_tn(patches_, dprojected);
        return g;
    }

private:
    Tensor<S> patches_;
    std::vector<S> mask_embed_;
    std::vector<BlockCache<S>> block_caches_;
    LayerNormCache<S> final_ln_;
    Tensor<S> class_row_;
    int final_in_rows_ = 0;
    bool recorded_ = false;
};

}  // namespace radiopipe
