#pragma once

#include <vector>

#include "slmprop/nn/tape.hpp"

// Differentiable primitives. Every op records its backward on the tape of its inputs; all
// inputs of one call must live on the same tape. No broadcasting beyond the explicit
// bias/row-vector helpers.
namespace slmprop::nn {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var sum(Var a);
Var mean(Var a);
Var reshape(Var a, Shape shape);

Var gelu(Var x);
Var sigmoid(Var x);
Var softmax(Var x, int axis = -1);

// Normalizes over the last axis.
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-6);

// LayerNorm over the channel axis of x[B,C,H,W] at every spatial position.
Var layer_norm_channels(Var x, Var gamma, Var beta, double eps = 1e-6);

// x[..., in] -> x W^T + b, W is [out, in]. `b` may be an unbound Var for no bias.
Var linear(Var x, Var w, Var b);
Var matmul(Var a, Var b);

// Two-layer pointwise MLP: W2 gelu(W1 x + b1) + b2 over the last axis.
Var mlp2(Var x, Var w1, Var b1, Var w2, Var b2);

struct Conv2dOptions {
    int stride = 1;
    int padding = 0;
    int groups = 1;
};

// x[B,Cin,H,W], w[Cout,Cin/groups,kh,kw], b[Cout] (optional). Cross-correlation.
Var conv2d(Var x, Var w, Var b, Conv2dOptions opts = {});

// x[B,Cin,H,W], w[Cin,Cout,kh,kw], b[Cout] (optional); output (H-1)*stride + kh.
Var conv_transpose2d(Var x, Var w, Var b, int stride);

Var nchw_to_tokens(Var x);                        // [B,C,H,W] -> [B,H*W,C]
Var tokens_to_nchw(Var t, int64_t h, int64_t w);  // [B,H*W,C] -> [B,C,H,W]
Var concat_tokens(const std::vector<Var>& parts); // along axis 1 of [B,N_i,C]
Var add_row_vector(Var x, Var v);                 // x[..., C] + v[C]
Var add_channel_vector(Var x, Var v);             // x[B,C,H,W] + v[C]
Var select_row(Var m, int64_t row);               // m[R,C] -> [C]
Var spatial_mean(Var x);                          // [B,C,H,W] -> [B,C]

// Multi-head scaled dot-product attention without projections: q[B,Nq,C], k[B,Nk,C],
// v[B,Nk,C]; per-head scale 1/sqrt(C/heads).
Var scaled_dot_product_attention(Var q, Var k, Var v, int heads);

struct AttentionWeights {
    Var wq, bq, wk, bk, wv, bv, wo, bo;
};

// Projects q/k/v, attends per head, concatenates the heads and applies the output projection.
// Throws EmptyMemory when no keys are supplied (unbound k or v).
Var cross_attention(Var q, Var k, Var v, const AttentionWeights& weights, int heads);

// Mean over all elements of the alpha-balanced sigmoid focal loss.
Var sigmoid_focal_loss(Var logits, const Tensor& target, double alpha = 0.25, double gamma = 2.0);
// 1 - (2 sum(p t) + smooth) / (sum(p) + sum(t) + smooth), p = sigmoid(logits).
// `squared` uses sum(p^2) + sum(t^2) in the denominator instead.
Var soft_dice_loss(Var logits, const Tensor& target, double smooth = 1.0, bool squared = false);
Var bce_with_logits(Var logit, double target);
Var abs_error(Var x, double target);

double gelu_value(double x);

} // namespace slmprop::nn
