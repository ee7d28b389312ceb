#include "slmprop/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

#include <Eigen/Dense>

#include "slmprop/error.hpp"

namespace slmprop::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using CStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

Tape& tape_of(const Var& a) {
    if (!a.valid()) throw Error(ErrorCode::ShapeMismatch, "unbound Var passed to op");
    return *a.tape();
}

void same_tape(const Var& a, const Var& b) {
    if (b.valid() && a.tape() != b.tape()) throw Error(ErrorCode::ShapeMismatch, "inputs on different tapes");
}

void require_shape(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw Error(ErrorCode::ShapeMismatch,
                    std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

void accumulate(Tape& t, const Var& v, const Tensor& g) {
    if (!t.requires_grad(v)) return;
    auto& buf = t.grad_buffer(v);
    for (int64_t i = 0; i < g.numel(); ++i) buf[i] += g[i];
}

double sigmoid_value(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// log(1 + exp(x)) without overflow.
double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

constexpr double kGeluC = 0.7978845608028654; // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double gelu_grad(double x) {
    const double u = kGeluC * (x + kGeluA * x * x * x);
    const double th = std::tanh(u);
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

// Valid output index range [lo, hi) for input index o*stride - pad + k inside [0, n).
std::pair<int64_t, int64_t> valid_range(int64_t out_n, int64_t in_n, int stride, int pad, int64_t k) {
    int64_t lo = 0;
    const int64_t off = pad - k;
    if (off > 0) lo = (off + stride - 1) / stride;
    int64_t hi_num = in_n - 1 + pad - k;
    int64_t hi = hi_num < 0 ? -1 : hi_num / stride;
    hi = std::min<int64_t>(hi, out_n - 1);
    return {lo, hi + 1};
}

} // namespace

double gelu_value(double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

Var add(Var a, Var b) {
    same_tape(a, b);
    require_shape(a, b, "add");
    Tensor out = a.value();
    const auto& bv = b.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
    return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
        accumulate(t, a, g);
        accumulate(t, b, g);
    });
}

Var sub(Var a, Var b) {
    same_tape(a, b);
    require_shape(a, b, "sub");
    Tensor out = a.value();
    const auto& bv = b.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
    return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
        accumulate(t, a, g);
        if (t.requires_grad(b)) {
            auto& buf = t.grad_buffer(b);
            for (int64_t i = 0; i < g.numel(); ++i) buf[i] -= g[i];
        }
    });
}

Var mul(Var a, Var b) {
    same_tape(a, b);
    require_shape(a, b, "mul");
    Tensor out = a.value();
    const auto& bv = b.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
    return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
        const auto& av = t.value(a);
        const auto& bv = t.value(b);
        if (t.requires_grad(a)) {
            auto& buf = t.grad_buffer(a);
            for (int64_t i = 0; i < g.numel(); ++i) buf[i] += g[i] * bv[i];
        }
        if (t.requires_grad(b)) {
            auto& buf = t.grad_buffer(b);
            for (int64_t i = 0; i < g.numel(); ++i) buf[i] += g[i] * av[i];
        }
    });
}

Var scale(Var a, double s) {
    Tensor out = a.value();
    for (auto& x : out.data()) x *= s;
    return tape_of(a).record(std::move(out), {a}, [a, s](Tape& t, const Tensor& g) {
        auto& buf = t.grad_buffer(a);
        for (int64_t i = 0; i < g.numel(); ++i) buf[i] += g[i] * s;
    });
}

Var sum(Var a) {
    double s = 0.0;
    for (double x : a.value().data()) s += x;
    return tape_of(a).record(Tensor::scalar(s), {a}, [a](Tape& t, const Tensor& g) {
        auto& buf = t.grad_buffer(a);
        for (auto& x : buf.data()) x += g[0];
    });
}

Var mean(Var a) {
    const double n = static_cast<double>(a.value().numel());
    return scale(sum(a), 1.0 / n);
}

Var reshape(Var a, Shape shape) {
    Tensor out = a.value().reshaped(std::move(shape));
    return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
        auto& buf = t.grad_buffer(a);
        for (int64_t i = 0; i < g.numel(); ++i) buf[i] += g[i];
    });
}

Var gelu(Var x) {
    Tensor out = x.value();
    for (auto& v : out.data()) v = gelu_value(v);
    return tape_of(x).record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
        const auto& xv = t.value(x);
        auto& buf = t.grad_buffer(x);
        for (int64_t i = 0; i < g.numel(); ++i) buf[i] += g[i] * gelu_grad(xv[i]);
    });
}

Var sigmoid(Var x) {
    Tensor out = x.value();
    for (auto& v : out.data()) v = sigmoid_value(v);
    return tape_of(x).record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
        const auto& xv = t.value(x);
        auto& buf = t.grad_buffer(x);
        for (int64_t i = 0; i < g.numel(); ++i) {
            const double s = sigmoid_value(xv[i]);
            buf[i] += g[i] * s * (1.0 - s);
        }
    });
}

Var softmax(Var x, int axis) {
    const auto& shape = x.shape();
    const int rank = static_cast<int>(shape.size());
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) throw Error(ErrorCode::ShapeMismatch, "softmax axis out of range");
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
    for (int i = axis + 1; i < rank; ++i) inner *= shape[static_cast<size_t>(i)];
    const int64_t n = shape[static_cast<size_t>(axis)];

    Tensor out(shape);
    const auto& xv = x.value();
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * n * inner + in;
            double m = -INFINITY;
            for (int64_t j = 0; j < n; ++j) m = std::max(m, xv[base + j * inner]);
            double z = 0.0;
            for (int64_t j = 0; j < n; ++j) {
                const double e = std::exp(xv[base + j * inner] - m);
                out[base + j * inner] = e;
                z += e;
            }
            for (int64_t j = 0; j < n; ++j) out[base + j * inner] /= z;
        }
    }
    auto probs = std::make_shared<Tensor>(out);
    return tape_of(x).record(std::move(out), {x}, [x, probs, outer, inner, n](Tape& t, const Tensor& g) {
        auto& buf = t.grad_buffer(x);
        const auto& p = *probs;
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t in = 0; in < inner; ++in) {
                const int64_t base = o * n * inner + in;
                double dot = 0.0;
                for (int64_t j = 0; j < n; ++j) dot += g[base + j * inner] * p[base + j * inner];
                for (int64_t j = 0; j < n; ++j) {
                    const int64_t idx = base + j * inner;
                    buf[idx] += p[idx] * (g[idx] - dot);
                }
            }
        }
    });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
    same_tape(x, gamma);
    same_tape(x, beta);
    const int64_t c = x.value().dim(-1);
    if (gamma.value().numel() != c || beta.value().numel() != c) {
        throw Error(ErrorCode::ShapeMismatch, "layer_norm: last axis " + std::to_string(c) +
                                                  " vs gamma " + shape_str(gamma.shape()));
    }
    const int64_t rows = x.value().numel() / c;
    const auto& xv = x.value();
    const auto& gv = gamma.value();
    const auto& bv = beta.value();
    Tensor out(x.shape());
    auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(xv.numel()));
    auto rstd = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const double* row = xv.ptr() + r * c;
        double mu = 0.0;
        for (int64_t j = 0; j < c; ++j) mu += row[j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (int64_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(c);
        const double rs = 1.0 / std::sqrt(var + eps);
        (*rstd)[static_cast<size_t>(r)] = rs;
        for (int64_t j = 0; j < c; ++j) {
            const double h = (row[j] - mu) * rs;
            (*xhat)[static_cast<size_t>(r * c + j)] = h;
            out[r * c + j] = gv[j] * h + bv[j];
        }
    }
    return tape_of(x).record(std::move(out), {x, gamma, beta},
                             [x, gamma, beta, xhat, rstd, rows, c](Tape& t, const Tensor& g) {
        const auto& gv = t.value(gamma);
        const bool need_x = t.requires_grad(x);
        Tensor* gx = need_x ? &t.grad_buffer(x) : nullptr;
        Tensor* gg = t.requires_grad(gamma) ? &t.grad_buffer(gamma) : nullptr;
        Tensor* gb = t.requires_grad(beta) ? &t.grad_buffer(beta) : nullptr;
        std::vector<double> dxhat(static_cast<size_t>(c));
        for (int64_t r = 0; r < rows; ++r) {
            const double* h = xhat->data() + r * c;
            const double* dy = g.ptr() + r * c;
            double m1 = 0.0, m2 = 0.0;
            for (int64_t j = 0; j < c; ++j) {
                if (gg) (*gg)[j] += dy[j] * h[j];
                if (gb) (*gb)[j] += dy[j];
                dxhat[static_cast<size_t>(j)] = dy[j] * gv[j];
                m1 += dxhat[static_cast<size_t>(j)];
                m2 += dxhat[static_cast<size_t>(j)] * h[j];
            }
            if (!gx) continue;
            m1 /= static_cast<double>(c);
            m2 /= static_cast<double>(c);
            const double rs = (*rstd)[static_cast<size_t>(r)];
            for (int64_t j = 0; j < c; ++j) {
                (*gx)[r * c + j] += rs * (dxhat[static_cast<size_t>(j)] - m1 - h[j] * m2);
            }
        }
    });
}

Var layer_norm_channels(Var x, Var gamma, Var beta, double eps) {
    if (x.shape().size() != 4) throw Error(ErrorCode::ShapeMismatch, "layer_norm_channels expects [B,C,H,W]");
    return tokens_to_nchw(layer_norm(nchw_to_tokens(x), gamma, beta, eps), x.dim(2), x.dim(3));
}

Var linear(Var x, Var w, Var b) {
    same_tape(x, w);
    same_tape(x, b);
    if (w.value().rank() != 2) throw Error(ErrorCode::ShapeMismatch, "linear: weight must be 2-D");
    const int64_t out_f = w.dim(0);
    const int64_t in_f = w.dim(1);
    if (x.value().dim(-1) != in_f) {
        throw Error(ErrorCode::ShapeMismatch,
                    "linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
    }
    if (b.valid() && b.value().numel() != out_f) throw Error(ErrorCode::ShapeMismatch, "linear: bias size");
    const int64_t rows = x.value().numel() / in_f;
    Shape out_shape = x.shape();
    out_shape.back() = out_f;
    Tensor out(out_shape);
    CMapMat X(x.value().ptr(), rows, in_f);
    CMapMat W(w.value().ptr(), out_f, in_f);
    MapMat Y(out.ptr(), rows, out_f);
    Y.noalias() = X * W.transpose();
    if (b.valid()) {
        const auto& bv = b.value();
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < out_f; ++j) Y(r, j) += bv[j];
    }
    std::vector<Var> inputs{x, w};
    if (b.valid()) inputs.push_back(b);
    return tape_of(x).record(std::move(out), inputs, [x, w, b, rows, in_f, out_f](Tape& t, const Tensor& g) {
        CMapMat G(g.ptr(), rows, out_f);
        if (t.requires_grad(x)) {
            MapMat GX(t.grad_buffer(x).ptr(), rows, in_f);
            GX.noalias() += G * CMapMat(t.value(w).ptr(), out_f, in_f);
        }
        if (t.requires_grad(w)) {
            MapMat GW(t.grad_buffer(w).ptr(), out_f, in_f);
            GW.noalias() += G.transpose() * CMapMat(t.value(x).ptr(), rows, in_f);
        }
        if (b.valid() && t.requires_grad(b)) {
            auto& gb = t.grad_buffer(b);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < out_f; ++j) gb[j] += G(r, j);
        }
    });
}

Var matmul(Var a, Var b) {
    same_tape(a, b);
    if (a.value().rank() != 2 || b.value().rank() != 2 || a.dim(1) != b.dim(0)) {
        throw Error(ErrorCode::ShapeMismatch, "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out({m, n});
    MapMat(out.ptr(), m, n).noalias() = CMapMat(a.value().ptr(), m, k) * CMapMat(b.value().ptr(), k, n);
    return tape_of(a).record(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, const Tensor& g) {
        CMapMat G(g.ptr(), m, n);
        if (t.requires_grad(a)) {
            MapMat(t.grad_buffer(a).ptr(), m, k).noalias() += G * CMapMat(t.value(b).ptr(), k, n).transpose();
        }
        if (t.requires_grad(b)) {
            MapMat(t.grad_buffer(b).ptr(), k, n).noalias() += CMapMat(t.value(a).ptr(), m, k).transpose() * G;
        }
    });
}

Var mlp2(Var x, Var w1, Var b1, Var w2, Var b2) {
    return linear(gelu(linear(x, w1, b1)), w2, b2);
}

Var conv2d(Var x, Var w, Var b, Conv2dOptions opts) {
    same_tape(x, w);
    same_tape(x, b);
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    if (xs.size() != 4 || ws.size() != 4) throw Error(ErrorCode::ShapeMismatch, "conv2d expects 4-D input and weight");
    const int64_t B = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
    const int64_t Cout = ws[0], kh = ws[2], kw = ws[3];
    const int groups = opts.groups;
    if (groups < 1 || Cin % groups != 0 || Cout % groups != 0 || ws[1] != Cin / groups) {
        throw Error(ErrorCode::ShapeMismatch, "conv2d: channels " + shape_str(xs) + " vs weight " +
                                                  shape_str(ws) + " groups " + std::to_string(groups));
    }
    if (opts.stride < 1 || opts.padding < 0 || H + 2 * opts.padding < kh || W + 2 * opts.padding < kw) {
        throw Error(ErrorCode::ShapeMismatch, "conv2d: kernel does not fit input with given padding");
    }
    if (b.valid() && b.value().numel() != Cout) throw Error(ErrorCode::ShapeMismatch, "conv2d: bias size");
    const int s = opts.stride, p = opts.padding;
    const int64_t Ho = (H + 2 * p - kh) / s + 1;
    const int64_t Wo = (W + 2 * p - kw) / s + 1;
    const int64_t cin_g = Cin / groups, cout_g = Cout / groups;

    Tensor out({B, Cout, Ho, Wo});
    const double* xv = x.value().ptr();
    const double* wv = w.value().ptr();
    for (int64_t bi = 0; bi < B; ++bi) {
        for (int64_t oc = 0; oc < Cout; ++oc) {
            double* op = out.ptr() + (bi * Cout + oc) * Ho * Wo;
            if (b.valid()) std::fill(op, op + Ho * Wo, b.value()[oc]);
            const int64_t gi = oc / cout_g;
            for (int64_t icg = 0; icg < cin_g; ++icg) {
                const int64_t ic = gi * cin_g + icg;
                const double* ip = xv + (bi * Cin + ic) * H * W;
                for (int64_t ky = 0; ky < kh; ++ky) {
                    const auto [oy0, oy1] = valid_range(Ho, H, s, p, ky);
                    for (int64_t kx = 0; kx < kw; ++kx) {
                        const double wk = wv[((oc * cin_g + icg) * kh + ky) * kw + kx];
                        const auto [ox0, ox1] = valid_range(Wo, W, s, p, kx);
                        for (int64_t oy = oy0; oy < oy1; ++oy) {
                            const double* irow = ip + (oy * s - p + ky) * W;
                            double* orow = op + oy * Wo;
                            for (int64_t ox = ox0; ox < ox1; ++ox) orow[ox] += wk * irow[ox * s - p + kx];
                        }
                    }
                }
            }
        }
    }
    std::vector<Var> inputs{x, w};
    if (b.valid()) inputs.push_back(b);
    return tape_of(x).record(std::move(out), inputs,
                             [=](Tape& t, const Tensor& g) {
        const double* xv = t.value(x).ptr();
        const double* wv = t.value(w).ptr();
        double* gx = t.requires_grad(x) ? t.grad_buffer(x).ptr() : nullptr;
        double* gw = t.requires_grad(w) ? t.grad_buffer(w).ptr() : nullptr;
        double* gb = (b.valid() && t.requires_grad(b)) ? t.grad_buffer(b).ptr() : nullptr;
        for (int64_t bi = 0; bi < B; ++bi) {
            for (int64_t oc = 0; oc < Cout; ++oc) {
                const double* gp = g.ptr() + (bi * Cout + oc) * Ho * Wo;
                if (gb) {
                    double acc = 0.0;
                    for (int64_t i = 0; i < Ho * Wo; ++i) acc += gp[i];
                    gb[oc] += acc;
                }
                const int64_t gi = oc / cout_g;
                for (int64_t icg = 0; icg < cin_g; ++icg) {
                    const int64_t ic = gi * cin_g + icg;
                    const double* ip = xv + (bi * Cin + ic) * H * W;
                    double* gip = gx ? gx + (bi * Cin + ic) * H * W : nullptr;
                    for (int64_t ky = 0; ky < kh; ++ky) {
                        const auto [oy0, oy1] = valid_range(Ho, H, s, p, ky);
                        for (int64_t kx = 0; kx < kw; ++kx) {
                            const int64_t widx = ((oc * cin_g + icg) * kh + ky) * kw + kx;
                            const double wk = wv[widx];
                            const auto [ox0, ox1] = valid_range(Wo, W, s, p, kx);
                            double acc = 0.0;
                            for (int64_t oy = oy0; oy < oy1; ++oy) {
                                const int64_t ioff = (oy * s - p + ky) * W;
                                const double* grow = gp + oy * Wo;
                                const double* irow = ip + ioff;
                                for (int64_t ox = ox0; ox < ox1; ++ox) acc += grow[ox] * irow[ox * s - p + kx];
                                if (gip) {
                                    double* girow = gip + ioff;
                                    for (int64_t ox = ox0; ox < ox1; ++ox) girow[ox * s - p + kx] += wk * grow[ox];
                                }
                            }
                            if (gw) gw[widx] += acc;
                        }
                    }
                }
            }
        }
    });
}

Var conv_transpose2d(Var x, Var w, Var b, int stride) {
    same_tape(x, w);
    same_tape(x, b);
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    if (xs.size() != 4 || ws.size() != 4 || ws[0] != xs[1] || stride < 1) {
        throw Error(ErrorCode::ShapeMismatch,
                    "conv_transpose2d: input " + shape_str(xs) + " vs weight " + shape_str(ws));
    }
    const int64_t B = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
    const int64_t Cout = ws[1], kh = ws[2], kw = ws[3];
    if (b.valid() && b.value().numel() != Cout) throw Error(ErrorCode::ShapeMismatch, "conv_transpose2d: bias size");
    const int64_t Ho = (H - 1) * stride + kh;
    const int64_t Wo = (W - 1) * stride + kw;
    Tensor out({B, Cout, Ho, Wo});
    const double* xv = x.value().ptr();
    const double* wv = w.value().ptr();
    for (int64_t bi = 0; bi < B; ++bi) {
        for (int64_t oc = 0; oc < Cout; ++oc) {
            double* op = out.ptr() + (bi * Cout + oc) * Ho * Wo;
            if (b.valid()) std::fill(op, op + Ho * Wo, b.value()[oc]);
            for (int64_t ic = 0; ic < Cin; ++ic) {
                const double* ip = xv + (bi * Cin + ic) * H * W;
                for (int64_t ky = 0; ky < kh; ++ky) {
                    for (int64_t kx = 0; kx < kw; ++kx) {
                        const double wk = wv[((ic * Cout + oc) * kh + ky) * kw + kx];
                        for (int64_t iy = 0; iy < H; ++iy) {
                            double* orow = op + (iy * stride + ky) * Wo + kx;
                            const double* irow = ip + iy * W;
                            for (int64_t ix = 0; ix < W; ++ix) orow[ix * stride] += wk * irow[ix];
                        }
                    }
                }
            }
        }
    }
    std::vector<Var> inputs{x, w};
    if (b.valid()) inputs.push_back(b);
    return tape_of(x).record(std::move(out), inputs, [=](Tape& t, const Tensor& g) {
        const double* xv = t.value(x).ptr();
        const double* wv = t.value(w).ptr();
        double* gx = t.requires_grad(x) ? t.grad_buffer(x).ptr() : nullptr;
        double* gw = t.requires_grad(w) ? t.grad_buffer(w).ptr() : nullptr;
        double* gb = (b.valid() && t.requires_grad(b)) ? t.grad_buffer(b).ptr() : nullptr;
        for (int64_t bi = 0; bi < B; ++bi) {
            for (int64_t oc = 0; oc < Cout; ++oc) {
                const double* gp = g.ptr() + (bi * Cout + oc) * Ho * Wo;
                if (gb) {
                    double acc = 0.0;
                    for (int64_t i = 0; i < Ho * Wo; ++i) acc += gp[i];
                    gb[oc] += acc;
                }
                for (int64_t ic = 0; ic < Cin; ++ic) {
                    const double* ip = xv + (bi * Cin + ic) * H * W;
                    double* gip = gx ? gx + (bi * Cin + ic) * H * W : nullptr;
                    for (int64_t ky = 0; ky < kh; ++ky) {
                        for (int64_t kx = 0; kx < kw; ++kx) {
                            const int64_t widx = ((ic * Cout + oc) * kh + ky) * kw + kx;
                            const double wk = wv[widx];
                            double acc = 0.0;
                            for (int64_t iy = 0; iy < H; ++iy) {
                                const double* grow = gp + (iy * stride + ky) * Wo + kx;
                                const double* irow = ip + iy * W;
                                for (int64_t ix = 0; ix < W; ++ix) acc += grow[ix * stride] * irow[ix];
                                if (gip) {
                                    double* girow = gip + iy * W;
                                    for (int64_t ix = 0; ix < W; ++ix) girow[ix] += wk * grow[ix * stride];
                                }
                            }
                            if (gw) gw[widx] += acc;
                        }
                    }
                }
            }
        }
    });
}

Var nchw_to_tokens(Var x) {
    const auto& s = x.shape();
    if (s.size() != 4) throw Error(ErrorCode::ShapeMismatch, "nchw_to_tokens expects 4-D input");
    const int64_t B = s[0], C = s[1], HW = s[2] * s[3];
    Tensor out({B, HW, C});
    const auto& xv = x.value();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t i = 0; i < HW; ++i) out[(b * HW + i) * C + c] = xv[(b * C + c) * HW + i];
    return tape_of(x).record(std::move(out), {x}, [x, B, C, HW](Tape& t, const Tensor& g) {
        auto& buf = t.grad_buffer(x);
        for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < C; ++c)
                for (int64_t i = 0; i < HW; ++i) buf[(b * C + c) * HW + i] += g[(b * HW + i) * C + c];
    });
}

Var tokens_to_nchw(Var tk, int64_t h, int64_t w) {
    const auto& s = tk.shape();
    if (s.size() != 3 || s[1] != h * w) {
        throw Error(ErrorCode::ShapeMismatch, "tokens_to_nchw: " + shape_str(s) + " vs " + std::to_string(h) +
                                                  "x" + std::to_string(w));
    }
    const int64_t B = s[0], HW = s[1], C = s[2];
    Tensor out({B, C, h, w});
    const auto& tv = tk.value();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < HW; ++i)
            for (int64_t c = 0; c < C; ++c) out[(b * C + c) * HW + i] = tv[(b * HW + i) * C + c];
    return tape_of(tk).record(std::move(out), {tk}, [tk, B, C, HW](Tape& t, const Tensor& g) {
        auto& buf = t.grad_buffer(tk);
        for (int64_t b = 0; b < B; ++b)
            for (int64_t i = 0; i < HW; ++i)
                for (int64_t c = 0; c < C; ++c) buf[(b * HW + i) * C + c] += g[(b * C + c) * HW + i];
    });
}

Var concat_tokens(const std::vector<Var>& parts) {
    if (parts.empty()) throw Error(ErrorCode::EmptyMemory, "concat_tokens of nothing");
    const auto& s0 = parts[0].shape();
    if (s0.size() != 3) throw Error(ErrorCode::ShapeMismatch, "concat_tokens expects [B,N,C] parts");
    const int64_t B = s0[0], C = s0[2];
    int64_t total = 0;
    for (const auto& p : parts) {
        same_tape(parts[0], p);
        const auto& s = p.shape();
        if (s.size() != 3 || s[0] != B || s[2] != C) throw Error(ErrorCode::ShapeMismatch, "concat_tokens part shape");
        total += s[1];
    }
    Tensor out({B, total, C});
    std::vector<int64_t> offsets;
    int64_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const int64_t n = p.dim(1);
        const auto& pv = p.value();
        for (int64_t b = 0; b < B; ++b)
            std::copy(pv.ptr() + b * n * C, pv.ptr() + (b + 1) * n * C, out.ptr() + (b * total + off) * C);
        off += n;
    }
    return tape_of(parts[0]).record(std::move(out), parts, [parts, offsets, B, C, total](Tape& t, const Tensor& g) {
        for (size_t k = 0; k < parts.size(); ++k) {
            if (!t.requires_grad(parts[k])) continue;
            auto& buf = t.grad_buffer(parts[k]);
            const int64_t n = buf.dim(1);
            for (int64_t b = 0; b < B; ++b) {
                const double* src = g.ptr() + (b * total + offsets[k]) * C;
                double* dst = buf.ptr() + b * n * C;
                for (int64_t i = 0; i < n * C; ++i) dst[i] += src[i];
            }
        }
    });
}

Var add_row_vector(Var x, Var v) {
    same_tape(x, v);
    const int64_t C = x.value().dim(-1);
    if (v.value().numel() != C) throw Error(ErrorCode::ShapeMismatch, "add_row_vector: size mismatch");
    Tensor out = x.value();
    const auto& vv = v.value();
    const int64_t rows = out.numel() / C;
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < C; ++c) out[r * C + c] += vv[c];
    return tape_of(x).record(std::move(out), {x, v}, [x, v, rows, C](Tape& t, const Tensor& g) {
        accumulate(t, x, g);
        if (t.requires_grad(v)) {
            auto& buf = t.grad_buffer(v);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t c = 0; c < C; ++c) buf[c] += g[r * C + c];
        }
    });
}

Var add_channel_vector(Var x, Var v) {
    same_tape(x, v);
    const auto& s = x.shape();
    if (s.size() != 4 || v.value().numel() != s[1]) throw Error(ErrorCode::ShapeMismatch, "add_channel_vector");
    const int64_t B = s[0], C = s[1], HW = s[2] * s[3];
    Tensor out = x.value();
    const auto& vv = v.value();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t i = 0; i < HW; ++i) out[(b * C + c) * HW + i] += vv[c];
    return tape_of(x).record(std::move(out), {x, v}, [x, v, B, C, HW](Tape& t, const Tensor& g) {
        accumulate(t, x, g);
        if (t.requires_grad(v)) {
            auto& buf = t.grad_buffer(v);
            for (int64_t b = 0; b < B; ++b)
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t i = 0; i < HW; ++i) buf[c] += g[(b * C + c) * HW + i];
        }
    });
}

Var select_row(Var m, int64_t row) {
    const auto& s = m.shape();
    if (s.size() != 2 || row < 0 || row >= s[0]) throw Error(ErrorCode::ShapeMismatch, "select_row out of range");
    const int64_t C = s[1];
    Tensor out({C});
    std::copy(m.value().ptr() + row * C, m.value().ptr() + (row + 1) * C, out.ptr());
    return tape_of(m).record(std::move(out), {m}, [m, row, C](Tape& t, const Tensor& g) {
        auto& buf = t.grad_buffer(m);
        for (int64_t c = 0; c < C; ++c) buf[row * C + c] += g[c];
    });
}

Var spatial_mean(Var x) {
    const auto& s = x.shape();
    if (s.size() != 4) throw Error(ErrorCode::ShapeMismatch, "spatial_mean expects 4-D input");
    const int64_t B = s[0], C = s[1], HW = s[2] * s[3];
    Tensor out({B, C});
    const auto& xv = x.value();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
            double acc = 0.0;
            for (int64_t i = 0; i < HW; ++i) acc += xv[(b * C + c) * HW + i];
            out[b * C + c] = acc / static_cast<double>(HW);
        }
    return tape_of(x).record(std::move(out), {x}, [x, B, C, HW](Tape& t, const Tensor& g) {
        auto& buf = t.grad_buffer(x);
        const double inv = 1.0 / static_cast<double>(HW);
        for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < C; ++c)
                for (int64_t i = 0; i < HW; ++i) buf[(b * C + c) * HW + i] += g[b * C + c] * inv;
    });
}

Var scaled_dot_product_attention(Var q, Var k, Var v, int heads) {
    if (!k.valid() || !v.valid()) throw Error(ErrorCode::EmptyMemory, "attention without keys");
    same_tape(q, k);
    same_tape(q, v);
    const auto& qs = q.shape();
    const auto& ks = k.shape();
    if (qs.size() != 3 || ks.size() != 3 || ks != v.shape() || qs[0] != ks[0] || qs[2] != ks[2]) {
        throw Error(ErrorCode::ShapeMismatch, "attention: q " + shape_str(qs) + " k " + shape_str(ks) + " v " +
                                                  shape_str(v.shape()));
    }
    const int64_t B = qs[0], Nq = qs[1], Nk = ks[1], C = qs[2];
    if (heads < 1 || C % heads != 0) throw Error(ErrorCode::ShapeMismatch, "attention: channels not divisible by heads");
    const int64_t dh = C / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor out({B, Nq, C});
    auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(B * heads * Nq * Nk));
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t h = 0; h < heads; ++h) {
            CStridedMap Q(q.value().ptr() + b * Nq * C + h * dh, Nq, dh, Eigen::OuterStride<>(C));
            CStridedMap K(k.value().ptr() + b * Nk * C + h * dh, Nk, dh, Eigen::OuterStride<>(C));
            CStridedMap V(v.value().ptr() + b * Nk * C + h * dh, Nk, dh, Eigen::OuterStride<>(C));
            MapMat P(probs->data() + (b * heads + h) * Nq * Nk, Nq, Nk);
            P.noalias() = (Q * K.transpose()) * sc;
            for (int64_t i = 0; i < Nq; ++i) {
                const double m = P.row(i).maxCoeff();
                P.row(i) = (P.row(i).array() - m).exp();
                P.row(i) /= P.row(i).sum();
            }
            StridedMap O(out.ptr() + b * Nq * C + h * dh, Nq, dh, Eigen::OuterStride<>(C));
            O.noalias() = P * V;
        }
    }
    return tape_of(q).record(std::move(out), {q, k, v}, [=](Tape& t, const Tensor& g) {
        const bool gq = t.requires_grad(q), gk = t.requires_grad(k), gv = t.requires_grad(v);
        RowMat dP(Nq, Nk);
        for (int64_t b = 0; b < B; ++b) {
            for (int64_t h = 0; h < heads; ++h) {
                CStridedMap Q(t.value(q).ptr() + b * Nq * C + h * dh, Nq, dh, Eigen::OuterStride<>(C));
                CStridedMap K(t.value(k).ptr() + b * Nk * C + h * dh, Nk, dh, Eigen::OuterStride<>(C));
                CStridedMap V(t.value(v).ptr() + b * Nk * C + h * dh, Nk, dh, Eigen::OuterStride<>(C));
                CStridedMap G(g.ptr() + b * Nq * C + h * dh, Nq, dh, Eigen::OuterStride<>(C));
                CMapMat P(probs->data() + (b * heads + h) * Nq * Nk, Nq, Nk);
                if (gv) {
                    StridedMap GV(t.grad_buffer(v).ptr() + b * Nk * C + h * dh, Nk, dh, Eigen::OuterStride<>(C));
                    GV.noalias() += P.transpose() * G;
                }
                if (!gq && !gk) continue;
                dP.noalias() = G * V.transpose();
                for (int64_t i = 0; i < Nq; ++i) {
                    const double dot = dP.row(i).dot(P.row(i));
                    dP.row(i) = (P.row(i).array() * (dP.row(i).array() - dot)).matrix() * sc;
                }
                if (gq) {
                    StridedMap GQ(t.grad_buffer(q).ptr() + b * Nq * C + h * dh, Nq, dh, Eigen::OuterStride<>(C));
                    GQ.noalias() += dP * K;
                }
                if (gk) {
                    StridedMap GK(t.grad_buffer(k).ptr() + b * Nk * C + h * dh, Nk, dh, Eigen::OuterStride<>(C));
                    GK.noalias() += dP.transpose() * Q;
                }
            }
        }
    });
}

Var cross_attention(Var q, Var k, Var v, const AttentionWeights& wts, int heads) {
    if (!k.valid() || !v.valid()) throw Error(ErrorCode::EmptyMemory, "cross_attention with no memory tokens");
    if (q.dim(-1) % heads != 0) throw Error(ErrorCode::ShapeMismatch, "cross_attention: channels not divisible by heads");
    Var qp = linear(q, wts.wq, wts.bq);
    Var kp = linear(k, wts.wk, wts.bk);
    Var vp = linear(v, wts.wv, wts.bv);
    return linear(scaled_dot_product_attention(qp, kp, vp, heads), wts.wo, wts.bo);
}

Var sigmoid_focal_loss(Var logits, const Tensor& target, double alpha, double gamma) {
    if (logits.value().numel() != target.numel()) throw Error(ErrorCode::ShapeMismatch, "focal loss: target size");
    const auto& xv = logits.value();
    const int64_t n = xv.numel();
    double total = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double x = xv[i], tg = target[i];
        const double p = sigmoid_value(x);
        const double ce = softplus(x) - x * tg;
        const double pt = p * tg + (1.0 - p) * (1.0 - tg);
        const double at = alpha * tg + (1.0 - alpha) * (1.0 - tg);
        total += at * ce * std::pow(1.0 - pt, gamma);
    }
    auto tgt = std::make_shared<Tensor>(target);
    return tape_of(logits).record(Tensor::scalar(total / static_cast<double>(n)), {logits},
                                  [logits, tgt, alpha, gamma, n](Tape& t, const Tensor& g) {
        const auto& xv = t.value(logits);
        auto& buf = t.grad_buffer(logits);
        const double gs = g[0] / static_cast<double>(n);
        for (int64_t i = 0; i < n; ++i) {
            const double x = xv[i], tg = (*tgt)[i];
            const double p = sigmoid_value(x);
            const double ce = softplus(x) - x * tg;
            const double m = 1.0 - (p * tg + (1.0 - p) * (1.0 - tg));
            const double at = alpha * tg + (1.0 - alpha) * (1.0 - tg);
            const double dm = -(2.0 * tg - 1.0) * p * (1.0 - p);
            const double mg = std::pow(m, gamma);
            const double mg1 = gamma == 0.0 ? 0.0 : gamma * std::pow(m, gamma - 1.0);
            buf[i] += gs * at * ((p - tg) * mg + ce * mg1 * dm);
        }
    });
}

Var soft_dice_loss(Var logits, const Tensor& target, double smooth, bool squared) {
    if (logits.value().numel() != target.numel()) throw Error(ErrorCode::ShapeMismatch, "dice loss: target size");
    const auto& xv = logits.value();
    const int64_t n = xv.numel();
    double inter = 0.0, sp = 0.0, st = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double p = sigmoid_value(xv[i]);
        inter += p * target[i];
        sp += squared ? p * p : p;
        st += squared ? target[i] * target[i] : target[i];
    }
    const double num = 2.0 * inter + smooth;
    const double den = sp + st + smooth;
    auto tgt = std::make_shared<Tensor>(target);
    return tape_of(logits).record(Tensor::scalar(1.0 - num / den), {logits},
                                  [logits, tgt, num, den, n, squared](Tape& t, const Tensor& g) {
        const auto& xv = t.value(logits);
        auto& buf = t.grad_buffer(logits);
        for (int64_t i = 0; i < n; ++i) {
            const double p = sigmoid_value(xv[i]);
            const double dden = squared ? 2.0 * p : 1.0;
            const double dp = -(2.0 * (*tgt)[i] * den - num * dden) / (den * den);
            buf[i] += g[0] * dp * p * (1.0 - p);
        }
    });
}

Var bce_with_logits(Var logit, double target) {
    const double x = logit.value().item();
    const double loss = softplus(x) - x * target;
    return tape_of(logit).record(Tensor::scalar(loss), {logit}, [logit, target](Tape& t, const Tensor& g) {
        const double x = t.value(logit).item();
        t.grad_buffer(logit)[0] += g[0] * (sigmoid_value(x) - target);
    });
}

Var abs_error(Var x, double target) {
    const double d = x.value().item() - target;
    return tape_of(x).record(Tensor::scalar(std::abs(d)), {x}, [x, d](Tape& t, const Tensor& g) {
        const double sgn = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
        t.grad_buffer(x)[0] += g[0] * sgn;
    });
}

} // namespace slmprop::nn
