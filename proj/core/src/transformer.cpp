#include "transformer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rsp/error.hpp"

namespace rsp::micro::detail {

namespace {

constexpr double kLnEps = 1e-5;

ParamLayout make_layout(const ModelConfig& cfg) {
    const std::size_t V = cfg.vocab_size, d = cfg.d_model, C = cfg.context, F = cfg.d_ff;
    ParamLayout p;
    std::size_t off = 0;
    auto take = [&off](std::size_t n) {
        const std::size_t at = off;
        off += n;
        return at;
    };
    p.tok_emb = take(V * d);
    p.pos_emb = take(C * d);
    for (int l = 0; l < cfg.n_layers; ++l) {
        LayerOffsets o{};
        o.ln1_g = take(d);
        o.ln1_b = take(d);
        o.wq = take(d * d);
        o.wk = take(d * d);
        o.wv = take(d * d);
        o.wo = take(d * d);
        o.bo = take(d);
        o.ln2_g = take(d);
        o.ln2_b = take(d);
        o.w1 = take(d * F);
        o.b1 = take(F);
        o.w2 = take(F * d);
        o.b2 = take(d);
        p.layers.push_back(o);
    }
    p.lnf_g = take(d);
    p.lnf_b = take(d);
    p.head_w = take(d * V);
    p.head_b = take(V);
    p.total = off;
    return p;
}

// out[T x n] = in[T x m] * W[m x n] + b
void matmul(const double* __restrict in, const double* __restrict W, const double* __restrict b,
            double* __restrict out, int T, int m, int n) {
    for (int t = 0; t < T; ++t) {
        double* o = out + static_cast<std::size_t>(t) * n;
        if (b) {
            std::copy(b, b + n, o);
        } else {
            std::fill(o, o + n, 0.0);
        }
        const double* x = in + static_cast<std::size_t>(t) * m;
        for (int i = 0; i < m; ++i) {
            const double a = x[i];
            const double* w = W + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) o[j] += a * w[j];
        }
    }
}

// Accumulates din += dout * W^T, dW += in^T * dout, db += sum_t dout.
void matmul_backward(const double* in, const double* W, const double* dout, double* din, double* dW, double* db,
                     int T, int m, int n) {
    for (int t = 0; t < T; ++t) {
        const double* g = dout + static_cast<std::size_t>(t) * n;
        bool nonzero = false;
        for (int j = 0; j < n; ++j) {
            if (g[j] != 0.0) {
                nonzero = true;
                break;
            }
        }
        if (!nonzero) continue;
        const double* x = in + static_cast<std::size_t>(t) * m;
        double* dx = din ? din + static_cast<std::size_t>(t) * m : nullptr;
        for (int i = 0; i < m; ++i) {
            const double* w = W + static_cast<std::size_t>(i) * n;
            if (dx) {
                double s = 0.0;
                for (int j = 0; j < n; ++j) s += g[j] * w[j];
                dx[i] += s;
            }
            if (dW) {
                double* dw = dW + static_cast<std::size_t>(i) * n;
                const double a = x[i];
                for (int j = 0; j < n; ++j) dw[j] += a * g[j];
            }
        }
        if (db) {
            for (int j = 0; j < n; ++j) db[j] += g[j];
        }
    }
}

void layernorm(const double* in, const double* gamma, const double* beta, double* out, double* xhat, double* rstd,
               int T, int d) {
    for (int t = 0; t < T; ++t) {
        const double* x = in + static_cast<std::size_t>(t) * d;
        double mean = 0.0;
        for (int i = 0; i < d; ++i) mean += x[i];
        mean /= d;
        double var = 0.0;
        for (int i = 0; i < d; ++i) var += (x[i] - mean) * (x[i] - mean);
        var /= d;
        const double r = 1.0 / std::sqrt(var + kLnEps);
        rstd[t] = r;
        double* xh = xhat + static_cast<std::size_t>(t) * d;
        double* o = out + static_cast<std::size_t>(t) * d;
        for (int i = 0; i < d; ++i) {
            xh[i] = (x[i] - mean) * r;
            o[i] = xh[i] * gamma[i] + beta[i];
        }
    }
}

void layernorm_backward(const double* dout, const double* xhat, const double* rstd, const double* gamma, double* din,
                        double* dgamma, double* dbeta, int T, int d) {
    for (int t = 0; t < T; ++t) {
        const double* g = dout + static_cast<std::size_t>(t) * d;
        const double* xh = xhat + static_cast<std::size_t>(t) * d;
        double sum_dxh = 0.0, sum_dxh_xh = 0.0;
        for (int i = 0; i < d; ++i) {
            const double dxh = g[i] * gamma[i];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[i];
            if (dgamma) {
                dgamma[i] += g[i] * xh[i];
                dbeta[i] += g[i];
            }
        }
        sum_dxh /= d;
        sum_dxh_xh /= d;
        double* dx = din + static_cast<std::size_t>(t) * d;
        for (int i = 0; i < d; ++i) {
            const double dxh = g[i] * gamma[i];
            dx[i] += rstd[t] * (dxh - sum_dxh - xh[i] * sum_dxh_xh);
        }
    }
}

// Smooth gated activation u * (1 + u / sqrt(1 + u^2)) / 2: GELU-shaped but
// needs only a square root.
inline double act(double u) {
    const double s = std::sqrt(1.0 + u * u);
    return 0.5 * u * (1.0 + u / s);
}

inline double act_grad(double u) {
    const double s = std::sqrt(1.0 + u * u);
    return 0.5 * (1.0 + u / s) + 0.5 * u / (s * s * s);
}

}  // namespace

ParamLayout ParamLayout::for_config(const ModelConfig& cfg) { return make_layout(cfg); }

void embed_tokens(const ModelConfig& cfg, const ParamLayout& layout, std::span<const double> params,
                  std::span<const int> tokens, int pos0, std::span<double> out) {
    const int d = cfg.d_model;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        const int id = tokens[t];
        if (id < 0 || id >= cfg.vocab_size) throw PreconditionError("token id out of range");
        const double* te = params.data() + layout.tok_emb + static_cast<std::size_t>(id) * d;
        const double* pe = params.data() + layout.pos_emb + static_cast<std::size_t>(pos0 + t) * d;
        double* o = out.data() + t * d;
        for (int i = 0; i < d; ++i) o[i] = te[i] + pe[i];
    }
}

std::vector<double> forward(const ModelConfig& cfg, const ParamLayout& layout, std::span<const double> params,
                            std::span<const double> x, int T, ForwardCache& cache, Heads heads) {
    const int d = cfg.d_model, H = cfg.n_heads, hd = d / H, F = cfg.d_ff, V = cfg.vocab_size;
    const std::size_t Td = static_cast<std::size_t>(T) * d;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const double* P = params.data();

    cache.T = T;
    cache.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    std::vector<double> h(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(Td));
    std::vector<double> tmp(Td);

    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerOffsets& o = layout.layers[static_cast<std::size_t>(l)];
        LayerCache& c = cache.layers[static_cast<std::size_t>(l)];
        c.x_in = h;
        c.xhat1.resize(Td);
        c.rstd1.resize(static_cast<std::size_t>(T));
        c.a1.resize(Td);
        layernorm(h.data(), P + o.ln1_g, P + o.ln1_b, c.a1.data(), c.xhat1.data(), c.rstd1.data(), T, d);

        c.q.resize(Td);
        c.k.resize(Td);
        c.v.resize(Td);
        matmul(c.a1.data(), P + o.wq, nullptr, c.q.data(), T, d, d);
        matmul(c.a1.data(), P + o.wk, nullptr, c.k.data(), T, d, d);
        matmul(c.a1.data(), P + o.wv, nullptr, c.v.data(), T, d, d);

        c.att.assign(static_cast<std::size_t>(H) * T * T, 0.0);
        c.o.assign(Td, 0.0);
        for (int hh = 0; hh < H; ++hh) {
            const int c0 = hh * hd;
            for (int t = 0; t < T; ++t) {
                double* a = c.att.data() + (static_cast<std::size_t>(hh) * T + t) * T;
                const double* qt = c.q.data() + static_cast<std::size_t>(t) * d + c0;
                double mx = -std::numeric_limits<double>::infinity();
                for (int s = 0; s <= t; ++s) {
                    const double* ks = c.k.data() + static_cast<std::size_t>(s) * d + c0;
                    double sc = 0.0;
                    for (int i = 0; i < hd; ++i) sc += qt[i] * ks[i];
                    sc *= scale;
                    a[s] = sc;
                    mx = std::max(mx, sc);
                }
                double sum = 0.0;
                for (int s = 0; s <= t; ++s) {
                    a[s] = std::exp(a[s] - mx);
                    sum += a[s];
                }
                const double inv = 1.0 / sum;
                double* ot = c.o.data() + static_cast<std::size_t>(t) * d + c0;
                for (int s = 0; s <= t; ++s) {
                    a[s] *= inv;
                    const double* vs = c.v.data() + static_cast<std::size_t>(s) * d + c0;
                    for (int i = 0; i < hd; ++i) ot[i] += a[s] * vs[i];
                }
            }
        }
        matmul(c.o.data(), P + o.wo, P + o.bo, tmp.data(), T, d, d);
        for (std::size_t i = 0; i < Td; ++i) h[i] += tmp[i];
        c.x_mid = h;

        c.xhat2.resize(Td);
        c.rstd2.resize(static_cast<std::size_t>(T));
        c.a2.resize(Td);
        layernorm(h.data(), P + o.ln2_g, P + o.ln2_b, c.a2.data(), c.xhat2.data(), c.rstd2.data(), T, d);
        c.u.resize(static_cast<std::size_t>(T) * F);
        c.g.resize(static_cast<std::size_t>(T) * F);
        matmul(c.a2.data(), P + o.w1, P + o.b1, c.u.data(), T, d, F);
        for (std::size_t i = 0; i < c.u.size(); ++i) c.g[i] = act(c.u[i]);
        matmul(c.g.data(), P + o.w2, P + o.b2, tmp.data(), T, F, d);
        for (std::size_t i = 0; i < Td; ++i) h[i] += tmp[i];
    }

    cache.x_out = h;
    cache.xhatf.resize(Td);
    cache.rstdf.resize(static_cast<std::size_t>(T));
    cache.f.resize(Td);
    layernorm(h.data(), P + layout.lnf_g, P + layout.lnf_b, cache.f.data(), cache.xhatf.data(), cache.rstdf.data(), T,
              d);

    if (heads == Heads::Last) {
        std::vector<double> logits(static_cast<std::size_t>(V));
        matmul(cache.f.data() + static_cast<std::size_t>(T - 1) * d, P + layout.head_w, P + layout.head_b,
               logits.data(), 1, d, V);
        return logits;
    }
    std::vector<double> logits(static_cast<std::size_t>(T) * V);
    matmul(cache.f.data(), P + layout.head_w, P + layout.head_b, logits.data(), T, d, V);
    return logits;
}

std::vector<double> forward_last(const ModelConfig& cfg, const ParamLayout& layout, std::span<const double> params,
                                 std::span<const double> x, int T, int start, const PrefixState* base,
                                 PrefixState* capture) {
    const int d = cfg.d_model, H = cfg.n_heads, hd = d / H, F = cfg.d_ff, V = cfg.vocab_size;
    const int nl = cfg.n_layers;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const double* P = params.data();
    if (!base) start = 0;
    const int rows = T - start;

    thread_local std::vector<double> h, a, q, kbuf, vbuf, o, tmp, u, att;
    thread_local std::vector<double> kfull, vfull;
    const std::size_t Td = static_cast<std::size_t>(T) * d;
    h.assign(x.begin() + static_cast<std::ptrdiff_t>(start) * d, x.begin() + static_cast<std::ptrdiff_t>(Td));
    if (capture) {
        capture->T = T;
        capture->x.assign(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(Td));
        capture->h.resize(static_cast<std::size_t>(nl));
        capture->k.resize(static_cast<std::size_t>(nl));
        capture->v.resize(static_cast<std::size_t>(nl));
    }
    std::vector<double> rstd(static_cast<std::size_t>(T));
    u.resize(static_cast<std::size_t>(rows) * F);
    att.resize(static_cast<std::size_t>(T));

    for (int l = 0; l < nl; ++l) {
        const LayerOffsets& lo = layout.layers[static_cast<std::size_t>(l)];
        const bool last = l == nl - 1;
        // Rows of this layer that must produce outputs.
        const int out0 = last ? T - 1 : start;
        const int nout = T - out0;
        const std::size_t L = static_cast<std::size_t>(l);
        if (capture) {
            auto& ch = capture->h[L];
            ch.resize(Td);
            if (start > 0) std::copy_n(base->h[L].begin(), static_cast<std::size_t>(start) * d, ch.begin());
            std::copy(h.begin(), h.end(), ch.begin() + static_cast<std::ptrdiff_t>(start) * d);
        }

        a.resize(static_cast<std::size_t>(rows) * d);
        tmp.resize(static_cast<std::size_t>(rows) * d);
        layernorm(h.data(), P + lo.ln1_g, P + lo.ln1_b, a.data(), tmp.data(), rstd.data(), rows, d);
        kfull.resize(Td);
        vfull.resize(Td);
        if (start > 0) {
            std::copy_n(base->k[L].begin(), static_cast<std::size_t>(start) * d, kfull.begin());
            std::copy_n(base->v[L].begin(), static_cast<std::size_t>(start) * d, vfull.begin());
        }
        matmul(a.data(), P + lo.wk, nullptr, kfull.data() + static_cast<std::size_t>(start) * d, rows, d, d);
        matmul(a.data(), P + lo.wv, nullptr, vfull.data() + static_cast<std::size_t>(start) * d, rows, d, d);
        if (capture) {
            capture->k[L] = kfull;
            capture->v[L] = vfull;
        }
        const double* a_out = a.data() + static_cast<std::size_t>(out0 - start) * d;
        q.resize(static_cast<std::size_t>(nout) * d);
        matmul(a_out, P + lo.wq, nullptr, q.data(), nout, d, d);

        o.assign(static_cast<std::size_t>(nout) * d, 0.0);
        for (int r = 0; r < nout; ++r) {
            const int t = out0 + r;
            for (int hh = 0; hh < H; ++hh) {
                const int c0 = hh * hd;
                const double* qt = q.data() + static_cast<std::size_t>(r) * d + c0;
                double mx = -std::numeric_limits<double>::infinity();
                for (int s = 0; s <= t; ++s) {
                    const double* ks = kfull.data() + static_cast<std::size_t>(s) * d + c0;
                    double sc = 0.0;
                    for (int i = 0; i < hd; ++i) sc += qt[i] * ks[i];
                    sc *= scale;
                    att[static_cast<std::size_t>(s)] = sc;
                    mx = std::max(mx, sc);
                }
                double sum = 0.0;
                for (int s = 0; s <= t; ++s) {
                    att[static_cast<std::size_t>(s)] = std::exp(att[static_cast<std::size_t>(s)] - mx);
                    sum += att[static_cast<std::size_t>(s)];
                }
                const double inv = 1.0 / sum;
                double* ot = o.data() + static_cast<std::size_t>(r) * d + c0;
                for (int s = 0; s <= t; ++s) {
                    const double w = att[static_cast<std::size_t>(s)] * inv;
                    const double* vs = vfull.data() + static_cast<std::size_t>(s) * d + c0;
                    for (int i = 0; i < hd; ++i) ot[i] += w * vs[i];
                }
            }
        }
        // Residual stream restricted to output rows.
        double* hres = h.data() + static_cast<std::size_t>(out0 - start) * d;
        const std::size_t nd = static_cast<std::size_t>(nout) * d;
        matmul(o.data(), P + lo.wo, P + lo.bo, tmp.data(), nout, d, d);
        for (std::size_t i = 0; i < nd; ++i) hres[i] += tmp[i];
        a.resize(nd);
        std::vector<double> xh(nd);
        layernorm(hres, P + lo.ln2_g, P + lo.ln2_b, a.data(), xh.data(), rstd.data(), nout, d);
        u.resize(static_cast<std::size_t>(nout) * F);
        matmul(a.data(), P + lo.w1, P + lo.b1, u.data(), nout, d, F);
        for (auto& val : u) val = act(val);
        matmul(u.data(), P + lo.w2, P + lo.b2, tmp.data(), nout, F, d);
        for (std::size_t i = 0; i < nd; ++i) hres[i] += tmp[i];
        if (last) {
            std::vector<double> f(static_cast<std::size_t>(d)), xf(static_cast<std::size_t>(d));
            double r1 = 0.0;
            layernorm(hres, P + layout.lnf_g, P + layout.lnf_b, f.data(), xf.data(), &r1, 1, d);
            std::vector<double> logits(static_cast<std::size_t>(V));
            matmul(f.data(), P + layout.head_w, P + layout.head_b, logits.data(), 1, d, V);
            return logits;
        }
    }
    return {};
}

void backward(const ModelConfig& cfg, const ParamLayout& layout, std::span<const double> params,
              const ForwardCache& cache, std::span<const double> dlogits, Heads heads, std::span<double> dparams,
              std::span<double> dx) {
    const int T = cache.T;
    const int d = cfg.d_model, H = cfg.n_heads, hd = d / H, F = cfg.d_ff, V = cfg.vocab_size;
    const std::size_t Td = static_cast<std::size_t>(T) * d;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const double* P = params.data();
    double* G = dparams.empty() ? nullptr : dparams.data();
    auto grad_at = [G](std::size_t off) { return G ? G + off : nullptr; };

    std::vector<double> df(Td, 0.0);
    if (heads == Heads::Last) {
        matmul_backward(cache.f.data() + static_cast<std::size_t>(T - 1) * d, P + layout.head_w, dlogits.data(),
                        df.data() + static_cast<std::size_t>(T - 1) * d, grad_at(layout.head_w),
                        grad_at(layout.head_b), 1, d, V);
    } else {
        matmul_backward(cache.f.data(), P + layout.head_w, dlogits.data(), df.data(), grad_at(layout.head_w),
                        grad_at(layout.head_b), T, d, V);
    }

    std::vector<double> dh(Td, 0.0);
    layernorm_backward(df.data(), cache.xhatf.data(), cache.rstdf.data(), P + layout.lnf_g, dh.data(),
                       grad_at(layout.lnf_g), grad_at(layout.lnf_b), T, d);

    std::vector<double> da(Td), dg(static_cast<std::size_t>(T) * F), du(static_cast<std::size_t>(T) * F);
    std::vector<double> dq(Td), dk(Td), dv(Td), dout(Td), dP(static_cast<std::size_t>(T));

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const LayerOffsets& o = layout.layers[static_cast<std::size_t>(l)];
        const LayerCache& c = cache.layers[static_cast<std::size_t>(l)];

        // MLP branch: h = x_mid + W2 act(W1 LN2(x_mid))
        std::fill(dg.begin(), dg.end(), 0.0);
        matmul_backward(c.g.data(), P + o.w2, dh.data(), dg.data(), grad_at(o.w2), grad_at(o.b2), T, F, d);
        for (std::size_t i = 0; i < du.size(); ++i) du[i] = dg[i] * act_grad(c.u[i]);
        std::fill(da.begin(), da.end(), 0.0);
        matmul_backward(c.a2.data(), P + o.w1, du.data(), da.data(), grad_at(o.w1), grad_at(o.b1), T, d, F);
        layernorm_backward(da.data(), c.xhat2.data(), c.rstd2.data(), P + o.ln2_g, dh.data(), grad_at(o.ln2_g),
                           grad_at(o.ln2_b), T, d);

        // Attention branch: x_mid = x_in + Wo attn(LN1(x_in)) + bo
        std::fill(dout.begin(), dout.end(), 0.0);
        matmul_backward(c.o.data(), P + o.wo, dh.data(), dout.data(), grad_at(o.wo), grad_at(o.bo), T, d, d);
        std::fill(dq.begin(), dq.end(), 0.0);
        std::fill(dk.begin(), dk.end(), 0.0);
        std::fill(dv.begin(), dv.end(), 0.0);
        for (int hh = 0; hh < H; ++hh) {
            const int c0 = hh * hd;
            for (int t = 0; t < T; ++t) {
                const double* go = dout.data() + static_cast<std::size_t>(t) * d + c0;
                bool nonzero = false;
                for (int i = 0; i < hd; ++i) {
                    if (go[i] != 0.0) {
                        nonzero = true;
                        break;
                    }
                }
                if (!nonzero) continue;
                const double* a = c.att.data() + (static_cast<std::size_t>(hh) * T + t) * T;
                double dot = 0.0;
                for (int s = 0; s <= t; ++s) {
                    const double* vs = c.v.data() + static_cast<std::size_t>(s) * d + c0;
                    double* dvs = dv.data() + static_cast<std::size_t>(s) * d + c0;
                    double acc = 0.0;
                    for (int i = 0; i < hd; ++i) {
                        acc += go[i] * vs[i];
                        dvs[i] += a[s] * go[i];
                    }
                    dP[static_cast<std::size_t>(s)] = acc;
                    dot += a[s] * acc;
                }
                const double* qt = c.q.data() + static_cast<std::size_t>(t) * d + c0;
                double* dqt = dq.data() + static_cast<std::size_t>(t) * d + c0;
                for (int s = 0; s <= t; ++s) {
                    const double ds = a[s] * (dP[static_cast<std::size_t>(s)] - dot) * scale;
                    if (ds == 0.0) continue;
                    const double* ks = c.k.data() + static_cast<std::size_t>(s) * d + c0;
                    double* dks = dk.data() + static_cast<std::size_t>(s) * d + c0;
                    for (int i = 0; i < hd; ++i) {
                        dqt[i] += ds * ks[i];
                        dks[i] += ds * qt[i];
                    }
                }
            }
        }
        std::fill(da.begin(), da.end(), 0.0);
        matmul_backward(c.a1.data(), P + o.wq, dq.data(), da.data(), grad_at(o.wq), nullptr, T, d, d);
        matmul_backward(c.a1.data(), P + o.wk, dk.data(), da.data(), grad_at(o.wk), nullptr, T, d, d);
        matmul_backward(c.a1.data(), P + o.wv, dv.data(), da.data(), grad_at(o.wv), nullptr, T, d, d);
        layernorm_backward(da.data(), c.xhat1.data(), c.rstd1.data(), P + o.ln1_g, dh.data(), grad_at(o.ln1_g),
                           grad_at(o.ln1_b), T, d);
    }

    if (!dx.empty()) std::copy(dh.begin(), dh.end(), dx.begin());
}

double candidate_log_prob_grad(std::span<const double> logits, std::span<const int> candidates, int target,
                               std::span<double> dlogits) {
    double mx = -std::numeric_limits<double>::infinity();
    for (const int c : candidates) mx = std::max(mx, logits[static_cast<std::size_t>(c)]);
    double sum = 0.0;
    for (const int c : candidates) sum += std::exp(logits[static_cast<std::size_t>(c)] - mx);
    const double lse = mx + std::log(sum);
    if (!dlogits.empty()) {
        std::fill(dlogits.begin(), dlogits.end(), 0.0);
        for (const int c : candidates) dlogits[static_cast<std::size_t>(c)] -= std::exp(logits[static_cast<std::size_t>(c)] - lse);
        dlogits[static_cast<std::size_t>(target)] += 1.0;
    }
    return logits[static_cast<std::size_t>(target)] - lse;
}

}  // namespace rsp::micro::detail
