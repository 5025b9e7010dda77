#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "mmcl/errors.hpp"
#include "mmcl/tensor.hpp"

namespace mmcl {

// Single-use reverse-mode tape over dense tensors. A Graph records one
// forward pass; backward() walks the tape once and accumulates gradients into
// the Parameters that were registered with param(). Templated on the scalar
// type so tests can run the identical computation in double precision.
template <typename T>
class Graph {
  public:
    using Ref = int;

    struct Node {
        Shape shape;
        std::vector<T> value;
        std::vector<T> grad;
        std::function<void(Graph&)> backprop;  // empty for leaves
        ParameterT<T>* param = nullptr;
    };

    std::size_t num_nodes() const { return nodes_.size(); }
    const Shape& shape(Ref r) const { return nodes_[r].shape; }
    const std::vector<T>& value(Ref r) const { return nodes_[r].value; }
    const std::vector<T>& grad(Ref r) const { return nodes_[r].grad; }

    T scalar(Ref r) const {
        if (nodes_[r].value.size() != 1) throw ShapeError("scalar() on non-scalar node");
        return nodes_[r].value[0];
    }

    // ---- leaves ------------------------------------------------------------

    Ref input(Shape shape, std::vector<T> data) {
        if (numel(shape) != data.size())
            throw ShapeError("input: data size does not match shape " + shape_str(shape));
        return push(std::move(shape), std::move(data), {});
    }

    Ref param(ParameterT<T>& p) {
        Ref r = push(p.tensor.shape, p.tensor.data, {});
        nodes_[r].param = &p;
        nodes_[r].backprop = [r](Graph& g) {
            ParameterT<T>* pp = g.nodes_[r].param;
            if (!pp->trainable) return;  // frozen parameters never receive grads
            pp->tensor.ensure_grad();
            const auto& gr = g.nodes_[r].grad;
            for (std::size_t i = 0; i < gr.size(); ++i) pp->tensor.grad[i] += gr[i];
        };
        return r;
    }

    // ---- elementwise -------------------------------------------------------

    Ref add(Ref a, Ref b) {
        check_same_shape(a, b, "add");
        std::vector<T> out(nodes_[a].value.size());
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = nodes_[a].value[i] + nodes_[b].value[i];
        Ref r = push(nodes_[a].shape, std::move(out), {});
        nodes_[r].backprop = [r, a, b](Graph& g) {
            const auto& gr = g.nodes_[r].grad;
            for (std::size_t i = 0; i < gr.size(); ++i) {
                g.nodes_[a].grad[i] += gr[i];
                g.nodes_[b].grad[i] += gr[i];
            }
        };
        return r;
    }

    // a + b where b's shape is a suffix of a's shape (bias vectors, shared
    // positional rows). Gradient for b sums over the broadcast prefix.
    Ref add_broadcast(Ref a, Ref b) {
        const Shape& sa = nodes_[a].shape;
        const Shape& sb = nodes_[b].shape;
        if (sb.size() > sa.size() ||
            !std::equal(sb.rbegin(), sb.rend(), sa.rbegin()))
            throw ShapeError("add_broadcast: " + shape_str(sb) + " is not a suffix of " +
                             shape_str(sa));
        const std::size_t nb = numel(sb);
        const std::size_t reps = numel(sa) / nb;
        std::vector<T> out(nodes_[a].value.size());
        for (std::size_t p = 0; p < reps; ++p)
            for (std::size_t i = 0; i < nb; ++i)
                out[p * nb + i] = nodes_[a].value[p * nb + i] + nodes_[b].value[i];
        Ref r = push(sa, std::move(out), {});
        nodes_[r].backprop = [r, a, b, nb, reps](Graph& g) {
            const auto& gr = g.nodes_[r].grad;
            for (std::size_t p = 0; p < reps; ++p)
                for (std::size_t i = 0; i < nb; ++i) {
                    g.nodes_[a].grad[p * nb + i] += gr[p * nb + i];
                    g.nodes_[b].grad[i] += gr[p * nb + i];
                }
        };
        return r;
    }

    Ref scale(Ref a, T c) {
        std::vector<T> out(nodes_[a].value.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = nodes_[a].value[i] * c;
        Ref r = push(nodes_[a].shape, std::move(out), {});
        nodes_[r].backprop = [r, a, c](Graph& g) {
            const auto& gr = g.nodes_[r].grad;
            for (std::size_t i = 0; i < gr.size(); ++i) g.nodes_[a].grad[i] += gr[i] * c;
        };
        return r;
    }

    // GELU, tanh approximation.
    Ref gelu(Ref a) {
        const auto& x = nodes_[a].value;
        std::vector<T> out(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = gelu_fwd(x[i]);
        Ref r = push(nodes_[a].shape, std::move(out), {});
        nodes_[r].backprop = [r, a](Graph& g) {
            const auto& gr = g.nodes_[r].grad;
            const auto& x = g.nodes_[a].value;
            for (std::size_t i = 0; i < gr.size(); ++i)
                g.nodes_[a].grad[i] += gr[i] * gelu_bwd(x[i]);
        };
        return r;
    }

    // ---- matmul ------------------------------------------------------------

    // a: [..., M, K]. b either rank 2 (shared weight, [K, N], or [N, K] when
    // trans_b) or the same rank as a with identical leading dims.
    Ref matmul(Ref a, Ref b, bool trans_b = false) {
        const Shape& sa = nodes_[a].shape;
        const Shape& sb = nodes_[b].shape;
        if (sa.size() < 2 || sb.size() < 2) throw ShapeError("matmul: rank < 2");
        const std::size_t M = sa[sa.size() - 2];
        const std::size_t K = sa[sa.size() - 1];
        const std::size_t bk = trans_b ? sb[sb.size() - 1] : sb[sb.size() - 2];
        const std::size_t N = trans_b ? sb[sb.size() - 2] : sb[sb.size() - 1];
        if (bk != K)
            throw ShapeError("matmul: inner dims disagree, " + shape_str(sa) + " x " +
                             shape_str(sb));
        const bool shared_b = sb.size() == 2 && sa.size() > 2;
        if (!shared_b && sb.size() != sa.size())
            throw ShapeError("matmul: rank mismatch " + shape_str(sa) + " x " + shape_str(sb));
        std::size_t batch = 1;
        for (std::size_t i = 0; i + 2 < sa.size(); ++i) {
            batch *= sa[i];
            if (!shared_b && sb[i] != sa[i])
                throw ShapeError("matmul: leading dims disagree");
        }
        Shape so(sa.begin(), sa.end() - 1);
        so.push_back(N);

        std::vector<T> out(batch * M * N, T(0));
        const T* A = nodes_[a].value.data();
        const T* B = nodes_[b].value.data();
        const std::size_t b_stride = shared_b ? 0 : K * N;
        for (std::size_t p = 0; p < batch; ++p) {
            const T* Ab = A + p * M * K;
            const T* Bb = B + p * b_stride;
            T* Cb = out.data() + p * M * N;
            if (!trans_b) {
                for (std::size_t i = 0; i < M; ++i)
                    for (std::size_t k = 0; k < K; ++k) {
                        const T av = Ab[i * K + k];
                        const T* Brow = Bb + k * N;
                        T* Crow = Cb + i * N;
                        for (std::size_t j = 0; j < N; ++j) Crow[j] += av * Brow[j];
                    }
            } else {
                for (std::size_t i = 0; i < M; ++i)
                    for (std::size_t j = 0; j < N; ++j) {
                        T acc = T(0);
                        const T* Arow = Ab + i * K;
                        const T* Brow = Bb + j * K;
                        for (std::size_t k = 0; k < K; ++k) acc += Arow[k] * Brow[k];
                        Cb[i * N + j] = acc;
                    }
            }
        }
        Ref r = push(std::move(so), std::move(out), {});
        nodes_[r].backprop = [r, a, b, trans_b, shared_b, batch, M, K, N, b_stride](Graph& g) {
            const T* dC = g.nodes_[r].grad.data();
            const T* A = g.nodes_[a].value.data();
            const T* B = g.nodes_[b].value.data();
            T* dA = g.nodes_[a].grad.data();
            T* dB = g.nodes_[b].grad.data();
            for (std::size_t p = 0; p < batch; ++p) {
                const T* Ab = A + p * M * K;
                const T* Bb = B + p * b_stride;
                const T* dCb = dC + p * M * N;
                T* dAb = dA + p * M * K;
                T* dBb = dB + (shared_b ? 0 : p * K * N);
                if (!trans_b) {
                    for (std::size_t i = 0; i < M; ++i)
                        for (std::size_t k = 0; k < K; ++k) {
                            T acc = T(0);
                            const T* dCrow = dCb + i * N;
                            const T* Brow = Bb + k * N;
                            for (std::size_t j = 0; j < N; ++j) acc += dCrow[j] * Brow[j];
                            dAb[i * K + k] += acc;
                        }
                    for (std::size_t i = 0; i < M; ++i)
                        for (std::size_t k = 0; k < K; ++k) {
                            const T av = Ab[i * K + k];
                            const T* dCrow = dCb + i * N;
                            T* dBrow = dBb + k * N;
                            for (std::size_t j = 0; j < N; ++j) dBrow[j] += av * dCrow[j];
                        }
                } else {  // B stored [N, K]
                    for (std::size_t i = 0; i < M; ++i)
                        for (std::size_t j = 0; j < N; ++j) {
                            const T gv = dCb[i * N + j];
                            const T* Brow = Bb + j * K;
                            const T* Arow = Ab + i * K;
                            T* dArow = dAb + i * K;
                            T* dBrow = dBb + j * K;
                            for (std::size_t k = 0; k < K; ++k) {
                                dArow[k] += gv * Brow[k];
                                dBrow[k] += gv * Arow[k];
                            }
                        }
                }
            }
        };
        return r;
    }

    // y = x W + bias; x [..., Din], W [Din, Dout], bias [Dout].
    Ref linear(Ref x, Ref w, Ref bias) {
        const Shape& sw = nodes_[w].shape;
        if (sw.size() != 2) throw ShapeError("linear: weight must be rank 2");
        if (nodes_[bias].shape != Shape{sw[1]})
            throw ShapeError("linear: bias shape must be [Dout]");
        return add_broadcast(matmul(x, w), bias);
    }

    // ---- normalization and softmax ------------------------------------------

    Ref layer_norm(Ref x, Ref gamma, Ref beta, T eps) {
        if (!(eps > T(0))) throw ConfigError("layer_norm: eps must be > 0");
        const Shape& s = nodes_[x].shape;
        const std::size_t D = s.back();
        if (nodes_[gamma].shape != Shape{D} || nodes_[beta].shape != Shape{D})
            throw ShapeError("layer_norm: gamma/beta must be [D]");
        const std::size_t rows = numel(s) / D;
        std::vector<T> out(numel(s));
        std::vector<T> xhat(numel(s));
        std::vector<T> inv_sigma(rows);
        const T* X = nodes_[x].value.data();
        const T* G = nodes_[gamma].value.data();
        const T* Bv = nodes_[beta].value.data();
        for (std::size_t rix = 0; rix < rows; ++rix) {
            const T* xr = X + rix * D;
            T mu = T(0);
            for (std::size_t d = 0; d < D; ++d) mu += xr[d];
            mu /= static_cast<T>(D);
            T var = T(0);
            for (std::size_t d = 0; d < D; ++d) var += (xr[d] - mu) * (xr[d] - mu);
            var /= static_cast<T>(D);
            const T is = T(1) / std::sqrt(var + eps);
            inv_sigma[rix] = is;
            for (std::size_t d = 0; d < D; ++d) {
                const T xh = (xr[d] - mu) * is;
                xhat[rix * D + d] = xh;
                out[rix * D + d] = xh * G[d] + Bv[d];
            }
        }
        Ref r = push(s, std::move(out), {});
        nodes_[r].backprop = [r, x, gamma, beta, D, rows, xhat = std::move(xhat),
                              inv_sigma = std::move(inv_sigma)](Graph& g) {
            const T* dY = g.nodes_[r].grad.data();
            const T* G = g.nodes_[gamma].value.data();
            T* dX = g.nodes_[x].grad.data();
            T* dG = g.nodes_[gamma].grad.data();
            T* dBv = g.nodes_[beta].grad.data();
            for (std::size_t rix = 0; rix < rows; ++rix) {
                const T* dyr = dY + rix * D;
                const T* xh = xhat.data() + rix * D;
                T sum_gdy = T(0), sum_gdy_xh = T(0);
                for (std::size_t d = 0; d < D; ++d) {
                    const T gdy = G[d] * dyr[d];
                    sum_gdy += gdy;
                    sum_gdy_xh += gdy * xh[d];
                    dG[d] += dyr[d] * xh[d];
                    dBv[d] += dyr[d];
                }
                const T inv_d = T(1) / static_cast<T>(D);
                for (std::size_t d = 0; d < D; ++d) {
                    const T gdy = G[d] * dyr[d];
                    dX[rix * D + d] +=
                        inv_sigma[rix] * (gdy - sum_gdy * inv_d - xh[d] * sum_gdy_xh * inv_d);
                }
            }
        };
        return r;
    }

    // Softmax over the last axis.
    Ref softmax(Ref x) {
        const Shape& s = nodes_[x].shape;
        const std::size_t D = s.back();
        const std::size_t rows = numel(s) / D;
        std::vector<T> out(numel(s));
        const T* X = nodes_[x].value.data();
        for (std::size_t rix = 0; rix < rows; ++rix) {
            const T* xr = X + rix * D;
            T mx = xr[0];
            for (std::size_t d = 1; d < D; ++d) mx = std::max(mx, xr[d]);
            T z = T(0);
            for (std::size_t d = 0; d < D; ++d) {
                out[rix * D + d] = std::exp(xr[d] - mx);
                z += out[rix * D + d];
            }
            for (std::size_t d = 0; d < D; ++d) out[rix * D + d] /= z;
        }
        Ref r = push(s, std::move(out), {});
        nodes_[r].backprop = [r, x, D, rows](Graph& g) {
            const T* Y = g.nodes_[r].value.data();
            const T* dY = g.nodes_[r].grad.data();
            T* dX = g.nodes_[x].grad.data();
            for (std::size_t rix = 0; rix < rows; ++rix) {
                T dot = T(0);
                for (std::size_t d = 0; d < D; ++d) dot += dY[rix * D + d] * Y[rix * D + d];
                for (std::size_t d = 0; d < D; ++d)
                    dX[rix * D + d] += Y[rix * D + d] * (dY[rix * D + d] - dot);
            }
        };
        return r;
    }

    // ---- layout ------------------------------------------------------------

    Ref reshape(Ref a, Shape s) {
        if (numel(s) != nodes_[a].value.size())
            throw ShapeError("reshape: element count mismatch");
        Ref r = push(std::move(s), nodes_[a].value, {});
        nodes_[r].backprop = [r, a](Graph& g) {
            const auto& gr = g.nodes_[r].grad;
            for (std::size_t i = 0; i < gr.size(); ++i) g.nodes_[a].grad[i] += gr[i];
        };
        return r;
    }

    // [B, N, H*dh] -> [B, H, N, dh]
    Ref split_heads(Ref a, std::size_t heads) {
        const Shape& s = nodes_[a].shape;
        if (s.size() != 3) throw ShapeError("split_heads: expected rank 3");
        const std::size_t B = s[0], N = s[1], D = s[2];
        if (D % heads != 0) throw ConfigError("split_heads: D not divisible by heads");
        const std::size_t dh = D / heads;
        std::vector<T> out(B * N * D);
        const T* X = nodes_[a].value.data();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t d = 0; d < dh; ++d)
                        out[((b * heads + h) * N + n) * dh + d] =
                            X[(b * N + n) * D + h * dh + d];
        Ref r = push(Shape{B, heads, N, dh}, std::move(out), {});
        nodes_[r].backprop = [r, a, B, N, D, heads, dh](Graph& g) {
            const T* gr = g.nodes_[r].grad.data();
            T* da = g.nodes_[a].grad.data();
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t n = 0; n < N; ++n)
                        for (std::size_t d = 0; d < dh; ++d)
                            da[(b * N + n) * D + h * dh + d] +=
                                gr[((b * heads + h) * N + n) * dh + d];
        };
        return r;
    }

    // [B, H, N, dh] -> [B, N, H*dh]
    Ref merge_heads(Ref a) {
        const Shape& s = nodes_[a].shape;
        if (s.size() != 4) throw ShapeError("merge_heads: expected rank 4");
        const std::size_t B = s[0], H = s[1], N = s[2], dh = s[3];
        const std::size_t D = H * dh;
        std::vector<T> out(B * N * D);
        const T* X = nodes_[a].value.data();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t d = 0; d < dh; ++d)
                        out[(b * N + n) * D + h * dh + d] =
                            X[((b * H + h) * N + n) * dh + d];
        Ref r = push(Shape{B, N, D}, std::move(out), {});
        nodes_[r].backprop = [r, a, B, H, N, dh, D](Graph& g) {
            const T* gr = g.nodes_[r].grad.data();
            T* da = g.nodes_[a].grad.data();
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t h = 0; h < H; ++h)
                    for (std::size_t n = 0; n < N; ++n)
                        for (std::size_t d = 0; d < dh; ++d)
                            da[((b * H + h) * N + n) * dh + d] +=
                                gr[(b * N + n) * D + h * dh + d];
        };
        return r;
    }

    // Concatenate [B, Ni, d] pieces along the sequence axis.
    Ref concat_seq(const std::vector<Ref>& parts) {
        if (parts.empty()) throw ShapeError("concat_seq: no parts");
        const Shape& s0 = nodes_[parts[0]].shape;
        if (s0.size() != 3) throw ShapeError("concat_seq: expected rank 3 parts");
        const std::size_t B = s0[0], D = s0[2];
        std::size_t total = 0;
        for (Ref p : parts) {
            const Shape& sp = nodes_[p].shape;
            if (sp.size() != 3 || sp[0] != B || sp[2] != D)
                throw ShapeError("concat_seq: incompatible part " + shape_str(sp));
            total += sp[1];
        }
        std::vector<T> out(B * total * D);
        std::size_t off = 0;
        std::vector<std::size_t> offsets;
        for (Ref p : parts) {
            offsets.push_back(off);
            const std::size_t Np = nodes_[p].shape[1];
            const T* X = nodes_[p].value.data();
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t n = 0; n < Np; ++n)
                    for (std::size_t d = 0; d < D; ++d)
                        out[(b * total + off + n) * D + d] = X[(b * Np + n) * D + d];
            off += Np;
        }
        Ref r = push(Shape{B, total, D}, std::move(out), {});
        nodes_[r].backprop = [r, parts, offsets, B, D, total](Graph& g) {
            const T* gr = g.nodes_[r].grad.data();
            for (std::size_t pi = 0; pi < parts.size(); ++pi) {
                const std::size_t Np = g.nodes_[parts[pi]].shape[1];
                T* da = g.nodes_[parts[pi]].grad.data();
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t n = 0; n < Np; ++n)
                        for (std::size_t d = 0; d < D; ++d)
                            da[(b * Np + n) * D + d] +=
                                gr[(b * total + offsets[pi] + n) * D + d];
            }
        };
        return r;
    }

    // Row gather from an embedding table [V, d] with ids [B, N].
    Ref embedding(Ref table, const std::vector<std::size_t>& ids, std::size_t B,
                  std::size_t N) {
        const Shape& st = nodes_[table].shape;
        if (st.size() != 2) throw ShapeError("embedding: table must be rank 2");
        if (ids.size() != B * N) throw ShapeError("embedding: ids size mismatch");
        const std::size_t V = st[0], D = st[1];
        for (auto id : ids)
            if (id >= V) throw VocabError("embedding: id " + std::to_string(id) +
                                          " out of vocab " + std::to_string(V));
        std::vector<T> out(B * N * D);
        const T* Tb = nodes_[table].value.data();
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t d = 0; d < D; ++d) out[i * D + d] = Tb[ids[i] * D + d];
        Ref r = push(Shape{B, N, D}, std::move(out), {});
        nodes_[r].backprop = [r, table, ids, D](Graph& g) {
            const T* gr = g.nodes_[r].grad.data();
            T* dT = g.nodes_[table].grad.data();
            for (std::size_t i = 0; i < ids.size(); ++i)
                for (std::size_t d = 0; d < D; ++d) dT[ids[i] * D + d] += gr[i * D + d];
        };
        return r;
    }

    // First `count` rows of a rank-2 tensor, starting at `start`.
    Ref slice_rows(Ref a, std::size_t start, std::size_t count) {
        const Shape& s = nodes_[a].shape;
        if (s.size() != 2) throw ShapeError("slice_rows: expected rank 2");
        if (start + count > s[0]) throw ShapeError("slice_rows: out of range");
        const std::size_t D = s[1];
        std::vector<T> out(nodes_[a].value.begin() + start * D,
                           nodes_[a].value.begin() + (start + count) * D);
        Ref r = push(Shape{count, D}, std::move(out), {});
        nodes_[r].backprop = [r, a, start, D, count](Graph& g) {
            const T* gr = g.nodes_[r].grad.data();
            T* da = g.nodes_[a].grad.data();
            for (std::size_t i = 0; i < count * D; ++i) da[start * D + i] += gr[i];
        };
        return r;
    }

    // Pooled token: row `index` of each sequence, [B, N, d] -> [B, d].
    Ref select_token(Ref a, std::size_t index) {
        const Shape& s = nodes_[a].shape;
        if (s.size() != 3) throw ShapeError("select_token: expected rank 3");
        const std::size_t B = s[0], N = s[1], D = s[2];
        if (index >= N) throw ShapeError("select_token: index out of range");
        std::vector<T> out(B * D);
        const T* X = nodes_[a].value.data();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t d = 0; d < D; ++d) out[b * D + d] = X[(b * N + index) * D + d];
        Ref r = push(Shape{B, D}, std::move(out), {});
        nodes_[r].backprop = [r, a, B, N, D, index](Graph& g) {
            const T* gr = g.nodes_[r].grad.data();
            T* da = g.nodes_[a].grad.data();
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t d = 0; d < D; ++d)
                    da[(b * N + index) * D + d] += gr[b * D + d];
        };
        return r;
    }

    Ref sum(Ref a) {
        T acc = T(0);
        for (T v : nodes_[a].value) acc += v;
        Ref r = push(Shape{1}, std::vector<T>{acc}, {});
        nodes_[r].backprop = [r, a](Graph& g) {
            const T gv = g.nodes_[r].grad[0];
            for (auto& d : g.nodes_[a].grad) d += gv;
        };
        return r;
    }

    // ---- losses ------------------------------------------------------------

    // Mean negative log-softmax of the target class; logits [B, C].
    Ref softmax_cross_entropy(Ref logits, const std::vector<std::size_t>& targets) {
        const Shape& s = nodes_[logits].shape;
        if (s.size() != 2) throw ShapeError("softmax_cross_entropy: logits must be [B,C]");
        const std::size_t B = s[0], C = s[1];
        if (targets.size() != B) throw ShapeError("softmax_cross_entropy: target count");
        for (auto t : targets)
            if (t >= C) throw LabelError("softmax_cross_entropy: target out of range");
        const T* X = nodes_[logits].value.data();
        std::vector<T> probs(B * C);
        T loss = T(0);
        for (std::size_t b = 0; b < B; ++b) {
            const T* xr = X + b * C;
            T mx = xr[0];
            for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, xr[c]);
            T z = T(0);
            for (std::size_t c = 0; c < C; ++c) z += std::exp(xr[c] - mx);
            const T lse = mx + std::log(z);
            loss += lse - xr[targets[b]];
            for (std::size_t c = 0; c < C; ++c) probs[b * C + c] = std::exp(xr[c] - lse);
        }
        loss /= static_cast<T>(B);
        Ref r = push(Shape{1}, std::vector<T>{loss}, {});
        nodes_[r].backprop = [r, logits, targets, B, C, probs = std::move(probs)](Graph& g) {
            const T gv = g.nodes_[r].grad[0] / static_cast<T>(B);
            T* dx = g.nodes_[logits].grad.data();
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t c = 0; c < C; ++c) {
                    T p = probs[b * C + c];
                    if (c == targets[b]) p -= T(1);
                    dx[b * C + c] += gv * p;
                }
        };
        return r;
    }

    // Mean elementwise binary cross-entropy on logits; targets multi-hot.
    Ref sigmoid_bce(Ref logits, const std::vector<T>& targets) {
        const Shape& s = nodes_[logits].shape;
        const std::size_t n = numel(s);
        if (targets.size() != n) throw ShapeError("sigmoid_bce: target size mismatch");
        for (T t : targets)
            if (t != T(0) && t != T(1)) throw LabelError("sigmoid_bce: targets must be 0/1");
        const T* X = nodes_[logits].value.data();
        T loss = T(0);
        for (std::size_t i = 0; i < n; ++i) {
            const T z = X[i];
            // max(z,0) - t*z + log(1 + exp(-|z|)), numerically stable
            loss += std::max(z, T(0)) - targets[i] * z + std::log1p(std::exp(-std::abs(z)));
        }
        loss /= static_cast<T>(n);
        Ref r = push(Shape{1}, std::vector<T>{loss}, {});
        nodes_[r].backprop = [r, logits, targets, n](Graph& g) {
            const T gv = g.nodes_[r].grad[0] / static_cast<T>(n);
            const T* X = g.nodes_[logits].value.data();
            T* dx = g.nodes_[logits].grad.data();
            for (std::size_t i = 0; i < n; ++i) {
                const T sig = T(1) / (T(1) + std::exp(-X[i]));
                dx[i] += gv * (sig - targets[i]);
            }
        };
        return r;
    }

    // Quadratic anchor penalty: lambda * sum_i F_i (theta_i - anchor_i)^2.
    // `theta` refs live on this tape; fisher/anchor are constants.
    Ref quadratic_penalty(const std::vector<Ref>& theta,
                          const std::vector<const std::vector<T>*>& fisher,
                          const std::vector<const std::vector<T>*>& anchor, T lambda) {
        if (theta.size() != fisher.size() || theta.size() != anchor.size())
            throw ShapeError("quadratic_penalty: list length mismatch");
        T acc = T(0);
        for (std::size_t p = 0; p < theta.size(); ++p) {
            const auto& tv = nodes_[theta[p]].value;
            if (tv.size() != fisher[p]->size() || tv.size() != anchor[p]->size())
                throw ShapeError("quadratic_penalty: tensor size mismatch");
            for (std::size_t i = 0; i < tv.size(); ++i) {
                const T d = tv[i] - (*anchor[p])[i];
                acc += (*fisher[p])[i] * d * d;
            }
        }
        Ref r = push(Shape{1}, std::vector<T>{lambda * acc}, {});
        nodes_[r].backprop = [r, theta, fisher, anchor, lambda](Graph& g) {
            const T gv = g.nodes_[r].grad[0];
            for (std::size_t p = 0; p < theta.size(); ++p) {
                const auto& tv = g.nodes_[theta[p]].value;
                T* dt = g.nodes_[theta[p]].grad.data();
                for (std::size_t i = 0; i < tv.size(); ++i)
                    dt[i] += gv * T(2) * lambda * (*fisher[p])[i] * (tv[i] - (*anchor[p])[i]);
            }
        };
        return r;
    }

    Ref add_scalars(Ref a, Ref b) {
        if (nodes_[a].value.size() != 1 || nodes_[b].value.size() != 1)
            throw ShapeError("add_scalars: operands must be scalars");
        return add(a, b);
    }

    // ---- backward ----------------------------------------------------------

    void backward(Ref loss) {
        if (backward_done_) throw TapeError("backward called twice on one tape");
        if (nodes_[loss].value.size() != 1) throw ShapeError("backward: loss must be scalar");
        if (!std::isfinite(static_cast<double>(nodes_[loss].value[0])))
            throw NumericError("backward: non-finite loss");
        backward_done_ = true;
        for (auto& n : nodes_) n.grad.assign(n.value.size(), T(0));
        nodes_[loss].grad[0] = T(1);
        for (Ref r = loss; r >= 0; --r)
            if (nodes_[r].backprop) nodes_[r].backprop(*this);
    }

  private:
    Ref push(Shape shape, std::vector<T> value, std::function<void(Graph&)> bp) {
        nodes_.push_back(Node{std::move(shape), std::move(value), {}, std::move(bp), nullptr});
        return static_cast<Ref>(nodes_.size() - 1);
    }

    void check_same_shape(Ref a, Ref b, const char* op) const {
        if (nodes_[a].shape != nodes_[b].shape)
            throw ShapeError(std::string(op) + ": shape mismatch " +
                             shape_str(nodes_[a].shape) + " vs " + shape_str(nodes_[b].shape));
    }

    static T gelu_fwd(T x) {
        const T k = T(0.7978845608028654);  // sqrt(2/pi)
        const T u = k * (x + T(0.044715) * x * x * x);
        return T(0.5) * x * (T(1) + std::tanh(u));
    }
    static T gelu_bwd(T x) {
        const T k = T(0.7978845608028654);
        const T u = k * (x + T(0.044715) * x * x * x);
        const T t = std::tanh(u);
        const T du = k * (T(1) + T(3) * T(0.044715) * x * x);
        return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
    }

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

// Scaled dot-product self-attention over the full sequence; no masking, every
// token attends to every token of both modalities.
template <typename T>
struct AttentionParams {
    ParameterT<T>*wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
};

template <typename T>
typename Graph<T>::Ref multi_head_attention(Graph<T>& g, typename Graph<T>::Ref x,
                                            const AttentionParams<T>& p, std::size_t heads) {
    const Shape& s = g.shape(x);
    if (s.size() != 3) throw ShapeError("multi_head_attention: expected [B,N,D]");
    const std::size_t D = s[2];
    if (D % heads != 0) throw ConfigError("multi_head_attention: D % heads != 0");
    const std::size_t dh = D / heads;
    auto q = g.split_heads(g.linear(x, g.param(*p.wq), g.param(*p.bq)), heads);
    auto k = g.split_heads(g.linear(x, g.param(*p.wk), g.param(*p.bk)), heads);
    auto v = g.split_heads(g.linear(x, g.param(*p.wv), g.param(*p.bv)), heads);
    auto scores = g.scale(g.matmul(q, k, /*trans_b=*/true),
                          T(1) / std::sqrt(static_cast<T>(dh)));
    auto attn = g.softmax(scores);
    auto ctx = g.merge_heads(g.matmul(attn, v));
    return g.linear(ctx, g.param(*p.wo), g.param(*p.bo));
}

}  // namespace mmcl
