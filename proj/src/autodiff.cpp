#include "ptalk/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "ptalk/errors.hpp"

namespace ptalk::ad {

namespace {

void check_same_tape(Var a, Var b, const char* where) {
    if (a.tape == nullptr || a.tape != b.tape)
        throw std::invalid_argument(std::string(where) + ": operands from different tapes");
}

}  // namespace

Var Tape::push(Tensor value, bool needs_grad, std::function<void(Tape&)> back) {
    Node n;
    n.value = std::move(value);
    n.back = std::move(back);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Tensor& Tape::grad_buf(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.data.empty()) n.grad = Tensor(n.value.shape, 0.0);
    return n.grad;
}

Var Tape::leaf(const Tensor& value, Tensor* grad_sink) {
    if (grad_sink != nullptr && !grad_sink->same_shape(value))
        throw std::invalid_argument("leaf: grad sink shape mismatch");
    Var v = push(value, grad_sink != nullptr, nullptr);
    nodes_.back().sink = grad_sink;
    return v;
}

Var Tape::constant(Tensor value) { return push(std::move(value), false, nullptr); }

Var Tape::constant_scalar(Scalar v) { return constant(Tensor({1}, v)); }

void Tape::backward(Var loss) {
    if (loss.tape != this) throw std::invalid_argument("backward: loss from another tape");
    const Node& ln = nodes_[static_cast<size_t>(loss.id)];
    if (ln.value.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
    grad_buf(loss.id)[0] = 1.0;
    for (int i = loss.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (!n.needs_grad || n.grad.data.empty()) continue;
        if (n.sink != nullptr)
            for (int64_t k = 0; k < n.grad.size(); ++k) (*n.sink)[k] += n.grad[k];
        if (n.back) n.back(*this);
    }
}

// ---- elementwise -----------------------------------------------------------

Var Tape::add(Var a, Var b) {
    check_same_tape(a, b, "add");
    require_same_shape(a.val(), b.val(), "add");
    Tensor out = a.val();
    for (int64_t i = 0; i < out.size(); ++i) out[i] += b.val()[i];
    const bool ng = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
    int ai = a.id, bi = b.id;
    Var o = push(std::move(out), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [ai, bi, oi](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            if (t.nodes_[ai].needs_grad) {
                Tensor& ga = t.grad_buf(ai);
                for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (t.nodes_[bi].needs_grad) {
                Tensor& gb = t.grad_buf(bi);
                for (int64_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        };
    return o;
}

Var Tape::sub(Var a, Var b) {
    check_same_tape(a, b, "sub");
    require_same_shape(a.val(), b.val(), "sub");
    Tensor out = a.val();
    for (int64_t i = 0; i < out.size(); ++i) out[i] -= b.val()[i];
    const bool ng = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
    int ai = a.id, bi = b.id;
    Var o = push(std::move(out), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [ai, bi, oi](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            if (t.nodes_[ai].needs_grad) {
                Tensor& ga = t.grad_buf(ai);
                for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (t.nodes_[bi].needs_grad) {
                Tensor& gb = t.grad_buf(bi);
                for (int64_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        };
    return o;
}

Var Tape::mul(Var a, Var b) {
    check_same_tape(a, b, "mul");
    require_same_shape(a.val(), b.val(), "mul");
    Tensor out = a.val();
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= b.val()[i];
    const bool ng = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
    int ai = a.id, bi = b.id;
    Var o = push(std::move(out), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [ai, bi, oi](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            const Tensor& av = t.nodes_[ai].value;
            const Tensor& bv = t.nodes_[bi].value;
            if (t.nodes_[ai].needs_grad) {
                Tensor& ga = t.grad_buf(ai);
                for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
            }
            if (t.nodes_[bi].needs_grad) {
                Tensor& gb = t.grad_buf(bi);
                for (int64_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
            }
        };
    return o;
}

Var Tape::neg(Var a) { return smul(a, -1.0); }

Var Tape::smul(Var a, Scalar s) {
    Tensor out = a.val();
    for (auto& v : out.data) v *= s;
    const bool ng = nodes_[a.id].needs_grad;
    int ai = a.id;
    Var o = push(std::move(out), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [ai, oi, s](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            Tensor& ga = t.grad_buf(ai);
            for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
        };
    return o;
}

Var Tape::scale_by(Var a, Var s) {
    check_same_tape(a, s, "scale_by");
    if (s.val().size() != 1) throw std::invalid_argument("scale_by: scale must have one element");
    const Scalar sv = s.val()[0];
    Tensor out = a.val();
    for (auto& v : out.data) v *= sv;
    const bool ng = nodes_[a.id].needs_grad || nodes_[s.id].needs_grad;
    int ai = a.id, si = s.id;
    Var o = push(std::move(out), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [ai, si, oi](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            const Tensor& av = t.nodes_[ai].value;
            const Scalar sv2 = t.nodes_[si].value[0];
            if (t.nodes_[ai].needs_grad) {
                Tensor& ga = t.grad_buf(ai);
                for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * sv2;
            }
            if (t.nodes_[si].needs_grad) {
                Tensor& gs = t.grad_buf(si);
                for (int64_t i = 0; i < g.size(); ++i) gs[0] += g[i] * av[i];
            }
        };
    return o;
}

Var Tape::sadd(Var a, Scalar s) {
    Tensor out = a.val();
    for (auto& v : out.data) v += s;
    const bool ng = nodes_[a.id].needs_grad;
    int ai = a.id;
    Var o = push(std::move(out), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [ai, oi](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            Tensor& ga = t.grad_buf(ai);
            for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        };
    return o;
}

Var Tape::tanh_(Var a) {
    Tensor out = a.val();
    for (auto& v : out.data) v = std::tanh(v);
    const bool ng = nodes_[a.id].needs_grad;
    int ai = a.id;
    Var o = push(std::move(out), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [ai, oi](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            const Tensor& y = t.nodes_[oi].value;
            Tensor& ga = t.grad_buf(ai);
            for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
        };
    return o;
}

Var Tape::sigmoid_(Var a) {
    Tensor out = a.val();
    for (auto& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
    const bool ng = nodes_[a.id].needs_grad;
    int ai = a.id;
    Var o = push(std::move(out), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [ai, oi](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            const Tensor& y = t.nodes_[oi].value;
            Tensor& ga = t.grad_buf(ai);
            for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
        };
    return o;
}

Var Tape::relu_(Var a) {
    Tensor out = a.val();
    for (auto& v : out.data) v = v > 0 ? v : 0.0;
    const bool ng = nodes_[a.id].needs_grad;
    int ai = a.id;
    Var o = push(std::move(out), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [ai, oi](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            const Tensor& x = t.nodes_[ai].value;
            Tensor& ga = t.grad_buf(ai);
            for (int64_t i = 0; i < g.size(); ++i)
                if (x[i] > 0) ga[i] += g[i];
        };
    return o;
}

Var Tape::exp_(Var a) {
    Tensor out = a.val();
    for (auto& v : out.data) v = std::exp(v);
    const bool ng = nodes_[a.id].needs_grad;
    int ai = a.id;
    Var o = push(std::move(out), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [ai, oi](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            const Tensor& y = t.nodes_[oi].value;
            Tensor& ga = t.grad_buf(ai);
            for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
        };
    return o;
}

Var Tape::log_(Var a) {
    Tensor out = a.val();
    for (auto& v : out.data) {
        if (!(v > 0.0)) throw NumericError("log: non-positive input " + std::to_string(v));
        v = std::log(v);
    }
    const bool ng = nodes_[a.id].needs_grad;
    int ai = a.id;
    Var o = push(std::move(out), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [ai, oi](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            const Tensor& x = t.nodes_[ai].value;
            Tensor& ga = t.grad_buf(ai);
            for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
        };
    return o;
}

Var Tape::abs_(Var a) {
    Tensor out = a.val();
    for (auto& v : out.data) v = std::abs(v);
    const bool ng = nodes_[a.id].needs_grad;
    int ai = a.id;
    Var o = push(std::move(out), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [ai, oi](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            const Tensor& x = t.nodes_[ai].value;
            Tensor& ga = t.grad_buf(ai);
            for (int64_t i = 0; i < g.size(); ++i)
                ga[i] += g[i] * (x[i] > 0 ? 1.0 : (x[i] < 0 ? -1.0 : 0.0));
        };
    return o;
}

Var Tape::square_(Var a) {
    Tensor out = a.val();
    for (auto& v : out.data) v *= v;
    const bool ng = nodes_[a.id].needs_grad;
    int ai = a.id;
    Var o = push(std::move(out), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [ai, oi](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            const Tensor& x = t.nodes_[ai].value;
            Tensor& ga = t.grad_buf(ai);
            for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * 2.0 * x[i];
        };
    return o;
}

// ---- matrix ----------------------------------------------------------------

Var Tape::matmul(Var a, Var b) {
    check_same_tape(a, b, "matmul");
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
        throw std::invalid_argument("matmul: bad shapes " + shape_str(av.shape) + " x " + shape_str(bv.shape));
    const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor out({m, n}, 0.0);
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
            const Scalar aip = av.at(i, p);
            if (aip == 0.0) continue;
            for (int j = 0; j < n; ++j) out.at(i, j) += aip * bv.at(p, j);
        }
    const bool ng = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
    int ai = a.id, bi = b.id;
    Var o = push(std::move(out), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [ai, bi, oi, m, k, n](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            const Tensor& av2 = t.nodes_[ai].value;
            const Tensor& bv2 = t.nodes_[bi].value;
            if (t.nodes_[ai].needs_grad) {
                Tensor& ga = t.grad_buf(ai);  // G * B^T
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        const Scalar gij = g.at(i, j);
                        if (gij == 0.0) continue;
                        for (int p = 0; p < k; ++p) ga.at(i, p) += gij * bv2.at(p, j);
                    }
            }
            if (t.nodes_[bi].needs_grad) {
                Tensor& gb = t.grad_buf(bi);  // A^T * G
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        const Scalar aip = av2.at(i, p);
                        if (aip == 0.0) continue;
                        for (int j = 0; j < n; ++j) gb.at(p, j) += aip * g.at(i, j);
                    }
            }
        };
    return o;
}

Var Tape::transpose2d(Var a) {
    const Tensor& av = a.val();
    if (av.rank() != 2) throw std::invalid_argument("transpose2d: rank != 2");
    const int m = av.dim(0), n = av.dim(1);
    Tensor out({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(j, i) = av.at(i, j);
    const bool ng = nodes_[a.id].needs_grad;
    int ai = a.id;
    Var o = push(std::move(out), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [ai, oi, m, n](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            Tensor& ga = t.grad_buf(ai);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) ga.at(i, j) += g.at(j, i);
        };
    return o;
}

Var Tape::add_rowvec(Var m, Var v) {
    check_same_tape(m, v, "add_rowvec");
    const Tensor& mv = m.val();
    const Tensor& vv = v.val();
    if (mv.rank() != 2 || vv.rank() != 1 || mv.dim(1) != vv.dim(0))
        throw std::invalid_argument("add_rowvec: bad shapes " + shape_str(mv.shape) + " + " + shape_str(vv.shape));
    const int B = mv.dim(0), d = mv.dim(1);
    Tensor out = mv;
    for (int b = 0; b < B; ++b)
        for (int j = 0; j < d; ++j) out.at(b, j) += vv[j];
    const bool ng = nodes_[m.id].needs_grad || nodes_[v.id].needs_grad;
    int mi = m.id, vi = v.id;
    Var o = push(std::move(out), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [mi, vi, oi, B, d](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            if (t.nodes_[mi].needs_grad) {
                Tensor& gm = t.grad_buf(mi);
                for (int64_t i = 0; i < g.size(); ++i) gm[i] += g[i];
            }
            if (t.nodes_[vi].needs_grad) {
                Tensor& gv = t.grad_buf(vi);
                for (int b = 0; b < B; ++b)
                    for (int j = 0; j < d; ++j) gv[j] += g.at(b, j);
            }
        };
    return o;
}

Var Tape::l2_normalize_rows(Var m) {
    const Tensor& mv = m.val();
    if (mv.rank() != 2) throw std::invalid_argument("l2_normalize_rows: rank != 2");
    const int B = mv.dim(0), d = mv.dim(1);
    Tensor out = mv;
    std::vector<Scalar> norms(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) {
        Scalar s = 0.0;
        for (int j = 0; j < d; ++j) s += mv.at(b, j) * mv.at(b, j);
        const Scalar n = std::sqrt(s);
        if (n == 0.0) throw NumericError("l2_normalize_rows: zero-norm row " + std::to_string(b));
        norms[static_cast<size_t>(b)] = n;
        for (int j = 0; j < d; ++j) out.at(b, j) /= n;
    }
    const bool ng = nodes_[m.id].needs_grad;
    int mi = m.id;
    Var o = push(std::move(out), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [mi, oi, B, d, norms](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            const Tensor& y = t.nodes_[oi].value;
            Tensor& gm = t.grad_buf(mi);
            for (int b = 0; b < B; ++b) {
                Scalar dot = 0.0;
                for (int j = 0; j < d; ++j) dot += y.at(b, j) * g.at(b, j);
                const Scalar inv = 1.0 / norms[static_cast<size_t>(b)];
                for (int j = 0; j < d; ++j) gm.at(b, j) += (g.at(b, j) - y.at(b, j) * dot) * inv;
            }
        };
    return o;
}

Var Tape::softmax_ce_diag(Var logits) {
    const Tensor& lv = logits.val();
    if (lv.rank() != 2 || lv.dim(0) != lv.dim(1))
        throw std::invalid_argument("softmax_ce_diag: expects square matrix, got " + shape_str(lv.shape));
    const int B = lv.dim(0);
    Tensor probs({B, B});
    Scalar loss = 0.0;
    for (int i = 0; i < B; ++i) {
        Scalar mx = lv.at(i, 0);
        for (int j = 1; j < B; ++j) mx = std::max(mx, lv.at(i, j));
        Scalar z = 0.0;
        for (int j = 0; j < B; ++j) z += std::exp(lv.at(i, j) - mx);
        const Scalar lse = mx + std::log(z);
        loss += lse - lv.at(i, i);
        for (int j = 0; j < B; ++j) probs.at(i, j) = std::exp(lv.at(i, j) - lse);
    }
    loss /= B;
    const bool ng = nodes_[logits.id].needs_grad;
    int li = logits.id;
    Var o = push(Tensor({1}, loss), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [li, oi, B, probs](Tape& t) {
            const Scalar g = t.nodes_[oi].grad[0];
            Tensor& gl = t.grad_buf(li);
            for (int i = 0; i < B; ++i)
                for (int j = 0; j < B; ++j)
                    gl.at(i, j) += g * (probs.at(i, j) - (i == j ? 1.0 : 0.0)) / B;
        };
    return o;
}

Var Tape::stack_rows(const std::vector<Var>& rows) {
    if (rows.empty()) throw std::invalid_argument("stack_rows: empty input");
    const int d = static_cast<int>(rows[0].val().size());
    const int B = static_cast<int>(rows.size());
    Tensor out({B, d});
    bool ng = false;
    std::vector<int> ids;
    ids.reserve(rows.size());
    for (int b = 0; b < B; ++b) {
        check_same_tape(rows[0], rows[b], "stack_rows");
        const Tensor& rv = rows[static_cast<size_t>(b)].val();
        if (rv.size() != d) throw std::invalid_argument("stack_rows: inconsistent row sizes");
        for (int j = 0; j < d; ++j) out.at(b, j) = rv[j];
        ng = ng || nodes_[rows[static_cast<size_t>(b)].id].needs_grad;
        ids.push_back(rows[static_cast<size_t>(b)].id);
    }
    Var o = push(std::move(out), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [ids, oi, d](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            for (size_t b = 0; b < ids.size(); ++b) {
                if (!t.nodes_[ids[b]].needs_grad) continue;
                Tensor& gr = t.grad_buf(ids[b]);
                for (int j = 0; j < d; ++j) gr[j] += g.at(static_cast<int>(b), j);
            }
        };
    return o;
}

Var Tape::concat_last(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_last: empty input");
    const int rank = parts[0].val().rank();
    if (rank != 1 && rank != 2) throw std::invalid_argument("concat_last: rank must be 1 or 2");
    const int B = rank == 2 ? parts[0].val().dim(0) : 1;
    int total = 0;
    bool ng = false;
    std::vector<int> ids, widths;
    for (const Var& p : parts) {
        check_same_tape(parts[0], p, "concat_last");
        const Tensor& pv = p.val();
        if (pv.rank() != rank || (rank == 2 && pv.dim(0) != B))
            throw std::invalid_argument("concat_last: inconsistent shapes");
        const int w = rank == 2 ? pv.dim(1) : pv.dim(0);
        widths.push_back(w);
        total += w;
        ids.push_back(p.id);
        ng = ng || nodes_[p.id].needs_grad;
    }
    Tensor out(rank == 2 ? std::vector<int>{B, total} : std::vector<int>{total});
    for (int b = 0; b < B; ++b) {
        int off = 0;
        for (size_t pi = 0; pi < ids.size(); ++pi) {
            const Tensor& pv = nodes_[static_cast<size_t>(ids[pi])].value;
            for (int j = 0; j < widths[pi]; ++j)
                out[static_cast<int64_t>(b) * total + off + j] = pv[static_cast<int64_t>(b) * widths[pi] + j];
            off += widths[pi];
        }
    }
    Var o = push(std::move(out), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [ids, widths, oi, B, total](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            for (int b = 0; b < B; ++b) {
                int off = 0;
                for (size_t pi = 0; pi < ids.size(); ++pi) {
                    if (t.nodes_[ids[pi]].needs_grad) {
                        Tensor& gp = t.grad_buf(ids[pi]);
                        for (int j = 0; j < widths[pi]; ++j)
                            gp[static_cast<int64_t>(b) * widths[pi] + j] += g[static_cast<int64_t>(b) * total + off + j];
                    }
                    off += widths[pi];
                }
            }
        };
    return o;
}

// ---- reductions ------------------------------------------------------------

Var Tape::sum_all(Var a) {
    Scalar s = 0.0;
    for (Scalar v : a.val().data) s += v;
    const bool ng = nodes_[a.id].needs_grad;
    int ai = a.id;
    Var o = push(Tensor({1}, s), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [ai, oi](Tape& t) {
            const Scalar g = t.nodes_[oi].grad[0];
            Tensor& ga = t.grad_buf(ai);
            for (auto& v : ga.data) v += g;
        };
    return o;
}

Var Tape::mean_all(Var a) {
    const int64_t n = a.val().size();
    Scalar s = 0.0;
    for (Scalar v : a.val().data) s += v;
    s /= static_cast<Scalar>(n);
    const bool ng = nodes_[a.id].needs_grad;
    int ai = a.id;
    Var o = push(Tensor({1}, s), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [ai, oi, n](Tape& t) {
            const Scalar g = t.nodes_[oi].grad[0] / static_cast<Scalar>(n);
            Tensor& ga = t.grad_buf(ai);
            for (auto& v : ga.data) v += g;
        };
    return o;
}

// ---- maps ------------------------------------------------------------------

Var Tape::conv2d(Var x, Var w, Var b, int stride, int pad) {
    check_same_tape(x, w, "conv2d");
    check_same_tape(x, b, "conv2d");
    const Tensor& xv = x.val();
    const Tensor& wv = w.val();
    const Tensor& bv = b.val();
    if (xv.rank() != 3 || wv.rank() != 4 || bv.rank() != 1)
        throw std::invalid_argument("conv2d: x must be (C,H,W), w (Co,Ci,kh,kw), b (Co)");
    const int ci = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
    const int co = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
    if (wv.dim(1) != ci || bv.dim(0) != co)
        throw std::invalid_argument("conv2d: channel mismatch " + shape_str(xv.shape) + " vs " + shape_str(wv.shape));
    if (stride < 1) throw std::invalid_argument("conv2d: stride < 1");
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (wd + 2 * pad - kw) / stride + 1;
    if (oh < 1 || ow < 1) throw std::invalid_argument("conv2d: kernel larger than padded input");

    auto widx = [ci, kh, kw](int o, int i, int ky, int kx) {
        return ((static_cast<int64_t>(o) * ci + i) * kh + ky) * kw + kx;
    };
    Tensor out({co, oh, ow});
    for (int o = 0; o < co; ++o)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                Scalar acc = bv[o];
                const int y0 = oy * stride - pad, x0 = ox * stride - pad;
                for (int i = 0; i < ci; ++i)
                    for (int ky = 0; ky < kh; ++ky) {
                        const int y = y0 + ky;
                        if (y < 0 || y >= h) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            const int xx = x0 + kx;
                            if (xx < 0 || xx >= wd) continue;
                            acc += xv.at(i, y, xx) * wv[widx(o, i, ky, kx)];
                        }
                    }
                out.at(o, oy, ox) = acc;
            }

    const bool ng = nodes_[x.id].needs_grad || nodes_[w.id].needs_grad || nodes_[b.id].needs_grad;
    int xi = x.id, wi = w.id, bi = b.id;
    Var o = push(std::move(out), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [=](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            const Tensor& xv2 = t.nodes_[xi].value;
            const Tensor& wv2 = t.nodes_[wi].value;
            const bool nx = t.nodes_[xi].needs_grad;
            const bool nw = t.nodes_[wi].needs_grad;
            const bool nb = t.nodes_[bi].needs_grad;
            Tensor* gx = nx ? &t.grad_buf(xi) : nullptr;
            Tensor* gw = nw ? &t.grad_buf(wi) : nullptr;
            Tensor* gb = nb ? &t.grad_buf(bi) : nullptr;
            for (int o2 = 0; o2 < co; ++o2)
                for (int oy = 0; oy < oh; ++oy)
                    for (int ox = 0; ox < ow; ++ox) {
                        const Scalar gv = g.at(o2, oy, ox);
                        if (gv == 0.0) continue;
                        if (nb) (*gb)[o2] += gv;
                        const int y0 = oy * stride - pad, x0 = ox * stride - pad;
                        for (int i = 0; i < ci; ++i)
                            for (int ky = 0; ky < kh; ++ky) {
                                const int y = y0 + ky;
                                if (y < 0 || y >= h) continue;
                                for (int kx = 0; kx < kw; ++kx) {
                                    const int xx = x0 + kx;
                                    if (xx < 0 || xx >= wd) continue;
                                    if (nx) gx->at(i, y, xx) += gv * wv2[widx(o2, i, ky, kx)];
                                    if (nw) (*gw)[widx(o2, i, ky, kx)] += gv * xv2.at(i, y, xx);
                                }
                            }
                    }
        };
    return o;
}

Var Tape::upsample2x(Var x) {
    const Tensor& xv = x.val();
    if (xv.rank() != 3) throw std::invalid_argument("upsample2x: expects (C,H,W)");
    const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    Tensor out({c, 2 * h, 2 * w});
    for (int i = 0; i < c; ++i)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
                const Scalar v = xv.at(i, y, xx);
                out.at(i, 2 * y, 2 * xx) = v;
                out.at(i, 2 * y, 2 * xx + 1) = v;
                out.at(i, 2 * y + 1, 2 * xx) = v;
                out.at(i, 2 * y + 1, 2 * xx + 1) = v;
            }
    const bool ng = nodes_[x.id].needs_grad;
    int xi = x.id;
    Var o = push(std::move(out), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [xi, oi, c, h, w](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            Tensor& gx = t.grad_buf(xi);
            for (int i = 0; i < c; ++i)
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx)
                        gx.at(i, y, xx) += g.at(i, 2 * y, 2 * xx) + g.at(i, 2 * y, 2 * xx + 1) +
                                           g.at(i, 2 * y + 1, 2 * xx) + g.at(i, 2 * y + 1, 2 * xx + 1);
        };
    return o;
}

Var Tape::avg_pool(Var x, int fh, int fw) {
    const Tensor& xv = x.val();
    if (xv.rank() != 3) throw std::invalid_argument("avg_pool: expects (C,H,W)");
    const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    if (h % fh != 0 || w % fw != 0)
        throw std::invalid_argument("avg_pool: dims not divisible by pool factors");
    const int oh = h / fh, ow = w / fw;
    const Scalar inv = 1.0 / (fh * fw);
    Tensor out({c, oh, ow}, 0.0);
    for (int i = 0; i < c; ++i)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) out.at(i, y / fh, xx / fw) += xv.at(i, y, xx) * inv;
    const bool ng = nodes_[x.id].needs_grad;
    int xi = x.id;
    Var o = push(std::move(out), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [xi, oi, c, h, w, fh, fw, inv](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            Tensor& gx = t.grad_buf(xi);
            for (int i = 0; i < c; ++i)
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx) gx.at(i, y, xx) += g.at(i, y / fh, xx / fw) * inv;
        };
    return o;
}

Var Tape::grid_warp(Var src, Var flow) {
    check_same_tape(src, flow, "grid_warp");
    const Tensor& sv = src.val();
    const Tensor& fv = flow.val();
    if (sv.rank() != 3 || fv.rank() != 3 || fv.dim(0) != 2 || fv.dim(1) != sv.dim(1) || fv.dim(2) != sv.dim(2))
        throw std::invalid_argument("grid_warp: src (C,H,W), flow (2,H,W) with matching H,W");
    if (!fv.all_finite()) throw NumericError("grid_warp: non-finite flow");
    const int c = sv.dim(0), h = sv.dim(1), w = sv.dim(2);

    // Per-pixel interpolation footprint, reused in backward.
    struct Cell {
        int x0, x1, y0, y1;
        Scalar wx, wy;
        bool cx, cy;  // clamped: no gradient to flow in that axis
    };
    std::vector<Cell> cells(static_cast<size_t>(h) * w);
    Tensor out({c, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            Scalar sx = x + fv.at(0, y, x);
            Scalar sy = y + fv.at(1, y, x);
            Cell cl{};
            cl.cx = sx <= 0.0 || sx >= w - 1;
            cl.cy = sy <= 0.0 || sy >= h - 1;
            sx = std::clamp(sx, 0.0, static_cast<Scalar>(w - 1));
            sy = std::clamp(sy, 0.0, static_cast<Scalar>(h - 1));
            cl.x0 = std::min(static_cast<int>(sx), w - 2 >= 0 ? w - 2 : 0);
            cl.y0 = std::min(static_cast<int>(sy), h - 2 >= 0 ? h - 2 : 0);
            cl.x1 = std::min(cl.x0 + 1, w - 1);
            cl.y1 = std::min(cl.y0 + 1, h - 1);
            cl.wx = sx - cl.x0;
            cl.wy = sy - cl.y0;
            cells[static_cast<size_t>(y) * w + x] = cl;
            for (int i = 0; i < c; ++i) {
                const Scalar v00 = sv.at(i, cl.y0, cl.x0), v01 = sv.at(i, cl.y0, cl.x1);
                const Scalar v10 = sv.at(i, cl.y1, cl.x0), v11 = sv.at(i, cl.y1, cl.x1);
                out.at(i, y, x) = (1 - cl.wy) * ((1 - cl.wx) * v00 + cl.wx * v01) +
                                  cl.wy * ((1 - cl.wx) * v10 + cl.wx * v11);
            }
        }

    const bool ng = nodes_[src.id].needs_grad || nodes_[flow.id].needs_grad;
    int si = src.id, fi = flow.id;
    Var o = push(std::move(out), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [si, fi, oi, c, h, w, cells](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            const Tensor& sv2 = t.nodes_[si].value;
            const bool ns = t.nodes_[si].needs_grad;
            const bool nf = t.nodes_[fi].needs_grad;
            Tensor* gs = ns ? &t.grad_buf(si) : nullptr;
            Tensor* gf = nf ? &t.grad_buf(fi) : nullptr;
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const auto& cl = cells[static_cast<size_t>(y) * w + x];
                    Scalar dsx = 0.0, dsy = 0.0;
                    for (int i = 0; i < c; ++i) {
                        const Scalar gv = g.at(i, y, x);
                        if (gv == 0.0) continue;
                        const Scalar v00 = sv2.at(i, cl.y0, cl.x0), v01 = sv2.at(i, cl.y0, cl.x1);
                        const Scalar v10 = sv2.at(i, cl.y1, cl.x0), v11 = sv2.at(i, cl.y1, cl.x1);
                        if (ns) {
                            gs->at(i, cl.y0, cl.x0) += gv * (1 - cl.wy) * (1 - cl.wx);
                            gs->at(i, cl.y0, cl.x1) += gv * (1 - cl.wy) * cl.wx;
                            gs->at(i, cl.y1, cl.x0) += gv * cl.wy * (1 - cl.wx);
                            gs->at(i, cl.y1, cl.x1) += gv * cl.wy * cl.wx;
                        }
                        dsx += gv * ((1 - cl.wy) * (v01 - v00) + cl.wy * (v11 - v10));
                        dsy += gv * ((1 - cl.wx) * (v10 - v00) + cl.wx * (v11 - v01));
                    }
                    if (nf) {
                        if (!cl.cx) gf->at(0, y, x) += dsx;
                        if (!cl.cy) gf->at(1, y, x) += dsy;
                    }
                }
        };
    return o;
}

Var Tape::mul_map(Var x, Var m) {
    check_same_tape(x, m, "mul_map");
    const Tensor& xv = x.val();
    const Tensor& mv = m.val();
    if (xv.rank() != 3 || mv.rank() != 3 || mv.dim(0) != 1 || mv.dim(1) != xv.dim(1) || mv.dim(2) != xv.dim(2))
        throw std::invalid_argument("mul_map: x (C,H,W), m (1,H,W)");
    const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    Tensor out = xv;
    for (int i = 0; i < c; ++i)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) out.at(i, y, xx) *= mv.at(0, y, xx);
    const bool ng = nodes_[x.id].needs_grad || nodes_[m.id].needs_grad;
    int xi = x.id, mi = m.id;
    Var o = push(std::move(out), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [xi, mi, oi, c, h, w](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            const Tensor& xv2 = t.nodes_[xi].value;
            const Tensor& mv2 = t.nodes_[mi].value;
            if (t.nodes_[xi].needs_grad) {
                Tensor& gx = t.grad_buf(xi);
                for (int i = 0; i < c; ++i)
                    for (int y = 0; y < h; ++y)
                        for (int xx = 0; xx < w; ++xx) gx.at(i, y, xx) += g.at(i, y, xx) * mv2.at(0, y, xx);
            }
            if (t.nodes_[mi].needs_grad) {
                Tensor& gm = t.grad_buf(mi);
                for (int i = 0; i < c; ++i)
                    for (int y = 0; y < h; ++y)
                        for (int xx = 0; xx < w; ++xx) gm.at(0, y, xx) += g.at(i, y, xx) * xv2.at(i, y, xx);
            }
        };
    return o;
}

Var Tape::channel_scale(Var x, Var s) {
    check_same_tape(x, s, "channel_scale");
    const Tensor& xv = x.val();
    const Tensor& sv = s.val();
    if (xv.rank() != 3 || sv.rank() != 1 || sv.dim(0) != xv.dim(0))
        throw std::invalid_argument("channel_scale: x (C,H,W), s (C,)");
    const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    Tensor out = xv;
    for (int i = 0; i < c; ++i)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) out.at(i, y, xx) *= sv[i];
    const bool ng = nodes_[x.id].needs_grad || nodes_[s.id].needs_grad;
    int xi = x.id, si = s.id;
    Var o = push(std::move(out), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [xi, si, oi, c, h, w](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            const Tensor& xv2 = t.nodes_[xi].value;
            const Tensor& sv2 = t.nodes_[si].value;
            if (t.nodes_[xi].needs_grad) {
                Tensor& gx = t.grad_buf(xi);
                for (int i = 0; i < c; ++i)
                    for (int y = 0; y < h; ++y)
                        for (int xx = 0; xx < w; ++xx) gx.at(i, y, xx) += g.at(i, y, xx) * sv2[i];
            }
            if (t.nodes_[si].needs_grad) {
                Tensor& gs = t.grad_buf(si);
                for (int i = 0; i < c; ++i)
                    for (int y = 0; y < h; ++y)
                        for (int xx = 0; xx < w; ++xx) gs[i] += g.at(i, y, xx) * xv2.at(i, y, xx);
            }
        };
    return o;
}

Var Tape::channel_mean(Var x) {
    const Tensor& xv = x.val();
    if (xv.rank() != 3) throw std::invalid_argument("channel_mean: expects (C,H,W)");
    const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    const Scalar inv = 1.0 / (static_cast<Scalar>(h) * w);
    Tensor out({c}, 0.0);
    for (int i = 0; i < c; ++i)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) out[i] += xv.at(i, y, xx) * inv;
    const bool ng = nodes_[x.id].needs_grad;
    int xi = x.id;
    Var o = push(std::move(out), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [xi, oi, c, h, w, inv](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            Tensor& gx = t.grad_buf(xi);
            for (int i = 0; i < c; ++i)
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx) gx.at(i, y, xx) += g[i] * inv;
        };
    return o;
}

Var Tape::broadcast_to_map(Var v, int h, int w) {
    const Tensor& vv = v.val();
    if (vv.rank() != 1) throw std::invalid_argument("broadcast_to_map: expects (C,)");
    const int c = vv.dim(0);
    Tensor out({c, h, w});
    for (int i = 0; i < c; ++i)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) out.at(i, y, xx) = vv[i];
    const bool ng = nodes_[v.id].needs_grad;
    int vi = v.id;
    Var o = push(std::move(out), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [vi, oi, c, h, w](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            Tensor& gv = t.grad_buf(vi);
            for (int i = 0; i < c; ++i)
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx) gv[i] += g.at(i, y, xx);
        };
    return o;
}

Var Tape::concat_channels(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_channels: empty input");
    const Tensor& first = parts[0].val();
    if (first.rank() != 3) throw std::invalid_argument("concat_channels: expects (C,H,W)");
    const int h = first.dim(1), w = first.dim(2);
    int ctot = 0;
    bool ng = false;
    std::vector<int> ids, chans;
    for (const Var& p : parts) {
        check_same_tape(parts[0], p, "concat_channels");
        const Tensor& pv = p.val();
        if (pv.rank() != 3 || pv.dim(1) != h || pv.dim(2) != w)
            throw std::invalid_argument("concat_channels: inconsistent shapes");
        ids.push_back(p.id);
        chans.push_back(pv.dim(0));
        ctot += pv.dim(0);
        ng = ng || nodes_[p.id].needs_grad;
    }
    Tensor out({ctot, h, w});
    int coff = 0;
    for (size_t pi = 0; pi < ids.size(); ++pi) {
        const Tensor& pv = nodes_[static_cast<size_t>(ids[pi])].value;
        for (int i = 0; i < chans[pi]; ++i)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) out.at(coff + i, y, x) = pv.at(i, y, x);
        coff += chans[pi];
    }
    Var o = push(std::move(out), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [ids, chans, oi, h, w](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            int coff2 = 0;
            for (size_t pi = 0; pi < ids.size(); ++pi) {
                if (t.nodes_[ids[pi]].needs_grad) {
                    Tensor& gp = t.grad_buf(ids[pi]);
                    for (int i = 0; i < chans[pi]; ++i)
                        for (int y = 0; y < h; ++y)
                            for (int x = 0; x < w; ++x) gp.at(i, y, x) += g.at(coff2 + i, y, x);
                }
                coff2 += chans[pi];
            }
        };
    return o;
}

// ---- structure -------------------------------------------------------------

Var Tape::reshape(Var a, std::vector<int> shape) {
    Tensor out = a.val().reshaped(shape);
    const bool ng = nodes_[a.id].needs_grad;
    int ai = a.id;
    Var o = push(std::move(out), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [ai, oi](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            Tensor& ga = t.grad_buf(ai);
            for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        };
    return o;
}

Var Tape::stop_gradient(Var a) { return push(a.val(), false, nullptr); }

Var Tape::gather_rows(Var table, std::vector<int> indices) {
    const Tensor& tv = table.val();
    if (tv.rank() != 2) throw std::invalid_argument("gather_rows: table must be 2-D");
    const int n = tv.dim(0), d = tv.dim(1);
    for (int idx : indices)
        if (idx < 0 || idx >= n) throw std::out_of_range("gather_rows: index out of range");
    const int m = static_cast<int>(indices.size());
    Tensor out({m, d});
    for (int r = 0; r < m; ++r)
        for (int j = 0; j < d; ++j) out.at(r, j) = tv.at(indices[static_cast<size_t>(r)], j);
    const bool ng = nodes_[table.id].needs_grad;
    int ti = table.id;
    Var o = push(std::move(out), ng, nullptr);
    int oi = o.id;
    if (ng)
        nodes_[oi].back = [ti, oi, indices, d](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            Tensor& gt = t.grad_buf(ti);
            for (size_t r = 0; r < indices.size(); ++r)
                for (int j = 0; j < d; ++j) gt.at(indices[r], j) += g.at(static_cast<int>(r), j);
        };
    return o;
}

}  // namespace ptalk::ad
