#include "difflare/tensor.hpp"

#include <Eigen/Dense>
#include <cassert>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include "difflare/errors.hpp"

namespace difflare::ag {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<Mat>;
using CMapM = Eigen::Map<const Mat>;

namespace {

size_t shape_numel(const std::vector<int>& s) {
    size_t n = 1;
    for (int d : s) n *= static_cast<size_t>(d);
    return n;
}

Tensor result(std::vector<int> shape, bool rg) {
    auto t = std::make_shared<Node>();
    t->shape = std::move(shape);
    t->v.resize(shape_numel(t->shape));
    t->rg = rg;
    if (rg) t->g.assign(t->v.size(), 0.0);
    return t;
}

bool any_rg(const Tensor& a, const Tensor& b) { return a->rg || b->rg; }
bool any_rg(const Tensor& a, const Tensor& b, const Tensor& c) {
    return a->rg || b->rg || c->rg;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a->shape != b->shape)
        throw DimensionError(std::string(op) + ": shape mismatch");
}

}  // namespace

Tensor make(std::vector<int> shape, bool requires_grad) {
    return result(std::move(shape), requires_grad);
}

Tensor constant(std::vector<int> shape, std::vector<double> values) {
    auto t = result(std::move(shape), false);
    if (t->v.size() != values.size())
        throw DimensionError("constant: value count does not match shape");
    t->v = std::move(values);
    return t;
}

Tensor zeros_like(const Tensor& x) { return result(x->shape, false); }

void backward(const Tensor& loss) {
    if (loss->numel() != 1) throw DimensionError("backward: loss must be scalar");
    // iterative post-order topo sort
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.push_back({loss.get(), 0});
    seen.insert(loss.get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node* p = n->parents[i].get();
            ++i;
            if (p->rg && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    loss->g.assign(1, 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->back) n->back(*n);
    }
}

// ---------------- elementwise ----------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    auto o = result(a->shape, any_rg(a, b));
    for (size_t i = 0; i < o->v.size(); ++i) o->v[i] = a->v[i] + b->v[i];
    if (o->rg) {
        o->parents = {a, b};
        o->back = [a, b](Node& n) {
            if (a->rg)
                for (size_t i = 0; i < n.g.size(); ++i) a->g[i] += n.g[i];
            if (b->rg)
                for (size_t i = 0; i < n.g.size(); ++i) b->g[i] += n.g[i];
        };
    }
    return o;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    auto o = result(a->shape, any_rg(a, b));
    for (size_t i = 0; i < o->v.size(); ++i) o->v[i] = a->v[i] - b->v[i];
    if (o->rg) {
        o->parents = {a, b};
        o->back = [a, b](Node& n) {
            if (a->rg)
                for (size_t i = 0; i < n.g.size(); ++i) a->g[i] += n.g[i];
            if (b->rg)
                for (size_t i = 0; i < n.g.size(); ++i) b->g[i] -= n.g[i];
        };
    }
    return o;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    auto o = result(a->shape, any_rg(a, b));
    for (size_t i = 0; i < o->v.size(); ++i) o->v[i] = a->v[i] * b->v[i];
    if (o->rg) {
        o->parents = {a, b};
        o->back = [a, b](Node& n) {
            if (a->rg)
                for (size_t i = 0; i < n.g.size(); ++i) a->g[i] += n.g[i] * b->v[i];
            if (b->rg)
                for (size_t i = 0; i < n.g.size(); ++i) b->g[i] += n.g[i] * a->v[i];
        };
    }
    return o;
}

Tensor scale(const Tensor& a, double s) {
    auto o = result(a->shape, a->rg);
    for (size_t i = 0; i < o->v.size(); ++i) o->v[i] = a->v[i] * s;
    if (o->rg) {
        o->parents = {a};
        o->back = [a, s](Node& n) {
            for (size_t i = 0; i < n.g.size(); ++i) a->g[i] += n.g[i] * s;
        };
    }
    return o;
}

Tensor add_scalar(const Tensor& a, double s) {
    auto o = result(a->shape, a->rg);
    for (size_t i = 0; i < o->v.size(); ++i) o->v[i] = a->v[i] + s;
    if (o->rg) {
        o->parents = {a};
        o->back = [a](Node& n) {
            for (size_t i = 0; i < n.g.size(); ++i) a->g[i] += n.g[i];
        };
    }
    return o;
}

Tensor mul_mask(const Tensor& a, const std::vector<double>& mask) {
    if (a->v.size() != mask.size()) throw DimensionError("mul_mask: size mismatch");
    auto o = result(a->shape, a->rg);
    for (size_t i = 0; i < o->v.size(); ++i) o->v[i] = a->v[i] * mask[i];
    if (o->rg) {
        o->parents = {a};
        o->back = [a, mask](Node& n) {
            for (size_t i = 0; i < n.g.size(); ++i) a->g[i] += n.g[i] * mask[i];
        };
    }
    return o;
}

Tensor silu(const Tensor& x) {
    auto o = result(x->shape, x->rg);
    for (size_t i = 0; i < o->v.size(); ++i) {
        double s = 1.0 / (1.0 + std::exp(-x->v[i]));
        o->v[i] = x->v[i] * s;
    }
    if (o->rg) {
        o->parents = {x};
        o->back = [x](Node& n) {
            for (size_t i = 0; i < n.g.size(); ++i) {
                double s = 1.0 / (1.0 + std::exp(-x->v[i]));
                x->g[i] += n.g[i] * s * (1.0 + x->v[i] * (1.0 - s));
            }
        };
    }
    return o;
}

Tensor relu(const Tensor& x) {
    auto o = result(x->shape, x->rg);
    for (size_t i = 0; i < o->v.size(); ++i) o->v[i] = x->v[i] > 0 ? x->v[i] : 0.0;
    if (o->rg) {
        o->parents = {x};
        o->back = [x](Node& n) {
            for (size_t i = 0; i < n.g.size(); ++i)
                if (x->v[i] > 0) x->g[i] += n.g[i];
        };
    }
    return o;
}

Tensor leaky_relu(const Tensor& x, double slope) {
    auto o = result(x->shape, x->rg);
    for (size_t i = 0; i < o->v.size(); ++i)
        o->v[i] = x->v[i] > 0 ? x->v[i] : slope * x->v[i];
    if (o->rg) {
        o->parents = {x};
        o->back = [x, slope](Node& n) {
            for (size_t i = 0; i < n.g.size(); ++i)
                x->g[i] += n.g[i] * (x->v[i] > 0 ? 1.0 : slope);
        };
    }
    return o;
}

Tensor sigmoid(const Tensor& x) {
    auto o = result(x->shape, x->rg);
    for (size_t i = 0; i < o->v.size(); ++i) o->v[i] = 1.0 / (1.0 + std::exp(-x->v[i]));
    if (o->rg) {
        o->parents = {x};
        o->back = [x](Node& n) {
            for (size_t i = 0; i < n.g.size(); ++i) {
                double y = n.v[i];
                x->g[i] += n.g[i] * y * (1.0 - y);
            }
        };
    }
    return o;
}

// ---------------- structure ----------------

Tensor reshape(const Tensor& x, std::vector<int> shape) {
    if (shape_numel(shape) != x->numel()) throw DimensionError("reshape: numel mismatch");
    auto o = result(std::move(shape), x->rg);
    o->v = x->v;
    if (o->rg) {
        o->parents = {x};
        o->back = [x](Node& n) {
            for (size_t i = 0; i < n.g.size(); ++i) x->g[i] += n.g[i];
        };
    }
    return o;
}

Tensor detach(const Tensor& x) {
    auto o = result(x->shape, false);
    o->v = x->v;
    return o;
}

Tensor concat_ch(const Tensor& a, const Tensor& b) {
    if (a->shape.size() != 3 || b->shape.size() != 3 || a->shape[1] != b->shape[1] ||
        a->shape[2] != b->shape[2])
        throw DimensionError("concat_ch: spatial shape mismatch");
    int ca = a->shape[0], cb = b->shape[0];
    auto o = result({ca + cb, a->shape[1], a->shape[2]}, any_rg(a, b));
    size_t na = a->v.size(), nb = b->v.size();
    std::memcpy(o->v.data(), a->v.data(), na * sizeof(double));
    std::memcpy(o->v.data() + na, b->v.data(), nb * sizeof(double));
    if (o->rg) {
        o->parents = {a, b};
        o->back = [a, b, na](Node& n) {
            if (a->rg)
                for (size_t i = 0; i < na; ++i) a->g[i] += n.g[i];
            if (b->rg)
                for (size_t i = 0; i < b->g.size(); ++i) b->g[i] += n.g[na + i];
        };
    }
    return o;
}

Tensor chw_to_nc(const Tensor& x) {
    if (x->shape.size() != 3) throw DimensionError("chw_to_nc: want rank 3");
    int c = x->shape[0], h = x->shape[1], w = x->shape[2];
    int n = h * w;
    auto o = result({n, c}, x->rg);
    for (int ch = 0; ch < c; ++ch)
        for (int p = 0; p < n; ++p) o->v[static_cast<size_t>(p) * c + ch] = x->v[static_cast<size_t>(ch) * n + p];
    if (o->rg) {
        o->parents = {x};
        o->back = [x, c, n](Node& nn) {
            for (int ch = 0; ch < c; ++ch)
                for (int p = 0; p < n; ++p)
                    x->g[static_cast<size_t>(ch) * n + p] += nn.g[static_cast<size_t>(p) * c + ch];
        };
    }
    return o;
}

Tensor nc_to_chw(const Tensor& x, int h, int w) {
    if (x->shape.size() != 2 || x->shape[0] != h * w)
        throw DimensionError("nc_to_chw: shape mismatch");
    int c = x->shape[1], n = h * w;
    auto o = result({c, h, w}, x->rg);
    for (int ch = 0; ch < c; ++ch)
        for (int p = 0; p < n; ++p) o->v[static_cast<size_t>(ch) * n + p] = x->v[static_cast<size_t>(p) * c + ch];
    if (o->rg) {
        o->parents = {x};
        o->back = [x, c, n](Node& nn) {
            for (int ch = 0; ch < c; ++ch)
                for (int p = 0; p < n; ++p)
                    x->g[static_cast<size_t>(p) * c + ch] += nn.g[static_cast<size_t>(ch) * n + p];
        };
    }
    return o;
}

Tensor select_row(const Tensor& table, int row) {
    if (table->shape.size() != 2) throw DimensionError("select_row: want rank 2");
    int rows = table->shape[0], d = table->shape[1];
    if (row < 0 || row >= rows) throw ParameterError("select_row: row out of range");
    auto o = result({d}, table->rg);
    std::memcpy(o->v.data(), table->v.data() + static_cast<size_t>(row) * d, d * sizeof(double));
    if (o->rg) {
        o->parents = {table};
        o->back = [table, row, d](Node& n) {
            for (int i = 0; i < d; ++i) table->g[static_cast<size_t>(row) * d + i] += n.g[i];
        };
    }
    return o;
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& rows) {
    if (table->shape.size() != 2) throw DimensionError("gather_rows: want rank 2");
    int nrows = table->shape[0], d = table->shape[1];
    auto o = result({static_cast<int>(rows.size()), d}, table->rg);
    for (size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= nrows) throw ParameterError("gather_rows: index range");
        std::memcpy(o->v.data() + i * d, table->v.data() + static_cast<size_t>(rows[i]) * d,
                    d * sizeof(double));
    }
    if (o->rg) {
        o->parents = {table};
        o->back = [table, rows, d](Node& n) {
            for (size_t i = 0; i < rows.size(); ++i)
                for (int j = 0; j < d; ++j)
                    table->g[static_cast<size_t>(rows[i]) * d + j] += n.g[i * d + j];
        };
    }
    return o;
}

// ---------------- linear algebra ----------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0])
        throw DimensionError("matmul: incompatible shapes");
    int m = a->shape[0], k = a->shape[1], n = b->shape[1];
    auto o = result({m, n}, any_rg(a, b));
    CMapM A(a->v.data(), m, k), B(b->v.data(), k, n);
    MapM O(o->v.data(), m, n);
    O.noalias() = A * B;
    if (o->rg) {
        o->parents = {a, b};
        o->back = [a, b, m, k, n](Node& nn) {
            CMapM G(nn.g.data(), m, n);
            CMapM A2(a->v.data(), m, k), B2(b->v.data(), k, n);
            if (a->rg) {
                MapM GA(a->g.data(), m, k);
                GA.noalias() += G * B2.transpose();
            }
            if (b->rg) {
                MapM GB(b->g.data(), k, n);
                GB.noalias() += A2.transpose() * G;
            }
        };
    }
    return o;
}

Tensor transpose(const Tensor& a) {
    if (a->shape.size() != 2) throw DimensionError("transpose: want rank 2");
    int m = a->shape[0], n = a->shape[1];
    auto o = result({n, m}, a->rg);
    CMapM A(a->v.data(), m, n);
    MapM O(o->v.data(), n, m);
    O = A.transpose();
    if (o->rg) {
        o->parents = {a};
        o->back = [a, m, n](Node& nn) {
            CMapM G(nn.g.data(), n, m);
            MapM GA(a->g.data(), m, n);
            GA += G.transpose();
        };
    }
    return o;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x->shape.size() != 1 || w->shape.size() != 2 || w->shape[1] != x->shape[0] ||
        b->shape.size() != 1 || b->shape[0] != w->shape[0])
        throw DimensionError("linear: incompatible shapes");
    int out = w->shape[0], in = w->shape[1];
    auto o = result({out}, any_rg(x, w, b));
    for (int i = 0; i < out; ++i) {
        double s = b->v[i];
        const double* wr = w->v.data() + static_cast<size_t>(i) * in;
        for (int j = 0; j < in; ++j) s += wr[j] * x->v[j];
        o->v[i] = s;
    }
    if (o->rg) {
        o->parents = {x, w, b};
        o->back = [x, w, b, out, in](Node& n) {
            for (int i = 0; i < out; ++i) {
                double gi = n.g[i];
                const double* wr = w->v.data() + static_cast<size_t>(i) * in;
                if (x->rg)
                    for (int j = 0; j < in; ++j) x->g[j] += gi * wr[j];
                if (w->rg) {
                    double* gw = w->g.data() + static_cast<size_t>(i) * in;
                    for (int j = 0; j < in; ++j) gw[j] += gi * x->v[j];
                }
                if (b->rg) b->g[i] += gi;
            }
        };
    }
    return o;
}

Tensor softmax_rows(const Tensor& x) {
    if (x->shape.size() != 2) throw DimensionError("softmax_rows: want rank 2");
    int n = x->shape[0], m = x->shape[1];
    auto o = result({n, m}, x->rg);
    for (int r = 0; r < n; ++r) {
        const double* xi = x->v.data() + static_cast<size_t>(r) * m;
        double* oi = o->v.data() + static_cast<size_t>(r) * m;
        double mx = xi[0];
        for (int j = 1; j < m; ++j) mx = std::max(mx, xi[j]);
        double s = 0;
        for (int j = 0; j < m; ++j) {
            oi[j] = std::exp(xi[j] - mx);
            s += oi[j];
        }
        for (int j = 0; j < m; ++j) oi[j] /= s;
    }
    if (o->rg) {
        o->parents = {x};
        o->back = [x, n, m](Node& nn) {
            for (int r = 0; r < n; ++r) {
                const double* y = nn.v.data() + static_cast<size_t>(r) * m;
                const double* gy = nn.g.data() + static_cast<size_t>(r) * m;
                double* gx = x->g.data() + static_cast<size_t>(r) * m;
                double dot = 0;
                for (int j = 0; j < m; ++j) dot += gy[j] * y[j];
                for (int j = 0; j < m; ++j) gx[j] += y[j] * (gy[j] - dot);
            }
        };
    }
    return o;
}

// ---------------- conv / spatial ----------------

namespace {

void im2col(const double* x, int c, int h, int w, int kh, int kw, int stride, int pad,
            int ho, int wo, double* cols) {
    // cols: [c*kh*kw, ho*wo]
    int ncols = ho * wo;
    for (int ci = 0; ci < c; ++ci) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                double* row = cols + (static_cast<size_t>(ci) * kh * kw + ki * kw + kj) * ncols;
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy * stride + ki - pad;
                    for (int ox = 0; ox < wo; ++ox) {
                        int ix = ox * stride + kj - pad;
                        row[oy * wo + ox] =
                            (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                ? x[(static_cast<size_t>(ci) * h + iy) * w + ix]
                                : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_add(const double* cols, int c, int h, int w, int kh, int kw, int stride, int pad,
                int ho, int wo, double* gx) {
    int ncols = ho * wo;
    for (int ci = 0; ci < c; ++ci) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                const double* row = cols + (static_cast<size_t>(ci) * kh * kw + ki * kw + kj) * ncols;
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy * stride + ki - pad;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < wo; ++ox) {
                        int ix = ox * stride + kj - pad;
                        if (ix < 0 || ix >= w) continue;
                        gx[(static_cast<size_t>(ci) * h + iy) * w + ix] += row[oy * wo + ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    if (x->shape.size() != 3 || w->shape.size() != 4 || w->shape[1] != x->shape[0])
        throw DimensionError("conv2d: incompatible shapes");
    int c = x->shape[0], h = x->shape[1], wd = x->shape[2];
    int cout = w->shape[0], kh = w->shape[2], kw = w->shape[3];
    if (b->shape.size() != 1 || b->shape[0] != cout)
        throw DimensionError("conv2d: bad bias shape");
    int ho = (h + 2 * pad - kh) / stride + 1;
    int wo = (wd + 2 * pad - kw) / stride + 1;
    if (ho <= 0 || wo <= 0) throw DimensionError("conv2d: output would be empty");
    int krows = c * kh * kw, ncols = ho * wo;

    std::vector<double> cols(static_cast<size_t>(krows) * ncols);
    im2col(x->v.data(), c, h, wd, kh, kw, stride, pad, ho, wo, cols.data());

    auto o = result({cout, ho, wo}, any_rg(x, w, b));
    CMapM W(w->v.data(), cout, krows), C(cols.data(), krows, ncols);
    MapM O(o->v.data(), cout, ncols);
    O.noalias() = W * C;
    for (int oc = 0; oc < cout; ++oc)
        for (int p = 0; p < ncols; ++p) o->v[static_cast<size_t>(oc) * ncols + p] += b->v[oc];

    if (o->rg) {
        o->parents = {x, w, b};
        auto cols_sh = std::make_shared<std::vector<double>>(std::move(cols));
        o->back = [x, w, b, cols_sh, c, h, wd, kh, kw, stride, pad, ho, wo, cout, krows,
                   ncols](Node& n) {
            CMapM G(n.g.data(), cout, ncols);
            if (w->rg) {
                CMapM C2(cols_sh->data(), krows, ncols);
                MapM GW(w->g.data(), cout, krows);
                GW.noalias() += G * C2.transpose();
            }
            if (b->rg) {
                for (int oc = 0; oc < cout; ++oc) {
                    double s = 0;
                    for (int p = 0; p < ncols; ++p) s += n.g[static_cast<size_t>(oc) * ncols + p];
                    b->g[oc] += s;
                }
            }
            if (x->rg) {
                std::vector<double> gcols(static_cast<size_t>(krows) * ncols);
                CMapM W2(w->v.data(), cout, krows);
                MapM GC(gcols.data(), krows, ncols);
                GC.noalias() = W2.transpose() * G;
                col2im_add(gcols.data(), c, h, wd, kh, kw, stride, pad, ho, wo, x->g.data());
            }
        };
    }
    return o;
}

Tensor upsample2x(const Tensor& x) {
    if (x->shape.size() != 3) throw DimensionError("upsample2x: want rank 3");
    int c = x->shape[0], h = x->shape[1], w = x->shape[2];
    auto o = result({c, 2 * h, 2 * w}, x->rg);
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx)
                o->v[(static_cast<size_t>(ci) * 2 * h + y) * 2 * w + xx] =
                    x->v[(static_cast<size_t>(ci) * h + y / 2) * w + xx / 2];
    if (o->rg) {
        o->parents = {x};
        o->back = [x, c, h, w](Node& n) {
            for (int ci = 0; ci < c; ++ci)
                for (int y = 0; y < 2 * h; ++y)
                    for (int xx = 0; xx < 2 * w; ++xx)
                        x->g[(static_cast<size_t>(ci) * h + y / 2) * w + xx / 2] +=
                            n.g[(static_cast<size_t>(ci) * 2 * h + y) * 2 * w + xx];
        };
    }
    return o;
}

Tensor avg_pool2d(const Tensor& x, int factor) {
    if (x->shape.size() != 3) throw DimensionError("avg_pool2d: want rank 3");
    int c = x->shape[0], h = x->shape[1], w = x->shape[2];
    if (h % factor || w % factor) throw DimensionError("avg_pool2d: indivisible shape");
    int ho = h / factor, wo = w / factor;
    double inv = 1.0 / (factor * factor);
    auto o = result({c, ho, wo}, x->rg);
    for (int ci = 0; ci < c; ++ci)
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                double s = 0;
                for (int ky = 0; ky < factor; ++ky)
                    for (int kx = 0; kx < factor; ++kx)
                        s += x->v[(static_cast<size_t>(ci) * h + oy * factor + ky) * w +
                                  ox * factor + kx];
                o->v[(static_cast<size_t>(ci) * ho + oy) * wo + ox] = s * inv;
            }
    if (o->rg) {
        o->parents = {x};
        o->back = [x, c, h, w, ho, wo, factor, inv](Node& n) {
            for (int ci = 0; ci < c; ++ci)
                for (int oy = 0; oy < ho; ++oy)
                    for (int ox = 0; ox < wo; ++ox) {
                        double gv = n.g[(static_cast<size_t>(ci) * ho + oy) * wo + ox] * inv;
                        for (int ky = 0; ky < factor; ++ky)
                            for (int kx = 0; kx < factor; ++kx)
                                x->g[(static_cast<size_t>(ci) * h + oy * factor + ky) * w +
                                     ox * factor + kx] += gv;
                    }
        };
    }
    return o;
}

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups,
                  double eps) {
    if (x->shape.size() != 3) throw DimensionError("group_norm: want rank 3");
    int c = x->shape[0], h = x->shape[1], w = x->shape[2];
    if (c % groups) throw DimensionError("group_norm: channels not divisible by groups");
    if (gamma->shape != std::vector<int>{c} || beta->shape != std::vector<int>{c})
        throw DimensionError("group_norm: bad affine shapes");
    int cg = c / groups;
    size_t plane = static_cast<size_t>(h) * w;
    size_t gn = static_cast<size_t>(cg) * plane;

    auto o = result(x->shape, any_rg(x, gamma, beta));
    auto xhat = std::make_shared<std::vector<double>>(x->v.size());
    auto invs = std::make_shared<std::vector<double>>(groups);
    for (int g = 0; g < groups; ++g) {
        const double* xs = x->v.data() + static_cast<size_t>(g) * gn;
        double mu = 0;
        for (size_t i = 0; i < gn; ++i) mu += xs[i];
        mu /= static_cast<double>(gn);
        double var = 0;
        for (size_t i = 0; i < gn; ++i) {
            double d = xs[i] - mu;
            var += d * d;
        }
        var /= static_cast<double>(gn);
        double inv = 1.0 / std::sqrt(var + eps);
        (*invs)[g] = inv;
        double* xh = xhat->data() + static_cast<size_t>(g) * gn;
        for (size_t i = 0; i < gn; ++i) xh[i] = (xs[i] - mu) * inv;
    }
    for (int ci = 0; ci < c; ++ci) {
        const double* xh = xhat->data() + static_cast<size_t>(ci) * plane;
        double* ov = o->v.data() + static_cast<size_t>(ci) * plane;
        double gm = gamma->v[ci], bt = beta->v[ci];
        for (size_t i = 0; i < plane; ++i) ov[i] = gm * xh[i] + bt;
    }
    if (o->rg) {
        o->parents = {x, gamma, beta};
        o->back = [x, gamma, beta, xhat, invs, c, cg, groups, plane, gn](Node& n) {
            if (gamma->rg || beta->rg) {
                for (int ci = 0; ci < c; ++ci) {
                    const double* xh = xhat->data() + static_cast<size_t>(ci) * plane;
                    const double* gy = n.g.data() + static_cast<size_t>(ci) * plane;
                    double sg = 0, sb = 0;
                    for (size_t i = 0; i < plane; ++i) {
                        sg += gy[i] * xh[i];
                        sb += gy[i];
                    }
                    if (gamma->rg) gamma->g[ci] += sg;
                    if (beta->rg) beta->g[ci] += sb;
                }
            }
            if (x->rg) {
                for (int g = 0; g < groups; ++g) {
                    double inv = (*invs)[g];
                    // dxhat = gy * gamma_c
                    double m1 = 0, m2 = 0;  // mean(dxhat), mean(dxhat*xhat)
                    for (int cc = 0; cc < cg; ++cc) {
                        int ci = g * cg + cc;
                        const double* gy = n.g.data() + static_cast<size_t>(ci) * plane;
                        const double* xhc = xhat->data() + static_cast<size_t>(ci) * plane;
                        double gm = gamma->v[ci];
                        for (size_t i = 0; i < plane; ++i) {
                            double dxh = gy[i] * gm;
                            m1 += dxh;
                            m2 += dxh * xhc[i];
                        }
                    }
                    m1 /= static_cast<double>(gn);
                    m2 /= static_cast<double>(gn);
                    for (int cc = 0; cc < cg; ++cc) {
                        int ci = g * cg + cc;
                        const double* gy = n.g.data() + static_cast<size_t>(ci) * plane;
                        const double* xhc = xhat->data() + static_cast<size_t>(ci) * plane;
                        double* gx = x->g.data() + static_cast<size_t>(ci) * plane;
                        double gm = gamma->v[ci];
                        for (size_t i = 0; i < plane; ++i) {
                            double dxh = gy[i] * gm;
                            gx[i] += inv * (dxh - m1 - xhc[i] * m2);
                        }
                    }
                }
            }
        };
    }
    return o;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    if (x->shape.size() != 3 || bias->shape.size() != 1 || bias->shape[0] != x->shape[0])
        throw DimensionError("add_channel_bias: incompatible shapes");
    int c = x->shape[0];
    size_t plane = static_cast<size_t>(x->shape[1]) * x->shape[2];
    auto o = result(x->shape, any_rg(x, bias));
    for (int ci = 0; ci < c; ++ci) {
        const double* xs = x->v.data() + ci * plane;
        double* ov = o->v.data() + ci * plane;
        double b = bias->v[ci];
        for (size_t i = 0; i < plane; ++i) ov[i] = xs[i] + b;
    }
    if (o->rg) {
        o->parents = {x, bias};
        o->back = [x, bias, c, plane](Node& n) {
            for (int ci = 0; ci < c; ++ci) {
                const double* gy = n.g.data() + ci * plane;
                if (x->rg) {
                    double* gx = x->g.data() + ci * plane;
                    for (size_t i = 0; i < plane; ++i) gx[i] += gy[i];
                }
                if (bias->rg) {
                    double s = 0;
                    for (size_t i = 0; i < plane; ++i) s += gy[i];
                    bias->g[ci] += s;
                }
            }
        };
    }
    return o;
}

// ---------------- reductions ----------------

Tensor sum(const Tensor& x) {
    auto o = result({1}, x->rg);
    double s = 0;
    for (double v : x->v) s += v;
    o->v[0] = s;
    if (o->rg) {
        o->parents = {x};
        o->back = [x](Node& n) {
            for (size_t i = 0; i < x->g.size(); ++i) x->g[i] += n.g[0];
        };
    }
    return o;
}

Tensor mean_all(const Tensor& x) {
    auto o = result({1}, x->rg);
    double s = 0;
    for (double v : x->v) s += v;
    double inv = 1.0 / static_cast<double>(x->v.size());
    o->v[0] = s * inv;
    if (o->rg) {
        o->parents = {x};
        o->back = [x, inv](Node& n) {
            for (size_t i = 0; i < x->g.size(); ++i) x->g[i] += n.g[0] * inv;
        };
    }
    return o;
}

Tensor mse_loss(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mse_loss");
    auto o = result({1}, any_rg(a, b));
    double s = 0;
    for (size_t i = 0; i < a->v.size(); ++i) {
        double d = a->v[i] - b->v[i];
        s += d * d;
    }
    double inv = 1.0 / static_cast<double>(a->v.size());
    o->v[0] = s * inv;
    if (o->rg) {
        o->parents = {a, b};
        o->back = [a, b, inv](Node& n) {
            double g = n.g[0] * inv * 2.0;
            for (size_t i = 0; i < a->v.size(); ++i) {
                double d = a->v[i] - b->v[i];
                if (a->rg) a->g[i] += g * d;
                if (b->rg) b->g[i] -= g * d;
            }
        };
    }
    return o;
}

Tensor l1_loss(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "l1_loss");
    auto o = result({1}, any_rg(a, b));
    double s = 0;
    for (size_t i = 0; i < a->v.size(); ++i) s += std::abs(a->v[i] - b->v[i]);
    double inv = 1.0 / static_cast<double>(a->v.size());
    o->v[0] = s * inv;
    if (o->rg) {
        o->parents = {a, b};
        o->back = [a, b, inv](Node& n) {
            double g = n.g[0] * inv;
            for (size_t i = 0; i < a->v.size(); ++i) {
                double d = a->v[i] - b->v[i];
                double sg = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
                if (a->rg) a->g[i] += g * sg;
                if (b->rg) b->g[i] -= g * sg;
            }
        };
    }
    return o;
}

Tensor weighted_l1_loss(const Tensor& a, const Tensor& b, const std::vector<double>& weight) {
    check_same_shape(a, b, "weighted_l1_loss");
    if (weight.size() != a->v.size()) throw DimensionError("weighted_l1_loss: weight size");
    auto o = result({1}, any_rg(a, b));
    double s = 0;
    for (size_t i = 0; i < a->v.size(); ++i) s += weight[i] * std::abs(a->v[i] - b->v[i]);
    double inv = 1.0 / static_cast<double>(a->v.size());
    o->v[0] = s * inv;
    if (o->rg) {
        o->parents = {a, b};
        o->back = [a, b, inv, weight](Node& n) {
            double g = n.g[0] * inv;
            for (size_t i = 0; i < a->v.size(); ++i) {
                double d = a->v[i] - b->v[i];
                double sg = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
                if (a->rg) a->g[i] += g * weight[i] * sg;
                if (b->rg) b->g[i] -= g * weight[i] * sg;
            }
        };
    }
    return o;
}

}  // namespace difflare::ag
