#include "easydistill/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace easydistill {

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw TensorError("non-positive dimension in shape " + shape_str(shape));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

TensorPtr Tensor::create(std::vector<int> shape, std::vector<double> data,
                         bool requires_grad) {
    if (shape_numel(shape) != data.size())
        throw TensorError("shape " + shape_str(shape) + " does not match data length " +
                          std::to_string(data.size()));
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    t->data = std::move(data);
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    return create(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

TensorPtr Tensor::scalar(double v, bool requires_grad) {
    return create({1}, {v}, requires_grad);
}

TensorPtr Tensor::vector1d(std::vector<double> v, bool requires_grad) {
    int n = static_cast<int>(v.size());
    return create({n}, std::move(v), requires_grad);
}

namespace {

void check_finite(const TensorPtr& t, const char* op) {
    for (double v : t->data) {
        if (!std::isfinite(v))
            throw TensorError(std::string("non-finite value produced by op '") + op + "'");
    }
}

void require_rank2(const TensorPtr& t, const char* op) {
    if (t->rank() != 2)
        throw TensorError(std::string(op) + ": expected rank-2 tensor, got " +
                          shape_str(t->shape));
}

// b broadcasts over a's leading dims when b.shape is a suffix of a.shape
bool suffix_broadcast(const std::vector<int>& a, const std::vector<int>& b) {
    if (b.size() > a.size()) return false;
    return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

void ensure_grad(const TensorPtr& t) {
    if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
}

}  // namespace

TensorPtr Tape::make_out(std::vector<int> shape, std::vector<double> data,
                         bool requires_grad, const char* op) {
    auto out = Tensor::create(std::move(shape), std::move(data), requires_grad);
    check_finite(out, op);
    return out;
}

void Tape::record(TensorPtr out, std::function<void()> back) {
    if (out->requires_grad) nodes_.push_back({std::move(out), std::move(back)});
}

void Tape::backward(const TensorPtr& loss) {
    if (!loss->is_scalar())
        throw TensorError("backward: loss must be scalar, got " + shape_str(loss->shape));
    if (loss->grad.empty()) loss->grad.assign(1, 0.0);
    loss->grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (it->out->grad.empty()) continue;  // not on the path to this loss
        it->back();
    }
}

// ---------------------------------------------------------------- matmul

TensorPtr Tape::matmul(const TensorPtr& a, const TensorPtr& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const int m = a->dim(0), k = a->dim(1), n = b->dim(1);
    if (k != b->dim(0))
        throw TensorError("matmul: inner dimensions disagree, " + shape_str(a->shape) +
                          " vs " + shape_str(b->shape));
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
            const double av = a->data[static_cast<std::size_t>(i) * k + p];
            const double* brow = &b->data[static_cast<std::size_t>(p) * n];
            double* orow = &out[static_cast<std::size_t>(i) * n];
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    auto res = make_out({m, n}, std::move(out),
                        a->requires_grad || b->requires_grad, "matmul");
    record(res, [a, b, res, m, k, n] {
        if (a->requires_grad) {
            ensure_grad(a);
            for (int i = 0; i < m; ++i)
                for (int p = 0; p < k; ++p) {
                    double s = 0.0;
                    const double* grow = &res->grad[static_cast<std::size_t>(i) * n];
                    const double* brow = &b->data[static_cast<std::size_t>(p) * n];
                    for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
                    a->grad[static_cast<std::size_t>(i) * k + p] += s;
                }
        }
        if (b->requires_grad) {
            ensure_grad(b);
            for (int p = 0; p < k; ++p)
                for (int i = 0; i < m; ++i) {
                    const double av = a->data[static_cast<std::size_t>(i) * k + p];
                    if (av == 0.0) continue;
                    const double* grow = &res->grad[static_cast<std::size_t>(i) * n];
                    double* brow = &b->grad[static_cast<std::size_t>(p) * n];
                    for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
                }
        }
    });
    return res;
}

TensorPtr Tape::matmul_nt(const TensorPtr& a, const TensorPtr& b) {
    require_rank2(a, "matmul_nt");
    require_rank2(b, "matmul_nt");
    const int m = a->dim(0), k = a->dim(1), n = b->dim(0);
    if (k != b->dim(1))
        throw TensorError("matmul_nt: inner dimensions disagree, " + shape_str(a->shape) +
                          " vs " + shape_str(b->shape));
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double s = 0.0;
            const double* arow = &a->data[static_cast<std::size_t>(i) * k];
            const double* brow = &b->data[static_cast<std::size_t>(j) * k];
            for (int p = 0; p < k; ++p) s += arow[p] * brow[p];
            out[static_cast<std::size_t>(i) * n + j] = s;
        }
    auto res = make_out({m, n}, std::move(out),
                        a->requires_grad || b->requires_grad, "matmul_nt");
    record(res, [a, b, res, m, k, n] {
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                const double g = res->grad[static_cast<std::size_t>(i) * n + j];
                if (g == 0.0) continue;
                if (a->requires_grad) {
                    ensure_grad(a);
                    const double* brow = &b->data[static_cast<std::size_t>(j) * k];
                    double* arow = &a->grad[static_cast<std::size_t>(i) * k];
                    for (int p = 0; p < k; ++p) arow[p] += g * brow[p];
                }
                if (b->requires_grad) {
                    ensure_grad(b);
                    const double* arow = &a->data[static_cast<std::size_t>(i) * k];
                    double* brow = &b->grad[static_cast<std::size_t>(j) * k];
                    for (int p = 0; p < k; ++p) brow[p] += g * arow[p];
                }
            }
    });
    return res;
}

// ------------------------------------------------- elementwise / broadcast

enum { kAdd = 0, kSub = 1, kMul = 2 };

TensorPtr Tape::binary(const TensorPtr& a, const TensorPtr& b, int op) {
    if (!suffix_broadcast(a->shape, b->shape))
        throw TensorError("elementwise op: shape " + shape_str(b->shape) +
                          " does not broadcast over " + shape_str(a->shape));
    const std::size_t bn = b->size();
    std::vector<double> out(a->size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = a->data[i], y = b->data[i % bn];
        out[i] = op == kAdd ? x + y : op == kSub ? x - y : x * y;
    }
    const char* name = op == kAdd ? "add" : op == kSub ? "sub" : "mul";
    auto res = make_out(a->shape, std::move(out),
                        a->requires_grad || b->requires_grad, name);
    record(res, [a, b, res, op, bn] {
        if (a->requires_grad) {
            ensure_grad(a);
            for (std::size_t i = 0; i < res->grad.size(); ++i) {
                const double g = res->grad[i];
                a->grad[i] += op == kMul ? g * b->data[i % bn] : g;
            }
        }
        if (b->requires_grad) {
            ensure_grad(b);
            for (std::size_t i = 0; i < res->grad.size(); ++i) {
                const double g = res->grad[i];
                double gb = op == kMul ? g * a->data[i] : op == kSub ? -g : g;
                b->grad[i % bn] += gb;
            }
        }
    });
    return res;
}

TensorPtr Tape::add(const TensorPtr& a, const TensorPtr& b) { return binary(a, b, kAdd); }
TensorPtr Tape::sub(const TensorPtr& a, const TensorPtr& b) { return binary(a, b, kSub); }
TensorPtr Tape::mul(const TensorPtr& a, const TensorPtr& b) { return binary(a, b, kMul); }

TensorPtr Tape::unary(const TensorPtr& a, const char* name,
                      double (*f)(double), double (*df)(double)) {
    std::vector<double> out(a->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a->data[i]);
    auto res = make_out(a->shape, std::move(out), a->requires_grad, name);
    record(res, [a, res, df] {
        ensure_grad(a);
        for (std::size_t i = 0; i < res->grad.size(); ++i)
            a->grad[i] += res->grad[i] * df(a->data[i]);
    });
    return res;
}

TensorPtr Tape::scale(const TensorPtr& a, double c) {
    std::vector<double> out(a->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] * c;
    auto res = make_out(a->shape, std::move(out), a->requires_grad, "scale");
    record(res, [a, res, c] {
        ensure_grad(a);
        for (std::size_t i = 0; i < res->grad.size(); ++i) a->grad[i] += res->grad[i] * c;
    });
    return res;
}

TensorPtr Tape::add_const(const TensorPtr& a, double c) {
    std::vector<double> out(a->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] + c;
    auto res = make_out(a->shape, std::move(out), a->requires_grad, "add_const");
    record(res, [a, res] {
        ensure_grad(a);
        for (std::size_t i = 0; i < res->grad.size(); ++i) a->grad[i] += res->grad[i];
    });
    return res;
}

TensorPtr Tape::exp(const TensorPtr& a) {
    return unary(a, "exp", [](double x) { return std::exp(x); },
                 [](double x) { return std::exp(x); });
}

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
double gelu_f(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
double gelu_df(double x) {
    return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) +
           x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}
double logsig_f(double x) {
    return x < 0.0 ? x - std::log1p(std::exp(x)) : -std::log1p(std::exp(-x));
}
double logsig_df(double x) {  // sigma(-x)
    return x < 0.0 ? 1.0 / (1.0 + std::exp(x)) : std::exp(-x) / (1.0 + std::exp(-x));
}
}  // namespace

TensorPtr Tape::gelu(const TensorPtr& a) { return unary(a, "gelu", gelu_f, gelu_df); }

TensorPtr Tape::log_sigmoid(const TensorPtr& a) {
    return unary(a, "log_sigmoid", logsig_f, logsig_df);
}

TensorPtr Tape::clamp(const TensorPtr& a, double lo, double hi) {
    std::vector<double> out(a->size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = std::min(hi, std::max(lo, a->data[i]));
    auto res = make_out(a->shape, std::move(out), a->requires_grad, "clamp");
    record(res, [a, res, lo, hi] {
        ensure_grad(a);
        for (std::size_t i = 0; i < res->grad.size(); ++i)
            if (a->data[i] > lo && a->data[i] < hi) a->grad[i] += res->grad[i];
    });
    return res;
}

TensorPtr Tape::minimum(const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape)
        throw TensorError("minimum: shapes differ, " + shape_str(a->shape) + " vs " +
                          shape_str(b->shape));
    std::vector<double> out(a->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(a->data[i], b->data[i]);
    auto res = make_out(a->shape, std::move(out),
                        a->requires_grad || b->requires_grad, "minimum");
    record(res, [a, b, res] {
        for (std::size_t i = 0; i < res->grad.size(); ++i) {
            const bool pick_a = a->data[i] <= b->data[i];
            if (pick_a && a->requires_grad) {
                ensure_grad(a);
                a->grad[i] += res->grad[i];
            } else if (!pick_a && b->requires_grad) {
                ensure_grad(b);
                b->grad[i] += res->grad[i];
            }
        }
    });
    return res;
}

// ------------------------------------------------------------------ shape

TensorPtr Tape::slice_last(const TensorPtr& a, int start, int len) {
    const int last = a->shape.back();
    if (start < 0 || len <= 0 || start + len > last)
        throw TensorError("slice_last: range [" + std::to_string(start) + "," +
                          std::to_string(start + len) + ") out of bounds for last dim " +
                          std::to_string(last));
    std::vector<int> oshape = a->shape;
    oshape.back() = len;
    const std::size_t rows = a->size() / static_cast<std::size_t>(last);
    std::vector<double> out(rows * static_cast<std::size_t>(len));
    for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(&a->data[r * last + start], len, &out[r * len]);
    auto res = make_out(std::move(oshape), std::move(out), a->requires_grad, "slice_last");
    record(res, [a, res, start, len, last, rows] {
        ensure_grad(a);
        for (std::size_t r = 0; r < rows; ++r)
            for (int j = 0; j < len; ++j)
                a->grad[r * last + start + j] += res->grad[r * len + j];
    });
    return res;
}

TensorPtr Tape::concat_last(const std::vector<TensorPtr>& parts) {
    if (parts.empty()) throw TensorError("concat_last: no parts");
    std::vector<int> lead(parts[0]->shape.begin(), parts[0]->shape.end() - 1);
    int total = 0;
    bool rg = false;
    for (const auto& p : parts) {
        std::vector<int> pl(p->shape.begin(), p->shape.end() - 1);
        if (pl != lead)
            throw TensorError("concat_last: leading dims differ: " +
                              shape_str(parts[0]->shape) + " vs " + shape_str(p->shape));
        total += p->shape.back();
        rg = rg || p->requires_grad;
    }
    std::vector<int> oshape = lead;
    oshape.push_back(total);
    const std::size_t rows = shape_numel(oshape) / static_cast<std::size_t>(total);
    std::vector<double> out(rows * static_cast<std::size_t>(total));
    int off = 0;
    for (const auto& p : parts) {
        const int w = p->shape.back();
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(&p->data[r * w], w, &out[r * total + off]);
        off += w;
    }
    auto res = make_out(std::move(oshape), std::move(out), rg, "concat_last");
    record(res, [parts, res, rows, total] {
        int off = 0;
        for (const auto& p : parts) {
            const int w = p->shape.back();
            if (p->requires_grad) {
                ensure_grad(p);
                for (std::size_t r = 0; r < rows; ++r)
                    for (int j = 0; j < w; ++j)
                        p->grad[r * w + j] += res->grad[r * total + off + j];
            }
            off += w;
        }
    });
    return res;
}

TensorPtr Tape::stack_scalars(const std::vector<TensorPtr>& scalars) {
    if (scalars.empty()) throw TensorError("stack_scalars: empty input");
    std::vector<double> out;
    bool rg = false;
    for (const auto& s : scalars) {
        out.push_back(s->item());
        rg = rg || s->requires_grad;
    }
    auto res = make_out({static_cast<int>(scalars.size())}, std::move(out), rg,
                        "stack_scalars");
    record(res, [scalars, res] {
        for (std::size_t i = 0; i < scalars.size(); ++i)
            if (scalars[i]->requires_grad) scalars[i]->accumulate_grad(0, res->grad[i]);
    });
    return res;
}

// ---------------------------------------------------------- softmax family

TensorPtr Tape::softmax(const TensorPtr& a) {
    const int v = a->shape.back();
    const std::size_t rows = a->size() / static_cast<std::size_t>(v);
    std::vector<double> out(a->size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = &a->data[r * v];
        double mx = *std::max_element(x, x + v);
        double denom = 0.0;
        for (int j = 0; j < v; ++j) denom += std::exp(x[j] - mx);
        for (int j = 0; j < v; ++j) out[r * v + j] = std::exp(x[j] - mx) / denom;
    }
    auto res = make_out(a->shape, std::move(out), a->requires_grad, "softmax");
    record(res, [a, res, v, rows] {
        ensure_grad(a);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = &res->data[r * v];
            const double* g = &res->grad[r * v];
            double dot = 0.0;
            for (int j = 0; j < v; ++j) dot += y[j] * g[j];
            for (int j = 0; j < v; ++j) a->grad[r * v + j] += y[j] * (g[j] - dot);
        }
    });
    return res;
}

TensorPtr Tape::log_softmax(const TensorPtr& a) {
    const int v = a->shape.back();
    const std::size_t rows = a->size() / static_cast<std::size_t>(v);
    std::vector<double> out(a->size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = &a->data[r * v];
        double mx = *std::max_element(x, x + v);
        double denom = 0.0;
        for (int j = 0; j < v; ++j) denom += std::exp(x[j] - mx);
        const double lse = mx + std::log(denom);
        for (int j = 0; j < v; ++j) out[r * v + j] = x[j] - lse;
    }
    auto res = make_out(a->shape, std::move(out), a->requires_grad, "log_softmax");
    record(res, [a, res, v, rows] {
        ensure_grad(a);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = &res->data[r * v];
            const double* g = &res->grad[r * v];
            double gsum = 0.0;
            for (int j = 0; j < v; ++j) gsum += g[j];
            for (int j = 0; j < v; ++j)
                a->grad[r * v + j] += g[j] - std::exp(y[j]) * gsum;
        }
    });
    return res;
}

TensorPtr Tape::layernorm(const TensorPtr& x, const TensorPtr& gain,
                          const TensorPtr& bias, double eps) {
    const int v = x->shape.back();
    if (gain->shape != std::vector<int>{v} || bias->shape != std::vector<int>{v})
        throw TensorError("layernorm: gain/bias must be shaped [" + std::to_string(v) + "]");
    const std::size_t rows = x->size() / static_cast<std::size_t>(v);
    std::vector<double> out(x->size());
    std::vector<double> mu(rows), rstd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = &x->data[r * v];
        double m = 0.0;
        for (int j = 0; j < v; ++j) m += xr[j];
        m /= v;
        double var = 0.0;
        for (int j = 0; j < v; ++j) var += (xr[j] - m) * (xr[j] - m);
        var /= v;
        mu[r] = m;
        rstd[r] = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < v; ++j)
            out[r * v + j] = (xr[j] - m) * rstd[r] * gain->data[j] + bias->data[j];
    }
    auto res = make_out(x->shape, std::move(out),
                        x->requires_grad || gain->requires_grad || bias->requires_grad,
                        "layernorm");
    record(res, [x, gain, bias, res, v, rows, mu = std::move(mu), rstd = std::move(rstd)] {
        for (std::size_t r = 0; r < rows; ++r) {
            const double* xr = &x->data[r * v];
            const double* g = &res->grad[r * v];
            if (gain->requires_grad) {
                ensure_grad(gain);
                for (int j = 0; j < v; ++j)
                    gain->grad[j] += g[j] * (xr[j] - mu[r]) * rstd[r];
            }
            if (bias->requires_grad) {
                ensure_grad(bias);
                for (int j = 0; j < v; ++j) bias->grad[j] += g[j];
            }
            if (x->requires_grad) {
                ensure_grad(x);
                // d/dx of (x - mu) * rstd with mu, rstd functions of x
                double sum_gy = 0.0, sum_gyh = 0.0;
                for (int j = 0; j < v; ++j) {
                    const double gy = g[j] * gain->data[j];
                    const double h = (xr[j] - mu[r]) * rstd[r];
                    sum_gy += gy;
                    sum_gyh += gy * h;
                }
                for (int j = 0; j < v; ++j) {
                    const double gy = g[j] * gain->data[j];
                    const double h = (xr[j] - mu[r]) * rstd[r];
                    x->grad[r * v + j] +=
                        rstd[r] * (gy - sum_gy / v - h * sum_gyh / v);
                }
            }
        }
    });
    return res;
}

// --------------------------------------------------------------- indexing

TensorPtr Tape::embedding_lookup(const TensorPtr& table, const std::vector<int>& ids) {
    require_rank2(table, "embedding_lookup");
    const int v = table->dim(0), d = table->dim(1);
    const int t = static_cast<int>(ids.size());
    if (t == 0) throw TensorError("embedding_lookup: empty id list");
    std::vector<double> out(static_cast<std::size_t>(t) * d);
    for (int i = 0; i < t; ++i) {
        if (ids[i] < 0 || ids[i] >= v)
            throw TensorError("embedding_lookup: id " + std::to_string(ids[i]) +
                              " out of range [0," + std::to_string(v) + ")");
        std::copy_n(&table->data[static_cast<std::size_t>(ids[i]) * d], d,
                    &out[static_cast<std::size_t>(i) * d]);
    }
    auto res = make_out({t, d}, std::move(out), table->requires_grad, "embedding_lookup");
    record(res, [table, res, ids, d, t] {
        ensure_grad(table);
        for (int i = 0; i < t; ++i)
            for (int j = 0; j < d; ++j)
                table->grad[static_cast<std::size_t>(ids[i]) * d + j] +=
                    res->grad[static_cast<std::size_t>(i) * d + j];
    });
    return res;
}

TensorPtr Tape::gather(const TensorPtr& x, const std::vector<int>& ids) {
    require_rank2(x, "gather");
    const int n = x->dim(0), v = x->dim(1);
    if (static_cast<int>(ids.size()) != n)
        throw TensorError("gather: expected " + std::to_string(n) + " indices, got " +
                          std::to_string(ids.size()));
    std::vector<double> out(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        if (ids[i] < 0 || ids[i] >= v)
            throw TensorError("gather: index " + std::to_string(ids[i]) +
                              " out of range [0," + std::to_string(v) + ")");
        out[i] = x->data[static_cast<std::size_t>(i) * v + ids[i]];
    }
    auto res = make_out({n}, std::move(out), x->requires_grad, "gather");
    record(res, [x, res, ids, n, v] {
        ensure_grad(x);
        for (int i = 0; i < n; ++i)
            x->grad[static_cast<std::size_t>(i) * v + ids[i]] += res->grad[i];
    });
    return res;
}

TensorPtr Tape::select_cols(const TensorPtr& x, const std::vector<std::vector<int>>& ids) {
    require_rank2(x, "select_cols");
    const int n = x->dim(0), v = x->dim(1);
    if (static_cast<int>(ids.size()) != n)
        throw TensorError("select_cols: expected " + std::to_string(n) + " rows of indices");
    const int k = ids.empty() ? 0 : static_cast<int>(ids[0].size());
    std::vector<double> out(static_cast<std::size_t>(n) * k);
    for (int i = 0; i < n; ++i) {
        if (static_cast<int>(ids[i].size()) != k)
            throw TensorError("select_cols: ragged index rows");
        for (int j = 0; j < k; ++j) {
            if (ids[i][j] < 0 || ids[i][j] >= v)
                throw TensorError("select_cols: index " + std::to_string(ids[i][j]) +
                                  " out of range [0," + std::to_string(v) + ")");
            out[static_cast<std::size_t>(i) * k + j] =
                x->data[static_cast<std::size_t>(i) * v + ids[i][j]];
        }
    }
    auto res = make_out({n, k}, std::move(out), x->requires_grad, "select_cols");
    record(res, [x, res, ids, n, k, v] {
        ensure_grad(x);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < k; ++j)
                x->grad[static_cast<std::size_t>(i) * v + ids[i][j]] +=
                    res->grad[static_cast<std::size_t>(i) * k + j];
    });
    return res;
}

// -------------------------------------------------------------- reductions

TensorPtr Tape::sum(const TensorPtr& a) {
    double s = std::accumulate(a->data.begin(), a->data.end(), 0.0);
    auto res = make_out({1}, {s}, a->requires_grad, "sum");
    record(res, [a, res] {
        ensure_grad(a);
        for (double& g : a->grad) g += res->grad[0];
    });
    return res;
}

TensorPtr Tape::mean(const TensorPtr& a) {
    const double n = static_cast<double>(a->size());
    double s = std::accumulate(a->data.begin(), a->data.end(), 0.0) / n;
    auto res = make_out({1}, {s}, a->requires_grad, "mean");
    record(res, [a, res, n] {
        ensure_grad(a);
        for (double& g : a->grad) g += res->grad[0] / n;
    });
    return res;
}

TensorPtr Tape::sum_last(const TensorPtr& a) {
    if (a->rank() < 2) throw TensorError("sum_last: rank must be >= 2");
    const int v = a->shape.back();
    std::vector<int> oshape(a->shape.begin(), a->shape.end() - 1);
    const std::size_t rows = a->size() / static_cast<std::size_t>(v);
    std::vector<double> out(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        for (int j = 0; j < v; ++j) out[r] += a->data[r * v + j];
    auto res = make_out(std::move(oshape), std::move(out), a->requires_grad, "sum_last");
    record(res, [a, res, v, rows] {
        ensure_grad(a);
        for (std::size_t r = 0; r < rows; ++r)
            for (int j = 0; j < v; ++j) a->grad[r * v + j] += res->grad[r];
    });
    return res;
}

TensorPtr Tape::sum_masked(const TensorPtr& x, const TensorPtr& mask, bool as_mean) {
    if (x->shape != mask->shape)
        throw TensorError("sum_masked: mask shape " + shape_str(mask->shape) +
                          " differs from " + shape_str(x->shape));
    double msum = 0.0, s = 0.0;
    for (std::size_t i = 0; i < x->size(); ++i) {
        const double m = mask->data[i];
        if (m != 0.0 && m != 1.0)
            throw TensorError("sum_masked: mask must be 0/1 valued");
        msum += m;
        s += x->data[i] * m;
    }
    if (as_mean && msum == 0.0)
        throw TensorError("sum_masked: degenerate batch, mask selects no elements");
    const double denom = as_mean ? msum : 1.0;
    auto res = make_out({1}, {s / denom}, x->requires_grad, "sum_masked");
    record(res, [x, mask, res, denom] {
        ensure_grad(x);
        for (std::size_t i = 0; i < x->size(); ++i)
            x->grad[i] += res->grad[0] * mask->data[i] / denom;
    });
    return res;
}

// -------------------------------------------------------------- grad_check

double grad_check(const std::function<TensorPtr(Tape&, const TensorPtr&)>& f,
                  const TensorPtr& x, double h) {
    auto probe = Tensor::create(x->shape, x->data, true);
    Tape tape;
    auto loss = f(tape, probe);
    if (!loss->is_scalar()) throw TensorError("grad_check: f must be scalar-valued");
    tape.backward(loss);
    std::vector<double> analytic =
        probe->grad.empty() ? std::vector<double>(x->size(), 0.0) : probe->grad;

    double worst = 0.0;
    for (std::size_t i = 0; i < x->size(); ++i) {
        auto eval = [&](double v) {
            auto xi = Tensor::create(x->shape, x->data, false);
            xi->data[i] = v;
            Tape t;
            return f(t, xi)->item();
        };
        const double fd = (eval(x->data[i] + h) - eval(x->data[i] - h)) / (2.0 * h);
        const double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(analytic[i]));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace easydistill
