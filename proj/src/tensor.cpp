#include "tden/tensor.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace tden {

namespace {

thread_local Tape* g_current_tape = nullptr;

std::string shape_to_str(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << "]";
    return os.str();
}

std::size_t shape_numel(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return s.empty() ? 0 : n;
}

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

#ifndef NDEBUG
void debug_check_finite(const detail::TensorData& d, const char* op) {
    for (double v : d.value) assert(std::isfinite(v) && op);
    (void)op;
}
#else
void debug_check_finite(const detail::TensorData&, const char*) {}
#endif

// Requires-grad inputs get their grad buffer on first touch.
inline double* grad_of(const std::shared_ptr<detail::TensorData>& d) {
    d->ensure_grad();
    return d->grad.data();
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(std::vector<std::size_t> shape, double fill, bool requires_grad) {
    auto d = std::make_shared<detail::TensorData>();
    d->value.assign(shape_numel(shape), fill);
    d->shape = std::move(shape);
    d->requires_grad = requires_grad;
    return Tensor(std::move(d));
}

Tensor Tensor::from(std::vector<std::size_t> shape, std::vector<double> data,
                    bool requires_grad) {
    require(shape_numel(shape) == data.size(),
            "tensor data length " + std::to_string(data.size()) +
                " does not match shape " + shape_to_str(shape));
    auto d = std::make_shared<detail::TensorData>();
    d->shape = std::move(shape);
    d->value = std::move(data);
    d->requires_grad = requires_grad;
    return Tensor(std::move(d));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return from({1}, {v}, requires_grad);
}

Tensor Tensor::randn(std::vector<std::size_t> shape, Rng& rng, double sigma,
                     bool requires_grad) {
    auto d = std::make_shared<detail::TensorData>();
    d->value.resize(shape_numel(shape));
    for (double& v : d->value) v = rng.normal(0.0, sigma);
    d->shape = std::move(shape);
    d->requires_grad = requires_grad;
    return Tensor(std::move(d));
}

std::size_t Tensor::rows() const {
    if (ndim() == 1) return 1;
    require(ndim() == 2, "expected 1-D or 2-D tensor, got " + shape_str());
    return d_->shape[0];
}

std::size_t Tensor::cols() const {
    require(ndim() == 1 || ndim() == 2, "expected 1-D or 2-D tensor, got " + shape_str());
    return d_->shape.back();
}

double Tensor::at(std::size_t r, std::size_t c) const {
    return d_->value[r * cols() + c];
}

double& Tensor::at(std::size_t r, std::size_t c) {
    return d_->value[r * cols() + c];
}

double Tensor::item() const {
    require(size() == 1, "item() requires a one-element tensor, got " + shape_str());
    return d_->value[0];
}

const std::vector<double>& Tensor::grad() const {
    if (d_->grad.empty())
        throw std::logic_error("tensor has no gradient; run Tape::backward first");
    return d_->grad;
}

std::vector<double>& Tensor::grad_mut() {
    d_->ensure_grad();
    return d_->grad;
}

std::string Tensor::shape_str() const { return shape_to_str(d_->shape); }

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape* Tape::current() { return g_current_tape; }

void Tape::record(const char* op, std::shared_ptr<detail::TensorData> out,
                  std::function<void()> back) {
    out->tape = this;
    nodes_.push_back(Node{op, std::move(out), std::move(back)});
}

void Tape::backward(const Tensor& loss) {
    if (consumed_) throw std::logic_error("tape already consumed by a previous backward");
    if (loss.size() != 1)
        throw std::invalid_argument("backward requires a scalar loss, got " + loss.shape_str());
    if (loss.handle()->tape != this)
        throw std::invalid_argument("loss was not produced on this tape");
    loss.handle()->ensure_grad();
    loss.handle()->grad[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->back();
    nodes_.clear();
    consumed_ = true;
}

TapeScope::TapeScope(Tape& tape) : prev_(g_current_tape) { g_current_tape = &tape; }

TapeScope::~TapeScope() { g_current_tape = prev_; }

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.ndim() == 2 && b.ndim() == 2,
            "matmul requires 2-D operands, got " + a.shape_str() + " and " + b.shape_str());
    const std::size_t m = a.shape()[0], k = a.shape()[1];
    const std::size_t k2 = b.shape()[0], n = b.shape()[1];
    require(k == k2, "matmul inner dimensions disagree: " + a.shape_str() + " vs " + b.shape_str());

    std::vector<double> c(m * n, 0.0);
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c.data() + i * n;
        const double* arow = pa + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }

    Tensor out = Tensor::from({m, n}, std::move(c));
    debug_check_finite(*out.handle(), "matmul");
    Tape* tape = Tape::current();
    if (tape && (a.requires_grad() || b.requires_grad())) {
        auto ad = a.handle(), bd = b.handle(), od = out.handle();
        out.set_requires_grad(true);
        tape->record("matmul", od, [ad, bd, od, m, k, n]() {
            if (od->grad.empty()) return;
            const double* g = od->grad.data();
            if (ad->requires_grad) {
                double* da = grad_of(ad);
                const double* pb = bd->value.data();
                for (std::size_t i = 0; i < m; ++i) {
                    const double* grow = g + i * n;
                    double* darow = da + i * k;
                    for (std::size_t p = 0; p < k; ++p) {
                        const double* brow = pb + p * n;
                        double s = 0.0;
                        for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                        darow[p] += s;
                    }
                }
            }
            if (bd->requires_grad) {
                double* db = grad_of(bd);
                const double* pa = ad->value.data();
                for (std::size_t i = 0; i < m; ++i) {
                    const double* grow = g + i * n;
                    const double* arow = pa + i * k;
                    for (std::size_t p = 0; p < k; ++p) {
                        const double av = arow[p];
                        if (av == 0.0) continue;
                        double* dbrow = db + p * n;
                        for (std::size_t j = 0; j < n; ++j) dbrow[j] += av * grow[j];
                    }
                }
            }
        });
    }
    return out;
}

Tensor transpose(const Tensor& x) {
    require(x.ndim() == 2, "transpose requires a 2-D tensor, got " + x.shape_str());
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    std::vector<double> y(m * n);
    const double* px = x.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) y[j * m + i] = px[i * n + j];
    Tensor out = Tensor::from({n, m}, std::move(y));
    Tape* tape = Tape::current();
    if (tape && x.requires_grad()) {
        auto xd = x.handle();
        auto od = out.handle();
        out.set_requires_grad(true);
        tape->record("transpose", od, [xd, od, m, n]() {
            if (od->grad.empty()) return;
            const double* g = od->grad.data();
            double* dx = grad_of(xd);
            for (std::size_t j = 0; j < n; ++j)
                for (std::size_t i = 0; i < m; ++i) dx[i * n + j] += g[j * m + i];
        });
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(),
            "add shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
    std::vector<double> y(a.size());
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = pa[i] + pb[i];
    Tensor out = Tensor::from(a.shape(), std::move(y));
    debug_check_finite(*out.handle(), "add");
    Tape* tape = Tape::current();
    if (tape && (a.requires_grad() || b.requires_grad())) {
        auto ad = a.handle(), bd = b.handle(), od = out.handle();
        out.set_requires_grad(true);
        tape->record("add", od, [ad, bd, od]() {
            if (od->grad.empty()) return;
            const double* g = od->grad.data();
            const std::size_t n = od->value.size();
            if (ad->requires_grad) {
                double* da = grad_of(ad);
                for (std::size_t i = 0; i < n; ++i) da[i] += g[i];
            }
            if (bd->requires_grad) {
                double* db = grad_of(bd);
                for (std::size_t i = 0; i < n; ++i) db[i] += g[i];
            }
        });
    }
    return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    require(v.ndim() == 1, "add_rowvec bias must be 1-D, got " + v.shape_str());
    const std::size_t m = x.rows(), n = x.cols();
    require(v.size() == n, "add_rowvec width mismatch: " + x.shape_str() + " vs " + v.shape_str());
    std::vector<double> y(x.size());
    const double* px = x.data();
    const double* pv = v.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) y[i * n + j] = px[i * n + j] + pv[j];
    Tensor out = Tensor::from(x.shape(), std::move(y));
    debug_check_finite(*out.handle(), "add_rowvec");
    Tape* tape = Tape::current();
    if (tape && (x.requires_grad() || v.requires_grad())) {
        auto xd = x.handle(), vd = v.handle(), od = out.handle();
        out.set_requires_grad(true);
        tape->record("add_rowvec", od, [xd, vd, od, m, n]() {
            if (od->grad.empty()) return;
            const double* g = od->grad.data();
            if (xd->requires_grad) {
                double* dx = grad_of(xd);
                for (std::size_t i = 0; i < m * n; ++i) dx[i] += g[i];
            }
            if (vd->requires_grad) {
                double* dv = grad_of(vd);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) dv[j] += g[i * n + j];
            }
        });
    }
    return out;
}

Tensor axpb(const Tensor& x, double a, double b) {
    std::vector<double> y(x.size());
    const double* px = x.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a * px[i] + b;
    Tensor out = Tensor::from(x.shape(), std::move(y));
    debug_check_finite(*out.handle(), "axpb");
    Tape* tape = Tape::current();
    if (tape && x.requires_grad()) {
        auto xd = x.handle();
        auto od = out.handle();
        out.set_requires_grad(true);
        tape->record("axpb", od, [xd, od, a]() {
            if (od->grad.empty()) return;
            const double* g = od->grad.data();
            double* dx = grad_of(xd);
            for (std::size_t i = 0; i < od->value.size(); ++i) dx[i] += a * g[i];
        });
    }
    return out;
}

Tensor relu(const Tensor& x) {
    std::vector<double> y(x.size());
    const double* px = x.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = px[i] > 0.0 ? px[i] : 0.0;
    Tensor out = Tensor::from(x.shape(), std::move(y));
    Tape* tape = Tape::current();
    if (tape && x.requires_grad()) {
        auto xd = x.handle();
        auto od = out.handle();
        out.set_requires_grad(true);
        tape->record("relu", od, [xd, od]() {
            if (od->grad.empty()) return;
            const double* g = od->grad.data();
            double* dx = grad_of(xd);
            for (std::size_t i = 0; i < od->value.size(); ++i)
                if (xd->value[i] > 0.0) dx[i] += g[i];
        });
    }
    return out;
}

Tensor gelu(const Tensor& x) {
    static const double kC = std::sqrt(2.0 / 3.14159265358979323846);
    std::vector<double> y(x.size());
    const double* px = x.data();
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double v = px[i];
        const double u = kC * (v + 0.044715 * v * v * v);
        y[i] = 0.5 * v * (1.0 + std::tanh(u));
    }
    Tensor out = Tensor::from(x.shape(), std::move(y));
    debug_check_finite(*out.handle(), "gelu");
    Tape* tape = Tape::current();
    if (tape && x.requires_grad()) {
        auto xd = x.handle();
        auto od = out.handle();
        out.set_requires_grad(true);
        tape->record("gelu", od, [xd, od]() {
            if (od->grad.empty()) return;
            const double* g = od->grad.data();
            double* dx = grad_of(xd);
            for (std::size_t i = 0; i < od->value.size(); ++i) {
                const double v = xd->value[i];
                const double u = kC * (v + 0.044715 * v * v * v);
                const double t = std::tanh(u);
                const double sech2 = 1.0 - t * t;
                const double du = kC * (1.0 + 3.0 * 0.044715 * v * v);
                dx[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * sech2 * du);
            }
        });
    }
    return out;
}

Tensor softmax(const Tensor& x) {
    const std::size_t m = x.rows(), n = x.cols();
    require(n >= 1, "softmax requires at least one column");
    std::vector<double> y(x.size());
    const double* px = x.data();
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = px + i * n;
        double mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double e = std::exp(row[j] - mx);
            y[i * n + j] = e;
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < n; ++j) y[i * n + j] *= inv;
    }
    Tensor out = Tensor::from(x.shape(), std::move(y));
    debug_check_finite(*out.handle(), "softmax");
    Tape* tape = Tape::current();
    if (tape && x.requires_grad()) {
        auto xd = x.handle();
        auto od = out.handle();
        out.set_requires_grad(true);
        tape->record("softmax", od, [xd, od, m, n]() {
            if (od->grad.empty()) return;
            const double* g = od->grad.data();
            const double* s = od->value.data();
            double* dx = grad_of(xd);
            for (std::size_t i = 0; i < m; ++i) {
                const double* gr = g + i * n;
                const double* sr = s + i * n;
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += gr[j] * sr[j];
                double* dr = dx + i * n;
                for (std::size_t j = 0; j < n; ++j) dr[j] += sr[j] * (gr[j] - dot);
            }
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const std::size_t m = x.rows(), n = x.cols();
    require(n >= 2, "layer_norm requires width >= 2, got " + x.shape_str());
    require(gain.ndim() == 1 && gain.size() == n,
            "layer_norm gain must be 1-D of width " + std::to_string(n));
    require(bias.ndim() == 1 && bias.size() == n,
            "layer_norm bias must be 1-D of width " + std::to_string(n));

    std::vector<double> y(x.size());
    std::vector<double> xhat(x.size());
    std::vector<double> inv_std(m);
    const double* px = x.data();
    const double* pg = gain.data();
    const double* pb = bias.data();
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = px + i * n;
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += row[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double d = row[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        const double s = 1.0 / std::sqrt(var + eps);
        inv_std[i] = s;
        for (std::size_t j = 0; j < n; ++j) {
            const double h = (row[j] - mean) * s;
            xhat[i * n + j] = h;
            y[i * n + j] = pg[j] * h + pb[j];
        }
    }
    Tensor out = Tensor::from(x.shape(), std::move(y));
    debug_check_finite(*out.handle(), "layer_norm");
    Tape* tape = Tape::current();
    if (tape && (x.requires_grad() || gain.requires_grad() || bias.requires_grad())) {
        auto xd = x.handle(), gd = gain.handle(), bd = bias.handle(), od = out.handle();
        auto xh = std::make_shared<std::vector<double>>(std::move(xhat));
        auto is = std::make_shared<std::vector<double>>(std::move(inv_std));
        out.set_requires_grad(true);
        tape->record("layer_norm", od, [xd, gd, bd, od, xh, is, m, n]() {
            if (od->grad.empty()) return;
            const double* g = od->grad.data();
            const double* pg = gd->value.data();
            if (bd->requires_grad) {
                double* db = grad_of(bd);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) db[j] += g[i * n + j];
            }
            if (gd->requires_grad) {
                double* dg = grad_of(gd);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        dg[j] += g[i * n + j] * (*xh)[i * n + j];
            }
            if (xd->requires_grad) {
                double* dx = grad_of(xd);
                const double invn = 1.0 / static_cast<double>(n);
                for (std::size_t i = 0; i < m; ++i) {
                    const double* gr = g + i * n;
                    const double* hr = xh->data() + i * n;
                    double mean_h = 0.0, mean_hx = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double hj = gr[j] * pg[j];
                        mean_h += hj;
                        mean_hx += hj * hr[j];
                    }
                    mean_h *= invn;
                    mean_hx *= invn;
                    const double s = (*is)[i];
                    double* dr = dx + i * n;
                    for (std::size_t j = 0; j < n; ++j)
                        dr[j] += s * (gr[j] * pg[j] - mean_h - hr[j] * mean_hx);
                }
            }
        });
    }
    return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& idx) {
    const std::size_t n = x.cols(), m = x.rows();
    for (std::size_t r : idx)
        if (r >= m)
            throw std::out_of_range("gather_rows index " + std::to_string(r) +
                                    " out of range for " + x.shape_str());
    std::vector<double> y(idx.size() * n);
    const double* px = x.data();
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy(px + idx[i] * n, px + (idx[i] + 1) * n, y.begin() + i * n);
    Tensor out = Tensor::from({idx.size(), n}, std::move(y));
    Tape* tape = Tape::current();
    if (tape && x.requires_grad()) {
        auto xd = x.handle();
        auto od = out.handle();
        auto ix = std::make_shared<std::vector<std::size_t>>(idx);
        out.set_requires_grad(true);
        tape->record("gather_rows", od, [xd, od, ix, n]() {
            if (od->grad.empty()) return;
            const double* g = od->grad.data();
            double* dx = grad_of(xd);
            for (std::size_t i = 0; i < ix->size(); ++i) {
                double* row = dx + (*ix)[i] * n;
                const double* gr = g + i * n;
                for (std::size_t j = 0; j < n; ++j) row[j] += gr[j];
            }
        });
    }
    return out;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    require(a.cols() == b.cols(),
            "concat_rows width mismatch: " + a.shape_str() + " vs " + b.shape_str());
    const std::size_t ma = a.rows(), mb = b.rows(), n = a.cols();
    std::vector<double> y;
    y.reserve((ma + mb) * n);
    y.insert(y.end(), a.data(), a.data() + ma * n);
    y.insert(y.end(), b.data(), b.data() + mb * n);
    Tensor out = Tensor::from({ma + mb, n}, std::move(y));
    Tape* tape = Tape::current();
    if (tape && (a.requires_grad() || b.requires_grad())) {
        auto ad = a.handle(), bd = b.handle(), od = out.handle();
        out.set_requires_grad(true);
        tape->record("concat_rows", od, [ad, bd, od, ma, mb, n]() {
            if (od->grad.empty()) return;
            const double* g = od->grad.data();
            if (ad->requires_grad) {
                double* da = grad_of(ad);
                for (std::size_t i = 0; i < ma * n; ++i) da[i] += g[i];
            }
            if (bd->requires_grad) {
                double* db = grad_of(bd);
                for (std::size_t i = 0; i < mb * n; ++i) db[i] += g[ma * n + i];
            }
        });
    }
    return out;
}

Tensor row_l2_normalize(const Tensor& x) {
    const std::size_t m = x.rows(), n = x.cols();
    const double kEps = 1e-12;
    std::vector<double> y(x.size());
    std::vector<double> inv(m);
    const double* px = x.data();
    for (std::size_t i = 0; i < m; ++i) {
        double ss = kEps;
        for (std::size_t j = 0; j < n; ++j) ss += px[i * n + j] * px[i * n + j];
        inv[i] = 1.0 / std::sqrt(ss);
        for (std::size_t j = 0; j < n; ++j) y[i * n + j] = px[i * n + j] * inv[i];
    }
    Tensor out = Tensor::from(x.shape(), std::move(y));
    Tape* tape = Tape::current();
    if (tape && x.requires_grad()) {
        auto xd = x.handle();
        auto od = out.handle();
        auto iv = std::make_shared<std::vector<double>>(std::move(inv));
        out.set_requires_grad(true);
        tape->record("row_l2_normalize", od, [xd, od, iv, m, n]() {
            if (od->grad.empty()) return;
            const double* g = od->grad.data();
            const double* yv = od->value.data();
            double* dx = grad_of(xd);
            for (std::size_t i = 0; i < m; ++i) {
                const double* gr = g + i * n;
                const double* yr = yv + i * n;
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
                const double s = (*iv)[i];
                double* dr = dx + i * n;
                for (std::size_t j = 0; j < n; ++j) dr[j] += s * (gr[j] - yr[j] * dot);
            }
        });
    }
    return out;
}

Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x.data()[i];
    Tensor out = Tensor::scalar(s);
    Tape* tape = Tape::current();
    if (tape && x.requires_grad()) {
        auto xd = x.handle();
        auto od = out.handle();
        out.set_requires_grad(true);
        tape->record("sum_all", od, [xd, od]() {
            if (od->grad.empty()) return;
            const double g = od->grad[0];
            double* dx = grad_of(xd);
            for (std::size_t i = 0; i < xd->value.size(); ++i) dx[i] += g;
        });
    }
    return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<double>* weights) {
    const std::size_t b = logits.rows(), v = logits.cols();
    require(targets.size() == b, "cross_entropy expects one target per row (" +
                                     std::to_string(b) + " rows, " +
                                     std::to_string(targets.size()) + " targets)");
    require(b >= 1, "cross_entropy requires at least one item");
    if (weights)
        require(weights->size() == b, "cross_entropy weights length must equal batch size");
    for (int t : targets)
        if (t < 0 || static_cast<std::size_t>(t) >= v)
            throw std::out_of_range("cross_entropy target " + std::to_string(t) +
                                    " outside vocabulary of size " + std::to_string(v));

    double wsum = 0.0;
    if (weights) {
        for (double w : *weights) wsum += w;
    } else {
        wsum = static_cast<double>(b);
    }
    require(wsum > 0.0, "cross_entropy requires at least one nonzero weight");

    const double* px = logits.data();
    std::vector<double> probs(b * v);
    double loss = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        const double* row = px + i * v;
        double mx = row[0];
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            const double e = std::exp(row[j] - mx);
            probs[i * v + j] = e;
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < v; ++j) probs[i * v + j] *= inv;
        const double nll = std::log(sum) + mx - row[targets[i]];
        const double w = weights ? (*weights)[i] : 1.0;
        loss += w * nll;
    }
    loss /= wsum;

    Tensor out = Tensor::scalar(loss);
    debug_check_finite(*out.handle(), "cross_entropy");
    Tape* tape = Tape::current();
    if (tape && logits.requires_grad()) {
        auto xd = logits.handle();
        auto od = out.handle();
        auto pp = std::make_shared<std::vector<double>>(std::move(probs));
        auto tt = std::make_shared<std::vector<int>>(targets);
        auto ww = weights ? std::make_shared<std::vector<double>>(*weights) : nullptr;
        out.set_requires_grad(true);
        tape->record("cross_entropy", od, [xd, od, pp, tt, ww, b, v, wsum]() {
            if (od->grad.empty()) return;
            const double g = od->grad[0];
            double* dx = grad_of(xd);
            for (std::size_t i = 0; i < b; ++i) {
                const double w = ww ? (*ww)[i] : 1.0;
                if (w == 0.0) continue;
                const double c = g * w / wsum;
                const double* pr = pp->data() + i * v;
                double* dr = dx + i * v;
                for (std::size_t j = 0; j < v; ++j) dr[j] += c * pr[j];
                dr[(*tt)[i]] -= c;
            }
        });
    }
    return out;
}

Tensor kl_divergence(const Tensor& pred_logits, const Tensor& target_dist) {
    const std::size_t b = pred_logits.rows(), c = pred_logits.cols();
    require(target_dist.rows() == b && target_dist.cols() == c,
            "kl_divergence shape mismatch: " + pred_logits.shape_str() + " vs " +
                target_dist.shape_str());
    require(b >= 1, "kl_divergence requires at least one row");
    const double* pt = target_dist.data();
    for (std::size_t i = 0; i < b; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double t = pt[i * c + j];
            if (t < 0.0)
                throw std::domain_error("kl_divergence target entry is negative: " +
                                        std::to_string(t));
            sum += t;
        }
        if (std::abs(sum - 1.0) > 1e-6)
            throw std::domain_error("kl_divergence target row " + std::to_string(i) +
                                    " sums to " + std::to_string(sum) + ", expected 1");
    }

    const double* px = pred_logits.data();
    std::vector<double> probs(b * c);
    double loss = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        const double* row = px + i * c;
        double mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double e = std::exp(row[j] - mx);
            probs[i * c + j] = e;
            sum += e;
        }
        const double lse = std::log(sum) + mx;
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < c; ++j) probs[i * c + j] *= inv;
        for (std::size_t j = 0; j < c; ++j) {
            const double t = pt[i * c + j];
            if (t > 0.0) loss += t * (std::log(t) - (row[j] - lse));
        }
    }
    loss /= static_cast<double>(b);

    Tensor out = Tensor::scalar(loss);
    debug_check_finite(*out.handle(), "kl_divergence");
    Tape* tape = Tape::current();
    if (tape && pred_logits.requires_grad()) {
        auto xd = pred_logits.handle();
        auto td = target_dist.handle();
        auto od = out.handle();
        auto pp = std::make_shared<std::vector<double>>(std::move(probs));
        out.set_requires_grad(true);
        tape->record("kl_divergence", od, [xd, td, od, pp, b, c]() {
            if (od->grad.empty()) return;
            const double g = od->grad[0] / static_cast<double>(b);
            double* dx = grad_of(xd);
            const double* pt = td->value.data();
            for (std::size_t i = 0; i < b * c; ++i) dx[i] += g * ((*pp)[i] - pt[i]);
        });
    }
    return out;
}

Tensor triplet_hinge_loss(const Tensor& sim, double margin) {
    const std::size_t b = sim.rows();
    require(sim.ndim() == 2 && sim.cols() == b,
            "triplet_hinge_loss requires a square similarity matrix, got " + sim.shape_str());
    require(b >= 2, "triplet_hinge_loss requires a batch of at least 2 pairs");
    const double* ps = sim.data();
    const double inv_n = 1.0 / static_cast<double>(b * (b - 1));
    double loss = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        const double pos = ps[i * b + i];
        for (std::size_t j = 0; j < b; ++j) {
            if (j == i) continue;
            const double t = margin - pos + ps[i * b + j];
            if (t > 0.0) loss += t;
        }
    }
    loss *= inv_n;

    Tensor out = Tensor::scalar(loss);
    Tape* tape = Tape::current();
    if (tape && sim.requires_grad()) {
        auto sd = sim.handle();
        auto od = out.handle();
        out.set_requires_grad(true);
        tape->record("triplet_hinge_loss", od, [sd, od, b, margin, inv_n]() {
            if (od->grad.empty()) return;
            const double g = od->grad[0] * inv_n;
            const double* ps = sd->value.data();
            double* ds = grad_of(sd);
            for (std::size_t i = 0; i < b; ++i) {
                const double pos = ps[i * b + i];
                for (std::size_t j = 0; j < b; ++j) {
                    if (j == i) continue;
                    if (margin - pos + ps[i * b + j] > 0.0) {
                        ds[i * b + j] += g;
                        ds[i * b + i] -= g;
                    }
                }
            }
        });
    }
    return out;
}

Tensor sigmoid_bce(const Tensor& logits, const std::vector<double>& targets) {
    require(targets.size() == logits.size(),
            "sigmoid_bce target length must match logits (" + std::to_string(logits.size()) +
                " vs " + std::to_string(targets.size()) + ")");
    require(!targets.empty(), "sigmoid_bce requires at least one entry");
    const double* px = logits.data();
    const double inv_n = 1.0 / static_cast<double>(targets.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const double x = px[i];
        // max(x,0) - x t + log(1 + exp(-|x|)), the overflow-safe BCE form.
        loss += std::max(x, 0.0) - x * targets[i] + std::log1p(std::exp(-std::abs(x)));
    }
    loss *= inv_n;

    Tensor out = Tensor::scalar(loss);
    debug_check_finite(*out.handle(), "sigmoid_bce");
    Tape* tape = Tape::current();
    if (tape && logits.requires_grad()) {
        auto xd = logits.handle();
        auto od = out.handle();
        auto tt = std::make_shared<std::vector<double>>(targets);
        out.set_requires_grad(true);
        tape->record("sigmoid_bce", od, [xd, od, tt, inv_n]() {
            if (od->grad.empty()) return;
            const double g = od->grad[0] * inv_n;
            double* dx = grad_of(xd);
            for (std::size_t i = 0; i < tt->size(); ++i) {
                const double s = 1.0 / (1.0 + std::exp(-xd->value[i]));
                dx[i] += g * (s - (*tt)[i]);
            }
        });
    }
    return out;
}

Tensor sum_terms(const std::vector<Tensor>& terms) {
    require(!terms.empty(), "sum_terms requires at least one term");
    Tensor acc = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
    return acc;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                  const GradCheckOptions& opts) {
    for (const Tensor& p : params) {
        const_cast<Tensor&>(p).zero_grad();
    }
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        TapeScope scope(tape);
        Tensor loss = f();
        tape.backward(loss);
    }
    analytic.reserve(params.size());
    for (const Tensor& p : params)
        analytic.push_back(p.has_grad() ? p.grad() : std::vector<double>(p.size(), 0.0));

    Rng rng(opts.seed);
    double max_err = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        std::vector<std::size_t> coords(p.size());
        std::iota(coords.begin(), coords.end(), 0);
        if (coords.size() > opts.max_coords_per_tensor) {
            rng.shuffle(coords);
            coords.resize(opts.max_coords_per_tensor);
        }
        for (std::size_t c : coords) {
            const double orig = p.data()[c];
            p.data()[c] = orig + opts.eps;
            const double fp = f().item();
            p.data()[c] = orig - opts.eps;
            const double fm = f().item();
            p.data()[c] = orig;
            const double numeric = (fp - fm) / (2.0 * opts.eps);
            const double ana = analytic[pi][c];
            const double denom = std::max({1.0, std::abs(ana), std::abs(numeric)});
            max_err = std::max(max_err, std::abs(ana - numeric) / denom);
        }
    }
    return max_err;
}

void check_finite(const Tensor& t, const char* where) {
    for (std::size_t i = 0; i < t.size(); ++i)
        if (!std::isfinite(t.data()[i]))
            throw std::domain_error(std::string("non-finite value in ") + where);
}

}  // namespace tden
