#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "peml/errors.hpp"
#include "peml/rng.hpp"

namespace peml {

// Define-by-run reverse-mode autodiff over dense row-major double tensors.
// The graph is rebuilt each step: every op returns a fresh node holding its
// parents and a closure that pushes the node's grad into them.

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // sized lazily; empty means "not populated"

    std::vector<TensorPtr> parents;
    std::function<void(const Tensor&)> backprop;  // accumulates into parents
    const char* op = "leaf";

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    // 1-D tensors are a single row
    int rows() const { return shape.size() < 2 ? 1 : shape[0]; }
    int cols() const { return shape.size() < 2 ? static_cast<int>(data.size()) : shape[1]; }

    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
    void zero_grad() { grad.assign(data.size(), 0.0); }
};

inline int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

inline TensorPtr make_tensor(std::vector<int> shape, std::vector<double> data,
                             bool requires_grad = false) {
    for (int d : shape)
        if (d < 0) throw DimensionError("negative dimension in shape " + shape_str(shape));
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
        throw DimensionError("shape " + shape_str(shape) + " does not match data length " +
                             std::to_string(data.size()));
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    t->data = std::move(data);
    t->requires_grad = requires_grad;
    return t;
}

inline TensorPtr zeros(std::vector<int> shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return make_tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

inline TensorPtr full(std::vector<int> shape, double v, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return make_tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
}

inline TensorPtr scalar(double v, bool requires_grad = false) {
    return make_tensor({1}, {v}, requires_grad);
}

inline TensorPtr randn(std::vector<int> shape, Rng& rng, double stddev = 1.0,
                       bool requires_grad = false) {
    auto n = shape_numel(shape);
    std::vector<double> d(n);
    for (auto& x : d) x = rng.normal(0.0, stddev);
    return make_tensor(std::move(shape), std::move(d), requires_grad);
}

// Forward passes must not propagate non-finite values.
inline void check_finite(const TensorPtr& t, const char* op) {
    for (double v : t->data)
        if (!std::isfinite(v))
            throw NumericError(std::string("non-finite output in op '") + op + "'");
}

namespace detail {

inline TensorPtr node(std::vector<int> shape, std::vector<double> data, const char* op,
                      std::vector<TensorPtr> parents,
                      std::function<void(const Tensor&)> backprop) {
    auto out = make_tensor(std::move(shape), std::move(data));
    out->op = op;
    for (const auto& p : parents)
        if (p->requires_grad) out->requires_grad = true;
    if (out->requires_grad) {
        out->parents = std::move(parents);
        out->backprop = std::move(backprop);
    }
    check_finite(out, op);
    return out;
}

inline void require_same_shape(const TensorPtr& a, const TensorPtr& b, const char* op) {
    if (a->shape != b->shape)
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a->shape) +
                             " vs " + shape_str(b->shape));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Arithmetic

inline TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> d(a->data.size());
    for (size_t i = 0; i < d.size(); ++i) d[i] = a->data[i] + b->data[i];
    return detail::node(a->shape, std::move(d), "add", {a, b}, [a, b](const Tensor& out) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (size_t i = 0; i < out.grad.size(); ++i) a->grad[i] += out.grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (size_t i = 0; i < out.grad.size(); ++i) b->grad[i] += out.grad[i];
        }
    });
}

inline TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> d(a->data.size());
    for (size_t i = 0; i < d.size(); ++i) d[i] = a->data[i] - b->data[i];
    return detail::node(a->shape, std::move(d), "sub", {a, b}, [a, b](const Tensor& out) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (size_t i = 0; i < out.grad.size(); ++i) a->grad[i] += out.grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (size_t i = 0; i < out.grad.size(); ++i) b->grad[i] -= out.grad[i];
        }
    });
}

inline TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> d(a->data.size());
    for (size_t i = 0; i < d.size(); ++i) d[i] = a->data[i] * b->data[i];
    return detail::node(a->shape, std::move(d), "mul", {a, b}, [a, b](const Tensor& out) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (size_t i = 0; i < out.grad.size(); ++i) a->grad[i] += out.grad[i] * b->data[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (size_t i = 0; i < out.grad.size(); ++i) b->grad[i] += out.grad[i] * a->data[i];
        }
    });
}

inline TensorPtr scale(const TensorPtr& a, double c) {
    std::vector<double> d(a->data.size());
    for (size_t i = 0; i < d.size(); ++i) d[i] = a->data[i] * c;
    return detail::node(a->shape, std::move(d), "scale", {a}, [a, c](const Tensor& out) {
        a->ensure_grad();
        for (size_t i = 0; i < out.grad.size(); ++i) a->grad[i] += out.grad[i] * c;
    });
}

// Multiply by a one-element tensor; gradient flows to both operands.
inline TensorPtr scale_t(const TensorPtr& a, const TensorPtr& s) {
    if (s->numel() != 1) throw DimensionError("scale_t: scale must be a scalar tensor");
    const double c = s->data[0];
    std::vector<double> d(a->data.size());
    for (size_t i = 0; i < d.size(); ++i) d[i] = a->data[i] * c;
    return detail::node(a->shape, std::move(d), "scale_t", {a, s}, [a, s, c](const Tensor& out) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (size_t i = 0; i < out.grad.size(); ++i) a->grad[i] += out.grad[i] * c;
        }
        if (s->requires_grad) {
            s->ensure_grad();
            for (size_t i = 0; i < out.grad.size(); ++i) s->grad[0] += out.grad[i] * a->data[i];
        }
    });
}

// Extract one element as a scalar node.
inline TensorPtr at_index(const TensorPtr& a, int idx) {
    if (idx < 0 || idx >= a->numel()) throw DimensionError("at_index: out of range");
    return detail::node({1}, {a->data[idx]}, "at_index", {a}, [a, idx](const Tensor& out) {
        a->ensure_grad();
        a->grad[idx] += out.grad[0];
    });
}

// a (m x k) times b (k x n)
inline TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    const int m = a->rows(), k = a->cols(), k2 = b->rows(), n = b->cols();
    if (k != k2)
        throw DimensionError("matmul: shape mismatch " + shape_str(a->shape) + " vs " +
                             shape_str(b->shape));
    std::vector<double> d(static_cast<size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            const double av = a->data[static_cast<size_t>(i) * k + p];
            if (av == 0.0) continue;
            const double* brow = &b->data[static_cast<size_t>(p) * n];
            double* drow = &d[static_cast<size_t>(i) * n];
            for (int j = 0; j < n; ++j) drow[j] += av * brow[j];
        }
    }
    return detail::node({m, n}, std::move(d), "matmul", {a, b},
                        [a, b, m, k, n](const Tensor& out) {
                            if (a->requires_grad) {
                                a->ensure_grad();  // dA += dY * B^T
                                for (int i = 0; i < m; ++i)
                                    for (int j = 0; j < n; ++j) {
                                        const double g = out.grad[static_cast<size_t>(i) * n + j];
                                        if (g == 0.0) continue;
                                        for (int p = 0; p < k; ++p)
                                            a->grad[static_cast<size_t>(i) * k + p] +=
                                                g * b->data[static_cast<size_t>(p) * n + j];
                                    }
                            }
                            if (b->requires_grad) {
                                b->ensure_grad();  // dB += A^T * dY
                                for (int i = 0; i < m; ++i)
                                    for (int p = 0; p < k; ++p) {
                                        const double av = a->data[static_cast<size_t>(i) * k + p];
                                        if (av == 0.0) continue;
                                        for (int j = 0; j < n; ++j)
                                            b->grad[static_cast<size_t>(p) * n + j] +=
                                                av * out.grad[static_cast<size_t>(i) * n + j];
                                    }
                            }
                        });
}

inline TensorPtr transpose(const TensorPtr& a) {
    const int m = a->rows(), n = a->cols();
    std::vector<double> d(a->data.size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) d[static_cast<size_t>(j) * m + i] = a->at(i, j);
    return detail::node({n, m}, std::move(d), "transpose", {a}, [a, m, n](const Tensor& out) {
        a->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                a->grad[static_cast<size_t>(i) * n + j] += out.grad[static_cast<size_t>(j) * m + i];
    });
}

// mat (r x c) + row vector (c) added to every row
inline TensorPtr add_rowvec(const TensorPtr& mat, const TensorPtr& vec) {
    const int r = mat->rows(), c = mat->cols();
    if (vec->numel() != c)
        throw DimensionError("add_rowvec: shape mismatch " + shape_str(mat->shape) + " vs " +
                             shape_str(vec->shape));
    std::vector<double> d(mat->data.size());
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) d[static_cast<size_t>(i) * c + j] = mat->at(i, j) + vec->data[j];
    return detail::node(mat->shape, std::move(d), "add_rowvec", {mat, vec},
                        [mat, vec, r, c](const Tensor& out) {
                            if (mat->requires_grad) {
                                mat->ensure_grad();
                                for (size_t i = 0; i < out.grad.size(); ++i)
                                    mat->grad[i] += out.grad[i];
                            }
                            if (vec->requires_grad) {
                                vec->ensure_grad();
                                for (int i = 0; i < r; ++i)
                                    for (int j = 0; j < c; ++j)
                                        vec->grad[j] += out.grad[static_cast<size_t>(i) * c + j];
                            }
                        });
}

// ---------------------------------------------------------------------------
// Nonlinearities

inline TensorPtr relu(const TensorPtr& a) {
    std::vector<double> d(a->data.size());
    for (size_t i = 0; i < d.size(); ++i) d[i] = a->data[i] > 0.0 ? a->data[i] : 0.0;
    return detail::node(a->shape, std::move(d), "relu", {a}, [a](const Tensor& out) {
        a->ensure_grad();
        for (size_t i = 0; i < out.grad.size(); ++i)
            if (a->data[i] > 0.0) a->grad[i] += out.grad[i];
    });
}

inline TensorPtr leaky_relu(const TensorPtr& a, double slope = 0.01) {
    std::vector<double> d(a->data.size());
    for (size_t i = 0; i < d.size(); ++i) d[i] = a->data[i] > 0.0 ? a->data[i] : slope * a->data[i];
    return detail::node(a->shape, std::move(d), "leaky_relu", {a}, [a, slope](const Tensor& out) {
        a->ensure_grad();
        for (size_t i = 0; i < out.grad.size(); ++i)
            a->grad[i] += out.grad[i] * (a->data[i] > 0.0 ? 1.0 : slope);
    });
}

inline TensorPtr tanh_op(const TensorPtr& a) {
    std::vector<double> d(a->data.size());
    for (size_t i = 0; i < d.size(); ++i) d[i] = std::tanh(a->data[i]);
    auto out = detail::node(a->shape, std::move(d), "tanh", {a}, nullptr);
    if (out->requires_grad) {
        auto vals = out->data;  // copy for the closure
        out->backprop = [a, vals](const Tensor& o) {
            a->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i)
                a->grad[i] += o.grad[i] * (1.0 - vals[i] * vals[i]);
        };
    }
    return out;
}

// GELU, tanh approximation:
//   0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
inline TensorPtr gelu(const TensorPtr& a) {
    constexpr double kSqrt2OverPi = 0.7978845608028654;
    constexpr double kCubic = 0.044715;
    std::vector<double> d(a->data.size());
    for (size_t i = 0; i < d.size(); ++i) {
        const double x = a->data[i];
        d[i] = 0.5 * x * (1.0 + std::tanh(kSqrt2OverPi * (x + kCubic * x * x * x)));
    }
    return detail::node(a->shape, std::move(d), "gelu", {a}, [a](const Tensor& out) {
        a->ensure_grad();
        for (size_t i = 0; i < out.grad.size(); ++i) {
            const double x = a->data[i];
            const double u = kSqrt2OverPi * (x + kCubic * x * x * x);
            const double t = std::tanh(u);
            const double du = kSqrt2OverPi * (1.0 + 3.0 * kCubic * x * x);
            a->grad[i] += out.grad[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
        }
    });
}

inline TensorPtr log_op(const TensorPtr& a) {
    std::vector<double> d(a->data.size());
    for (size_t i = 0; i < d.size(); ++i) {
        if (a->data[i] <= 0.0) throw NumericError("log: non-positive input");
        d[i] = std::log(a->data[i]);
    }
    return detail::node(a->shape, std::move(d), "log", {a}, [a](const Tensor& out) {
        a->ensure_grad();
        for (size_t i = 0; i < out.grad.size(); ++i) a->grad[i] += out.grad[i] / a->data[i];
    });
}

// -x log x with the 0 log 0 := 0 convention; used for entropy of simplex rows.
inline TensorPtr neg_xlogx(const TensorPtr& a) {
    constexpr double kTiny = 1e-300;
    std::vector<double> d(a->data.size());
    for (size_t i = 0; i < d.size(); ++i) {
        const double x = a->data[i];
        if (x < 0.0) throw NumericError("neg_xlogx: negative input");
        d[i] = x > kTiny ? -x * std::log(x) : 0.0;
    }
    return detail::node(a->shape, std::move(d), "neg_xlogx", {a}, [a](const Tensor& out) {
        a->ensure_grad();
        for (size_t i = 0; i < out.grad.size(); ++i) {
            const double x = a->data[i] > kTiny ? a->data[i] : kTiny;
            a->grad[i] += out.grad[i] * (-(std::log(x) + 1.0));
        }
    });
}

// ---------------------------------------------------------------------------
// Softmax / normalization

// Row-wise softmax over the last axis (1-D tensors are a single row).
inline TensorPtr softmax(const TensorPtr& a) {
    const int r = a->rows(), c = a->cols();
    std::vector<double> d(a->data.size());
    for (int i = 0; i < r; ++i) {
        const double* row = &a->data[static_cast<size_t>(i) * c];
        double mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < c; ++j) {
            d[static_cast<size_t>(i) * c + j] = std::exp(row[j] - mx);
            sum += d[static_cast<size_t>(i) * c + j];
        }
        for (int j = 0; j < c; ++j) d[static_cast<size_t>(i) * c + j] /= sum;
    }
    auto out = detail::node(a->shape, std::move(d), "softmax", {a}, nullptr);
    if (out->requires_grad) {
        auto p = out->data;
        out->backprop = [a, p, r, c](const Tensor& o) {
            a->ensure_grad();
            for (int i = 0; i < r; ++i) {
                double dot = 0.0;
                for (int j = 0; j < c; ++j) {
                    const size_t idx = static_cast<size_t>(i) * c + j;
                    dot += o.grad[idx] * p[idx];
                }
                for (int j = 0; j < c; ++j) {
                    const size_t idx = static_cast<size_t>(i) * c + j;
                    a->grad[idx] += p[idx] * (o.grad[idx] - dot);
                }
            }
        };
    }
    return out;
}

// Layer norm over the last axis with learnable gain/bias (epsilon 1e-5).
// Gain and bias have length cols; grads accumulate over rows.
inline TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias,
                            double eps = 1e-5) {
    const int r = x->rows(), c = x->cols();
    if (gain->numel() != c || bias->numel() != c)
        throw DimensionError("layer_norm: gain/bias length " + std::to_string(gain->numel()) +
                             " vs width " + std::to_string(c));
    std::vector<double> d(x->data.size());
    std::vector<double> xhat(x->data.size());
    std::vector<double> inv_sigma(r);
    for (int i = 0; i < r; ++i) {
        const double* row = &x->data[static_cast<size_t>(i) * c];
        double mean = 0.0;
        for (int j = 0; j < c; ++j) mean += row[j];
        mean /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= c;
        inv_sigma[i] = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < c; ++j) {
            const size_t idx = static_cast<size_t>(i) * c + j;
            xhat[idx] = (row[j] - mean) * inv_sigma[i];
            d[idx] = xhat[idx] * gain->data[j] + bias->data[j];
        }
    }
    return detail::node(
        x->shape, std::move(d), "layer_norm", {x, gain, bias},
        [x, gain, bias, xhat, inv_sigma, r, c](const Tensor& out) {
            for (int i = 0; i < r; ++i) {
                // dL/dxhat and the two row means needed for dx
                double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                for (int j = 0; j < c; ++j) {
                    const size_t idx = static_cast<size_t>(i) * c + j;
                    const double dxh = out.grad[idx] * gain->data[j];
                    mean_dxhat += dxh;
                    mean_dxhat_xhat += dxh * xhat[idx];
                }
                mean_dxhat /= c;
                mean_dxhat_xhat /= c;
                if (x->requires_grad) {
                    x->ensure_grad();
                    for (int j = 0; j < c; ++j) {
                        const size_t idx = static_cast<size_t>(i) * c + j;
                        const double dxh = out.grad[idx] * gain->data[j];
                        x->grad[idx] +=
                            inv_sigma[i] * (dxh - mean_dxhat - xhat[idx] * mean_dxhat_xhat);
                    }
                }
                if (gain->requires_grad) {
                    gain->ensure_grad();
                    for (int j = 0; j < c; ++j) {
                        const size_t idx = static_cast<size_t>(i) * c + j;
                        gain->grad[j] += out.grad[idx] * xhat[idx];
                    }
                }
                if (bias->requires_grad) {
                    bias->ensure_grad();
                    for (int j = 0; j < c; ++j)
                        bias->grad[j] += out.grad[static_cast<size_t>(i) * c + j];
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Dropout

// Train-mode inverted dropout with a counter-based mask keyed by
// (substream seed, step, tensor id): any forward pass is replayable.
struct DropoutKey {
    uint64_t seed = 0;
    uint64_t step = 0;
    uint64_t tensor_id = 0;
};

inline TensorPtr dropout(const TensorPtr& a, double p, const DropoutKey& key, bool train) {
    if (p < 0.0 || p >= 1.0)
        throw ParameterError("dropout: p must be in [0,1), got " + std::to_string(p));
    if (!train || p == 0.0) return a;  // eval mode is the identity, bitwise
    const double inv_keep = 1.0 / (1.0 - p);
    std::vector<double> d(a->data.size());
    auto mask = std::make_shared<std::vector<bool>>(a->data.size());
    for (size_t i = 0; i < d.size(); ++i) {
        (*mask)[i] = dropout_keep(key.seed, key.step, key.tensor_id, i, p);
        d[i] = (*mask)[i] ? a->data[i] * inv_keep : 0.0;
    }
    return detail::node(a->shape, std::move(d), "dropout", {a},
                        [a, mask, inv_keep](const Tensor& out) {
                            a->ensure_grad();
                            for (size_t i = 0; i < out.grad.size(); ++i)
                                if ((*mask)[i]) a->grad[i] += out.grad[i] * inv_keep;
                        });
}

// ---------------------------------------------------------------------------
// Shape surgery

// Concatenate along the row (sequence) axis.
inline TensorPtr concat_rows(const TensorPtr& a, const TensorPtr& b) {
    if (a->cols() != b->cols())
        throw DimensionError("concat_rows: width mismatch " + shape_str(a->shape) + " vs " +
                             shape_str(b->shape));
    if (a->numel() == 0) return b;
    if (b->numel() == 0) return a;
    std::vector<double> d;
    d.reserve(a->data.size() + b->data.size());
    d.insert(d.end(), a->data.begin(), a->data.end());
    d.insert(d.end(), b->data.begin(), b->data.end());
    const size_t na = a->data.size();
    return detail::node({a->rows() + b->rows(), a->cols()}, std::move(d), "concat_rows", {a, b},
                        [a, b, na](const Tensor& out) {
                            if (a->requires_grad) {
                                a->ensure_grad();
                                for (size_t i = 0; i < na; ++i) a->grad[i] += out.grad[i];
                            }
                            if (b->requires_grad) {
                                b->ensure_grad();
                                for (size_t i = na; i < out.grad.size(); ++i)
                                    b->grad[i - na] += out.grad[i];
                            }
                        });
}

inline TensorPtr slice_cols(const TensorPtr& a, int start, int n) {
    const int r = a->rows(), c = a->cols();
    if (start < 0 || n < 0 || start + n > c)
        throw DimensionError("slice_cols: [" + std::to_string(start) + "," +
                             std::to_string(start + n) + ") out of width " + std::to_string(c));
    std::vector<double> d(static_cast<size_t>(r) * n);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < n; ++j) d[static_cast<size_t>(i) * n + j] = a->at(i, start + j);
    return detail::node({r, n}, std::move(d), "slice_cols", {a},
                        [a, start, n, r, c](const Tensor& out) {
                            a->ensure_grad();
                            for (int i = 0; i < r; ++i)
                                for (int j = 0; j < n; ++j)
                                    a->grad[static_cast<size_t>(i) * c + start + j] +=
                                        out.grad[static_cast<size_t>(i) * n + j];
                        });
}

inline TensorPtr concat_cols(const std::vector<TensorPtr>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: empty input");
    const int r = parts[0]->rows();
    int total = 0;
    for (const auto& p : parts) {
        if (p->rows() != r)
            throw DimensionError("concat_cols: row mismatch " + shape_str(p->shape));
        total += p->cols();
    }
    std::vector<double> d(static_cast<size_t>(r) * total);
    int off = 0;
    for (const auto& p : parts) {
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < p->cols(); ++j)
                d[static_cast<size_t>(i) * total + off + j] = p->at(i, j);
        off += p->cols();
    }
    return detail::node({r, total}, std::move(d), "concat_cols", parts,
                        [parts, r, total](const Tensor& out) {
                            int off = 0;
                            for (const auto& p : parts) {
                                if (p->requires_grad) {
                                    p->ensure_grad();
                                    for (int i = 0; i < r; ++i)
                                        for (int j = 0; j < p->cols(); ++j)
                                            p->grad[static_cast<size_t>(i) * p->cols() + j] +=
                                                out.grad[static_cast<size_t>(i) * total + off + j];
                                }
                                off += p->cols();
                            }
                        });
}

// ---------------------------------------------------------------------------
// Reductions / losses

inline TensorPtr sum(const TensorPtr& a) {
    double s = 0.0;
    for (double v : a->data) s += v;
    return detail::node({1}, {s}, "sum", {a}, [a](const Tensor& out) {
        a->ensure_grad();
        for (size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += out.grad[0];
    });
}

// Column means: (r x c) -> (1 x c)
inline TensorPtr mean_rows(const TensorPtr& a) {
    const int r = a->rows(), c = a->cols();
    if (r == 0) throw ContractError("mean_rows: empty tensor");
    std::vector<double> d(c, 0.0);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) d[j] += a->at(i, j);
    for (int j = 0; j < c; ++j) d[j] /= r;
    return detail::node({1, c}, std::move(d), "mean_rows", {a}, [a, r, c](const Tensor& out) {
        a->ensure_grad();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
                a->grad[static_cast<size_t>(i) * c + j] += out.grad[j] / r;
    });
}

// Mean cross-entropy with logits: logits (b x classes), integer targets.
inline TensorPtr cross_entropy_logits(const TensorPtr& logits, const std::vector<int>& targets) {
    const int b = logits->rows(), c = logits->cols();
    if (static_cast<int>(targets.size()) != b)
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                             " targets for batch " + std::to_string(b));
    auto probs = std::make_shared<std::vector<double>>(logits->data.size());
    double loss = 0.0;
    for (int i = 0; i < b; ++i) {
        if (targets[i] < 0 || targets[i] >= c)
            throw DataError("cross_entropy: target " + std::to_string(targets[i]) +
                            " out of range for " + std::to_string(c) + " classes");
        const double* row = &logits->data[static_cast<size_t>(i) * c];
        double mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
        const double lse = mx + std::log(sum);
        loss += lse - row[targets[i]];
        for (int j = 0; j < c; ++j)
            (*probs)[static_cast<size_t>(i) * c + j] = std::exp(row[j] - lse);
    }
    loss /= b;
    return detail::node({1}, {loss}, "cross_entropy", {logits},
                        [logits, probs, targets, b, c](const Tensor& out) {
                            logits->ensure_grad();
                            const double g = out.grad[0] / b;
                            for (int i = 0; i < b; ++i)
                                for (int j = 0; j < c; ++j) {
                                    const size_t idx = static_cast<size_t>(i) * c + j;
                                    logits->grad[idx] +=
                                        g * ((*probs)[idx] - (j == targets[i] ? 1.0 : 0.0));
                                }
                        });
}

// Mean squared error against a constant target.
inline TensorPtr mse(const TensorPtr& pred, const std::vector<double>& target) {
    if (pred->data.size() != target.size())
        throw DimensionError("mse: " + std::to_string(target.size()) + " targets vs " +
                             std::to_string(pred->data.size()) + " predictions");
    const auto n = pred->data.size();
    double loss = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double e = pred->data[i] - target[i];
        loss += e * e;
    }
    loss /= static_cast<double>(n);
    return detail::node({1}, {loss}, "mse", {pred}, [pred, target, n](const Tensor& out) {
        pred->ensure_grad();
        for (size_t i = 0; i < n; ++i)
            pred->grad[i] += out.grad[0] * 2.0 * (pred->data[i] - target[i]) / static_cast<double>(n);
    });
}

// Embedding lookup: table (vocab x d), ids -> (len x d). Gradients scatter-add.
inline TensorPtr embedding(const TensorPtr& table, const std::vector<int>& ids) {
    const int vocab = table->rows(), d = table->cols();
    std::vector<double> out(ids.size() * static_cast<size_t>(d));
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= vocab)
            throw DataError("embedding: token id " + std::to_string(ids[i]) +
                            " out of vocab " + std::to_string(vocab));
        for (int j = 0; j < d; ++j)
            out[i * d + j] = table->data[static_cast<size_t>(ids[i]) * d + j];
    }
    return detail::node({static_cast<int>(ids.size()), d}, std::move(out), "embedding", {table},
                        [table, ids, d](const Tensor& o) {
                            table->ensure_grad();
                            for (size_t i = 0; i < ids.size(); ++i)
                                for (int j = 0; j < d; ++j)
                                    table->grad[static_cast<size_t>(ids[i]) * d + j] +=
                                        o.grad[i * d + j];
                        });
}

// ---------------------------------------------------------------------------
// Backward pass

// Populates .grad on every requires_grad tensor reachable from loss.
// Grads of reachable nodes are zeroed first, so repeated backward calls on
// fresh graphs accumulate only within one call (fan-out sums correctly).
inline void backward(const TensorPtr& loss) {
    if (loss->numel() != 1) throw ContractError("backward: loss must be scalar");
    std::vector<Tensor*> order;
    std::unordered_set<Tensor*> seen;
    std::vector<std::pair<TensorPtr, size_t>> stack;  // (node, next child index)
    if (!loss->requires_grad) return;
    stack.emplace_back(loss, 0);
    seen.insert(loss.get());
    std::unordered_map<Tensor*, TensorPtr> keep;  // keep shared ownership during traversal
    keep[loss.get()] = loss;
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorPtr child = node->parents[idx++];
            if (child->requires_grad && !seen.count(child.get())) {
                seen.insert(child.get());
                keep[child.get()] = child;
                stack.emplace_back(std::move(child), 0);
            }
        } else {
            order.push_back(node.get());
            stack.pop_back();
        }
    }
    for (Tensor* t : order) t->zero_grad();
    loss->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backprop) (*it)->backprop(**it);
}

// ---------------------------------------------------------------------------
// Finite-difference oracle

// Max over coordinates of |analytic - central difference| normalized by
// max(1, |analytic|, |numeric|). f must be deterministic.
inline double finite_diff_check(const std::function<TensorPtr(const TensorPtr&)>& f,
                                const TensorPtr& x, double eps = 1e-5) {
    if (eps <= 0.0) throw ParameterError("finite_diff_check: eps must be positive");
    x->requires_grad = true;
    auto loss = f(x);
    {
        auto again = f(x);
        if (again->data[0] != loss->data[0])
            throw ContractError("finite_diff_check: f is not deterministic");
    }
    backward(loss);
    std::vector<double> analytic = x->grad;
    if (analytic.empty()) analytic.assign(x->data.size(), 0.0);

    double worst = 0.0;
    for (size_t i = 0; i < x->data.size(); ++i) {
        const double orig = x->data[i];
        x->data[i] = orig + eps;
        const double fp = f(x)->data[0];
        x->data[i] = orig - eps;
        const double fm = f(x)->data[0];
        x->data[i] = orig;
        const double numeric = (fp - fm) / (2.0 * eps);
        const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    return worst;
}

}  // namespace peml
