#include "feathernet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace feathernet {

std::string to_string(const Shape4& s) {
    std::ostringstream os;
    os << s.n << "x" << s.c << "x" << s.h << "x" << s.w;
    return os.str();
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape4 shape, std::span<const Scalar> values) : Tensor(shape) {
    if (values.size() != shape.size()) {
        throw ShapeError("tensor", "value count " + std::to_string(values.size()) + " does not match shape " +
                                       to_string(shape));
    }
    std::copy(values.begin(), values.end(), data_.data());
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::reshaped(Shape4 shape) const {
    if (shape.size() != size()) {
        throw ShapeError("tensor", "cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    Tensor out(shape);
    out.data_ = data_;
    return out;
}

template class Tensor<float>;
template class Tensor<double>;

std::size_t ConvGeometry::output_extent(std::size_t in, int axis) const {
    const char* name = axis == 0 ? "height" : "width";
    const auto k = kernel[axis];
    const auto s = stride[axis];
    const auto p = padding[axis];
    if (k == 0 || s == 0) throw ShapeError("conv", std::string("zero kernel or stride on ") + name);
    if (in + 2 * p < k) {
        throw ShapeError("conv", std::string(name) + " extent " + std::to_string(in) + " (padding " +
                                     std::to_string(p) + ") is smaller than kernel " + std::to_string(k));
    }
    return (in + 2 * p - k) / s + 1;
}

namespace {

template <typename Scalar>
using ConstRowMap = Eigen::Map<const RowMatrix<Scalar>>;
template <typename Scalar>
using RowMap = Eigen::Map<RowMatrix<Scalar>>;

template <typename Scalar>
void require_finite(const Tensor<Scalar>& t, const char* origin) {
    if (!t.all_finite()) throw Error(origin, "non-finite value in input " + to_string(t.shape()));
}

void require_same(const Shape4& a, const Shape4& b, const char* origin) {
    if (a == b) return;
    const char* axis = a.n != b.n ? "batch" : a.c != b.c ? "channel" : a.h != b.h ? "height" : "width";
    throw ShapeError(origin, std::string(axis) + " mismatch: " + to_string(a) + " vs " + to_string(b));
}

bool is_pointwise(const ConvGeometry& g) {
    return g.kernel[0] == 1 && g.kernel[1] == 1 && g.stride[0] == 1 && g.stride[1] == 1 && g.padding[0] == 0 &&
           g.padding[1] == 0;
}

// Gathers the receptive fields of channels [c0, c0 + channels) of sample n
// into a (channels*kh*kw) x (outH*outW) matrix.
template <typename Scalar>
void im2col(const Tensor<Scalar>& input, std::size_t n, std::size_t c0, std::size_t channels, const ConvGeometry& g,
            std::size_t out_h, std::size_t out_w, RowMatrix<Scalar>& cols) {
    const auto& s = input.shape();
    const auto kh = g.kernel[0], kw = g.kernel[1];
    const auto sy = g.stride[0], sx = g.stride[1];
    const auto py = static_cast<std::ptrdiff_t>(g.padding[0]), px = static_cast<std::ptrdiff_t>(g.padding[1]);
    const auto H = static_cast<std::ptrdiff_t>(s.h), W = static_cast<std::ptrdiff_t>(s.w);
    for (std::size_t c = 0; c < channels; ++c) {
        const Scalar* plane = input.data() + input.offset(n, c0 + c, 0, 0);
        for (std::size_t ky = 0; ky < kh; ++ky) {
            for (std::size_t kx = 0; kx < kw; ++kx) {
                Scalar* row = cols.data() + ((c * kh + ky) * kw + kx) * out_h * out_w;
                for (std::size_t oy = 0; oy < out_h; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * sy + ky) - py;
                    Scalar* dst = row + oy * out_w;
                    if (iy < 0 || iy >= H) {
                        std::fill(dst, dst + out_w, Scalar(0));
                        continue;
                    }
                    const Scalar* src = plane + iy * W;
                    for (std::size_t ox = 0; ox < out_w; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * sx + kx) - px;
                        dst[ox] = (ix >= 0 && ix < W) ? src[ix] : Scalar(0);
                    }
                }
            }
        }
    }
}

// Scatter-adds a column matrix back onto channels [c0, c0 + channels) of sample n.
template <typename Scalar>
void col2im(const RowMatrix<Scalar>& cols, std::size_t n, std::size_t c0, std::size_t channels, const ConvGeometry& g,
            std::size_t out_h, std::size_t out_w, Tensor<Scalar>& grad_input) {
    const auto& s = grad_input.shape();
    const auto kh = g.kernel[0], kw = g.kernel[1];
    const auto sy = g.stride[0], sx = g.stride[1];
    const auto py = static_cast<std::ptrdiff_t>(g.padding[0]), px = static_cast<std::ptrdiff_t>(g.padding[1]);
    const auto H = static_cast<std::ptrdiff_t>(s.h), W = static_cast<std::ptrdiff_t>(s.w);
    for (std::size_t c = 0; c < channels; ++c) {
        Scalar* plane = grad_input.data() + grad_input.offset(n, c0 + c, 0, 0);
        for (std::size_t ky = 0; ky < kh; ++ky) {
            for (std::size_t kx = 0; kx < kw; ++kx) {
                const Scalar* row = cols.data() + ((c * kh + ky) * kw + kx) * out_h * out_w;
                for (std::size_t oy = 0; oy < out_h; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * sy + ky) - py;
                    if (iy < 0 || iy >= H) continue;
                    const Scalar* src = row + oy * out_w;
                    Scalar* dst = plane + iy * W;
                    for (std::size_t ox = 0; ox < out_w; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * sx + kx) - px;
                        if (ix >= 0 && ix < W) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Shape4 conv_output_shape(const Shape4& input, const Shape4& weight, const ConvGeometry& g) {
    if (g.groups == 0) throw ShapeError("conv", "groups must be positive");
    if (input.c % g.groups != 0) {
        throw ShapeError("conv", "channel axis: input channels " + std::to_string(input.c) +
                                     " not divisible by groups " + std::to_string(g.groups));
    }
    if (weight.n % g.groups != 0) {
        throw ShapeError("conv", "channel axis: output channels " + std::to_string(weight.n) +
                                     " not divisible by groups " + std::to_string(g.groups));
    }
    if (weight.c != input.c / g.groups) {
        throw ShapeError("conv", "channel axis: weight expects " + std::to_string(weight.c) +
                                     " input channels per group, input provides " +
                                     std::to_string(input.c / g.groups));
    }
    if (weight.h != g.kernel[0]) throw ShapeError("conv", "height axis: weight kernel height differs from geometry");
    if (weight.w != g.kernel[1]) throw ShapeError("conv", "width axis: weight kernel width differs from geometry");
    return {input.n, weight.n, g.output_extent(input.h, 0), g.output_extent(input.w, 1)};
}

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& weight, std::span<const Scalar> bias,
                      const ConvGeometry& geom) {
    const Shape4 out_shape = conv_output_shape(input.shape(), weight.shape(), geom);
    if (!bias.empty() && bias.size() != out_shape.c) {
        throw ShapeError("conv", "bias length " + std::to_string(bias.size()) + " differs from output channels " +
                                     std::to_string(out_shape.c));
    }
    require_finite(input, "conv");

    const auto groups = geom.groups;
    const auto cg = input.shape().c / groups;
    const auto og = out_shape.c / groups;
    const auto k = cg * geom.kernel[0] * geom.kernel[1];
    const auto p = out_shape.plane();
    const bool pointwise = is_pointwise(geom);

    Tensor<Scalar> out(out_shape);
    RowMatrix<Scalar> cols;
    if (!pointwise) cols.resize(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(p));
    for (std::size_t n = 0; n < input.shape().n; ++n) {
        for (std::size_t g = 0; g < groups; ++g) {
            ConstRowMap<Scalar> w(weight.data() + g * og * k, og, k);
            RowMap<Scalar> y(out.data() + out.offset(n, g * og, 0, 0), og, p);
            if (pointwise) {
                y.noalias() = w * ConstRowMap<Scalar>(input.data() + input.offset(n, g * cg, 0, 0), cg, p);
            } else {
                im2col(input, n, g * cg, cg, geom, out_shape.h, out_shape.w, cols);
                y.noalias() = w * cols;
            }
            if (!bias.empty()) {
                for (std::size_t o = 0; o < og; ++o) y.row(static_cast<Eigen::Index>(o)).array() += bias[g * og + o];
            }
        }
    }
    return out;
}

template <typename Scalar>
ConvGrads<Scalar> conv2d_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& weight, bool with_bias,
                                  const ConvGeometry& geom, const Tensor<Scalar>& grad_output) {
    const Shape4 out_shape = conv_output_shape(input.shape(), weight.shape(), geom);
    require_same(grad_output.shape(), out_shape, "conv backward");

    const auto groups = geom.groups;
    const auto cg = input.shape().c / groups;
    const auto og = out_shape.c / groups;
    const auto k = cg * geom.kernel[0] * geom.kernel[1];
    const auto p = out_shape.plane();
    const bool pointwise = is_pointwise(geom);

    ConvGrads<Scalar> grads{Tensor<Scalar>(input.shape()), Tensor<Scalar>(weight.shape()), {}};
    if (with_bias) grads.bias = VectorX<Scalar>::Zero(static_cast<Eigen::Index>(out_shape.c));

    RowMatrix<Scalar> cols;
    RowMatrix<Scalar> dcols(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(p));
    if (!pointwise) cols.resize(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(p));
    for (std::size_t n = 0; n < input.shape().n; ++n) {
        for (std::size_t g = 0; g < groups; ++g) {
            ConstRowMap<Scalar> w(weight.data() + g * og * k, og, k);
            RowMap<Scalar> dw(grads.weight.data() + g * og * k, og, k);
            ConstRowMap<Scalar> dy(grad_output.data() + grad_output.offset(n, g * og, 0, 0), og, p);
            if (pointwise) {
                ConstRowMap<Scalar> x(input.data() + input.offset(n, g * cg, 0, 0), cg, p);
                dw.noalias() += dy * x.transpose();
                RowMap<Scalar> dx(grads.input.data() + grads.input.offset(n, g * cg, 0, 0), cg, p);
                dx.noalias() += w.transpose() * dy;
            } else {
                im2col(input, n, g * cg, cg, geom, out_shape.h, out_shape.w, cols);
                dw.noalias() += dy * cols.transpose();
                dcols.noalias() = w.transpose() * dy;
                col2im(dcols, n, g * cg, cg, geom, out_shape.h, out_shape.w, grads.input);
            }
            if (with_bias) grads.bias.segment(static_cast<Eigen::Index>(g * og), og) += dy.rowwise().sum();
        }
    }
    return grads;
}

namespace {

void check_depthwise(const Shape4& input, const Shape4& weight, const ConvGeometry& g) {
    if (g.groups != input.c) {
        throw ShapeError("depthwise conv", "channel axis: groups " + std::to_string(g.groups) +
                                               " must equal input channels " + std::to_string(input.c));
    }
    if (weight.n != input.c || weight.c != 1) {
        throw ShapeError("depthwise conv", "channel axis: weight " + to_string(weight) + " does not match " +
                                               std::to_string(input.c) + " input channels");
    }
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> depthwise_conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& weight, const ConvGeometry& geom) {
    check_depthwise(input.shape(), weight.shape(), geom);
    const Shape4 out_shape = conv_output_shape(input.shape(), weight.shape(), geom);
    require_finite(input, "depthwise conv");

    const auto& s = input.shape();
    const auto kh = geom.kernel[0], kw = geom.kernel[1];
    const auto sy = geom.stride[0], sx = geom.stride[1];
    const auto py = static_cast<std::ptrdiff_t>(geom.padding[0]), px = static_cast<std::ptrdiff_t>(geom.padding[1]);
    const auto H = static_cast<std::ptrdiff_t>(s.h), W = static_cast<std::ptrdiff_t>(s.w);

    Tensor<Scalar> out(out_shape);
    for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t c = 0; c < s.c; ++c) {
            const Scalar* in = input.data() + input.offset(n, c, 0, 0);
            const Scalar* k = weight.data() + c * kh * kw;
            Scalar* dst = out.data() + out.offset(n, c, 0, 0);
            for (std::size_t oy = 0; oy < out_shape.h; ++oy) {
                for (std::size_t ox = 0; ox < out_shape.w; ++ox) {
                    Scalar acc = 0;
                    for (std::size_t ky = 0; ky < kh; ++ky) {
                        const auto iy = static_cast<std::ptrdiff_t>(oy * sy + ky) - py;
                        if (iy < 0 || iy >= H) continue;
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            const auto ix = static_cast<std::ptrdiff_t>(ox * sx + kx) - px;
                            if (ix < 0 || ix >= W) continue;
                            acc += k[ky * kw + kx] * in[iy * W + ix];
                        }
                    }
                    dst[oy * out_shape.w + ox] = acc;
                }
            }
        }
    }
    return out;
}

template <typename Scalar>
ConvGrads<Scalar> depthwise_conv2d_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& weight,
                                            const ConvGeometry& geom, const Tensor<Scalar>& grad_output) {
    check_depthwise(input.shape(), weight.shape(), geom);
    const Shape4 out_shape = conv_output_shape(input.shape(), weight.shape(), geom);
    require_same(grad_output.shape(), out_shape, "depthwise conv backward");

    const auto& s = input.shape();
    const auto kh = geom.kernel[0], kw = geom.kernel[1];
    const auto sy = geom.stride[0], sx = geom.stride[1];
    const auto py = static_cast<std::ptrdiff_t>(geom.padding[0]), px = static_cast<std::ptrdiff_t>(geom.padding[1]);
    const auto H = static_cast<std::ptrdiff_t>(s.h), W = static_cast<std::ptrdiff_t>(s.w);

    ConvGrads<Scalar> grads{Tensor<Scalar>(s), Tensor<Scalar>(weight.shape()), {}};
    for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t c = 0; c < s.c; ++c) {
            const Scalar* in = input.data() + input.offset(n, c, 0, 0);
            const Scalar* k = weight.data() + c * kh * kw;
            Scalar* dk = grads.weight.data() + c * kh * kw;
            Scalar* din = grads.input.data() + grads.input.offset(n, c, 0, 0);
            const Scalar* dy = grad_output.data() + grad_output.offset(n, c, 0, 0);
            for (std::size_t oy = 0; oy < out_shape.h; ++oy) {
                for (std::size_t ox = 0; ox < out_shape.w; ++ox) {
                    const Scalar g = dy[oy * out_shape.w + ox];
                    for (std::size_t ky = 0; ky < kh; ++ky) {
                        const auto iy = static_cast<std::ptrdiff_t>(oy * sy + ky) - py;
                        if (iy < 0 || iy >= H) continue;
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            const auto ix = static_cast<std::ptrdiff_t>(ox * sx + kx) - px;
                            if (ix < 0 || ix >= W) continue;
                            dk[ky * kw + kx] += g * in[iy * W + ix];
                            din[iy * W + ix] += g * k[ky * kw + kx];
                        }
                    }
                }
            }
        }
    }
    return grads;
}

// -------------------------------------------------------------------- pooling

namespace {

Shape4 pool_output_shape(const Shape4& s, std::size_t kernel, std::size_t stride) {
    if (s.h < kernel || s.w < kernel) {
        throw ShapeError("avg pool", "spatial extent " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                                         " smaller than kernel " + std::to_string(kernel));
    }
    const auto g = ConvGeometry::square(kernel, stride, 0);
    return {s.n, s.c, g.output_extent(s.h, 0), g.output_extent(s.w, 1)};
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> avg_pool2d(const Tensor<Scalar>& input, std::size_t kernel, std::size_t stride) {
    const Shape4 os = pool_output_shape(input.shape(), kernel, stride);
    const auto& s = input.shape();
    const Scalar inv = Scalar(1) / static_cast<Scalar>(kernel * kernel);
    Tensor<Scalar> out(os);
    for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t c = 0; c < s.c; ++c) {
            const Scalar* in = input.data() + input.offset(n, c, 0, 0);
            Scalar* dst = out.data() + out.offset(n, c, 0, 0);
            for (std::size_t oy = 0; oy < os.h; ++oy) {
                for (std::size_t ox = 0; ox < os.w; ++ox) {
                    Scalar acc = 0;
                    for (std::size_t ky = 0; ky < kernel; ++ky)
                        for (std::size_t kx = 0; kx < kernel; ++kx)
                            acc += in[(oy * stride + ky) * s.w + ox * stride + kx];
                    dst[oy * os.w + ox] = acc * inv;
                }
            }
        }
    }
    return out;
}

template <typename Scalar>
Tensor<Scalar> avg_pool2d_backward(const Shape4& input_shape, const Tensor<Scalar>& grad_output, std::size_t kernel,
                                   std::size_t stride) {
    const Shape4 os = pool_output_shape(input_shape, kernel, stride);
    require_same(grad_output.shape(), os, "avg pool backward");
    const Scalar inv = Scalar(1) / static_cast<Scalar>(kernel * kernel);
    Tensor<Scalar> grad(input_shape);
    for (std::size_t n = 0; n < os.n; ++n) {
        for (std::size_t c = 0; c < os.c; ++c) {
            Scalar* din = grad.data() + grad.offset(n, c, 0, 0);
            const Scalar* dy = grad_output.data() + grad_output.offset(n, c, 0, 0);
            for (std::size_t oy = 0; oy < os.h; ++oy) {
                for (std::size_t ox = 0; ox < os.w; ++ox) {
                    const Scalar g = dy[oy * os.w + ox] * inv;
                    for (std::size_t ky = 0; ky < kernel; ++ky)
                        for (std::size_t kx = 0; kx < kernel; ++kx)
                            din[(oy * stride + ky) * input_shape.w + ox * stride + kx] += g;
                }
            }
        }
    }
    return grad;
}

template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& input) {
    const auto& s = input.shape();
    Tensor<Scalar> out({s.n, s.c, 1, 1});
    const auto plane = static_cast<Eigen::Index>(s.plane());
    for (std::size_t i = 0; i < s.n * s.c; ++i) {
        out[i] = Eigen::Map<const VectorX<Scalar>>(input.data() + i * s.plane(), plane).mean();
    }
    return out;
}

template <typename Scalar>
Tensor<Scalar> global_avg_pool_backward(const Shape4& input_shape, const Tensor<Scalar>& grad_output) {
    require_same(grad_output.shape(), {input_shape.n, input_shape.c, 1, 1}, "global avg pool backward");
    Tensor<Scalar> grad(input_shape);
    const Scalar inv = Scalar(1) / static_cast<Scalar>(input_shape.plane());
    for (std::size_t i = 0; i < input_shape.n * input_shape.c; ++i) {
        std::fill_n(grad.data() + i * input_shape.plane(), input_shape.plane(), grad_output[i] * inv);
    }
    return grad;
}

// ----------------------------------------------------------------- batch norm

namespace {

template <typename Scalar>
void check_channels(const Shape4& s, std::size_t n, const char* what) {
    if (n != s.c) {
        throw ShapeError("batch norm", std::string("channel axis: ") + what + " length " + std::to_string(n) +
                                           " differs from " + std::to_string(s.c) + " channels");
    }
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> batch_norm_train(const Tensor<Scalar>& input, std::span<const Scalar> scale, std::span<const Scalar> shift,
                                std::span<Scalar> running_mean, std::span<Scalar> running_var,
                                BatchNormCache<Scalar>& cache, double momentum, double epsilon) {
    const auto& s = input.shape();
    check_channels<Scalar>(s, scale.size(), "scale");
    check_channels<Scalar>(s, shift.size(), "shift");
    check_channels<Scalar>(s, running_mean.size(), "running mean");
    check_channels<Scalar>(s, running_var.size(), "running var");

    const std::size_t plane = s.plane();
    const double count = static_cast<double>(s.n * plane);
    cache.normalized = Tensor<Scalar>(s);
    cache.inv_std.resize(static_cast<Eigen::Index>(s.c));
    Tensor<Scalar> out(s);

    for (std::size_t c = 0; c < s.c; ++c) {
        // Fixed reduction order: batch-major, then row-major within the plane.
        double sum = 0.0;
        for (std::size_t n = 0; n < s.n; ++n) {
            const Scalar* x = input.data() + input.offset(n, c, 0, 0);
            for (std::size_t i = 0; i < plane; ++i) sum += x[i];
        }
        const double mean = sum / count;
        double sq = 0.0;
        for (std::size_t n = 0; n < s.n; ++n) {
            const Scalar* x = input.data() + input.offset(n, c, 0, 0);
            for (std::size_t i = 0; i < plane; ++i) {
                const double d = x[i] - mean;
                sq += d * d;
            }
        }
        const double var = sq / count;
        const double inv_std = 1.0 / std::sqrt(var + epsilon);
        cache.inv_std[static_cast<Eigen::Index>(c)] = static_cast<Scalar>(inv_std);
        for (std::size_t n = 0; n < s.n; ++n) {
            const auto off = input.offset(n, c, 0, 0);
            for (std::size_t i = 0; i < plane; ++i) {
                const auto xhat = static_cast<Scalar>((input[off + i] - mean) * inv_std);
                cache.normalized[off + i] = xhat;
                out[off + i] = scale[c] * xhat + shift[c];
            }
        }
        const double unbiased = count > 1.0 ? var * count / (count - 1.0) : var;
        running_mean[c] = static_cast<Scalar>((1.0 - momentum) * running_mean[c] + momentum * mean);
        running_var[c] = static_cast<Scalar>((1.0 - momentum) * running_var[c] + momentum * unbiased);
    }
    return out;
}

template <typename Scalar>
Tensor<Scalar> batch_norm_infer(const Tensor<Scalar>& input, std::span<const Scalar> scale, std::span<const Scalar> shift,
                                std::span<const Scalar> running_mean, std::span<const Scalar> running_var,
                                double epsilon) {
    const auto& s = input.shape();
    check_channels<Scalar>(s, scale.size(), "scale");
    check_channels<Scalar>(s, shift.size(), "shift");
    check_channels<Scalar>(s, running_mean.size(), "running mean");
    check_channels<Scalar>(s, running_var.size(), "running var");
    Tensor<Scalar> out(s);
    const auto plane = static_cast<Eigen::Index>(s.plane());
    for (std::size_t c = 0; c < s.c; ++c) {
        const auto a = static_cast<Scalar>(scale[c] / std::sqrt(static_cast<double>(running_var[c]) + epsilon));
        const auto b = static_cast<Scalar>(shift[c] - a * running_mean[c]);
        for (std::size_t n = 0; n < s.n; ++n) {
            const auto off = input.offset(n, c, 0, 0);
            Eigen::Map<VectorX<Scalar>>(out.data() + off, plane) =
                (Eigen::Map<const VectorX<Scalar>>(input.data() + off, plane).array() * a + b).matrix();
        }
    }
    return out;
}

template <typename Scalar>
BatchNormGrads<Scalar> batch_norm_backward(const Tensor<Scalar>& grad_output, const BatchNormCache<Scalar>& cache,
                                           std::span<const Scalar> scale) {
    const auto& s = grad_output.shape();
    require_same(s, cache.normalized.shape(), "batch norm backward");
    check_channels<Scalar>(s, scale.size(), "scale");
    const std::size_t plane = s.plane();
    const double count = static_cast<double>(s.n * plane);

    BatchNormGrads<Scalar> grads{Tensor<Scalar>(s), VectorX<Scalar>::Zero(static_cast<Eigen::Index>(s.c)),
                                 VectorX<Scalar>::Zero(static_cast<Eigen::Index>(s.c))};
    for (std::size_t c = 0; c < s.c; ++c) {
        double dshift = 0.0, dscale = 0.0;
        for (std::size_t n = 0; n < s.n; ++n) {
            const auto off = grad_output.offset(n, c, 0, 0);
            for (std::size_t i = 0; i < plane; ++i) {
                dshift += grad_output[off + i];
                dscale += static_cast<double>(grad_output[off + i]) * cache.normalized[off + i];
            }
        }
        grads.shift[static_cast<Eigen::Index>(c)] = static_cast<Scalar>(dshift);
        grads.scale[static_cast<Eigen::Index>(c)] = static_cast<Scalar>(dscale);
        const double k = scale[c] * static_cast<double>(cache.inv_std[static_cast<Eigen::Index>(c)]) / count;
        for (std::size_t n = 0; n < s.n; ++n) {
            const auto off = grad_output.offset(n, c, 0, 0);
            for (std::size_t i = 0; i < plane; ++i) {
                grads.input[off + i] = static_cast<Scalar>(
                    k * (count * grad_output[off + i] - dshift - cache.normalized[off + i] * dscale));
            }
        }
    }
    return grads;
}

// ---------------------------------------------------------------- activations

template <typename Scalar>
Tensor<Scalar> relu6(const Tensor<Scalar>& input) {
    Tensor<Scalar> out(input.shape());
    out.values() = input.values().array().max(Scalar(0)).min(Scalar(6)).matrix();
    return out;
}

template <typename Scalar>
Tensor<Scalar> relu6_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& grad_output) {
    require_same(input.shape(), grad_output.shape(), "relu6 backward");
    Tensor<Scalar> grad(input.shape());
    const auto x = input.values().array();
    grad.values() = ((x > Scalar(0)) && (x < Scalar(6))).select(grad_output.values().array(), Scalar(0)).matrix();
    return grad;
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& input) {
    Tensor<Scalar> out(input.shape());
    out.values() = (Scalar(1) / (Scalar(1) + (-input.values().array()).exp())).matrix();
    return out;
}

template <typename Scalar>
Tensor<Scalar> sigmoid_backward(const Tensor<Scalar>& output, const Tensor<Scalar>& grad_output) {
    require_same(output.shape(), grad_output.shape(), "sigmoid backward");
    Tensor<Scalar> grad(output.shape());
    const auto y = output.values().array();
    grad.values() = (grad_output.values().array() * y * (Scalar(1) - y)).matrix();
    return grad;
}

// ---------------------------------------------------------------- dense layers

template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& input, const Tensor<Scalar>& weight, std::span<const Scalar> bias) {
    const auto n = input.shape().n;
    const auto d = input.shape().sample();
    const auto& ws = weight.shape();
    if (ws.n != d || ws.h != 1 || ws.w != 1) {
        throw ShapeError("linear", "feature axis: input has " + std::to_string(d) + " features, weight is " +
                                       to_string(ws));
    }
    const auto k = ws.c;
    if (!bias.empty() && bias.size() != k) {
        throw ShapeError("linear", "bias length " + std::to_string(bias.size()) + " differs from " +
                                       std::to_string(k) + " outputs");
    }
    Tensor<Scalar> out({n, k, 1, 1});
    RowMap<Scalar> y(out.data(), n, k);
    y.noalias() = ConstRowMap<Scalar>(input.data(), n, d) * ConstRowMap<Scalar>(weight.data(), d, k);
    if (!bias.empty()) {
        y.rowwise() += Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bias.data(), k);
    }
    return out;
}

template <typename Scalar>
LinearGrads<Scalar> linear_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& weight, bool with_bias,
                                    const Tensor<Scalar>& grad_output) {
    const auto n = input.shape().n;
    const auto d = input.shape().sample();
    const auto k = weight.shape().c;
    require_same(grad_output.shape(), {n, k, 1, 1}, "linear backward");
    LinearGrads<Scalar> grads{Tensor<Scalar>(input.shape()), Tensor<Scalar>(weight.shape()), {}};
    ConstRowMap<Scalar> dy(grad_output.data(), n, k);
    RowMap<Scalar>(grads.input.data(), n, d).noalias() = dy * ConstRowMap<Scalar>(weight.data(), d, k).transpose();
    RowMap<Scalar>(grads.weight.data(), d, k).noalias() = ConstRowMap<Scalar>(input.data(), n, d).transpose() * dy;
    if (with_bias) grads.bias = dy.colwise().sum().transpose();
    return grads;
}

template <typename Scalar>
Tensor<Scalar> softmax2(const Tensor<Scalar>& logits) {
    if (logits.shape().sample() != 2) {
        throw ShapeError("softmax2", "class axis: expected 2 logits per row, got " +
                                         std::to_string(logits.shape().sample()));
    }
    Tensor<Scalar> out({logits.shape().n, 2, 1, 1});
    for (std::size_t i = 0; i < logits.shape().n; ++i) {
        const Scalar a = logits[2 * i], b = logits[2 * i + 1];
        const Scalar m = std::max(a, b);
        const Scalar ea = std::exp(a - m), eb = std::exp(b - m);
        out[2 * i] = ea / (ea + eb);
        out[2 * i + 1] = eb / (ea + eb);
    }
    return out;
}

template <typename Scalar>
Tensor<Scalar> add_residual(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    require_same(a.shape(), b.shape(), "add");
    Tensor<Scalar> out(a.shape());
    out.values() = a.values() + b.values();
    return out;
}

template <typename Scalar>
Tensor<Scalar> flatten(const Tensor<Scalar>& input) {
    return input.reshaped({input.shape().n, input.shape().sample(), 1, 1});
}

template <typename Scalar>
Tensor<Scalar> conv2d_reference(const Tensor<Scalar>& input, const Tensor<Scalar>& weight, std::span<const Scalar> bias,
                                const ConvGeometry& g) {
    const Shape4 out_shape = conv_output_shape(input.shape(), weight.shape(), g);
    const auto& in = input.shape();
    const auto& ws = weight.shape();
    const std::size_t in_per_group = in.c / g.groups, out_per_group = ws.n / g.groups;
    Tensor<Scalar> out(out_shape);
    for (std::size_t n = 0; n < out_shape.n; ++n) {
        for (std::size_t m = 0; m < out_shape.c; ++m) {
            const std::size_t c0 = (m / out_per_group) * in_per_group;
            for (std::size_t oy = 0; oy < out_shape.h; ++oy) {
                for (std::size_t ox = 0; ox < out_shape.w; ++ox) {
                    double acc = bias.empty() ? 0.0 : static_cast<double>(bias[m]);
                    for (std::size_t c = 0; c < in_per_group; ++c) {
                        for (std::size_t ky = 0; ky < ws.h; ++ky) {
                            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride[0] + ky) -
                                            static_cast<std::ptrdiff_t>(g.padding[0]);
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.h)) continue;
                            for (std::size_t kx = 0; kx < ws.w; ++kx) {
                                const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride[1] + kx) -
                                                static_cast<std::ptrdiff_t>(g.padding[1]);
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in.w)) continue;
                                acc += static_cast<double>(input.at(n, c0 + c, static_cast<std::size_t>(iy),
                                                                    static_cast<std::size_t>(ix))) *
                                       static_cast<double>(weight.at(m, c, ky, kx));
                            }
                        }
                    }
                    out.at(n, m, oy, ox) = static_cast<Scalar>(acc);
                }
            }
        }
    }
    return out;
}

#define FEATHERNET_INSTANTIATE_OPS(S)                                                                                 \
    template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, std::span<const S>, const ConvGeometry&);          \
    template Tensor<S> conv2d_reference(const Tensor<S>&, const Tensor<S>&, std::span<const S>,                     \
                                        const ConvGeometry&);                                                        \
    template ConvGrads<S> conv2d_backward(const Tensor<S>&, const Tensor<S>&, bool, const ConvGeometry&,             \
                                          const Tensor<S>&);                                                         \
    template Tensor<S> depthwise_conv2d(const Tensor<S>&, const Tensor<S>&, const ConvGeometry&);                    \
    template ConvGrads<S> depthwise_conv2d_backward(const Tensor<S>&, const Tensor<S>&, const ConvGeometry&,         \
                                                    const Tensor<S>&);                                               \
    template Tensor<S> avg_pool2d(const Tensor<S>&, std::size_t, std::size_t);                                       \
    template Tensor<S> avg_pool2d_backward(const Shape4&, const Tensor<S>&, std::size_t, std::size_t);               \
    template Tensor<S> global_avg_pool(const Tensor<S>&);                                                            \
    template Tensor<S> global_avg_pool_backward(const Shape4&, const Tensor<S>&);                                    \
    template Tensor<S> batch_norm_train(const Tensor<S>&, std::span<const S>, std::span<const S>, std::span<S>,      \
                                        std::span<S>, BatchNormCache<S>&, double, double);                           \
    template Tensor<S> batch_norm_infer(const Tensor<S>&, std::span<const S>, std::span<const S>,                    \
                                        std::span<const S>, std::span<const S>, double);                             \
    template BatchNormGrads<S> batch_norm_backward(const Tensor<S>&, const BatchNormCache<S>&, std::span<const S>);  \
    template Tensor<S> relu6(const Tensor<S>&);                                                                      \
    template Tensor<S> relu6_backward(const Tensor<S>&, const Tensor<S>&);                                           \
    template Tensor<S> sigmoid(const Tensor<S>&);                                                                    \
    template Tensor<S> sigmoid_backward(const Tensor<S>&, const Tensor<S>&);                                         \
    template Tensor<S> linear(const Tensor<S>&, const Tensor<S>&, std::span<const S>);                               \
    template LinearGrads<S> linear_backward(const Tensor<S>&, const Tensor<S>&, bool, const Tensor<S>&);             \
    template Tensor<S> softmax2(const Tensor<S>&);                                                                   \
    template Tensor<S> add_residual(const Tensor<S>&, const Tensor<S>&);                                             \
    template Tensor<S> flatten(const Tensor<S>&);

FEATHERNET_INSTANTIATE_OPS(float)
FEATHERNET_INSTANTIATE_OPS(double)

#undef FEATHERNET_INSTANTIATE_OPS

}  // namespace feathernet
