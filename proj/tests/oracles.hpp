#pragma once

// Independent reference computations for the tests. Nothing here calls the
// library's kernels or layer objects.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "feathernet/metrics.hpp"
#include "feathernet/model.hpp"

namespace oracle {

struct Dims {
    std::size_t n, c, h, w;
};

// Plain six-loop convolution over flat N-C-H-W buffers, double accumulation.
inline std::vector<double> conv(const std::vector<double>& x, Dims in, const std::vector<double>& wt, std::size_t out_c,
                                std::size_t k, std::size_t stride, std::size_t pad, std::size_t groups,
                                const std::vector<double>& bias, std::size_t& out_h, std::size_t& out_w) {
    out_h = (in.h + 2 * pad - k) / stride + 1;
    out_w = (in.w + 2 * pad - k) / stride + 1;
    const std::size_t cin_g = in.c / groups, cout_g = out_c / groups;
    std::vector<double> y(in.n * out_c * out_h * out_w, 0.0);
    for (std::size_t n = 0; n < in.n; ++n)
        for (std::size_t o = 0; o < out_c; ++o)
            for (std::size_t oy = 0; oy < out_h; ++oy)
                for (std::size_t ox = 0; ox < out_w; ++ox) {
                    double acc = bias.empty() ? 0.0 : bias[o];
                    const std::size_t g = o / cout_g;
                    for (std::size_t ci = 0; ci < cin_g; ++ci)
                        for (std::size_t ky = 0; ky < k; ++ky)
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                                if (iy < 0 || ix < 0 || iy >= static_cast<long>(in.h) || ix >= static_cast<long>(in.w))
                                    continue;
                                const std::size_t c = g * cin_g + ci;
                                acc += x[((n * in.c + c) * in.h + iy) * in.w + ix] *
                                       wt[((o * cin_g + ci) * k + ky) * k + kx];
                            }
                    y[((n * out_c + o) * out_h + oy) * out_w + ox] = acc;
                }
    return y;
}

// Mean over each k x k window at the given stride.
inline std::vector<double> window_mean(const std::vector<double>& x, Dims in, std::size_t k, std::size_t s,
                                       std::size_t& out_h, std::size_t& out_w) {
    out_h = (in.h - k) / s + 1;
    out_w = (in.w - k) / s + 1;
    std::vector<double> y;
    for (std::size_t n = 0; n < in.n; ++n)
        for (std::size_t c = 0; c < in.c; ++c)
            for (std::size_t oy = 0; oy < out_h; ++oy)
                for (std::size_t ox = 0; ox < out_w; ++ox) {
                    double sum = 0.0;
                    for (std::size_t dy = 0; dy < k; ++dy)
                        for (std::size_t dx = 0; dx < k; ++dx)
                            sum += x[((n * in.c + c) * in.h + oy * s + dy) * in.w + ox * s + dx];
                    y.push_back(sum / static_cast<double>(k * k));
                }
    return y;
}

struct Rates {
    double apcer, npcer, acer;
};

// Counts by direct enumeration: real iff score >= threshold.
inline Rates count_rates(const std::vector<double>& scores, const std::vector<feathernet::Label>& labels, double thr) {
    double fake = 0, real = 0, fake_acc = 0, real_rej = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool says_real = scores[i] >= thr;
        if (labels[i] == feathernet::Label::Real) {
            ++real;
            if (!says_real) ++real_rej;
        } else {
            ++fake;
            if (says_real) ++fake_acc;
        }
    }
    const double apcer = fake_acc / fake, npcer = real_rej / real;
    return {apcer, npcer, (apcer + npcer) / 2};
}

// Best TPR over every candidate threshold (each score and +inf) with FPR <= target.
inline double best_tpr(const std::vector<double>& scores, const std::vector<feathernet::Label>& labels, double target) {
    std::vector<double> candidates = scores;
    candidates.push_back(INFINITY);
    double best = 0.0;
    for (double t : candidates) {
        std::size_t tp = 0, fp = 0, pos = 0, neg = 0;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            const bool real = labels[i] == feathernet::Label::Real;
            (real ? pos : neg)++;
            if (scores[i] >= t) (real ? tp : fp)++;
        }
        if (static_cast<double>(fp) <= target * static_cast<double>(neg)) {
            best = std::max(best, static_cast<double>(tp) / static_cast<double>(pos));
        }
    }
    return best;
}

// Probability a random real outranks a random fake, ties counting half.
inline double pairwise_auc(const std::vector<double>& scores, const std::vector<feathernet::Label>& labels) {
    double wins = 0, pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != feathernet::Label::Real) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != feathernet::Label::Fake) continue;
            ++pairs;
            wins += scores[i] > scores[j] ? 1.0 : scores[i] == scores[j] ? 0.5 : 0.0;
        }
    }
    return wins / pairs;
}

struct Cost {
    std::uint64_t params = 0;
    std::uint64_t madds = 0;
};

// Walks the stage table with closed-form layer costs.
inline Cost arch_cost(const feathernet::ArchSpec& arch) {
    using feathernet::StageOp;
    Cost total;
    const auto conv_bn = [&](std::uint64_t in, std::uint64_t out, std::uint64_t k, std::uint64_t groups,
                             std::uint64_t out_extent) {
        total.params += out * (in / groups) * k * k + 2 * out;
        total.madds += out_extent * out_extent * out * k * k * (in / groups);
    };
    const auto down = [](std::uint64_t e) { return (e + 2 - 3) / 2 + 1; };
    for (const auto& row : arch.rows) {
        const std::uint64_t e = row.extent, c = row.channels, out = row.out, t = row.expansion;
        switch (row.op) {
            case StageOp::Stem: {
                const std::uint64_t k = arch.stem_kernel;
                conv_bn(c, out, k, 1, (e + 2 * (k / 2) - k) / 2 + 1);
                break;
            }
            case StageOp::BlockA:
            case StageOp::BlockB:
            case StageOp::BlockC: {
                std::uint64_t in = c, extent = e;
                for (std::size_t r = 0; r < row.repeat; ++r) {
                    const bool first_down = row.op != StageOp::BlockA && r == 0;
                    const std::uint64_t out_e = first_down ? down(extent) : extent;
                    const std::uint64_t hidden = t * in;
                    if (t != 1) conv_bn(in, hidden, 1, 1, extent);
                    conv_bn(hidden, hidden, 3, hidden, out_e);
                    conv_bn(hidden, out, 1, 1, out_e);
                    if (first_down && row.op == StageOp::BlockB) conv_bn(in, out, 1, 1, out_e);
                    if (first_down) {
                        const std::uint64_t m = out / arch.se_reduce;
                        total.params += out * m + m + m * out + out;
                        total.madds += 2 * out * m;
                    }
                    in = out;
                    extent = out_e;
                }
                break;
            }
            case StageOp::Streaming: {
                const std::uint64_t oe = down(e);
                total.params += c * 9;
                total.madds += oe * oe * c * 9;
                const std::uint64_t d = oe * oe * c;
                if (arch.head == feathernet::HeadKind::Linear2) {
                    total.params += d * 2 + 2;
                    total.madds += d * 2;
                } else if (arch.head == feathernet::HeadKind::GapLinear2) {
                    total.params += c * 2 + 2;
                    total.madds += c * 2;
                }
                break;
            }
        }
    }
    return total;
}

}  // namespace oracle
