// Independent plain transformer encoder used as an oracle against the
// library's prefix-attention path. Deliberately naive: per-position loops,
// its own softmax/layer-norm/gelu, no shared code with the tensor library
// beyond reading weight buffers.
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "pflsim/model.hpp"

namespace vanilla {

using Row = std::vector<double>;
using Mat = std::vector<Row>;

inline Mat from_tensor(const pflsim::Tensor& t) {
    const std::size_t r = t.rows(), c = t.cols();
    Mat m(r, Row(c));
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) m[i][j] = t.data()[i * c + j];
    return m;
}

inline Row matvec_row(const Row& x, const Mat& w) {
    Row out(w[0].size(), 0.0);
    for (std::size_t k = 0; k < x.size(); ++k)
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += x[k] * w[k][j];
    return out;
}

inline Row layer_norm_row(const Row& x, const Row& gamma, const Row& beta, double eps = 1e-5) {
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(x.size());
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(x.size());
    Row out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i)
        out[i] = (x[i] - mean) / std::sqrt(var + eps) * gamma[i] + beta[i];
    return out;
}

inline double gelu_scalar(double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); }

inline Row softmax(const Row& scores) {
    double mx = scores[0];
    for (double s : scores) mx = std::max(mx, s);
    Row w(scores.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        w[i] = std::exp(scores[i] - mx);
        sum += w[i];
    }
    for (auto& v : w) v /= sum;
    return w;
}

// Per-head attention contexts for one sequence, before the output
// projection. Returns [seq][heads][dh].
inline std::vector<Mat> mha_head_contexts(const Mat& x, const Mat& wq, const Mat& wk, const Mat& wv,
                                          std::size_t heads, const std::vector<std::uint8_t>& valid) {
    const std::size_t seq = x.size(), d = x[0].size(), dh = d / heads;
    Mat q(seq), k(seq), v(seq);
    for (std::size_t s = 0; s < seq; ++s) {
        q[s] = matvec_row(x[s], wq);
        k[s] = matvec_row(x[s], wk);
        v[s] = matvec_row(x[s], wv);
    }
    std::vector<Mat> ctx(seq, Mat(heads, Row(dh, 0.0)));
    for (std::size_t s = 0; s < seq; ++s)
        for (std::size_t h = 0; h < heads; ++h) {
            Row scores;
            std::vector<std::size_t> open;
            for (std::size_t u = 0; u < seq; ++u) {
                if (!valid[u]) continue;
                double dot = 0.0;
                for (std::size_t t = 0; t < dh; ++t) dot += q[s][h * dh + t] * k[u][h * dh + t];
                scores.push_back(dot / std::sqrt(static_cast<double>(dh)));
                open.push_back(u);
            }
            Row w = softmax(scores);
            for (std::size_t j = 0; j < open.size(); ++j)
                for (std::size_t t = 0; t < dh; ++t) ctx[s][h][t] += w[j] * v[open[j]][h * dh + t];
        }
    return ctx;
}

inline Mat mha(const Mat& x, const Mat& wq, const Mat& wk, const Mat& wv, const Mat& wo, std::size_t heads,
               const std::vector<std::uint8_t>& valid) {
    const std::size_t seq = x.size(), d = x[0].size(), dh = d / heads;
    auto ctx = mha_head_contexts(x, wq, wk, wv, heads, valid);
    Mat out(seq);
    for (std::size_t s = 0; s < seq; ++s) {
        Row cat(d);
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t t = 0; t < dh; ++t) cat[h * dh + t] = ctx[s][h][t];
        out[s] = matvec_row(cat, wo);
    }
    return out;
}

struct BlockMats {
    Mat wq, wk, wv, wo, w1, w2;
    Row ln1_g, ln1_b, ln2_g, ln2_b;

    static BlockMats from(const pflsim::model::BlockWeights& w) {
        BlockMats b;
        b.wq = from_tensor(w.wq);
        b.wk = from_tensor(w.wk);
        b.wv = from_tensor(w.wv);
        b.wo = from_tensor(w.wo);
        b.w1 = from_tensor(w.w1);
        b.w2 = from_tensor(w.w2);
        b.ln1_g = from_tensor(w.ln1_gamma)[0];
        b.ln1_b = from_tensor(w.ln1_beta)[0];
        b.ln2_g = from_tensor(w.ln2_gamma)[0];
        b.ln2_b = from_tensor(w.ln2_beta)[0];
        return b;
    }
};

inline Mat block(const Mat& x, const BlockMats& w, std::size_t heads, const std::vector<std::uint8_t>& valid) {
    const std::size_t seq = x.size();
    Mat normed(seq);
    for (std::size_t s = 0; s < seq; ++s) normed[s] = layer_norm_row(x[s], w.ln1_g, w.ln1_b);
    Mat attn = mha(normed, w.wq, w.wk, w.wv, w.wo, heads, valid);
    Mat mid(seq);
    for (std::size_t s = 0; s < seq; ++s) {
        mid[s] = x[s];
        for (std::size_t j = 0; j < mid[s].size(); ++j) mid[s][j] += attn[s][j];
    }
    Mat out(seq);
    for (std::size_t s = 0; s < seq; ++s) {
        Row n2 = layer_norm_row(mid[s], w.ln2_g, w.ln2_b);
        Row h1 = matvec_row(n2, w.w1);
        for (auto& v : h1) v = gelu_scalar(v);
        Row h2 = matvec_row(h1, w.w2);
        out[s] = mid[s];
        for (std::size_t j = 0; j < out[s].size(); ++j) out[s][j] += h2[j];
    }
    return out;
}

inline Mat embed(const std::vector<int>& tokens, pflsim::model::Modality tower,
                 const pflsim::model::Backbone& backbone) {
    const std::size_t d = backbone.width;
    Mat out(tokens.size(), Row(d));
    const auto& table = backbone.embedding(tower).data();
    const auto& pe = backbone.pos_enc.data();
    for (std::size_t s = 0; s < tokens.size(); ++s)
        for (std::size_t j = 0; j < d; ++j)
            out[s][j] = table[static_cast<std::size_t>(tokens[s]) * d + j] + pe[s * d + j];
    return out;
}

// Full no-prompt tower: embed, r plain blocks, mean pool over valid rows.
inline Row encode(const std::vector<int>& tokens, const std::vector<std::uint8_t>& valid,
                  pflsim::model::Modality tower, const pflsim::model::Backbone& backbone) {
    Mat h = vanilla::embed(tokens, tower, backbone);
    for (const auto& blk : backbone.tower(tower).blocks) h = block(h, BlockMats::from(blk), backbone.heads, valid);
    Row pooled(backbone.width, 0.0);
    std::size_t n = 0;
    for (std::size_t s = 0; s < h.size(); ++s) {
        if (!valid[s]) continue;
        ++n;
        for (std::size_t j = 0; j < pooled.size(); ++j) pooled[j] += h[s][j];
    }
    for (auto& v : pooled) v /= static_cast<double>(n);
    return pooled;
}

}  // namespace vanilla
