#pragma once

#include <bit>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pflsim/rng.hpp"
#include "pflsim/tensor.hpp"

namespace pflsim::model {

enum class Modality { image, text };
enum class PromptKind { local, shared };

inline const char* to_string(Modality m) { return m == Modality::image ? "image" : "text"; }
inline const char* to_string(PromptKind k) { return k == PromptKind::local ? "local" : "shared"; }

/// Trainable prefix prompts for one tower: r blocks of L rows of width D.
/// Each block slice splits into a key half and a value half.
struct PromptSet {
    Tensor values;  // {r, L, D}
    Modality modality = Modality::image;
    PromptKind kind = PromptKind::local;

    std::size_t blocks() const { return values.shape()[0]; }
    std::size_t length() const { return values.shape()[1]; }
    std::size_t width() const { return values.shape()[2]; }

    static PromptSet make(std::size_t r, std::size_t L, std::size_t D, Modality modality, PromptKind kind,
                          Rng* rng = nullptr, double stddev = 0.02) {
        if (L == 0 || L % 2 != 0)
            throw std::invalid_argument("PromptSet: prompt length must be positive and even, got " +
                                        std::to_string(L));
        PromptSet p;
        const bool trainable = kind == PromptKind::local;
        p.values = rng ? Tensor::randn({r, L, D}, *rng, 0.0, stddev, trainable)
                       : Tensor::zeros({r, L, D}, trainable);
        p.modality = modality;
        p.kind = kind;
        return p;
    }
};

/// Key/value prefix halves of one block slice: first L/2 rows key, last L/2 value.
inline std::pair<Tensor, Tensor> split_prompt(const PromptSet& p, std::size_t block) {
    if (block >= p.blocks())
        throw std::out_of_range("split_prompt: block " + std::to_string(block) + " out of " +
                                std::to_string(p.blocks()));
    const std::size_t L = p.length();
    const std::size_t base = block * L;
    return {slice_rows(p.values, base, base + L / 2), slice_rows(p.values, base + L / 2, base + L)};
}

struct BlockWeights {
    Tensor wq, wk, wv, wo;  // {D, D}
    Tensor w1, w2;          // {D, H}, {H, D}
    Tensor ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;  // {D}
};

struct TowerWeights {
    std::vector<BlockWeights> blocks;
};

/// Frozen transformer parameters, bitwise-identical across all clients for a
/// run. Two towers with separate weights inside one value; never receives
/// gradients.
struct Backbone {
    std::size_t width = 0;       // D
    std::size_t heads = 0;       // m
    std::size_t block_count = 0; // r
    std::size_t ffn_hidden = 0;
    std::size_t img_vocab = 0;
    std::size_t txt_vocab = 0;
    std::size_t max_seq = 0;

    Tensor img_embed, txt_embed;  // {V, D}
    Tensor pos_enc;               // {max_seq, D}, sinusoidal
    TowerWeights img_tower, txt_tower;

    static Backbone init(std::size_t r, std::size_t D, std::size_t m, std::size_t img_vocab,
                         std::size_t txt_vocab, std::size_t max_seq, std::uint64_t seed,
                         std::size_t ffn_hidden = 0) {
        if (m == 0 || D % m != 0)
            throw std::invalid_argument("Backbone: head count " + std::to_string(m) + " must divide width " +
                                        std::to_string(D));
        Backbone b;
        b.width = D;
        b.heads = m;
        b.block_count = r;
        b.ffn_hidden = ffn_hidden ? ffn_hidden : 4 * D;
        b.img_vocab = img_vocab;
        b.txt_vocab = txt_vocab;
        b.max_seq = max_seq;

        Rng rng = Rng::derive(seed, 0xbacb0e);
        b.img_embed = Tensor::randn({img_vocab, D}, rng, 0.0, 0.02);
        b.txt_embed = Tensor::randn({txt_vocab, D}, rng, 0.0, 0.02);
        b.pos_enc = sinusoidal_table(max_seq, D);
        for (TowerWeights* tower : {&b.img_tower, &b.txt_tower}) {
            tower->blocks.resize(r);
            for (auto& blk : tower->blocks) {
                blk.wq = Tensor::randn({D, D}, rng, 0.0, 0.02);
                blk.wk = Tensor::randn({D, D}, rng, 0.0, 0.02);
                blk.wv = Tensor::randn({D, D}, rng, 0.0, 0.02);
                blk.wo = Tensor::randn({D, D}, rng, 0.0, 0.02);
                blk.w1 = Tensor::randn({D, b.ffn_hidden}, rng, 0.0, 0.02);
                blk.w2 = Tensor::randn({b.ffn_hidden, D}, rng, 0.0, 0.02);
                blk.ln1_gamma = Tensor::full({D}, 1.0);
                blk.ln1_beta = Tensor::zeros({D});
                blk.ln2_gamma = Tensor::full({D}, 1.0);
                blk.ln2_beta = Tensor::zeros({D});
            }
        }
        return b;
    }

    const TowerWeights& tower(Modality m_) const { return m_ == Modality::image ? img_tower : txt_tower; }
    const Tensor& embedding(Modality m_) const { return m_ == Modality::image ? img_embed : txt_embed; }
    std::size_t vocab(Modality m_) const { return m_ == Modality::image ? img_vocab : txt_vocab; }

    std::size_t param_count() const {
        std::size_t n = img_embed.numel() + txt_embed.numel();
        for (const TowerWeights* t : {&img_tower, &txt_tower})
            for (const auto& blk : t->blocks)
                n += blk.wq.numel() + blk.wk.numel() + blk.wv.numel() + blk.wo.numel() + blk.w1.numel() +
                     blk.w2.numel() + blk.ln1_gamma.numel() + blk.ln1_beta.numel() + blk.ln2_gamma.numel() +
                     blk.ln2_beta.numel();
        return n;
    }

    /// FNV-1a over every parameter byte; pinned by tests across a whole run.
    std::uint64_t content_hash() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        auto eat = [&h](const Tensor& t) {
            for (double v : t.data()) {
                const std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
                for (int i = 0; i < 8; ++i) {
                    h ^= (bits >> (8 * i)) & 0xff;
                    h *= 0x100000001b3ULL;
                }
            }
        };
        eat(img_embed);
        eat(txt_embed);
        eat(pos_enc);
        for (const TowerWeights* t : {&img_tower, &txt_tower})
            for (const auto& blk : t->blocks)
                for (const Tensor* w : {&blk.wq, &blk.wk, &blk.wv, &blk.wo, &blk.w1, &blk.w2, &blk.ln1_gamma,
                                        &blk.ln1_beta, &blk.ln2_gamma, &blk.ln2_beta})
                    eat(*w);
        return h;
    }

    static Tensor sinusoidal_table(std::size_t max_seq, std::size_t D) {
        std::vector<double> pe(max_seq * D);
        for (std::size_t pos = 0; pos < max_seq; ++pos)
            for (std::size_t i = 0; i < D; ++i) {
                const double exponent = static_cast<double>(2 * (i / 2)) / static_cast<double>(D);
                const double angle = static_cast<double>(pos) / std::pow(10000.0, exponent);
                pe[pos * D + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
            }
        return Tensor::from_data({max_seq, D}, std::move(pe));
    }
};

/// Personalized 2-layer MLP answer head; output width = the owning client's
/// answer-vocabulary size.
struct AnswerHead {
    Tensor w1, b1;  // {2D, hidden}, {hidden}
    Tensor w2, b2;  // {hidden, answers}, {answers}
    double dropout_rate = 0.2;

    std::size_t answers() const { return w2.shape()[1]; }
    std::size_t hidden() const { return w1.shape()[1]; }

    static AnswerHead init(std::size_t D, std::size_t answers, Rng& rng, std::size_t hidden = 512,
                           double dropout_rate = 0.2) {
        AnswerHead h;
        h.w1 = Tensor::randn({2 * D, hidden}, rng, 0.0, 0.02, true);
        h.b1 = Tensor::zeros({hidden}, true);
        h.w2 = Tensor::randn({hidden, answers}, rng, 0.0, 0.02, true);
        h.b2 = Tensor::zeros({answers}, true);
        h.dropout_rate = dropout_rate;
        return h;
    }

    std::size_t param_count() const { return w1.numel() + b1.numel() + w2.numel() + b2.numel(); }
};

// ---------------------------------------------------------------------------
// Forward ops
// ---------------------------------------------------------------------------

/// Embedding lookup plus sinusoidal positional encoding, positionwise.
/// Batched layout: tokens has batch*seq ids, rows grouped per sample.
/// Output carries no gradient (the tables are frozen).
inline Tensor embed(const std::vector<int>& tokens, std::size_t batch, std::size_t seq, Modality tower,
                    const Backbone& backbone) {
    if (tokens.size() != batch * seq) throw std::invalid_argument("embed: token count != batch*seq");
    if (seq > backbone.max_seq)
        throw std::invalid_argument("embed: sequence length " + std::to_string(seq) +
                                    " exceeds positional table " + std::to_string(backbone.max_seq));
    const Tensor& table = backbone.embedding(tower);
    const std::size_t D = backbone.width;
    const std::size_t vocab = backbone.vocab(tower);
    std::vector<double> out(batch * seq * D);
    const double* emb = table.data().data();
    const double* pe = backbone.pos_enc.data().data();
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const int id = tokens[i];
        if (id < 0 || static_cast<std::size_t>(id) >= vocab)
            throw std::invalid_argument("embed: token id " + std::to_string(id) + " out of vocabulary [0," +
                                        std::to_string(vocab) + ") at index " + std::to_string(i));
        const std::size_t pos = i % seq;
        const double* erow = emb + static_cast<std::size_t>(id) * D;
        const double* prow = pe + pos * D;
        double* orow = out.data() + i * D;
        for (std::size_t d = 0; d < D; ++d) orow[d] = erow[d] + prow[d];
    }
    return Tensor::from_data({batch * seq, D}, std::move(out));
}

inline Tensor embed(const std::vector<int>& tokens, Modality tower, const Backbone& backbone) {
    return embed(tokens, 1, tokens.size(), tower, backbone);
}

/// Multi-head scaled dot-product attention over [prefix keys ; real keys],
/// queries from real positions only. Projected prompt rows pk/pv may be
/// null (vanilla path). key_valid masks real key positions; prompt positions
/// are always attendable. Output is the head-concatenated context, before
/// the output projection.
inline Tensor attention_heads(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor* pk,
                              const Tensor* pv, const std::vector<std::uint8_t>& key_valid,
                              std::size_t heads, std::size_t batch, std::size_t seq) {
    const std::size_t D = q.cols();
    if (heads == 0 || D % heads != 0)
        throw std::invalid_argument("attention_heads: head count " + std::to_string(heads) +
                                    " does not divide width " + std::to_string(D));
    if (q.rows() != batch * seq || k.rows() != batch * seq || v.rows() != batch * seq)
        throw std::invalid_argument("attention_heads: q/k/v must have batch*seq rows");
    if (key_valid.size() != batch * seq) throw std::invalid_argument("attention_heads: mask size mismatch");
    const bool with_prompts = pk != nullptr;
    if (with_prompts && (!pv || pk->rows() != pv->rows() || pk->cols() != D || pv->cols() != D))
        throw std::invalid_argument("attention_heads: prefix halves must share row count and width D");
    const std::size_t Lp = with_prompts ? pk->rows() : 0;
    const std::size_t dh = D / heads;
    const std::size_t keys = Lp + seq;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    std::vector<double> out(batch * seq * D);
    std::vector<double> weights(batch * heads * seq * keys);
    std::vector<double> scores(keys);

    const double* pq = q.data().data();
    const double* pkr = k.data().data();
    const double* pvr = v.data().data();
    const double* ppk = with_prompts ? pk->data().data() : nullptr;
    const double* ppv = with_prompts ? pv->data().data() : nullptr;

    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t hoff = h * dh;
            for (std::size_t s = 0; s < seq; ++s) {
                const double* qrow = pq + (b * seq + s) * D + hoff;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t l = 0; l < Lp; ++l) {
                    const double* krow = ppk + l * D + hoff;
                    double acc = 0.0;
                    for (std::size_t t = 0; t < dh; ++t) acc += qrow[t] * krow[t];
                    scores[l] = acc * inv_scale;
                    mx = std::max(mx, scores[l]);
                }
                for (std::size_t u = 0; u < seq; ++u) {
                    if (!key_valid[b * seq + u]) {
                        scores[Lp + u] = kMaskNegInf;
                        continue;
                    }
                    const double* krow = pkr + (b * seq + u) * D + hoff;
                    double acc = 0.0;
                    for (std::size_t t = 0; t < dh; ++t) acc += qrow[t] * krow[t];
                    scores[Lp + u] = acc * inv_scale;
                    mx = std::max(mx, scores[Lp + u]);
                }
                if (mx == -std::numeric_limits<double>::infinity())
                    throw std::runtime_error("attention_heads: no attendable key for sample " + std::to_string(b));
                double sum = 0.0;
                double* wrow = weights.data() + ((b * heads + h) * seq + s) * keys;
                for (std::size_t j = 0; j < keys; ++j) {
                    wrow[j] = std::exp(scores[j] - mx);
                    sum += wrow[j];
                }
                for (std::size_t j = 0; j < keys; ++j) wrow[j] /= sum;
                double* orow = out.data() + (b * seq + s) * D + hoff;
                for (std::size_t t = 0; t < dh; ++t) orow[t] = 0.0;
                for (std::size_t l = 0; l < Lp; ++l) {
                    const double w = wrow[l];
                    const double* vrow = ppv + l * D + hoff;
                    for (std::size_t t = 0; t < dh; ++t) orow[t] += w * vrow[t];
                }
                for (std::size_t u = 0; u < seq; ++u) {
                    const double w = wrow[Lp + u];
                    if (w == 0.0) continue;
                    const double* vrow = pvr + (b * seq + u) * D + hoff;
                    for (std::size_t t = 0; t < dh; ++t) orow[t] += w * vrow[t];
                }
            }
        }

    std::vector<Tensor> parents{q, k, v};
    if (with_prompts) {
        parents.push_back(*pk);
        parents.push_back(*pv);
    }
    auto bw = [heads, batch, seq, Lp, dh, D, inv_scale, key_valid, weights = std::move(weights)](
                  detail::TensorImpl& o) {
        auto& tq = *o.parents[0];
        auto& tk = *o.parents[1];
        auto& tv = *o.parents[2];
        detail::TensorImpl* tpk = o.parents.size() > 3 ? o.parents[3].get() : nullptr;
        detail::TensorImpl* tpv = o.parents.size() > 3 ? o.parents[4].get() : nullptr;
        const std::size_t keys = Lp + seq;

        double* gq = tq.requires_grad ? tq.grad_buf().data() : nullptr;
        double* gk = tk.requires_grad ? tk.grad_buf().data() : nullptr;
        double* gv = tv.requires_grad ? tv.grad_buf().data() : nullptr;
        double* gpk = (tpk && tpk->requires_grad) ? tpk->grad_buf().data() : nullptr;
        double* gpv = (tpv && tpv->requires_grad) ? tpv->grad_buf().data() : nullptr;

        const double* pq = tq.data.data();
        const double* pkr = tk.data.data();
        const double* pvr = tv.data.data();
        const double* ppk = tpk ? tpk->data.data() : nullptr;
        const double* ppv = tpv ? tpv->data.data() : nullptr;
        const double* go = o.grad.data();

        std::vector<double> dw(keys);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t hoff = h * dh;
                for (std::size_t s = 0; s < seq; ++s) {
                    const double* wrow = weights.data() + ((b * heads + h) * seq + s) * keys;
                    const double* grow = go + (b * seq + s) * D + hoff;
                    const double* qrow = pq + (b * seq + s) * D + hoff;
                    // dV and d(attention weights)
                    double wdot = 0.0;
                    for (std::size_t l = 0; l < Lp; ++l) {
                        const double* vrow = ppv + l * D + hoff;
                        double acc = 0.0;
                        for (std::size_t t = 0; t < dh; ++t) acc += grow[t] * vrow[t];
                        dw[l] = acc;
                        wdot += wrow[l] * acc;
                        if (gpv && wrow[l] != 0.0) {
                            double* gvrow = gpv + l * D + hoff;
                            for (std::size_t t = 0; t < dh; ++t) gvrow[t] += wrow[l] * grow[t];
                        }
                    }
                    for (std::size_t u = 0; u < seq; ++u) {
                        const double w = wrow[Lp + u];
                        const double* vrow = pvr + (b * seq + u) * D + hoff;
                        double acc = 0.0;
                        for (std::size_t t = 0; t < dh; ++t) acc += grow[t] * vrow[t];
                        dw[Lp + u] = acc;
                        wdot += w * acc;
                        if (gv && w != 0.0) {
                            double* gvrow = gv + (b * seq + u) * D + hoff;
                            for (std::size_t t = 0; t < dh; ++t) gvrow[t] += w * grow[t];
                        }
                    }
                    // through softmax into scores, then into q and keys
                    for (std::size_t l = 0; l < Lp; ++l) {
                        const double ds = wrow[l] * (dw[l] - wdot) * inv_scale;
                        if (ds == 0.0) continue;
                        const double* krow = ppk + l * D + hoff;
                        if (gq) {
                            double* gqrow = gq + (b * seq + s) * D + hoff;
                            for (std::size_t t = 0; t < dh; ++t) gqrow[t] += ds * krow[t];
                        }
                        if (gpk) {
                            double* gkrow = gpk + l * D + hoff;
                            for (std::size_t t = 0; t < dh; ++t) gkrow[t] += ds * qrow[t];
                        }
                    }
                    for (std::size_t u = 0; u < seq; ++u) {
                        const double ds = wrow[Lp + u] * (dw[Lp + u] - wdot) * inv_scale;
                        if (ds == 0.0) continue;
                        const double* krow = pkr + (b * seq + u) * D + hoff;
                        if (gq) {
                            double* gqrow = gq + (b * seq + s) * D + hoff;
                            for (std::size_t t = 0; t < dh; ++t) gqrow[t] += ds * krow[t];
                        }
                        if (gk) {
                            double* gkrow = gk + (b * seq + u) * D + hoff;
                            for (std::size_t t = 0; t < dh; ++t) gkrow[t] += ds * qrow[t];
                        }
                    }
                }
            }
    };
    return detail::make_op_output(Shape{batch * seq, D}, std::move(out), std::move(parents), std::move(bw));
}

/// Prefix halves ready for attention: local-then-shared concatenation,
/// projected by the tower's frozen K/V matrices (the prompts are glued to
/// the token stream before the projections, so they pass through them; no
/// positional encoding is added to prompt rows).
struct ProjectedPrefix {
    std::optional<Tensor> keys;
    std::optional<Tensor> values;
    bool present() const { return keys.has_value(); }
};

inline ProjectedPrefix project_prefix(const Tensor* local_k, const Tensor* local_v, const Tensor* shared_k,
                                      const Tensor* shared_v, const BlockWeights& w) {
    ProjectedPrefix p;
    if (!local_k && !shared_k) return p;
    Tensor kcat, vcat;
    if (local_k && shared_k) {
        kcat = concat(*local_k, *shared_k, 0);
        vcat = concat(*local_v, *shared_v, 0);
    } else if (local_k) {
        kcat = *local_k;
        vcat = *local_v;
    } else {
        kcat = *shared_k;
        vcat = *shared_v;
    }
    p.keys = matmul(kcat, w.wk);
    p.values = matmul(vcat, w.wv);
    return p;
}

/// One prefix-tuned multi-head attention layer (Eq. 3-5 composition):
/// projections, prefix concatenation, per-head attention, output projection.
inline Tensor prefix_mha(const Tensor& h, const Tensor* local_k, const Tensor* local_v,
                         const Tensor* shared_k, const Tensor* shared_v,
                         const std::vector<std::uint8_t>& key_valid, const BlockWeights& w,
                         std::size_t heads, std::size_t batch, std::size_t seq) {
    Tensor q = matmul(h, w.wq);
    Tensor k = matmul(h, w.wk);
    Tensor v = matmul(h, w.wv);
    ProjectedPrefix prefix = project_prefix(local_k, local_v, shared_k, shared_v, w);
    Tensor ctx = attention_heads(q, k, v, prefix.present() ? &*prefix.keys : nullptr,
                                 prefix.present() ? &*prefix.values : nullptr, key_valid, heads, batch, seq);
    return matmul(ctx, w.wo);
}

/// Prompt slices for one block of one tower; either pointer may be null.
struct BlockPrompts {
    std::optional<Tensor> local_k, local_v, shared_k, shared_v;
};

inline BlockPrompts block_prompts(const PromptSet* local, const PromptSet* shared, std::size_t block) {
    BlockPrompts bp;
    if (local) {
        auto [k, v] = split_prompt(*local, block);
        bp.local_k = std::move(k);
        bp.local_v = std::move(v);
    }
    if (shared) {
        auto [k, v] = split_prompt(*shared, block);
        bp.shared_k = std::move(k);
        bp.shared_v = std::move(v);
    }
    return bp;
}

/// Pre-norm residual attention block with prefix prompts:
/// x + MHA(LN(x)), then x + FFN(LN(x)).
inline Tensor pra_block(const Tensor& h, const BlockPrompts& prompts, const std::vector<std::uint8_t>& key_valid,
                        const BlockWeights& w, std::size_t heads, std::size_t batch, std::size_t seq) {
    Tensor normed = layer_norm(h, w.ln1_gamma, w.ln1_beta);
    Tensor attn = prefix_mha(normed, prompts.local_k ? &*prompts.local_k : nullptr,
                             prompts.local_v ? &*prompts.local_v : nullptr,
                             prompts.shared_k ? &*prompts.shared_k : nullptr,
                             prompts.shared_v ? &*prompts.shared_v : nullptr, key_valid, w, heads, batch, seq);
    Tensor mid = add(h, attn);
    Tensor normed2 = layer_norm(mid, w.ln2_gamma, w.ln2_beta);
    Tensor ffn = matmul(gelu(matmul(normed2, w.w1)), w.w2);
    return add(mid, ffn);
}

/// Mean over valid (non-pad) positions per sample: [B*S, D] -> [B, D].
inline Tensor masked_mean_rows(const Tensor& x, const std::vector<std::uint8_t>& valid, std::size_t batch,
                               std::size_t seq) {
    const std::size_t D = x.cols();
    if (x.rows() != batch * seq || valid.size() != batch * seq)
        throw std::invalid_argument("masked_mean_rows: layout mismatch");
    std::vector<double> out(batch * D, 0.0);
    std::vector<double> inv_counts(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        std::size_t n = 0;
        for (std::size_t s = 0; s < seq; ++s)
            if (valid[b * seq + s]) {
                ++n;
                const double* row = x.data().data() + (b * seq + s) * D;
                for (std::size_t d = 0; d < D; ++d) out[b * D + d] += row[d];
            }
        if (n == 0) throw std::runtime_error("masked_mean_rows: sample " + std::to_string(b) + " has no valid position");
        inv_counts[b] = 1.0 / static_cast<double>(n);
        for (std::size_t d = 0; d < D; ++d) out[b * D + d] *= inv_counts[b];
    }
    return detail::make_op_output(Shape{batch, D}, std::move(out), {x},
                                  [valid, batch, seq, D, inv_counts = std::move(inv_counts)](detail::TensorImpl& o) {
                                      auto& p = *o.parents[0];
                                      if (!p.requires_grad) return;
                                      auto& g = p.grad_buf();
                                      for (std::size_t b = 0; b < batch; ++b)
                                          for (std::size_t s = 0; s < seq; ++s) {
                                              if (!valid[b * seq + s]) continue;
                                              const double c = inv_counts[b];
                                              for (std::size_t d = 0; d < D; ++d)
                                                  g[(b * seq + s) * D + d] += o.grad[b * D + d] * c;
                                          }
                                  });
}

/// Full tower pass: embed, r pRA blocks (block i consumes prompt slice i),
/// masked mean pooling over real positions. Returns [B, D] features.
inline Tensor encode(const std::vector<int>& tokens, const std::vector<std::uint8_t>& valid, std::size_t batch,
                     std::size_t seq, Modality tower, const PromptSet* local, const PromptSet* shared,
                     const Backbone& backbone) {
    if (local && local->modality != tower) throw std::invalid_argument("encode: local prompt modality mismatch");
    if (shared && shared->modality != tower) throw std::invalid_argument("encode: shared prompt modality mismatch");
    for (const PromptSet* p : {local, shared})
        if (p && p->blocks() != backbone.block_count)
            throw std::invalid_argument("encode: prompt has " + std::to_string(p->blocks()) + " block slices, backbone has " +
                                        std::to_string(backbone.block_count));
    Tensor h = embed(tokens, batch, seq, tower, backbone);
    const TowerWeights& tw = backbone.tower(tower);
    for (std::size_t i = 0; i < backbone.block_count; ++i) {
        BlockPrompts bp = block_prompts(local, shared, i);
        h = pra_block(h, bp, valid, tw.blocks[i], backbone.heads, batch, seq);
    }
    return masked_mean_rows(h, valid, batch, seq);
}

/// Single-sequence convenience wrapper; returns the pooled feature [D].
inline Tensor encode(const std::vector<int>& tokens, Modality tower, const PromptSet* local,
                     const PromptSet* shared, const Backbone& backbone) {
    std::vector<std::uint8_t> valid(tokens.size(), 1);
    return encode(tokens, valid, 1, tokens.size(), tower, local, shared, backbone);
}

/// Answer head forward: concat features, affine, activation, dropout (train
/// only), affine. Returns raw logits; softmax lives inside the loss.
inline Tensor answer_forward(const Tensor& img_feat, const Tensor& txt_feat, const AnswerHead& head, bool train,
                             Rng& rng) {
    if (img_feat.cols() != txt_feat.cols() || img_feat.rows() != txt_feat.rows())
        throw std::invalid_argument("answer_forward: feature shape mismatch " +
                                    detail::shape_str(img_feat.shape()) + " vs " +
                                    detail::shape_str(txt_feat.shape()));
    Tensor fused = concat(img_feat.shape().size() == 1 ? reshape_copy(img_feat, {1, img_feat.numel()}) : img_feat,
                          txt_feat.shape().size() == 1 ? reshape_copy(txt_feat, {1, txt_feat.numel()}) : txt_feat, 1);
    Tensor h1 = gelu(add_rowvec(matmul(fused, head.w1), head.b1));
    Tensor h1d = dropout(h1, head.dropout_rate, rng, train);
    return add_rowvec(matmul(h1d, head.w2), head.b2);
}

// ---------------------------------------------------------------------------
// Parameter accounting
// ---------------------------------------------------------------------------

struct ParamAccounting {
    std::size_t backbone_params = 0;
    std::size_t prompt_params_per_client = 0;  // both towers, r*L*D each
    std::size_t head_params = 0;
    double payload_ratio = 0.0;  // prompts / (backbone + head + prompts)
};

inline ParamAccounting count_params(std::size_t backbone_params, std::size_t r, std::size_t L, std::size_t D,
                                    std::size_t head_params) {
    ParamAccounting a;
    a.backbone_params = backbone_params;
    a.prompt_params_per_client = 2 * r * L * D;
    a.head_params = head_params;
    const double total = static_cast<double>(a.backbone_params + a.head_params + a.prompt_params_per_client);
    a.payload_ratio = total > 0.0 ? static_cast<double>(a.prompt_params_per_client) / total : 0.0;
    return a;
}

inline ParamAccounting count_params(const Backbone& backbone, std::size_t L, const AnswerHead& head) {
    return count_params(backbone.param_count(), backbone.block_count, L, backbone.width, head.param_count());
}

/// CLIP-scale reference profile (frozen-backbone deployment the payload
/// claim is measured against): ~1.5e8 backbone parameters, r=12, L=4, D=512.
inline ParamAccounting clip_scale_accounting(std::size_t answers = 500) {
    const std::size_t D = 512, hidden = 512;
    const std::size_t head = 2 * D * hidden + hidden + hidden * answers + answers;
    return count_params(150'000'000, 12, 4, D, head);
}

}  // namespace pflsim::model
