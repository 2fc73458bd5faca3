#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "pflsim/model.hpp"
#include "pflsim/tensor.hpp"

namespace pflsim::losses {

struct LossWeights {
    double alpha = 0.5;   // distance-loss weight
    double beta = 0.001;  // head regularization weight

    void validate() const {
        if (!(alpha >= 0.0) || !std::isfinite(alpha) || !(beta >= 0.0) || !std::isfinite(beta))
            throw std::invalid_argument("LossWeights: alpha/beta must be finite and non-negative");
    }
};

/// Mean cross-entropy over a batch of logits rows, log-sum-exp stabilized.
/// Backward is (softmax - one_hot) / batch.
inline Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& labels) {
    const std::size_t B = logits.rows(), A = logits.cols();
    if (labels.size() != B)
        throw std::invalid_argument("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                                    std::to_string(B) + " rows");
    const double* pl = logits.data().data();
    double total = 0.0;
    std::vector<double> softmax(B * A);
    for (std::size_t i = 0; i < B; ++i) {
        const int label = labels[i];
        if (label < 0 || static_cast<std::size_t>(label) >= A)
            throw std::invalid_argument("cross_entropy: label " + std::to_string(label) + " out of range [0," +
                                        std::to_string(A) + ")");
        const double* row = pl + i * A;
        double mx = row[0];
        for (std::size_t j = 1; j < A; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < A; ++j) {
            softmax[i * A + j] = std::exp(row[j] - mx);
            sum += softmax[i * A + j];
        }
        for (std::size_t j = 0; j < A; ++j) softmax[i * A + j] /= sum;
        total += std::log(sum) + mx - row[static_cast<std::size_t>(label)];
    }
    total /= static_cast<double>(B);
    return detail::make_op_output(
        Shape{1}, {total}, {logits}, [B, A, labels, softmax = std::move(softmax)](detail::TensorImpl& o) {
            auto& p = *o.parents[0];
            if (!p.requires_grad) return;
            auto& g = p.grad_buf();
            const double go = o.grad[0] / static_cast<double>(B);
            for (std::size_t i = 0; i < B; ++i)
                for (std::size_t j = 0; j < A; ++j) {
                    const double onehot = (static_cast<std::size_t>(labels[i]) == j) ? 1.0 : 0.0;
                    g[i * A + j] += go * (softmax[i * A + j] - onehot);
                }
        });
}

/// Single-sample cross-entropy, -log softmax(logits)[label].
inline Tensor cross_entropy(const Tensor& logits, int label) {
    Tensor rows = logits.shape().size() == 1 ? reshape_copy(logits, {1, logits.numel()}) : logits;
    return cross_entropy_mean(rows, {label});
}

/// 1 - cos(flatten(local), flatten(shared)). The shared prompt is a constant
/// snapshot: no gradient flows into it. An all-zero shared prompt is the
/// pre-communication state and contributes exactly 0 with no gradient.
inline Tensor distance_loss(const model::PromptSet& local, const model::PromptSet& shared) {
    if (local.values.shape() != shared.values.shape())
        throw std::invalid_argument("distance_loss: shape mismatch " + detail::shape_str(local.values.shape()) +
                                    " vs " + detail::shape_str(shared.values.shape()));
    if (local.modality != shared.modality) throw std::invalid_argument("distance_loss: modality mismatch");
    bool all_zero = true;
    for (double v : shared.values.data())
        if (v != 0.0) {
            all_zero = false;
            break;
        }
    if (all_zero) return Tensor::scalar(0.0);
    Tensor cs = cosine_similarity(local.values, shared.values.requires_grad()
                                                    ? shared.values.detached_copy()
                                                    : shared.values);
    return add(Tensor::scalar(1.0), scale(cs, -1.0));
}

/// Squared L2 norm of the head's weight matrices (biases excluded).
inline Tensor regularizer(const model::AnswerHead& head) {
    return add(l2_norm_squared(head.w1), l2_norm_squared(head.w2));
}

// ---------------------------------------------------------------------------
// Full client loss (CE + alpha * L_d + beta * R)
// ---------------------------------------------------------------------------

/// Token buffers for one mini-batch, already padded to fixed lengths.
struct ClientBatch {
    std::vector<int> img_tokens;          // batch * img_seq ids
    std::vector<std::uint8_t> img_valid;  // all 1 for fixed-length images
    std::vector<int> txt_tokens;          // batch * txt_seq ids, pad id at invalid slots
    std::vector<std::uint8_t> txt_valid;
    std::vector<int> labels;
    std::size_t batch = 0;
    std::size_t img_seq = 0;
    std::size_t txt_seq = 0;
};

/// Which prompts enter the forward pass; null pointers drop a prefix
/// entirely (the vanilla path).
struct PromptPack {
    const model::PromptSet* local_img = nullptr;
    const model::PromptSet* local_txt = nullptr;
    const model::PromptSet* shared_img = nullptr;
    const model::PromptSet* shared_txt = nullptr;
};

inline Tensor forward_logits(const ClientBatch& batch, const PromptPack& prompts, const model::AnswerHead& head,
                             const model::Backbone& backbone, bool train, Rng& rng) {
    Tensor img_feat = model::encode(batch.img_tokens, batch.img_valid, batch.batch, batch.img_seq,
                                    model::Modality::image, prompts.local_img, prompts.shared_img, backbone);
    Tensor txt_feat = model::encode(batch.txt_tokens, batch.txt_valid, batch.batch, batch.txt_seq,
                                    model::Modality::text, prompts.local_txt, prompts.shared_txt, backbone);
    return model::answer_forward(img_feat, txt_feat, head, train, rng);
}

struct LossParts {
    Tensor total;
    double ce = 0.0;
    double ld = 0.0;  // averaged over the two modalities
    double reg = 0.0;
};

inline LossParts client_loss(const ClientBatch& batch, const PromptPack& prompts, const model::AnswerHead& head,
                             const model::Backbone& backbone, const LossWeights& weights, bool train, Rng& rng) {
    weights.validate();
    Tensor logits = forward_logits(batch, prompts, head, backbone, train, rng);
    Tensor ce = cross_entropy_mean(logits, batch.labels);

    Tensor ld = Tensor::scalar(0.0);
    int ld_terms = 0;
    if (prompts.local_img && prompts.shared_img) {
        ld = add(ld, distance_loss(*prompts.local_img, *prompts.shared_img));
        ++ld_terms;
    }
    if (prompts.local_txt && prompts.shared_txt) {
        ld = add(ld, distance_loss(*prompts.local_txt, *prompts.shared_txt));
        ++ld_terms;
    }
    if (ld_terms > 1) ld = scale(ld, 1.0 / static_cast<double>(ld_terms));

    Tensor reg = regularizer(head);

    Tensor total = ce;
    if (weights.alpha != 0.0) total = add(total, scale(ld, weights.alpha));
    if (weights.beta != 0.0) total = add(total, scale(reg, weights.beta));

    LossParts parts;
    parts.total = total;
    parts.ce = ce.item();
    parts.ld = ld.item();
    parts.reg = reg.item();
    return parts;
}

}  // namespace pflsim::losses
