#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "pflsim/grad_check.hpp"
#include "pflsim/losses.hpp"

using namespace pflsim;
using namespace pflsim::model;
using namespace pflsim::losses;

namespace {

// Tiny end-to-end client fixture: r=2 blocks, D=8, L=4, 2 heads.
struct TinyClient {
    Backbone backbone = Backbone::init(2, 8, 2, 16, 12, 10, 17);
    PromptSet local_img, local_txt, shared_img, shared_txt;
    AnswerHead head;
    ClientBatch batch;

    explicit TinyClient(std::uint64_t seed = 5, bool shared_nonzero = false, std::size_t hidden = 16) {
        Rng rng(seed);
        local_img = PromptSet::make(2, 4, 8, Modality::image, PromptKind::local, &rng);
        local_txt = PromptSet::make(2, 4, 8, Modality::text, PromptKind::local, &rng);
        shared_img = PromptSet::make(2, 4, 8, Modality::image, PromptKind::shared,
                                     shared_nonzero ? &rng : nullptr);
        shared_txt = PromptSet::make(2, 4, 8, Modality::text, PromptKind::shared,
                                     shared_nonzero ? &rng : nullptr);
        head = AnswerHead::init(8, 4, rng, hidden, 0.2);
        batch.batch = 2;
        batch.img_seq = 6;
        batch.txt_seq = 3;
        batch.img_tokens = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12};
        batch.img_valid.assign(12, 1);
        batch.txt_tokens = {1, 2, 0, 3, 4, 5};
        batch.txt_valid = {1, 1, 0, 1, 1, 1};
        batch.labels = {0, 2};
    }

    PromptPack pack() const { return {&local_img, &local_txt, &shared_img, &shared_txt}; }
};

}  // namespace

TEST_CASE("cross_entropy") {
    SECTION("dominant true class gives near-zero loss") {
        Tensor logits = Tensor::from_data({3}, {100.0, 0.0, 0.0});
        REQUIRE(cross_entropy(logits, 0).item() < 1e-12);
    }
    SECTION("uniform logits over 4 classes give ln 4") {
        Tensor logits = Tensor::zeros({4});
        REQUIRE(cross_entropy(logits, 2).item() == Catch::Approx(std::log(4.0)).margin(1e-12));
    }
    SECTION("gradient is softmax minus one-hot") {
        Rng rng(3);
        Tensor logits = Tensor::randn({1, 5}, rng, 0.0, 2.0, true);
        Tensor loss = cross_entropy_mean(logits, {3});
        backward(loss);
        Tensor sm = softmax_lastdim(logits.detached_copy());
        for (std::size_t j = 0; j < 5; ++j) {
            const double expect = sm.data()[j] - (j == 3 ? 1.0 : 0.0);
            REQUIRE(logits.grad()[j] == Catch::Approx(expect).margin(1e-12));
        }
        logits.zero_grad();
        auto report = grad_check([&] { return cross_entropy_mean(logits, {3}); }, {{"logits", logits}});
        REQUIRE(report.max_rel_err < 1e-6);
    }
    SECTION("label out of range") {
        Tensor logits = Tensor::zeros({4});
        REQUIRE_THROWS(cross_entropy(logits, 4));
        REQUIRE_THROWS(cross_entropy(logits, -1));
    }
}

TEST_CASE("distance_loss") {
    auto make_prompt = [](std::vector<double> v, PromptKind kind) {
        PromptSet p;
        p.values = Tensor::from_data({1, 2, 2}, std::move(v), kind == PromptKind::local);
        p.modality = Modality::image;
        p.kind = kind;
        return p;
    };
    SECTION("equal nonzero prompts give 0") {
        auto local = make_prompt({1, 2, 3, 4}, PromptKind::local);
        auto shared = make_prompt({1, 2, 3, 4}, PromptKind::shared);
        REQUIRE(distance_loss(local, shared).item() == Catch::Approx(0.0).margin(1e-12));
    }
    SECTION("orthogonal flattened prompts give 1") {
        auto local = make_prompt({1, 0, 0, 0}, PromptKind::local);
        auto shared = make_prompt({0, 1, 0, 0}, PromptKind::shared);
        REQUIRE(distance_loss(local, shared).item() == Catch::Approx(1.0).margin(1e-12));
    }
    SECTION("opposite prompts give 2") {
        auto local = make_prompt({1, -2, 3, -4}, PromptKind::local);
        auto shared = make_prompt({-1, 2, -3, 4}, PromptKind::shared);
        REQUIRE(distance_loss(local, shared).item() == Catch::Approx(2.0).margin(1e-12));
    }
    SECTION("all-zero shared prompt contributes 0 with no gradient") {
        auto local = make_prompt({1, 2, 3, 4}, PromptKind::local);
        auto shared = make_prompt({0, 0, 0, 0}, PromptKind::shared);
        Tensor ld = distance_loss(local, shared);
        REQUIRE(ld.item() == 0.0);
        REQUIRE_FALSE(ld.requires_grad());
    }
    SECTION("scale invariance in the local argument") {
        Rng rng(11);
        for (int trial = 0; trial < 10; ++trial) {
            std::vector<double> v1(4), v2(4);
            for (auto& x : v1) x = rng.normal();
            for (auto& x : v2) x = rng.normal();
            auto local = make_prompt(v1, PromptKind::local);
            auto shared = make_prompt(v2, PromptKind::shared);
            const double base = distance_loss(local, shared).item();
            const double c = 0.1 + 5.0 * rng.uniform();
            for (auto& x : v1) x *= c;
            auto scaled = make_prompt(v1, PromptKind::local);
            REQUIRE(distance_loss(scaled, shared).item() == Catch::Approx(base).margin(1e-9));
        }
    }
    SECTION("no gradient flows into the shared prompt") {
        auto local = make_prompt({1, 2, 3, 4}, PromptKind::local);
        auto shared = make_prompt({4, 3, 2, 1}, PromptKind::shared);
        Tensor ld = distance_loss(local, shared);
        backward(ld);
        REQUIRE(local.values.has_grad());
        REQUIRE_FALSE(shared.values.has_grad());
    }
    SECTION("shape mismatch is a dimension error") {
        auto local = make_prompt({1, 2, 3, 4}, PromptKind::local);
        PromptSet shared;
        shared.values = Tensor::zeros({1, 2, 3});
        shared.modality = Modality::image;
        shared.kind = PromptKind::shared;
        REQUIRE_THROWS(distance_loss(local, shared));
    }
}

TEST_CASE("regularizer") {
    Rng rng(7);
    SECTION("zero weights give 0") {
        AnswerHead h;
        h.w1 = Tensor::zeros({4, 3});
        h.b1 = Tensor::full({3}, 9.0);
        h.w2 = Tensor::zeros({3, 2});
        h.b2 = Tensor::full({2}, 9.0);
        REQUIRE(regularizer(h).item() == 0.0);  // biases excluded
    }
    SECTION("single weight 3 gives 9") {
        AnswerHead h;
        h.w1 = Tensor::from_data({1, 1}, {3.0});
        h.b1 = Tensor::zeros({1});
        h.w2 = Tensor::zeros({1, 1});
        h.b2 = Tensor::zeros({1});
        REQUIRE(regularizer(h).item() == 9.0);
    }
    SECTION("gradient is 2w") {
        AnswerHead h = AnswerHead::init(4, 3, rng, 8);
        Tensor r = regularizer(h);
        backward(r);
        for (std::size_t i = 0; i < h.w1.numel(); ++i)
            REQUIRE(h.w1.grad()[i] == Catch::Approx(2.0 * h.w1.data()[i]).margin(1e-12));
        REQUIRE_FALSE(h.b1.has_grad());
    }
}

TEST_CASE("client_loss") {
    SECTION("alpha=0, beta=0 reduces to mean CE") {
        TinyClient c;
        Rng rng(1);
        LossWeights w{0.0, 0.0};
        auto parts = client_loss(c.batch, c.pack(), c.head, c.backbone, w, false, rng);
        REQUIRE(parts.total.item() == Catch::Approx(parts.ce).margin(1e-15));
    }
    SECTION("zero shared prompts leave CE + beta*R exactly") {
        TinyClient c;  // shared prompts zero-initialized
        Rng rng(1);
        LossWeights w{0.5, 0.001};
        auto parts = client_loss(c.batch, c.pack(), c.head, c.backbone, w, false, rng);
        REQUIRE(parts.ld == 0.0);
        REQUIRE(parts.total.item() == Catch::Approx(parts.ce + 0.001 * parts.reg).margin(1e-15));
    }
    SECTION("loss is non-negative") {
        for (std::uint64_t seed = 1; seed <= 5; ++seed) {
            TinyClient c(seed, /*shared_nonzero=*/seed % 2 == 0);
            Rng rng(seed);
            LossWeights w{0.5, 0.001};
            auto parts = client_loss(c.batch, c.pack(), c.head, c.backbone, w, true, rng);
            REQUIRE(parts.total.item() >= 0.0);
            REQUIRE(parts.ce >= 0.0);
            REQUIRE(parts.ld >= 0.0);
            REQUIRE(parts.ld <= 2.0);
            REQUIRE(parts.reg >= 0.0);
        }
    }
    SECTION("full-loss gradient check on the tiny model") {
        TinyClient c(9, /*shared_nonzero=*/true);
        LossWeights w{0.5, 0.001};
        auto f = [&] {
            Rng fixed(1234);  // one dropout mask for every probe
            return client_loss(c.batch, c.pack(), c.head, c.backbone, w, true, fixed).total;
        };
        auto report = grad_check(f, {{"local_img", c.local_img.values},
                                     {"local_txt", c.local_txt.values},
                                     {"head_w1", c.head.w1},
                                     {"head_b1", c.head.b1},
                                     {"head_w2", c.head.w2},
                                     {"head_b2", c.head.b2}});
        REQUIRE(report.max_rel_err < 1e-4);
    }
    SECTION("no gradient reaches backbone or shared prompts") {
        TinyClient c(3, /*shared_nonzero=*/true);
        Rng rng(2);
        LossWeights w{0.5, 0.001};
        auto parts = client_loss(c.batch, c.pack(), c.head, c.backbone, w, true, rng);
        backward(parts.total);
        REQUIRE(c.local_img.values.has_grad());
        REQUIRE(c.local_txt.values.has_grad());
        REQUIRE_FALSE(c.shared_img.values.has_grad());
        REQUIRE_FALSE(c.shared_txt.values.has_grad());
        for (const auto& blk : c.backbone.img_tower.blocks) {
            REQUIRE_FALSE(blk.wq.has_grad());
            REQUIRE_FALSE(blk.w1.has_grad());
            REQUIRE_FALSE(blk.ln1_gamma.has_grad());
        }
        REQUIRE_FALSE(c.backbone.img_embed.has_grad());
    }
}

TEST_CASE("loss weights validation") {
    REQUIRE_THROWS(LossWeights{-0.1, 0.0}.validate());
    REQUIRE_THROWS(LossWeights{0.0, -1.0}.validate());
    REQUIRE_NOTHROW(LossWeights{0.0, 0.0}.validate());
}
