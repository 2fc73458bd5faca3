#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pflsim/rng.hpp"

namespace pflsim::data {

/// One (image tokens, question tokens, answer label) triple. Image token
/// sequences are fixed-length; question sequences are ragged and padded at
/// batch assembly.
struct Sample {
    std::vector<int> image_tokens;
    std::vector<int> question_tokens;
    int answer = 0;

    bool operator==(const Sample&) const = default;
};

struct Dataset {
    std::vector<Sample> samples;
    std::size_t answer_count = 0;

    std::size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }
    bool operator==(const Dataset&) const = default;

    std::vector<double> label_marginal() const {
        std::vector<double> m(answer_count, 0.0);
        for (const auto& s : samples) m[static_cast<std::size_t>(s.answer)] += 1.0;
        for (auto& v : m) v /= static_cast<double>(samples.size());
        return m;
    }
};

inline double total_variation(const std::vector<double>& a, const std::vector<double>& b) {
    double tv = 0.0;
    for (std::size_t i = 0; i < std::max(a.size(), b.size()); ++i)
        tv += std::abs((i < a.size() ? a[i] : 0.0) - (i < b.size() ? b[i] : 0.0));
    return tv / 2.0;
}

/// Synthetic heterogeneous generator description. Each "image" is a tuple of
/// attr_count attribute values rendered as tokens through a client-specific
/// remap; the question names one attribute slot; the answer is that
/// attribute's value in the client's own label ordering. Clients share the
/// latent rule but differ in marginals (label skew) and token maps (feature
/// drift).
struct SynthSpec {
    std::size_t clients = 4;
    std::vector<std::size_t> client_sizes{734, 829, 461, 335};
    std::size_t attr_count = 6;       // slots per image (= image length)
    std::size_t values_per_attr = 4;
    std::size_t question_len = 3;     // max question tokens (>= 2)
    std::size_t img_vocab = 64;
    std::size_t txt_vocab = 32;
    double overlap = 0.5;             // fraction of latent tokens shared across clients
    double skew_alpha = 0.5;          // Dirichlet concentration for per-client marginals
    std::array<double, 3> split_ratios{0.7, 0.15, 0.15};
    std::uint64_t seed = 1;

    bool operator==(const SynthSpec&) const = default;

    std::size_t latent_image_tokens() const { return attr_count * values_per_attr; }
    std::size_t latent_text_tokens() const { return attr_count + 2; }  // QWORD, slots, FILLER
    std::size_t answer_symbols() const { return attr_count * values_per_attr; }

    void validate() const {
        if (clients < 1) throw std::invalid_argument("SynthSpec: clients must be >= 1");
        if (client_sizes.size() != clients)
            throw std::invalid_argument("SynthSpec: client_sizes has " + std::to_string(client_sizes.size()) +
                                        " entries for " + std::to_string(clients) + " clients");
        if (attr_count == 0 || values_per_attr < 2)
            throw std::invalid_argument("SynthSpec: need attr_count >= 1 and values_per_attr >= 2");
        if (question_len < 2) throw std::invalid_argument("SynthSpec: question_len must be >= 2");
        if (overlap < 0.0 || overlap > 1.0) throw std::invalid_argument("SynthSpec: overlap must be in [0,1]");
        const double s = split_ratios[0] + split_ratios[1] + split_ratios[2];
        if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("SynthSpec: split ratios must sum to 1");
        // remap feasibility: shared ids + per-client private ids must fit
        const auto need = [&](std::size_t latent, std::size_t reserved) {
            const std::size_t shared = shared_token_count(latent);
            return reserved + shared + clients * (latent - shared);
        };
        if (need(latent_image_tokens(), 0) > img_vocab)
            throw std::invalid_argument("SynthSpec: image vocab " + std::to_string(img_vocab) +
                                        " too small for remaps (need " +
                                        std::to_string(need(latent_image_tokens(), 0)) + ")");
        if (need(latent_text_tokens(), 1) > txt_vocab)  // id 0 reserved for pad
            throw std::invalid_argument("SynthSpec: text vocab " + std::to_string(txt_vocab) +
                                        " too small for remaps (need " +
                                        std::to_string(need(latent_text_tokens(), 1)) + ")");
    }

    std::size_t shared_token_count(std::size_t latent) const {
        return static_cast<std::size_t>(overlap * static_cast<double>(latent) + 0.5);
    }
};

/// Per-client rendering rule: injective latent-token -> vocab-id maps plus
/// the client's answer permutation. Latent text ids: 0 = question word,
/// 1..K = slot k-1, K+1 = filler.
struct ClientMaps {
    std::vector<int> img_map;     // latent (slot*V+value) -> image vocab id
    std::vector<int> txt_map;     // latent text token -> text vocab id
    std::vector<int> answer_map;  // answer symbol (slot*V+value) -> client label

    bool operator==(const ClientMaps&) const = default;
};

struct SynthResult {
    std::vector<Dataset> clients;
    std::vector<ClientMaps> maps;
    std::vector<std::vector<double>> slot_marginals;                // [T][K]
    std::vector<std::vector<std::vector<double>>> value_marginals;  // [T][K][V]
};

inline SynthResult gen_synthetic(const SynthSpec& spec) {
    spec.validate();
    const std::size_t T = spec.clients, K = spec.attr_count, V = spec.values_per_attr;

    Rng rule_rng = Rng::derive(spec.seed, 0xda7a);

    // Shared latent token choice and vocab id assignment (one latent rule per run).
    auto assign_maps = [&](std::size_t latent, std::size_t vocab, std::size_t reserved) {
        std::vector<std::size_t> latent_order(latent);
        for (std::size_t i = 0; i < latent; ++i) latent_order[i] = i;
        rule_rng.shuffle(latent_order);
        const std::size_t shared_n = spec.shared_token_count(latent);

        std::vector<int> pool;
        for (std::size_t id = reserved; id < vocab; ++id) pool.push_back(static_cast<int>(id));
        rule_rng.shuffle(pool);
        std::size_t next = 0;

        std::vector<std::vector<int>> maps(T, std::vector<int>(latent, -1));
        for (std::size_t i = 0; i < shared_n; ++i) {
            const int id = pool[next++];
            for (std::size_t t = 0; t < T; ++t) maps[t][latent_order[i]] = id;
        }
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t i = shared_n; i < latent; ++i) maps[t][latent_order[i]] = pool[next++];
        return maps;
    };
    auto img_maps = assign_maps(spec.latent_image_tokens(), spec.img_vocab, 0);
    auto txt_maps = assign_maps(spec.latent_text_tokens(), spec.txt_vocab, 1);

    SynthResult result;
    result.slot_marginals.resize(T);
    result.value_marginals.resize(T);
    for (std::size_t t = 0; t < T; ++t) {
        result.slot_marginals[t] = rule_rng.dirichlet(K, spec.skew_alpha);
        result.value_marginals[t].resize(K);
        for (std::size_t k = 0; k < K; ++k)
            result.value_marginals[t][k] = rule_rng.dirichlet(V, spec.skew_alpha);
    }

    result.maps.resize(T);
    for (std::size_t t = 0; t < T; ++t) {
        result.maps[t].img_map = img_maps[t];
        result.maps[t].txt_map = txt_maps[t];
        std::vector<int> perm(spec.answer_symbols());
        for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
        rule_rng.shuffle(perm);
        result.maps[t].answer_map = perm;
    }

    result.clients.resize(T);
    for (std::size_t t = 0; t < T; ++t) {
        Rng rng = Rng::derive(spec.seed, 0xc11e47 + t);
        Dataset& ds = result.clients[t];
        ds.answer_count = spec.answer_symbols();
        ds.samples.reserve(spec.client_sizes[t]);
        const ClientMaps& maps = result.maps[t];
        for (std::size_t j = 0; j < spec.client_sizes[t]; ++j) {
            Sample s;
            s.image_tokens.resize(K);
            std::vector<std::size_t> values(K);
            for (std::size_t k = 0; k < K; ++k) {
                values[k] = rng.categorical(result.value_marginals[t][k]);
                s.image_tokens[k] = maps.img_map[k * V + values[k]];
            }
            const std::size_t slot = rng.categorical(result.slot_marginals[t]);
            s.question_tokens.push_back(maps.txt_map[0]);         // question word
            s.question_tokens.push_back(maps.txt_map[1 + slot]);  // slot name
            if (spec.question_len >= 3 && rng.uniform() < 0.5)
                s.question_tokens.push_back(maps.txt_map[K + 1]);  // filler
            s.answer = maps.answer_map[slot * V + values[slot]];
            ds.samples.push_back(std::move(s));
        }
    }
    return result;
}

/// Recomputes the ground-truth label from the rendered tokens; the generator
/// must agree with this on every sample.
inline int answer_oracle(const Sample& sample, const ClientMaps& maps, const SynthSpec& spec) {
    const std::size_t K = spec.attr_count, V = spec.values_per_attr;
    auto invert = [](const std::vector<int>& map, int id) -> int {
        for (std::size_t latent = 0; latent < map.size(); ++latent)
            if (map[latent] == id) return static_cast<int>(latent);
        return -1;
    };
    int slot = -1;
    for (int tok : sample.question_tokens) {
        const int latent = invert(maps.txt_map, tok);
        if (latent >= 1 && latent <= static_cast<int>(K)) {
            if (slot >= 0) throw std::runtime_error("answer_oracle: question names two slots");
            slot = latent - 1;
        }
    }
    if (slot < 0) throw std::runtime_error("answer_oracle: question names no slot");
    if (static_cast<std::size_t>(slot) >= sample.image_tokens.size())
        throw std::runtime_error("answer_oracle: image shorter than queried slot");
    const int symbol = invert(maps.img_map, sample.image_tokens[static_cast<std::size_t>(slot)]);
    if (symbol < 0) throw std::runtime_error("answer_oracle: unknown image token");
    const std::size_t value = static_cast<std::size_t>(symbol) % V;
    return maps.answer_map[static_cast<std::size_t>(slot) * V + value];
}

// ---------------------------------------------------------------------------
// JSONL persistence
// ---------------------------------------------------------------------------

inline void write_jsonl(const std::string& path, const Dataset& ds) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_jsonl: cannot open " + path);
    for (const auto& s : ds.samples) {
        nlohmann::json j{{"image_tokens", s.image_tokens}, {"question_tokens", s.question_tokens}, {"answer", s.answer}};
        out << j.dump() << "\n";
    }
}

inline Dataset load_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_jsonl: cannot open " + path);
    Dataset ds;
    std::string line;
    std::size_t line_no = 0;
    std::size_t image_len = 0;
    int max_answer = -1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw std::runtime_error("load_jsonl: " + path + ": parse error at line " + std::to_string(line_no) +
                                     ": " + e.what());
        }
        Sample s;
        try {
            s.image_tokens = j.at("image_tokens").get<std::vector<int>>();
            s.question_tokens = j.at("question_tokens").get<std::vector<int>>();
            s.answer = j.at("answer").get<int>();
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("load_jsonl: " + path + ": bad record at line " + std::to_string(line_no) +
                                     ": " + e.what());
        }
        for (int id : s.image_tokens)
            if (id < 0)
                throw std::runtime_error("load_jsonl: " + path + ": negative image token at line " +
                                         std::to_string(line_no));
        for (int id : s.question_tokens)
            if (id < 0)
                throw std::runtime_error("load_jsonl: " + path + ": negative question token at line " +
                                         std::to_string(line_no));
        if (s.answer < 0)
            throw std::runtime_error("load_jsonl: " + path + ": negative answer at line " + std::to_string(line_no));
        if (s.question_tokens.empty())
            throw std::runtime_error("load_jsonl: " + path + ": empty question at line " + std::to_string(line_no));
        if (image_len == 0)
            image_len = s.image_tokens.size();
        else if (s.image_tokens.size() != image_len)
            throw std::runtime_error("load_jsonl: " + path + ": image length " +
                                     std::to_string(s.image_tokens.size()) + " at line " + std::to_string(line_no) +
                                     " differs from " + std::to_string(image_len));
        max_answer = std::max(max_answer, s.answer);
        ds.samples.push_back(std::move(s));
    }
    if (ds.samples.empty()) throw std::runtime_error("load_jsonl: " + path + ": empty dataset");
    ds.answer_count = static_cast<std::size_t>(max_answer + 1);
    return ds;
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

struct Splits {
    Dataset train, val, test;
};

/// Seeded shuffle then contiguous cut. Counts are floor(ratio*n) for train
/// and val; test takes the remainder. Train and test must be nonempty; an
/// empty val split is allowed (callers fall back to the train split for
/// validation accuracy).
inline Splits split(const Dataset& ds, const std::array<double, 3>& ratios, std::uint64_t seed) {
    const double s = ratios[0] + ratios[1] + ratios[2];
    if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("split: ratios must sum to 1");
    const std::size_t n = ds.size();
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng = Rng::derive(seed, 0x5b117);
    rng.shuffle(idx);

    const std::size_t n_train = static_cast<std::size_t>(ratios[0] * static_cast<double>(n));
    const std::size_t n_val = static_cast<std::size_t>(ratios[1] * static_cast<double>(n));
    if (n_train == 0 || n_train + n_val >= n)
        throw std::invalid_argument("split: ratios " + std::to_string(ratios[0]) + "/" + std::to_string(ratios[1]) +
                                    "/" + std::to_string(ratios[2]) + " leave an empty required split for n=" +
                                    std::to_string(n));
    Splits out;
    out.train.answer_count = out.val.answer_count = out.test.answer_count = ds.answer_count;
    for (std::size_t i = 0; i < n; ++i) {
        const Sample& sample = ds.samples[idx[i]];
        if (i < n_train)
            out.train.samples.push_back(sample);
        else if (i < n_train + n_val)
            out.val.samples.push_back(sample);
        else
            out.test.samples.push_back(sample);
    }
    return out;
}

}  // namespace pflsim::data
