#include "mace/toy_model.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <cstdio>

#include "mace/linalg.hpp"

namespace mace {

namespace {

std::size_t head_in_dim(std::size_t d_attn) { return d_attn + kNumPatches; }

DenseMatrix patchify(const DenseMatrix& latent) {
    DenseMatrix p(kNumPatches, kPatchPixels);
    for (std::size_t pr = 0; pr < kPatchGrid; ++pr)
        for (std::size_t pc = 0; pc < kPatchGrid; ++pc) {
            const std::size_t idx = pr * kPatchGrid + pc;
            p.at(idx, 0) = latent.at(2 * pr, 2 * pc);
            p.at(idx, 1) = latent.at(2 * pr, 2 * pc + 1);
            p.at(idx, 2) = latent.at(2 * pr + 1, 2 * pc);
            p.at(idx, 3) = latent.at(2 * pr + 1, 2 * pc + 1);
        }
    return p;
}

DenseMatrix unpatchify(const DenseMatrix& patches) {
    DenseMatrix z(kLatentSize, kLatentSize);
    for (std::size_t pr = 0; pr < kPatchGrid; ++pr)
        for (std::size_t pc = 0; pc < kPatchGrid; ++pc) {
            const std::size_t idx = pr * kPatchGrid + pc;
            z.at(2 * pr, 2 * pc) = patches.at(idx, 0);
            z.at(2 * pr, 2 * pc + 1) = patches.at(idx, 1);
            z.at(2 * pr + 1, 2 * pc) = patches.at(idx, 2);
            z.at(2 * pr + 1, 2 * pc + 1) = patches.at(idx, 3);
        }
    return z;
}

// [attention output | position one-hot] rows feeding the linear head.
DenseMatrix head_input(const DenseMatrix& o) {
    DenseMatrix h(kNumPatches, o.cols + kNumPatches);
    for (std::size_t p = 0; p < kNumPatches; ++p) {
        for (std::size_t j = 0; j < o.cols; ++j) h.at(p, j) = o.at(p, j);
        h.at(p, o.cols + p) = 1.0;
    }
    return h;
}

// Smooth bump confined to one 4x2 pixel block. Blocks are disjoint across
// concept indices, so concept patterns are mutually orthogonal and masks
// stay localized.
DenseMatrix block_bump(std::size_t block) {
    const std::size_t r0 = (block / 4) * 4;
    const std::size_t c0 = (block % 4) * 2;
    DenseMatrix m(kLatentSize, kLatentSize);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            const double wr = std::sin(M_PI * (i + 0.5) / 4.0);
            const double wc = std::sin(M_PI * (j + 0.5) / 2.0);
            m.at(r0 + i, c0 + j) = wr * wc;
        }
    const double mx = max_abs(m);
    for (auto& x : m.data) x /= mx;
    return m;
}

DenseMatrix ramp_pattern(bool horizontal) {
    DenseMatrix m(kLatentSize, kLatentSize);
    for (std::size_t i = 0; i < kLatentSize; ++i)
        for (std::size_t j = 0; j < kLatentSize; ++j) {
            const double u = static_cast<double>(horizontal ? j : i) / (kLatentSize - 1);
            m.at(i, j) = u;
        }
    return m;
}

double sched_ab(const NoiseSchedule& s, int t) {
    if (t < 0 || t > s.T) throw TimestepOutOfRange("timestep outside schedule");
    return s.alpha_bar[static_cast<std::size_t>(t)];
}

DenseMatrix random_latent(SeededRng& rng) {
    DenseMatrix z(kLatentSize, kLatentSize);
    for (auto& x : z.data) x = rng.normal();
    return z;
}

} // namespace

std::size_t TinyVocab::id(const std::string& token) const {
    for (std::size_t i = 0; i < tokens.size(); ++i)
        if (tokens[i] == token) return i;
    throw UnknownToken("unknown token: " + token);
}

bool TinyVocab::contains(const std::string& token) const {
    return std::find(tokens.begin(), tokens.end(), token) != tokens.end();
}

const ConceptSpec& ToyModelState::concept_by_name(const std::string& name) const {
    for (const auto& c : concepts)
        if (c.name == name) return c;
    for (const auto& c : backgrounds)
        if (c.name == name) return c;
    throw UnknownToken("no concept named: " + name);
}

NoiseSchedule NoiseSchedule::linear(int T) {
    NoiseSchedule s;
    s.T = T;
    s.alpha_bar.resize(static_cast<std::size_t>(T) + 1);
    for (int t = 0; t <= T; ++t)
        s.alpha_bar[static_cast<std::size_t>(t)] =
            1.0 - 0.98 * static_cast<double>(t) / static_cast<double>(T);
    return s;
}

ToyModelState make_toy_model(const ToyModelSpec& spec) {
    if (spec.concept_names.size() != spec.synonyms.size() ||
        spec.concept_names.size() != spec.super_categories.size())
        throw ConfigError("make_toy_model: concepts, synonyms and supers must align");

    ToyModelState st;
    st.d2 = spec.d2;
    st.d_attn = spec.d_attn;
    st.d_img = kPatchPixels + kNumPatches;
    st.seed = spec.seed;
    st.schedule = NoiseSchedule::linear(spec.T);

    // Vocabulary: control tokens, fillers, backgrounds, concepts, synonyms.
    st.vocab.tokens = {"<bos>", "<eos>", "a", "photo", "of"};
    st.vocab.bos_id = 0;
    st.vocab.eos_id = 1;
    for (const auto& b : spec.background_names) st.vocab.tokens.push_back(b);
    for (const auto& c : spec.concept_names) st.vocab.tokens.push_back(c);
    for (const auto& s : spec.synonyms) st.vocab.tokens.push_back(s);
    if (st.vocab.tokens.size() > 64) throw ConfigError("vocabulary larger than 64 tokens");
    for (const auto& sc : spec.super_categories)
        if (!st.vocab.contains(sc))
            throw ConfigError("super-category not in vocabulary: " + sc);

    SeededRng rng(spec.seed);
    SeededRng r_embed = rng.derive(0x10);
    SeededRng r_mix = rng.derive(0x11);
    SeededRng r_attn = rng.derive(0x12);

    st.encoder.embed = DenseMatrix::random_normal(st.vocab.tokens.size(), st.d2, r_embed, 0.5);
    const double mix_scale = 1.0 / std::sqrt(static_cast<double>(st.d2));
    st.encoder.mix_wq = DenseMatrix::random_normal(st.d2, st.d2, r_mix, mix_scale);
    st.encoder.mix_wk = DenseMatrix::random_normal(st.d2, st.d2, r_mix, mix_scale);
    st.encoder.mix_wv = DenseMatrix::random_normal(st.d2, st.d2, r_mix, mix_scale);

    // Synonym embeddings tied to the concept embedding plus small noise.
    for (std::size_t i = 0; i < spec.concept_names.size(); ++i) {
        const std::size_t cid = st.vocab.id(spec.concept_names[i]);
        const std::size_t sid = st.vocab.id(spec.synonyms[i]);
        for (std::size_t j = 0; j < st.d2; ++j)
            st.encoder.embed.at(sid, j) =
                st.encoder.embed.at(cid, j) + 0.05 * r_embed.normal();
    }

    // Query weights: position rows carry most of the signal, pixel rows a
    // small amount so samples stay seed-dependent.
    st.denoiser.attn.wq = DenseMatrix(st.d_img, st.d_attn);
    for (std::size_t i = 0; i < st.d_img; ++i) {
        const double s = i < kPatchPixels ? 0.8 : 1.2;
        for (std::size_t j = 0; j < st.d_attn; ++j)
            st.denoiser.attn.wq.at(i, j) = s * r_attn.normal();
    }
    st.denoiser.attn.wk = DenseMatrix::random_normal(st.d2, st.d_attn, r_attn, 0.3);
    st.denoiser.attn.wv = DenseMatrix::random_normal(st.d2, st.d_attn, r_attn, 0.3);
    st.denoiser.head =
        DenseMatrix::random_normal(head_in_dim(st.d_attn), kPatchPixels, r_attn, 0.1);

    // Background patterns: smooth ramps, alternating orientation.
    for (std::size_t i = 0; i < spec.background_names.size(); ++i) {
        ConceptSpec bg;
        bg.name = spec.background_names[i];
        bg.super_category = spec.background_names[i];
        bg.pattern = ramp_pattern(i % 2 == 0);
        bg.mask_threshold = spec.mask_threshold;
        st.backgrounds.push_back(std::move(bg));
    }

    // Concept patterns: one disjoint block per concept.
    for (std::size_t i = 0; i < spec.concept_names.size(); ++i) {
        ConceptSpec c;
        c.name = spec.concept_names[i];
        c.synonyms = {spec.synonyms[i]};
        c.super_category = spec.super_categories[i];
        c.pattern = block_bump(i % 8);
        c.mask_threshold = spec.mask_threshold;
        st.concepts.push_back(std::move(c));
    }
    return st;
}

DenseMatrix encode_prompt(const TinyVocab& vocab, const TextEncoder& encoder,
                          const std::vector<std::string>& prompt) {
    std::vector<std::size_t> ids;
    ids.reserve(prompt.size() + 1);
    for (const auto& t : prompt) ids.push_back(vocab.id(t));
    ids.push_back(vocab.eos_id);

    const std::size_t y = ids.size();
    const std::size_t d2 = encoder.embed.cols;
    DenseMatrix e(y, d2);
    for (std::size_t i = 0; i < y; ++i)
        for (std::size_t j = 0; j < d2; ++j) e.at(i, j) = encoder.embed.at(ids[i], j);

    // One round of self-attention mixing with a residual connection; every
    // output row depends on the whole token sequence.
    const DenseMatrix q = matmul(e, encoder.mix_wq);
    const DenseMatrix k = matmul(e, encoder.mix_wk);
    const DenseMatrix v = matmul(e, encoder.mix_wv);
    DenseMatrix logits = matmul_transB(q, k);
    const double inv = 1.0 / std::sqrt(static_cast<double>(d2));
    for (auto& x : logits.data) x *= inv;
    const DenseMatrix a = softmax_rows(logits);
    DenseMatrix mixed = matmul(a, v);
    add_in_place(mixed, e);
    return mixed;
}

DenseMatrix patch_features(const DenseMatrix& latent) {
    const DenseMatrix p = patchify(latent);
    DenseMatrix f(kNumPatches, kPatchPixels + kNumPatches);
    for (std::size_t i = 0; i < kNumPatches; ++i) {
        for (std::size_t j = 0; j < kPatchPixels; ++j) f.at(i, j) = p.at(i, j);
        f.at(i, kPatchPixels + i) = 1.0;
    }
    return f;
}

DenseMatrix attention_map(const CrossAttentionLayer& layer,
                          const DenseMatrix& image_features,
                          const DenseMatrix& embeddings) {
    if (image_features.cols != layer.wq.rows || embeddings.cols != layer.wk.rows)
        throw DimensionMismatch("attention_map: feature/embedding dims do not match layer");
    const DenseMatrix q = matmul(image_features, layer.wq);
    const DenseMatrix k = matmul(embeddings, layer.wk);
    DenseMatrix logits = matmul_transB(q, k);
    const double inv = 1.0 / std::sqrt(static_cast<double>(layer.wq.cols));
    for (auto& x : logits.data) x *= inv;
    return softmax_rows(logits);
}

AttentionForward attention_forward(const CrossAttentionLayer& layer,
                                   const DenseMatrix& latent,
                                   const DenseMatrix& embeddings) {
    AttentionForward fw;
    fw.f = patch_features(latent);
    fw.q = matmul(fw.f, layer.wq);
    fw.k = matmul(embeddings, layer.wk);
    DenseMatrix logits = matmul_transB(fw.q, fw.k);
    const double inv = 1.0 / std::sqrt(static_cast<double>(layer.wq.cols));
    for (auto& x : logits.data) x *= inv;
    fw.a = softmax_rows(logits);
    fw.v = matmul(embeddings, layer.wv);
    fw.o = matmul(fw.a, fw.v);
    return fw;
}

DenseMatrix softmax_backward_rows(const DenseMatrix& a, const DenseMatrix& da) {
    if (!a.same_shape(da)) throw DimensionMismatch("softmax_backward_rows: shape mismatch");
    DenseMatrix dz(a.rows, a.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        double inner = 0.0;
        for (std::size_t j = 0; j < a.cols; ++j) inner += da.at(i, j) * a.at(i, j);
        for (std::size_t j = 0; j < a.cols; ++j)
            dz.at(i, j) = a.at(i, j) * (da.at(i, j) - inner);
    }
    return dz;
}

DenseMatrix forward_diffuse(const DenseMatrix& z0, int t, const DenseMatrix& eps,
                            const NoiseSchedule& schedule) {
    if (t < 1 || t > schedule.T)
        throw TimestepOutOfRange("forward_diffuse: t outside [1, T]");
    if (!z0.same_shape(eps)) throw DimensionMismatch("forward_diffuse: shape mismatch");
    const double ab = sched_ab(schedule, t);
    DenseMatrix z = scale(z0, std::sqrt(ab));
    add_in_place(z, eps, std::sqrt(1.0 - ab));
    return z;
}

DenseMatrix predict_x0(const ToyModelState& state, const DenseMatrix& z_t,
                       const DenseMatrix& embeddings) {
    const AttentionForward fw = attention_forward(state.denoiser.attn, z_t, embeddings);
    const DenseMatrix hin = head_input(fw.o);
    return unpatchify(matmul(hin, state.denoiser.head));
}

DenseMatrix predict_eps(const ToyModelState& state, const DenseMatrix& z_t, int t,
                        const DenseMatrix& embeddings) {
    const double ab = sched_ab(state.schedule, t);
    const DenseMatrix x0 = predict_x0(state, z_t, embeddings);
    // eps-parameterization around the predicted clean latent.
    DenseMatrix eps = scale(z_t, 1.0 / std::sqrt(1.0 - ab));
    add_in_place(eps, x0, -std::sqrt(ab) / std::sqrt(1.0 - ab));
    return eps;
}

double ldm_loss(const ToyModelState& state, const DenseMatrix& z0,
                const std::vector<std::string>& prompt, int t, const DenseMatrix& eps) {
    const DenseMatrix e = encode_prompt(state.vocab, state.encoder, prompt);
    const DenseMatrix z_t = forward_diffuse(z0, t, eps, state.schedule);
    const DenseMatrix eps_hat = predict_eps(state, z_t, t, e);
    return frobenius_sq(sub(eps_hat, eps));
}

DenseMatrix ddim_sample_embeddings(const ToyModelState& state, const DenseMatrix& embeddings,
                                   int steps, SeededRng& rng) {
    if (steps < 1) throw TimestepOutOfRange("ddim_sample: steps must be >= 1");
    const int T = state.schedule.T;
    DenseMatrix z = random_latent(rng);
    for (int i = 0; i < steps; ++i) {
        const int t = static_cast<int>(std::lround(
            static_cast<double>(T) * static_cast<double>(steps - i) / steps));
        const int tn = static_cast<int>(std::lround(
            static_cast<double>(T) * static_cast<double>(steps - i - 1) / steps));
        if (t == tn || t < 1) continue;
        const double ab = sched_ab(state.schedule, t);
        const double abn = sched_ab(state.schedule, tn);
        const DenseMatrix eps_hat = predict_eps(state, z, t, embeddings);
        DenseMatrix x0 = scale(z, 1.0 / std::sqrt(ab));
        add_in_place(x0, eps_hat, -std::sqrt(1.0 - ab) / std::sqrt(ab));
        z = scale(x0, std::sqrt(abn));
        add_in_place(z, eps_hat, std::sqrt(1.0 - abn));
    }
    return z;
}

DenseMatrix ddim_sample(const ToyModelState& state, const std::vector<std::string>& prompt,
                        int steps, SeededRng& rng) {
    const DenseMatrix e = encode_prompt(state.vocab, state.encoder, prompt);
    return ddim_sample_embeddings(state, e, steps, rng);
}

std::vector<std::string> instantiate_template(const std::vector<std::string>& tmpl,
                                              const std::string& name) {
    std::vector<std::string> out;
    out.reserve(tmpl.size());
    for (const auto& t : tmpl) out.push_back(t == "{}" ? name : t);
    return out;
}

namespace {

// Nearest-pattern classification by normalized correlation; the
// pretraining gate uses the ground-truth templates directly.
std::size_t nearest_pattern(const DenseMatrix& latent,
                            const std::vector<ConceptSpec>& concepts) {
    double best = -2.0;
    std::size_t best_i = 0;
    const double zn = std::sqrt(frobenius_sq(latent));
    for (std::size_t i = 0; i < concepts.size(); ++i) {
        const DenseMatrix& p = concepts[i].pattern;
        double dotv = 0.0;
        for (std::size_t j = 0; j < p.data.size(); ++j) dotv += p.data[j] * latent.data[j];
        const double pn = std::sqrt(frobenius_sq(p));
        const double corr = dotv / (std::max(zn, 1e-12) * std::max(pn, 1e-12));
        if (corr > best) {
            best = corr;
            best_i = i;
        }
    }
    return best_i;
}

struct PretrainItem {
    DenseMatrix embeddings;
    DenseMatrix z0;
};

} // namespace

void pretrain_toy(ToyModelState& state, const PretrainConfig& config, SeededRng& rng) {
    if (state.concepts.size() < 2)
        throw ConfigError("pretrain_toy: at least 2 concepts required");

    std::vector<PretrainItem> items;
    auto add_items = [&](const ConceptSpec& c) {
        for (const auto& tmpl : config.templates) {
            PretrainItem it;
            it.embeddings = encode_prompt(state.vocab, state.encoder,
                                          instantiate_template(tmpl, c.name));
            it.z0 = c.pattern;

            // Dropout variant: the subject's own row is overwritten with the
            // final row, so the denoiser also learns to recover the subject
            // from what the context mixing leaked into surrounding tokens.
            std::size_t pos = 0;
            for (std::size_t i = 0; i < tmpl.size(); ++i)
                if (tmpl[i] == "{}") pos = i;
            PretrainItem masked = it;
            const std::size_t last = masked.embeddings.rows - 1;
            for (std::size_t j = 0; j < masked.embeddings.cols; ++j)
                masked.embeddings.at(pos, j) = masked.embeddings.at(last, j);

            items.push_back(std::move(it));
            items.push_back(std::move(masked));
        }
    };
    for (const auto& c : state.concepts) add_items(c);
    for (const auto& b : state.backgrounds) add_items(b);

    const int T = state.schedule.T;
    CrossAttentionLayer& attn = state.denoiser.attn;
    DenseMatrix& head = state.denoiser.head;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(state.d_attn));

    AdamOptimizer opt_wk(attn.wk), opt_wv(attn.wv), opt_head(head);

    SeededRng r_train = rng.derive(0x20);
    for (int step = 0; step < config.steps; ++step) {
        // Full-batch step: fresh (t, eps) per item, gradients averaged over
        // all items. Averaging keeps the step direction stable enough for a
        // decayed learning rate starting well above the stochastic regime.
        DenseMatrix gwk(attn.wk.rows, attn.wk.cols);
        DenseMatrix gwv(attn.wv.rows, attn.wv.cols);
        DenseMatrix ghead(head.rows, head.cols);
        double loss = 0.0;
        for (const PretrainItem& it : items) {
            const int t =
                1 + static_cast<int>(r_train.next_u64() % static_cast<std::uint64_t>(T));
            DenseMatrix eps(kLatentSize, kLatentSize);
            for (auto& x : eps.data) x = r_train.normal();

            const DenseMatrix z_t = forward_diffuse(it.z0, t, eps, state.schedule);

            const AttentionForward fw = attention_forward(attn, z_t, it.embeddings);
            const DenseMatrix hin = head_input(fw.o);
            const DenseMatrix x0_hat = unpatchify(matmul(hin, head));

            // Train on the clean-latent regression; it shares the minimizer
            // of the eps objective but keeps gradient scale bounded across t.
            DenseMatrix r = sub(x0_hat, it.z0);
            loss += frobenius_sq(r);
            const DenseMatrix dx0 = scale(r, 2.0);
            const DenseMatrix dx0p = patchify(dx0);

            add_in_place(ghead, matmul_transA(hin, dx0p));
            const DenseMatrix dhin = matmul_transB(dx0p, head);
            DenseMatrix dout(kNumPatches, state.d_attn);
            for (std::size_t p = 0; p < kNumPatches; ++p)
                for (std::size_t j = 0; j < state.d_attn; ++j) dout.at(p, j) = dhin.at(p, j);

            const DenseMatrix dv = matmul_transA(fw.a, dout);
            add_in_place(gwv, matmul_transA(it.embeddings, dv));
            const DenseMatrix da = matmul_transB(dout, fw.v);
            const DenseMatrix dz = softmax_backward_rows(fw.a, da);
            DenseMatrix dk = matmul_transA(dz, fw.q);
            for (auto& x : dk.data) x *= inv_sqrt_d;
            add_in_place(gwk, matmul_transA(it.embeddings, dk));
        }
        const double inv_n = 1.0 / static_cast<double>(items.size());
        for (auto* g : {&gwk, &gwv, &ghead})
            for (auto& x : g->data) x *= inv_n;
        opt_wk.update(attn.wk, gwk, config.learning_rate);
        opt_wv.update(attn.wv, gwv, config.learning_rate);
        opt_head.update(head, ghead, config.learning_rate);
    }

    // Sampling gate: every concept must classify to itself.
    for (std::size_t ci = 0; ci < state.concepts.size(); ++ci) {
        const auto prompt =
            instantiate_template(config.templates.front(), state.concepts[ci].name);
        int hits = 0;
        for (int s = 0; s < config.gate_samples; ++s) {
            SeededRng r = rng.derive(0x9000 + ci * 1000 + static_cast<std::uint64_t>(s));
            const DenseMatrix z = ddim_sample(state, prompt, config.ddim_steps, r);
            if (nearest_pattern(z, state.concepts) == ci) ++hits;
        }
        const double acc = static_cast<double>(hits) / config.gate_samples;
        if (acc < config.gate_accuracy)
            throw DidNotConverge("pretrain gate failed for concept '" +
                                 state.concepts[ci].name + "': accuracy " +
                                 std::to_string(acc));
    }
}

std::vector<MappingPair> extract_mapping_pairs(const TinyVocab& vocab,
                                               const TextEncoder& encoder,
                                               const std::vector<std::string>& prompt,
                                               std::size_t span_begin,
                                               std::size_t span_len,
                                               const std::string& replacement) {
    if (span_len == 0 || span_begin + span_len > prompt.size())
        throw SpanOutOfRange("extract_mapping_pairs: span outside prompt");
    if (!vocab.contains(replacement))
        throw UnknownToken("extract_mapping_pairs: replacement not in vocab: " + replacement);

    std::vector<std::string> replaced;
    replaced.reserve(prompt.size() - span_len + 1);
    for (std::size_t i = 0; i < span_begin; ++i) replaced.push_back(prompt[i]);
    replaced.push_back(replacement);
    for (std::size_t i = span_begin + span_len; i < prompt.size(); ++i)
        replaced.push_back(prompt[i]);

    const DenseMatrix ef = encode_prompt(vocab, encoder, prompt);
    const DenseMatrix eg = encode_prompt(vocab, encoder, replaced);

    // Pairs cover every non-target position including the appended EOS;
    // the target span itself contributes none.
    std::vector<MappingPair> pairs;
    for (std::size_t i = 0; i < ef.rows; ++i) {
        if (i >= span_begin && i < span_begin + span_len) continue;
        const std::size_t j = i < span_begin ? i : i - span_len + 1;
        MappingPair p;
        p.e_f.assign(ef.row(i), ef.row(i) + ef.cols);
        p.e_g.assign(eg.row(j), eg.row(j) + eg.cols);
        pairs.push_back(std::move(p));
    }
    return pairs;
}

DenseMatrix residual_probe(const ToyModelState& state,
                           const std::vector<std::string>& prompt,
                           std::size_t span_begin, std::size_t span_len,
                           int steps, SeededRng& rng) {
    if (span_len == 0 || span_begin + span_len > prompt.size())
        throw SpanOutOfRange("residual_probe: span outside prompt");
    DenseMatrix e = encode_prompt(state.vocab, state.encoder, prompt);
    const std::size_t eos_row = e.rows - 1;
    for (std::size_t i = span_begin; i < span_begin + span_len; ++i)
        for (std::size_t j = 0; j < e.cols; ++j) e.at(i, j) = e.at(eos_row, j);
    return ddim_sample_embeddings(state, e, steps, rng);
}

DenseMatrix synth_mask(const DenseMatrix& latent, const ConceptSpec& cspec) {
    const DenseMatrix& pat = cspec.pattern;
    DenseMatrix mask8(kLatentSize, kLatentSize);

    // Windowed 3x3 normalized cross-correlation; flat windows on either
    // side contribute zero.
    const int n = static_cast<int>(kLatentSize);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double sz = 0.0, sp = 0.0;
            int cnt = 0;
            for (int di = -1; di <= 1; ++di)
                for (int dj = -1; dj <= 1; ++dj) {
                    const int r = i + di, c = j + dj;
                    if (r < 0 || r >= n || c < 0 || c >= n) continue;
                    sz += latent.at(r, c);
                    sp += pat.at(r, c);
                    ++cnt;
                }
            const double mz = sz / cnt, mp = sp / cnt;
            double num = 0.0, dz = 0.0, dp = 0.0;
            for (int di = -1; di <= 1; ++di)
                for (int dj = -1; dj <= 1; ++dj) {
                    const int r = i + di, c = j + dj;
                    if (r < 0 || r >= n || c < 0 || c >= n) continue;
                    const double az = latent.at(r, c) - mz;
                    const double ap = pat.at(r, c) - mp;
                    num += az * ap;
                    dz += az * az;
                    dp += ap * ap;
                }
            double ncc = 0.0;
            if (dz > 1e-18 && dp > 1e-18) ncc = num / std::sqrt(dz * dp);
            mask8.at(i, j) = ncc > cspec.mask_threshold ? 1.0 : 0.0;
        }

    // Max-pool to the 4x4 patch grid.
    DenseMatrix mask(kPatchGrid, kPatchGrid);
    for (std::size_t pr = 0; pr < kPatchGrid; ++pr)
        for (std::size_t pc = 0; pc < kPatchGrid; ++pc) {
            double m = 0.0;
            for (std::size_t di = 0; di < kPatch; ++di)
                for (std::size_t dj = 0; dj < kPatch; ++dj)
                    m = std::max(m, mask8.at(2 * pr + di, 2 * pc + dj));
            mask.at(pr, pc) = m;
        }
    return mask;
}

std::vector<TrainingExample> generate_training_set(const ToyModelState& state,
                                                   const ConceptSpec& cspec,
                                                   int count, int ddim_steps,
                                                   SeededRng& rng) {
    std::vector<TrainingExample> out;
    out.reserve(static_cast<std::size_t>(count));
    const std::vector<std::string> prompt = {"a", "photo", "of", cspec.name};
    for (int i = 0; i < count; ++i) {
        SeededRng r = rng.derive(0x4000 + static_cast<std::uint64_t>(i));
        TrainingExample ex;
        ex.latent = ddim_sample(state, prompt, ddim_steps, r);
        ex.prompt = prompt;
        ex.mask = synth_mask(ex.latent, cspec);
        out.push_back(std::move(ex));
    }
    return out;
}

// --- persistence -------------------------------------------------------

namespace {

std::string join(const std::vector<std::string>& parts, char sep) {
    std::string s;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) s += sep;
        s += parts[i];
    }
    return s;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

void write_concept_line(std::ostream& os, const char* tag, const ConceptSpec& c) {
    os << tag << " = " << c.name << "|" << join(c.synonyms, ';') << "|"
       << c.super_category << "|" << c.mask_threshold << "\n";
}

ConceptSpec parse_concept_line(const std::string& value, const std::string& dir) {
    const auto fields = split(value, '|');
    if (fields.size() < 4) throw IoError("malformed concept record: " + value);
    ConceptSpec c;
    c.name = fields[0];
    if (!fields[1].empty()) c.synonyms = split(fields[1], ';');
    c.super_category = fields[2];
    c.mask_threshold = std::stod(fields[3]);
    c.pattern = read_matrix(dir + "/pattern_" + c.name + ".mat");
    return c;
}

} // namespace

void save_checkpoint(const std::string& dir, const ToyModelState& state) {
    std::filesystem::create_directories(dir);
    write_matrix(dir + "/embed.mat", state.encoder.embed);
    write_matrix(dir + "/mix_wq.mat", state.encoder.mix_wq);
    write_matrix(dir + "/mix_wk.mat", state.encoder.mix_wk);
    write_matrix(dir + "/mix_wv.mat", state.encoder.mix_wv);
    write_matrix(dir + "/wq.mat", state.denoiser.attn.wq);
    write_matrix(dir + "/wk.mat", state.denoiser.attn.wk);
    write_matrix(dir + "/wv.mat", state.denoiser.attn.wv);
    write_matrix(dir + "/head.mat", state.denoiser.head);
    for (const auto& c : state.concepts)
        write_matrix(dir + "/pattern_" + c.name + ".mat", c.pattern);
    for (const auto& b : state.backgrounds)
        write_matrix(dir + "/pattern_" + b.name + ".mat", b.pattern);

    std::ofstream os(dir + "/manifest.txt");
    if (!os) throw IoError("cannot write checkpoint manifest in " + dir);
    os << "format = toy-checkpoint-1\n";
    os << "d2 = " << state.d2 << "\n";
    os << "d_attn = " << state.d_attn << "\n";
    os << "d_img = " << state.d_img << "\n";
    os << "T = " << state.schedule.T << "\n";
    os << "seed = " << state.seed << "\n";
    os << "vocab = " << join(state.vocab.tokens, ',') << "\n";
    os << "bos_id = " << state.vocab.bos_id << "\n";
    os << "eos_id = " << state.vocab.eos_id << "\n";
    for (const auto& c : state.concepts) write_concept_line(os, "concept", c);
    for (const auto& b : state.backgrounds) write_concept_line(os, "background", b);
}

ToyModelState load_checkpoint(const std::string& dir) {
    std::ifstream is(dir + "/manifest.txt");
    if (!is) throw IoError("checkpoint manifest not found: " + dir + "/manifest.txt");

    ToyModelState st;
    std::string line;
    while (std::getline(is, line)) {
        const auto eq = line.find(" = ");
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 3);
        if (key == "d2") st.d2 = std::stoull(value);
        else if (key == "d_attn") st.d_attn = std::stoull(value);
        else if (key == "d_img") st.d_img = std::stoull(value);
        else if (key == "T") st.schedule = NoiseSchedule::linear(std::stoi(value));
        else if (key == "seed") st.seed = std::stoull(value);
        else if (key == "vocab") st.vocab.tokens = split(value, ',');
        else if (key == "bos_id") st.vocab.bos_id = std::stoull(value);
        else if (key == "eos_id") st.vocab.eos_id = std::stoull(value);
        else if (key == "concept") st.concepts.push_back(parse_concept_line(value, dir));
        else if (key == "background") st.backgrounds.push_back(parse_concept_line(value, dir));
    }
    st.encoder.embed = read_matrix(dir + "/embed.mat");
    st.encoder.mix_wq = read_matrix(dir + "/mix_wq.mat");
    st.encoder.mix_wk = read_matrix(dir + "/mix_wk.mat");
    st.encoder.mix_wv = read_matrix(dir + "/mix_wv.mat");
    st.denoiser.attn.wq = read_matrix(dir + "/wq.mat");
    st.denoiser.attn.wk = read_matrix(dir + "/wk.mat");
    st.denoiser.attn.wv = read_matrix(dir + "/wv.mat");
    st.denoiser.head = read_matrix(dir + "/head.mat");
    return st;
}

} // namespace mace
