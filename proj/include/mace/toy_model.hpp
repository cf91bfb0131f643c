#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mace/cfr.hpp"
#include "mace/matrix.hpp"
#include "mace/rng.hpp"

namespace mace {

// Latent geometry: 8x8 single-channel latents, tokenized into 16 patches
// of 2x2 pixels laid out on a 4x4 grid.
constexpr std::size_t kLatentSize = 8;
constexpr std::size_t kPatch = 2;
constexpr std::size_t kPatchGrid = 4;
constexpr std::size_t kNumPatches = 16;
constexpr std::size_t kPatchPixels = 4;

struct TinyVocab {
    std::vector<std::string> tokens;
    std::size_t bos_id = 0;
    std::size_t eos_id = 0;

    std::size_t id(const std::string& token) const; // throws UnknownToken
    bool contains(const std::string& token) const;
};

struct TextEncoder {
    DenseMatrix embed;   // |vocab| x d2
    DenseMatrix mix_wq;  // d2 x d2, fixed at pretraining
    DenseMatrix mix_wk;
    DenseMatrix mix_wv;
};

struct CrossAttentionLayer {
    DenseMatrix wq; // d_img x d_attn, fixed
    DenseMatrix wk; // d2 x d_attn, editable
    DenseMatrix wv; // d2 x d_attn, editable
};

struct NoiseSchedule {
    int T = 0;
    std::vector<double> alpha_bar; // index 0..T, alpha_bar[0] = 1, decreasing

    static NoiseSchedule linear(int T);
};

struct ToyDenoiser {
    CrossAttentionLayer attn;
    // Linear head over [attention output | patch position one-hot],
    // predicting the 4 pixels of one patch.
    DenseMatrix head; // (d_attn + kNumPatches) x kPatchPixels
};

struct ConceptSpec {
    std::string name;
    std::vector<std::string> synonyms;
    std::string super_category;
    DenseMatrix pattern; // 8x8, normalized to unit max
    double mask_threshold = 0.5;
};

struct ToyModelState {
    TinyVocab vocab;
    TextEncoder encoder;
    ToyDenoiser denoiser;
    NoiseSchedule schedule;
    std::vector<ConceptSpec> concepts;    // the classifiable concepts
    std::vector<ConceptSpec> backgrounds; // super-category patterns
    std::size_t d2 = 0;
    std::size_t d_attn = 0;
    std::size_t d_img = 0;
    std::uint64_t seed = 0;

    const ConceptSpec& concept_by_name(const std::string& name) const;
};

struct ToyModelSpec {
    std::vector<std::string> concept_names;
    std::vector<std::string> synonyms;        // one per concept (comma-free token)
    std::vector<std::string> super_categories; // one per concept, drawn from backgrounds
    std::vector<std::string> background_names; // e.g. {"sky", "ground"}
    std::size_t d2 = 24;
    std::size_t d_attn = 32;
    int T = 100;
    double mask_threshold = 0.5;
    std::uint64_t seed = 1;
};

// Builds vocab, fixed encoder/query weights, initial editable weights and
// the concept patterns. Synonym token embeddings are tied to their concept
// embedding plus small noise, the toy analog of synonym proximity in a
// real text encoder.
ToyModelState make_toy_model(const ToyModelSpec& spec);

// --- text side ---------------------------------------------------------

// Context-mixed embeddings for prompt + appended EOS; one row per token.
DenseMatrix encode_prompt(const TinyVocab& vocab, const TextEncoder& encoder,
                          const std::vector<std::string>& prompt);

// --- denoiser ----------------------------------------------------------

// 16 x (kPatchPixels + kNumPatches): raw patch pixels plus position one-hot.
DenseMatrix patch_features(const DenseMatrix& latent);

DenseMatrix attention_map(const CrossAttentionLayer& layer,
                          const DenseMatrix& image_features,
                          const DenseMatrix& embeddings);

// Intermediates of the cross-attention pass, shared by training code.
struct AttentionForward {
    DenseMatrix f; // 16 x d_img
    DenseMatrix q; // 16 x d_attn
    DenseMatrix k; // y x d_attn
    DenseMatrix a; // 16 x y, row-stochastic
    DenseMatrix v; // y x d_attn
    DenseMatrix o; // 16 x d_attn
};

AttentionForward attention_forward(const CrossAttentionLayer& layer,
                                   const DenseMatrix& latent,
                                   const DenseMatrix& embeddings);

// Row-wise softmax Jacobian application: given A = softmax_rows(Z) and
// dL/dA, returns dL/dZ.
DenseMatrix softmax_backward_rows(const DenseMatrix& a, const DenseMatrix& da);

DenseMatrix forward_diffuse(const DenseMatrix& z0, int t, const DenseMatrix& eps,
                            const NoiseSchedule& schedule);

DenseMatrix predict_x0(const ToyModelState& state, const DenseMatrix& z_t,
                       const DenseMatrix& embeddings);
DenseMatrix predict_eps(const ToyModelState& state, const DenseMatrix& z_t, int t,
                        const DenseMatrix& embeddings);

double ldm_loss(const ToyModelState& state, const DenseMatrix& z0,
                const std::vector<std::string>& prompt, int t, const DenseMatrix& eps);

DenseMatrix ddim_sample(const ToyModelState& state, const std::vector<std::string>& prompt,
                        int steps, SeededRng& rng);
DenseMatrix ddim_sample_embeddings(const ToyModelState& state, const DenseMatrix& embeddings,
                                   int steps, SeededRng& rng);

// --- pretraining -------------------------------------------------------

struct PretrainConfig {
    int steps = 8000;
    double learning_rate = 0.01;
    int ddim_steps = 20;
    int gate_samples = 20;
    double gate_accuracy = 0.95;
    std::vector<std::vector<std::string>> templates = {
        {"a", "photo", "of", "{}"}, {"a", "{}"}};
};

std::vector<std::string> instantiate_template(const std::vector<std::string>& tmpl,
                                              const std::string& name);

// Trains wk, wv and the head so that every concept prompt denoises to its
// pattern; throws DidNotConverge if the sampling gate is not met.
void pretrain_toy(ToyModelState& state, const PretrainConfig& config, SeededRng& rng);

// --- erasure support ---------------------------------------------------

std::vector<MappingPair> extract_mapping_pairs(const TinyVocab& vocab,
                                               const TextEncoder& encoder,
                                               const std::vector<std::string>& prompt,
                                               std::size_t span_begin,
                                               std::size_t span_len,
                                               const std::string& replacement);

// Fig. 2-style probe: overwrite the target span's context embeddings with
// the final EOS embedding and sample.
DenseMatrix residual_probe(const ToyModelState& state,
                           const std::vector<std::string>& prompt,
                           std::size_t span_begin, std::size_t span_len,
                           int steps, SeededRng& rng);

DenseMatrix synth_mask(const DenseMatrix& latent, const ConceptSpec& cspec);

struct TrainingExample {
    DenseMatrix latent;              // 8x8
    std::vector<std::string> prompt; // without EOS
    DenseMatrix mask;                // 4x4 patch grid, binary
};

std::vector<TrainingExample> generate_training_set(const ToyModelState& state,
                                                   const ConceptSpec& cspec,
                                                   int count, int ddim_steps,
                                                   SeededRng& rng);

// --- persistence -------------------------------------------------------

void save_checkpoint(const std::string& dir, const ToyModelState& state);
ToyModelState load_checkpoint(const std::string& dir);

} // namespace mace
