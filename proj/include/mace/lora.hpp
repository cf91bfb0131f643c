#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mace/matrix.hpp"
#include "mace/rng.hpp"
#include "mace/toy_model.hpp"

namespace mace {

enum class LoraTarget { Key, Value };

// Low-rank delta for one projection matrix: delta = b x d.
struct LoraModule {
    DenseMatrix b; // d2 x rank, zero-initialized
    DenseMatrix d; // rank x d_attn, small seeded Gaussian
    std::size_t rank = 1;
    LoraTarget target = LoraTarget::Key;
    std::string concept_id;

    static LoraModule init(std::size_t d2, std::size_t d_attn, std::size_t rank,
                           LoraTarget target, const std::string& concept_id,
                           SeededRng& rng);
};

DenseMatrix apply_lora(const DenseMatrix& w, const LoraModule& lora);

// Timestep distribution concentrating training on the mid-denoising band
// [t1, t2]: pdf(t) proportional to sigmoid(gamma (t - t1)) - sigmoid(gamma (t - t2)),
// normalized over the discrete range {1..T}.
struct CfisDistribution {
    int T = 0;
    double t1 = 0.0, t2 = 0.0, gamma = 0.0;
    std::vector<double> pdf; // index 1..T; [0] unused
    std::vector<double> cdf;
};

CfisDistribution make_cfis(int T, double t1, double t2, double gamma);
// Fractions of T, with gamma quoted at the reference 1000-step scale and
// rescaled so the pdf keeps its shape on the unit timestep axis.
CfisDistribution make_cfis_fractions(int T, double t1_frac, double t2_frac,
                                     double gamma_at_1000);
CfisDistribution make_uniform_timesteps(int T);

double cfis_pdf(const CfisDistribution& dist, int t);
int cfis_sample(const CfisDistribution& dist, SeededRng& rng);

// --- masked attention suppression loss --------------------------------

// Per-item training instance: clean latent, its prompt context, and the
// patch-grid mask marking where the concept appears.
struct EraseItem {
    DenseMatrix latent;     // clean latent (8x8 at toy scale)
    DenseMatrix embeddings; // tokens x d2, prompt already encoded
    DenseMatrix mask;       // patch grid, binary
    int t = 1;
    DenseMatrix eps;
};

// Sum over tokens in S of || column i of A, masked ||^2 where A is the
// row-stochastic attention map and mask_flat has one entry per map row.
double masked_column_energy(const DenseMatrix& a, const std::vector<double>& mask_flat,
                            const std::vector<std::size_t>& token_set);

// Attention map under a key-side LoRA: softmax(Q (E (wk + b d))^T / sqrt(d_attn)).
DenseMatrix lora_attention_map(const DenseMatrix& q, const DenseMatrix& embeddings,
                               const DenseMatrix& wk, const LoraModule& key_lora);

struct EraseGrads {
    DenseMatrix key_b, key_d;
    DenseMatrix value_b, value_d;
};

// Loss and analytic gradients for one (Q, E, mask) instance; gradients are
// with respect to the key LoRA factors (the map does not read the value
// projection, so its gradients are identically zero).
double masked_attention_loss(const DenseMatrix& q, const DenseMatrix& embeddings,
                             const DenseMatrix& wk, const LoraModule& key_lora,
                             const std::vector<double>& mask_flat,
                             const std::vector<std::size_t>& token_set);
EraseGrads masked_attention_grads(const DenseMatrix& q, const DenseMatrix& embeddings,
                                  const DenseMatrix& wk, const LoraModule& key_lora,
                                  const LoraModule& value_lora,
                                  const std::vector<double>& mask_flat,
                                  const std::vector<std::size_t>& token_set);

// Batch-mean loss on forward-diffused latents through the modulated layer.
double erasure_loss(const ToyModelState& state, const LoraModule& key_lora,
                    const std::vector<EraseItem>& batch,
                    const std::vector<std::size_t>& token_set);
EraseGrads erasure_loss_grad(const ToyModelState& state, const LoraModule& key_lora,
                             const LoraModule& value_lora,
                             const std::vector<EraseItem>& batch,
                             const std::vector<std::size_t>& token_set);

// --- training ----------------------------------------------------------

struct EraseTrainConfig {
    int steps = 50;
    double learning_rate = 0.3;
    // Early exit once the fixed-batch loss falls to this level; 0 disables.
    // Training far past convergence inflates the low-rank factors without
    // improving suppression, and oversized deltas destabilize the fusion
    // solve downstream.
    double stop_loss = 1e-3;
    std::size_t rank = 1;
    std::vector<std::size_t> token_set; // indices of the target phrase tokens
    bool tune_key = true;
    bool tune_value = true;
};

struct LoraPair {
    LoraModule key;
    LoraModule value;
    std::vector<double> loss_curve; // fixed-batch loss per step, endpoints first/last
};

// Trains a (key, value) LoRA pair to suppress the masked attention columns
// of one concept; throws DidNotImprove when the fixed-batch loss does not
// go down over the run.
LoraPair train_lora(const ToyModelState& state, const ConceptSpec& cspec,
                    const std::vector<TrainingExample>& training_set,
                    const EraseTrainConfig& config, const CfisDistribution& cfis,
                    SeededRng& rng);

void save_lora(const std::string& dir, const std::string& name, const LoraPair& pair,
               std::uint64_t seed, int steps);
LoraPair load_lora(const std::string& dir, const std::string& name);

} // namespace mace
