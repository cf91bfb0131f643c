#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mace/matrix.hpp"

namespace mace {

// One co-existing word, embedded under the original prompt (e_f) and under
// the prompt with the target phrase replaced by its super-category (e_g).
struct MappingPair {
    std::vector<double> e_f;
    std::vector<double> e_g;
};

enum class PriorKind { General, DomainSpecific };

// Pre-cached constants for preserving prior knowledge:
//   gram  = sum_e e e^T          (d2 x d2)
//   cross = sum_e (W e) e^T      (d1 x d2)
struct PriorCache {
    DenseMatrix gram;
    DenseMatrix cross;
    std::size_t count = 0;
    PriorKind kind = PriorKind::General;

    static PriorCache empty(std::size_t d1, std::size_t d2, PriorKind kind);
    // Additive merge: caching in two batches then merging matches one-shot
    // construction up to floating-point summation order.
    void merge(const PriorCache& other);
};

PriorCache build_prior_cache(const DenseMatrix& w,
                             const std::vector<std::vector<double>>& embeddings,
                             PriorKind kind);

void save_prior_cache(const std::string& dir, const std::string& name,
                      const PriorCache& cache);
PriorCache load_prior_cache(const std::string& dir, const std::string& name);

enum class AnchorMode { EmbeddingPrior, WeightAnchor };

struct RefineProblem {
    DenseMatrix w;                       // pretrained projection, d1 x d2
    std::vector<MappingPair> pairs;      // n items
    PriorCache general_prior;            // weighted by lambda1
    double lambda1 = 0.0;
    std::optional<PriorCache> domain_prior; // weighted by lambda3
    double lambda3 = 0.0;
    AnchorMode anchor_mode = AnchorMode::EmbeddingPrior;
    double anchor_lambda = 0.0;          // lambda for weight-anchor mode
};

struct FusionProblem {
    DenseMatrix w;                       // original pretrained projection
    DenseMatrix w_refined;               // closed-form refined projection
    std::vector<DenseMatrix> deltas;     // q LoRA increments B_i D_i
    // Per concept i, the embeddings whose LoRA-modulated images act as the
    // fusion ground truth.
    std::vector<std::vector<std::vector<double>>> map_embeddings;
    PriorCache prior;                    // weighted by lambda2, built from w
    double lambda2 = 0.0;
};

// Minimizer of the refinement objective. With no mapping pairs the
// minimizer is W itself and no factorization is performed.
DenseMatrix closed_form_refine(const RefineProblem& problem);
double refine_objective(const RefineProblem& problem, const DenseMatrix& w_candidate);

DenseMatrix closed_form_fuse(const FusionProblem& problem);
double fusion_objective(const FusionProblem& problem, const DenseMatrix& w_candidate);

// Weighted-sum LoRA merging baseline; weights must sum to 1 within 1e-12.
DenseMatrix naive_lora_fusion(const DenseMatrix& w_refined,
                              const std::vector<DenseMatrix>& deltas,
                              const std::vector<double>& weights);

} // namespace mace
