#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mace/matrix.hpp"
#include "mace/rng.hpp"
#include "mace/toy_model.hpp"

namespace mace {

// Accuracies for one erased concept: acc_e on the concept's own prompts
// (efficacy), acc_s on retained prompts (specificity), and optionally
// acc_g on synonym prompts (generality).
struct AccuracyTriple {
    std::string name;
    double acc_e = 0.0;
    double acc_s = 0.0;
    std::optional<double> acc_g;
};

// Harmonic means over {1 - acc_e, acc_s, 1 - acc_g} / {1 - acc_e, acc_s}.
// Preconditions raise UndefinedMean rather than clamping: the degenerate
// boundaries (perfectly retained erased concept, zero specificity) indicate
// a broken run and must not be averaged away.
double harmonic_mean_object(double acc_e, double acc_s, double acc_g);
double harmonic_mean_celebrity(double acc_e, double acc_s);

// Overall style-erasure score: retained-style score minus erased-style score.
double style_gap(double score_retained, double score_erased);

// Nearest-centroid classifier over latent space. Classes are the model's
// concepts followed by its background patterns; including backgrounds keeps
// the decision from being a forced choice among concepts, so an erased
// prompt that now generates scenery does not inflate concept accuracy.
struct ToyClassifier {
    std::vector<std::string> labels;
    std::vector<DenseMatrix> centroids;

    std::size_t classify(const DenseMatrix& latent) const;
    std::size_t label_index(const std::string& name) const; // throws UnknownToken
};

// Builds centroids from generated samples of every concept and background,
// then verifies the classifier on fresh draws; throws ClassifierGateFailed
// if any concept's held-out accuracy falls below the gate.
ToyClassifier fit_toy_classifier(const ToyModelState& model, int samples_per_concept,
                                 double gate_accuracy, SeededRng& rng);

struct RetainedResult {
    std::string name;
    double accuracy = 0.0;
    int samples = 0;
};

struct EvalReport {
    std::vector<AccuracyTriple> erased;    // one triple per erased concept
    std::vector<RetainedResult> retained;  // per retained concept
    double acc_e_mean = 0.0;
    double acc_s_mean = 0.0;
    std::optional<double> acc_g_mean;
    std::optional<double> mean_with_generality;    // 3-term harmonic mean
    std::optional<double> mean_without_generality; // 2-term harmonic mean
    std::uint64_t seed = 0;
    std::string config_hash;
    int samples_per_prompt = 0;
};

// Recomputes the stored harmonic means from the stored accuracies; used by
// the round-trip check after deserialization.
void recompute_means(EvalReport& report);

// Generates samples from model_after under erased / synonym / retained
// prompts, classifies them with a classifier fitted on model_before, and
// assembles the report. Deterministic given rng seed.
EvalReport run_erasure_eval(const ToyModelState& model_before,
                            const ToyModelState& model_after,
                            const std::vector<std::string>& erase_set,
                            const std::vector<std::string>& retain_set,
                            const std::map<std::string, std::string>& synonym_map,
                            int samples_per_prompt, SeededRng& rng);

// report.txt (sectioned key-value) + report.csv (per-concept accuracies).
void save_eval_report(const std::string& dir, const EvalReport& report);
EvalReport load_eval_report(const std::string& dir);

} // namespace mace
