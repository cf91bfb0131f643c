#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mace/cfr.hpp"
#include "mace/lora.hpp"
#include "mace/metrics.hpp"
#include "mace/toy_model.hpp"

namespace mace {

struct CfisSettings {
    double t1_frac = 0.2;
    double t2_frac = 0.4;
    double gamma = 0.05; // quoted at the 1000-step reference scale
};

struct LoraSettings {
    int rank = 1;
    int steps = 50;
    double learning_rate = 0.3;
};

// Full run configuration, loadable from a sectioned key-value file.
struct ErasureConfig {
    // [model]
    std::vector<std::string> concepts;
    std::vector<std::string> synonyms;         // one per concept
    std::vector<std::string> super_categories; // one per concept
    std::vector<std::string> backgrounds;
    std::uint64_t seed = 1;
    int pretrain_steps = 8000;
    double pretrain_learning_rate = 0.01;

    // [erasure]
    std::vector<std::string> erase;
    std::vector<std::string> retain;
    std::vector<std::string> domain_prior; // optional user-highlighted concepts
    double lambda1 = 1.0;
    double lambda2 = 30.0;
    double lambda3 = 1.0;
    AnchorMode anchor_mode = AnchorMode::EmbeddingPrior;

    // [cfis] / [lora]
    CfisSettings cfis;
    LoraSettings lora;

    // [eval]
    int samples_per_prompt = 64;
    int training_images = 8;

    // [output]
    std::string output_root = "runs";
};

ErasureConfig default_demo_config();
ErasureConfig parse_config_file(const std::string& path);
// Throws ConfigError with the first violated rule.
void validate_config(const ErasureConfig& config);
// Canonical text form; the config hash is computed over it.
std::string serialize_config(const ErasureConfig& config);
std::string config_hash(const ErasureConfig& config);
// MACE_DATA_DIR overrides the configured output root when set.
std::string resolve_output_root(const ErasureConfig& config);

struct ManifestStage {
    std::string name;
    std::string output_path;
    double seconds = 0.0;
};

struct RunManifest {
    std::string config_hash;
    std::string version;
    std::vector<ManifestStage> stages;
    std::map<std::string, std::string> notes;
    bool gates_passed = false;

    void save(const std::string& path) const;
    static RunManifest load(const std::string& path);
};

// Checksum over everything the erasure stages must not touch: vocab,
// encoder, query weights, output head, schedule. W_k / W_v are excluded.
std::uint64_t non_edited_checksum(const ToyModelState& state);

// --- pipeline stages ----------------------------------------------------
// Each stage reads/writes checkpoint directories and returns the loaded
// result for chaining. All are deterministic given the config.

ToyModelState cmd_pretrain(const ErasureConfig& config, const std::string& out_dir);

ToyModelState cmd_refine(const ErasureConfig& config, const std::string& model_dir,
                         const std::string& out_dir);

// One (key, value) LoRA pair per erased concept, written under out_dir.
// Training data is generated from the original model; training runs against
// the refined model. Concepts are independent and may train concurrently.
std::vector<LoraPair> cmd_train(const ErasureConfig& config,
                                const std::string& model_dir,
                                const std::string& refined_dir,
                                const std::string& out_dir, int workers);

enum class FusionMode { ClosedForm, Naive };

ToyModelState cmd_fuse(const ErasureConfig& config, const std::string& model_dir,
                       const std::string& refined_dir, const std::string& lora_dir,
                       FusionMode mode, const std::string& out_dir,
                       RunManifest* manifest = nullptr);

EvalReport cmd_eval(const ErasureConfig& config, const std::string& before_dir,
                    const std::string& after_dir, const std::string& report_dir);

struct DemoGates {
    double acc_e = 1.0, acc_g = 1.0, acc_s = 0.0;
    double naive_acc_s = 0.0;
    bool passed = false;
};

// pretrain -> refine -> train -> fuse(closed-form) -> eval, plus the
// naive-fusion ablation arm. Returns the manifest; gate outcomes are in
// manifest.notes and DemoGates.
RunManifest cmd_demo(const ErasureConfig& config, const std::string& root,
                     int workers, DemoGates* gates = nullptr);

} // namespace mace
