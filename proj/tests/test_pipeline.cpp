#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "mace/linalg.hpp"
#include "mace/pipeline.hpp"

using namespace mace;
namespace fs = std::filesystem;

namespace {

// Reduced configuration small enough for unit tests; the full-size demo
// config is exercised by the acceptance binary. Six concepts keep the
// vocabulary large enough that the preservation corpus spans the embedding
// space (the closed-form solves need a full-rank Gram matrix).
ErasureConfig small_config() {
    ErasureConfig config;
    config.concepts = {"cat", "dog", "bird", "fish", "tree", "car"};
    config.synonyms = {"kitty", "puppy", "fowl", "trout", "oak", "auto"};
    config.super_categories = {"ground", "ground", "sky",
                               "ground", "ground", "ground"};
    config.backgrounds = {"sky", "ground"};
    config.erase = {"cat"};
    config.retain = {"dog"};
    config.seed = 2;
    config.pretrain_steps = 3000;
    config.samples_per_prompt = 16;
    config.training_images = 4;
    return config;
}

fs::path work_dir() {
    static const fs::path dir = [] {
        fs::path d = fs::temp_directory_path() / "mace_test_pipeline";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

// The pretrained checkpoint shared by the stage tests; built once.
std::string model_dir() {
    static const std::string dir = [] {
        const std::string d = (work_dir() / "model").string();
        cmd_pretrain(small_config(), d);
        return d;
    }();
    return dir;
}

std::string refined_dir() {
    static const std::string dir = [] {
        const std::string d = (work_dir() / "refined").string();
        cmd_refine(small_config(), model_dir(), d);
        return d;
    }();
    return dir;
}

std::vector<char> file_bytes(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is.good());
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

} // namespace

TEST_CASE("config validation catches contradictions") {
    validate_config(default_demo_config());
    validate_config(small_config());

    ErasureConfig overlap = small_config();
    overlap.retain.push_back("cat");
    CHECK_THROWS_AS(validate_config(overlap), ConfigError);

    ErasureConfig unknown = small_config();
    unknown.erase = {"zebra"};
    CHECK_THROWS_AS(validate_config(unknown), ConfigError);

    ErasureConfig lonely = small_config();
    lonely.concepts = {"cat"};
    lonely.synonyms = {"kitty"};
    lonely.super_categories = {"ground"};
    CHECK_THROWS_AS(validate_config(lonely), ConfigError);

    ErasureConfig ragged = small_config();
    ragged.synonyms.pop_back();
    CHECK_THROWS_AS(validate_config(ragged), ConfigError);

    ErasureConfig stray_super = small_config();
    stray_super.super_categories[0] = "cat";
    CHECK_THROWS_AS(validate_config(stray_super), ConfigError);

    ErasureConfig neg = small_config();
    neg.lambda2 = -1.0;
    CHECK_THROWS_AS(validate_config(neg), ConfigError);

    ErasureConfig band = small_config();
    band.cfis.t1_frac = 0.5;
    band.cfis.t2_frac = 0.4;
    CHECK_THROWS_AS(validate_config(band), ConfigError);

    ErasureConfig rank = small_config();
    rank.lora.rank = 0;
    CHECK_THROWS_AS(validate_config(rank), ConfigError);
}

TEST_CASE("config file round-trip and hashing") {
    const fs::path path = work_dir() / "config.ini";
    ErasureConfig config = small_config();
    config.lambda2 = 12.5;
    config.cfis.gamma = 0.07;
    config.output_root = "out";
    std::ofstream(path) << serialize_config(config);

    ErasureConfig parsed = parse_config_file(path.string());
    CHECK(serialize_config(parsed) == serialize_config(config));
    CHECK(config_hash(parsed) == config_hash(config));

    // The hash tracks content.
    ErasureConfig other = config;
    other.lambda1 = 2.0;
    CHECK(config_hash(other) != config_hash(config));

    // Comments and blank lines are cosmetic.
    std::ofstream(path, std::ios::app) << "\n# trailing comment\n";
    CHECK(config_hash(parse_config_file(path.string())) == config_hash(config));

    CHECK_THROWS_AS(parse_config_file((work_dir() / "nope.ini").string()), IoError);

    const fs::path bad = work_dir() / "bad.ini";
    std::ofstream(bad) << "[model]\nseed = not_a_number\n";
    CHECK_THROWS_AS(parse_config_file(bad.string()), ConfigError);
    std::ofstream(bad) << "[mystery]\nkey = 1\n";
    CHECK_THROWS_AS(parse_config_file(bad.string()), ConfigError);
    std::ofstream(bad) << "[model]\nno equals sign here\n";
    CHECK_THROWS_AS(parse_config_file(bad.string()), ConfigError);
}

TEST_CASE("environment variable overrides the output root") {
    ErasureConfig config = small_config();
    config.output_root = "configured";
    unsetenv("MACE_DATA_DIR");
    CHECK(resolve_output_root(config) == "configured");
    setenv("MACE_DATA_DIR", "/tmp/elsewhere", 1);
    CHECK(resolve_output_root(config) == "/tmp/elsewhere");
    unsetenv("MACE_DATA_DIR");
}

TEST_CASE("run manifest round-trips") {
    RunManifest m;
    m.config_hash = "deadbeef00000000";
    m.version = "mace-toy 1.0";
    m.gates_passed = true;
    m.stages.push_back({"pretrain", "runs/model", 1.25});
    m.stages.push_back({"refine", "runs/refined", 0.5});
    m.notes["gate_summary"] = "acc_e=0.01";

    const fs::path path = work_dir() / "manifest.txt";
    m.save(path.string());
    RunManifest back = RunManifest::load(path.string());
    CHECK(back.config_hash == m.config_hash);
    CHECK(back.version == m.version);
    CHECK(back.gates_passed);
    REQUIRE(back.stages.size() == 2);
    CHECK(back.stages[0].name == "pretrain");
    CHECK(back.stages[1].output_path == "runs/refined");
    CHECK(back.notes.at("gate_summary") == "acc_e=0.01");
    CHECK_THROWS_AS(RunManifest::load((work_dir() / "no_manifest").string()), IoError);
}

TEST_CASE("pretraining stage is reproducible byte for byte") {
    const std::string first = model_dir();
    const std::string second = (work_dir() / "model_again").string();
    cmd_pretrain(small_config(), second);
    for (const char* f : {"wk.mat", "wv.mat", "head.mat", "embed.mat", "manifest.txt"})
        CHECK(file_bytes(fs::path(first) / f) == file_bytes(fs::path(second) / f));

    ErasureConfig bad = small_config();
    bad.retain.push_back("cat");
    CHECK_THROWS_AS(cmd_pretrain(bad, (work_dir() / "never").string()), ConfigError);
    CHECK(!fs::exists(work_dir() / "never"));
}

TEST_CASE("refinement edits only the prompt projections") {
    ToyModelState original = load_checkpoint(model_dir());
    ToyModelState refined = load_checkpoint(refined_dir());

    CHECK(non_edited_checksum(refined) == non_edited_checksum(original));
    CHECK(frobenius_dist(refined.denoiser.attn.wk, original.denoiser.attn.wk) > 1e-6);
    CHECK(frobenius_dist(refined.denoiser.attn.wv, original.denoiser.attn.wv) > 1e-6);
    CHECK(refined.denoiser.attn.wq == original.denoiser.attn.wq);
    CHECK(refined.denoiser.head == original.denoiser.head);

    // Empty erase list: refinement is the identity.
    ErasureConfig noop = small_config();
    noop.erase.clear();
    const std::string out = (work_dir() / "refined_noop").string();
    ToyModelState same = cmd_refine(noop, model_dir(), out);
    CHECK(same.denoiser.attn.wk == original.denoiser.attn.wk);
    CHECK(same.denoiser.attn.wv == original.denoiser.attn.wv);
}

TEST_CASE("lora training stage writes per-concept modules") {
    const std::string lora_dir = (work_dir() / "lora").string();
    auto pairs = cmd_train(small_config(), model_dir(), refined_dir(), lora_dir, 1);
    REQUIRE(pairs.size() == 1);
    CHECK(pairs[0].loss_curve.back() <= pairs[0].loss_curve.front());
    CHECK(fs::exists(fs::path(lora_dir) / "cat.key_b.mat"));
    CHECK(fs::exists(fs::path(lora_dir) / "cat.lora"));

    // Worker count cannot change results.
    const std::string lora_dir2 = (work_dir() / "lora_w4").string();
    auto pairs2 = cmd_train(small_config(), model_dir(), refined_dir(), lora_dir2, 4);
    CHECK(pairs2[0].key.b == pairs[0].key.b);
    CHECK(pairs2[0].key.d == pairs[0].key.d);
    CHECK(pairs2[0].value.b == pairs[0].value.b);
}

TEST_CASE("concept order does not change per-concept modules") {
    // Both concepts erased, in either order; training is value-isolated per
    // concept, so the modules must match bitwise.
    ErasureConfig fwd = small_config();
    fwd.erase = {"cat", "dog"};
    fwd.retain = {};
    ErasureConfig rev = fwd;
    rev.erase = {"dog", "cat"};

    const std::string ref_dir = (work_dir() / "refined_both").string();
    cmd_refine(fwd, model_dir(), ref_dir);

    const std::string da = (work_dir() / "lora_fwd").string();
    const std::string db = (work_dir() / "lora_rev").string();
    cmd_train(fwd, model_dir(), ref_dir, da, 2);
    cmd_train(rev, model_dir(), ref_dir, db, 2);
    for (const char* name : {"cat", "dog"}) {
        LoraPair pa = load_lora(da, name);
        LoraPair pb = load_lora(db, name);
        CHECK(pa.key.b == pb.key.b);
        CHECK(pa.key.d == pb.key.d);
        CHECK(pa.value.b == pb.value.b);
        CHECK(pa.value.d == pb.value.d);
    }
}

TEST_CASE("single-module naive fusion equals direct application") {
    const std::string lora_dir = (work_dir() / "lora").string();
    REQUIRE(fs::exists(fs::path(lora_dir) / "cat.lora")); // built above

    const std::string out = (work_dir() / "fused_naive_q1").string();
    ToyModelState fused = cmd_fuse(small_config(), model_dir(), refined_dir(),
                                   lora_dir, FusionMode::Naive, out);
    ToyModelState refined = load_checkpoint(refined_dir());
    LoraPair pair = load_lora(lora_dir, "cat");
    CHECK(frobenius_dist(fused.denoiser.attn.wk,
                         apply_lora(refined.denoiser.attn.wk, pair.key)) < 1e-15);
    CHECK(frobenius_dist(fused.denoiser.attn.wv,
                         apply_lora(refined.denoiser.attn.wv, pair.value)) < 1e-15);
    CHECK(non_edited_checksum(fused) == non_edited_checksum(refined));
}

TEST_CASE("fusing zero deltas onto an unedited model returns it") {
    // Zero LoRA factors with refined == original: every fusion target is W
    // itself, so the solve reproduces W up to solver precision.
    const std::string zero_dir = (work_dir() / "lora_zero").string();
    ToyModelState original = load_checkpoint(model_dir());
    LoraPair zero;
    SeededRng rng(1);
    zero.key = LoraModule::init(original.d2, original.d_attn, 1, LoraTarget::Key,
                                "cat", rng);
    zero.value = LoraModule::init(original.d2, original.d_attn, 1, LoraTarget::Value,
                                  "cat", rng);
    save_lora(zero_dir, "cat", zero, 1, 0);

    const std::string out = (work_dir() / "fused_zero").string();
    RunManifest manifest;
    ToyModelState fused = cmd_fuse(small_config(), model_dir(), model_dir(), zero_dir,
                                   FusionMode::ClosedForm, out, &manifest);
    CHECK(frobenius_dist(fused.denoiser.attn.wk, original.denoiser.attn.wk) /
              std::sqrt(frobenius_sq(original.denoiser.attn.wk)) <
          1e-8);
    CHECK(frobenius_dist(fused.denoiser.attn.wv, original.denoiser.attn.wv) /
              std::sqrt(frobenius_sq(original.denoiser.attn.wv)) <
          1e-8);

    // Both objectives land in the manifest for comparison.
    CHECK(manifest.notes.count("fusion_objective_closed_form_wk") == 1);
    CHECK(manifest.notes.count("fusion_objective_naive_wk") == 1);
    CHECK(std::stod(manifest.notes.at("fusion_objective_closed_form_wk")) <=
          std::stod(manifest.notes.at("fusion_objective_naive_wk")) + 1e-9);
}

TEST_CASE("evaluation stage writes a loadable report") {
    const std::string report_dir = (work_dir() / "eval_identity").string();
    EvalReport report =
        cmd_eval(small_config(), model_dir(), model_dir(), report_dir);
    CHECK(report.config_hash == config_hash(small_config()));
    CHECK(report.seed == 2);
    CHECK(report.erased.size() == 1);
    CHECK(report.erased[0].acc_e >= 0.8); // identity edit keeps the concept
    CHECK(report.acc_s_mean >= 0.8);

    EvalReport loaded = load_eval_report(report_dir);
    CHECK(loaded.acc_e_mean == report.acc_e_mean);
    CHECK(loaded.acc_s_mean == report.acc_s_mean);

    CHECK_THROWS_AS(cmd_eval(small_config(), (work_dir() / "ghost").string(),
                             model_dir(), report_dir),
                    IoError);
}
