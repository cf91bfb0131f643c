// Command-line front end for the erasure pipeline.
//
// Verbs: pretrain, refine, train, fuse, eval, demo. Every verb takes the
// shared flags --config, --seed, --workers and --dry-run; stage inputs and
// outputs are directories under the output root (the [output] root setting,
// overridable with MACE_DATA_DIR).
//
// Exit codes: 0 success, 2 configuration/input error, 3 numerical failure,
// 4 quality gate failure.
#include <cstdio>
#include <exception>
#include <string>

#include "CLI11.hpp"
#include "mace/pipeline.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitGate = 4;

struct CliOptions {
    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int workers = 4;
    bool dry_run = false;
    std::string fusion = "closed_form";
};

mace::ErasureConfig load_config(const CliOptions& opts) {
    mace::ErasureConfig config = opts.config_path.empty()
                                     ? mace::default_demo_config()
                                     : mace::parse_config_file(opts.config_path);
    if (opts.seed_set) config.seed = opts.seed;
    mace::validate_config(config);
    return config;
}

void print_plan(const char* verb, const mace::ErasureConfig& config,
                const std::string& root, const CliOptions& opts) {
    std::printf("dry run: %s\n", verb);
    std::printf("  config      %s\n",
                opts.config_path.empty() ? "(built-in demo)" : opts.config_path.c_str());
    std::printf("  config hash %s\n", mace::config_hash(config).c_str());
    std::printf("  seed        %llu\n", static_cast<unsigned long long>(config.seed));
    std::printf("  workers     %d\n", opts.workers);
    std::printf("  output root %s\n", root.c_str());
    std::printf("  concepts    %zu (%zu to erase, %zu to retain)\n",
                config.concepts.size(), config.erase.size(), config.retain.size());
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"mace: mass concept erasure on a toy diffusion model"};
    app.require_subcommand(1);

    CliOptions opts;
    app.add_option("--config", opts.config_path, "configuration file path");
    app.add_option("--seed", opts.seed, "override the configured seed");
    app.add_option("--workers", opts.workers, "worker threads for training")
        ->check(CLI::PositiveNumber);
    app.add_flag("--dry-run", opts.dry_run,
                 "validate the configuration and print the plan without running");

    CLI::App* pretrain = app.add_subcommand("pretrain", "train the base model");
    CLI::App* refine = app.add_subcommand(
        "refine", "closed-form projection refinement for the erased concepts");
    CLI::App* train = app.add_subcommand(
        "train", "per-concept low-rank suppression modules");
    CLI::App* fuse = app.add_subcommand("fuse", "merge the modules into one model");
    fuse->add_option("--mode", opts.fusion, "closed_form or naive")
        ->check(CLI::IsMember({"closed_form", "naive"}));
    CLI::App* eval = app.add_subcommand("eval", "score the fused model");
    CLI::App* demo =
        app.add_subcommand("demo", "run the full pipeline and check the gates");

    // Let the shared flags appear after the verb as well as before it.
    for (CLI::App* sub : {pretrain, refine, train, fuse, eval, demo})
        sub->fallthrough();

    CLI11_PARSE(app, argc, argv);
    opts.seed_set = app.count("--seed") > 0;

    try {
        const mace::ErasureConfig config = load_config(opts);
        const std::string root = mace::resolve_output_root(config);
        const std::string model_dir = root + "/model";
        const std::string refined_dir = root + "/refined";
        const std::string lora_dir = root + "/lora";
        const std::string report_dir = root + "/eval";

        const std::string verb = app.get_subcommands().front()->get_name();
        if (opts.dry_run) {
            print_plan(verb.c_str(), config, root, opts);
            return kExitOk;
        }

        if (pretrain->parsed()) {
            mace::cmd_pretrain(config, model_dir);
            std::printf("pretrained model written to %s\n", model_dir.c_str());
        } else if (refine->parsed()) {
            mace::cmd_refine(config, model_dir, refined_dir);
            std::printf("refined model written to %s\n", refined_dir.c_str());
        } else if (train->parsed()) {
            const auto pairs = mace::cmd_train(config, model_dir, refined_dir,
                                               lora_dir, opts.workers);
            std::printf("trained %zu suppression modules into %s\n", pairs.size(),
                        lora_dir.c_str());
        } else if (fuse->parsed()) {
            const auto mode = opts.fusion == "naive" ? mace::FusionMode::Naive
                                                     : mace::FusionMode::ClosedForm;
            const std::string out =
                root + (opts.fusion == "naive" ? "/fused_naive" : "/fused_closed_form");
            mace::cmd_fuse(config, model_dir, refined_dir, lora_dir, mode, out);
            std::printf("fused model written to %s\n", out.c_str());
        } else if (eval->parsed()) {
            const mace::EvalReport report =
                mace::cmd_eval(config, model_dir, root + "/fused_closed_form",
                               report_dir);
            std::printf("acc_e=%.4f acc_s=%.4f", report.acc_e_mean,
                        report.acc_s_mean);
            if (report.acc_g_mean) std::printf(" acc_g=%.4f", *report.acc_g_mean);
            std::printf("  (report in %s)\n", report_dir.c_str());
        } else if (demo->parsed()) {
            mace::DemoGates gates;
            const mace::RunManifest manifest =
                mace::cmd_demo(config, root, opts.workers, &gates);
            std::printf("%s\n", manifest.notes.at("gate_summary").c_str());
            if (!gates.passed) {
                std::fprintf(stderr, "error: quality gates not met\n");
                return kExitGate;
            }
            std::printf("all gates passed; artifacts under %s\n", root.c_str());
        }
        return kExitOk;
    } catch (const mace::ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitConfig;
    } catch (const mace::IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitConfig;
    } catch (const mace::ClassifierGateFailed& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitGate;
    } catch (const mace::DidNotConverge& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitNumerical;
    } catch (const mace::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitNumerical;
    }
}
