#include "mace/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mace/linalg.hpp"

namespace mace {

namespace {

void require_fraction(double x, const char* what) {
    if (!(x >= 0.0 && x <= 1.0))
        throw UndefinedMean(std::string(what) + " outside [0, 1]");
}

// Mean-centered normalized correlation between a latent and a class
// template. Only the template is centered: latents keep their DC component
// so a flat output does not spuriously match a structured class.
double centered_correlation(const DenseMatrix& z, const DenseMatrix& pattern) {
    double mean = 0.0;
    for (double x : pattern.data) mean += x;
    mean /= static_cast<double>(pattern.data.size());
    double dot = 0.0, pn = 0.0;
    for (std::size_t i = 0; i < z.data.size(); ++i) {
        const double c = pattern.data[i] - mean;
        dot += z.data[i] * c;
        pn += c * c;
    }
    const double zn = std::sqrt(frobenius_sq(z));
    return dot / (std::max(zn, 1e-12) * std::sqrt(std::max(pn, 1e-24)));
}

std::string format_double(double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

} // namespace

double harmonic_mean_object(double acc_e, double acc_s, double acc_g) {
    require_fraction(acc_e, "acc_e");
    require_fraction(acc_s, "acc_s");
    require_fraction(acc_g, "acc_g");
    if (acc_e >= 1.0) throw UndefinedMean("acc_e = 1: erased concept fully retained");
    if (acc_s <= 0.0) throw UndefinedMean("acc_s = 0: no specificity left");
    if (acc_g >= 1.0) throw UndefinedMean("acc_g = 1: synonyms fully retained");
    return 3.0 / (1.0 / (1.0 - acc_e) + 1.0 / acc_s + 1.0 / (1.0 - acc_g));
}

double harmonic_mean_celebrity(double acc_e, double acc_s) {
    require_fraction(acc_e, "acc_e");
    require_fraction(acc_s, "acc_s");
    if (acc_e >= 1.0) throw UndefinedMean("acc_e = 1: erased concept fully retained");
    if (acc_s <= 0.0) throw UndefinedMean("acc_s = 0: no specificity left");
    return 2.0 / (1.0 / (1.0 - acc_e) + 1.0 / acc_s);
}

double style_gap(double score_retained, double score_erased) {
    return score_retained - score_erased;
}

std::size_t ToyClassifier::classify(const DenseMatrix& latent) const {
    double best = -2.0;
    std::size_t best_index = 0;
    for (std::size_t k = 0; k < centroids.size(); ++k) {
        const double c = centered_correlation(latent, centroids[k]);
        if (c > best) {
            best = c;
            best_index = k;
        }
    }
    return best_index;
}

std::size_t ToyClassifier::label_index(const std::string& name) const {
    for (std::size_t k = 0; k < labels.size(); ++k)
        if (labels[k] == name) return k;
    throw UnknownToken("classifier has no class '" + name + "'");
}

ToyClassifier fit_toy_classifier(const ToyModelState& model, int samples_per_concept,
                                 double gate_accuracy, SeededRng& rng) {
    if (samples_per_concept < 1)
        throw ConfigError("fit_toy_classifier: samples_per_concept must be >= 1");

    std::vector<const ConceptSpec*> classes;
    for (const auto& c : model.concepts) classes.push_back(&c);
    for (const auto& b : model.backgrounds) classes.push_back(&b);

    ToyClassifier clf;
    for (std::size_t k = 0; k < classes.size(); ++k) {
        const std::vector<std::string> prompt = {"a", "photo", "of", classes[k]->name};
        DenseMatrix centroid(kLatentSize, kLatentSize);
        for (int s = 0; s < samples_per_concept; ++s) {
            SeededRng r = rng.derive(0xF17'0000 + k * 1024 + static_cast<std::uint64_t>(s));
            add_in_place(centroid, ddim_sample(model, prompt, 20, r));
        }
        for (auto& x : centroid.data) x /= static_cast<double>(samples_per_concept);
        clf.labels.push_back(classes[k]->name);
        clf.centroids.push_back(std::move(centroid));
    }

    // Held-out gate on the concept classes only; backgrounds are reference
    // classes, not gated content.
    for (std::size_t k = 0; k < model.concepts.size(); ++k) {
        const std::vector<std::string> prompt = {"a", "photo", "of", clf.labels[k]};
        int hits = 0;
        for (int s = 0; s < samples_per_concept; ++s) {
            SeededRng r = rng.derive(0x6A7E'0000 + k * 1024 + static_cast<std::uint64_t>(s));
            if (clf.classify(ddim_sample(model, prompt, 20, r)) == k) ++hits;
        }
        const double acc = static_cast<double>(hits) / samples_per_concept;
        if (acc < gate_accuracy)
            throw ClassifierGateFailed("classifier gate failed for concept '" +
                                       clf.labels[k] + "': accuracy " +
                                       std::to_string(acc));
    }
    return clf;
}

void recompute_means(EvalReport& report) {
    if (!report.erased.empty()) {
        double se = 0.0, sg = 0.0;
        int ng = 0;
        for (const auto& t : report.erased) {
            se += t.acc_e;
            if (t.acc_g) {
                sg += *t.acc_g;
                ++ng;
            }
        }
        report.acc_e_mean = se / static_cast<double>(report.erased.size());
        report.acc_g_mean =
            ng > 0 ? std::optional<double>(sg / ng) : std::nullopt;
    } else {
        report.acc_e_mean = 0.0;
        report.acc_g_mean.reset();
    }
    if (!report.retained.empty()) {
        double ss = 0.0;
        for (const auto& r : report.retained) ss += r.accuracy;
        report.acc_s_mean = ss / static_cast<double>(report.retained.size());
    } else {
        report.acc_s_mean = 0.0;
    }

    report.mean_without_generality.reset();
    report.mean_with_generality.reset();
    if (report.erased.empty() || report.retained.empty()) return;
    try {
        report.mean_without_generality =
            harmonic_mean_celebrity(report.acc_e_mean, report.acc_s_mean);
    } catch (const UndefinedMean&) {
    }
    if (report.acc_g_mean) {
        try {
            report.mean_with_generality = harmonic_mean_object(
                report.acc_e_mean, report.acc_s_mean, *report.acc_g_mean);
        } catch (const UndefinedMean&) {
        }
    }
}

EvalReport run_erasure_eval(const ToyModelState& model_before,
                            const ToyModelState& model_after,
                            const std::vector<std::string>& erase_set,
                            const std::vector<std::string>& retain_set,
                            const std::map<std::string, std::string>& synonym_map,
                            int samples_per_prompt, SeededRng& rng) {
    if (samples_per_prompt < 1)
        throw ConfigError("run_erasure_eval: samples_per_prompt must be >= 1");

    SeededRng clf_rng = rng.derive(0xC1F);
    const ToyClassifier clf = fit_toy_classifier(
        model_before, std::max(samples_per_prompt, 20), 0.95, clf_rng);

    auto accuracy_under = [&](const std::string& prompt_token,
                              const std::string& target_label,
                              std::uint64_t salt_base) {
        const std::vector<std::string> prompt = {"a", "photo", "of", prompt_token};
        const std::size_t target = clf.label_index(target_label);
        int hits = 0;
#pragma omp parallel for schedule(static) reduction(+ : hits)
        for (int s = 0; s < samples_per_prompt; ++s) {
            SeededRng r = rng.derive(salt_base + static_cast<std::uint64_t>(s));
            if (clf.classify(ddim_sample(model_after, prompt, 20, r)) == target)
                ++hits;
        }
        return static_cast<double>(hits) / samples_per_prompt;
    };

    EvalReport report;
    report.seed = rng.seed();
    report.samples_per_prompt = samples_per_prompt;

    for (std::size_t i = 0; i < erase_set.size(); ++i) {
        AccuracyTriple triple;
        triple.name = erase_set[i];
        triple.acc_e = accuracy_under(erase_set[i], erase_set[i], 0xE000 + i * 4096);
        const auto syn = synonym_map.find(erase_set[i]);
        if (syn != synonym_map.end())
            triple.acc_g = accuracy_under(syn->second, erase_set[i], 0x6000 + i * 4096);
        report.erased.push_back(std::move(triple));
    }
    for (std::size_t i = 0; i < retain_set.size(); ++i) {
        RetainedResult res;
        res.name = retain_set[i];
        res.accuracy = accuracy_under(retain_set[i], retain_set[i], 0x5000 + i * 4096);
        res.samples = samples_per_prompt;
        report.retained.push_back(std::move(res));
    }
    recompute_means(report);
    for (auto& t : report.erased) t.acc_s = report.acc_s_mean;
    return report;
}

void save_eval_report(const std::string& dir, const EvalReport& report) {
    std::filesystem::create_directories(dir);
    std::ofstream os(dir + "/report.txt");
    if (!os) throw IoError("cannot write eval report: " + dir);
    os << "[run]\n";
    os << "seed = " << report.seed << "\n";
    os << "config_hash = " << report.config_hash << "\n";
    os << "samples_per_prompt = " << report.samples_per_prompt << "\n";
    os << "\n[accuracy]\n";
    os << "acc_e_mean = " << format_double(report.acc_e_mean) << "\n";
    os << "acc_s_mean = " << format_double(report.acc_s_mean) << "\n";
    if (report.acc_g_mean)
        os << "acc_g_mean = " << format_double(*report.acc_g_mean) << "\n";
    os << "\n[means]\n";
    if (report.mean_without_generality)
        os << "without_generality = " << format_double(*report.mean_without_generality)
           << "\n";
    if (report.mean_with_generality)
        os << "with_generality = " << format_double(*report.mean_with_generality)
           << "\n";

    std::ofstream csv(dir + "/report.csv");
    if (!csv) throw IoError("cannot write eval csv: " + dir);
    csv << "kind,name,acc_e,acc_s,acc_g,samples\n";
    for (const auto& t : report.erased) {
        csv << "erased," << t.name << "," << format_double(t.acc_e) << ","
            << format_double(t.acc_s) << ",";
        if (t.acc_g) csv << format_double(*t.acc_g);
        csv << "," << report.samples_per_prompt << "\n";
    }
    for (const auto& r : report.retained)
        csv << "retained," << r.name << ",," << format_double(r.accuracy) << ",,"
            << r.samples << "\n";
}

EvalReport load_eval_report(const std::string& dir) {
    std::ifstream is(dir + "/report.txt");
    if (!is) throw IoError("cannot read eval report: " + dir);
    EvalReport report;
    std::string line;
    while (std::getline(is, line)) {
        const auto eq = line.find(" = ");
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 3);
        if (key == "seed") report.seed = std::stoull(value);
        else if (key == "config_hash") report.config_hash = value;
        else if (key == "samples_per_prompt") report.samples_per_prompt = std::stoi(value);
        else if (key == "acc_e_mean") report.acc_e_mean = std::stod(value);
        else if (key == "acc_s_mean") report.acc_s_mean = std::stod(value);
        else if (key == "acc_g_mean") report.acc_g_mean = std::stod(value);
        else if (key == "without_generality")
            report.mean_without_generality = std::stod(value);
        else if (key == "with_generality")
            report.mean_with_generality = std::stod(value);
    }

    std::ifstream csv(dir + "/report.csv");
    if (!csv) throw IoError("cannot read eval csv: " + dir);
    std::getline(csv, line); // header
    while (std::getline(csv, line)) {
        std::stringstream ss(line);
        std::string kind, name, e, s, g, n;
        std::getline(ss, kind, ',');
        std::getline(ss, name, ',');
        std::getline(ss, e, ',');
        std::getline(ss, s, ',');
        std::getline(ss, g, ',');
        std::getline(ss, n, ',');
        if (kind == "erased") {
            AccuracyTriple t;
            t.name = name;
            t.acc_e = std::stod(e);
            t.acc_s = std::stod(s);
            if (!g.empty()) t.acc_g = std::stod(g);
            report.erased.push_back(std::move(t));
        } else if (kind == "retained") {
            RetainedResult r;
            r.name = name;
            r.accuracy = std::stod(s);
            r.samples = std::stoi(n);
            report.retained.push_back(std::move(r));
        }
    }
    return report;
}

} // namespace mace
