#include "mace/lora.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "mace/linalg.hpp"

namespace mace {

LoraModule LoraModule::init(std::size_t d2, std::size_t d_attn, std::size_t rank,
                            LoraTarget target, const std::string& concept_id,
                            SeededRng& rng) {
    if (rank == 0) throw ConfigError("LoraModule::init: rank must be positive");
    LoraModule m;
    m.b = DenseMatrix(d2, rank); // zeros, so the initial delta vanishes
    m.d = DenseMatrix::random_normal(rank, d_attn, rng, 0.01);
    m.rank = rank;
    m.target = target;
    m.concept_id = concept_id;
    return m;
}

DenseMatrix apply_lora(const DenseMatrix& w, const LoraModule& lora) {
    if (lora.b.rows != w.rows || lora.d.cols != w.cols || lora.b.cols != lora.d.rows)
        throw DimensionMismatch("apply_lora: factor shapes do not match W");
    return add(w, matmul(lora.b, lora.d));
}

CfisDistribution make_cfis(int T, double t1, double t2, double gamma) {
    if (T < 1) throw ConfigError("make_cfis: T must be >= 1");
    if (!(t1 < t2)) throw ConfigError("make_cfis: requires t1 < t2");
    CfisDistribution dist;
    dist.T = T;
    dist.t1 = t1;
    dist.t2 = t2;
    dist.gamma = gamma;
    dist.pdf.assign(static_cast<std::size_t>(T) + 1, 0.0);
    dist.cdf.assign(static_cast<std::size_t>(T) + 1, 0.0);
    double z = 0.0;
    for (int t = 1; t <= T; ++t) {
        const double v = sigmoid(gamma * (t - t1)) - sigmoid(gamma * (t - t2));
        dist.pdf[static_cast<std::size_t>(t)] = v;
        z += v;
    }
    if (z <= 0.0) throw ConfigError("make_cfis: degenerate distribution");
    double acc = 0.0;
    for (int t = 1; t <= T; ++t) {
        dist.pdf[static_cast<std::size_t>(t)] /= z;
        acc += dist.pdf[static_cast<std::size_t>(t)];
        dist.cdf[static_cast<std::size_t>(t)] = acc;
    }
    dist.cdf[static_cast<std::size_t>(T)] = 1.0;
    return dist;
}

CfisDistribution make_cfis_fractions(int T, double t1_frac, double t2_frac,
                                     double gamma_at_1000) {
    return make_cfis(T, t1_frac * T, t2_frac * T, gamma_at_1000 * 1000.0 / T);
}

CfisDistribution make_uniform_timesteps(int T) {
    if (T < 1) throw ConfigError("make_uniform_timesteps: T must be >= 1");
    CfisDistribution dist;
    dist.T = T;
    dist.t1 = 1;
    dist.t2 = T;
    dist.gamma = 0.0;
    dist.pdf.assign(static_cast<std::size_t>(T) + 1, 1.0 / T);
    dist.pdf[0] = 0.0;
    dist.cdf.assign(static_cast<std::size_t>(T) + 1, 0.0);
    for (int t = 1; t <= T; ++t)
        dist.cdf[static_cast<std::size_t>(t)] = static_cast<double>(t) / T;
    return dist;
}

double cfis_pdf(const CfisDistribution& dist, int t) {
    if (t < 1 || t > dist.T) throw TimestepOutOfRange("cfis_pdf: t outside [1, T]");
    return dist.pdf[static_cast<std::size_t>(t)];
}

int cfis_sample(const CfisDistribution& dist, SeededRng& rng) {
    const double u = rng.uniform();
    const auto it = std::lower_bound(dist.cdf.begin() + 1, dist.cdf.end(), u);
    const auto t = static_cast<int>(it - dist.cdf.begin());
    return std::min(t, dist.T);
}

double masked_column_energy(const DenseMatrix& a, const std::vector<double>& mask_flat,
                            const std::vector<std::size_t>& mask_token_set) {
    if (mask_flat.size() != a.rows)
        throw DimensionMismatch("masked_column_energy: mask length != map rows");
    double loss = 0.0;
    for (std::size_t i : mask_token_set) {
        if (i >= a.cols)
            throw DimensionMismatch("masked_column_energy: token index out of range");
        for (std::size_t p = 0; p < a.rows; ++p) {
            const double v = a.at(p, i) * mask_flat[p];
            loss += v * v;
        }
    }
    return loss;
}

DenseMatrix lora_attention_map(const DenseMatrix& q, const DenseMatrix& embeddings,
                               const DenseMatrix& wk, const LoraModule& key_lora) {
    const DenseMatrix k = matmul(embeddings, apply_lora(wk, key_lora));
    DenseMatrix logits = matmul_transB(q, k);
    const double inv = 1.0 / std::sqrt(static_cast<double>(wk.cols));
    for (auto& x : logits.data) x *= inv;
    return softmax_rows(logits);
}

double masked_attention_loss(const DenseMatrix& q, const DenseMatrix& embeddings,
                             const DenseMatrix& wk, const LoraModule& key_lora,
                             const std::vector<double>& mask_flat,
                             const std::vector<std::size_t>& token_set) {
    return masked_column_energy(lora_attention_map(q, embeddings, wk, key_lora),
                                mask_flat, token_set);
}

EraseGrads masked_attention_grads(const DenseMatrix& q, const DenseMatrix& embeddings,
                                  const DenseMatrix& wk, const LoraModule& key_lora,
                                  const LoraModule& value_lora,
                                  const std::vector<double>& mask_flat,
                                  const std::vector<std::size_t>& token_set) {
    const DenseMatrix a = lora_attention_map(q, embeddings, wk, key_lora);
    if (mask_flat.size() != a.rows)
        throw DimensionMismatch("masked_attention_grads: mask length != map rows");

    DenseMatrix da(a.rows, a.cols);
    for (std::size_t i : token_set) {
        if (i >= a.cols)
            throw DimensionMismatch("masked_attention_grads: token index out of range");
        for (std::size_t p = 0; p < a.rows; ++p)
            da.at(p, i) = 2.0 * a.at(p, i) * mask_flat[p] * mask_flat[p];
    }

    const DenseMatrix dz = softmax_backward_rows(a, da);
    DenseMatrix dk = matmul_transA(dz, q);
    const double inv = 1.0 / std::sqrt(static_cast<double>(wk.cols));
    for (auto& x : dk.data) x *= inv;
    const DenseMatrix dw = matmul_transA(embeddings, dk);

    EraseGrads g;
    g.key_b = matmul_transB(dw, key_lora.d);
    g.key_d = matmul_transA(key_lora.b, dw);
    // The map never reads the value projection, so its factors get exactly
    // zero gradient; kept explicit so callers can update both uniformly.
    g.value_b = DenseMatrix(value_lora.b.rows, value_lora.b.cols);
    g.value_d = DenseMatrix(value_lora.d.rows, value_lora.d.cols);
    return g;
}

namespace {

std::vector<double> flat_mask(const DenseMatrix& mask) {
    return mask.data;
}

DenseMatrix item_queries(const ToyModelState& state, const EraseItem& item) {
    const DenseMatrix z_t = forward_diffuse(item.latent, item.t, item.eps, state.schedule);
    return matmul(patch_features(z_t), state.denoiser.attn.wq);
}

} // namespace

double erasure_loss(const ToyModelState& state, const LoraModule& key_lora,
                    const std::vector<EraseItem>& batch,
                    const std::vector<std::size_t>& token_set) {
    if (batch.empty()) return 0.0;
    double loss = 0.0;
    for (const auto& item : batch)
        loss += masked_attention_loss(item_queries(state, item), item.embeddings,
                                      state.denoiser.attn.wk, key_lora,
                                      flat_mask(item.mask), token_set);
    return loss / static_cast<double>(batch.size());
}

EraseGrads erasure_loss_grad(const ToyModelState& state, const LoraModule& key_lora,
                             const LoraModule& value_lora,
                             const std::vector<EraseItem>& batch,
                             const std::vector<std::size_t>& token_set) {
    EraseGrads total;
    total.key_b = DenseMatrix(key_lora.b.rows, key_lora.b.cols);
    total.key_d = DenseMatrix(key_lora.d.rows, key_lora.d.cols);
    total.value_b = DenseMatrix(value_lora.b.rows, value_lora.b.cols);
    total.value_d = DenseMatrix(value_lora.d.rows, value_lora.d.cols);
    if (batch.empty()) return total;
    for (const auto& item : batch) {
        const EraseGrads g =
            masked_attention_grads(item_queries(state, item), item.embeddings,
                                   state.denoiser.attn.wk, key_lora, value_lora,
                                   flat_mask(item.mask), token_set);
        add_in_place(total.key_b, g.key_b);
        add_in_place(total.key_d, g.key_d);
    }
    const double inv_n = 1.0 / static_cast<double>(batch.size());
    for (auto& x : total.key_b.data) x *= inv_n;
    for (auto& x : total.key_d.data) x *= inv_n;
    return total;
}

LoraPair train_lora(const ToyModelState& state, const ConceptSpec& cspec,
                    const std::vector<TrainingExample>& training_set,
                    const EraseTrainConfig& config, const CfisDistribution& cfis,
                    SeededRng& rng) {
    if (config.steps < 1) throw ConfigError("train_lora: steps must be >= 1");
    if (config.token_set.empty()) throw ConfigError("train_lora: empty token set");
    if (training_set.empty()) throw ConfigError("train_lora: empty training set");
    if (cfis.T != state.schedule.T)
        throw ConfigError("train_lora: timestep distribution scale != model schedule");

    SeededRng r_init = rng.derive(0x30);
    SeededRng r_batch = rng.derive(0x31);
    SeededRng r_eval = rng.derive(0x32);

    LoraPair pair;
    pair.key = LoraModule::init(state.d2, state.d_attn, config.rank, LoraTarget::Key,
                                cspec.name, r_init);
    pair.value = LoraModule::init(state.d2, state.d_attn, config.rank, LoraTarget::Value,
                                  cspec.name, r_init);

    auto make_batch = [&](SeededRng& r) {
        std::vector<EraseItem> batch;
        batch.reserve(training_set.size());
        for (const auto& ex : training_set) {
            EraseItem item;
            item.latent = ex.latent;
            item.embeddings = encode_prompt(state.vocab, state.encoder, ex.prompt);
            item.mask = ex.mask;
            item.t = cfis_sample(cfis, r);
            item.eps = DenseMatrix(ex.latent.rows, ex.latent.cols);
            for (auto& x : item.eps.data) x = r.normal();
            batch.push_back(std::move(item));
        }
        return batch;
    };

    // Fixed held-out noise draw so the improvement check compares like with
    // like before and after training.
    const std::vector<EraseItem> eval_batch = make_batch(r_eval);
    const double initial = erasure_loss(state, pair.key, eval_batch, config.token_set);
    pair.loss_curve.push_back(initial);
    // Nothing to erase: the masked attention is already below the stopping
    // level, so the zero-initialized modules are returned as-is.
    if (config.stop_loss > 0.0 && initial <= config.stop_loss) return pair;

    // Adam rather than plain gradient descent: the post-softmax loss has
    // near-saturated plateaus where raw gradients all but vanish.
    AdamOptimizer opt_kb(pair.key.b), opt_kd(pair.key.d);
    AdamOptimizer opt_vb(pair.value.b), opt_vd(pair.value.d);
    for (int step = 0; step < config.steps; ++step) {
        const std::vector<EraseItem> batch = make_batch(r_batch);
        const EraseGrads g =
            erasure_loss_grad(state, pair.key, pair.value, batch, config.token_set);
        if (config.tune_key) {
            opt_kb.update(pair.key.b, g.key_b, config.learning_rate);
            opt_kd.update(pair.key.d, g.key_d, config.learning_rate);
        }
        if (config.tune_value) {
            opt_vb.update(pair.value.b, g.value_b, config.learning_rate);
            opt_vd.update(pair.value.d, g.value_d, config.learning_rate);
        }
        pair.loss_curve.push_back(
            erasure_loss(state, pair.key, eval_batch, config.token_set));
        if (config.stop_loss > 0.0 && pair.loss_curve.back() <= config.stop_loss)
            break;
    }

    if (pair.loss_curve.back() >= initial)
        throw DidNotImprove("train_lora: loss did not improve for concept '" +
                            cspec.name + "'");
    return pair;
}

void save_lora(const std::string& dir, const std::string& name, const LoraPair& pair,
               std::uint64_t seed, int steps) {
    std::filesystem::create_directories(dir);
    write_matrix(dir + "/" + name + ".key_b.mat", pair.key.b);
    write_matrix(dir + "/" + name + ".key_d.mat", pair.key.d);
    write_matrix(dir + "/" + name + ".value_b.mat", pair.value.b);
    write_matrix(dir + "/" + name + ".value_d.mat", pair.value.d);
    std::ofstream os(dir + "/" + name + ".lora");
    if (!os) throw IoError("cannot write lora manifest: " + name);
    os << "concept_id = " << pair.key.concept_id << "\n";
    os << "rank = " << pair.key.rank << "\n";
    os << "seed = " << seed << "\n";
    os << "steps = " << steps << "\n";
    os << "loss_initial = " << (pair.loss_curve.empty() ? 0.0 : pair.loss_curve.front())
       << "\n";
    os << "loss_final = " << (pair.loss_curve.empty() ? 0.0 : pair.loss_curve.back())
       << "\n";
}

LoraPair load_lora(const std::string& dir, const std::string& name) {
    LoraPair pair;
    pair.key.b = read_matrix(dir + "/" + name + ".key_b.mat");
    pair.key.d = read_matrix(dir + "/" + name + ".key_d.mat");
    pair.value.b = read_matrix(dir + "/" + name + ".value_b.mat");
    pair.value.d = read_matrix(dir + "/" + name + ".value_d.mat");
    pair.key.target = LoraTarget::Key;
    pair.value.target = LoraTarget::Value;
    pair.key.rank = pair.key.b.cols;
    pair.value.rank = pair.value.b.cols;
    std::ifstream is(dir + "/" + name + ".lora");
    if (!is) throw IoError("cannot read lora manifest: " + name);
    std::string line;
    while (std::getline(is, line)) {
        const auto eq = line.find(" = ");
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 3);
        if (key == "concept_id") {
            pair.key.concept_id = value;
            pair.value.concept_id = value;
        }
    }
    return pair;
}

} // namespace mace
