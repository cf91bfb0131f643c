#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <vector>

#include "mace/linalg.hpp"
#include "mace/lora.hpp"
#include "mace/toy_model.hpp"

using namespace mace;

namespace {

ToyModelSpec small_spec() {
    ToyModelSpec spec;
    spec.concept_names = {"cat", "dog"};
    spec.synonyms = {"kitty", "puppy"};
    spec.super_categories = {"ground", "ground"};
    spec.background_names = {"sky", "ground"};
    spec.seed = 2;
    return spec;
}

const ToyModelState& pretrained_small() {
    static const ToyModelState state = [] {
        ToyModelState st = make_toy_model(small_spec());
        PretrainConfig cfg;
        cfg.steps = 3000;
        SeededRng rng(2);
        pretrain_toy(st, cfg, rng);
        return st;
    }();
    return state;
}

} // namespace

TEST_CASE("lora module init and application") {
    SeededRng rng(7);
    LoraModule m = LoraModule::init(6, 4, 1, LoraTarget::Key, "cat", rng);
    CHECK(m.b.rows == 6);
    CHECK(m.b.cols == 1);
    CHECK(m.d.rows == 1);
    CHECK(m.d.cols == 4);
    CHECK(max_abs(m.b) == 0.0); // initial delta is exactly zero
    CHECK(max_abs(m.d) > 0.0);
    CHECK(max_abs(m.d) < 0.1);
    CHECK_THROWS_AS(LoraModule::init(6, 4, 0, LoraTarget::Key, "cat", rng),
                    ConfigError);

    DenseMatrix w = DenseMatrix::random_normal(6, 4, rng);
    CHECK(apply_lora(w, m) == w); // zero B: W comes back bitwise

    // Full-rank constructed cancellation: B D = -W zeroes the projection.
    LoraModule cancel;
    cancel.rank = 4;
    cancel.b = scale(w, -1.0);
    cancel.d = DenseMatrix::identity(4);
    CHECK(max_abs(apply_lora(w, cancel)) < 1e-15);

    // Random rank-1 case against the outer-product loop.
    LoraModule m2 = m;
    for (auto& x : m2.b.data) x = rng.normal();
    DenseMatrix modded = apply_lora(w, m2);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 4; ++j)
            CHECK(modded.at(i, j) ==
                  doctest::Approx(w.at(i, j) + m2.b.at(i, 0) * m2.d.at(0, j))
                      .epsilon(1e-13));

    LoraModule wrong = m;
    wrong.b = DenseMatrix::zeros(5, 1);
    CHECK_THROWS_AS(apply_lora(w, wrong), DimensionMismatch);
}

TEST_CASE("timestep distribution at the reference scale") {
    // Reference parameters: T = 1000, band [200, 400], temperature 0.05.
    CfisDistribution dist = make_cfis(1000, 200.0, 400.0, 0.05);

    double total = 0.0;
    for (int t = 1; t <= 1000; ++t) total += cfis_pdf(dist, t);
    CHECK(std::fabs(total - 1.0) <= 1e-12);

    // Argmax at the band midpoint, equal density at the band edges.
    int argmax = 1;
    for (int t = 2; t <= 1000; ++t)
        if (cfis_pdf(dist, t) > cfis_pdf(dist, argmax)) argmax = t;
    CHECK(argmax == 300);
    CHECK(std::fabs(cfis_pdf(dist, 200) - cfis_pdf(dist, 400)) <= 1e-12);

    // Direct-summation oracle for the unnormalized mass.
    auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
    double z = 0.0;
    for (int t = 1; t <= 1000; ++t)
        z += sig(0.05 * (t - 200.0)) - sig(0.05 * (t - 400.0));
    for (int t : {1, 137, 300, 640, 1000})
        CHECK(cfis_pdf(dist, t) ==
              doctest::Approx((sig(0.05 * (t - 200.0)) - sig(0.05 * (t - 400.0))) / z)
                  .epsilon(1e-12));

    // The band gets far more mass than the late-denoising tail.
    double band = 0.0, tail = 0.0;
    for (int t = 200; t <= 400; ++t) band += cfis_pdf(dist, t);
    for (int t = 800; t <= 1000; ++t) tail += cfis_pdf(dist, t);
    CHECK(band >= 10.0 * tail);

    CHECK_THROWS_AS(cfis_pdf(dist, 0), TimestepOutOfRange);
    CHECK_THROWS_AS(cfis_pdf(dist, 1001), TimestepOutOfRange);
    CHECK_THROWS_AS(make_cfis(1000, 400.0, 200.0, 0.05), ConfigError);
}

TEST_CASE("fraction constructor rescales the band and temperature") {
    CfisDistribution a = make_cfis_fractions(100, 0.2, 0.4, 0.05);
    CfisDistribution b = make_cfis(100, 20.0, 40.0, 0.5);
    CHECK(a.pdf == b.pdf);
    CHECK(a.cdf == b.cdf);

    // The rescaled pdf keeps its shape on the unit timestep axis: mass in
    // the band matches the reference-scale distribution up to the coarser
    // discretization (21 grid points versus 201).
    CfisDistribution ref = make_cfis(1000, 200.0, 400.0, 0.05);
    double band_a = 0.0, band_ref = 0.0;
    for (int t = 20; t <= 40; ++t) band_a += cfis_pdf(a, t);
    for (int t = 200; t <= 400; ++t) band_ref += cfis_pdf(ref, t);
    CHECK(std::fabs(band_a - band_ref) < 0.03);
}

TEST_CASE("uniform timestep distribution") {
    CfisDistribution u = make_uniform_timesteps(50);
    for (int t = 1; t <= 50; ++t) CHECK(cfis_pdf(u, t) == doctest::Approx(0.02));
    SeededRng rng(3);
    std::vector<int> counts(51, 0);
    for (int i = 0; i < 50000; ++i) ++counts[static_cast<std::size_t>(cfis_sample(u, rng))];
    for (int t = 1; t <= 50; ++t)
        CHECK(std::fabs(counts[static_cast<std::size_t>(t)] / 50000.0 - 0.02) < 0.005);
}

TEST_CASE("inverse-cdf sampling tracks the density") {
    CfisDistribution dist = make_cfis_fractions(100, 0.2, 0.4, 0.05);
    SeededRng r1(11), r2(11);
    for (int i = 0; i < 100; ++i) CHECK(cfis_sample(dist, r1) == cfis_sample(dist, r2));

    SeededRng rng(12);
    std::vector<double> freq(101, 0.0);
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) {
        const int t = cfis_sample(dist, rng);
        CHECK(t >= 1);
        CHECK(t <= 100);
        freq[static_cast<std::size_t>(t)] += 1.0 / draws;
    }
    double tv = 0.0;
    for (int t = 1; t <= 100; ++t)
        tv += std::fabs(freq[static_cast<std::size_t>(t)] - cfis_pdf(dist, t));
    CHECK(0.5 * tv <= 0.02);
}

TEST_CASE("masked column energy") {
    DenseMatrix a(1, 1);
    a.at(0, 0) = 0.6;
    CHECK(masked_column_energy(a, {1.0}, {0}) == doctest::Approx(0.36));

    SeededRng rng(21);
    DenseMatrix map = softmax_rows(DenseMatrix::random_normal(4, 5, rng));
    std::vector<double> mask = {1.0, 0.0, 1.0, 0.0};
    std::vector<std::size_t> token_set = {1, 3};
    double ref = 0.0;
    for (std::size_t i : token_set)
        for (std::size_t p = 0; p < 4; ++p) {
            const double v = map.at(p, i) * mask[p];
            ref += v * v;
        }
    CHECK(masked_column_energy(map, mask, token_set) == doctest::Approx(ref).epsilon(1e-12));
    CHECK(masked_column_energy(map, {0.0, 0.0, 0.0, 0.0}, token_set) == 0.0);

    CHECK_THROWS_AS(masked_column_energy(map, {1.0}, token_set), DimensionMismatch);
    CHECK_THROWS_AS(masked_column_energy(map, mask, {7}), DimensionMismatch);
}

TEST_CASE("analytic gradients match central finite differences") {
    SeededRng rng(33);
    const std::size_t d2 = 6, d_attn = 4, patches = 4, tokens = 5;
    DenseMatrix q = DenseMatrix::random_normal(patches, d_attn, rng);
    DenseMatrix e = DenseMatrix::random_normal(tokens, d2, rng);
    DenseMatrix wk = DenseMatrix::random_normal(d2, d_attn, rng, 0.4);
    LoraModule key = LoraModule::init(d2, d_attn, 1, LoraTarget::Key, "cat", rng);
    for (auto& x : key.b.data) x = 0.2 * rng.normal(); // move off the zero init
    LoraModule value = LoraModule::init(d2, d_attn, 1, LoraTarget::Value, "cat", rng);
    std::vector<double> mask = {1.0, 0.0, 1.0, 1.0};
    std::vector<std::size_t> token_set = {1, 3};

    const EraseGrads g = masked_attention_grads(q, e, wk, key, value, mask, token_set);

    const double h = 1e-5;
    auto fd_check = [&](DenseMatrix LoraModule::* field, const DenseMatrix& analytic) {
        for (std::size_t i = 0; i < (key.*field).data.size(); ++i) {
            LoraModule kp = key, km = key;
            (kp.*field).data[i] += h;
            (km.*field).data[i] -= h;
            const double lp = masked_attention_loss(q, e, wk, kp, mask, token_set);
            const double lm = masked_attention_loss(q, e, wk, km, mask, token_set);
            const double fd = (lp - lm) / (2.0 * h);
            CHECK(analytic.data[i] == doctest::Approx(fd).epsilon(1e-5).scale(1e-4));
        }
    };
    fd_check(&LoraModule::b, g.key_b);
    fd_check(&LoraModule::d, g.key_d);

    // The attention map never reads the value projection.
    CHECK(max_abs(g.value_b) == 0.0);
    CHECK(max_abs(g.value_d) == 0.0);

    // Empty mask: zero loss, zero gradients.
    const std::vector<double> zero_mask(patches, 0.0);
    CHECK(masked_attention_loss(q, e, wk, key, zero_mask, token_set) == 0.0);
    const EraseGrads gz = masked_attention_grads(q, e, wk, key, value, zero_mask, token_set);
    CHECK(max_abs(gz.key_b) == 0.0);
    CHECK(max_abs(gz.key_d) == 0.0);
}

TEST_CASE("batch loss and gradients reduce over items") {
    const ToyModelState& st = pretrained_small();
    const ConceptSpec& c = st.concepts[0];
    SeededRng rng(44);
    auto set = generate_training_set(st, c, 3, 20, rng);

    std::vector<EraseItem> batch;
    for (const auto& ex : set) {
        EraseItem item;
        item.latent = ex.latent;
        item.embeddings = encode_prompt(st.vocab, st.encoder, ex.prompt);
        item.mask = ex.mask;
        item.t = 30;
        item.eps = DenseMatrix::random_normal(8, 8, rng);
        batch.push_back(std::move(item));
    }
    SeededRng lr(45);
    LoraModule key = LoraModule::init(st.d2, st.d_attn, 1, LoraTarget::Key, c.name, lr);
    const std::vector<std::size_t> token_set = {3};

    // Batch loss is the mean of single-item losses.
    double mean = 0.0;
    for (const auto& item : batch) mean += erasure_loss(st, key, {item}, token_set);
    mean /= batch.size();
    CHECK(erasure_loss(st, key, batch, token_set) == doctest::Approx(mean).epsilon(1e-12));
    CHECK(erasure_loss(st, key, {}, token_set) == 0.0);

    LoraModule value = LoraModule::init(st.d2, st.d_attn, 1, LoraTarget::Value, c.name, lr);
    const EraseGrads g = erasure_loss_grad(st, key, value, batch, token_set);
    CHECK(g.key_b.rows == st.d2);
    CHECK(g.key_d.cols == st.d_attn);
    CHECK(max_abs(g.value_b) == 0.0);
}

TEST_CASE("lora training suppresses masked attention") {
    const ToyModelState& st = pretrained_small();
    const ConceptSpec& c = st.concepts[0];
    SeededRng rgen(101);
    const auto training_set = generate_training_set(st, c, 8, 20, rgen);

    EraseTrainConfig cfg;
    cfg.token_set = {3};
    const CfisDistribution cfis = make_cfis_fractions(st.schedule.T, 0.2, 0.4, 0.05);

    SeededRng r1(7), r2(7);
    LoraPair pair = train_lora(st, c, training_set, cfg, cfis, r1);
    CHECK(pair.loss_curve.size() >= 2);
    CHECK(pair.loss_curve.back() < pair.loss_curve.front());
    CHECK(pair.key.concept_id == "cat");

    // Rank bound: every 2x2 minor of the rank-1 delta vanishes.
    const DenseMatrix delta = matmul(pair.key.b, pair.key.d);
    for (std::size_t i = 1; i < delta.rows; ++i)
        for (std::size_t j = 1; j < delta.cols; ++j)
            CHECK(std::fabs(delta.at(0, 0) * delta.at(i, j) -
                            delta.at(0, j) * delta.at(i, 0)) < 1e-10);

    // Deterministic given the seed.
    LoraPair again = train_lora(st, c, training_set, cfg, cfis, r2);
    CHECK(again.key.b == pair.key.b);
    CHECK(again.key.d == pair.key.d);
    CHECK(again.value.b == pair.value.b);
    CHECK(again.loss_curve == pair.loss_curve);

    // Generous stopping level: training exits before the step budget once
    // the fixed-batch loss is under it.
    EraseTrainConfig early = cfg;
    early.stop_loss = pair.loss_curve.front() * 0.5;
    SeededRng r3(7);
    LoraPair stopped = train_lora(st, c, training_set, early, cfis, r3);
    CHECK(stopped.loss_curve.back() <= early.stop_loss);
    CHECK(stopped.loss_curve.size() < pair.loss_curve.size() + 1);

    // Stopping level above the initial loss: nothing to do, the zero-delta
    // modules come back untouched.
    EraseTrainConfig noop = cfg;
    noop.stop_loss = 1e9;
    SeededRng r4(7);
    LoraPair untouched = train_lora(st, c, training_set, noop, cfis, r4);
    CHECK(untouched.loss_curve.size() == 1);
    CHECK(max_abs(untouched.key.b) == 0.0);

    // Zero learning rate cannot improve; with early stopping disabled the
    // run reports the bad configuration.
    EraseTrainConfig frozen = cfg;
    frozen.learning_rate = 0.0;
    frozen.stop_loss = 0.0;
    SeededRng r5(7);
    CHECK_THROWS_AS(train_lora(st, c, training_set, frozen, cfis, r5), DidNotImprove);
}

TEST_CASE("lora training input validation") {
    const ToyModelState& st = pretrained_small();
    const ConceptSpec& c = st.concepts[0];
    SeededRng rgen(102);
    const auto training_set = generate_training_set(st, c, 2, 20, rgen);
    const CfisDistribution cfis = make_cfis_fractions(st.schedule.T, 0.2, 0.4, 0.05);
    SeededRng rng(1);

    EraseTrainConfig no_tokens;
    CHECK_THROWS_AS(train_lora(st, c, training_set, no_tokens, cfis, rng), ConfigError);

    EraseTrainConfig cfg;
    cfg.token_set = {3};
    CHECK_THROWS_AS(train_lora(st, c, {}, cfg, cfis, rng), ConfigError);

    const CfisDistribution wrong_scale = make_cfis_fractions(50, 0.2, 0.4, 0.05);
    CHECK_THROWS_AS(train_lora(st, c, training_set, cfg, wrong_scale, rng), ConfigError);
}

TEST_CASE("lora checkpoints round-trip") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "mace_test_lora_ckpt";
    fs::remove_all(dir);

    const ToyModelState& st = pretrained_small();
    const ConceptSpec& c = st.concepts[0];
    SeededRng rgen(103);
    const auto training_set = generate_training_set(st, c, 4, 20, rgen);
    EraseTrainConfig cfg;
    cfg.token_set = {3};
    cfg.steps = 10;
    cfg.stop_loss = 0.0;
    const CfisDistribution cfis = make_cfis_fractions(st.schedule.T, 0.2, 0.4, 0.05);
    SeededRng rng(9);
    LoraPair pair = train_lora(st, c, training_set, cfg, cfis, rng);

    save_lora(dir.string(), "cat", pair, 9, cfg.steps);
    LoraPair back = load_lora(dir.string(), "cat");
    CHECK(back.key.b == pair.key.b);
    CHECK(back.key.d == pair.key.d);
    CHECK(back.value.b == pair.value.b);
    CHECK(back.value.d == pair.value.d);
    CHECK(back.key.concept_id == "cat");
    CHECK(back.key.rank == 1);

    CHECK_THROWS_AS(load_lora(dir.string(), "dog"), IoError);
    fs::remove_all(dir);
}
