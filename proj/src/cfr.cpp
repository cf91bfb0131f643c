#include "mace/cfr.hpp"

#include <cmath>
#include <fstream>

#include "mace/linalg.hpp"

namespace mace {

namespace {

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

// tr(Wc G Wc^T) - 2 tr(Wc^T C) + tr(W G W^T); the value of the quadratic
// prior penalty sum ||Wc e - W e||^2 expressed through the cache.
double prior_penalty(const PriorCache& cache, const DenseMatrix& w,
                     const DenseMatrix& wc) {
    const DenseMatrix wc_g = matmul(wc, cache.gram);
    const DenseMatrix w_g = matmul(w, cache.gram);
    double s = 0.0;
    for (std::size_t i = 0; i < wc.data.size(); ++i)
        s += wc.data[i] * wc_g.data[i] - 2.0 * wc.data[i] * cache.cross.data[i] +
             w.data[i] * w_g.data[i];
    return s;
}

} // namespace

PriorCache PriorCache::empty(std::size_t d1, std::size_t d2, PriorKind kind) {
    PriorCache c;
    c.gram = DenseMatrix(d2, d2);
    c.cross = DenseMatrix(d1, d2);
    c.count = 0;
    c.kind = kind;
    return c;
}

void PriorCache::merge(const PriorCache& other) {
    if (!gram.same_shape(other.gram) || !cross.same_shape(other.cross))
        throw DimensionMismatch("PriorCache::merge: shape mismatch");
    add_in_place(gram, other.gram);
    add_in_place(cross, other.cross);
    count += other.count;
}

PriorCache build_prior_cache(const DenseMatrix& w,
                             const std::vector<std::vector<double>>& embeddings,
                             PriorKind kind) {
    PriorCache cache = PriorCache::empty(w.rows, w.cols, kind);
    for (const auto& e : embeddings) {
        if (e.size() != w.cols)
            throw DimensionMismatch("build_prior_cache: embedding dimension != W.cols");
        add_outer(cache.gram, e, e);
        add_outer(cache.cross, matvec(w, e), e);
        ++cache.count;
    }
    return cache;
}

void save_prior_cache(const std::string& dir, const std::string& name,
                      const PriorCache& cache) {
    write_matrix(dir + "/" + name + ".gram.mat", cache.gram);
    write_matrix(dir + "/" + name + ".cross.mat", cache.cross);
    std::ofstream os(dir + "/" + name + ".meta");
    if (!os) throw IoError("cannot write prior cache meta: " + name);
    os << "kind = " << (cache.kind == PriorKind::General ? "general" : "domain_specific")
       << "\ncount = " << cache.count << "\n";
}

PriorCache load_prior_cache(const std::string& dir, const std::string& name) {
    PriorCache cache;
    cache.gram = read_matrix(dir + "/" + name + ".gram.mat");
    cache.cross = read_matrix(dir + "/" + name + ".cross.mat");
    std::ifstream is(dir + "/" + name + ".meta");
    if (!is) throw IoError("cannot read prior cache meta: " + name);
    std::string key, eq, value;
    while (is >> key >> eq >> value) {
        if (key == "kind")
            cache.kind = value == "general" ? PriorKind::General : PriorKind::DomainSpecific;
        else if (key == "count")
            cache.count = std::stoull(value);
    }
    return cache;
}

DenseMatrix closed_form_refine(const RefineProblem& problem) {
    const DenseMatrix& w = problem.w;
    const std::size_t d2 = w.cols;

    for (const auto& p : problem.pairs)
        if (p.e_f.size() != d2 || p.e_g.size() != d2)
            throw DimensionMismatch("closed_form_refine: pair dimension != W.cols");

    if (problem.pairs.empty()) return w;

    DenseMatrix right(d2, d2);      // sum e_f e_f^T + prior grams
    DenseMatrix left(w.rows, d2);   // sum (W e_g) e_f^T + prior crosses
    for (const auto& p : problem.pairs) {
        add_outer(right, p.e_f, p.e_f);
        add_outer(left, matvec(w, p.e_g), p.e_f);
    }

    if (problem.anchor_mode == AnchorMode::WeightAnchor) {
        for (std::size_t i = 0; i < d2; ++i) right.at(i, i) += problem.anchor_lambda;
        add_in_place(left, w, problem.anchor_lambda);
    } else {
        add_in_place(right, problem.general_prior.gram, problem.lambda1);
        add_in_place(left, problem.general_prior.cross, problem.lambda1);
        if (problem.domain_prior) {
            add_in_place(right, problem.domain_prior->gram, problem.lambda3);
            add_in_place(left, problem.domain_prior->cross, problem.lambda3);
        }
    }

    return solve_spd(right, left);
}

double refine_objective(const RefineProblem& problem, const DenseMatrix& w_candidate) {
    if (!w_candidate.same_shape(problem.w))
        throw DimensionMismatch("refine_objective: candidate shape != W");

    double obj = 0.0;
    for (const auto& p : problem.pairs)
        obj += sq_dist(matvec(w_candidate, p.e_f), matvec(problem.w, p.e_g));

    if (problem.anchor_mode == AnchorMode::WeightAnchor) {
        obj += problem.anchor_lambda * frobenius_sq(sub(w_candidate, problem.w));
    } else {
        obj += problem.lambda1 * prior_penalty(problem.general_prior, problem.w, w_candidate);
        if (problem.domain_prior)
            obj += problem.lambda3 * prior_penalty(*problem.domain_prior, problem.w, w_candidate);
    }
    return obj;
}

DenseMatrix closed_form_fuse(const FusionProblem& problem) {
    if (problem.deltas.empty())
        throw DimensionMismatch("closed_form_fuse: need at least one LoRA delta");
    if (problem.map_embeddings.size() != problem.deltas.size())
        throw DimensionMismatch("closed_form_fuse: one embedding list per delta required");

    const std::size_t d2 = problem.w.cols;
    DenseMatrix right(d2, d2);
    DenseMatrix left(problem.w.rows, d2);

    for (std::size_t i = 0; i < problem.deltas.size(); ++i) {
        const DenseMatrix& delta = problem.deltas[i];
        if (!delta.same_shape(problem.w))
            throw DimensionMismatch("closed_form_fuse: delta shape != W");
        const DenseMatrix target = add(problem.w_refined, delta);
        for (const auto& e : problem.map_embeddings[i]) {
            if (e.size() != d2)
                throw DimensionMismatch("closed_form_fuse: embedding dimension != W.cols");
            add_outer(right, e, e);
            add_outer(left, matvec(target, e), e);
        }
    }

    add_in_place(right, problem.prior.gram, problem.lambda2);
    add_in_place(left, problem.prior.cross, problem.lambda2);
    return solve_spd(right, left);
}

double fusion_objective(const FusionProblem& problem, const DenseMatrix& w_candidate) {
    if (!w_candidate.same_shape(problem.w))
        throw DimensionMismatch("fusion_objective: candidate shape != W");
    double obj = 0.0;
    for (std::size_t i = 0; i < problem.deltas.size(); ++i) {
        const DenseMatrix target = add(problem.w_refined, problem.deltas[i]);
        for (const auto& e : problem.map_embeddings[i])
            obj += sq_dist(matvec(w_candidate, e), matvec(target, e));
    }
    obj += problem.lambda2 * prior_penalty(problem.prior, problem.w, w_candidate);
    return obj;
}

DenseMatrix naive_lora_fusion(const DenseMatrix& w_refined,
                              const std::vector<DenseMatrix>& deltas,
                              const std::vector<double>& weights) {
    if (deltas.size() != weights.size())
        throw DimensionMismatch("naive_lora_fusion: one weight per delta required");
    double sum = 0.0;
    for (double w : weights) sum += w;
    if (std::fabs(sum - 1.0) > 1e-12)
        throw WeightsNotNormalized("naive_lora_fusion: weights must sum to 1");
    DenseMatrix out = w_refined;
    for (std::size_t i = 0; i < deltas.size(); ++i) add_in_place(out, deltas[i], weights[i]);
    return out;
}

} // namespace mace
