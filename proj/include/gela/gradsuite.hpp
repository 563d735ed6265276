#pragma once

// Finite-difference sweep over all eight objectives on seeded small
// instances. Each objective is rebuilt per seed with fresh random inputs and
// checked against central differences on a deterministic subsample of every
// parameter tensor.

#include <functional>
#include <string>
#include <vector>

#include "gela/eval.hpp"
#include "gela/model.hpp"
#include "gela/objectives.hpp"
#include "gela/tensor.hpp"
#include "gela/world.hpp"

namespace gela::diagnostics {

struct ObjectiveCheck {
    std::string objective;
    std::uint64_t seed = 0;
    bool pass = false;
    double max_rel_err = 0;
    std::string worst_tensor;
};

struct GradSuiteResult {
    std::vector<ObjectiveCheck> checks;
    bool all_pass = true;
    double worst_rel_err = 0;
    std::string worst_case;
};

inline model::ModelConfig grad_suite_config(std::uint64_t seed) {
    model::ModelConfig cfg;
    cfg.vocab_size = 16;
    cfg.d_model = 8;
    cfg.n_layers_text = 1;
    cfg.n_layers_cross = 1;
    cfg.n_heads = 2;
    cfg.max_instruction_len = 9;
    cfg.view_feature_dim = 4;
    cfg.ffn_hidden = 12;
    cfg.seed = seed;
    return cfg;
}

inline model::Panorama random_panorama(Rng& rng, int fdim) {
    model::Panorama p;
    p.views.resize(kNumViews);
    for (int i = 0; i < kNumViews; ++i) {
        model::View& v = p.views[static_cast<std::size_t>(i)];
        v.feature.resize(static_cast<std::size_t>(fdim));
        for (double& x : v.feature) x = rng.uniform(-1, 1);
        v.heading = view_heading(i);
        v.elevation = view_elevation(i);
    }
    return p;
}

// One finite-difference pass per objective for this seed.
inline std::vector<ObjectiveCheck> check_objectives_for_seed(std::uint64_t seed, double step,
                                                             double tol,
                                                             std::size_t max_per_tensor) {
    Rng rng(seed * 7919 + 13);
    model::ModelConfig cfg = grad_suite_config(seed + 1);
    model::Model m(cfg);
    model::Panorama p1 = random_panorama(rng, cfg.view_feature_dim);
    model::Panorama p2 = random_panorama(rng, cfg.view_feature_dim);
    model::Instruction instr = model::Instruction::of({kClsId, 5, 7, 9});
    objectives::TrajectoryContext ctx{{p1, p2}, {4, 9}, p2};

    objectives::EntityMask mz;
    mz.m = {0, 1, 1, 0};
    objectives::LandmarkMask ms = objectives::LandmarkMask::from_cells({5, 6});
    objectives::BoxTarget box{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.1, 0.3),
                              rng.uniform(0.1, 0.3)};

    objectives::MlmInstance mlm_inst;
    mlm_inst.masked = instr;
    mlm_inst.masked.tokens[2] = kMaskId;
    mlm_inst.targets = {{2, 7}};

    std::vector<double> mrc_p(kNumClasses, 0.0);
    mrc_p[static_cast<std::size_t>(1 + rng.uniform_index(kNumClasses - 1))] = 0.75;
    mrc_p[0] = 0.25;

    objectives::TrajectoryContext other1{{p2, p1}, {3, 8}, p1};
    objectives::TrajectoryContext other2{{p1, p1}, {2, 2}, p1};
    objectives::SprelInstance sprel_inst = objectives::sample_sprel_pair(p1, rng);
    const std::uint64_t itm_seed = rng.next_u64();

    using Fn = std::function<diff::Tensor(diff::Tape&)>;
    std::vector<std::pair<std::string, Fn>> losses;
    losses.emplace_back("epp", [&](diff::Tape& t) {
        auto enc = m.encode_step(t, instr, ctx.past, ctx.actions, ctx.obs);
        return objectives::epp_loss(t, enc.S, ms, mz,
                                    objectives::FfnHead::from(m.params(), "head.epp"));
    });
    losses.emplace_back("lbp", [&](diff::Tape& t) {
        auto enc = m.encode_step(t, instr, ctx.past, ctx.actions, ctx.obs);
        return objectives::lbp_loss(t, enc.Z, mz, box,
                                    objectives::FfnHead::from(m.params(), "head.lbp"), 1.0)
            .loss;
    });
    losses.emplace_back("elsa", [&](diff::Tape& t) {
        auto enc = m.encode_step(t, instr, ctx.past, ctx.actions, ctx.obs);
        return objectives::elsa_loss(t, enc.Z, enc.S, {{5, 1}, {6, 2}}, 0.07);
    });
    losses.emplace_back("mlm",
                        [&](diff::Tape& t) { return objectives::mlm_loss(t, m, mlm_inst, ctx); });
    losses.emplace_back("mrc", [&](diff::Tape& t) {
        return objectives::mrc_loss(t, m, instr, ctx, {11}, {mrc_p});
    });
    losses.emplace_back("itm", [&](diff::Tape& t) {
        Rng fixed(itm_seed);
        return objectives::itm_loss(t, m, instr, ctx, {other1, other2}, fixed);
    });
    losses.emplace_back("sap", [&](diff::Tape& t) {
        auto enc = m.encode_step(t, instr, ctx.past, ctx.actions, ctx.obs);
        return objectives::sap_loss(t, m, enc, {4, 9, 20}, 9);
    });
    losses.emplace_back("sprel",
                        [&](diff::Tape& t) { return objectives::sprel_loss(t, m, sprel_inst); });

    std::vector<std::pair<std::string, diff::Tensor>> params;
    for (const auto& [name, t] : m.params().items()) params.emplace_back(name, t);

    std::vector<ObjectiveCheck> out;
    for (auto& [name, f] : losses) {
        auto rep = diff::grad_check(f, params, step, tol, max_per_tensor,
                                    /*sample_seed=*/seed * 131 + out.size());
        out.push_back({name, seed, rep.pass, rep.max_rel_err, rep.worst_tensor});
    }
    return out;
}

inline GradSuiteResult run_gradient_suite(int n_seeds = 20, double step = 1e-5, double tol = 1e-4,
                                          std::size_t max_per_tensor = 8) {
    GradSuiteResult result;
    for (std::uint64_t seed = 1; seed <= static_cast<std::uint64_t>(n_seeds); ++seed) {
        for (ObjectiveCheck& c : check_objectives_for_seed(seed, step, tol, max_per_tensor)) {
            result.all_pass = result.all_pass && c.pass;
            if (c.max_rel_err > result.worst_rel_err) {
                result.worst_rel_err = c.max_rel_err;
                result.worst_case = c.objective + " seed " + std::to_string(seed) + " (" +
                                    c.worst_tensor + ")";
            }
            result.checks.push_back(std::move(c));
        }
    }
    return result;
}

}  // namespace gela::diagnostics
