#pragma once

// Episode rollout, the five navigation metrics (TL, NE, SR, SPL, GP),
// effective-attention analysis of the last cross-modal layer, and attention
// heatmap export.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gela/common.hpp"
#include "gela/error.hpp"
#include "gela/geldata.hpp"
#include "gela/model.hpp"
#include "gela/objectives.hpp"
#include "gela/world.hpp"

namespace gela::eval {

using model::AttnMatrix;

// ---------------------------------------------------------------------------
// teacher forcing helpers shared with the trainer
// ---------------------------------------------------------------------------

struct StepContext {
    model::Instruction instr;
    std::vector<model::Panorama> past;
    std::vector<int> past_actions;
    model::Panorama obs;
    std::vector<int> candidates;  // navigable slots (stop excluded, always implied)
    int expert_slot = kStopSlot;
    int viewpoint = -1;
};

inline std::vector<int> candidate_slots(const world::WorldGraph& w, int vp) {
    std::vector<int> slots;
    for (const world::Candidate& c : w.candidates(vp)) slots.push_back(c.slot);
    return slots;
}

// One decision context per path position: k move decisions plus the final
// stop decision.
inline std::vector<StepContext> teacher_forced_steps(const world::WorldGraph& w,
                                                     const geldata::Episode& ep) {
    std::vector<StepContext> steps;
    model::Instruction instr = model::Instruction::of(ep.instruction.tokens);
    std::vector<model::Panorama> past;
    std::vector<int> past_actions;
    for (std::size_t t = 0; t < ep.path.size(); ++t) {
        const int vp = w.index_of(ep.path[t]);
        StepContext sc;
        sc.instr = instr;
        sc.past = past;
        sc.past_actions = past_actions;
        sc.obs = w.observe(vp);
        sc.candidates = candidate_slots(w, vp);
        sc.viewpoint = vp;
        sc.expert_slot = (t + 1 < ep.path.size())
                             ? w.expert_slot(vp, w.index_of(ep.path[t + 1]))
                             : kStopSlot;
        past.push_back(sc.obs);
        past_actions.push_back(sc.expert_slot);
        steps.push_back(std::move(sc));
    }
    return steps;
}

// Complete-trajectory context (all panoramas, all taken actions).
inline objectives::TrajectoryContext full_trajectory(const world::WorldGraph& w,
                                                     const geldata::Episode& ep) {
    objectives::TrajectoryContext ctx;
    for (std::size_t t = 0; t < ep.path.size(); ++t) {
        const int vp = w.index_of(ep.path[t]);
        ctx.past.push_back(w.observe(vp));
        ctx.actions.push_back(t + 1 < ep.path.size()
                                  ? w.expert_slot(vp, w.index_of(ep.path[t + 1]))
                                  : kStopSlot);
    }
    ctx.obs = ctx.past.back();
    return ctx;
}

// ---------------------------------------------------------------------------
// rollout
// ---------------------------------------------------------------------------

enum class RolloutMode { Greedy, Sample };

struct RolloutRecord {
    std::string episode_id;
    std::vector<int> visited;  // viewpoint indices, starting position first
    std::vector<int> actions;  // chosen slots, one per decision
    std::vector<std::vector<double>> action_dists;
    std::vector<AttnMatrix> attn_t2v;  // last cross layer, per step
    std::vector<AttnMatrix> attn_v2t;
    std::vector<int> history_rows;  // history rows in the visual stream, per step
    double traj_len = 0.0;
    bool terminated = false;  // true when the agent emitted stop before the cap
};

inline RolloutRecord run_episode(const model::Model& m, const world::WorldGraph& w,
                                 const geldata::Episode& ep, RolloutMode mode, int step_cap = 15,
                                 Rng* sampler = nullptr) {
    if (mode == RolloutMode::Sample && sampler == nullptr)
        throw ContractError("run_episode: Sample mode needs an rng");
    if (ep.path.empty()) throw ContractError("run_episode: empty episode path");
    RolloutRecord rec;
    rec.episode_id = ep.id;
    model::Instruction instr = model::Instruction::of(ep.instruction.tokens);
    world::NavState state{w.index_of(ep.path[0]), 0.0, 0.0, false};
    rec.visited.push_back(state.viewpoint);
    std::vector<model::Panorama> past;
    std::vector<int> past_actions;
    for (int t = 0; t < step_cap && !state.done; ++t) {
        diff::Tape tape;
        model::Panorama obs = w.observe(state.viewpoint);
        model::EncoderOutputs enc = m.encode_step(tape, instr, past, past_actions, obs);
        std::vector<int> cands = candidate_slots(w, state.viewpoint);
        diff::Tensor probs = m.predict_action(tape, enc, cands);
        int action = kStopSlot;
        if (mode == RolloutMode::Greedy) {
            double best = -1;
            for (int s = 0; s < kNumSlots; ++s)
                if (probs.at(s) > best) {
                    best = probs.at(s);
                    action = s;
                }
        } else {
            double u = sampler->uniform(), acc = 0;
            action = kStopSlot;
            for (int s = 0; s < kNumSlots; ++s) {
                acc += probs.at(s);
                if (u < acc) {
                    action = s;
                    break;
                }
            }
        }
        rec.actions.push_back(action);
        rec.action_dists.emplace_back(probs.values().begin(), probs.values().end());
        rec.attn_t2v.push_back(enc.text_to_vis);
        rec.attn_v2t.push_back(enc.vis_to_text);
        rec.history_rows.push_back(enc.n_history_rows);
        past.push_back(obs);
        past_actions.push_back(action);
        state = world::step(w, state, action);
        if (!state.done) rec.visited.push_back(state.viewpoint);
    }
    rec.traj_len = state.traj_len;
    rec.terminated = state.done;
    return rec;
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

struct EpisodeMetrics {
    std::string episode_id;
    double tl = 0, ne = 0, sr = 0, spl = 0, gp = 0;
};

struct MetricsReport {
    std::vector<EpisodeMetrics> rows;  // sorted by episode id
    EpisodeMetrics aggregate;          // arithmetic means, id = "mean"
};

inline MetricsReport compute_metrics(const std::vector<RolloutRecord>& records,
                                     const world::WorldGraph& w,
                                     const std::vector<geldata::Episode>& episodes,
                                     double success_radius = 3.0) {
    if (records.size() != episodes.size())
        throw ContractError("compute_metrics: " + std::to_string(records.size()) +
                            " records for " + std::to_string(episodes.size()) + " episodes");
    std::map<std::string, const geldata::Episode*> by_id;
    for (const geldata::Episode& ep : episodes) by_id[ep.id] = &ep;
    MetricsReport report;
    for (const RolloutRecord& rec : records) {
        auto it = by_id.find(rec.episode_id);
        if (it == by_id.end())
            throw ContractError("compute_metrics: no episode '" + rec.episode_id + "'");
        const geldata::Episode& ep = *it->second;
        const int start = w.index_of(ep.path.front());
        const int goal = w.index_of(ep.path.back());
        const int final_vp = rec.visited.back();
        EpisodeMetrics em;
        em.episode_id = rec.episode_id;
        em.tl = rec.traj_len;
        em.ne = w.distance(final_vp, goal);
        const bool success = rec.terminated && em.ne <= success_radius;
        em.sr = success ? 1.0 : 0.0;
        auto geo_start = w.shortest_path(start, goal);
        auto geo_final = w.shortest_path(final_vp, goal);
        if (!geo_start || !geo_final)
            throw DataError("compute_metrics: goal unreachable in world");
        const double l = geo_start->first;
        em.spl = success ? (l > 0 ? l / std::max(rec.traj_len, l) : 1.0) : 0.0;
        em.gp = l - geo_final->first;
        report.rows.push_back(em);
    }
    std::sort(report.rows.begin(), report.rows.end(),
              [](const EpisodeMetrics& a, const EpisodeMetrics& b) {
                  return a.episode_id < b.episode_id;
              });
    EpisodeMetrics& agg = report.aggregate;
    agg.episode_id = "mean";
    for (const EpisodeMetrics& em : report.rows) {
        agg.tl += em.tl;
        agg.ne += em.ne;
        agg.sr += em.sr;
        agg.spl += em.spl;
        agg.gp += em.gp;
    }
    const double n = static_cast<double>(report.rows.size());
    if (n > 0) {
        agg.tl /= n;
        agg.ne /= n;
        agg.sr /= n;
        agg.spl /= n;
        agg.gp /= n;
    }
    return report;
}

inline std::string metrics_csv(const MetricsReport& report) {
    std::ostringstream os;
    os << "episode_id,TL,NE,SR,SPL,GP\n";
    char buf[160];
    auto row = [&](const EpisodeMetrics& em) {
        std::snprintf(buf, sizeof buf, "%s,%.10g,%.10g,%.10g,%.10g,%.10g\n",
                      em.episode_id.c_str(), em.tl, em.ne, em.sr, em.spl, em.gp);
        os << buf;
    };
    for (const EpisodeMetrics& em : report.rows) row(em);
    row(report.aggregate);
    return os.str();
}

// ---------------------------------------------------------------------------
// Welch's t-test
// ---------------------------------------------------------------------------

namespace detail {

// Regularized incomplete beta via the Lentz continued fraction.
inline double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 3e-14, kFpMin = 1e-300;
    const double qab = a + b, qap = a + 1, qam = a - 1;
    double c = 1.0, d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kEps) break;
    }
    return h;
}

inline double reg_inc_beta(double a, double b, double x) {
    if (x <= 0) return 0;
    if (x >= 1) return 1;
    const double ln_front =
        std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
        b * std::log(1.0 - x);
    if (x < (a + 1) / (a + b + 2))
        return std::exp(ln_front) * betacf(a, b, x) / a;
    return 1.0 - std::exp(ln_front) * betacf(b, a, 1.0 - x) / b;
}

}  // namespace detail

struct WelchResult {
    double t = 0;
    double df = 0;
    double p = 1;  // two-sided
    double mean_a = 0, mean_b = 0;
    std::size_t n_a = 0, n_b = 0;
};

inline WelchResult welch_t_test(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() < 2 || b.size() < 2)
        throw ContractError("welch_t_test: need at least two samples per side");
    auto moments = [](const std::vector<double>& v) {
        double mean = 0;
        for (double x : v) mean += x;
        mean /= static_cast<double>(v.size());
        double var = 0;
        for (double x : v) var += (x - mean) * (x - mean);
        var /= static_cast<double>(v.size() - 1);
        return std::make_pair(mean, var);
    };
    auto [ma, va] = moments(a);
    auto [mb, vb] = moments(b);
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    const double se2 = va / na + vb / nb;
    WelchResult r;
    r.mean_a = ma;
    r.mean_b = mb;
    r.n_a = a.size();
    r.n_b = b.size();
    if (se2 <= 0) {
        r.t = (ma == mb) ? 0 : std::numeric_limits<double>::infinity();
        r.df = na + nb - 2;
        r.p = (ma == mb) ? 1 : 0;
        return r;
    }
    r.t = (ma - mb) / std::sqrt(se2);
    r.df = se2 * se2 / ((va / na) * (va / na) / (na - 1) + (vb / nb) * (vb / nb) / (nb - 1));
    r.p = detail::reg_inc_beta(r.df / 2, 0.5, r.df / (r.df + r.t * r.t));
    return r;
}

// ---------------------------------------------------------------------------
// effective attention
// ---------------------------------------------------------------------------

struct EAReport {
    // raw sums of attention mass over annotated counterpart positions
    std::vector<double> e2l;  // one per annotated entity token occurrence
    std::vector<double> l2e;  // one per annotated landmark cell occurrence
    // per-counterpart-mean variants (sum divided by counterpart count)
    std::vector<double> e2l_cellmean;
    std::vector<double> l2e_tokenmean;
    int skipped_pairs = 0;

    static double mean_of(const std::vector<double>& v) {
        if (v.empty()) return 0;
        double s = 0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    }
    double mean_e2l() const { return mean_of(e2l); }
    double mean_l2e() const { return mean_of(l2e); }
    std::vector<double> pooled() const {
        std::vector<double> out = e2l;
        out.insert(out.end(), l2e.begin(), l2e.end());
        return out;
    }
};

// Text row of the last-layer cross attention restricted to the 37 visual
// state columns and renormalized over them.
inline std::vector<double> text_row_over_s(const AttnMatrix& t2v, int n_hist, int row) {
    std::vector<double> out(kNumSlots, 0.0);
    double mass = 0;
    for (int c = 0; c < kNumSlots; ++c) {
        out[static_cast<std::size_t>(c)] = t2v.at(row, n_hist + c);
        mass += out[static_cast<std::size_t>(c)];
    }
    if (mass > 0)
        for (double& v : out) v /= mass;
    return out;
}

// Teacher-forced effective attention over annotated (entity, landmark) pairs.
inline EAReport effective_attention(const model::Model& m, const world::WorldGraph& w,
                                    const std::vector<geldata::Episode>& episodes) {
    EAReport report;
    for (const geldata::Episode& ep : episodes) {
        auto steps = teacher_forced_steps(w, ep);
        std::map<std::string, std::size_t> step_of_vp;
        for (std::size_t t = 0; t < ep.path.size(); ++t) step_of_vp[ep.path[t]] = t;
        // collect annotated viewpoints
        std::set<std::string> annotated_vps;
        for (const geldata::LandmarkBox& l : ep.landmarks) annotated_vps.insert(l.viewpoint);
        for (const std::string& vp : annotated_vps) {
            auto pairs = objectives::build_masks(ep, vp);
            if (pairs.empty()) continue;
            auto it = step_of_vp.find(vp);
            if (it == step_of_vp.end()) {
                report.skipped_pairs += static_cast<int>(pairs.size());
                continue;
            }
            const StepContext& sc = steps[it->second];
            diff::Tape tape;
            model::EncoderOutputs enc =
                m.encode_step(tape, sc.instr, sc.past, sc.past_actions, sc.obs);
            if (enc.text_to_vis.empty()) throw ContractError("effective_attention: no cross layer");
            for (const objectives::GroundedPair& gp : pairs) {
                std::vector<int> cells;
                for (int c = 0; c < kNumViews; ++c)
                    if (gp.landmark_mask.m[static_cast<std::size_t>(c)] != 0.0) cells.push_back(c);
                for (int tok = gp.span.start; tok < gp.span.end; ++tok) {
                    auto row = text_row_over_s(enc.text_to_vis, enc.n_history_rows, tok);
                    double score = 0;
                    for (int c : cells) score += row[static_cast<std::size_t>(c)];
                    report.e2l.push_back(score);
                    report.e2l_cellmean.push_back(score / static_cast<double>(cells.size()));
                }
                const int span_len = gp.span.end - gp.span.start;
                for (int c : cells) {
                    double score = 0;
                    for (int tok = gp.span.start; tok < gp.span.end; ++tok)
                        score += enc.vis_to_text.at(enc.n_history_rows + c, tok);
                    report.l2e.push_back(score);
                    report.l2e_tokenmean.push_back(score / static_cast<double>(span_len));
                }
            }
        }
    }
    return report;
}

inline nlohmann::ordered_json ea_report_json(const EAReport& r) {
    nlohmann::ordered_json j;
    j["n_e2l"] = r.e2l.size();
    j["n_l2e"] = r.l2e.size();
    j["mean_e2l"] = r.mean_e2l();
    j["mean_l2e"] = r.mean_l2e();
    j["mean_e2l_cellmean"] = EAReport::mean_of(r.e2l_cellmean);
    j["mean_l2e_tokenmean"] = EAReport::mean_of(r.l2e_tokenmean);
    j["skipped_pairs"] = r.skipped_pairs;
    j["e2l"] = r.e2l;
    j["l2e"] = r.l2e;
    return j;
}

// Two-model comparison: per-direction and pooled Welch tests.
inline nlohmann::ordered_json ea_compare_json(const EAReport& a, const EAReport& b) {
    nlohmann::ordered_json j;
    auto put = [&](const char* key, const std::vector<double>& xa, const std::vector<double>& xb) {
        WelchResult r = welch_t_test(xa, xb);
        j[key] = {{"t", r.t},       {"df", r.df},        {"p_two_sided", r.p},
                  {"mean_a", r.mean_a}, {"mean_b", r.mean_b}, {"n_a", r.n_a},
                  {"n_b", r.n_b}};
    };
    put("e2l", a.e2l, b.e2l);
    put("l2e", a.l2e, b.l2e);
    put("pooled", a.pooled(), b.pooled());
    return j;
}

// ---------------------------------------------------------------------------
// heatmap export
// ---------------------------------------------------------------------------

// Writes the (L+1) x 37 cross-attention matrix of one step, min-max
// normalized to [0,1] (all zeros when the matrix is constant), as CSV and as
// a grayscale PGM image.
inline void export_attention_heatmap(const RolloutRecord& rec, int step,
                                     const std::string& csv_path, const std::string& pgm_path) {
    if (step < 0 || step >= static_cast<int>(rec.attn_t2v.size()))
        throw IndexError("heatmap: step " + std::to_string(step) + " not recorded");
    const AttnMatrix& t2v = rec.attn_t2v[static_cast<std::size_t>(step)];
    const int n_hist = rec.history_rows[static_cast<std::size_t>(step)];
    const int rows = t2v.rows;
    std::vector<double> m(static_cast<std::size_t>(rows) * kNumSlots);
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < kNumSlots; ++c) {
            const double v = t2v.at(r, n_hist + c);
            m[static_cast<std::size_t>(r) * kNumSlots + c] = v;
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    const double range = hi - lo;
    for (double& v : m) v = range > 0 ? (v - lo) / range : 0.0;

    std::ofstream csv(csv_path, std::ios::trunc);
    if (!csv) throw DataError("cannot write " + csv_path);
    char buf[48];
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < kNumSlots; ++c) {
            std::snprintf(buf, sizeof buf, "%.10g", m[static_cast<std::size_t>(r) * kNumSlots + c]);
            csv << (c ? "," : "") << buf;
        }
        csv << "\n";
    }
    std::ofstream pgm(pgm_path, std::ios::trunc);
    if (!pgm) throw DataError("cannot write " + pgm_path);
    pgm << "P2\n" << kNumSlots << " " << rows << "\n255\n";
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < kNumSlots; ++c) {
            const int g = static_cast<int>(
                std::lround(255.0 * m[static_cast<std::size_t>(r) * kNumSlots + c]));
            pgm << (c ? " " : "") << g;
        }
        pgm << "\n";
    }
}

// ---------------------------------------------------------------------------
// teacher-forced action accuracy (used by training snapshots)
// ---------------------------------------------------------------------------

inline double sap_accuracy(const model::Model& m, const world::WorldGraph& w,
                           const std::vector<geldata::Episode>& episodes) {
    long correct = 0, total = 0;
    for (const geldata::Episode& ep : episodes) {
        for (const StepContext& sc : teacher_forced_steps(w, ep)) {
            diff::Tape tape;
            model::EncoderOutputs enc =
                m.encode_step(tape, sc.instr, sc.past, sc.past_actions, sc.obs);
            diff::Tensor probs = m.predict_action(tape, enc, sc.candidates);
            int best = 0;
            for (int s = 1; s < kNumSlots; ++s)
                if (probs.at(s) > probs.at(best)) best = s;
            correct += (best == sc.expert_slot) ? 1 : 0;
            total += 1;
        }
    }
    return total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

}  // namespace gela::eval
