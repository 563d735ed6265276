#pragma once

// The eight training objectives: the three grounded adaptive losses
// (entity phrase prediction, landmark box prediction, entity-landmark
// semantic alignment) and the five retained proxy losses (MLM, MRC, ITM,
// SAP, SPREL), plus the mask construction that turns gel-v1 annotations
// into supervision targets.

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "gela/common.hpp"
#include "gela/error.hpp"
#include "gela/geldata.hpp"
#include "gela/model.hpp"
#include "gela/rng.hpp"
#include "gela/tensor.hpp"

namespace gela::objectives {

using diff::Tape;
using diff::Tensor;

// ---------------------------------------------------------------------------
// domain types
// ---------------------------------------------------------------------------

// Binary vector over the text sequence (classification slot + L tokens).
struct EntityMask {
    std::vector<double> m;

    static EntityMask from_span(int seq_len, const geldata::Span& span) {
        if (span.start < 1 || span.end <= span.start || span.end > seq_len)
            throw MaskError("entity span [" + std::to_string(span.start) + "," +
                            std::to_string(span.end) + ") invalid for length " +
                            std::to_string(seq_len));
        EntityMask em;
        em.m.assign(static_cast<std::size_t>(seq_len), 0.0);
        for (int i = span.start; i < span.end; ++i) em.m[static_cast<std::size_t>(i)] = 1.0;
        return em;
    }

    int count() const {
        int c = 0;
        for (double v : m) c += v != 0.0;
        return c;
    }

    void validate() const {
        if (m.empty() || m[0] != 0.0)
            throw MaskError("entity mask: classification slot must be 0");
        if (count() == 0) throw MaskError("entity mask: no token positions set");
    }
};

// Binary vector over the 37 visual-state slots (36 views + stop).
struct LandmarkMask {
    std::vector<double> m;

    static LandmarkMask from_cells(const std::vector<int>& cells) {
        LandmarkMask lm;
        lm.m.assign(kNumSlots, 0.0);
        for (int c : cells) {
            if (c < 0 || c >= kNumViews)
                throw MaskError("landmark mask: cell " + std::to_string(c) + " out of range");
            lm.m[static_cast<std::size_t>(c)] = 1.0;
        }
        return lm;
    }

    int count() const {
        int c = 0;
        for (double v : m) c += v != 0.0;
        return c;
    }

    void validate() const {
        if (m.size() != kNumSlots) throw MaskError("landmark mask must have 37 entries");
        if (m[kStopSlot] != 0.0) throw MaskError("landmark mask: stop slot must be 0");
        if (count() == 0) throw MaskError("landmark mask: no view set");
    }
};

// Center-form box, normalized panorama coordinates.
struct BoxTarget {
    double x = 0, y = 0, w = 0, h = 0;

    static BoxTarget from_corner(const geldata::Box& b) {
        return {b.x + b.w / 2, b.y + b.h / 2, b.w, b.h};
    }

    void validate() const {
        if (w <= 0 || h <= 0)
            throw BoxError("degenerate box target (w, h) = (" + std::to_string(w) + ", " +
                           std::to_string(h) + ")");
        if (x < 0 || x > 1 || y < 0 || y > 1 || w > 1 || h > 1)
            throw BoxError("box target outside the unit frame");
    }
};

struct GelaWeights {
    double alpha = 1.0;
    double beta = 1.0;
    double gamma = 1.0;
    double lambda = 1.0;
    double tau = 0.07;

    void validate() const {
        if (alpha <= 0 || beta <= 0 || gamma <= 0 || lambda <= 0 || tau <= 0)
            throw ContractError("GelaWeights: all weights must be positive");
    }
};

struct PosPair {
    int patch = 0;  // 0..36
    int token = 0;  // 0..L
    auto operator<=>(const PosPair&) const = default;
};

// Two-layer feed-forward head fetched from the parameter store.
struct FfnHead {
    Tensor w1, b1, w2, b2;

    static FfnHead from(const model::ParamStore& store, const std::string& prefix) {
        return {store.get(prefix + ".w1"), store.get(prefix + ".b1"), store.get(prefix + ".w2"),
                store.get(prefix + ".b2")};
    }

    Tensor apply(Tape& tape, Tensor x) const {
        Tensor b1r = tape.tile_rows(tape.reshape(b1, {1, b1.cols()}), x.rows());
        Tensor h = tape.gelu(tape.add(tape.matmul(x, w1), b1r));
        Tensor b2r = tape.tile_rows(tape.reshape(b2, {1, b2.cols()}), x.rows());
        return tape.add(tape.matmul(h, w2), b2r);
    }
};

// Scalar pick out of a 1-D tensor.
inline Tensor pick(Tape& tape, Tensor x, int idx) {
    const int n = x.cols();
    if (idx < 0 || idx >= n) throw IndexError("pick: index " + std::to_string(idx) + " out of range");
    return tape.reshape(tape.gather_rows(tape.reshape(x, {n, 1}), {idx}), {1});
}

// ---------------------------------------------------------------------------
// entity phrase prediction
// ---------------------------------------------------------------------------

// Uniform target distribution over the masked token positions. The residual
// on the last set position makes the entries sum to exactly 1.
inline std::vector<double> epp_target(const EntityMask& m_z) {
    m_z.validate();
    const int k = m_z.count();
    std::vector<double> t(m_z.m.size(), 0.0);
    int last = -1;
    double acc = 0.0;
    for (std::size_t i = 0; i < m_z.m.size(); ++i)
        if (m_z.m[i] != 0.0) last = static_cast<int>(i);
    for (std::size_t i = 0; i < m_z.m.size(); ++i) {
        if (m_z.m[i] == 0.0 || static_cast<int>(i) == last) continue;
        t[i] = 1.0 / k;
        acc += t[i];
    }
    t[static_cast<std::size_t>(last)] = 1.0 - acc;
    return t;
}

// Soft-target cross-entropy between the head scores on the mean landmark
// patch representation and the uniform span distribution.
inline Tensor epp_loss(Tape& tape, Tensor S, const LandmarkMask& m_s, const EntityMask& m_z,
                       const FfnHead& head) {
    m_s.validate();
    m_z.validate();
    if (S.rows() != kNumSlots) throw ShapeError("epp_loss: S must have 37 rows");
    const int seq_len = static_cast<int>(m_z.m.size());
    Tensor pooled = tape.reshape(tape.masked_mean(S, m_s.m), {1, S.cols()});
    Tensor logits = head.apply(tape, pooled);
    if (logits.cols() < seq_len)
        throw ShapeError("epp_loss: head emits " + std::to_string(logits.cols()) +
                         " positions, instance needs " + std::to_string(seq_len));
    if (logits.cols() > seq_len) logits = tape.slice_cols(logits, 0, seq_len);
    Tensor lsm = tape.log_softmax(logits);
    std::vector<double> neg_t = epp_target(m_z);
    for (double& v : neg_t) v = -v;
    return tape.sum(tape.mul(lsm, Tensor::from({1, seq_len}, std::move(neg_t))));
}

// ---------------------------------------------------------------------------
// landmark box prediction
// ---------------------------------------------------------------------------

struct LbpParts {
    Tensor smooth_l1;
    Tensor giou_term;  // 1 - GIoU, in [0, 2]
};

// Loss pieces for an arbitrary predicted box tensor (4,) in center form.
// Box coordinates must be strictly positive in w and h (sigmoid outputs are).
inline LbpParts lbp_parts(Tape& tape, Tensor pred, const BoxTarget& target) {
    target.validate();
    if (pred.size() != 4) throw ShapeError("lbp_parts: predicted box must have 4 entries");
    Tensor p = tape.reshape(pred, {1, 4});
    Tensor t = Tensor::from({1, 4}, {target.x, target.y, target.w, target.h});

    // smooth L1 summed over the 4 coordinates, transition point 1
    Tensor d = tape.abs(tape.sub(p, t));
    Tensor m = tape.minimum(d, Tensor::full({1, 4}, 1.0));
    Tensor huber = tape.add(tape.scale(tape.mul(m, m), 0.5), tape.sub(d, m));
    Tensor sl1 = tape.sum(huber);

    // generalized IoU on corner-form boxes
    auto coord = [&](Tensor box, int i) { return tape.slice_cols(box, i, 1); };
    Tensor px = coord(p, 0), py = coord(p, 1), pw = coord(p, 2), ph = coord(p, 3);
    Tensor px1 = tape.sub(px, tape.scale(pw, 0.5)), px2 = tape.add(px, tape.scale(pw, 0.5));
    Tensor py1 = tape.sub(py, tape.scale(ph, 0.5)), py2 = tape.add(py, tape.scale(ph, 0.5));
    const double tx1 = target.x - target.w / 2, tx2 = target.x + target.w / 2;
    const double ty1 = target.y - target.h / 2, ty2 = target.y + target.h / 2;
    auto c1 = [&](double v) { return Tensor::from({1, 1}, {v}); };
    Tensor iw = tape.relu(tape.sub(tape.minimum(px2, c1(tx2)), tape.maximum(px1, c1(tx1))));
    Tensor ih = tape.relu(tape.sub(tape.minimum(py2, c1(ty2)), tape.maximum(py1, c1(ty1))));
    Tensor inter = tape.mul(iw, ih);
    Tensor area_p = tape.mul(pw, ph);
    Tensor uni = tape.sub(tape.add_scalar(area_p, target.w * target.h), inter);
    Tensor hw = tape.sub(tape.maximum(px2, c1(tx2)), tape.minimum(px1, c1(tx1)));
    Tensor hh = tape.sub(tape.maximum(py2, c1(ty2)), tape.minimum(py1, c1(ty1)));
    Tensor hull = tape.mul(hw, hh);
    Tensor giou = tape.sub(tape.div(inter, uni), tape.div(tape.sub(hull, uni), hull));
    Tensor giou_term = tape.reshape(tape.add_scalar(tape.scale(giou, -1.0), 1.0), {1});
    return {tape.reshape(sl1, {1}), giou_term};
}

struct LbpResult {
    Tensor loss;
    Tensor pred_box;  // (4,) center form
};

inline LbpResult lbp_loss(Tape& tape, Tensor Z, const EntityMask& m_z, const BoxTarget& target,
                          const FfnHead& head, double lambda = 1.0) {
    m_z.validate();
    if (Z.rows() != static_cast<int>(m_z.m.size()))
        throw ShapeError("lbp_loss: Z rows " + std::to_string(Z.rows()) + " != mask length " +
                         std::to_string(m_z.m.size()));
    Tensor pooled = tape.reshape(tape.masked_mean(Z, m_z.m), {1, Z.cols()});
    Tensor pred = tape.reshape(tape.sigmoid(head.apply(tape, pooled)), {4});
    LbpParts parts = lbp_parts(tape, pred, target);
    Tensor loss = tape.add(parts.smooth_l1, tape.scale(parts.giou_term, lambda));
    return {loss, pred};
}

// Plain IoU of two center-form boxes (evaluation metric, not differentiable).
inline double box_iou(const BoxTarget& a, const BoxTarget& b) {
    const double ix = std::max(0.0, std::min(a.x + a.w / 2, b.x + b.w / 2) -
                                        std::max(a.x - a.w / 2, b.x - b.w / 2));
    const double iy = std::max(0.0, std::min(a.y + a.h / 2, b.y + b.h / 2) -
                                        std::max(a.y - a.h / 2, b.y - b.h / 2));
    const double inter = ix * iy;
    const double uni = a.w * a.h + b.w * b.h - inter;
    return uni > 0 ? inter / uni : 0.0;
}

// ---------------------------------------------------------------------------
// entity-landmark semantic alignment
// ---------------------------------------------------------------------------

// Sum over annotated patches of the mean contrastive term against all L+1
// tokens, plus the symmetric sum over annotated tokens against all 37
// patches, halved. Pair order is irrelevant (set semantics); the
// classification and stop slots may not appear in the positive set.
inline Tensor elsa_loss(Tape& tape, Tensor Z, Tensor S, const std::vector<PosPair>& positive_pairs,
                        double tau) {
    if (tau <= 0) throw ContractError("elsa_loss: tau must be positive");
    if (S.rows() != kNumSlots) throw ShapeError("elsa_loss: S must have 37 rows");
    const int n_tok = Z.rows();
    std::set<PosPair> pairs(positive_pairs.begin(), positive_pairs.end());
    if (pairs.empty()) throw MaskError("elsa_loss: empty positive set");
    for (const PosPair& p : pairs) {
        if (p.patch < 0 || p.patch >= kNumSlots || p.token < 0 || p.token >= n_tok)
            throw MaskError("elsa_loss: pair (" + std::to_string(p.patch) + "," +
                            std::to_string(p.token) + ") out of range");
        if (p.patch == kStopSlot)
            throw MaskError("elsa_loss: stop slot cannot be a positive patch");
        if (p.token == 0)
            throw MaskError("elsa_loss: classification slot cannot be a positive token");
    }
    std::vector<int> per_patch(kNumSlots, 0), per_token(static_cast<std::size_t>(n_tok), 0);
    for (const PosPair& p : pairs) {
        per_patch[static_cast<std::size_t>(p.patch)] += 1;
        per_token[static_cast<std::size_t>(p.token)] += 1;
    }

    Tensor sim = tape.scale(tape.matmul(S, tape.transpose(Z)), 1.0 / tau);  // (37, L+1)
    Tensor ls_rows = tape.log_softmax(sim);
    std::vector<double> ws(static_cast<std::size_t>(kNumSlots) * n_tok, 0.0);
    for (const PosPair& p : pairs)
        ws[static_cast<std::size_t>(p.patch) * n_tok + p.token] =
            -1.0 / per_patch[static_cast<std::size_t>(p.patch)];
    Tensor loss_s = tape.sum(tape.mul(ls_rows, Tensor::from({kNumSlots, n_tok}, std::move(ws))));

    Tensor lz_rows = tape.log_softmax(tape.transpose(sim));  // (L+1, 37)
    std::vector<double> wz(static_cast<std::size_t>(n_tok) * kNumSlots, 0.0);
    for (const PosPair& p : pairs)
        wz[static_cast<std::size_t>(p.token) * kNumSlots + p.patch] =
            -1.0 / per_token[static_cast<std::size_t>(p.token)];
    Tensor loss_z = tape.sum(tape.mul(lz_rows, Tensor::from({n_tok, kNumSlots}, std::move(wz))));

    return tape.scale(tape.add(loss_s, loss_z), 0.5);
}

// ---------------------------------------------------------------------------
// combined adaptive loss
// ---------------------------------------------------------------------------

inline Tensor gela_loss(Tape& tape, Tensor epp, Tensor lbp, Tensor elsa, const GelaWeights& w) {
    w.validate();
    return tape.add(tape.add(tape.scale(epp, w.alpha), tape.scale(lbp, w.beta)),
                    tape.scale(elsa, w.gamma));
}

// ---------------------------------------------------------------------------
// proxy task: masked language modeling
// ---------------------------------------------------------------------------

struct MaskedToken {
    int position = 0;
    int true_id = 0;
};

struct MlmInstance {
    model::Instruction masked;
    std::vector<MaskedToken> targets;
};

// Each word position is replaced by the reserved mask id with the given
// rate. Raises SkipSignal when nothing gets masked.
inline MlmInstance apply_mlm_masking(const model::Instruction& instr, Rng& rng,
                                     double rate = 0.15) {
    MlmInstance out;
    out.masked = instr;
    for (std::size_t i = 1; i < instr.tokens.size(); ++i) {
        if (!instr.is_live(i)) continue;
        if (rng.uniform() < rate) {
            out.targets.push_back({static_cast<int>(i), instr.tokens[i]});
            out.masked.tokens[i] = kMaskId;
        }
    }
    if (out.targets.empty()) throw SkipSignal("mlm: no token masked");
    return out;
}

struct TrajectoryContext {
    std::vector<model::Panorama> past;
    std::vector<int> actions;
    model::Panorama obs;
};

// Mean negative log-likelihood of the original words at masked positions.
inline Tensor mlm_loss(Tape& tape, const model::Model& m, const MlmInstance& inst,
                       const TrajectoryContext& ctx) {
    if (inst.targets.empty()) throw ContractError("mlm_loss: no masked positions");
    model::EncoderOutputs enc = m.encode_step(tape, inst.masked, ctx.past, ctx.actions, ctx.obs);
    std::vector<int> rows;
    for (const MaskedToken& t : inst.targets) rows.push_back(t.position);
    Tensor picked = tape.gather_rows(enc.Z, rows);
    Tensor logits = tape.add(tape.matmul(picked, m.params().get("head.mlm.w")),
                             tape.tile_rows(tape.reshape(m.params().get("head.mlm.b"),
                                                         {1, m.config().vocab_size}),
                                            static_cast<int>(rows.size())));
    Tensor lsm = tape.log_softmax(logits);
    std::vector<double> w(static_cast<std::size_t>(rows.size()) * m.config().vocab_size, 0.0);
    for (std::size_t i = 0; i < inst.targets.size(); ++i)
        w[i * m.config().vocab_size + inst.targets[i].true_id] =
            -1.0 / static_cast<double>(inst.targets.size());
    return tape.sum(tape.mul(lsm, Tensor::from({static_cast<int>(rows.size()),
                                                m.config().vocab_size},
                                               std::move(w))));
}

// ---------------------------------------------------------------------------
// proxy task: masked region classification
// ---------------------------------------------------------------------------

// Indices of views to zero, redrawn until non-empty.
inline std::vector<int> sample_mrc_zeroing(Rng& rng, double rate = 0.15) {
    for (;;) {
        std::vector<int> views;
        for (int v = 0; v < kNumViews; ++v)
            if (rng.uniform() < rate) views.push_back(v);
        if (!views.empty()) return views;
    }
}

// Mean KL divergence between teacher class distributions and the predicted
// distributions at the zeroed views.
inline Tensor mrc_loss(Tape& tape, const model::Model& m, const model::Instruction& instr,
                       const TrajectoryContext& ctx, const std::vector<int>& zeroed_views,
                       const std::vector<std::vector<double>>& targets) {
    if (zeroed_views.empty()) throw ContractError("mrc_loss: no zeroed views");
    if (targets.size() != zeroed_views.size())
        throw ContractError("mrc_loss: one target distribution per zeroed view required");
    double target_entropy_sum = 0.0;
    for (const auto& p : targets) {
        if (static_cast<int>(p.size()) != kNumClasses)
            throw ContractError("mrc_loss: target must have " + std::to_string(kNumClasses) +
                                " classes");
        double s = 0;
        for (double v : p) {
            if (v < 0) throw ContractError("mrc_loss: negative target probability");
            s += v;
            if (v > 0) target_entropy_sum += v * std::log(v);
        }
        if (std::fabs(s - 1.0) > 1e-9) throw ContractError("mrc_loss: target not normalized");
    }
    model::Panorama zeroed = ctx.obs;
    for (int v : zeroed_views)
        std::fill(zeroed.views[static_cast<std::size_t>(v)].feature.begin(),
                  zeroed.views[static_cast<std::size_t>(v)].feature.end(), 0.0);
    model::EncoderOutputs enc = m.encode_step(tape, instr, ctx.past, ctx.actions, zeroed);
    Tensor rows = tape.gather_rows(enc.S, zeroed_views);
    const int n = static_cast<int>(zeroed_views.size());
    Tensor logits = tape.add(tape.matmul(rows, m.params().get("head.mrc.w")),
                             tape.tile_rows(tape.reshape(m.params().get("head.mrc.b"),
                                                         {1, kNumClasses}),
                                            n));
    Tensor lsm = tape.log_softmax(logits);
    std::vector<double> w(static_cast<std::size_t>(n) * kNumClasses, 0.0);
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < kNumClasses; ++c)
            w[static_cast<std::size_t>(i) * kNumClasses + c] =
                -targets[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)] / n;
    Tensor cross = tape.sum(tape.mul(lsm, Tensor::from({n, kNumClasses}, std::move(w))));
    return tape.add_scalar(cross, target_entropy_sum / n);
}

// ---------------------------------------------------------------------------
// proxy task: instruction trajectory matching
// ---------------------------------------------------------------------------

// NCE over one positive and four negative scores.
inline Tensor itm_nce(Tape& tape, Tensor scores) {
    if (scores.size() != 5) throw ShapeError("itm_nce: expected 5 scores");
    Tensor lsm = tape.log_softmax(tape.reshape(scores, {5}));
    return tape.scale(pick(tape, lsm, 0), -1.0);
}

// Temporal rearrangement of a trajectory that is guaranteed to differ from
// the original order; retries the draw up to 10 times.
inline TrajectoryContext shuffle_trajectory(const TrajectoryContext& ctx, Rng& rng) {
    const std::size_t n = ctx.past.size();
    if (n < 2) throw ShuffleError("trajectory too short to rearrange");
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    for (int tries = 0; tries < 10; ++tries) {
        rng.shuffle(perm);
        bool identity = true;
        for (std::size_t i = 0; i < n; ++i) identity = identity && perm[i] == i;
        if (!identity) {
            TrajectoryContext out;
            out.obs = ctx.obs;
            for (std::size_t i = 0; i < n; ++i) {
                out.past.push_back(ctx.past[perm[i]]);
                out.actions.push_back(ctx.actions[perm[i]]);
            }
            return out;
        }
    }
    throw ShuffleError("could not draw a distinct rearrangement in 10 tries");
}

inline Tensor itm_score(Tape& tape, const model::Model& m, const model::Instruction& instr,
                        const TrajectoryContext& ctx) {
    model::EncoderOutputs enc = m.encode_step(tape, instr, ctx.past, ctx.actions, ctx.obs);
    Tensor z_cls = tape.slice_rows(enc.Z, 0, 1);
    Tensor y_cls = tape.slice_rows(enc.Y, 0, 1);
    return tape.matmul(tape.matmul(z_cls, m.params().get("head.itm.w")), tape.transpose(y_cls));
}

// Positive score against two in-batch negatives and two temporal shuffles.
inline Tensor itm_loss(Tape& tape, const model::Model& m, const model::Instruction& instr,
                       const TrajectoryContext& positive,
                       const std::vector<TrajectoryContext>& batch_negatives, Rng& rng) {
    if (batch_negatives.size() < 2)
        throw ContractError("itm_loss: need at least 2 other trajectories in the batch");
    if (positive.past.size() < 2) throw ContractError("itm_loss: positive trajectory too short");
    std::vector<const TrajectoryContext*> negs;
    std::vector<std::size_t> order(batch_negatives.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    negs.push_back(&batch_negatives[order[0]]);
    negs.push_back(&batch_negatives[order[1]]);
    TrajectoryContext sh1 = shuffle_trajectory(positive, rng);
    TrajectoryContext sh2 = shuffle_trajectory(positive, rng);
    Tensor scores = itm_score(tape, m, instr, positive);
    for (const TrajectoryContext* ctx : {negs[0], negs[1]}) {
        scores = tape.concat(scores, itm_score(tape, m, instr, *ctx), 0);
    }
    scores = tape.concat(scores, itm_score(tape, m, instr, sh1), 0);
    scores = tape.concat(scores, itm_score(tape, m, instr, sh2), 0);
    return itm_nce(tape, tape.reshape(scores, {5}));
}

// ---------------------------------------------------------------------------
// proxy task: single-step action prediction
// ---------------------------------------------------------------------------

inline Tensor sap_loss(Tape& tape, const model::Model& m, const model::EncoderOutputs& enc,
                       const std::vector<int>& navigable_slots, int expert_slot) {
    const bool in_candidates =
        expert_slot == kStopSlot ||
        std::find(navigable_slots.begin(), navigable_slots.end(), expert_slot) !=
            navigable_slots.end();
    if (!in_candidates)
        throw DataError("sap_loss: expert slot " + std::to_string(expert_slot) +
                        " is not a candidate");
    Tensor lsm = m.predict_action_log(tape, enc, navigable_slots);
    return tape.scale(pick(tape, lsm, expert_slot), -1.0);
}

// ---------------------------------------------------------------------------
// proxy task: spatial relationship prediction
// ---------------------------------------------------------------------------

struct SprelInstance {
    model::View a, b;      // possibly with visual or angle parts zeroed
    double d_heading = 0;  // wrapped to (-pi, pi]
    double d_elevation = 0;
};

// Relative angles of view j with respect to view i.
inline std::pair<double, double> relative_view_angles(const model::View& vi,
                                                      const model::View& vj) {
    return {wrap_angle_pi(vj.heading - vi.heading), vj.elevation - vi.elevation};
}

// Draws two distinct views and applies the 30% visual-or-angle dropout.
inline SprelInstance sample_sprel_pair(const model::Panorama& pano, Rng& rng,
                                       double drop_rate = 0.30) {
    const int i = static_cast<int>(rng.uniform_index(kNumViews));
    int j = static_cast<int>(rng.uniform_index(kNumViews - 1));
    if (j >= i) ++j;
    SprelInstance inst;
    inst.a = pano.views[static_cast<std::size_t>(i)];
    inst.b = pano.views[static_cast<std::size_t>(j)];
    auto [dh, de] = relative_view_angles(inst.a, inst.b);
    inst.d_heading = dh;
    inst.d_elevation = de;
    for (model::View* v : {&inst.a, &inst.b}) {
        const double u = rng.uniform();
        if (u < drop_rate / 2) {
            std::fill(v->feature.begin(), v->feature.end(), 0.0);
        } else if (u < drop_rate) {
            v->heading = 0.0;
            v->elevation = 0.0;
        }
    }
    return inst;
}

// Squared error on the relative heading and elevation predicted from the
// concatenated raw view embeddings.
inline Tensor sprel_loss(Tape& tape, const model::Model& m, const SprelInstance& inst) {
    const int fdim = m.config().view_feature_dim;
    auto row_of = [&](const model::View& v) {
        std::vector<double> data(static_cast<std::size_t>(fdim) + 4);
        std::copy(v.feature.begin(), v.feature.end(), data.begin());
        data[static_cast<std::size_t>(fdim) + 0] = std::sin(v.heading);
        data[static_cast<std::size_t>(fdim) + 1] = std::cos(v.heading);
        data[static_cast<std::size_t>(fdim) + 2] = std::sin(v.elevation);
        data[static_cast<std::size_t>(fdim) + 3] = std::cos(v.elevation);
        return Tensor::from({1, fdim + 4}, std::move(data));
    };
    Tensor ea = tape.add(tape.matmul(row_of(inst.a), m.params().get("obs.w_in")),
                         tape.reshape(m.params().get("obs.b_in"), {1, m.config().d_model}));
    Tensor eb = tape.add(tape.matmul(row_of(inst.b), m.params().get("obs.w_in")),
                         tape.reshape(m.params().get("obs.b_in"), {1, m.config().d_model}));
    Tensor pair = tape.concat(ea, eb, 1);
    Tensor pred = FfnHead::from(m.params(), "head.sprel").apply(tape, pair);
    Tensor err = tape.sub(pred, Tensor::from({1, 2}, {inst.d_heading, inst.d_elevation}));
    return tape.sum(tape.mul(err, err));
}

// ---------------------------------------------------------------------------
// mask construction from annotations
// ---------------------------------------------------------------------------

struct GroundedPair {
    std::string label;
    geldata::Span span;
    EntityMask entity_mask;
    LandmarkMask landmark_mask;
    BoxTarget box;
};

// One triple per (entity, viewpoint) box. A wrap-split pair is treated as a
// single landmark: cell union of both pieces, box target from the larger
// piece.
inline std::vector<GroundedPair> build_masks(const geldata::Episode& ep,
                                             const std::string& viewpoint,
                                             double coverage = geldata::kDefaultCellCoverage) {
    std::map<std::string, std::vector<const geldata::LandmarkBox*>> boxes_here;
    for (const geldata::LandmarkBox& l : ep.landmarks)
        if (l.viewpoint == viewpoint) boxes_here[l.label].push_back(&l);

    std::vector<GroundedPair> out;
    const int seq_len = static_cast<int>(ep.instruction.tokens.size());
    for (const geldata::Entity& e : ep.entities) {
        auto it = boxes_here.find(e.label);
        if (it == boxes_here.end()) continue;
        const auto& pieces = it->second;
        std::vector<int> cells;
        const geldata::LandmarkBox* main = pieces[0];
        for (const geldata::LandmarkBox* piece : pieces) {
            for (int c : geldata::covered_cells(piece->box, coverage)) cells.push_back(c);
            if (piece->box.area() > main->box.area()) main = piece;
        }
        std::sort(cells.begin(), cells.end());
        cells.erase(std::unique(cells.begin(), cells.end()), cells.end());
        GroundedPair gp;
        gp.label = e.label;
        gp.span = e.span;
        gp.entity_mask = EntityMask::from_span(seq_len, e.span);
        gp.landmark_mask = LandmarkMask::from_cells(cells);
        gp.box = BoxTarget::from_corner(main->box);
        out.push_back(std::move(gp));
    }
    return out;
}

// Positive (patch, token) pairs of every grounded pair at one viewpoint.
inline std::vector<PosPair> elsa_pairs(const std::vector<GroundedPair>& pairs) {
    std::vector<PosPair> out;
    for (const GroundedPair& gp : pairs)
        for (int cell = 0; cell < kNumViews; ++cell) {
            if (gp.landmark_mask.m[static_cast<std::size_t>(cell)] == 0.0) continue;
            for (int tok = gp.span.start; tok < gp.span.end; ++tok) out.push_back({cell, tok});
        }
    return out;
}

}  // namespace gela::objectives
