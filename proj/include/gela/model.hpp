#pragma once

// Miniature four-encoder navigation transformer: language encoder, history
// encoder, vision encoder, and a cross-modal encoder whose visual stream is
// the concatenation of history and current observation. Produces the text
// sequence Z, history sequence Y and visual state S consumed by the training
// objectives and by action prediction.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "gela/common.hpp"
#include "gela/error.hpp"
#include "gela/rng.hpp"
#include "gela/tensor.hpp"

namespace gela::model {

using diff::Shape;
using diff::Tape;
using diff::Tensor;

inline constexpr double kMaskBias = -1e30;
inline constexpr int kMaxHistorySteps = 32;

struct ModelConfig {
    int vocab_size = 256;
    int d_model = 64;
    int n_layers_text = 2;
    int n_layers_cross = 2;
    int n_heads = 4;
    int max_instruction_len = 24;  // L: word tokens after the leading cls slot
    int view_feature_dim = 16;
    int ffn_hidden = 128;
    std::uint64_t seed = 1;

    void validate() const {
        if (vocab_size < 4) throw ContractError("ModelConfig: vocab_size must cover reserved ids");
        if (d_model < 1 || n_layers_text < 0 || n_layers_cross < 0 || n_heads < 1 ||
            max_instruction_len < 1 || view_feature_dim < 1 || ffn_hidden < 1)
            throw ContractError("ModelConfig: counts must be positive");
        if (d_model % n_heads != 0)
            throw ContractError("ModelConfig: d_model must be divisible by n_heads");
    }
};

// Token sequence with the leading classification slot at position 0.
// `live` marks real positions; padded positions are excluded from attention.
struct Instruction {
    std::vector<int> tokens;
    std::vector<std::uint8_t> live;  // empty = all live

    static Instruction of(std::vector<int> tokens) {
        Instruction ins;
        ins.tokens = std::move(tokens);
        return ins;
    }

    bool is_live(std::size_t i) const { return live.empty() ? true : live[i] != 0; }
};

struct View {
    std::vector<double> feature;
    double heading = 0.0;
    double elevation = 0.0;
};

struct Panorama {
    std::vector<View> views;  // exactly 36, heading-major order

    void validate(int feature_dim) const {
        if (static_cast<int>(views.size()) != kNumViews)
            throw ShapeError("Panorama: expected 36 views, got " + std::to_string(views.size()));
        for (const View& v : views)
            if (static_cast<int>(v.feature.size()) != feature_dim)
                throw ShapeError("Panorama: view feature dim " + std::to_string(v.feature.size()) +
                                 " != " + std::to_string(feature_dim));
    }
};

// Head-averaged attention snapshot (detached from the tape).
struct AttnMatrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> w;
    double at(int r, int c) const { return w[static_cast<std::size_t>(r) * cols + c]; }
    bool empty() const { return w.empty(); }
};

struct EncoderOutputs {
    Tensor Z;  // (len+1) x d text sequence, cls at row 0
    Tensor Y;  // (t+1) x d history sequence, global slot at row 0
    Tensor S;  // 37 x d visual state, stop at row 36
    AttnMatrix text_to_vis;  // last cross layer, text queries over [history; S]
    AttnMatrix vis_to_text;  // last cross layer, [history; S] queries over text
    int n_history_rows = 0;
};

// Named parameter set. Iteration order is lexicographic, which keeps
// checkpoints and optimizer sweeps deterministic.
class ParamStore {
public:
    Tensor& create(const std::string& name, Shape shape, Rng& rng, double init_scale) {
        if (params_.count(name)) throw ContractError("ParamStore: duplicate param " + name);
        std::vector<double> v(diff::shape_numel(shape));
        for (double& x : v) x = init_scale == 0.0 ? 0.0 : rng.uniform(-init_scale, init_scale);
        auto [it, ok] = params_.emplace(name, Tensor::from(std::move(shape), std::move(v), true));
        return it->second;
    }
    Tensor& create_const(const std::string& name, Shape shape, double fill) {
        if (params_.count(name)) throw ContractError("ParamStore: duplicate param " + name);
        auto [it, ok] = params_.emplace(name, Tensor::full(std::move(shape), fill, true));
        return it->second;
    }
    const Tensor& get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw ContractError("ParamStore: unknown param " + name);
        return it->second;
    }
    bool has(const std::string& name) const { return params_.count(name) != 0; }
    std::size_t size() const { return params_.size(); }
    void zero_grads() {
        for (auto& [n, t] : params_) t.zero_grad();
    }
    const std::map<std::string, Tensor>& items() const { return params_; }
    std::map<std::string, Tensor>& items_mut() { return params_; }

private:
    std::map<std::string, Tensor> params_;
};

class Model {
public:
    explicit Model(ModelConfig cfg) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(cfg_.seed);
        init_params(rng);
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    // ------------------------------------------------------------------
    // language encoder
    // ------------------------------------------------------------------
    Tensor encode_instruction(Tape& tape, const Instruction& instr) const {
        validate_instruction(instr);
        const int n = static_cast<int>(instr.tokens.size());
        Tensor emb = tape.embedding(params_.get("text.tok_emb"), instr.tokens);
        std::vector<int> positions(n);
        for (int i = 0; i < n; ++i) positions[i] = i;
        emb = tape.add(emb, tape.embedding(params_.get("text.pos_emb"), positions));
        emb = tape.layer_norm(emb, params_.get("text.emb_ln.g"), params_.get("text.emb_ln.b"));
        const std::vector<double> bias = key_bias_of(instr);
        for (int l = 0; l < cfg_.n_layers_text; ++l)
            emb = encoder_layer(tape, emb, "text.l" + std::to_string(l), bias);
        return ln(tape, emb, "text.final_ln");
    }

    // ------------------------------------------------------------------
    // vision encoder
    // ------------------------------------------------------------------
    // 36 projected view rows plus the learned stop row as row 36.
    Tensor encode_observation(Tape& tape, const Panorama& pano) const {
        Tensor rows = project_views(tape, pano);
        Tensor stop = tape.reshape(params_.get("obs.stop"), {1, cfg_.d_model});
        Tensor out = tape.concat(rows, stop, 0);
        return tape.layer_norm(out, params_.get("obs.ln.g"), params_.get("obs.ln.b"));
    }

    // View rows without the stop slot and without the output layer norm;
    // used by history pooling and by the spatial-relationship task.
    Tensor project_views(Tape& tape, const Panorama& pano) const {
        pano.validate(cfg_.view_feature_dim);
        const int fdim = cfg_.view_feature_dim + 4;
        std::vector<double> data(static_cast<std::size_t>(kNumViews) * fdim);
        for (int i = 0; i < kNumViews; ++i) {
            const View& v = pano.views[static_cast<std::size_t>(i)];
            double* row = data.data() + static_cast<std::size_t>(i) * fdim;
            std::copy(v.feature.begin(), v.feature.end(), row);
            row[cfg_.view_feature_dim + 0] = std::sin(v.heading);
            row[cfg_.view_feature_dim + 1] = std::cos(v.heading);
            row[cfg_.view_feature_dim + 2] = std::sin(v.elevation);
            row[cfg_.view_feature_dim + 3] = std::cos(v.elevation);
        }
        Tensor in = Tensor::from({kNumViews, fdim}, std::move(data));
        return add_row_bias(tape, tape.matmul(in, params_.get("obs.w_in")), "obs.b_in");
    }

    // ------------------------------------------------------------------
    // history encoder
    // ------------------------------------------------------------------
    // Per past step: a learned query attention-pools that step's 36 view
    // embeddings, fused with the embedding of the action taken; then one
    // temporal self-attention layer over steps. Row 0 is the global slot.
    Tensor encode_history(Tape& tape, const std::vector<Panorama>& past,
                          const std::vector<int>& past_actions) const {
        if (past.size() != past_actions.size())
            throw ContractError("encode_history: " + std::to_string(past.size()) +
                                " panoramas vs " + std::to_string(past_actions.size()) +
                                " actions");
        const int t = static_cast<int>(past.size());
        if (t > kMaxHistorySteps)
            throw LengthError("encode_history: " + std::to_string(t) + " steps exceeds cap " +
                              std::to_string(kMaxHistorySteps));
        Tensor rows = tape.reshape(params_.get("hist.cls"), {1, cfg_.d_model});
        for (int i = 0; i < t; ++i) {
            Tensor views = project_views(tape, past[static_cast<std::size_t>(i)]);
            Tensor pooled = pool_views(tape, views);
            Tensor act = action_embedding(tape, past_actions[static_cast<std::size_t>(i)]);
            Tensor fused = tape.add(pooled, act);
            fused = tape.add(fused, tape.embedding(params_.get("hist.pos_emb"), {i}));
            rows = tape.concat(rows, fused, 0);
        }
        rows = tape.layer_norm(rows, params_.get("hist.emb_ln.g"), params_.get("hist.emb_ln.b"));
        if (t > 0) rows = encoder_layer(tape, rows, "hist.l0", {});
        return ln(tape, rows, "hist.final_ln");
    }

    // ------------------------------------------------------------------
    // cross-modal encoder
    // ------------------------------------------------------------------
    // The visual stream is the concatenation [history; observation]. The two
    // streams exchange signals through cross-attention, then self-attention
    // and a feed-forward block per layer. Head-averaged cross-attention of
    // the last layer is retained for analysis.
    EncoderOutputs cross_modal_encode(Tape& tape, Tensor text, const std::vector<double>& text_bias,
                                      Tensor history, Tensor obs) const {
        check_cols(text, "text");
        check_cols(history, "history");
        check_cols(obs, "obs");
        if (obs.rows() != kNumSlots)
            throw ShapeError("cross_modal_encode: obs must have 37 rows, got " +
                             std::to_string(obs.rows()));
        EncoderOutputs out;
        out.n_history_rows = history.rows();
        if (cfg_.n_layers_cross == 0) {
            out.Z = text;
            out.Y = history;
            out.S = obs;
            return out;
        }
        Tensor vis = tape.concat(history, obs, 0);
        for (int l = 0; l < cfg_.n_layers_cross; ++l) {
            const std::string p = "cross.l" + std::to_string(l);
            const bool last = (l == cfg_.n_layers_cross - 1);
            Tensor tn = ln(tape, text, p + ".t.xln");
            Tensor vn = ln(tape, vis, p + ".v.xln");
            text = tape.add(text, mha(tape, tn, vn, {}, p + ".t.xattn",
                                      last ? &out.text_to_vis : nullptr));
            vis = tape.add(vis, mha(tape, vn, tn, text_bias, p + ".v.xattn",
                                    last ? &out.vis_to_text : nullptr));
            Tensor ts = ln(tape, text, p + ".t.sln");
            text = tape.add(text, mha(tape, ts, ts, text_bias, p + ".t.self", nullptr));
            Tensor vs = ln(tape, vis, p + ".v.sln");
            vis = tape.add(vis, mha(tape, vs, vs, {}, p + ".v.self", nullptr));
            text = tape.add(text, ffn(tape, ln(tape, text, p + ".t.fln"), p + ".t.ffn"));
            vis = tape.add(vis, ffn(tape, ln(tape, vis, p + ".v.fln"), p + ".v.ffn"));
        }
        text = ln(tape, text, "cross.fin.t");
        vis = ln(tape, vis, "cross.fin.v");
        out.Z = text;
        out.Y = tape.slice_rows(vis, 0, history.rows());
        out.S = tape.slice_rows(vis, history.rows(), kNumSlots);
        return out;
    }

    // Full pipeline for one decision step.
    EncoderOutputs encode_step(Tape& tape, const Instruction& instr,
                               const std::vector<Panorama>& past, const std::vector<int>& past_actions,
                               const Panorama& obs) const {
        Tensor text = encode_instruction(tape, instr);
        Tensor hist = encode_history(tape, past, past_actions);
        Tensor ob = encode_observation(tape, obs);
        return cross_modal_encode(tape, text, key_bias_of(instr), hist, ob);
    }

    // ------------------------------------------------------------------
    // action prediction
    // ------------------------------------------------------------------
    // Raw per-slot scores of the two-layer feed-forward head applied to the
    // element-wise product s_i * z_cls.
    Tensor action_logits(Tape& tape, const EncoderOutputs& enc) const {
        Tensor z_cls = tape.slice_rows(enc.Z, 0, 1);
        Tensor prod = tape.mul(enc.S, tape.tile_rows(z_cls, kNumSlots));
        Tensor h = tape.gelu(add_row_bias(tape, tape.matmul(prod, params_.get("head.sap.w1")), "head.sap.b1"));
        Tensor logits = add_row_bias(tape, tape.matmul(h, params_.get("head.sap.w2")), "head.sap.b2");
        return tape.reshape(logits, {kNumSlots});
    }

    // Probability distribution over the 37 slots, exactly zero outside the
    // candidate set. The stop slot is always a candidate.
    Tensor predict_action(Tape& tape, const EncoderOutputs& enc,
                          const std::vector<int>& navigable_slots) const {
        return tape.softmax(masked_action_logits(tape, enc, navigable_slots));
    }

    Tensor predict_action_log(Tape& tape, const EncoderOutputs& enc,
                              const std::vector<int>& navigable_slots) const {
        return tape.log_softmax(masked_action_logits(tape, enc, navigable_slots));
    }

    // ------------------------------------------------------------------
    // shared building blocks (also used by the objective heads)
    // ------------------------------------------------------------------
    Tensor add_row_bias(Tape& tape, Tensor x, const std::string& bias_name) const {
        Tensor b = tape.reshape(params_.get(bias_name), {1, x.cols()});
        return tape.add(x, tape.tile_rows(b, x.rows()));
    }

    Tensor ffn(Tape& tape, Tensor x, const std::string& prefix) const {
        Tensor h = tape.gelu(add_row_bias(tape, tape.matmul(x, params_.get(prefix + ".w1")), prefix + ".b1"));
        return add_row_bias(tape, tape.matmul(h, params_.get(prefix + ".w2")), prefix + ".b2");
    }

    std::vector<double> key_bias_of(const Instruction& instr) const {
        std::vector<double> bias(instr.tokens.size(), 0.0);
        for (std::size_t i = 0; i < instr.tokens.size(); ++i)
            if (!instr.is_live(i)) bias[i] = kMaskBias;
        return bias;
    }

    // Orientation features of the view cell a slot points at; zeros for stop.
    static std::vector<double> slot_orientation(int slot) {
        if (slot == kStopSlot) return {0.0, 0.0, 0.0, 0.0};
        const double th = view_heading(slot), el = view_elevation(slot);
        return {std::sin(th), std::cos(th), std::sin(el), std::cos(el)};
    }

private:
    ModelConfig cfg_;
    ParamStore params_;

    void init_params(Rng& rng) {
        const int d = cfg_.d_model;
        const int h = cfg_.ffn_hidden;
        const double sd = 1.0 / std::sqrt(static_cast<double>(d));
        auto mat = [&](const std::string& n, int in, int out) {
            params_.create(n, {in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
        };
        auto vec = [&](const std::string& n, int dim, double scale) {
            params_.create(n, {dim}, rng, scale);
        };
        auto ln = [&](const std::string& n) {
            params_.create_const(n + ".g", {d}, 1.0);
            params_.create_const(n + ".b", {d}, 0.0);
        };
        auto attn = [&](const std::string& p) {
            mat(p + ".wq", d, d);
            mat(p + ".wk", d, d);
            mat(p + ".wv", d, d);
            mat(p + ".wo", d, d);
            vec(p + ".bo", d, 0.0);
        };
        auto ffn_block = [&](const std::string& p) {
            mat(p + ".w1", d, h);
            vec(p + ".b1", h, 0.0);
            mat(p + ".w2", h, d);
            vec(p + ".b2", d, 0.0);
        };

        params_.create("text.tok_emb", {cfg_.vocab_size, d}, rng, sd);
        params_.create("text.pos_emb", {cfg_.max_instruction_len + 1, d}, rng, sd);
        ln("text.emb_ln");
        for (int l = 0; l < cfg_.n_layers_text; ++l) {
            const std::string p = "text.l" + std::to_string(l);
            attn(p + ".attn");
            ln(p + ".ln1");
            ffn_block(p + ".ffn");
            ln(p + ".ln2");
        }
        ln("text.final_ln");

        mat("obs.w_in", cfg_.view_feature_dim + 4, d);
        vec("obs.b_in", d, 0.0);
        vec("obs.stop", d, sd);
        ln("obs.ln");

        vec("hist.cls", d, sd);
        params_.create("hist.pos_emb", {kMaxHistorySteps, d}, rng, sd);
        params_.create("hist.pool_q", {1, d}, rng, sd);
        mat("hist.pool.wk", d, d);
        mat("hist.pool.wv", d, d);
        mat("hist.act_w", 4, d);
        ln("hist.emb_ln");
        {
            attn("hist.l0.attn");
            ln("hist.l0.ln1");
            ffn_block("hist.l0.ffn");
            ln("hist.l0.ln2");
        }
        ln("hist.final_ln");

        for (int l = 0; l < cfg_.n_layers_cross; ++l) {
            const std::string p = "cross.l" + std::to_string(l);
            for (const char* s : {".t", ".v"}) {
                attn(p + s + ".xattn");
                ln(p + s + ".xln");
                attn(p + s + ".self");
                ln(p + s + ".sln");
                ffn_block(p + s + ".ffn");
                ln(p + s + ".fln");
            }
        }
        ln("cross.fin.t");
        ln("cross.fin.v");

        // objective heads
        mat("head.sap.w1", d, h);
        vec("head.sap.b1", h, 0.0);
        mat("head.sap.w2", h, 1);
        vec("head.sap.b2", 1, 0.0);
        mat("head.epp.w1", d, h);
        vec("head.epp.b1", h, 0.0);
        mat("head.epp.w2", h, cfg_.max_instruction_len + 1);
        vec("head.epp.b2", cfg_.max_instruction_len + 1, 0.0);
        mat("head.lbp.w1", d, h);
        vec("head.lbp.b1", h, 0.0);
        mat("head.lbp.w2", h, 4);
        vec("head.lbp.b2", 4, 0.0);
        mat("head.mlm.w", d, cfg_.vocab_size);
        vec("head.mlm.b", cfg_.vocab_size, 0.0);
        mat("head.mrc.w", d, kNumClasses);
        vec("head.mrc.b", kNumClasses, 0.0);
        mat("head.itm.w", d, d);
        params_.create_const("head.rl_baseline", {1}, 0.0);
        mat("head.sprel.w1", 2 * d, h);
        vec("head.sprel.b1", h, 0.0);
        mat("head.sprel.w2", h, 2);
        vec("head.sprel.b2", 2, 0.0);
    }

    void validate_instruction(const Instruction& instr) const {
        if (instr.tokens.empty()) throw LengthError("Instruction: empty token sequence");
        if (static_cast<int>(instr.tokens.size()) > cfg_.max_instruction_len + 1)
            throw LengthError("Instruction: length " + std::to_string(instr.tokens.size()) +
                              " exceeds L+1 = " + std::to_string(cfg_.max_instruction_len + 1));
        if (instr.tokens[0] != kClsId)
            throw ContractError("Instruction: token 0 must be the classification slot");
        if (!instr.live.empty() && instr.live.size() != instr.tokens.size())
            throw ShapeError("Instruction: live mask length mismatch");
        for (int id : instr.tokens)
            if (id < 0 || id >= cfg_.vocab_size)
                throw ContractError("Instruction: token id " + std::to_string(id) +
                                    " outside vocab");
    }

    void check_cols(const Tensor& t, const char* what) const {
        if (t.ndim() != 2 || t.cols() != cfg_.d_model)
            throw ShapeError(std::string("cross_modal_encode: ") + what + " must be (*, " +
                             std::to_string(cfg_.d_model) + ")");
    }

    // Multi-head attention. `key_bias` (possibly empty) is added to every
    // score row; retained attention is head-averaged and detached.
    Tensor mha(Tape& tape, Tensor q_in, Tensor kv_in, const std::vector<double>& key_bias,
               const std::string& prefix, AttnMatrix* retain) const {
        const int d = cfg_.d_model;
        const int nh = cfg_.n_heads;
        const int dh = d / nh;
        const int nq = q_in.rows(), nk = kv_in.rows();
        if (!key_bias.empty() && static_cast<int>(key_bias.size()) != nk)
            throw ShapeError("mha: key bias length " + std::to_string(key_bias.size()) +
                             " != keys " + std::to_string(nk));
        Tensor q = tape.matmul(q_in, params_.get(prefix + ".wq"));
        Tensor k = tape.matmul(kv_in, params_.get(prefix + ".wk"));
        Tensor v = tape.matmul(kv_in, params_.get(prefix + ".wv"));
        Tensor bias_mat;
        if (!key_bias.empty()) {
            std::vector<double> b(static_cast<std::size_t>(nq) * nk);
            for (int i = 0; i < nq; ++i)
                std::copy(key_bias.begin(), key_bias.end(), b.begin() + static_cast<std::size_t>(i) * nk);
            bias_mat = Tensor::from({nq, nk}, std::move(b));
        }
        if (retain) {
            retain->rows = nq;
            retain->cols = nk;
            retain->w.assign(static_cast<std::size_t>(nq) * nk, 0.0);
        }
        Tensor merged;
        for (int hidx = 0; hidx < nh; ++hidx) {
            Tensor qh = tape.slice_cols(q, hidx * dh, dh);
            Tensor kh = tape.slice_cols(k, hidx * dh, dh);
            Tensor vh = tape.slice_cols(v, hidx * dh, dh);
            Tensor scores = tape.scale(tape.matmul(qh, tape.transpose(kh)),
                                       1.0 / std::sqrt(static_cast<double>(dh)));
            if (bias_mat.defined()) scores = tape.add(scores, bias_mat);
            Tensor attn = tape.softmax(scores);
            if (retain)
                for (std::size_t i = 0; i < retain->w.size(); ++i)
                    retain->w[i] += attn.values()[i] / nh;
            Tensor head = tape.matmul(attn, vh);
            merged = hidx == 0 ? head : tape.concat(merged, head, 1);
        }
        return add_row_bias(tape, tape.matmul(merged, params_.get(prefix + ".wo")), prefix + ".bo");
    }

    Tensor ln(Tape& tape, Tensor x, const std::string& prefix) const {
        return tape.layer_norm(x, params_.get(prefix + ".g"), params_.get(prefix + ".b"));
    }

    // pre-norm residual block: x + MHA(LN(x)), then x + FFN(LN(x))
    Tensor encoder_layer(Tape& tape, Tensor x, const std::string& prefix,
                         const std::vector<double>& key_bias) const {
        Tensor xn = ln(tape, x, prefix + ".ln1");
        x = tape.add(x, mha(tape, xn, xn, key_bias, prefix + ".attn", nullptr));
        return tape.add(x, ffn(tape, ln(tape, x, prefix + ".ln2"), prefix + ".ffn"));
    }

    // Single learned query attending over one step's 36 view embeddings.
    Tensor pool_views(Tape& tape, Tensor views) const {
        const int d = cfg_.d_model;
        Tensor k = tape.matmul(views, params_.get("hist.pool.wk"));
        Tensor scores = tape.scale(tape.matmul(params_.get("hist.pool_q"), tape.transpose(k)),
                                   1.0 / std::sqrt(static_cast<double>(d)));
        Tensor attn = tape.softmax(scores);
        return tape.matmul(attn, tape.matmul(views, params_.get("hist.pool.wv")));
    }

    Tensor action_embedding(Tape& tape, int slot) const {
        if (slot < 0 || slot > kStopSlot)
            throw ActionError("action slot " + std::to_string(slot) + " out of range");
        Tensor feat = Tensor::from({1, 4}, slot_orientation(slot));
        return tape.matmul(feat, params_.get("hist.act_w"));
    }

    Tensor masked_action_logits(Tape& tape, const EncoderOutputs& enc,
                                const std::vector<int>& navigable_slots) const {
        std::vector<double> bias(kNumSlots, kMaskBias);
        bias[kStopSlot] = 0.0;
        for (int s : navigable_slots) {
            if (s < 0 || s >= kNumSlots)
                throw ActionError("candidate slot " + std::to_string(s) + " out of range");
            bias[static_cast<std::size_t>(s)] = 0.0;
        }
        return tape.add(action_logits(tape, enc), Tensor::from({kNumSlots}, std::move(bias)));
    }
};

}  // namespace gela::model
