#pragma once

// Adaptive pre-training loop mixing the five proxy tasks with the three
// grounded tasks, and the imitation + reinforcement fine-tuning loop, with
// checkpointing and seeded reproducibility. Plain first-order optimizer with
// momentum; the applied update norm is clipped to a configured ceiling.

#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gela/checkpoint.hpp"
#include "gela/error.hpp"
#include "gela/eval.hpp"
#include "gela/geldata.hpp"
#include "gela/model.hpp"
#include "gela/objectives.hpp"
#include "gela/rng.hpp"
#include "gela/world.hpp"

namespace gela::train {

using diff::Tape;
using diff::Tensor;

inline const std::vector<std::string>& task_names() {
    static const std::vector<std::string> names{"mlm", "mrc", "itm", "sap",
                                                "sprel", "epp", "lbp", "elsa"};
    return names;
}

inline bool is_grounded_task(const std::string& task) {
    return task == "epp" || task == "lbp" || task == "elsa";
}

struct TrainConfig {
    std::string preset = "desk";
    long iterations = 2000;
    double learning_rate = 5e-4;
    int batch_size = 4;
    std::string optimizer = "adam";  // "adam" | "momentum"
    double momentum = 0.9;
    double clip_norm = 1.0;  // ceiling on the applied update norm
    std::uint64_t seed = 1;
    std::map<std::string, double> mix;  // empty = equal weight on every feasible task
    objectives::GelaWeights gela;
    double mlm_rate = 0.15;
    double mrc_rate = 0.15;
    double sprel_drop = 0.30;
    double il_weight = 1.0;
    double rl_weight = 1.0;
    double success_radius = 3.0;
    int step_cap = 15;
    long eval_every = 0;  // 0 = no snapshots
    long checkpoint_every = 500;
    std::string checkpoint_path;  // empty = no periodic checkpoints

    void validate() const {
        if (iterations < 1) throw ContractError("TrainConfig: iterations must be >= 1");
        if (batch_size < 1 || learning_rate <= 0 || clip_norm <= 0)
            throw ContractError("TrainConfig: bad optimizer settings");
        if (optimizer != "adam" && optimizer != "momentum")
            throw ContractError("TrainConfig: optimizer must be adam or momentum");
        gela.validate();
        for (const auto& [task, w] : mix) {
            if (w < 0) throw ContractError("TrainConfig: negative mix weight for " + task);
            if (std::find(task_names().begin(), task_names().end(), task) == task_names().end())
                throw ContractError("TrainConfig: unknown task '" + task + "'");
        }
    }

    static TrainConfig desk() { return TrainConfig{}; }

    static TrainConfig paper_scale() {
        TrainConfig c;
        c.preset = "paper-scale";
        c.iterations = 200000;
        c.learning_rate = 5e-5;
        c.batch_size = 64;
        return c;
    }

    static TrainConfig paper_finetune() {
        TrainConfig c;
        c.preset = "paper-finetune";
        c.iterations = 100000;
        c.learning_rate = 1e-5;
        c.batch_size = 16;
        return c;
    }

    static TrainConfig from_preset(const std::string& name) {
        if (name == "desk") return desk();
        if (name == "paper-scale") return paper_scale();
        if (name == "paper-finetune") return paper_finetune();
        throw ContractError("unknown preset '" + name + "'");
    }
};

// Flat key=value config text; '#' starts a comment. A "preset" line applies
// first, remaining keys override it.
inline TrainConfig parse_config_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            const auto b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        if (!key.empty()) kv[key] = value;
    }
    TrainConfig c = kv.count("preset") ? TrainConfig::from_preset(kv["preset"]) : TrainConfig::desk();
    auto get_d = [&](const char* k, double& out) {
        if (kv.count(k)) out = std::stod(kv[k]);
    };
    auto get_l = [&](const char* k, long& out) {
        if (kv.count(k)) out = std::stol(kv[k]);
    };
    get_l("iterations", c.iterations);
    get_d("learning_rate", c.learning_rate);
    if (kv.count("batch_size")) c.batch_size = std::stoi(kv["batch_size"]);
    if (kv.count("optimizer")) c.optimizer = kv["optimizer"];
    get_d("momentum", c.momentum);
    get_d("clip_norm", c.clip_norm);
    if (kv.count("seed")) c.seed = std::stoull(kv["seed"]);
    get_d("alpha", c.gela.alpha);
    get_d("beta", c.gela.beta);
    get_d("gamma", c.gela.gamma);
    get_d("lambda", c.gela.lambda);
    get_d("tau", c.gela.tau);
    get_d("mlm_rate", c.mlm_rate);
    get_d("mrc_rate", c.mrc_rate);
    get_d("sprel_drop", c.sprel_drop);
    get_d("il_weight", c.il_weight);
    get_d("rl_weight", c.rl_weight);
    get_d("success_radius", c.success_radius);
    if (kv.count("step_cap")) c.step_cap = std::stoi(kv["step_cap"]);
    get_l("eval_every", c.eval_every);
    get_l("checkpoint_every", c.checkpoint_every);
    if (kv.count("checkpoint_path")) c.checkpoint_path = kv["checkpoint_path"];
    for (const auto& [key, value] : kv)
        if (key.rfind("mix.", 0) == 0) c.mix[key.substr(4)] = std::stod(value);
    c.validate();
    return c;
}

inline TrainConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

// ---------------------------------------------------------------------------
// training log
// ---------------------------------------------------------------------------

struct LogEntry {
    long iteration = 0;
    std::string task;
    double loss = 0;
    double wall_ms = 0;
};

struct Snapshot {
    long iteration = 0;
    double sap_accuracy = 0;
    double ea_e2l = 0;
    double ea_l2e = 0;
};

struct TrainLog {
    std::vector<LogEntry> entries;
    std::vector<Snapshot> snapshots;

    void append(long iteration, const std::string& task, double loss, double wall_ms) {
        if (!entries.empty() && iteration < entries.back().iteration)
            throw ContractError("TrainLog: iteration index must be monotone");
        entries.push_back({iteration, task, loss, wall_ms});
    }

    // CSV columns: iteration, task, loss. Wall-clock stays in memory so the
    // emitted file is reproducible byte for byte.
    std::string csv() const {
        std::ostringstream os;
        os << "iteration,task,loss\n";
        char buf[64];
        for (const LogEntry& e : entries) {
            std::snprintf(buf, sizeof buf, "%.17g", e.loss);
            os << e.iteration << "," << e.task << "," << buf << "\n";
        }
        return os.str();
    }

    nlohmann::ordered_json snapshots_json() const {
        nlohmann::ordered_json arr = nlohmann::ordered_json::array();
        for (const Snapshot& s : snapshots)
            arr.push_back({{"iteration", s.iteration},
                           {"sap_accuracy", s.sap_accuracy},
                           {"ea_e2l", s.ea_e2l},
                           {"ea_l2e", s.ea_l2e}});
        return arr;
    }
};

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

// First-order updates from accumulated gradients, either Adam-style
// (adaptive per-coordinate scaling with first-moment momentum) or plain
// momentum. The applied update norm is clipped to the configured ceiling in
// both modes. Gradients are consumed by step().
class Optimizer {
public:
    Optimizer(std::string mode, double lr, double momentum, double clip_norm)
        : mode_(std::move(mode)), lr_(lr), momentum_(momentum), clip_(clip_norm) {
        if (mode_ != "adam" && mode_ != "momentum")
            throw ContractError("Optimizer: unknown mode '" + mode_ + "'");
    }
    explicit Optimizer(const TrainConfig& cfg)
        : Optimizer(cfg.optimizer, cfg.learning_rate, cfg.momentum, cfg.clip_norm) {}

    // Returns the applied update norm.
    double step(model::ParamStore& params) {
        ++t_;
        double sq = 0;
        for (auto& [name, p] : params.items_mut()) {
            auto& u = update_[name];
            u.resize(p.size(), 0.0);
            auto g = p.grad();
            if (mode_ == "adam") {
                auto& m = m1_[name];
                auto& v = m2_[name];
                m.resize(p.size(), 0.0);
                v.resize(p.size(), 0.0);
                const double bc1 = 1.0 - std::pow(kBeta1, t_);
                const double bc2 = 1.0 - std::pow(kBeta2, t_);
                for (std::size_t i = 0; i < p.size(); ++i) {
                    m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g[i];
                    v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g[i] * g[i];
                    u[i] = lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + kEps);
                    sq += u[i] * u[i];
                }
            } else {
                auto& v = m1_[name];
                v.resize(p.size(), 0.0);
                for (std::size_t i = 0; i < p.size(); ++i) {
                    v[i] = momentum_ * v[i] + g[i];
                    u[i] = lr_ * v[i];
                    sq += u[i] * u[i];
                }
            }
        }
        const double norm = std::sqrt(sq);
        const double scale = norm > clip_ ? clip_ / norm : 1.0;
        for (auto& [name, p] : params.items_mut()) {
            auto& u = update_[name];
            auto w = p.values_mut();
            for (std::size_t i = 0; i < p.size(); ++i) w[i] -= scale * u[i];
            p.zero_grad();
        }
        return norm * scale;
    }

private:
    static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
    std::string mode_;
    double lr_, momentum_, clip_;
    long t_ = 0;
    std::map<std::string, std::vector<double>> m1_, m2_, update_;
};

// ---------------------------------------------------------------------------
// batch item construction
// ---------------------------------------------------------------------------

struct Source {
    const geldata::AnnotationFile* file = nullptr;
    bool grounded = true;
};

struct DataPools {
    std::vector<const geldata::Episode*> all;       // every source
    std::vector<const geldata::Episode*> grounded;  // grounded-tagged sources only

    static DataPools build(const std::vector<Source>& sources) {
        DataPools p;
        for (const Source& s : sources)
            for (const geldata::Episode& ep : s.file->episodes) {
                p.all.push_back(&ep);
                if (s.grounded) p.grounded.push_back(&ep);
            }
        if (p.all.empty()) throw ContractError("no episodes in any data source");
        return p;
    }
};

// Annotated viewpoints of an episode in path order.
inline std::vector<std::string> annotated_viewpoints(const geldata::Episode& ep) {
    std::vector<std::string> out;
    std::set<std::string> with_boxes;
    for (const geldata::LandmarkBox& l : ep.landmarks) with_boxes.insert(l.viewpoint);
    for (const std::string& vp : ep.path)
        if (with_boxes.count(vp)) out.push_back(vp);
    return out;
}

inline eval::StepContext step_context_at(const world::WorldGraph& w, const geldata::Episode& ep,
                                         std::size_t t) {
    eval::StepContext sc;
    sc.instr = model::Instruction::of(ep.instruction.tokens);
    for (std::size_t i = 0; i < t; ++i) {
        const int vp = w.index_of(ep.path[i]);
        sc.past.push_back(w.observe(vp));
        sc.past_actions.push_back(w.expert_slot(vp, w.index_of(ep.path[i + 1])));
    }
    const int vp = w.index_of(ep.path[t]);
    sc.obs = w.observe(vp);
    sc.candidates = eval::candidate_slots(w, vp);
    sc.viewpoint = vp;
    sc.expert_slot = (t + 1 < ep.path.size()) ? w.expert_slot(vp, w.index_of(ep.path[t + 1]))
                                              : kStopSlot;
    return sc;
}

// Builds one batch item for `task` and returns its loss on `tape`. Consumes
// `rng` in a deterministic order. The same function is what the pre-training
// loop routes, so a standalone call with the same rng state reproduces the
// routed loss exactly. Throws SkipSignal when the drawn item is unusable.
inline Tensor build_task_loss(Tape& tape, const std::string& task, const model::Model& m,
                              const world::WorldGraph& w, const DataPools& pools,
                              const TrainConfig& cfg, Rng& rng) {
    const auto& pool = is_grounded_task(task) ? pools.grounded : pools.all;
    if (pool.empty()) throw SkipSignal("no data for task " + task);
    const geldata::Episode& ep = *pool[rng.uniform_index(pool.size())];

    if (task == "mlm") {
        objectives::TrajectoryContext ctx = eval::full_trajectory(w, ep);
        objectives::MlmInstance inst =
            objectives::apply_mlm_masking(model::Instruction::of(ep.instruction.tokens), rng,
                                          cfg.mlm_rate);
        return objectives::mlm_loss(tape, m, inst, ctx);
    }
    if (task == "mrc") {
        const std::size_t t = rng.uniform_index(ep.path.size());
        eval::StepContext sc = step_context_at(w, ep, t);
        std::vector<int> zeroed = objectives::sample_mrc_zeroing(rng, cfg.mrc_rate);
        std::vector<std::vector<double>> targets;
        for (int v : zeroed) targets.push_back(w.mrc_target(sc.viewpoint, v));
        objectives::TrajectoryContext ctx{sc.past, sc.past_actions, sc.obs};
        return objectives::mrc_loss(tape, m, sc.instr, ctx, zeroed, targets);
    }
    if (task == "itm") {
        if (ep.path.size() < 2) throw SkipSignal("itm: trajectory too short");
        std::vector<objectives::TrajectoryContext> others;
        for (int draw = 0; draw < 2; ++draw) {
            const geldata::Episode* other = pools.all[rng.uniform_index(pools.all.size())];
            for (int tries = 0; tries < 10 && other->id == ep.id; ++tries)
                other = pools.all[rng.uniform_index(pools.all.size())];
            if (other->id == ep.id) throw SkipSignal("itm: no distinct batch trajectory");
            others.push_back(eval::full_trajectory(w, *other));
        }
        objectives::TrajectoryContext positive = eval::full_trajectory(w, ep);
        return objectives::itm_loss(tape, m, model::Instruction::of(ep.instruction.tokens),
                                    positive, others, rng);
    }
    if (task == "sap") {
        const std::size_t t = rng.uniform_index(ep.path.size());
        eval::StepContext sc = step_context_at(w, ep, t);
        model::EncoderOutputs enc = m.encode_step(tape, sc.instr, sc.past, sc.past_actions, sc.obs);
        return objectives::sap_loss(tape, m, enc, sc.candidates, sc.expert_slot);
    }
    if (task == "sprel") {
        const std::size_t t = rng.uniform_index(ep.path.size());
        const model::Panorama pano = w.observe(w.index_of(ep.path[t]));
        objectives::SprelInstance inst = objectives::sample_sprel_pair(pano, rng, cfg.sprel_drop);
        return objectives::sprel_loss(tape, m, inst);
    }

    // grounded tasks
    const std::vector<std::string> vps = annotated_viewpoints(ep);
    if (vps.empty()) throw SkipSignal(task + ": episode has no annotated viewpoint");
    const std::string vp = vps[rng.uniform_index(vps.size())];
    std::size_t t = 0;
    for (std::size_t i = 0; i < ep.path.size(); ++i)
        if (ep.path[i] == vp) t = i;
    eval::StepContext sc = step_context_at(w, ep, t);
    auto pairs = objectives::build_masks(ep, vp);
    if (pairs.empty()) throw SkipSignal(task + ": no grounded pair at viewpoint");
    model::EncoderOutputs enc = m.encode_step(tape, sc.instr, sc.past, sc.past_actions, sc.obs);
    if (task == "elsa")
        return objectives::elsa_loss(tape, enc.Z, enc.S, objectives::elsa_pairs(pairs),
                                     cfg.gela.tau);
    const objectives::GroundedPair& gp = pairs[rng.uniform_index(pairs.size())];
    if (task == "epp")
        return objectives::epp_loss(tape, enc.S, gp.landmark_mask, gp.entity_mask,
                                    objectives::FfnHead::from(m.params(), "head.epp"));
    if (task == "lbp")
        return objectives::lbp_loss(tape, enc.Z, gp.entity_mask, gp.box,
                                    objectives::FfnHead::from(m.params(), "head.lbp"),
                                    cfg.gela.lambda)
            .loss;
    throw ContractError("unknown task '" + task + "'");
}

// ---------------------------------------------------------------------------
// grounded-objective evaluation (training-set diagnostics)
// ---------------------------------------------------------------------------

struct GelaEval {
    double mean_loss = 0;  // combined adaptive loss per grounded viewpoint
    double epp_accuracy = 0;
    double lbp_mean_iou = 0;
    long n_pairs = 0;
};

inline GelaEval evaluate_gela(const model::Model& m, const world::WorldGraph& w,
                              const std::vector<geldata::Episode>& episodes,
                              const objectives::GelaWeights& gw) {
    GelaEval out;
    long n_vp = 0, epp_hits = 0;
    double iou_sum = 0;
    for (const geldata::Episode& ep : episodes) {
        for (const std::string& vp : annotated_viewpoints(ep)) {
            std::size_t t = 0;
            for (std::size_t i = 0; i < ep.path.size(); ++i)
                if (ep.path[i] == vp) t = i;
            eval::StepContext sc = step_context_at(w, ep, t);
            auto pairs = objectives::build_masks(ep, vp);
            if (pairs.empty()) continue;
            Tape tape;
            model::EncoderOutputs enc =
                m.encode_step(tape, sc.instr, sc.past, sc.past_actions, sc.obs);
            double epp_sum = 0, lbp_sum = 0;
            for (const objectives::GroundedPair& gp : pairs) {
                Tensor epp = objectives::epp_loss(tape, enc.S, gp.landmark_mask, gp.entity_mask,
                                                  objectives::FfnHead::from(m.params(), "head.epp"));
                auto lbp = objectives::lbp_loss(tape, enc.Z, gp.entity_mask, gp.box,
                                                objectives::FfnHead::from(m.params(), "head.lbp"),
                                                gw.lambda);
                epp_sum += epp.item();
                lbp_sum += lbp.loss.item();

                // argmax of the predicted token distribution inside the span?
                Tensor pooled = tape.reshape(tape.masked_mean(enc.S, gp.landmark_mask.m),
                                             {1, enc.S.cols()});
                Tensor logits =
                    objectives::FfnHead::from(m.params(), "head.epp").apply(tape, pooled);
                int best = 0;
                const int seq_len = static_cast<int>(gp.entity_mask.m.size());
                for (int i = 1; i < seq_len; ++i)
                    if (logits.at(0, i) > logits.at(0, best)) best = i;
                epp_hits += (best >= gp.span.start && best < gp.span.end) ? 1 : 0;

                objectives::BoxTarget pred{lbp.pred_box.at(0), lbp.pred_box.at(1),
                                           lbp.pred_box.at(2), lbp.pred_box.at(3)};
                iou_sum += objectives::box_iou(pred, gp.box);
                out.n_pairs += 1;
            }
            Tensor elsa = objectives::elsa_loss(tape, enc.Z, enc.S, objectives::elsa_pairs(pairs),
                                                gw.tau);
            const double n = static_cast<double>(pairs.size());
            out.mean_loss += gw.alpha * epp_sum / n + gw.beta * lbp_sum / n +
                             gw.gamma * elsa.item();
            n_vp += 1;
        }
    }
    if (n_vp > 0) out.mean_loss /= static_cast<double>(n_vp);
    if (out.n_pairs > 0) {
        out.epp_accuracy = static_cast<double>(epp_hits) / static_cast<double>(out.n_pairs);
        out.lbp_mean_iou = iou_sum / static_cast<double>(out.n_pairs);
    }
    return out;
}

// ---------------------------------------------------------------------------
// adaptive pre-training
// ---------------------------------------------------------------------------

inline TrainLog adaptive_pretrain(model::Model& m, const world::WorldGraph& w,
                                  const std::vector<Source>& sources, const TrainConfig& cfg,
                                  const std::vector<geldata::Episode>* snapshot_episodes = nullptr) {
    cfg.validate();
    DataPools pools = DataPools::build(sources);

    // feasible task list with weights
    std::vector<std::pair<std::string, double>> tasks;
    for (const std::string& task : task_names()) {
        double wgt = cfg.mix.empty() ? 1.0 : 0.0;
        if (auto it = cfg.mix.find(task); it != cfg.mix.end()) wgt = it->second;
        if (wgt <= 0) continue;
        if (is_grounded_task(task) && pools.grounded.empty())
            throw ContractError("task '" + task + "' enabled but no grounded-tagged source");
        tasks.push_back({task, wgt});
    }
    if (tasks.empty()) throw ContractError("adaptive_pretrain: no task enabled");
    double total_weight = 0;
    for (auto& [t, wgt] : tasks) total_weight += wgt;

    Rng rng(cfg.seed);
    Optimizer opt(cfg);
    TrainLog log;
    const auto t0 = std::chrono::steady_clock::now();

    for (long it = 0; it < cfg.iterations; ++it) {
        // sample the task by mix weight
        double draw = rng.uniform() * total_weight;
        std::string task = tasks.back().first;
        for (auto& [name, wgt] : tasks) {
            if (draw < wgt) {
                task = name;
                break;
            }
            draw -= wgt;
        }

        // grounded tasks step with their combination weight, matching the
        // weighted adaptive objective they jointly optimize
        double task_scale = 1.0;
        if (task == "epp") task_scale = cfg.gela.alpha;
        if (task == "lbp") task_scale = cfg.gela.beta;
        if (task == "elsa") task_scale = cfg.gela.gamma;

        m.params().zero_grads();
        double loss_sum = 0;
        int built = 0;
        try {
            for (int b = 0; b < cfg.batch_size; ++b) {
                Tape tape;
                try {
                    Tensor loss = build_task_loss(tape, task, m, w, pools, cfg, rng);
                    loss_sum += loss.item();
                    tape.backward(tape.scale(loss, task_scale / cfg.batch_size));
                    ++built;
                } catch (const SkipSignal&) {
                }
            }
            if (built > 0) opt.step(m.params());
        } catch (const NumericError&) {
            // leave the last periodic checkpoint in place and stop
            throw;
        }
        const double wall =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                .count();
        log.append(it, task, built > 0 ? loss_sum / built : 0.0, wall);

        if (!cfg.checkpoint_path.empty() && cfg.checkpoint_every > 0 &&
            (it + 1) % cfg.checkpoint_every == 0)
            model::save_checkpoint(m, cfg.checkpoint_path);
        if (cfg.eval_every > 0 && snapshot_episodes && (it + 1) % cfg.eval_every == 0) {
            Snapshot snap;
            snap.iteration = it + 1;
            snap.sap_accuracy = eval::sap_accuracy(m, w, *snapshot_episodes);
            eval::EAReport ea = eval::effective_attention(m, w, *snapshot_episodes);
            snap.ea_e2l = ea.mean_e2l();
            snap.ea_l2e = ea.mean_l2e();
            log.snapshots.push_back(snap);
        }
    }
    if (!cfg.checkpoint_path.empty()) model::save_checkpoint(m, cfg.checkpoint_path);
    return log;
}

// ---------------------------------------------------------------------------
// fine-tuning: imitation + policy gradient
// ---------------------------------------------------------------------------

// Per batch episode: a teacher-forced pass accumulates behavior-cloning
// gradients; a sampled rollout on the same instruction accumulates
// likelihood-ratio policy gradients against a learned scalar baseline; both
// gradient sets land in the same buffers before a single update.
inline TrainLog finetune(model::Model& m, const world::WorldGraph& w,
                         const std::vector<geldata::Episode>& episodes, const TrainConfig& cfg) {
    cfg.validate();
    if (episodes.empty()) throw ContractError("finetune: no episodes");
    Rng rng(cfg.seed);
    Optimizer opt(cfg);
    TrainLog log;
    const auto t0 = std::chrono::steady_clock::now();

    for (long it = 0; it < cfg.iterations; ++it) {
        m.params().zero_grads();
        double il_sum = 0, rl_sum = 0;
        int counted = 0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const geldata::Episode& ep = *[&] {
                return &episodes[rng.uniform_index(episodes.size())];
            }();
            const int start = w.index_of(ep.path.front());
            const int goal = w.index_of(ep.path.back());
            auto geo = w.shortest_path(start, goal);
            if (!geo || geo->first <= 0) {
                std::fprintf(stderr, "finetune: skipping episode %s (unreachable goal)\n",
                             ep.id.c_str());
                continue;
            }
            const double d_initial = geo->first;

            // pass 1: imitation (behavior cloning along the expert path)
            Tape tape;
            Tensor il_loss;
            {
                model::Instruction instr = model::Instruction::of(ep.instruction.tokens);
                std::vector<model::Panorama> past;
                std::vector<int> past_actions;
                for (std::size_t t = 0; t < ep.path.size(); ++t) {
                    const int vp = w.index_of(ep.path[t]);
                    model::Panorama obs = w.observe(vp);
                    model::EncoderOutputs enc = m.encode_step(tape, instr, past, past_actions, obs);
                    const int expert = (t + 1 < ep.path.size())
                                           ? w.expert_slot(vp, w.index_of(ep.path[t + 1]))
                                           : kStopSlot;
                    Tensor step_loss = objectives::sap_loss(tape, m, enc,
                                                            eval::candidate_slots(w, vp), expert);
                    il_loss = il_loss.defined() ? tape.add(il_loss, step_loss) : step_loss;
                    past.push_back(obs);
                    past_actions.push_back(expert);
                }
            }
            il_sum += il_loss.item();

            // pass 2: sampled rollout with likelihood-ratio gradients
            Tensor rl_loss;
            if (cfg.rl_weight > 0) {
                model::Instruction instr = model::Instruction::of(ep.instruction.tokens);
                world::NavState state{start, 0.0, 0.0, false};
                std::vector<model::Panorama> past;
                std::vector<int> past_actions;
                Tensor logp_sum;
                double reward = 0;
                for (int t = 0; t < cfg.step_cap && !state.done; ++t) {
                    model::Panorama obs = w.observe(state.viewpoint);
                    model::EncoderOutputs enc = m.encode_step(tape, instr, past, past_actions, obs);
                    std::vector<int> cands = eval::candidate_slots(w, state.viewpoint);
                    Tensor lsm = m.predict_action_log(tape, enc, cands);
                    // sample from the distribution
                    double u = rng.uniform(), acc = 0;
                    int action = kStopSlot;
                    for (int s = 0; s < kNumSlots; ++s) {
                        acc += std::exp(lsm.at(s));
                        if (u < acc) {
                            action = s;
                            break;
                        }
                    }
                    Tensor logp = objectives::pick(tape, lsm, action);
                    logp_sum = logp_sum.defined() ? tape.add(logp_sum, logp) : logp;
                    past.push_back(obs);
                    past_actions.push_back(action);
                    const double d_before = w.shortest_path(state.viewpoint, goal)->first;
                    state = world::step(w, state, action);
                    const double d_after = w.shortest_path(state.viewpoint, goal)->first;
                    reward += (d_before - d_after) / d_initial;
                    if (state.done && w.distance(state.viewpoint, goal) <= cfg.success_radius)
                        reward += 1.0;
                }
                Tensor baseline = m.params().get("head.rl_baseline");
                const double advantage = reward - baseline.at(0);
                Tensor pg = tape.scale(logp_sum, -advantage);
                Tensor base_err = tape.add_scalar(tape.scale(baseline, -1.0), reward);
                Tensor base_loss = tape.scale(tape.mul(base_err, base_err), 0.5);
                rl_loss = tape.add(pg, tape.reshape(base_loss, {1}));
                rl_sum += rl_loss.item();
            }

            Tensor total = tape.scale(il_loss, cfg.il_weight / cfg.batch_size);
            if (rl_loss.defined())
                total = tape.add(total, tape.scale(rl_loss, cfg.rl_weight / cfg.batch_size));
            tape.backward(total);
            ++counted;
        }
        if (counted > 0) opt.step(m.params());
        const double wall =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                .count();
        log.append(it, "il+rl", counted > 0 ? (il_sum + rl_sum) / counted : 0.0, wall);
        if (!cfg.checkpoint_path.empty() && cfg.checkpoint_every > 0 &&
            (it + 1) % cfg.checkpoint_every == 0)
            model::save_checkpoint(m, cfg.checkpoint_path);
    }
    if (!cfg.checkpoint_path.empty()) model::save_checkpoint(m, cfg.checkpoint_path);
    return log;
}

}  // namespace gela::train
