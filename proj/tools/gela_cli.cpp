// Command-line workbench: world generation, annotation validation and
// statistics, adaptive pre-training, fine-tuning, evaluation, effective
// attention reports, heatmap export and the gradient suite.
//
// Exit codes: 0 success, 1 validation failure, 2 runtime error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gela/checkpoint.hpp"
#include "gela/eval.hpp"
#include "gela/geldata.hpp"
#include "gela/gradsuite.hpp"
#include "gela/model.hpp"
#include "gela/objectives.hpp"
#include "gela/trainer.hpp"
#include "gela/world.hpp"

namespace fs = std::filesystem;
using namespace gela;

namespace {

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out << text;
}

model::ModelConfig desk_model_config(const world::WorldGraph& w, std::uint64_t seed) {
    model::ModelConfig cfg;
    cfg.view_feature_dim = w.params.view_feature_dim;
    cfg.seed = seed;
    return cfg;
}

// Split at trajectory boundaries so no path leaks across splits.
std::pair<geldata::AnnotationFile, geldata::AnnotationFile> split_episodes(
    const geldata::AnnotationFile& all, double val_frac) {
    std::vector<std::vector<const geldata::Episode*>> trajs;
    std::map<std::vector<std::string>, std::size_t> seen;
    for (const geldata::Episode& ep : all.episodes) {
        auto it = seen.find(ep.path);
        if (it == seen.end()) {
            seen[ep.path] = trajs.size();
            trajs.push_back({&ep});
        } else {
            trajs[it->second].push_back(&ep);
        }
    }
    const std::size_t n_val =
        static_cast<std::size_t>(static_cast<double>(trajs.size()) * val_frac);
    const std::size_t n_train = trajs.size() - n_val;
    geldata::AnnotationFile train, val;
    for (std::size_t i = 0; i < trajs.size(); ++i)
        for (const geldata::Episode* ep : trajs[i])
            (i < n_train ? train : val).episodes.push_back(*ep);
    return {std::move(train), std::move(val)};
}

struct TrainArgs {
    std::string world_path;
    std::string episodes_path;
    std::string augmented_path;
    std::string val_path;
    std::string config_path;
    std::string init_ckpt;
    std::string out_dir;
    std::uint64_t seed = 0;  // 0 = keep config seed
};

train::TrainConfig resolve_config(const TrainArgs& a) {
    train::TrainConfig cfg =
        a.config_path.empty() ? train::TrainConfig::desk() : train::load_config(a.config_path);
    if (a.seed != 0) cfg.seed = a.seed;
    return cfg;
}

int run_pretrain(const TrainArgs& a) {
    world::WorldGraph w = world::load_world(a.world_path);
    geldata::AnnotationFile corpus = geldata::load(a.episodes_path);
    geldata::AnnotationFile augmented;
    std::vector<train::Source> sources{{&corpus, true}};
    if (!a.augmented_path.empty()) {
        augmented = geldata::load(a.augmented_path);
        sources.push_back({&augmented, false});
    }
    train::TrainConfig cfg = resolve_config(a);
    fs::create_directories(a.out_dir);
    cfg.checkpoint_path = (fs::path(a.out_dir) / "model.ckpt").string();

    model::Model m = a.init_ckpt.empty() ? model::Model(desk_model_config(w, cfg.seed))
                                         : model::load_checkpoint(a.init_ckpt);
    geldata::AnnotationFile val;
    std::vector<geldata::Episode> val_eps;
    std::vector<geldata::Episode>* snapshot_eps = nullptr;
    if (!a.val_path.empty()) {
        val = geldata::load(a.val_path);
        val_eps = val.episodes;
        snapshot_eps = &val_eps;
    }
    train::TrainLog log = train::adaptive_pretrain(m, w, sources, cfg, snapshot_eps);
    write_text((fs::path(a.out_dir) / "trainlog.csv").string(), log.csv());
    write_text((fs::path(a.out_dir) / "snapshots.json").string(),
               log.snapshots_json().dump(2) + "\n");
    std::printf("pretrain: %ld iterations, final checkpoint %s\n", cfg.iterations,
                cfg.checkpoint_path.c_str());
    return 0;
}

int run_finetune(const TrainArgs& a) {
    world::WorldGraph w = world::load_world(a.world_path);
    geldata::AnnotationFile corpus = geldata::load(a.episodes_path);
    train::TrainConfig cfg = resolve_config(a);
    fs::create_directories(a.out_dir);
    cfg.checkpoint_path = (fs::path(a.out_dir) / "model.ckpt").string();
    model::Model m = a.init_ckpt.empty() ? model::Model(desk_model_config(w, cfg.seed))
                                         : model::load_checkpoint(a.init_ckpt);
    train::TrainLog log = train::finetune(m, w, corpus.episodes, cfg);
    write_text((fs::path(a.out_dir) / "trainlog.csv").string(), log.csv());
    std::printf("finetune: %ld iterations, final checkpoint %s\n", cfg.iterations,
                cfg.checkpoint_path.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"grounded entity-landmark navigation workbench"};
    app.require_subcommand(1);
    int exit_code = 0;

    // ---- gen-world ----
    auto* gen = app.add_subcommand("gen-world", "generate a synthetic world and episode corpus");
    struct {
        std::uint64_t seed = 1;
        std::string out_dir;
        int viewpoints = 40;
        int episodes = 200;
        double noise = 0.05;
        double val_frac = 0.2;
        int path_min = 3, path_max = 4;
    } g;
    gen->add_option("--seed", g.seed, "generation seed");
    gen->add_option("--out", g.out_dir, "output directory")->required();
    gen->add_option("--viewpoints", g.viewpoints, "viewpoint count");
    gen->add_option("--episodes", g.episodes, "episode count");
    gen->add_option("--noise", g.noise, "background noise sigma");
    gen->add_option("--val-frac", g.val_frac, "held-out trajectory fraction");
    gen->add_option("--path-min", g.path_min, "minimum path length (edges)");
    gen->add_option("--path-max", g.path_max, "maximum path length (edges)");
    gen->callback([&] {
        world::WorldParams params;
        params.seed = g.seed;
        params.n_viewpoints = g.viewpoints;
        params.n_episodes = g.episodes;
        params.noise_sigma = g.noise;
        params.path_len_min = g.path_min;
        params.path_len_max = g.path_max;
        world::GeneratedWorld gw = world::generate_world(params);
        fs::create_directories(g.out_dir);
        world::save_world(gw.world, (fs::path(g.out_dir) / "world.json").string());
        auto [tr, va] = split_episodes(gw.episodes, g.val_frac);
        geldata::save(tr, (fs::path(g.out_dir) / "train.json").string());
        geldata::save(va, (fs::path(g.out_dir) / "val.json").string());
        std::printf("gen-world: %d viewpoints, %zu landmarks, %zu train / %zu val episodes\n",
                    gw.world.size(), gw.world.landmarks.size(), tr.episodes.size(),
                    va.episodes.size());
    });

    // ---- validate ----
    auto* val = app.add_subcommand("validate", "check a gel-v1 file against the annotation rules");
    struct {
        std::string file;
        std::string world_path;
    } v;
    val->add_option("file", v.file, "gel-v1 annotation file")->required();
    val->add_option("--world", v.world_path, "world.json for scan viewpoint checks");
    val->callback([&] {
        geldata::AnnotationFile file = geldata::load(v.file);
        geldata::ValidateOptions opt;
        opt.generic_class_tokens = world::vocab::generic_class_tokens();
        if (!v.world_path.empty()) {
            world::WorldGraph w = world::load_world(v.world_path);
            std::set<std::string> vps(w.vp_ids.begin(), w.vp_ids.end());
            opt.scan_viewpoints[w.scan] = std::move(vps);
        }
        auto violations = geldata::validate(file, opt);
        for (const auto& viol : violations) std::printf("%s\n", viol.str().c_str());
        const bool hard = geldata::has_hard_violation(violations);
        std::printf("validate: %zu finding(s), %s\n", violations.size(), hard ? "FAIL" : "ok");
        if (hard) exit_code = 1;
    });

    // ---- stats ----
    auto* st = app.add_subcommand("stats", "annotation statistics in the published table shape");
    struct {
        std::string file;
        std::string split;
        std::string csv_path;
    } s;
    st->add_option("file", s.file, "gel-v1 annotation file")->required();
    st->add_option("--split", s.split, "split label for the report");
    st->add_option("--csv", s.csv_path, "also write the stats as CSV");
    st->callback([&] {
        geldata::AnnotationFile file = geldata::load(s.file);
        geldata::DatasetStats ds = geldata::stats(file);
        std::fputs(geldata::format_stats_table(ds, s.split).c_str(), stdout);
        if (!s.csv_path.empty()) write_text(s.csv_path, geldata::format_stats_csv(ds, s.split));
    });

    // ---- pretrain / finetune ----
    TrainArgs pa, fa;
    auto* pre = app.add_subcommand("pretrain", "adaptive pre-training on a generated corpus");
    pre->add_option("--world", pa.world_path, "world.json")->required();
    pre->add_option("--train", pa.episodes_path, "grounded training corpus")->required();
    pre->add_option("--augmented", pa.augmented_path, "augmented corpus (proxy tasks only)");
    pre->add_option("--val", pa.val_path, "held-out corpus for snapshots");
    pre->add_option("--config", pa.config_path, "key=value training config");
    pre->add_option("--init", pa.init_ckpt, "checkpoint to continue from");
    pre->add_option("--seed", pa.seed, "seed override");
    pre->add_option("--out", pa.out_dir, "output directory")->required();
    pre->callback([&] { exit_code = run_pretrain(pa); });

    auto* fin = app.add_subcommand("finetune", "imitation + policy-gradient fine-tuning");
    fin->add_option("--world", fa.world_path, "world.json")->required();
    fin->add_option("--episodes", fa.episodes_path, "training episodes")->required();
    fin->add_option("--config", fa.config_path, "key=value training config");
    fin->add_option("--ckpt", fa.init_ckpt, "checkpoint to start from");
    fin->add_option("--seed", fa.seed, "seed override");
    fin->add_option("--out", fa.out_dir, "output directory")->required();
    fin->callback([&] { exit_code = run_finetune(fa); });

    // ---- eval ----
    auto* ev = app.add_subcommand("eval", "roll out a policy and report navigation metrics");
    struct {
        std::string world_path, episodes_path, ckpt, out_dir;
        std::string mode = "greedy";
        std::uint64_t seed = 1;
        double radius = 3.0;
        int step_cap = 15;
    } e;
    ev->add_option("--world", e.world_path, "world.json")->required();
    ev->add_option("--episodes", e.episodes_path, "episodes to evaluate")->required();
    ev->add_option("--ckpt", e.ckpt, "model checkpoint")->required();
    ev->add_option("--mode", e.mode, "greedy | sample");
    ev->add_option("--seed", e.seed, "sampling seed");
    ev->add_option("--radius", e.radius, "success radius in meters");
    ev->add_option("--step-cap", e.step_cap, "rollout step cap");
    ev->add_option("--out", e.out_dir, "output directory")->required();
    ev->callback([&] {
        world::WorldGraph w = world::load_world(e.world_path);
        geldata::AnnotationFile file = geldata::load(e.episodes_path);
        model::Model m = model::load_checkpoint(e.ckpt);
        const eval::RolloutMode mode =
            e.mode == "sample" ? eval::RolloutMode::Sample : eval::RolloutMode::Greedy;
        Rng sampler(e.seed);
        std::vector<eval::RolloutRecord> records;
        for (const geldata::Episode& ep : file.episodes)
            records.push_back(eval::run_episode(
                m, w, ep, mode, e.step_cap,
                mode == eval::RolloutMode::Sample ? &sampler : nullptr));
        eval::MetricsReport report = eval::compute_metrics(records, w, file.episodes, e.radius);
        fs::create_directories(e.out_dir);
        write_text((fs::path(e.out_dir) / "metrics.csv").string(), eval::metrics_csv(report));
        std::printf("eval: %zu episodes  TL %.2f  NE %.2f  SR %.3f  SPL %.3f  GP %.2f\n",
                    report.rows.size(), report.aggregate.tl, report.aggregate.ne,
                    report.aggregate.sr, report.aggregate.spl, report.aggregate.gp);
    });

    // ---- ea-report ----
    auto* ea = app.add_subcommand("ea-report", "effective attention scores over annotated pairs");
    struct {
        std::string world_path, episodes_path, ckpt, baseline, out_path;
    } r;
    ea->add_option("--world", r.world_path, "world.json")->required();
    ea->add_option("--episodes", r.episodes_path, "annotated episodes")->required();
    ea->add_option("--ckpt", r.ckpt, "model checkpoint")->required();
    ea->add_option("--baseline", r.baseline, "second checkpoint for a two-sample comparison");
    ea->add_option("--out", r.out_path, "output JSON path")->required();
    ea->callback([&] {
        world::WorldGraph w = world::load_world(r.world_path);
        geldata::AnnotationFile file = geldata::load(r.episodes_path);
        model::Model m = model::load_checkpoint(r.ckpt);
        eval::EAReport rep = eval::effective_attention(m, w, file.episodes);
        nlohmann::ordered_json j;
        j["model"] = eval::ea_report_json(rep);
        if (!r.baseline.empty()) {
            model::Model base = model::load_checkpoint(r.baseline);
            eval::EAReport brep = eval::effective_attention(base, w, file.episodes);
            j["baseline"] = eval::ea_report_json(brep);
            j["welch"] = eval::ea_compare_json(rep, brep);
        }
        write_text(r.out_path, j.dump(2) + "\n");
        std::printf("ea-report: %zu e2l scores, mean %.4f (written to %s)\n", rep.e2l.size(),
                    rep.mean_e2l(), r.out_path.c_str());
    });

    // ---- heatmap ----
    auto* hm = app.add_subcommand("heatmap", "export one step's cross-attention matrix");
    struct {
        std::string world_path, episodes_path, ckpt, episode_id, out_prefix;
        int step = 0;
    } h;
    hm->add_option("--world", h.world_path, "world.json")->required();
    hm->add_option("--episodes", h.episodes_path, "episode file")->required();
    hm->add_option("--ckpt", h.ckpt, "model checkpoint")->required();
    hm->add_option("--episode", h.episode_id, "episode id")->required();
    hm->add_option("--step", h.step, "step index");
    hm->add_option("--out", h.out_prefix, "output path prefix (.csv/.pgm appended)")->required();
    hm->callback([&] {
        world::WorldGraph w = world::load_world(h.world_path);
        geldata::AnnotationFile file = geldata::load(h.episodes_path);
        model::Model m = model::load_checkpoint(h.ckpt);
        const geldata::Episode* ep = nullptr;
        for (const geldata::Episode& cand : file.episodes)
            if (cand.id == h.episode_id) ep = &cand;
        if (!ep) throw DataError("no episode '" + h.episode_id + "' in " + h.episodes_path);
        eval::RolloutRecord rec = eval::run_episode(m, w, *ep, eval::RolloutMode::Greedy);
        eval::export_attention_heatmap(rec, h.step, h.out_prefix + ".csv", h.out_prefix + ".pgm");
        std::printf("heatmap: wrote %s.csv and %s.pgm\n", h.out_prefix.c_str(),
                    h.out_prefix.c_str());
    });

    // ---- grad-check ----
    auto* gc = app.add_subcommand("grad-check", "finite-difference checks of the objectives");
    struct {
        bool all = false;
        std::string op;
        int seeds = 20;
        double tol = 1e-4;
    } k;
    gc->add_flag("--all", k.all, "check all eight objectives");
    gc->add_option("--op", k.op, "check a single objective by name");
    gc->add_option("--seeds", k.seeds, "random seeds per objective");
    gc->add_option("--tol", k.tol, "relative tolerance");
    gc->callback([&] {
        if (!k.all && k.op.empty()) throw ContractError("grad-check: pass --all or --op NAME");
        diagnostics::GradSuiteResult res = diagnostics::run_gradient_suite(k.seeds, 1e-5, k.tol);
        std::map<std::string, std::pair<bool, double>> by_obj;
        for (const auto& c : res.checks) {
            auto& slot = by_obj.emplace(c.objective, std::make_pair(true, 0.0)).first->second;
            slot.first = slot.first && c.pass;
            slot.second = std::max(slot.second, c.max_rel_err);
        }
        if (!k.op.empty() && !by_obj.count(k.op)) throw ContractError("unknown objective " + k.op);
        bool ok = true;
        for (const auto& [obj, agg] : by_obj) {
            if (!k.op.empty() && obj != k.op) continue;
            std::printf("%-6s %s  max rel err %.3g\n", obj.c_str(), agg.first ? "pass" : "FAIL",
                        agg.second);
            ok = ok && agg.first;
        }
        if (!ok) exit_code = 1;
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const gela::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return exit_code;
}
