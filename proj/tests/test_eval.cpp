#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "gela/eval.hpp"

using namespace gela;
using namespace gela::eval;

namespace {

model::ModelConfig tiny_config() {
    model::ModelConfig cfg;
    cfg.vocab_size = 64;
    cfg.d_model = 8;
    cfg.n_layers_text = 1;
    cfg.n_layers_cross = 1;
    cfg.n_heads = 2;
    cfg.max_instruction_len = 24;
    cfg.view_feature_dim = 16;
    cfg.ffn_hidden = 12;
    cfg.seed = 5;
    return cfg;
}

world::GeneratedWorld small_world(std::uint64_t seed = 3, int n_vp = 12, int n_eps = 6) {
    world::WorldParams p;
    p.seed = seed;
    p.n_viewpoints = n_vp;
    p.n_episodes = n_eps;
    p.path_len_min = 2;
    p.path_len_max = 3;
    return world::generate_world(p);
}

// Record of an agent that replays the expert path and stops.
RolloutRecord expert_record(const world::WorldGraph& w, const geldata::Episode& ep) {
    RolloutRecord rec;
    rec.episode_id = ep.id;
    world::NavState state{w.index_of(ep.path[0]), 0, 0, false};
    rec.visited.push_back(state.viewpoint);
    for (std::size_t t = 1; t < ep.path.size(); ++t) {
        const int slot = w.expert_slot(state.viewpoint, w.index_of(ep.path[t]));
        state = world::step(w, state, slot);
        rec.visited.push_back(state.viewpoint);
        rec.actions.push_back(slot);
    }
    state = world::step(w, state, kStopSlot);
    rec.actions.push_back(kStopSlot);
    rec.traj_len = state.traj_len;
    rec.terminated = true;
    return rec;
}

}  // namespace

TEST_CASE("run_episode") {
    auto gen = small_world();
    model::Model m(tiny_config());
    SECTION("greedy mode is deterministic") {
        const geldata::Episode& ep = gen.episodes.episodes[0];
        RolloutRecord a = run_episode(m, gen.world, ep, RolloutMode::Greedy, 6);
        RolloutRecord b = run_episode(m, gen.world, ep, RolloutMode::Greedy, 6);
        CHECK(a.visited == b.visited);
        CHECK(a.actions == b.actions);
        CHECK(a.action_dists == b.action_dists);
    }
    SECTION("records carry one distribution and attention matrix per step") {
        const geldata::Episode& ep = gen.episodes.episodes[1];
        RolloutRecord rec = run_episode(m, gen.world, ep, RolloutMode::Greedy, 4);
        CHECK(rec.actions.size() == rec.action_dists.size());
        CHECK(rec.actions.size() == rec.attn_t2v.size());
        for (const auto& dist : rec.action_dists) {
            double s = 0;
            for (double v : dist) s += v;
            CHECK(s == Catch::Approx(1.0).margin(1e-9));
        }
    }
}

TEST_CASE("compute_metrics") {
    auto gen = small_world(7);
    const world::WorldGraph& w = gen.world;
    const auto& eps = gen.episodes.episodes;
    SECTION("a stop-immediately policy has TL 0, NE start-goal, GP exactly 0") {
        std::vector<RolloutRecord> recs;
        std::vector<geldata::Episode> used;
        for (int i = 0; i < 3; ++i) {
            RolloutRecord rec;
            rec.episode_id = eps[static_cast<std::size_t>(i)].id;
            rec.visited = {w.index_of(eps[static_cast<std::size_t>(i)].path[0])};
            rec.actions = {kStopSlot};
            rec.terminated = true;
            recs.push_back(rec);
            used.push_back(eps[static_cast<std::size_t>(i)]);
        }
        MetricsReport rep = compute_metrics(recs, w, used, 3.0);
        for (std::size_t i = 0; i < used.size(); ++i) {
            const auto& row = rep.rows[i];
            const int start = w.index_of(used[i].path.front());
            const int goal = w.index_of(used[i].path.back());
            CHECK(row.tl == 0.0);
            CHECK(row.ne == Catch::Approx(w.distance(start, goal)));
            CHECK(row.gp == 0.0);
        }
    }
    SECTION("expert replay reaches NE 0, SR 1") {
        std::vector<RolloutRecord> recs;
        std::vector<geldata::Episode> used(eps.begin(), eps.end());
        for (const auto& ep : used) recs.push_back(expert_record(w, ep));
        MetricsReport rep = compute_metrics(recs, w, used, 3.0);
        for (const auto& row : rep.rows) {
            CHECK(row.ne == 0.0);
            CHECK(row.sr == 1.0);
            CHECK(row.spl > 0.0);
            CHECK(row.spl <= row.sr);
        }
        CHECK(rep.aggregate.sr == 1.0);
    }
    SECTION("SPL follows l / max(p, l)") {
        // success with p = 2l gives SPL 0.5
        geldata::Episode ep = eps[0];
        auto geo = w.shortest_path(w.index_of(ep.path.front()), w.index_of(ep.path.back()));
        REQUIRE(geo.has_value());
        RolloutRecord rec;
        rec.episode_id = ep.id;
        rec.visited = {w.index_of(ep.path.front()), w.index_of(ep.path.back())};
        rec.actions = {kStopSlot};
        rec.terminated = true;
        rec.traj_len = 2.0 * geo->first;
        // force final position onto the goal so the episode counts as success
        rec.visited.back() = w.index_of(ep.path.back());
        MetricsReport rep = compute_metrics({rec}, w, {ep}, 3.0);
        CHECK(rep.rows[0].spl == Catch::Approx(0.5));
        CHECK(rep.rows[0].sr == 1.0);
    }
    SECTION("failure gives SPL 0 regardless of path length") {
        geldata::Episode ep = eps[0];
        RolloutRecord rec;
        rec.episode_id = ep.id;
        rec.visited = {w.index_of(ep.path.front())};
        rec.actions = {};
        rec.terminated = false;  // truncated: counted as failure
        rec.traj_len = 1.0;
        MetricsReport rep = compute_metrics({rec}, w, {ep}, 1e9);
        CHECK(rep.rows[0].sr == 0.0);
        CHECK(rep.rows[0].spl == 0.0);
    }
    SECTION("record/episode mismatch raises ContractError") {
        CHECK_THROWS_AS(compute_metrics({}, w, {eps[0]}, 3.0), ContractError);
    }
    SECTION("SPL <= SR per episode and aggregate on greedy rollouts") {
        model::Model m(tiny_config());
        std::vector<RolloutRecord> recs;
        std::vector<geldata::Episode> used(eps.begin(), eps.begin() + 4);
        for (const auto& ep : used)
            recs.push_back(run_episode(m, w, ep, RolloutMode::Greedy, 8));
        MetricsReport rep = compute_metrics(recs, w, used, 3.0);
        for (const auto& row : rep.rows) CHECK(row.spl <= row.sr + 1e-15);
        CHECK(rep.aggregate.spl <= rep.aggregate.sr + 1e-15);
    }
}

TEST_CASE("welch t test") {
    SECTION("known reference values") {
        // equal-variance symmetric case: t = 0, p = 1
        std::vector<double> a{1, 2, 3, 4}, b{4, 3, 2, 1};
        WelchResult r = welch_t_test(a, b);
        CHECK(r.t == Catch::Approx(0.0).margin(1e-12));
        CHECK(r.p == Catch::Approx(1.0).margin(1e-12));
    }
    SECTION("clearly separated samples give a tiny p") {
        std::vector<double> a(40, 1.0), b(40, 0.0);
        for (std::size_t i = 0; i < a.size(); ++i) {
            a[i] += 0.01 * static_cast<double>(i % 5);
            b[i] += 0.01 * static_cast<double>(i % 7);
        }
        WelchResult r = welch_t_test(a, b);
        CHECK(r.p < 1e-10);
        CHECK(r.mean_a > r.mean_b);
    }
    SECTION("student cdf via the incomplete beta matches tabulated points") {
        // two-sided p for t = 2.0, df = 10 is 0.07339; t = 2.571, df = 5 is models 0.05
        const double p1 = detail::reg_inc_beta(5.0, 0.5, 10.0 / (10.0 + 4.0));
        CHECK(p1 == Catch::Approx(0.07339).margin(2e-4));
        const double p2 = detail::reg_inc_beta(2.5, 0.5, 5.0 / (5.0 + 2.571 * 2.571));
        CHECK(p2 == Catch::Approx(0.05).margin(5e-4));
    }
}

TEST_CASE("effective attention") {
    auto gen = small_world(11, 14, 6);
    model::Model m(tiny_config());
    EAReport rep = effective_attention(m, gen.world, gen.episodes.episodes);
    REQUIRE(!rep.e2l.empty());
    REQUIRE(!rep.l2e.empty());
    SECTION("scores lie in [0, 1]") {
        for (double v : rep.e2l) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0 + 1e-12);
        }
        for (double v : rep.l2e) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0 + 1e-12);
        }
    }
    SECTION("renormalized text row sums to 1 over the 37 cells") {
        const geldata::Episode& ep = gen.episodes.episodes[0];
        auto steps = teacher_forced_steps(gen.world, ep);
        diff::Tape tape;
        auto enc = m.encode_step(tape, steps[0].instr, steps[0].past, steps[0].past_actions,
                                 steps[0].obs);
        auto row = text_row_over_s(enc.text_to_vis, enc.n_history_rows, 1);
        double s = 0;
        for (double v : row) s += v;
        CHECK(s == Catch::Approx(1.0).margin(1e-9));
    }
    SECTION("uniform attention yields cells/37") {
        // constructed matrix: every column equal mass
        model::AttnMatrix t2v;
        t2v.rows = 3;
        t2v.cols = 2 + kNumSlots;  // 2 history rows
        t2v.w.assign(static_cast<std::size_t>(t2v.rows) * t2v.cols,
                     1.0 / static_cast<double>(t2v.cols));
        auto row = text_row_over_s(t2v, 2, 0);
        double four = row[0] + row[1] + row[2] + row[3];
        CHECK(four == Catch::Approx(4.0 / 37.0).margin(1e-12));
    }
}

TEST_CASE("attention heatmap export") {
    namespace fs = std::filesystem;
    auto gen = small_world(13);
    model::Model m(tiny_config());
    const geldata::Episode& ep = gen.episodes.episodes[0];
    RolloutRecord rec = run_episode(m, gen.world, ep, RolloutMode::Greedy, 4);
    const std::string csv = (fs::temp_directory_path() / "gela_hm.csv").string();
    const std::string pgm = (fs::temp_directory_path() / "gela_hm.pgm").string();
    SECTION("dimensions and range") {
        export_attention_heatmap(rec, 0, csv, pgm);
        std::ifstream in(csv);
        std::string line;
        int rows = 0;
        while (std::getline(in, line)) {
            ++rows;
            int cols = 1;
            for (char c : line) cols += (c == ',');
            CHECK(cols == kNumSlots);
            std::istringstream ls(line);
            std::string cell;
            while (std::getline(ls, cell, ',')) {
                const double v = std::stod(cell);
                CHECK(v >= 0.0);
                CHECK(v <= 1.0);
            }
        }
        CHECK(rows == static_cast<int>(ep.instruction.tokens.size()));
        std::ifstream pin(pgm);
        std::string magic;
        pin >> magic;
        CHECK(magic == "P2");
        fs::remove(csv);
        fs::remove(pgm);
    }
    SECTION("constant matrix maps to all zeros") {
        RolloutRecord fake = rec;
        auto& t2v = fake.attn_t2v[0];
        std::fill(t2v.w.begin(), t2v.w.end(), 0.25);
        export_attention_heatmap(fake, 0, csv, pgm);
        std::ifstream in(csv);
        std::string line;
        while (std::getline(in, line)) {
            std::istringstream ls(line);
            std::string cell;
            while (std::getline(ls, cell, ',')) CHECK(std::stod(cell) == 0.0);
        }
        fs::remove(csv);
        fs::remove(pgm);
    }
    SECTION("step out of range raises IndexError") {
        CHECK_THROWS_AS(export_attention_heatmap(rec, 99, csv, pgm), IndexError);
    }
}