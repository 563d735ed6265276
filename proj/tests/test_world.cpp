#include <catch2/catch_amalgamated.hpp>
#include <filesystem>

#include <cmath>
#include <set>

#include "gela/world.hpp"

using namespace gela;
using namespace gela::world;

namespace {

WorldParams small_params(std::uint64_t seed = 3, int n_vp = 12, int n_eps = 12) {
    WorldParams p;
    p.seed = seed;
    p.n_viewpoints = n_vp;
    p.n_episodes = n_eps;
    p.path_len_min = 2;
    p.path_len_max = 3;
    return p;
}

// Exhaustive enumeration over all simple paths; the oracle for Dijkstra.
void enumerate_paths(const WorldGraph& g, int u, int goal, std::vector<bool>& visited,
                     double len, double& best) {
    if (u == goal) {
        best = std::min(best, len);
        return;
    }
    for (int v : g.adj[static_cast<std::size_t>(u)]) {
        if (visited[static_cast<std::size_t>(v)]) continue;
        visited[static_cast<std::size_t>(v)] = true;
        enumerate_paths(g, v, goal, visited, len + g.distance(u, v), best);
        visited[static_cast<std::size_t>(v)] = false;
    }
}

double brute_force_shortest(const WorldGraph& g, int a, int b) {
    std::vector<bool> visited(static_cast<std::size_t>(g.size()), false);
    visited[static_cast<std::size_t>(a)] = true;
    double best = std::numeric_limits<double>::infinity();
    enumerate_paths(g, a, b, visited, 0.0, best);
    return best;
}

}  // namespace

TEST_CASE("generated worlds are connected with bounded degree") {
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
        auto gen = generate_world(small_params(seed));
        const WorldGraph& g = gen.world;
        for (const auto& row : g.adj) CHECK(row.size() <= 8);
        for (int v = 1; v < g.size(); ++v) {
            auto sp = g.shortest_path(0, v);
            REQUIRE(sp.has_value());
        }
    }
}

TEST_CASE("same seed gives byte-identical episode files") {
    auto a = generate_world(small_params(7));
    auto b = generate_world(small_params(7));
    CHECK(geldata::serialize(a.episodes) == geldata::serialize(b.episodes));

    auto c = generate_world(small_params(8));
    CHECK(geldata::serialize(a.episodes) != geldata::serialize(c.episodes));
}

TEST_CASE("every generated episode passes the validator with zero violations") {
    auto gen = generate_world(small_params(11, 20, 30));
    geldata::ValidateOptions opt;
    opt.generic_class_tokens = vocab::generic_class_tokens();
    auto vs = geldata::validate(gen.episodes, opt);
    for (const auto& v : vs) INFO(v.str());
    CHECK(vs.empty());
}

TEST_CASE("default corpus hits the target annotation ratios") {
    WorldParams p;
    p.seed = 5;
    auto gen = generate_world(p);
    REQUIRE(gen.episodes.episodes.size() == 200);
    auto s = geldata::stats(gen.episodes);
    const double ppi = s.p_per_i().value();
    const double bpi = s.b_per_i().value();
    INFO("P/I " << ppi << " B/I " << bpi);
    CHECK(ppi > 4.0 * 0.8);
    CHECK(ppi < 4.0 * 1.2);
    CHECK(bpi > 8.0 * 0.8);
    CHECK(bpi < 8.64 * 1.2);
    // every phrase carries exactly two boxes
    CHECK(s.boxes == 2 * s.phrases);
}

TEST_CASE("observe") {
    auto gen = generate_world(small_params(13, 14, 6));
    const WorldGraph& g = gen.world;
    SECTION("pure function of (viewpoint, heading)") {
        Panorama a = g.observe(3, 0.0);
        Panorama b = g.observe(3, 0.0);
        for (int i = 0; i < kNumViews; ++i) CHECK(a.views[i].feature == b.views[i].feature);
    }
    SECTION("viewpoint without landmarks is pure background noise") {
        std::set<int> with_landmarks;
        for (const Landmark& lm : g.landmarks)
            for (const Placement& pl : lm.placements) with_landmarks.insert(pl.viewpoint);
        int bare = -1;
        for (int v = 0; v < g.size(); ++v)
            if (!with_landmarks.count(v)) bare = v;
        if (bare >= 0) {
            Panorama p = g.observe(bare, 0.0);
            const double dim = g.params.view_feature_dim;
            for (const View& v : p.views) {
                double norm = 0;
                for (double x : v.feature) norm += x * x;
                CHECK(std::sqrt(norm) < g.params.noise_sigma * std::sqrt(dim) * 3.0);
            }
        }
    }
    SECTION("landmark signature correlates with its covered cells only") {
        REQUIRE(!g.landmarks.empty());
        const Landmark& lm = g.landmarks[0];
        const Placement& pl = lm.placements[0];
        auto cells = WorldGraph::covered_cells(pl.box);
        Panorama p = g.observe(pl.viewpoint, 0.0);
        double sig_norm = 0;
        for (double x : lm.signature) sig_norm += x * x;
        // which other landmarks cover cells at this viewpoint
        std::set<int> covered_by_any;
        for (const Landmark& other : g.landmarks)
            for (const Placement& opl : other.placements)
                if (opl.viewpoint == pl.viewpoint)
                    for (int c : WorldGraph::covered_cells(opl.box)) covered_by_any.insert(c);
        for (int cell = 0; cell < kNumViews; ++cell) {
            double dot = 0;
            for (int j = 0; j < g.params.view_feature_dim; ++j)
                dot += p.views[static_cast<std::size_t>(cell)]
                           .feature[static_cast<std::size_t>(j)] *
                       lm.signature[static_cast<std::size_t>(j)];
            const double corr = dot / sig_norm;
            if (std::find(cells.begin(), cells.end(), cell) != cells.end())
                CHECK(corr > 0.9);
            else if (!covered_by_any.count(cell))
                CHECK(std::fabs(corr) < 0.5);
        }
    }
    SECTION("rotating by one cell width cyclically permutes columns") {
        Panorama base = g.observe(2, 0.0);
        Panorama rot = g.observe(2, kTwoPi / kNumHeadings);
        for (int v = 0; v < kNumViews; ++v) {
            const int col = heading_col_of(v), row = elevation_row_of(v);
            const int src = view_index((col + 1) % kNumHeadings, row);
            CHECK(rot.views[static_cast<std::size_t>(v)].feature ==
                  base.views[static_cast<std::size_t>(src)].feature);
        }
    }
}

TEST_CASE("step") {
    auto gen = generate_world(small_params(17, 14, 6));
    const WorldGraph& g = gen.world;
    SECTION("stop at start terminates with zero length") {
        NavState s{0, 0.0, 0.0, false};
        NavState t = step(g, s, kStopSlot);
        CHECK(t.done);
        CHECK(t.traj_len == 0.0);
        CHECK(t.viewpoint == 0);
    }
    SECTION("moving adds the edge length") {
        NavState s{0, 0.0, 0.0, false};
        auto cands = g.candidates(0);
        REQUIRE(!cands.empty());
        NavState t = step(g, s, cands[0].slot);
        CHECK(t.viewpoint == cands[0].neighbor);
        CHECK(t.traj_len == Catch::Approx(g.distance(0, cands[0].neighbor)));
    }
    SECTION("candidates equal graph neighbors") {
        for (int v = 0; v < g.size(); ++v) {
            auto cands = g.candidates(v);
            std::set<int> from_cands, from_graph(g.adj[static_cast<std::size_t>(v)].begin(),
                                                 g.adj[static_cast<std::size_t>(v)].end());
            std::set<int> slots;
            for (const Candidate& c : cands) {
                from_cands.insert(c.neighbor);
                CHECK(slots.insert(c.slot).second);  // distinct slots
                CHECK(c.slot != kStopSlot);
            }
            CHECK(from_cands == from_graph);
        }
    }
    SECTION("non-navigable action raises ActionError") {
        NavState s{0, 0.0, 0.0, false};
        std::set<int> valid;
        for (const Candidate& c : g.candidates(0)) valid.insert(c.slot);
        int bad = -1;
        for (int slot = 0; slot < kNumViews; ++slot)
            if (!valid.count(slot)) bad = slot;
        REQUIRE(bad >= 0);
        CHECK_THROWS_AS(step(g, s, bad), ActionError);
    }
}

TEST_CASE("shortest_path") {
    SECTION("trivial cases") {
        auto gen = generate_world(small_params(19, 10, 3));
        const WorldGraph& g = gen.world;
        auto same = g.shortest_path(4, 4);
        REQUIRE(same.has_value());
        CHECK(same->first == 0.0);
        CHECK(same->second == std::vector<int>{4});
    }
    SECTION("two-node graph with a single edge") {
        WorldGraph g;
        g.scan = "toy";
        g.params = small_params(1, 2, 1);
        g.vp_ids = {"a", "b"};
        g.positions = {{0, 0, 0}, {5, 0, 0}};
        g.adj = {{1}, {0}};
        g.finalize();
        auto sp = g.shortest_path(0, 1);
        REQUIRE(sp.has_value());
        CHECK(sp->first == 5.0);
        CHECK(sp->second == std::vector<int>{0, 1});
    }
    SECTION("matches exhaustive enumeration on random 10-node worlds") {
        for (std::uint64_t seed = 1; seed <= 10; ++seed) {
            auto gen = generate_world(small_params(seed, 10, 3));
            const WorldGraph& g = gen.world;
            Rng rng(seed * 97);
            for (int trial = 0; trial < 6; ++trial) {
                const int a = static_cast<int>(rng.uniform_index(10));
                const int b = static_cast<int>(rng.uniform_index(10));
                auto sp = g.shortest_path(a, b);
                REQUIRE(sp.has_value());
                CHECK(sp->first == Catch::Approx(brute_force_shortest(g, a, b)).margin(1e-9));
            }
        }
    }
}

TEST_CASE("world save/load round trip") {
    namespace fs = std::filesystem;
    auto gen = generate_world(small_params(23, 12, 6));
    const std::string path = (fs::temp_directory_path() / "gela_world_test.json").string();
    save_world(gen.world, path);
    WorldGraph loaded = load_world(path);
    CHECK(loaded.scan == gen.world.scan);
    CHECK(loaded.adj == gen.world.adj);
    CHECK(loaded.positions == gen.world.positions);
    REQUIRE(loaded.landmarks.size() == gen.world.landmarks.size());
    CHECK(loaded.landmarks[0].signature == gen.world.landmarks[0].signature);
    // observe must reproduce bit-identically after reload
    Panorama a = gen.world.observe(3, 0.0);
    Panorama b = loaded.observe(3, 0.0);
    for (int i = 0; i < kNumViews; ++i) CHECK(a.views[i].feature == b.views[i].feature);
    fs::remove(path);
}

TEST_CASE("infeasible params raise ParamError") {
    WorldParams p = small_params(1, 3, 2);
    p.path_len_max = 5;
    CHECK_THROWS_AS(generate_world(p), ParamError);
}