#pragma once

// Deterministic synthetic world generator: a connected viewpoint graph with
// Euclidean edge lengths, landmarks planted on edges and imprinted into the
// panoramas of the two edge endpoints, and templated instruction episodes in
// the gel-v1 annotation format.

#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "gela/common.hpp"
#include "gela/error.hpp"
#include "gela/geldata.hpp"
#include "gela/model.hpp"
#include "gela/rng.hpp"

namespace gela::world {

using model::Panorama;
using model::View;

using geldata::kDefaultCellCoverage;

// Closed 256-id token set used by generated instructions.
namespace vocab {
inline constexpr int kGo = 3;
inline constexpr int kThen = 4;
inline constexpr int kStop = 5;
inline constexpr int kFirstDirection = 6;   // 12 words, one per heading column
inline constexpr int kFirstClass = 18;      // 8 words, classes 0..7
inline constexpr int kThe = 26;
inline constexpr int kFirstAdjective = 27;  // 32 words
inline constexpr int kNumAdjectives = 32;

inline int direction_word(int heading_col) { return kFirstDirection + heading_col; }
inline int class_word(int class_id) { return kFirstClass + class_id; }

inline std::set<int> generic_class_tokens() {
    std::set<int> s;
    for (int c = 0; c < kNumClasses; ++c) s.insert(class_word(c));
    return s;
}
}  // namespace vocab

struct WorldParams {
    int n_viewpoints = 40;
    int n_landmarks = 0;  // 0 = automatic (one per edge plus a 25% second helping)
    int path_len_min = 3;  // edges
    int path_len_max = 4;
    int entities_min = 4;
    int entities_max = 5;
    int n_episodes = 200;
    int instructions_per_trajectory = 3;
    double noise_sigma = 0.05;
    int view_feature_dim = 16;
    double extent = 24.0;  // meters
    std::uint64_t seed = 1;

    void validate() const {
        if (n_viewpoints < 2 || n_episodes < 1 || instructions_per_trajectory < 1 ||
            view_feature_dim < 1 || extent <= 0 || noise_sigma < 0)
            throw ParamError("WorldParams: counts must be positive");
        if (path_len_min < 2 || path_len_max < path_len_min)
            throw ParamError("WorldParams: path length range invalid (min 2 edges)");
        if (entities_min < 1 || entities_max < entities_min)
            throw ParamError("WorldParams: entity range invalid");
        if (n_viewpoints <= path_len_max)
            throw ParamError("WorldParams: too few viewpoints for path length " +
                             std::to_string(path_len_max));
    }
};

struct Placement {
    int viewpoint = -1;
    geldata::Box box;  // canonical 0-degree frame, corner form
};

struct Landmark {
    std::string label;
    int class_id = 1;  // 1..7 (0 is background)
    std::string category;
    std::vector<double> signature;
    std::array<double, 3> anchor{};
    int edge_a = -1, edge_b = -1;  // endpoints of the hosting edge
    std::vector<Placement> placements;
    std::vector<int> phrase;  // [adjective, class word]
};

struct Candidate {
    int slot = -1;
    int neighbor = -1;
};

class WorldGraph {
public:
    std::string scan;
    WorldParams params;
    std::vector<std::string> vp_ids;
    std::vector<std::array<double, 3>> positions;
    std::vector<std::vector<int>> adj;  // sorted neighbor indices
    std::vector<Landmark> landmarks;

    int size() const { return static_cast<int>(positions.size()); }

    int index_of(const std::string& id) const {
        auto it = vp_index_.find(id);
        if (it == vp_index_.end()) throw DataError("unknown viewpoint '" + id + "'");
        return it->second;
    }

    void rebuild_index() {
        vp_index_.clear();
        for (int i = 0; i < size(); ++i) vp_index_[vp_ids[static_cast<std::size_t>(i)]] = i;
        rebuild_placement_index();
    }

    double distance(int a, int b) const {
        const auto& p = positions[static_cast<std::size_t>(a)];
        const auto& q = positions[static_cast<std::size_t>(b)];
        return std::sqrt((p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]) +
                         (p[2] - q[2]) * (p[2] - q[2]));
    }

    // Direction angles of b as seen from a, canonical world frame.
    std::pair<double, double> direction_angles(int a, int b) const {
        const auto& p = positions[static_cast<std::size_t>(a)];
        const auto& q = positions[static_cast<std::size_t>(b)];
        const double dx = q[0] - p[0], dy = q[1] - p[1], dz = q[2] - p[2];
        const double heading = wrap_angle_2pi(std::atan2(dy, dx));
        const double elevation = std::atan2(dz, std::hypot(dx, dy));
        return {heading, elevation};
    }

    // Deterministic slot assignment for the navigable neighbors of `vp`.
    // Each neighbor claims the view cell its direction falls in; collisions
    // probe nearby columns, then the other elevation rows. The stop slot is
    // never assigned.
    std::vector<Candidate> candidates(int vp) const {
        std::vector<Candidate> out;
        std::set<int> taken;
        for (int nb : adj[static_cast<std::size_t>(vp)]) {
            auto [heading, elevation] = direction_angles(vp, nb);
            const int col = heading_col_of_x(heading / kTwoPi);
            int erow = 1;
            if (elevation > kPi / 12) erow = 2;
            if (elevation < -kPi / 12) erow = 0;
            int slot = -1;
            for (int dr = 0; dr < kNumElevations && slot < 0; ++dr) {
                const int r = (erow + dr) % kNumElevations;
                for (int dc : {0, 1, -1, 2, -2, 3, -3, 4, -4, 5, -5, 6}) {
                    const int c = ((col + dc) % kNumHeadings + kNumHeadings) % kNumHeadings;
                    const int s = view_index(c, r);
                    if (!taken.count(s)) {
                        slot = s;
                        break;
                    }
                }
            }
            if (slot < 0) throw ContractError("candidates: no free slot (degree too high?)");
            taken.insert(slot);
            out.push_back({slot, nb});
        }
        return out;
    }

    int expert_slot(int from, int to) const {
        for (const Candidate& c : candidates(from))
            if (c.neighbor == to) return c.slot;
        throw ActionError("no edge " + vp_ids[static_cast<std::size_t>(from)] + " -> " +
                          vp_ids[static_cast<std::size_t>(to)]);
    }

    static std::vector<int> covered_cells(const geldata::Box& box,
                                          double coverage = kDefaultCellCoverage) {
        return geldata::covered_cells(box, coverage);
    }

    // Pure synthesis: background noise keyed by (seed, viewpoint, cell) plus
    // the signatures of every landmark box covering the cell. The panorama is
    // rotated so agent_heading maps to view column 0 (snapped to the grid).
    Panorama observe(int vp, double agent_heading = 0.0) const {
        const int fdim = params.view_feature_dim;
        const int shift = static_cast<int>(std::llround(wrap_angle_2pi(agent_heading) /
                                                        (kTwoPi / kNumHeadings))) %
                          kNumHeadings;
        Panorama pano;
        pano.views.resize(kNumViews);
        const auto it = placement_cells_.find(vp);
        for (int v = 0; v < kNumViews; ++v) {
            const int world_col = (heading_col_of(v) + shift) % kNumHeadings;
            const int world_cell = view_index(world_col, elevation_row_of(v));
            View& view = pano.views[static_cast<std::size_t>(v)];
            view.heading = view_heading(v);
            view.elevation = view_elevation(v);
            view.feature.resize(static_cast<std::size_t>(fdim));
            Rng bg(mix_hash(params.seed, static_cast<std::uint64_t>(vp),
                            static_cast<std::uint64_t>(world_cell)));
            for (double& x : view.feature) x = params.noise_sigma * bg.normal();
            if (it == placement_cells_.end()) continue;
            for (const auto& pc : it->second) {
                if (pc.cell != world_cell) continue;
                const Landmark& lm = landmarks[static_cast<std::size_t>(pc.landmark)];
                Rng pn(mix_hash(params.seed ^ 0xabcdULL, static_cast<std::uint64_t>(vp),
                                static_cast<std::uint64_t>(world_cell) * 131 +
                                    static_cast<std::uint64_t>(pc.landmark)));
                for (int j = 0; j < fdim; ++j)
                    view.feature[static_cast<std::size_t>(j)] +=
                        lm.signature[static_cast<std::size_t>(j)] +
                        params.noise_sigma * pn.normal();
            }
        }
        return pano;
    }

    // Landmark-class distribution of one view cell: equal mix over covering
    // landmark classes, or one-hot background.
    std::vector<double> mrc_target(int vp, int view_cell) const {
        std::vector<double> p(kNumClasses, 0.0);
        std::vector<int> classes;
        auto it = placement_cells_.find(vp);
        if (it != placement_cells_.end())
            for (const auto& pc : it->second)
                if (pc.cell == view_cell)
                    classes.push_back(landmarks[static_cast<std::size_t>(pc.landmark)].class_id);
        if (classes.empty()) {
            p[0] = 1.0;
        } else {
            for (int c : classes) p[static_cast<std::size_t>(c)] += 1.0 / classes.size();
        }
        return p;
    }

    std::optional<std::pair<double, std::vector<int>>> shortest_path(int a, int b) const {
        const int n = size();
        std::vector<double> dist(static_cast<std::size_t>(n),
                                 std::numeric_limits<double>::infinity());
        std::vector<int> prev(static_cast<std::size_t>(n), -1);
        using Item = std::pair<double, int>;
        std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
        dist[static_cast<std::size_t>(a)] = 0;
        pq.push({0.0, a});
        while (!pq.empty()) {
            auto [d, u] = pq.top();
            pq.pop();
            if (d > dist[static_cast<std::size_t>(u)]) continue;
            if (u == b) break;
            for (int v : adj[static_cast<std::size_t>(u)]) {
                const double nd = d + distance(u, v);
                if (nd < dist[static_cast<std::size_t>(v)]) {
                    dist[static_cast<std::size_t>(v)] = nd;
                    prev[static_cast<std::size_t>(v)] = u;
                    pq.push({nd, v});
                }
            }
        }
        if (!std::isfinite(dist[static_cast<std::size_t>(b)])) return std::nullopt;
        std::vector<int> path;
        for (int u = b; u != -1; u = prev[static_cast<std::size_t>(u)]) path.push_back(u);
        std::reverse(path.begin(), path.end());
        return std::make_pair(dist[static_cast<std::size_t>(b)], path);
    }

    void finalize() { rebuild_index(); }

private:
    struct PlacementCell {
        int cell = 0;
        int landmark = 0;
    };
    std::map<std::string, int> vp_index_;
    std::map<int, std::vector<PlacementCell>> placement_cells_;

    void rebuild_placement_index() {
        placement_cells_.clear();
        for (std::size_t li = 0; li < landmarks.size(); ++li)
            for (const Placement& pl : landmarks[li].placements)
                for (int cell : covered_cells(pl.box))
                    placement_cells_[pl.viewpoint].push_back({cell, static_cast<int>(li)});
    }
};

// ---------------------------------------------------------------------------
// navigation state
// ---------------------------------------------------------------------------

struct NavState {
    int viewpoint = 0;
    double heading = 0.0;
    double traj_len = 0.0;
    bool done = false;
};

inline NavState step(const WorldGraph& world, const NavState& state, int action_slot) {
    if (state.done) throw ContractError("step: episode already terminal");
    NavState next = state;
    if (action_slot == kStopSlot) {
        next.done = true;
        return next;
    }
    for (const Candidate& c : world.candidates(state.viewpoint)) {
        if (c.slot != action_slot) continue;
        next.traj_len += world.distance(state.viewpoint, c.neighbor);
        next.heading = world.direction_angles(state.viewpoint, c.neighbor).first;
        next.viewpoint = c.neighbor;
        return next;
    }
    throw ActionError("slot " + std::to_string(action_slot) + " is not navigable from " +
                      world.vp_ids[static_cast<std::size_t>(state.viewpoint)]);
}

// ---------------------------------------------------------------------------
// generation
// ---------------------------------------------------------------------------

namespace detail {

inline std::string vp_name(int i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "vp%03d", i);
    return buf;
}

inline std::string lm_name(int i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "lm%03d", i);
    return buf;
}

// Box of a landmark as seen from a viewpoint: centered on the view cell the
// landmark direction falls in, with a fixed per-category size. Objects cover
// one cell, scenes spread over three heading columns. Centers are clamped
// away from the seam so boxes never wrap.
inline geldata::Box placement_box(const WorldGraph& g, int vp, const std::array<double, 3>& anchor,
                                  const std::string& category) {
    const auto& p = g.positions[static_cast<std::size_t>(vp)];
    const double dx = anchor[0] - p[0], dy = anchor[1] - p[1], dz = anchor[2] - p[2];
    const double heading = wrap_angle_2pi(std::atan2(dy, dx));
    const double elevation = std::atan2(dz, std::hypot(dx, dy));
    const double w = category == "object" ? 0.10 : 0.18;
    const double h = category == "object" ? 0.22 : 0.30;
    const int col = heading_col_of_x(heading / kTwoPi);
    const int row = elevation_row_of_y(0.5 - elevation / kPi);
    double cx = (col + 0.5) / kNumHeadings;
    double cy = (cell_y_min(row) + cell_y_max(row)) / 2;
    cx = std::min(std::max(cx, w / 2), 1.0 - w / 2);
    cy = std::min(std::max(cy, h / 2 + 0.02), 1.0 - h / 2 - 0.02);
    return geldata::Box{cx - w / 2, cy - h / 2, w, h};
}

}  // namespace detail

struct GeneratedWorld {
    WorldGraph world;
    geldata::AnnotationFile episodes;
};

inline GeneratedWorld generate_world(const WorldParams& params) {
    params.validate();
    Rng rng(params.seed);
    WorldGraph g;
    g.params = params;
    g.scan = "syn-" + std::to_string(params.seed);

    // viewpoint positions: mostly-planar layout with mild height variation
    const int n = params.n_viewpoints;
    for (int i = 0; i < n; ++i) {
        g.vp_ids.push_back(detail::vp_name(i));
        g.positions.push_back({rng.uniform(0, params.extent), rng.uniform(0, params.extent),
                               rng.uniform(0, 2.0)});
    }
    g.adj.assign(static_cast<std::size_t>(n), {});
    auto degree = [&](int v) { return static_cast<int>(g.adj[static_cast<std::size_t>(v)].size()); };
    auto connected = [&](int a, int b) {
        const auto& row = g.adj[static_cast<std::size_t>(a)];
        return std::find(row.begin(), row.end(), b) != row.end();
    };
    auto link = [&](int a, int b) {
        g.adj[static_cast<std::size_t>(a)].push_back(b);
        g.adj[static_cast<std::size_t>(b)].push_back(a);
    };

    // spanning tree: attach each node to its nearest already-connected node
    // with spare degree, then enrich with up to two short extra edges each
    for (int i = 1; i < n; ++i) {
        int best = -1;
        double best_d = 0;
        for (int j = 0; j < i; ++j) {
            if (degree(j) >= 8) continue;
            const double d = g.distance(i, j);
            if (best < 0 || d < best_d) {
                best = j;
                best_d = d;
            }
        }
        if (best < 0) throw ParamError("generate_world: cannot keep graph degree <= 8");
        link(i, best);
    }
    for (int i = 0; i < n; ++i) {
        std::vector<std::pair<double, int>> near;
        for (int j = 0; j < n; ++j)
            if (j != i && !connected(i, j)) near.push_back({g.distance(i, j), j});
        std::sort(near.begin(), near.end());
        int added = 0;
        for (const auto& [d, j] : near) {
            if (added >= 2 || degree(i) >= 8) break;
            if (degree(j) >= 8) continue;
            link(i, j);
            ++added;
        }
    }
    for (auto& row : g.adj) std::sort(row.begin(), row.end());

    // edge list for landmark hosting
    std::vector<std::pair<int, int>> edges;
    for (int i = 0; i < n; ++i)
        for (int j : g.adj[static_cast<std::size_t>(i)])
            if (i < j) edges.push_back({i, j});
    std::vector<int> edge_order(edges.size());
    for (std::size_t i = 0; i < edges.size(); ++i) edge_order[i] = static_cast<int>(i);
    rng.shuffle(edge_order);

    int n_landmarks = params.n_landmarks;
    if (n_landmarks == 0)
        n_landmarks = static_cast<int>(edges.size() + edges.size() / 2);
    n_landmarks = std::min<int>(n_landmarks, static_cast<int>(2 * edges.size()));

    // hand out (adjective, class) combinations uniquely so no two landmarks
    // share a phrase
    std::set<std::pair<int, int>> used_phrases;
    std::map<int, std::vector<int>> edge_landmarks;
    for (int li = 0; li < n_landmarks; ++li) {
        const int e = edge_order[static_cast<std::size_t>(li) % edges.size()];
        auto [a, b] = edges[static_cast<std::size_t>(e)];
        Landmark lm;
        lm.label = detail::lm_name(li);
        lm.class_id = 1 + static_cast<int>(rng.uniform_index(kNumClasses - 1));
        lm.category = rng.bernoulli(0.5) ? "object" : "scene";
        lm.edge_a = a;
        lm.edge_b = b;
        int adj_word = static_cast<int>(rng.uniform_index(vocab::kNumAdjectives));
        for (int tries = 0; tries < 256 && used_phrases.count({adj_word, lm.class_id}); ++tries) {
            adj_word = static_cast<int>(rng.uniform_index(vocab::kNumAdjectives));
            if (tries > 64) lm.class_id = 1 + static_cast<int>(rng.uniform_index(kNumClasses - 1));
        }
        if (used_phrases.count({adj_word, lm.class_id}))
            throw ParamError("generate_world: phrase space exhausted; reduce n_landmarks");
        used_phrases.insert({adj_word, lm.class_id});
        lm.phrase = {vocab::kFirstAdjective + adj_word, vocab::class_word(lm.class_id)};
        lm.signature.resize(static_cast<std::size_t>(params.view_feature_dim));
        for (double& x : lm.signature) x = rng.normal();
        const auto& pa = g.positions[static_cast<std::size_t>(a)];
        const auto& pb = g.positions[static_cast<std::size_t>(b)];
        const double t = rng.uniform(0.4, 0.6);
        lm.anchor = {pa[0] + t * (pb[0] - pa[0]) + rng.uniform(-1.0, 1.0),
                     pa[1] + t * (pb[1] - pa[1]) + rng.uniform(-1.0, 1.0),
                     rng.uniform(0.4, 2.2)};
        lm.placements.push_back({a, detail::placement_box(g, a, lm.anchor, lm.category)});
        lm.placements.push_back({b, detail::placement_box(g, b, lm.anchor, lm.category)});
        edge_landmarks[e].push_back(li);
        g.landmarks.push_back(std::move(lm));
    }
    g.finalize();

    // edge index lookup
    std::map<std::pair<int, int>, int> edge_index;
    for (std::size_t e = 0; e < edges.size(); ++e) {
        edge_index[edges[e]] = static_cast<int>(e);
        edge_index[{edges[e].second, edges[e].first}] = static_cast<int>(e);
    }

    // episodes: random-walk trajectories, instructions_per_trajectory each
    geldata::AnnotationFile file;
    const int n_paths =
        (params.n_episodes + params.instructions_per_trajectory - 1) /
        params.instructions_per_trajectory;
    int ep_counter = 0;
    for (int pi = 0; pi < n_paths && ep_counter < params.n_episodes; ++pi) {
        // sample a self-avoiding walk of path_len edges
        std::vector<int> path;
        const int want = rng.uniform_int(params.path_len_min, params.path_len_max);
        for (int tries = 0; tries < 400 && path.empty(); ++tries) {
            std::vector<int> walk{static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(n)))};
            std::set<int> seen{walk[0]};
            while (static_cast<int>(walk.size()) <= want) {
                std::vector<int> options;
                for (int nb : g.adj[static_cast<std::size_t>(walk.back())])
                    if (!seen.count(nb)) options.push_back(nb);
                if (options.empty()) break;
                const int nb = options[rng.uniform_index(options.size())];
                walk.push_back(nb);
                seen.insert(nb);
            }
            if (static_cast<int>(walk.size()) == want + 1) path = walk;
        }
        if (path.empty())
            throw ParamError("generate_world: could not sample a path of length " +
                             std::to_string(want));

        for (int ii = 0; ii < params.instructions_per_trajectory &&
                         ep_counter < params.n_episodes;
             ++ii) {
            const int k = static_cast<int>(path.size()) - 1;
            // primary landmark per step, optional second pick as extras
            std::vector<int> step_landmark(static_cast<std::size_t>(k), -1);
            std::vector<int> extra_pool;
            for (int s = 0; s < k; ++s) {
                const int e = edge_index.at({path[static_cast<std::size_t>(s)],
                                             path[static_cast<std::size_t>(s + 1)]});
                auto it = edge_landmarks.find(e);
                if (it == edge_landmarks.end() || it->second.empty()) continue;
                const auto& pool = it->second;
                const int pick = pool[rng.uniform_index(pool.size())];
                step_landmark[static_cast<std::size_t>(s)] = pick;
                for (int other : pool)
                    if (other != pick) extra_pool.push_back(other);
            }
            int available = 0;
            for (int s : step_landmark) available += (s >= 0) ? 1 : 0;
            const int m_goal = rng.uniform_int(params.entities_min, params.entities_max);
            int m = std::min(m_goal, available + static_cast<int>(extra_pool.size()));

            // drop step entities if the draw came in under the step count
            std::vector<bool> keep_step(static_cast<std::size_t>(k), true);
            if (m < available) {
                std::vector<int> with;
                for (int s = 0; s < k; ++s)
                    if (step_landmark[static_cast<std::size_t>(s)] >= 0) with.push_back(s);
                rng.shuffle(with);
                for (int di = 0; di < available - m; ++di)
                    keep_step[static_cast<std::size_t>(with[static_cast<std::size_t>(di)])] = false;
            }

            geldata::Episode ep;
            {
                char buf[16];
                std::snprintf(buf, sizeof buf, "ep%04d", ep_counter++);
                ep.id = buf;
            }
            ep.scan = g.scan;
            for (int v : path) ep.path.push_back(g.vp_ids[static_cast<std::size_t>(v)]);

            auto& toks = ep.instruction.tokens;
            toks.push_back(kClsId);
            std::vector<int> used_landmarks;
            const int max_tokens = 25;
            for (int s = 0; s < k; ++s) {
                const int sub_start = static_cast<int>(toks.size());
                toks.push_back(s == 0 ? vocab::kGo : vocab::kThen);
                auto [heading, elev] = g.direction_angles(path[static_cast<std::size_t>(s)],
                                                          path[static_cast<std::size_t>(s + 1)]);
                toks.push_back(vocab::direction_word(heading_col_of_x(heading / kTwoPi)));
                const int lmi = step_landmark[static_cast<std::size_t>(s)];
                if (lmi >= 0 && keep_step[static_cast<std::size_t>(s)]) {
                    const Landmark& lm = g.landmarks[static_cast<std::size_t>(lmi)];
                    geldata::Entity ent;
                    ent.label = lm.label;
                    ent.span = {static_cast<int>(toks.size()),
                                static_cast<int>(toks.size() + lm.phrase.size())};
                    ent.category = lm.category;
                    ent.text = lm.phrase;
                    toks.insert(toks.end(), lm.phrase.begin(), lm.phrase.end());
                    ep.entities.push_back(std::move(ent));
                    used_landmarks.push_back(lmi);
                }
                ep.instruction.sub_instruction_spans.push_back(
                    {sub_start, static_cast<int>(toks.size())});
            }
            // extras: second landmarks of traversed edges
            rng.shuffle(extra_pool);
            int still = m - static_cast<int>(used_landmarks.size());
            for (int lmi : extra_pool) {
                if (still <= 0) break;
                const Landmark& lm = g.landmarks[static_cast<std::size_t>(lmi)];
                if (static_cast<int>(toks.size() + 1 + lm.phrase.size()) + 1 > max_tokens) break;
                if (std::find(used_landmarks.begin(), used_landmarks.end(), lmi) !=
                    used_landmarks.end())
                    continue;
                toks.push_back(vocab::kThen);
                geldata::Entity ent;
                ent.label = lm.label;
                ent.span = {static_cast<int>(toks.size()),
                            static_cast<int>(toks.size() + lm.phrase.size())};
                ent.category = lm.category;
                ent.text = lm.phrase;
                toks.insert(toks.end(), lm.phrase.begin(), lm.phrase.end());
                ep.entities.push_back(std::move(ent));
                used_landmarks.push_back(lmi);
                --still;
            }
            if (static_cast<int>(toks.size()) < max_tokens) toks.push_back(vocab::kStop);
            ep.instruction.sub_instruction_spans.back().end = static_cast<int>(toks.size());

            // boxes: both placements of every referenced landmark lie on the
            // traversed edge, hence on the path
            for (int lmi : used_landmarks) {
                const Landmark& lm = g.landmarks[static_cast<std::size_t>(lmi)];
                for (const Placement& pl : lm.placements)
                    ep.landmarks.push_back({lm.label,
                                            g.vp_ids[static_cast<std::size_t>(pl.viewpoint)],
                                            pl.box, lm.category});
            }
            file.episodes.push_back(std::move(ep));
        }
    }
    return {std::move(g), std::move(file)};
}

// ---------------------------------------------------------------------------
// world.json
// ---------------------------------------------------------------------------

inline constexpr const char* kWorldVersion = "gela-world-1";

inline void save_world(const WorldGraph& g, const std::string& path) {
    nlohmann::ordered_json root;
    root["version"] = kWorldVersion;
    root["scan"] = g.scan;
    auto& jp = root["params"];
    jp["n_viewpoints"] = g.params.n_viewpoints;
    jp["n_landmarks"] = g.params.n_landmarks;
    jp["path_len_min"] = g.params.path_len_min;
    jp["path_len_max"] = g.params.path_len_max;
    jp["entities_min"] = g.params.entities_min;
    jp["entities_max"] = g.params.entities_max;
    jp["n_episodes"] = g.params.n_episodes;
    jp["instructions_per_trajectory"] = g.params.instructions_per_trajectory;
    jp["noise_sigma"] = g.params.noise_sigma;
    jp["view_feature_dim"] = g.params.view_feature_dim;
    jp["extent"] = g.params.extent;
    jp["seed"] = g.params.seed;
    auto& vps = root["viewpoints"] = nlohmann::ordered_json::array();
    for (int i = 0; i < g.size(); ++i) {
        nlohmann::ordered_json v;
        v["id"] = g.vp_ids[static_cast<std::size_t>(i)];
        v["pos"] = g.positions[static_cast<std::size_t>(i)];
        vps.push_back(std::move(v));
    }
    auto& jedges = root["edges"] = nlohmann::ordered_json::array();
    for (int i = 0; i < g.size(); ++i)
        for (int j : g.adj[static_cast<std::size_t>(i)])
            if (i < j) jedges.push_back({i, j});
    auto& jlms = root["landmarks"] = nlohmann::ordered_json::array();
    for (const Landmark& lm : g.landmarks) {
        nlohmann::ordered_json j;
        j["label"] = lm.label;
        j["class_id"] = lm.class_id;
        j["category"] = lm.category;
        j["signature"] = lm.signature;
        j["anchor"] = lm.anchor;
        j["edge"] = {lm.edge_a, lm.edge_b};
        j["phrase"] = lm.phrase;
        auto& jpl = j["placements"] = nlohmann::ordered_json::array();
        for (const Placement& pl : lm.placements) {
            nlohmann::ordered_json p;
            p["viewpoint"] = g.vp_ids[static_cast<std::size_t>(pl.viewpoint)];
            p["box"] = {pl.box.x, pl.box.y, pl.box.w, pl.box.h};
            jpl.push_back(std::move(p));
        }
        jlms.push_back(std::move(j));
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot open for writing: " + path);
    out << root.dump(2) << "\n";
}

inline WorldGraph load_world(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open world file: " + path);
    nlohmann::json root;
    try {
        root = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("malformed world JSON at byte " + std::to_string(e.byte));
    }
    if (!root.contains("version") || root["version"].get<std::string>() != kWorldVersion)
        throw VersionError("world file version mismatch");
    WorldGraph g;
    g.scan = root.at("scan").get<std::string>();
    const auto& jp = root.at("params");
    g.params.n_viewpoints = jp.at("n_viewpoints").get<int>();
    g.params.n_landmarks = jp.at("n_landmarks").get<int>();
    g.params.path_len_min = jp.at("path_len_min").get<int>();
    g.params.path_len_max = jp.at("path_len_max").get<int>();
    g.params.entities_min = jp.at("entities_min").get<int>();
    g.params.entities_max = jp.at("entities_max").get<int>();
    g.params.n_episodes = jp.at("n_episodes").get<int>();
    g.params.instructions_per_trajectory = jp.at("instructions_per_trajectory").get<int>();
    g.params.noise_sigma = jp.at("noise_sigma").get<double>();
    g.params.view_feature_dim = jp.at("view_feature_dim").get<int>();
    g.params.extent = jp.at("extent").get<double>();
    g.params.seed = jp.at("seed").get<std::uint64_t>();
    for (const auto& v : root.at("viewpoints")) {
        g.vp_ids.push_back(v.at("id").get<std::string>());
        g.positions.push_back(v.at("pos").get<std::array<double, 3>>());
    }
    g.adj.assign(g.positions.size(), {});
    for (const auto& e : root.at("edges")) {
        const int a = e[0].get<int>(), b = e[1].get<int>();
        g.adj[static_cast<std::size_t>(a)].push_back(b);
        g.adj[static_cast<std::size_t>(b)].push_back(a);
    }
    for (auto& row : g.adj) std::sort(row.begin(), row.end());
    for (const auto& j : root.at("landmarks")) {
        Landmark lm;
        lm.label = j.at("label").get<std::string>();
        lm.class_id = j.at("class_id").get<int>();
        lm.category = j.at("category").get<std::string>();
        lm.signature = j.at("signature").get<std::vector<double>>();
        lm.anchor = j.at("anchor").get<std::array<double, 3>>();
        lm.edge_a = j.at("edge")[0].get<int>();
        lm.edge_b = j.at("edge")[1].get<int>();
        lm.phrase = j.at("phrase").get<std::vector<int>>();
        for (const auto& p : j.at("placements")) {
            Placement pl;
            const auto& b = p.at("box");
            pl.box = geldata::Box{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                                  b[3].get<double>()};
            pl.viewpoint = -1;  // resolved below
            // store id temporarily via lookup after index build
            for (std::size_t i = 0; i < g.vp_ids.size(); ++i)
                if (g.vp_ids[i] == p.at("viewpoint").get<std::string>())
                    pl.viewpoint = static_cast<int>(i);
            if (pl.viewpoint < 0) throw DataError("placement references unknown viewpoint");
            lm.placements.push_back(pl);
        }
        g.landmarks.push_back(std::move(lm));
    }
    g.finalize();
    return g;
}

}  // namespace gela::world
