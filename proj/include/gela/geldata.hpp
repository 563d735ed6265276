#pragma once

// "gel-v1" annotation schema: loader/saver, the four-rule validator,
// dataset statistics, and the span/box coordinate transforms used when
// raw annotations arrive in sub-instruction or action-centered frames.
//
// Boxes in files are stored in the annotation-native corner form
// (x, y = top-left, w, h = extents), all normalized to [0,1] of the
// 2048x1024 panorama frame.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gela/common.hpp"
#include "gela/error.hpp"

namespace gela::geldata {

inline constexpr const char* kSchemaVersion = "gel-v1";

struct Span {
    int start = 0;
    int end = 0;  // exclusive
    bool operator==(const Span&) const = default;
};

// Corner-form box: (x, y) top-left, extents (w, h), normalized.
struct Box {
    double x = 0, y = 0, w = 0, h = 0;
    bool operator==(const Box&) const = default;
    double area() const { return w * h; }
};

struct Entity {
    std::string label;
    Span span;
    std::string category;  // "object" | "scene"
    std::vector<int> text;
    bool operator==(const Entity&) const = default;
};

struct LandmarkBox {
    std::string label;
    std::string viewpoint;
    Box box;
    std::string category;
    int split_group = -1;  // >= 0 links the two pieces of a wrap split
    bool operator==(const LandmarkBox&) const = default;
};

struct InstructionData {
    std::vector<int> tokens;  // classification slot at position 0
    std::vector<Span> sub_instruction_spans;
    bool operator==(const InstructionData&) const = default;
};

struct Episode {
    std::string id;
    std::string scan;
    std::vector<std::string> path;
    InstructionData instruction;
    std::vector<Entity> entities;
    std::vector<LandmarkBox> landmarks;
    bool operator==(const Episode&) const = default;
};

struct AnnotationFile {
    std::vector<Episode> episodes;
    bool operator==(const AnnotationFile&) const = default;
};

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

namespace detail {

inline void reject_unknown(const nlohmann::json& obj, std::initializer_list<const char*> allowed,
                           const std::string& where) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const char* a : allowed)
            if (it.key() == a) ok = true;
        if (!ok) throw SchemaError("unknown field '" + it.key() + "' at " + where);
    }
}

template <typename T>
T field(const nlohmann::json& obj, const char* key, const std::string& where) {
    if (!obj.contains(key)) throw SchemaError("missing field '" + std::string(key) + "' at " + where);
    try {
        return obj.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw SchemaError("field '" + std::string(key) + "' has wrong type at " + where);
    }
}

inline Span parse_span(const nlohmann::json& j, const std::string& where) {
    if (!j.is_array() || j.size() != 2 || !j[0].is_number_integer() || !j[1].is_number_integer())
        throw SchemaError("span must be [start, end] at " + where);
    Span s{j[0].get<int>(), j[1].get<int>()};
    if (s.end <= s.start)
        throw SchemaError("span end " + std::to_string(s.end) + " <= start " +
                          std::to_string(s.start) + " at " + where);
    return s;
}

inline Box parse_box(const nlohmann::json& j, const std::string& where) {
    if (!j.is_array() || j.size() != 4)
        throw SchemaError("box must be [x, y, w, h] at " + where);
    for (const auto& v : j)
        if (!v.is_number()) throw SchemaError("box entries must be numbers at " + where);
    return Box{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

}  // namespace detail

inline AnnotationFile parse(const std::string& text) {
    nlohmann::json root;
    try {
        root = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("malformed JSON at byte " + std::to_string(e.byte) + ": " + e.what());
    }
    if (!root.is_object()) throw SchemaError("top level must be an object");
    detail::reject_unknown(root, {"version", "episodes"}, "$");
    if (detail::field<std::string>(root, "version", "$") != kSchemaVersion)
        throw SchemaError("unsupported version '" + root["version"].get<std::string>() + "'");
    if (!root.contains("episodes") || !root["episodes"].is_array())
        throw SchemaError("missing episodes array");

    AnnotationFile file;
    int idx = 0;
    for (const auto& je : root["episodes"]) {
        const std::string where = "$.episodes[" + std::to_string(idx++) + "]";
        detail::reject_unknown(je, {"id", "scan", "path", "instruction", "entities", "landmarks"},
                               where);
        Episode ep;
        ep.id = detail::field<std::string>(je, "id", where);
        ep.scan = detail::field<std::string>(je, "scan", where);
        ep.path = detail::field<std::vector<std::string>>(je, "path", where);
        const auto& ji = je.contains("instruction") && je["instruction"].is_object()
                             ? je["instruction"]
                             : throw SchemaError("missing instruction at " + where);
        detail::reject_unknown(ji, {"tokens", "sub_instruction_spans"}, where + ".instruction");
        ep.instruction.tokens = detail::field<std::vector<int>>(ji, "tokens", where);
        if (ji.contains("sub_instruction_spans"))
            for (const auto& js : ji["sub_instruction_spans"])
                ep.instruction.sub_instruction_spans.push_back(
                    detail::parse_span(js, where + ".instruction"));
        if (je.contains("entities"))
            for (const auto& jent : je["entities"]) {
                detail::reject_unknown(jent, {"label", "span", "category", "text"},
                                       where + ".entities");
                Entity e;
                e.label = detail::field<std::string>(jent, "label", where);
                e.span = detail::parse_span(jent.at("span"), where + ".entities");
                e.category = detail::field<std::string>(jent, "category", where);
                e.text = detail::field<std::vector<int>>(jent, "text", where);
                ep.entities.push_back(std::move(e));
            }
        if (je.contains("landmarks"))
            for (const auto& jl : je["landmarks"]) {
                detail::reject_unknown(jl, {"label", "viewpoint", "box", "category", "split_group"},
                                       where + ".landmarks");
                LandmarkBox l;
                l.label = detail::field<std::string>(jl, "label", where);
                l.viewpoint = detail::field<std::string>(jl, "viewpoint", where);
                l.box = detail::parse_box(jl.at("box"), where + ".landmarks");
                l.category = detail::field<std::string>(jl, "category", where);
                if (jl.contains("split_group")) l.split_group = jl["split_group"].get<int>();
                ep.landmarks.push_back(std::move(l));
            }
        file.episodes.push_back(std::move(ep));
    }
    return file;
}

inline std::string serialize(const AnnotationFile& file) {
    nlohmann::ordered_json root;
    root["version"] = kSchemaVersion;
    auto& eps = root["episodes"] = nlohmann::ordered_json::array();
    for (const Episode& ep : file.episodes) {
        nlohmann::ordered_json je;
        je["id"] = ep.id;
        je["scan"] = ep.scan;
        je["path"] = ep.path;
        je["instruction"]["tokens"] = ep.instruction.tokens;
        auto& subs = je["instruction"]["sub_instruction_spans"] = nlohmann::ordered_json::array();
        for (const Span& s : ep.instruction.sub_instruction_spans)
            subs.push_back({s.start, s.end});
        auto& ents = je["entities"] = nlohmann::ordered_json::array();
        for (const Entity& e : ep.entities) {
            nlohmann::ordered_json j;
            j["label"] = e.label;
            j["span"] = {e.span.start, e.span.end};
            j["category"] = e.category;
            j["text"] = e.text;
            ents.push_back(std::move(j));
        }
        auto& lms = je["landmarks"] = nlohmann::ordered_json::array();
        for (const LandmarkBox& l : ep.landmarks) {
            nlohmann::ordered_json j;
            j["label"] = l.label;
            j["viewpoint"] = l.viewpoint;
            j["box"] = {l.box.x, l.box.y, l.box.w, l.box.h};
            j["category"] = l.category;
            if (l.split_group >= 0) j["split_group"] = l.split_group;
            lms.push_back(std::move(j));
        }
        eps.push_back(std::move(je));
    }
    return root.dump(2) + "\n";
}

inline AnnotationFile load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open annotation file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

inline void save(const AnnotationFile& file, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot open for writing: " + path);
    out << serialize(file);
}

// ---------------------------------------------------------------------------
// validation
// ---------------------------------------------------------------------------

enum class Rule { Alignment, FreeText, TextCoreference, UniqueLandmark, Structural };

inline const char* rule_name(Rule r) {
    switch (r) {
        case Rule::Alignment: return "Alignment";
        case Rule::FreeText: return "FreeText";
        case Rule::TextCoreference: return "TextCoreference";
        case Rule::UniqueLandmark: return "UniqueLandmark";
        case Rule::Structural: return "Structural";
    }
    return "?";
}

struct RuleViolation {
    Rule rule = Rule::Structural;
    std::string episode_id;
    std::string detail;
    bool warning = false;  // FreeText is advisory only

    std::string str() const {
        return std::string(warning ? "warning " : "violation ") + rule_name(rule) + " [" +
               episode_id + "] " + detail;
    }
};

struct ValidateOptions {
    // Token ids considered bare class words for the FreeText heuristic; a
    // single-token entity drawing from this set (or any single-token entity
    // when the set is empty) is flagged as a warning.
    std::set<int> generic_class_tokens;
    // Known viewpoint ids per scan; when present, path viewpoints must exist.
    std::map<std::string, std::set<std::string>> scan_viewpoints;
};

inline std::vector<RuleViolation> validate(const AnnotationFile& file,
                                           const ValidateOptions& opt = {}) {
    std::vector<RuleViolation> out;
    auto add = [&](Rule r, const std::string& ep, std::string detail, bool warning = false) {
        out.push_back({r, ep, std::move(detail), warning});
    };

    std::set<std::string> seen_ids;
    for (const Episode& ep : file.episodes) {
        if (!seen_ids.insert(ep.id).second)
            add(Rule::Structural, ep.id, "duplicate episode id");
        const int n_tok = static_cast<int>(ep.instruction.tokens.size());
        if (n_tok == 0 || ep.instruction.tokens[0] != kClsId)
            add(Rule::Structural, ep.id, "instruction must start with the classification slot");
        if (ep.path.empty()) add(Rule::Structural, ep.id, "empty path");
        if (opt.scan_viewpoints.count(ep.scan)) {
            const auto& known = opt.scan_viewpoints.at(ep.scan);
            for (const std::string& vp : ep.path)
                if (!known.count(vp))
                    add(Rule::Structural, ep.id, "path viewpoint '" + vp + "' not in scan");
        }
        for (const Span& s : ep.instruction.sub_instruction_spans)
            if (s.start < 1 || s.end > n_tok)
                add(Rule::Structural, ep.id,
                    "sub-instruction span [" + std::to_string(s.start) + "," +
                        std::to_string(s.end) + ") out of range");

        const std::set<std::string> path_set(ep.path.begin(), ep.path.end());

        // entity structural checks
        std::vector<const Entity*> valid_entities;
        for (const Entity& e : ep.entities) {
            std::string who = "entity '" + e.label + "'";
            if (e.category != "object" && e.category != "scene") {
                add(Rule::Structural, ep.id, who + " has category '" + e.category + "'");
                continue;
            }
            if (e.span.start < 1 || e.span.end <= e.span.start || e.span.end > n_tok) {
                add(Rule::Structural, ep.id,
                    who + " span [" + std::to_string(e.span.start) + "," +
                        std::to_string(e.span.end) + ") out of range");
                continue;  // dependent checks skipped for invalid spans
            }
            if (static_cast<int>(e.text.size()) != e.span.end - e.span.start ||
                !std::equal(e.text.begin(), e.text.end(),
                            ep.instruction.tokens.begin() + e.span.start)) {
                add(Rule::Structural, ep.id, who + " text does not match instruction tokens");
                continue;
            }
            valid_entities.push_back(&e);
        }
        // span overlap among valid entities
        {
            std::vector<const Entity*> sorted = valid_entities;
            std::sort(sorted.begin(), sorted.end(), [](const Entity* a, const Entity* b) {
                return a->span.start < b->span.start;
            });
            for (std::size_t i = 1; i < sorted.size(); ++i)
                if (sorted[i]->span.start < sorted[i - 1]->span.end)
                    add(Rule::Structural, ep.id,
                        "entity '" + sorted[i]->label + "' span overlaps '" +
                            sorted[i - 1]->label + "'");
        }

        // landmark structural checks
        for (const LandmarkBox& l : ep.landmarks) {
            std::string who = "landmark '" + l.label + "' at '" + l.viewpoint + "'";
            if (l.category != "object" && l.category != "scene") {
                add(Rule::Structural, ep.id, who + " has category '" + l.category + "'");
                continue;
            }
            const Box& b = l.box;
            if (!(b.x >= 0 && b.y >= 0 && b.w > 0 && b.h > 0 && b.x + b.w <= 1.0 + 1e-12 &&
                  b.y + b.h <= 1.0 + 1e-12)) {
                add(Rule::Structural, ep.id, who + " box outside [0,1]");
                continue;
            }
            if (!path_set.count(l.viewpoint))
                add(Rule::Structural, ep.id, who + ": viewpoint not on path");
        }

        // Alignment: labels must link both ways. Label linkage is checked on
        // the raw entries so a structurally broken span or box does not also
        // cascade into an Alignment report.
        std::set<std::string> entity_labels, landmark_labels;
        for (const Entity& e : ep.entities) entity_labels.insert(e.label);
        for (const LandmarkBox& l : ep.landmarks) landmark_labels.insert(l.label);
        for (const std::string& lab : entity_labels)
            if (!landmark_labels.count(lab))
                add(Rule::Alignment, ep.id, "entity '" + lab + "' has no landmark box");
        for (const std::string& lab : landmark_labels)
            if (!entity_labels.count(lab))
                add(Rule::Alignment, ep.id, "landmark '" + lab + "' has no entity phrase");

        // UniqueLandmark: at most one box per (label, viewpoint); a wrap
        // split pair sharing a split_group is exempt.
        std::map<std::pair<std::string, std::string>, std::vector<const LandmarkBox*>> groups;
        for (const LandmarkBox& l : ep.landmarks) groups[{l.label, l.viewpoint}].push_back(&l);
        for (const auto& [key, boxes] : groups) {
            if (boxes.size() <= 1) continue;
            const bool split_pair = boxes.size() == 2 && boxes[0]->split_group >= 0 &&
                                    boxes[0]->split_group == boxes[1]->split_group;
            if (!split_pair)
                add(Rule::UniqueLandmark, ep.id,
                    "label '" + key.first + "' has " + std::to_string(boxes.size()) +
                        " boxes at viewpoint '" + key.second + "'");
        }

        // TextCoreference (machine-checkable direction): identical entity
        // text within one instruction must share one label.
        std::map<std::vector<int>, std::set<std::string>> text_labels;
        for (const Entity* e : valid_entities) text_labels[e->text].insert(e->label);
        for (const auto& [text, labels] : text_labels)
            if (labels.size() > 1) {
                std::string ls;
                for (const std::string& l : labels) ls += (ls.empty() ? "" : ", ") + l;
                add(Rule::TextCoreference, ep.id,
                    "identical text carries labels {" + ls + "}");
            }

        // FreeText heuristic: bare single-token class mention
        for (const Entity* e : valid_entities) {
            if (e->span.end - e->span.start != 1) continue;
            if (!opt.generic_class_tokens.empty() &&
                !opt.generic_class_tokens.count(e->text[0]))
                continue;
            add(Rule::FreeText, ep.id,
                "entity '" + e->label + "' is a bare single-token class mention", /*warning=*/true);
        }
    }

    std::sort(out.begin(), out.end(), [](const RuleViolation& a, const RuleViolation& b) {
        return std::tie(a.episode_id, a.rule, a.detail) < std::tie(b.episode_id, b.rule, b.detail);
    });
    return out;
}

inline bool has_hard_violation(const std::vector<RuleViolation>& vs) {
    for (const auto& v : vs)
        if (!v.warning) return true;
    return false;
}

// ---------------------------------------------------------------------------
// statistics
// ---------------------------------------------------------------------------

struct Ratio {
    long long num = 0, den = 0;
    double value() const { return den == 0 ? 0.0 : static_cast<double>(num) / den; }
};

// Exact half-up rounding of num/den to 2 decimals, via integer arithmetic.
inline std::string format_ratio_2dp(const Ratio& r) {
    if (r.den == 0) return "-";
    const long long scaled = (200 * r.num + r.den) / (2 * r.den);
    std::ostringstream os;
    os << scaled / 100 << "." << (scaled % 100 < 10 ? "0" : "") << scaled % 100;
    return os.str();
}

struct DatasetStats {
    long long trajectories = 0;
    long long instructions = 0;
    long long phrases = 0;
    long long boxes = 0;
    long long phrases_object = 0, boxes_object = 0;
    long long phrases_scene = 0, boxes_scene = 0;

    Ratio p_per_i() const { return {phrases, instructions}; }
    Ratio b_per_i() const { return {boxes, instructions}; }
    Ratio p_per_b() const { return {boxes, phrases}; }  // boxes per phrase
    Ratio p_per_b_object() const { return {boxes_object, phrases_object}; }
    Ratio p_per_b_scene() const { return {boxes_scene, phrases_scene}; }
};

inline DatasetStats stats(const AnnotationFile& file) {
    DatasetStats s;
    std::set<std::pair<std::string, std::vector<std::string>>> trajs;
    for (const Episode& ep : file.episodes) {
        trajs.insert({ep.scan, ep.path});
        s.instructions += 1;
        s.phrases += static_cast<long long>(ep.entities.size());
        s.boxes += static_cast<long long>(ep.landmarks.size());
        for (const Entity& e : ep.entities)
            (e.category == "object" ? s.phrases_object : s.phrases_scene) += 1;
        for (const LandmarkBox& l : ep.landmarks)
            (l.category == "object" ? s.boxes_object : s.boxes_scene) += 1;
    }
    s.trajectories = static_cast<long long>(trajs.size());
    return s;
}

inline std::string format_stats_table(const DatasetStats& s, const std::string& split) {
    std::ostringstream os;
    auto row = [&](const std::string& k, const std::string& v) {
        os << "  " << k;
        for (std::size_t i = k.size(); i < 22; ++i) os << ' ';
        os << v << "\n";
    };
    os << "split: " << (split.empty() ? "all" : split) << "\n";
    row("trajectories", std::to_string(s.trajectories));
    row("instructions", std::to_string(s.instructions));
    row("phrases", std::to_string(s.phrases));
    row("boxes", std::to_string(s.boxes));
    row("P/I", format_ratio_2dp(s.p_per_i()));
    row("B/I", format_ratio_2dp(s.b_per_i()));
    row("P/B", format_ratio_2dp(s.p_per_b()));
    row("phrases (object)", std::to_string(s.phrases_object));
    row("boxes (object)", std::to_string(s.boxes_object));
    row("P/B (object)", format_ratio_2dp(s.p_per_b_object()));
    row("phrases (scene)", std::to_string(s.phrases_scene));
    row("boxes (scene)", std::to_string(s.boxes_scene));
    row("P/B (scene)", format_ratio_2dp(s.p_per_b_scene()));
    return os.str();
}

inline std::string format_stats_csv(const DatasetStats& s, const std::string& split) {
    std::ostringstream os;
    os << "split,trajectories,instructions,phrases,boxes,p_per_i,b_per_i,p_per_b,"
          "phrases_object,boxes_object,p_per_b_object,phrases_scene,boxes_scene,p_per_b_scene\n";
    os << (split.empty() ? "all" : split) << "," << s.trajectories << "," << s.instructions << ","
       << s.phrases << "," << s.boxes << "," << format_ratio_2dp(s.p_per_i()) << ","
       << format_ratio_2dp(s.b_per_i()) << "," << format_ratio_2dp(s.p_per_b()) << ","
       << s.phrases_object << "," << s.boxes_object << "," << format_ratio_2dp(s.p_per_b_object())
       << "," << s.phrases_scene << "," << s.boxes_scene << ","
       << format_ratio_2dp(s.p_per_b_scene()) << "\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// coordinate transforms
// ---------------------------------------------------------------------------

// Shift a sub-instruction-local span into global instruction coordinates.
// A span already lying inside the sub-instruction's global range is returned
// unchanged, which makes the transform idempotent.
inline Span globalize_span(const Span& span, const Span& sub) {
    if (span.start >= sub.start && span.end <= sub.end) return span;
    Span g{span.start + sub.start, span.end + sub.start};
    if (g.end > sub.end)
        throw DataError("span [" + std::to_string(span.start) + "," + std::to_string(span.end) +
                        ") crosses the boundary of sub-instruction [" + std::to_string(sub.start) +
                        "," + std::to_string(sub.end) + ")");
    return g;
}

inline std::vector<Span> globalize_spans(const std::vector<std::pair<int, Span>>& local,
                                         const std::vector<Span>& sub_spans) {
    std::vector<Span> out;
    out.reserve(local.size());
    for (const auto& [sub_idx, span] : local) {
        if (sub_idx < 0 || sub_idx >= static_cast<int>(sub_spans.size()))
            throw DataError("sub-instruction index " + std::to_string(sub_idx) + " out of range");
        out.push_back(globalize_span(span, sub_spans[static_cast<std::size_t>(sub_idx)]));
    }
    return out;
}

// Default fraction of a box's area a view cell must contain to count as
// covered by the box.
inline constexpr double kDefaultCellCoverage = 0.25;

// View cells covered by a box under the area-fraction criterion, with a
// fallback to the cell containing the box center when nothing clears the
// threshold.
inline std::vector<int> covered_cells(const Box& box, double coverage = kDefaultCellCoverage) {
    std::vector<int> cells;
    const double area = box.area();
    for (int v = 0; v < kNumViews; ++v) {
        const int c = heading_col_of(v), r = elevation_row_of(v);
        const double ix =
            std::max(0.0, std::min(box.x + box.w, cell_x_max(c)) - std::max(box.x, cell_x_min(c)));
        const double iy =
            std::max(0.0, std::min(box.y + box.h, cell_y_max(r)) - std::max(box.y, cell_y_min(r)));
        if (area > 0 && (ix * iy) / area >= coverage) cells.push_back(v);
    }
    if (cells.empty()) {
        const double cx = box.x + box.w / 2, cy = box.y + box.h / 2;
        cells.push_back(view_index(heading_col_of_x(cx), elevation_row_of_y(cy)));
    }
    return cells;
}

// Rotate a box from the action-centered annotation frame into the 0-degree
// start frame: x shifts by center_heading / 2pi modulo 1; y, w, h unchanged.
// A box crossing the seam is split into two pieces that conserve total area.
inline std::vector<Box> normalize_box_heading(const Box& box, double center_heading) {
    const double shift = center_heading / kTwoPi;
    double x0 = box.x + shift;
    x0 -= std::floor(x0);  // left edge mod 1
    const double x1 = x0 + box.w;
    if (x1 <= 1.0) return {Box{x0, box.y, box.w, box.h}};
    const double w_left = 1.0 - x0;
    const double w_right = box.w - w_left;
    return {Box{x0, box.y, w_left, box.h}, Box{0.0, box.y, w_right, box.h}};
}

}  // namespace gela::geldata
