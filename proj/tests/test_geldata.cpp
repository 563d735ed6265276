#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "gela/geldata.hpp"
#include "gela/rng.hpp"

using namespace gela;
using namespace gela::geldata;

namespace {

// Minimal well-formed episode: tokens [cls, 3, 20, 21, 22, 9, 30, 31, 32],
// two entities with 3-token phrases, each grounded at two path viewpoints.
Episode make_episode(const std::string& id) {
    Episode ep;
    ep.id = id;
    ep.scan = "scan0";
    ep.path = {"vp0", "vp1", "vp2"};
    ep.instruction.tokens = {kClsId, 3, 20, 21, 22, 9, 30, 31, 32};
    ep.instruction.sub_instruction_spans = {{1, 5}, {5, 9}};
    ep.entities.push_back({"lm-a", {2, 5}, "object", {20, 21, 22}});
    ep.entities.push_back({"lm-b", {6, 9}, "scene", {30, 31, 32}});
    ep.landmarks.push_back({"lm-a", "vp0", {0.10, 0.40, 0.08, 0.20}, "object"});
    ep.landmarks.push_back({"lm-a", "vp1", {0.30, 0.40, 0.08, 0.20}, "object"});
    ep.landmarks.push_back({"lm-b", "vp1", {0.50, 0.35, 0.20, 0.40}, "scene"});
    ep.landmarks.push_back({"lm-b", "vp2", {0.55, 0.35, 0.20, 0.40}, "scene"});
    return ep;
}

AnnotationFile make_file(int n = 2) {
    AnnotationFile f;
    for (int i = 0; i < n; ++i) f.episodes.push_back(make_episode("ep" + std::to_string(i)));
    return f;
}

}  // namespace

TEST_CASE("load/save round trip is identity") {
    AnnotationFile f = make_file();
    const std::string text = serialize(f);
    AnnotationFile g = parse(text);
    CHECK(f == g);
    CHECK(serialize(g) == text);
}

TEST_CASE("empty episode list is a valid file with zero stats") {
    AnnotationFile f = parse("{\"version\":\"gel-v1\",\"episodes\":[]}");
    CHECK(f.episodes.empty());
    DatasetStats s = stats(f);
    CHECK(s.instructions == 0);
    CHECK(s.phrases == 0);
    CHECK(validate(f).empty());
}

TEST_CASE("loader rejections") {
    SECTION("malformed JSON reports byte offset") {
        try {
            parse("{\"version\": \"gel-v1\", ");
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(std::string(e.what()).find("byte") != std::string::npos);
        }
    }
    SECTION("span end <= start is a SchemaError") {
        AnnotationFile f = make_file(1);
        f.episodes[0].entities[0].span = {5, 2};
        CHECK_THROWS_AS(parse(serialize(f)), SchemaError);
    }
    SECTION("unknown fields are rejected with a JSON path") {
        std::string text =
            "{\"version\":\"gel-v1\",\"episodes\":[{\"id\":\"e\",\"scan\":\"s\",\"path\":[\"v\"],"
            "\"instruction\":{\"tokens\":[0]},\"entities\":[],\"landmarks\":[],\"extra\":1}]}";
        try {
            parse(text);
            FAIL("expected SchemaError");
        } catch (const SchemaError& e) {
            CHECK(std::string(e.what()).find("extra") != std::string::npos);
            CHECK(std::string(e.what()).find("episodes[0]") != std::string::npos);
        }
    }
    SECTION("wrong version rejected") {
        CHECK_THROWS_AS(parse("{\"version\":\"gel-v0\",\"episodes\":[]}"), SchemaError);
    }
}

TEST_CASE("validator") {
    SECTION("clean corpus produces no violations") {
        CHECK(validate(make_file()).empty());
    }
    SECTION("two boxes for one label at one viewpoint violate UniqueLandmark") {
        AnnotationFile f = make_file(1);
        f.episodes[0].landmarks.push_back(f.episodes[0].landmarks[0]);
        auto vs = validate(f);
        REQUIRE(vs.size() == 1);
        CHECK(vs[0].rule == Rule::UniqueLandmark);
        CHECK(vs[0].detail.find("lm-a") != std::string::npos);
        CHECK(vs[0].detail.find("vp0") != std::string::npos);
    }
    SECTION("a split pair sharing split_group is exempt from UniqueLandmark") {
        AnnotationFile f = make_file(1);
        LandmarkBox piece1{"lm-a", "vp0", {0.90, 0.40, 0.10, 0.20}, "object", 7};
        LandmarkBox piece2{"lm-a", "vp0", {0.00, 0.40, 0.05, 0.20}, "object", 7};
        f.episodes[0].landmarks[0] = piece1;
        f.episodes[0].landmarks.push_back(piece2);
        CHECK(validate(f).empty());
    }
    SECTION("entity without boxes violates Alignment") {
        AnnotationFile f = make_file(1);
        auto& lms = f.episodes[0].landmarks;
        lms.erase(std::remove_if(lms.begin(), lms.end(),
                                 [](const LandmarkBox& l) { return l.label == "lm-b"; }),
                  lms.end());
        auto vs = validate(f);
        REQUIRE(vs.size() == 1);
        CHECK(vs[0].rule == Rule::Alignment);
        CHECK(vs[0].detail.find("lm-b") != std::string::npos);
    }
    SECTION("identical text with two labels violates TextCoreference") {
        AnnotationFile f = make_file(1);
        Episode& ep = f.episodes[0];
        ep.entities[1].text = ep.entities[0].text;
        for (int k = 0; k < 3; ++k)
            ep.instruction.tokens[static_cast<std::size_t>(ep.entities[1].span.start + k)] =
                ep.entities[0].text[static_cast<std::size_t>(k)];
        auto vs = validate(f);
        REQUIRE(vs.size() == 1);
        CHECK(vs[0].rule == Rule::TextCoreference);
    }
    SECTION("out-of-range span is Structural") {
        AnnotationFile f = make_file(1);
        f.episodes[0].entities[0].span = {2, 50};
        auto vs = validate(f);
        REQUIRE(vs.size() == 1);
        CHECK(vs[0].rule == Rule::Structural);
        CHECK(vs[0].detail.find("[2,50)") != std::string::npos);
    }
    SECTION("box outside [0,1] is Structural") {
        AnnotationFile f = make_file(1);
        f.episodes[0].landmarks[0].box = {0.95, 0.4, 0.2, 0.2};
        auto vs = validate(f);
        REQUIRE(vs.size() == 1);
        CHECK(vs[0].rule == Rule::Structural);
    }
    SECTION("landmark viewpoint off the path is Structural") {
        AnnotationFile f = make_file(1);
        f.episodes[0].landmarks[0].viewpoint = "vp9";
        auto vs = validate(f);
        REQUIRE(vs.size() == 1);
        CHECK(vs[0].rule == Rule::Structural);
        CHECK(vs[0].detail.find("vp9") != std::string::npos);
    }
    SECTION("single-token entity is only a FreeText warning") {
        AnnotationFile f = make_file(1);
        Episode& ep = f.episodes[0];
        ep.entities[0].span = {2, 3};
        ep.entities[0].text = {20};
        auto vs = validate(f);
        REQUIRE(vs.size() == 1);
        CHECK(vs[0].rule == Rule::FreeText);
        CHECK(vs[0].warning);
        CHECK(!has_hard_violation(vs));
    }
}

TEST_CASE("stats") {
    SECTION("counts and exact quotients") {
        // 2 instructions sharing one trajectory, 4 phrases, 8 boxes
        AnnotationFile f = make_file(2);
        DatasetStats s = stats(f);
        CHECK(s.trajectories == 1);
        CHECK(s.instructions == 2);
        CHECK(s.phrases == 4);
        CHECK(s.boxes == 8);
        CHECK(format_ratio_2dp(s.p_per_i()) == "2.00");
        CHECK(format_ratio_2dp(s.b_per_i()) == "4.00");
        CHECK(format_ratio_2dp(s.p_per_b()) == "2.00");
    }
    SECTION("P/I 4.0 and B/I 8.5 example") {
        DatasetStats s;
        s.instructions = 2;
        s.phrases = 8;
        s.boxes = 17;
        CHECK(format_ratio_2dp(s.p_per_i()) == "4.00");
        CHECK(format_ratio_2dp(s.b_per_i()) == "8.50");
    }
    SECTION("printed quotients match exact rationals rounded half-up") {
        CHECK(format_ratio_2dp({1, 3}) == "0.33");
        CHECK(format_ratio_2dp({2, 3}) == "0.67");
        CHECK(format_ratio_2dp({1, 8}) == "0.13");
        CHECK(format_ratio_2dp({57788, 14039}) == "4.12");
        CHECK(format_ratio_2dp({121146, 14039}) == "8.63");
    }
    SECTION("object P/B is 2.0 when each object label has two boxes") {
        AnnotationFile f = make_file(3);
        DatasetStats s = stats(f);
        CHECK(format_ratio_2dp(s.p_per_b_object()) == "2.00");
    }
}

TEST_CASE("globalize_spans") {
    SECTION("offset addition") {
        Span sub{7, 15};
        CHECK(globalize_span({2, 4}, sub) == Span{9, 11});
    }
    SECTION("first sub-instruction is identity") {
        Span sub{0, 9};
        CHECK(globalize_span({2, 4}, sub) == Span{2, 4});
    }
    SECTION("idempotent on already-global spans") {
        Span sub{7, 15};
        Span g = globalize_span({2, 4}, sub);
        CHECK(globalize_span(g, sub) == g);
    }
    SECTION("boundary crossing raises DataError") {
        CHECK_THROWS_AS(globalize_span({3, 10}, Span{7, 15}), DataError);
    }
    SECTION("concatenated spans preserve order") {
        std::vector<Span> subs{{1, 5}, {5, 9}, {9, 14}};
        std::vector<std::pair<int, Span>> local{{0, {1, 3}}, {1, {0, 2}}, {2, {2, 4}}};
        auto out = globalize_spans(local, subs);
        REQUIRE(out.size() == 3);
        for (std::size_t i = 1; i < out.size(); ++i) CHECK(out[i - 1].start < out[i].start);
    }
}

TEST_CASE("normalize_box_heading") {
    SECTION("zero heading is identity") {
        Box b{0.2, 0.3, 0.1, 0.2};
        auto out = normalize_box_heading(b, 0.0);
        REQUIRE(out.size() == 1);
        CHECK(out[0] == b);
    }
    SECTION("half-turn shift moves x = 0.5 to 0.0") {
        Box b{0.5, 0.3, 0.1, 0.2};
        auto out = normalize_box_heading(b, kPi);
        REQUIRE(out.size() == 1);
        CHECK(out[0].x == Catch::Approx(0.0).margin(1e-12));
    }
    SECTION("wrapping box splits into [0.95,1.0] and [0.0,0.15]") {
        Box b{0.95, 0.3, 0.2, 0.2};
        auto out = normalize_box_heading(b, 0.0);
        REQUIRE(out.size() == 2);
        CHECK(out[0].x == Catch::Approx(0.95));
        CHECK(out[0].w == Catch::Approx(0.05));
        CHECK(out[1].x == 0.0);
        CHECK(out[1].w == Catch::Approx(0.15));
    }
    SECTION("total area is conserved within 1e-12") {
        Rng rng(11);
        for (int i = 0; i < 200; ++i) {
            Box b{rng.uniform(), rng.uniform(0, 0.8), rng.uniform(0.01, 0.5),
                  rng.uniform(0.01, 0.2)};
            const double heading = rng.uniform(0, kTwoPi);
            auto out = normalize_box_heading(b, heading);
            double area = 0;
            for (const Box& p : out) area += p.area();
            CHECK(std::fabs(area - b.area()) < 1e-12);
        }
    }
}