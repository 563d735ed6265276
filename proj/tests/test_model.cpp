#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "gela/checkpoint.hpp"
#include "gela/model.hpp"

using namespace gela;
using namespace gela::model;
using diff::Tape;
using diff::Tensor;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.vocab_size = 16;
    cfg.d_model = 8;
    cfg.n_layers_text = 1;
    cfg.n_layers_cross = 1;
    cfg.n_heads = 2;
    cfg.max_instruction_len = 6;
    cfg.view_feature_dim = 4;
    cfg.ffn_hidden = 12;
    cfg.seed = 5;
    return cfg;
}

Panorama random_panorama(Rng& rng, int fdim) {
    Panorama p;
    p.views.resize(kNumViews);
    for (int i = 0; i < kNumViews; ++i) {
        View& v = p.views[static_cast<std::size_t>(i)];
        v.feature.resize(static_cast<std::size_t>(fdim));
        for (double& x : v.feature) x = rng.uniform(-1, 1);
        v.heading = view_heading(i);
        v.elevation = view_elevation(i);
    }
    return p;
}

std::vector<double> tensor_copy(const Tensor& t) {
    return {t.values().begin(), t.values().end()};
}

}  // namespace

TEST_CASE("instruction encoding is deterministic and position sensitive") {
    Model m(tiny_config());
    Instruction a = Instruction::of({kClsId, 5, 7, 9});
    Tape t1, t2;
    auto za = tensor_copy(m.encode_instruction(t1, a));
    auto zb = tensor_copy(m.encode_instruction(t2, a));
    CHECK(za == zb);

    Instruction swapped = Instruction::of({kClsId, 7, 5, 9});
    Tape t3;
    auto zc = tensor_copy(m.encode_instruction(t3, swapped));
    CHECK(za != zc);
}

TEST_CASE("empty instruction yields a single row") {
    Model m(tiny_config());
    Tape tape;
    Tensor z = m.encode_instruction(tape, Instruction::of({kClsId}));
    CHECK(z.rows() == 1);
    CHECK(z.cols() == 8);
}

TEST_CASE("over-length instruction raises LengthError") {
    Model m(tiny_config());
    Tape tape;
    std::vector<int> toks(9, 3);
    toks[0] = kClsId;
    CHECK_THROWS_AS(m.encode_instruction(tape, Instruction::of(toks)), LengthError);
}

TEST_CASE("observation encoding") {
    Model m(tiny_config());
    Rng rng(3);
    Panorama p = random_panorama(rng, 4);
    Tape tape;
    Tensor s = m.encode_observation(tape, p);
    SECTION("always 37 rows") {
        CHECK(s.rows() == kNumSlots);
    }
    SECTION("theta = 0 gives orientation features (0, 1, ...)") {
        CHECK(p.views[0].heading == 0.0);
        CHECK(std::sin(p.views[0].heading) == 0.0);
        CHECK(std::cos(p.views[0].heading) == 1.0);
    }
    SECTION("single-view change is local before cross-attention") {
        Panorama q = p;
        q.views[11].feature[2] += 0.5;
        Tape t2, t3;
        Tensor a = m.project_views(t2, p);
        Tensor b = m.project_views(t3, q);
        for (int i = 0; i < kNumViews; ++i) {
            bool differs = false;
            for (int j = 0; j < 8; ++j)
                if (a.at(i, j) != b.at(i, j)) differs = true;
            CHECK(differs == (i == 11));
        }
    }
    SECTION("wrong view count raises ShapeError") {
        Panorama bad = p;
        bad.views.pop_back();
        Tape t4;
        CHECK_THROWS_AS(m.encode_observation(t4, bad), ShapeError);
    }
}

TEST_CASE("history encoding") {
    Model m(tiny_config());
    Rng rng(8);
    Panorama p1 = random_panorama(rng, 4), p2 = random_panorama(rng, 4);
    SECTION("t = 0 yields only the global slot") {
        Tape tape;
        Tensor y = m.encode_history(tape, {}, {});
        CHECK(y.rows() == 1);
    }
    SECTION("reordering steps changes the output") {
        Tape t1, t2;
        auto a = tensor_copy(m.encode_history(t1, {p1, p2}, {4, 9}));
        auto b = tensor_copy(m.encode_history(t2, {p2, p1}, {9, 4}));
        CHECK(a != b);
    }
    SECTION("identical histories encode identically") {
        Tape t1, t2;
        auto a = tensor_copy(m.encode_history(t1, {p1, p2}, {4, 9}));
        auto b = tensor_copy(m.encode_history(t2, {p1, p2}, {4, 9}));
        CHECK(a == b);
    }
}

TEST_CASE("cross-modal encoder") {
    Rng rng(11);
    SECTION("zero cross layers is the identity configuration") {
        ModelConfig cfg = tiny_config();
        cfg.n_layers_cross = 0;
        Model m(cfg);
        Tape tape;
        Instruction ins = Instruction::of({kClsId, 5, 6});
        Tensor text = m.encode_instruction(tape, ins);
        Tensor hist = m.encode_history(tape, {}, {});
        Panorama p = random_panorama(rng, 4);
        Tensor obs = m.encode_observation(tape, p);
        EncoderOutputs out = m.cross_modal_encode(tape, text, m.key_bias_of(ins), hist, obs);
        CHECK(out.Z.same_storage(text));
        CHECK(out.Y.same_storage(hist));
        CHECK(out.S.same_storage(obs));
    }
    SECTION("last-layer cross-attention rows sum to 1") {
        Model m(tiny_config());
        Tape tape;
        Instruction ins = Instruction::of({kClsId, 5, 6, 7});
        Panorama p = random_panorama(rng, 4);
        EncoderOutputs out = m.encode_step(tape, ins, {p}, {4}, p);
        REQUIRE(!out.text_to_vis.empty());
        for (int i = 0; i < out.text_to_vis.rows; ++i) {
            double s = 0;
            for (int j = 0; j < out.text_to_vis.cols; ++j) s += out.text_to_vis.at(i, j);
            CHECK(s == Catch::Approx(1.0).margin(1e-9));
        }
        CHECK(out.S.rows() == kNumSlots);
        CHECK(out.n_history_rows == 2);
    }
    SECTION("masked text token receives exactly zero attention") {
        Model m(tiny_config());
        Tape tape;
        Instruction ins = Instruction::of({kClsId, 5, 6, 7});
        ins.live = {1, 1, 0, 1};
        Panorama p = random_panorama(rng, 4);
        EncoderOutputs out = m.encode_step(tape, ins, {}, {}, p);
        for (int i = 0; i < out.vis_to_text.rows; ++i) CHECK(out.vis_to_text.at(i, 2) == 0.0);
    }
}

TEST_CASE("predict_action") {
    Model m(tiny_config());
    Rng rng(17);
    Panorama p = random_panorama(rng, 4);
    Instruction ins = Instruction::of({kClsId, 5, 9});
    SECTION("zeroed head gives uniform over candidates") {
        Model zeroed(tiny_config());
        for (const char* n : {"head.sap.w1", "head.sap.w2"}) {
            diff::Tensor t = zeroed.params().get(n);
            std::fill(t.values_mut().begin(), t.values_mut().end(), 0.0);
        }
        Tape tape;
        EncoderOutputs out = zeroed.encode_step(tape, ins, {}, {}, p);
        Tensor probs = zeroed.predict_action(tape, out, {3, 14});
        CHECK(probs.at(3) == Catch::Approx(1.0 / 3));
        CHECK(probs.at(14) == Catch::Approx(1.0 / 3));
        CHECK(probs.at(kStopSlot) == Catch::Approx(1.0 / 3));
    }
    SECTION("one navigable view plus stop makes a binary distribution") {
        Tape tape;
        EncoderOutputs out = m.encode_step(tape, ins, {}, {}, p);
        Tensor probs = m.predict_action(tape, out, {7});
        double sum = 0;
        for (int i = 0; i < kNumSlots; ++i) {
            if (i != 7 && i != kStopSlot) CHECK(probs.at(i) == 0.0);
            sum += probs.at(i);
        }
        CHECK(sum == Catch::Approx(1.0).margin(1e-12));
    }
}

TEST_CASE("action log-probability gradient passes grad_check on all weights") {
    // 3-token instruction, 1 history step, tiny dimensions.
    ModelConfig cfg = tiny_config();
    cfg.seed = 23;
    Model m(cfg);
    Rng rng(29);
    Panorama past = random_panorama(rng, 4);
    Panorama cur = random_panorama(rng, 4);
    Instruction ins = Instruction::of({kClsId, 4, 11});
    auto f = [&](Tape& tape) {
        EncoderOutputs out = m.encode_step(tape, ins, {past}, {5}, cur);
        Tensor logp = m.predict_action_log(tape, out, {2, 9});
        return tape.reshape(tape.gather_rows(tape.reshape(logp, {kNumSlots, 1}), {9}), {1});
    };
    std::vector<std::pair<std::string, diff::Tensor>> params;
    for (const auto& [name, t] : m.params().items()) params.emplace_back(name, t);
    auto rep = diff::grad_check(f, params, 1e-5, 1e-4, /*max_per_tensor=*/24, /*sample_seed=*/7);
    INFO("worst " << rep.worst_tensor << "[" << rep.worst_index << "] analytic "
                  << rep.analytic_at_worst << " numeric " << rep.numeric_at_worst << " rel "
                  << rep.max_rel_err << " over " << rep.checked << " elements");
    CHECK(rep.pass);
}

TEST_CASE("checkpoint round trip restores weights bit-exactly") {
    namespace fs = std::filesystem;
    const std::string path = (fs::temp_directory_path() / "gela_ckpt_test.bin").string();
    ModelConfig cfg = tiny_config();
    Model m(cfg);
    Rng rng(31);
    Panorama p = random_panorama(rng, 4);
    Instruction ins = Instruction::of({kClsId, 3, 12});
    Tape t1;
    auto before = tensor_copy(m.encode_step(t1, ins, {}, {}, p).S);
    save_checkpoint(m, path);

    Model loaded = load_checkpoint(cfg, path);
    Tape t2;
    auto after = tensor_copy(loaded.encode_step(t2, ins, {}, {}, p).S);
    CHECK(before == after);

    SECTION("truncated file raises ParseError") {
        const std::string trunc = path + ".trunc";
        {
            std::ifstream in(path, std::ios::binary);
            std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
            bytes.resize(bytes.size() / 2);
            std::ofstream out(trunc, std::ios::binary);
            out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        }
        ParamStore& store = m.params();
        CHECK_THROWS_AS(load_params(store, trunc), ParseError);
        fs::remove(trunc);
    }
    SECTION("version mismatch raises VersionError") {
        const std::string bad = path + ".badver";
        {
            std::string htext = "{\"version\":\"gela-ckpt-0\",\"arrays\":[]}";
            std::ofstream out(bad, std::ios::binary);
            std::uint64_t hlen = htext.size();
            out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
            out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
        }
        ParamStore& store = m.params();
        CHECK_THROWS_AS(load_params(store, bad), VersionError);
        fs::remove(bad);
    }
    fs::remove(path);
}

TEST_CASE("checkpoint header lists every array exactly once") {
    namespace fs = std::filesystem;
    const std::string path = (fs::temp_directory_path() / "gela_ckpt_header.bin").string();
    Model m(tiny_config());
    save_checkpoint(m, path);
    std::ifstream in(path, std::ios::binary);
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string htext(hlen, '\0');
    in.read(htext.data(), static_cast<std::streamsize>(hlen));
    auto header = nlohmann::json::parse(htext);
    std::set<std::string> names;
    for (const auto& e : header["arrays"]) CHECK(names.insert(e["name"].get<std::string>()).second);
    CHECK(names.size() == m.params().size());
    fs::remove(path);
}
