#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "gela/trainer.hpp"

using namespace gela;
using namespace gela::train;

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
    cfg.seed = 9;
    return cfg;
}

world::GeneratedWorld small_world(std::uint64_t seed = 3, int n_vp = 12, int n_eps = 9) {
    world::WorldParams p;
    p.seed = seed;
    p.n_viewpoints = n_vp;
    p.n_episodes = n_eps;
    p.path_len_min = 2;
    p.path_len_max = 3;
    return world::generate_world(p);
}

TrainConfig quick_config(int iterations = 4) {
    TrainConfig c;
    c.iterations = iterations;
    c.batch_size = 2;
    c.seed = 17;
    return c;
}

}  // namespace

TEST_CASE("config parsing") {
    SECTION("key=value text with preset and overrides") {
        TrainConfig c = parse_config_text(
            "preset = desk\niterations = 42\nlearning_rate = 0.5\nmix.sap = 2.0\n"
            "# comment\ntau = 0.1\n");
        CHECK(c.iterations == 42);
        CHECK(c.learning_rate == 0.5);
        CHECK(c.mix.at("sap") == 2.0);
        CHECK(c.gela.tau == 0.1);
    }
    SECTION("paper-scale preset stores the published settings") {
        TrainConfig c = TrainConfig::paper_scale();
        CHECK(c.iterations == 200000);
        CHECK(c.learning_rate == 5e-5);
        CHECK(c.batch_size == 64);
        TrainConfig f = TrainConfig::paper_finetune();
        CHECK(f.iterations == 100000);
        CHECK(f.learning_rate == 1e-5);
    }
    SECTION("unknown task in mix rejected") {
        CHECK_THROWS_AS(parse_config_text("mix.bogus = 1\n"), ContractError);
    }
}

TEST_CASE("update clipping bounds the applied update norm exactly") {
    model::ModelConfig mc = tiny_config();
    model::Model m(mc);
    // plant a large gradient
    for (auto& [name, t] : m.params().items_mut())
        for (std::size_t i = 0; i < t.size(); ++i) t.grad_mut()[i] = 100.0;
    Optimizer opt("momentum", /*lr=*/1.0, /*momentum=*/0.0, /*clip=*/0.5);
    auto before = [&] {
        std::map<std::string, std::vector<double>> snap;
        for (const auto& [name, t] : m.params().items())
            snap[name] = {t.values().begin(), t.values().end()};
        return snap;
    }();
    const double applied = opt.step(m.params());
    CHECK(applied == Catch::Approx(0.5).margin(1e-12));
    double sq = 0;
    for (const auto& [name, t] : m.params().items()) {
        const auto& prev = before.at(name);
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double d = t.values()[i] - prev[i];
            sq += d * d;
        }
    }
    CHECK(std::sqrt(sq) == Catch::Approx(0.5).margin(1e-9));

    SECTION("the ceiling also binds adaptive updates") {
        model::Model m2(mc);
        for (auto& [name, t] : m2.params().items_mut())
            for (std::size_t i = 0; i < t.size(); ++i) t.grad_mut()[i] = 5.0;
        Optimizer adam("adam", /*lr=*/1.0, /*momentum=*/0.9, /*clip=*/0.25);
        CHECK(adam.step(m2.params()) == Catch::Approx(0.25).margin(1e-12));
    }
}

TEST_CASE("adaptive_pretrain") {
    auto gen = small_world();
    std::vector<Source> sources{{&gen.episodes, true}};
    SECTION("all weight on sap logs only sap entries") {
        model::Model m(tiny_config());
        TrainConfig c = quick_config(5);
        c.mix = {{"sap", 1.0}};
        TrainLog log = adaptive_pretrain(m, gen.world, sources, c);
        REQUIRE(log.entries.size() == 5);
        for (const auto& e : log.entries) CHECK(e.task == "sap");
    }
    SECTION("identical seeds give identical loss sequences") {
        model::Model m1(tiny_config()), m2(tiny_config());
        TrainConfig c = quick_config(6);
        TrainLog a = adaptive_pretrain(m1, gen.world, sources, c);
        TrainLog b = adaptive_pretrain(m2, gen.world, sources, c);
        REQUIRE(a.entries.size() == b.entries.size());
        for (std::size_t i = 0; i < a.entries.size(); ++i) {
            CHECK(a.entries[i].task == b.entries[i].task);
            CHECK(a.entries[i].loss == b.entries[i].loss);
        }
        CHECK(a.csv() == b.csv());
    }
    SECTION("grounded tasks demand a grounded source") {
        model::Model m(tiny_config());
        std::vector<Source> augmented_only{{&gen.episodes, false}};
        TrainConfig c = quick_config(2);
        c.mix = {{"epp", 1.0}};
        CHECK_THROWS_AS(adaptive_pretrain(m, gen.world, augmented_only, c), ContractError);
        // proxies remain fine on augmented-only data
        c.mix = {{"mlm", 1.0}};
        TrainLog log = adaptive_pretrain(m, gen.world, augmented_only, c);
        CHECK(log.entries.size() == 2);
    }
    SECTION("routed loss equals the standalone objective on the same draw") {
        model::Model m(tiny_config());
        TrainConfig c = quick_config(1);
        c.mix = {{"elsa", 1.0}};
        c.batch_size = 1;
        model::Model m_copy(tiny_config());
        TrainLog log = adaptive_pretrain(m, gen.world, sources, c);

        // replay: same rng consumption order as the training loop
        DataPools pools = DataPools::build(sources);
        Rng rng(c.seed);
        (void)rng.uniform();  // the task draw
        diff::Tape tape;
        diff::Tensor loss = build_task_loss(tape, "elsa", m_copy, gen.world, pools, c, rng);
        CHECK(log.entries[0].loss == loss.item());
    }
    SECTION("csv excludes wall clock and is monotone in iteration") {
        model::Model m(tiny_config());
        TrainLog log = adaptive_pretrain(m, gen.world, sources, quick_config(3));
        CHECK(log.csv().substr(0, 20) == "iteration,task,loss\n");
        for (std::size_t i = 1; i < log.entries.size(); ++i)
            CHECK(log.entries[i].iteration >= log.entries[i - 1].iteration);
    }
}

TEST_CASE("finetune") {
    auto gen = small_world(21);
    std::vector<geldata::Episode> episodes(gen.episodes.episodes.begin(),
                                           gen.episodes.episodes.begin() + 6);
    SECTION("rl weight 0 reduces to behavior cloning on sap losses") {
        model::Model m(tiny_config());
        TrainConfig c = quick_config(1);
        c.rl_weight = 0.0;
        c.batch_size = 2;
        // replicate the batch draw and the expected imitation loss
        model::Model m_copy(tiny_config());
        Rng rng(c.seed);
        double expect = 0;
        int counted = 0;
        for (int b = 0; b < c.batch_size; ++b) {
            const geldata::Episode& ep = episodes[rng.uniform_index(episodes.size())];
            diff::Tape tape;
            double il = 0;
            for (const auto& sc : eval::teacher_forced_steps(gen.world, ep)) {
                auto enc = m_copy.encode_step(tape, sc.instr, sc.past, sc.past_actions, sc.obs);
                il += objectives::sap_loss(tape, m_copy, enc, sc.candidates, sc.expert_slot)
                          .item();
            }
            expect += il;
            ++counted;
        }
        expect /= counted;
        TrainLog log = finetune(m, gen.world, episodes, c);
        CHECK(log.entries[0].loss == Catch::Approx(expect).margin(1e-10));
    }
    SECTION("expert pass of a length-k path makes k+1 decisions") {
        const geldata::Episode& ep = episodes[0];
        auto steps = eval::teacher_forced_steps(gen.world, ep);
        CHECK(steps.size() == ep.path.size());
        CHECK(steps.back().expert_slot == kStopSlot);
        for (std::size_t i = 0; i + 1 < steps.size(); ++i)
            CHECK(steps[i].expert_slot != kStopSlot);
    }
    SECTION("two identically seeded runs are bit-identical") {
        model::Model m1(tiny_config()), m2(tiny_config());
        TrainConfig c = quick_config(2);
        TrainLog a = finetune(m1, gen.world, episodes, c);
        TrainLog b = finetune(m2, gen.world, episodes, c);
        CHECK(a.csv() == b.csv());
        for (const auto& [name, t] : m1.params().items()) {
            const diff::Tensor& other = m2.params().get(name);
            CHECK(std::equal(t.values().begin(), t.values().end(), other.values().begin()));
        }
    }
}

TEST_CASE("checkpoint retention on request") {
    namespace fs = std::filesystem;
    auto gen = small_world(23);
    std::vector<Source> sources{{&gen.episodes, true}};
    model::Model m(tiny_config());
    TrainConfig c = quick_config(3);
    c.checkpoint_path = (fs::temp_directory_path() / "gela_train_ckpt.bin").string();
    c.checkpoint_every = 2;
    adaptive_pretrain(m, gen.world, sources, c);
    CHECK(fs::exists(c.checkpoint_path));
    model::Model restored = model::load_checkpoint(tiny_config(), c.checkpoint_path);
    for (const auto& [name, t] : m.params().items()) {
        const diff::Tensor& other = restored.params().get(name);
        CHECK(std::equal(t.values().begin(), t.values().end(), other.values().begin()));
    }
    fs::remove(c.checkpoint_path);
}