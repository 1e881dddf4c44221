#include "oclapo/policy/policy.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>

using namespace oclapo;

namespace {

// Integrator stand-in: mostly goal-seeking actions (a learnable function of
// the observed position) plus smooth AR(1) noise; slot 0 exposes position.
struct FakeRollout {
    worldgen::Trajectory traj;
    ocm::SlotArchive arch;
};

FakeRollout make_rollout(uint64_t seed, int steps, int d, int K) {
    Rng rng(seed);
    FakeRollout r;
    r.traj.H = r.traj.W = 2;
    const Eigen::Vector2f goal{0.75f, 0.75f};
    Eigen::Vector2f p{static_cast<float>(rng.uniform(0.1, 0.9)),
                      static_cast<float>(rng.uniform(0.1, 0.9))};
    Eigen::Vector2f ar{static_cast<float>(0.5 * rng.normal()),
                       static_cast<float>(0.5 * rng.normal())};
    auto slot_of = [&](const Eigen::Vector2f& q) {
        ad::Mat<float> s(d, K);
        for (int k = 0; k < K; ++k)
            for (int i = 0; i < d; ++i)
                s(i, k) = (k == 0 ? q[i % 2] : 0.05f * static_cast<float>(k + i));
        return s;
    };
    r.traj.states.resize(static_cast<size_t>(steps) + 1);
    r.arch.K = K;
    r.arch.d = d;
    r.arch.R = 2;
    for (int t = 0; t < steps; ++t) {
        r.arch.slots.push_back(slot_of(p));
        ar = 0.9f * ar + Eigen::Vector2f{static_cast<float>(0.25 * rng.normal()),
                                         static_cast<float>(0.25 * rng.normal())};
        ar = ar.cwiseMax(-1.0f).cwiseMin(1.0f);
        Eigen::Vector2f a = (1.5f * (goal - p) + 0.15f * ar).cwiseMax(-1.0f).cwiseMin(1.0f);
        r.traj.actions.push_back(a);
        r.traj.rewards.push_back(0.0f);
        p += 0.1f * a;
    }
    r.arch.slots.push_back(slot_of(p));
    for (size_t t = 0; t < r.arch.slots.size(); ++t)
        r.arch.masks.push_back(ad::Mat<float>::Constant(K, 4, 1.0f / K));
    return r;
}

policy::PolicyConfig tiny_cfg() {
    policy::PolicyConfig c;
    c.variant = lam::LamVariant::slots;
    c.input_dim = 6;
    c.latent_dim = 8;
    c.hidden = 32;
    c.blocks = 2;
    c.steps = 200;
    c.batch = 16;
    c.lr = 2e-3;
    c.warmup = 10;
    c.ft_steps = 200;
    c.ft_batch = 16;
    c.ft_lr = 2e-3;
    c.seed = 5;
    return c;
}

}  // namespace

TEST_CASE("relative gain matches the published formula") {
    // tolerance 0: the quoted +50% row must come out exact in doubles
    CHECK(policy::relative_gain(0.13, 0.35, 0.24) == 50.0);
    CHECK(policy::relative_gain(0.2, 0.9, 0.2) == 0.0);
    CHECK(policy::relative_gain(0.24, 0.76, 0.55) ==
          doctest::Approx(59.615384615384613).epsilon(1e-12));
    CHECK_THROWS(policy::relative_gain(0.5, 0.5, 0.6));   // empty gap
    CHECK_THROWS(policy::relative_gain(0.6, 0.5, 0.55));  // inverted gap
}

TEST_CASE("score normalization anchors") {
    CHECK(policy::normalize_score(0.8, 0.8, 0.1) == doctest::Approx(1.0));
    CHECK(policy::normalize_score(0.1, 0.8, 0.1) == doctest::Approx(0.0));
    CHECK(policy::normalize_score(0.45, 0.8, 0.1) == doctest::Approx(0.5));
    // reach returns are negative sums; affine normalization handles that
    CHECK(policy::normalize_score(-5.0, -2.0, -20.0) == doctest::Approx(15.0 / 18.0));
    CHECK_THROWS(policy::normalize_score(0.5, 0.3, 0.3));
}

TEST_CASE("budget accounting") {
    CHECK(policy::budget_trajectories(100, 0.025, 0.025, false) == 3);
    CHECK(policy::budget_trajectories(100, 0.005, 0.025, false) == 1);
    CHECK(policy::budget_trajectories(200, 0.01, 0.025, false) == 2);
    CHECK(policy::budget_trajectories(200, 0.005, 0.025, false) == 1);
    CHECK(policy::budget_trajectories(100, 0.0, 0.025, false) == 0);
    CHECK(policy::budget_trajectories(100, 0.01, 0.025, false) == 1);
    CHECK_THROWS(policy::budget_trajectories(100, 0.05, 0.025, false));
    CHECK(policy::budget_trajectories(100, 1.0, 0.025, true) == 100);
}

TEST_CASE("config json roundtrip") {
    policy::PolicyConfig c = tiny_cfg();
    c.variant = lam::LamVariant::masks;
    c.ft_unfreeze = true;
    c.budget_cap = 0.1;
    auto b = policy::policy_config_from_json(policy::policy_config_to_json(c));
    CHECK(b.variant == c.variant);
    CHECK(b.latent_dim == c.latent_dim);
    CHECK(b.ft_unfreeze == c.ft_unfreeze);
    CHECK(b.budget_cap == doctest::Approx(c.budget_cap));
    CHECK(b.steps == c.steps);

    // every policy observes the distracted stream
    policy::PolicyConfig pc = tiny_cfg();
    pc.variant = lam::LamVariant::pixels_clean;
    CHECK(policy::input_config(pc).variant == lam::LamVariant::pixels);
    pc.variant = lam::LamVariant::masks;
    CHECK(policy::input_config(pc).variant == lam::LamVariant::masks);
}

TEST_CASE("latent bc fits the archive and holds out trajectories") {
    std::vector<FakeRollout> rolls;
    for (int i = 0; i < 8; ++i)
        rolls.push_back(make_rollout(300 + static_cast<uint64_t>(i), 18, 6, 2));
    std::vector<lam::RepSource> data;
    for (auto& r : rolls) data.push_back({&r.traj, &r.arch});

    // fake latents: a fixed linear map of the selected slot vector, so the
    // backbone can in principle fit them exactly
    lam::LatentArchive la;
    la.variant = lam::LamVariant::slots;
    la.latent_dim = 8;
    la.delta = 3;
    la.model_hash = "fake";
    Eigen::MatrixXf Wz(8, 6);
    Rng wr(77);
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 6; ++j) Wz(i, j) = static_cast<float>(0.4 * wr.normal());
    for (auto& r : rolls) {
        const int T = lam::valid_pairs(r.traj, la.delta);
        Eigen::MatrixXf z(T, 8);
        for (int t = 0; t < T; ++t) z.row(t) = (Wz * r.arch.slots[static_cast<size_t>(t)].col(0)).transpose();
        la.z.push_back(std::move(z));
    }

    policy::PolicyConfig c = tiny_cfg();
    policy::PolicyNet<float> net(c, 9);
    auto res = policy::train_latent_bc(net, data, {0}, la, "/tmp/oclapo_test_bc_ck.bin");
    CHECK(res.steps_run == c.steps);
    CHECK(res.final_loss < res.curve.front()[1]);
    CHECK(std::isfinite(res.heldout_mse));
    CHECK(res.heldout_mse < res.latent_variance);

    // deterministic rerun
    policy::PolicyNet<float> net2(c, 9);
    auto res2 = policy::train_latent_bc(net2, data, {0}, la, "/tmp/oclapo_test_bc_ck.bin");
    CHECK(res2.final_loss == res.final_loss);
    for (size_t i = 0; i < net.ps.all().size(); ++i) {
        const auto& a = net.ps.all()[i]->value;
        const auto& b = net2.ps.all()[i]->value;
        CHECK(std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<size_t>(a.size())) == 0);
    }

    // zero steps leaves parameters untouched
    policy::PolicyConfig c0 = c;
    c0.steps = 0;
    policy::PolicyNet<float> m4(c0, 9);
    policy::PolicyNet<float> m5(c0, 9);
    policy::train_latent_bc(m4, data, {0}, la, "/tmp/oclapo_test_bc_ck0.bin");
    for (size_t i = 0; i < m4.ps.all().size(); ++i)
        CHECK((m4.ps.all()[i]->value - m5.ps.all()[i]->value).cwiseAbs().maxCoeff() == 0.0f);

    // misaligned archive (one trajectory short) is an integrity error
    lam::LatentArchive bad = la;
    bad.z.pop_back();
    CHECK_THROWS(policy::train_latent_bc(net, data, {0}, bad, "/tmp/oclapo_test_bc_ckx.bin"));

    std::filesystem::remove("/tmp/oclapo_test_bc_ck.bin");
    std::filesystem::remove("/tmp/oclapo_test_bc_ck0.bin");

    // constant-zero latents: the trained policy predicts ~0
    lam::LatentArchive zeros = la;
    for (auto& z : zeros.z) z.setZero();
    policy::PolicyConfig cz = c;
    cz.steps = 300;
    policy::PolicyNet<float> nz(cz, 9);
    policy::train_latent_bc(nz, data, {0}, zeros, "/tmp/oclapo_test_bc_ckz.bin");
    auto x = lam::make_input(policy::input_config(cz), data[0], {0}, 3);
    CHECK(nz.predict_latent(x, 1).cwiseAbs().maxCoeff() < 0.05f);
    std::filesystem::remove("/tmp/oclapo_test_bc_ckz.bin");
}

TEST_CASE("finetune reads exactly the labeled slice") {
    std::vector<FakeRollout> rolls;
    for (int i = 0; i < 6; ++i)
        rolls.push_back(make_rollout(400 + static_cast<uint64_t>(i), 18, 6, 2));
    // poison everything outside the declared budget; any out-of-budget read
    // would propagate NaN into the parameters
    for (size_t i = 2; i < rolls.size(); ++i)
        for (auto& a : rolls[i].traj.actions) a.setConstant(std::nanf(""));
    std::vector<lam::RepSource> labeled{{&rolls[0].traj, &rolls[0].arch},
                                        {&rolls[1].traj, &rolls[1].arch}};

    policy::PolicyConfig c = tiny_cfg();
    policy::PolicyNet<float> net(c, 13);
    auto before = net.ps.find("act_head.W")->value;
    auto ft = policy::finetune(net, labeled, {0}, 2.0 / 6.0);
    CHECK(ft.labeled_used == 2);
    CHECK(ft.budget_frac == doctest::Approx(2.0 / 6.0));
    CHECK_FALSE(ft.backbone_unfrozen);
    CHECK(std::isfinite(ft.final_loss));
    CHECK(ft.final_loss < ft.curve.front()[1]);
    for (const auto& p : net.ps.all()) {
        CHECK(p->value.allFinite());
        if (!policy::PolicyNet<float>::is_head_param(*p)) continue;
    }
    CHECK((net.ps.find("act_head.W")->value - before).cwiseAbs().maxCoeff() > 0.0f);

    // frozen backbone stays bitwise put
    policy::PolicyNet<float> ref(c, 13);
    for (const auto& p : net.ps.all()) {
        if (policy::PolicyNet<float>::is_head_param(*p)) continue;
        const auto* q = ref.ps.find(p->name);
        CHECK((p->value - q->value).cwiseAbs().maxCoeff() == 0.0f);
    }

    // unfreezing moves it
    policy::PolicyConfig cu = c;
    cu.ft_unfreeze = true;
    policy::PolicyNet<float> net2(cu, 13);
    auto ft2 = policy::finetune(net2, labeled, {0}, 2.0 / 6.0);
    CHECK(ft2.backbone_unfrozen);
    bool moved = false;
    for (const auto& p : net2.ps.all()) {
        if (policy::PolicyNet<float>::is_head_param(*p)) continue;
        const auto* q = ref.ps.find(p->name);
        if ((p->value - q->value).cwiseAbs().maxCoeff() > 0.0f) moved = true;
    }
    CHECK(moved);

    CHECK_THROWS(policy::finetune(net, {}, {0}, 0.0));  // nothing to fit
}

TEST_CASE("oracle bc recovers the integrator expert") {
    std::vector<FakeRollout> rolls;
    for (int i = 0; i < 8; ++i)
        rolls.push_back(make_rollout(500 + static_cast<uint64_t>(i), 18, 6, 2));
    std::vector<lam::RepSource> data;
    for (auto& r : rolls) data.push_back({&r.traj, &r.arch});
    policy::PolicyConfig c = tiny_cfg();
    c.ft_steps = 400;
    policy::PolicyNet<float> net(c, 21);
    auto res = policy::train_oracle_bc(net, data, {0});
    CHECK(res.backbone_unfrozen);
    CHECK(res.budget_frac == doctest::Approx(1.0));
    // the integrator actions are a smooth function of recent positions; the
    // net sees only the current one, so expect a loose but real fit
    CHECK(res.final_loss < 0.5 * res.curve.front()[1]);
}

TEST_CASE("closed-loop evaluation is deterministic and ranks sanely") {
    worldgen::DistractorConfig dcfg;
    policy::ExpertAgent expert(0.0);
    auto e1 = policy::evaluate(expert, worldgen::WorldKind::reach, dcfg, 8, 40, 32, 11);
    auto e2 = policy::evaluate(expert, worldgen::WorldKind::reach, dcfg, 8, 40, 32, 11);
    CHECK(e1.raw_score == e2.raw_score);
    CHECK(e1.episodes == 8);

    policy::RandomAgent rnd(3);
    auto r1 = policy::evaluate(rnd, worldgen::WorldKind::reach, dcfg, 8, 40, 32, 11);
    CHECK(e1.raw_score > r1.raw_score + 2.0);  // returns are -distance sums

    // self-normalization: the expert against itself is exactly 1
    CHECK(policy::normalize_score(e1.raw_score, e1.raw_score, r1.raw_score) ==
          doctest::Approx(1.0));

    // random floor on push: success is rare
    policy::RandomAgent rnd2(4);
    auto p1 = policy::evaluate(rnd2, worldgen::WorldKind::push, dcfg, 20, 50, 32, 12);
    CHECK(p1.raw_score <= 0.05);
    CHECK(p1.kind == worldgen::WorldKind::push);

    // expert solves push within the horizon on most seeds
    policy::ExpertAgent pe(0.0);
    auto p2 = policy::evaluate(pe, worldgen::WorldKind::push, dcfg, 20, 120, 32, 12);
    CHECK(p2.raw_score >= 0.8);

    auto j = nlohmann::json::parse(policy::eval_result_to_json(e1, "pixels", 0.01));
    CHECK(j.at("raw").get<double>() == doctest::Approx(e1.raw_score));
    CHECK(j.at("episodes").get<int>() == 8);
    CHECK(j.at("variant").get<std::string>() == "pixels");
    CHECK(j.at("budget").get<double>() == doctest::Approx(0.01));
}

TEST_CASE("latent agent runs the full observation path") {
    // pixels variant: stacked pooled frames, no slot encoder involved
    policy::PolicyConfig pc;
    pc.variant = lam::LamVariant::pixels;
    pc.image_size = 16;  // frames arrive at 32
    pc.frame_stack = 3;
    pc.latent_dim = 6;
    pc.hidden = 16;
    pc.enc_c1 = 4;
    pc.enc_c2 = 5;
    pc.enc_c3 = 6;
    policy::PolicyNet<float> net(pc, 31);
    policy::LatentAgent agent(net, nullptr, {});
    worldgen::DistractorConfig dcfg;
    auto a = policy::evaluate(agent, worldgen::WorldKind::reach, dcfg, 3, 20, 32, 7);
    auto b = policy::evaluate(agent, worldgen::WorldKind::reach, dcfg, 3, 20, 32, 7);
    CHECK(a.raw_score == b.raw_score);
    CHECK(std::isfinite(a.raw_score));

    // slots variant drives the recurrent encoder in the loop
    ocm::OcmConfig oc;
    oc.num_slots = 2;
    oc.slot_dim = 8;
    oc.iters = 2;
    oc.window = 2;
    oc.frame_size = 16;
    oc.enc_c1 = 4;
    oc.enc_c2 = 5;
    oc.enc_c3 = 6;
    oc.feat_dim = 8;
    oc.grid = 2;
    oc.dec_c0 = 6;
    oc.dec_c1 = 5;
    oc.dec_c2 = 4;
    oc.recon_size = 8;
    ocm::Ocm<float> enc(oc, 3);
    policy::PolicyConfig sc;
    sc.variant = lam::LamVariant::slots;
    sc.input_dim = 8;
    sc.latent_dim = 6;
    sc.hidden = 16;
    policy::PolicyNet<float> snet(sc, 33);
    policy::LatentAgent sagent(snet, &enc, {1});
    auto s1 = policy::evaluate(sagent, worldgen::WorldKind::reach, dcfg, 2, 15, 16, 7);
    auto s2 = policy::evaluate(sagent, worldgen::WorldKind::reach, dcfg, 2, 15, 16, 7);
    CHECK(s1.raw_score == s2.raw_score);
    CHECK(std::isfinite(s1.raw_score));

    // masks variant additionally filters frames by the selected slot masks
    policy::PolicyConfig mc = pc;
    mc.variant = lam::LamVariant::masks;
    mc.image_size = 8;  // matches the tiny encoder recon resolution
    policy::PolicyNet<float> mnet(mc, 35);
    policy::LatentAgent magent(mnet, &enc, {0});
    auto m1 = policy::evaluate(magent, worldgen::WorldKind::reach, dcfg, 2, 15, 16, 7);
    auto m2 = policy::evaluate(magent, worldgen::WorldKind::reach, dcfg, 2, 15, 16, 7);
    CHECK(m1.raw_score == m2.raw_score);
    CHECK(std::isfinite(m1.raw_score));
}
