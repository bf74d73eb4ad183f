#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "parenting/errors.hpp"
#include "parenting/subspace.hpp"
#include "parenting/textio.hpp"

using namespace parenting;

namespace {

std::vector<ParameterUnitId> unit_ids(int layers) {
    std::vector<ParameterUnitId> ids;
    for (int l = 1; l <= layers; ++l)
        for (int k = 0; k < kBlockMatrices; ++k) ids.push_back({l, static_cast<UnitKind>(k), UnitKind::Wq});
    return ids;
}

ZScores make_z(Behavior b, const std::vector<double>& z) {
    ZScores out;
    out.behavior = b;
    const auto ids = unit_ids(static_cast<int>((z.size() + kBlockMatrices - 1) / kBlockMatrices));
    for (std::size_t i = 0; i < z.size(); ++i) out.units.push_back({ids[i], z[i]});
    return out;
}

ImportanceDistribution make_dist(Behavior b, const std::vector<double>& values) {
    ImportanceDistribution d;
    d.behavior = b;
    const auto ids = unit_ids(static_cast<int>((values.size() + kBlockMatrices - 1) / kBlockMatrices));
    for (std::size_t i = 0; i < values.size(); ++i) d.units.push_back({ids[i], values[i]});
    return d;
}

}  // namespace

TEST(ZScores, HandExamples) {
    const double a[] = {1.0, 2.0, 3.0};
    const auto z = zscores(a);
    EXPECT_NEAR(z[0], -1.22474, 1e-5);
    EXPECT_NEAR(z[1], 0.0, 1e-15);
    EXPECT_NEAR(z[2], 1.22474, 1e-5);
    const double flat[] = {5.0, 5.0, 5.0};
    for (double v : zscores(flat)) EXPECT_EQ(v, 0.0);
    const double pair[] = {0.0, 4.0};
    const auto zp = zscores(pair);
    EXPECT_DOUBLE_EQ(zp[0], -1.0);
    EXPECT_DOUBLE_EQ(zp[1], 1.0);
    const double one[] = {1.0};
    EXPECT_THROW(zscores(one), InputError);
}

TEST(ZScores, StandardisedMoments) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> d(0.0, 10.0);
    std::vector<double> v(28);
    for (double& x : v) x = d(rng);
    const auto z = zscores(v);
    double mean = 0.0, sq = 0.0;
    for (double x : z) mean += x;
    mean /= static_cast<double>(z.size());
    for (double x : z) sq += (x - mean) * (x - mean);
    EXPECT_NEAR(mean, 0.0, 1e-9);
    EXPECT_NEAR(std::sqrt(sq / static_cast<double>(z.size())), 1.0, 1e-9);
}

TEST(Localize, ConditionExamples) {
    const auto za = make_z(Behavior::adherence, {1.5, 1.5, 0.3, 0.5, 1.0, 1.0, 2.0});
    const auto zr = make_z(Behavior::robustness, {1.2, 0.2, 1.4, 0.5, 1.5, 1.0, 1.0});
    const auto p = localize(za, zr, 1.0);
    const auto ids = unit_ids(1);
    EXPECT_EQ(p.subspace_of(ids[0]), Subspace::entangled);
    EXPECT_EQ(p.subspace_of(ids[1]), Subspace::adherence);
    EXPECT_EQ(p.subspace_of(ids[2]), Subspace::robustness);
    EXPECT_EQ(p.subspace_of(ids[3]), Subspace::other);
    EXPECT_EQ(p.subspace_of(ids[4]), Subspace::robustness);  // z_a exactly at tau is not above it
    EXPECT_EQ(p.subspace_of(ids[5]), Subspace::other);
    EXPECT_EQ(p.subspace_of(ids[6]), Subspace::adherence);
}

TEST(Localize, MismatchedKeysRejected) {
    auto za = make_z(Behavior::adherence, {1.0, 2.0, 3.0});
    auto zr = make_z(Behavior::robustness, {1.0, 2.0});
    EXPECT_THROW(localize(za, zr, 1.0), InputError);
    zr = make_z(Behavior::robustness, {1.0, 2.0, 3.0});
    zr.units[1].id.layer = 2;
    EXPECT_THROW(localize(za, zr, 1.0), InputError);
}

TEST(Localize, RandomMapsDisjointCompleteAndAffineInvariant) {
    std::mt19937_64 rng(20240601);
    std::lognormal_distribution<double> value(0.0, 1.5);
    std::uniform_real_distribution<double> scale(0.01, 100.0);
    std::uniform_real_distribution<double> shift(-50.0, 50.0);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> ia(28), ir(28);
        for (double& v : ia) v = value(rng);
        for (double& v : ir) v = value(rng);
        const auto base = localize(zscores(make_dist(Behavior::adherence, ia)),
                                   zscores(make_dist(Behavior::robustness, ir)), 1.0);
        EXPECT_EQ(base.entangled.size() + base.adherence.size() + base.robustness.size() + base.other.size(), 28u);
        for (const auto& e : base.entries) {
            int hits = base.entangled.contains(e.id) + base.adherence.contains(e.id) + base.robustness.contains(e.id) +
                       base.other.contains(e.id);
            EXPECT_EQ(hits, 1);
        }
        const double c = scale(rng), b = shift(rng);
        std::vector<double> ta(ia), tr(ir);
        for (double& v : ta) v = c * v + b;
        for (double& v : tr) v = c * v + b;
        const auto moved = localize(zscores(make_dist(Behavior::adherence, ta)),
                                    zscores(make_dist(Behavior::robustness, tr)), 1.0);
        EXPECT_EQ(moved.entangled, base.entangled);
        EXPECT_EQ(moved.adherence, base.adherence);
        EXPECT_EQ(moved.robustness, base.robustness);
        EXPECT_EQ(moved.other, base.other);
    }
}

TEST(Localize, RaisingTauNeverGrowsEntangled) {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> n(0.0, 1.3);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> a(28), r(28);
        for (double& v : a) v = n(rng);
        for (double& v : r) v = n(rng);
        const auto za = make_z(Behavior::adherence, a);
        const auto zr = make_z(Behavior::robustness, r);
        std::size_t previous = localize(za, zr, -1.0).entangled.size();
        for (double tau = -0.5; tau <= 2.0; tau += 0.25) {
            const std::size_t now = localize(za, zr, tau).entangled.size();
            EXPECT_LE(now, previous);
            previous = now;
        }
    }
}

TEST(Gamma, Contract) {
    const auto sym = gamma_weights(1.3, 1.3);
    EXPECT_EQ(sym.adherence, 0.5);
    EXPECT_EQ(sym.robustness, 0.5);
    const auto gap = gamma_weights(2.0, 1.0);
    EXPECT_NEAR(gap.adherence, 0.73106, 1e-5);
    EXPECT_NEAR(gap.robustness, 0.26894, 1e-5);
    EXPECT_NEAR(gap.adherence, 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-30.0, 30.0);
    for (int i = 0; i < 1000; ++i) {
        const auto g = gamma_weights(u(rng), u(rng));
        EXPECT_NEAR(g.adherence + g.robustness, 1.0, 1e-12);
        EXPECT_GT(g.adherence, 0.0);
        EXPECT_GT(g.robustness, 0.0);
    }
    double last = 0.0;
    for (double a = -2.0; a <= 2.0; a += 0.5) {
        const double now = gamma_weights(a, 0.7).adherence;
        EXPECT_GT(now, last);
        last = now;
    }
}

TEST(Gamma, EntangledMeansDriveWeights) {
    const auto za = make_z(Behavior::adherence, {2.5, 1.5, 0.0, 0.0});
    const auto zr = make_z(Behavior::robustness, {1.5, 1.5, 0.0, 0.0});
    const auto p = localize(za, zr, 1.0);
    EXPECT_EQ(p.entangled.size(), 2u);
    EXPECT_NEAR(p.gamma.adherence, 1.0 / (1.0 + std::exp(-0.5)), 1e-15);
}

TEST(Gamma, EmptyEntangledFallsBackToEqualWeights) {
    const auto za = make_z(Behavior::adherence, {2.0, 0.0, 0.0});
    const auto zr = make_z(Behavior::robustness, {0.0, 2.0, 0.0});
    const auto p = localize(za, zr, 1.0);
    EXPECT_TRUE(p.entangled.empty());
    EXPECT_EQ(p.gamma.adherence, 0.5);
    EXPECT_EQ(p.gamma.robustness, 0.5);
}

TEST(PartitionFile, RoundTripRecordsTau) {
    const auto za = make_z(Behavior::adherence, {1.5, 1.5, 0.3, 0.5, 1.0, 1.0, 2.0, -0.25});
    const auto zr = make_z(Behavior::robustness, {1.2, 0.2, 1.4, 0.5, 1.5, 1.0, 1.0, 3.5});
    const auto p = localize(za, zr, 1.2);
    const auto path = std::filesystem::temp_directory_path() / "parenting_partition.tsv";
    write_partition(path, p);
    EXPECT_NE(read_text_file(path).find("# tau=1.2\n"), std::string::npos);
    const auto back = read_partition(path);
    EXPECT_EQ(back.tau, 1.2);
    EXPECT_EQ(back.gamma.adherence, p.gamma.adherence);
    EXPECT_EQ(back.gamma.robustness, p.gamma.robustness);
    EXPECT_EQ(back.entangled, p.entangled);
    EXPECT_EQ(back.adherence, p.adherence);
    EXPECT_EQ(back.robustness, p.robustness);
    EXPECT_EQ(back.other, p.other);
    ASSERT_EQ(back.entries.size(), p.entries.size());
    for (std::size_t i = 0; i < p.entries.size(); ++i) {
        EXPECT_EQ(back.entries[i].z_adherence, p.entries[i].z_adherence);
        EXPECT_EQ(back.entries[i].z_robustness, p.entries[i].z_robustness);
    }
    write_text_file(path, "# parenting partition v1\n# tau=1\n");
    EXPECT_THROW(read_partition(path), InputError);
}
