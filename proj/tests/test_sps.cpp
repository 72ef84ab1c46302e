#include <doctest.h>

#include <stdexcept>

#include <sstream>

#include "effseg/oracle.hpp"
#include "effseg/rng.hpp"
#include "effseg/scene.hpp"
#include "effseg/sparse_ops.hpp"
#include "effseg/sps.hpp"
#include "oracles.hpp"

using namespace effseg;
namespace oz = testing_oracles;

namespace {

// 3x3 grid, 4 active, 3 passive, passive ids 5 and 6 referenced twice;
// one-channel features valued by their own id.
SpsMap duplicated_passive_map() {
    SpsMap s;
    s.rois = 1;
    s.height = 3;
    s.width = 3;
    s.feat = 1;
    s.n_active = 4;
    s.n_passive = 3;
    s.active = {0.0f, 1.0f, 2.0f, 3.0f};
    s.passive = {4.0f, 5.0f, 6.0f};
    s.index = {0, 1, 5,
               2, 5, 6,
               3, 6, 4};
    return s;
}

} // namespace

TEST_CASE("build_from_dense ranks cells by score with flat-index tie-breaks") {
    DenseGrid dense(1, 1, 2, 2);
    dense.at(0, 0, 0, 0) = 10.0f;
    dense.at(0, 0, 0, 1) = 20.0f;
    dense.at(0, 0, 1, 0) = 30.0f;
    dense.at(0, 0, 1, 1) = 40.0f;
    const RefinementScores scores = {0.9f, 0.1f, 0.8f, 0.2f};

    const SpsMap sps = build_from_dense(dense, scores, 2);
    CHECK(!validate(sps));
    CHECK(sps.n_active == 2);
    CHECK(sps.n_passive == 2);
    CHECK(sps.index == std::vector<std::int32_t>{0, 2, 1, 3});
    CHECK(sps.active == std::vector<float>{10.0f, 30.0f}); // score order 0.9, 0.8
    CHECK(sps.passive == std::vector<float>{20.0f, 40.0f});

    SUBCASE("equal scores break ties by ascending flat index") {
        const SpsMap tied = build_from_dense(dense, {0.5f, 0.5f, 0.5f, 0.5f}, 2);
        CHECK(tied.index == std::vector<std::int32_t>{0, 1, 2, 3});
        CHECK(tied.active == std::vector<float>{10.0f, 20.0f});
    }
    SUBCASE("k at least the cell count makes everything active") {
        const SpsMap all = build_from_dense(dense, scores, 99);
        CHECK(all.n_active == 4);
        CHECK(all.n_passive == 0);
        CHECK(!validate(all));
        CHECK(to_dense(all).data() == dense.data());
    }
    SUBCASE("k = 0 makes everything passive") {
        const SpsMap none = build_from_dense(dense, scores, 0);
        CHECK(none.n_active == 0);
        CHECK(none.n_passive == 4);
        CHECK(!validate(none));
        CHECK(to_dense(none).data() == dense.data());
    }
    SUBCASE("score layout mismatch is rejected") {
        CHECK_THROWS_AS(build_from_dense(dense, {0.1f, 0.2f}, 2), std::invalid_argument);
    }
}

TEST_CASE("to_dense round-trips build_from_dense for every budget") {
    Rng rng(31);
    DenseGrid dense = oz::random_grid(rng, 3, 5, 4, 6);
    RefinementScores scores(3 * 4 * 6);
    for (float& s : scores) s = rng.uniform_f(0.0f, 1.0f);
    for (int k = 0; k <= 72; k += 7) {
        const SpsMap sps = build_from_dense(dense, scores, k);
        CHECK(!validate(sps));
        CHECK(to_dense(sps).data() == dense.data());
    }
}

TEST_CASE("duplicated passive references expand by copy in to_dense") {
    const SpsMap sps = duplicated_passive_map();
    CHECK(!validate(sps));
    const DenseGrid dense = to_dense(sps);
    const std::vector<float> expect = {0, 1, 5, 2, 5, 6, 3, 6, 4};
    CHECK(dense.data() == expect);
    // Storage bound is strict in the presence of duplicates.
    CHECK(sps.n_active + sps.n_passive < sps.cells());
}

TEST_CASE("gather_neighborhood pads out-of-grid cells and repeats shared rows") {
    const SpsMap sps = duplicated_passive_map();

    SUBCASE("single offset at an active cell returns that row") {
        const auto got = gather_neighborhood(sps, {0, 1, 0}, {{0, 0}});
        CHECK(got == std::vector<float>{2.0f});
    }
    SUBCASE("corner 3x3 has five padding entries") {
        const auto got = gather_neighborhood(sps, {0, 0, 0}, conv_offsets(1));
        int zeros = 0;
        for (float v : got)
            if (v == 0.0f) ++zeros;
        // Taps at (-1,*) and (*,-1) pad; the in-grid (0,0) value is also 0 by id.
        CHECK(zeros == 5 + 1);
        CHECK(got[4] == 0.0f);  // center = active id 0
        CHECK(got[5] == 1.0f);  // east neighbor
        CHECK(got[7] == 2.0f);  // south neighbor
        CHECK(got[8] == 5.0f);  // south-east neighbor
    }
    SUBCASE("a duplicated passive row appears once per referencing cell") {
        const auto got = gather_neighborhood(sps, {0, 0, 1}, conv_offsets(1));
        // Neighborhood rows: pad pad pad / 0 1 5 / 2 5 6 -> value 5 twice.
        int fives = 0;
        for (float v : got)
            if (v == 5.0f) ++fives;
        CHECK(fives == 2);
    }
    SUBCASE("out-of-grid cell itself is rejected") {
        CHECK_THROWS_AS(gather_neighborhood(sps, {0, 3, 0}, {{0, 0}}), std::invalid_argument);
    }
}

TEST_CASE("gather_bilinear agrees with dense sampling") {
    Rng rng(17);
    const SpsMap sps = random_sps_map(1234, 2, 8, 6, 5, 0.4);
    REQUIRE(!validate(sps));
    const DenseGrid dense = to_dense(sps);

    SUBCASE("active cell center returns the active feature") {
        const auto cells = active_positions(sps);
        for (int a = 0; a < sps.n_active; ++a) {
            const auto v = gather_bilinear(sps, cells[a].roi, cells[a].row + 0.5, cells[a].col + 0.5);
            for (int c = 0; c < sps.feat; ++c) CHECK(v[c] == sps.active_row(a)[c]);
        }
    }
    SUBCASE("random points match bilinear_sample of the dense grid") {
        for (int t = 0; t < 100; ++t) {
            const int roi = rng.uniform_int(0, 1);
            const double row = rng.uniform(-1.5, sps.height + 1.5);
            const double col = rng.uniform(-1.5, sps.width + 1.5);
            const auto got = gather_bilinear(sps, roi, row, col);
            const auto want = bilinear_sample(dense, roi, row, col);
            for (int c = 0; c < sps.feat; ++c) CHECK(oz::close(got[c], want[c]));
        }
    }
    SUBCASE("constant all-passive map is constant in-bounds") {
        DenseGrid flat(1, 2, 4, 4, 2.5f);
        const SpsMap allp = build_from_dense(flat, RefinementScores(16, 0.0f), 0);
        const auto v = gather_bilinear(allp, 0, 1.7, 2.9);
        CHECK(v[0] == doctest::Approx(2.5).epsilon(1e-6));
        CHECK(v[1] == doctest::Approx(2.5).epsilon(1e-6));
    }
}

TEST_CASE("upsample_split bookkeeping") {
    SUBCASE("one active + three passive parents") {
        DenseGrid dense(1, 1, 2, 2);
        dense.at(0, 0, 0, 0) = 7.0f;
        dense.at(0, 0, 0, 1) = 20.0f;
        dense.at(0, 0, 1, 0) = 30.0f;
        dense.at(0, 0, 1, 1) = 40.0f;
        const SpsMap parent = build_from_dense(dense, {0.9f, 0.2f, 0.3f, 0.4f}, 1);
        REQUIRE(parent.n_active == 1);

        std::array<MlpParams, 4> child;
        for (int c = 0; c < 4; ++c) {
            child[c] = MlpParams::identity(1);
            child[c].layers[0].bias[0] = static_cast<float>(c); // child c adds c
        }
        const SpsMap up = upsample_split(parent, child);
        CHECK(!validate(up));
        CHECK(up.height == 4);
        CHECK(up.width == 4);
        CHECK(up.n_active == 4);
        CHECK(up.n_passive == 3);
        CHECK(up.passive == parent.passive);

        // Children of the active parent (0,0): row-major child order.
        CHECK(to_dense(up).at(0, 0, 0, 0) == 7.0f);
        CHECK(to_dense(up).at(0, 0, 0, 1) == 8.0f);
        CHECK(to_dense(up).at(0, 0, 1, 0) == 9.0f);
        CHECK(to_dense(up).at(0, 0, 1, 1) == 10.0f);

        // Every passive id appears exactly four times.
        std::array<int, 3> refs{0, 0, 0};
        for (std::int32_t id : up.index)
            if (id >= up.n_active) ++refs[id - up.n_active];
        for (int r : refs) CHECK(r == 4);
        CHECK(up.n_active + up.n_passive < up.cells()); // strict storage bound
    }
    SUBCASE("no active cells degenerates to an index-map upsample") {
        Rng rng(8);
        DenseGrid dense = oz::random_grid(rng, 2, 3, 3, 5);
        const SpsMap parent = build_from_dense(dense, RefinementScores(30, 0.5f), 0);
        std::array<MlpParams, 4> child;
        for (int c = 0; c < 4; ++c) child[c] = oz::random_mlp2(rng, 3, 3, 3);
        const SpsMap up = upsample_split(parent, child);
        CHECK(!validate(up));
        CHECK(up.n_active == 0);
        CHECK(to_dense(up).data() == oracle::nn_upsample2(dense).data());
    }
    SUBCASE("identity children equal nearest-neighbor upsampling") {
        const SpsMap sps = random_sps_map(55, 2, 6, 6, 4, 0.3);
        std::array<MlpParams, 4> child;
        for (int c = 0; c < 4; ++c) child[c] = MlpParams::identity2(4);
        const SpsMap up = upsample_split(sps, child);
        CHECK(!validate(up));
        CHECK(to_dense(up).data() == oracle::nn_upsample2(to_dense(sps)).data());
    }
    SUBCASE("wrong child dims are rejected") {
        const SpsMap sps = random_sps_map(56, 1, 4, 4, 4, 0.5);
        std::array<MlpParams, 4> child;
        for (int c = 0; c < 4; ++c) child[c] = MlpParams::identity(3);
        CHECK_THROWS_AS(upsample_split(sps, child), std::invalid_argument);
    }
}

TEST_CASE("update_partition promotes shared passive rows per selected cell") {
    // 2x2 grid; passive id 1 backs two cells; exactly one of them is selected.
    SpsMap sps;
    sps.rois = 1;
    sps.height = 2;
    sps.width = 2;
    sps.feat = 1;
    sps.n_active = 1;
    sps.n_passive = 2;
    sps.active = {10.0f};
    sps.passive = {20.0f, 30.0f};
    sps.index = {0, 1, 1, 2};
    REQUIRE(!validate(sps));

    const SpsMap next = update_partition(sps, {0.1f, 0.9f, 0.5f, 0.2f}, 1);
    CHECK(!validate(next));
    CHECK(next.n_active == 1);
    CHECK(next.active == std::vector<float>{20.0f}); // the shared row, copied
    CHECK(next.idx(0, 0, 1) == 0);
    // The unselected duplicate cell keeps a passive copy with the same value.
    const std::int32_t dup = next.idx(0, 1, 0);
    CHECK(dup >= next.n_active);
    CHECK(next.passive_row(dup - next.n_active)[0] == 20.0f);
    CHECK(to_dense(next).data() == to_dense(sps).data());

    SUBCASE("same scores and budget keep the partition, up to relabeling") {
        const SpsMap again = update_partition(next, {0.1f, 0.9f, 0.5f, 0.2f}, 1);
        CHECK(again.n_active == next.n_active);
        CHECK(to_dense(again).data() == to_dense(next).data());
    }
    SUBCASE("budget zero demotes everything") {
        const SpsMap none = update_partition(sps, {0.1f, 0.9f, 0.5f, 0.2f}, 0);
        CHECK(none.n_active == 0);
        CHECK(!validate(none));
        CHECK(to_dense(none).data() == to_dense(sps).data());
    }
}

TEST_CASE("scatter_update replaces the active matrix and nothing else") {
    const SpsMap sps = random_sps_map(77, 2, 6, 8, 4, 0.35);
    SUBCASE("scattering the existing matrix is the identity") {
        const SpsMap same = scatter_update(sps, sps.active);
        CHECK(same.active == sps.active);
        CHECK(same.passive == sps.passive);
        CHECK(same.index == sps.index);
    }
    SUBCASE("scattering zeros blanks exactly the active cells") {
        const DenseGrid before = to_dense(sps);
        const SpsMap zeroed = scatter_update(
            sps, std::vector<float>(static_cast<std::size_t>(sps.n_active) * sps.feat, 0.0f));
        const DenseGrid after = to_dense(zeroed);
        for (int r = 0; r < sps.rois; ++r)
            for (int i = 0; i < sps.height; ++i)
                for (int j = 0; j < sps.width; ++j) {
                    const bool active = sps.idx(r, i, j) < sps.n_active;
                    for (int c = 0; c < sps.feat; ++c) {
                        if (active)
                            CHECK(after.at(r, c, i, j) == 0.0f);
                        else
                            CHECK(after.at(r, c, i, j) == before.at(r, c, i, j));
                    }
                }
    }
    SUBCASE("row-count mismatch is rejected") {
        CHECK_THROWS_AS(scatter_update(sps, std::vector<float>(3, 0.0f)), std::invalid_argument);
    }
}

TEST_CASE("validator names each violated invariant") {
    SpsMap good = duplicated_passive_map();
    REQUIRE(!validate(good));

    SUBCASE("index out of range") {
        SpsMap bad = good;
        bad.index[0] = 7;
        const auto err = validate(bad);
        REQUIRE(err);
        CHECK(err->find("outside") != std::string::npos);
    }
    SUBCASE("duplicate active reference") {
        SpsMap bad = good;
        bad.index[1] = 0; // active id 0 twice, id 1 orphaned
        const auto err = validate(bad);
        REQUIRE(err);
        CHECK(err->find("active index 0") != std::string::npos);
    }
    SUBCASE("orphan passive row") {
        SpsMap bad = good;
        bad.index[8] = 5; // id 6 (passive row 2) loses its only reference... id 4 at (2,2)
        // replaced by 5; passive row 0 (id 4) is now orphaned
        const auto err = validate(bad);
        REQUIRE(err);
        CHECK(err->find("orphan passive") != std::string::npos);
    }
    SUBCASE("non-finite feature") {
        SpsMap bad = good;
        bad.active[2] = std::numeric_limits<float>::quiet_NaN();
        const auto err = validate(bad);
        REQUIRE(err);
        CHECK(err->find("non-finite") != std::string::npos);
    }
    SUBCASE("storage mismatch") {
        SpsMap bad = good;
        bad.n_passive = 4; // claims a row that has no storage
        CHECK(validate(bad));
    }
}

TEST_CASE("debug serialization round-trips") {
    const SpsMap sps = random_sps_map(2024, 2, 6, 4, 3, 0.4);
    std::stringstream ss;
    dump_sps(sps, ss);
    const SpsMap back = parse_sps(ss);
    CHECK(back.rois == sps.rois);
    CHECK(back.height == sps.height);
    CHECK(back.width == sps.width);
    CHECK(back.feat == sps.feat);
    CHECK(back.index == sps.index);
    CHECK(back.active == sps.active);
    CHECK(back.passive == sps.passive);

    SUBCASE("identical maps serialize identically") {
        std::stringstream a, b;
        dump_sps(sps, a);
        dump_sps(random_sps_map(2024, 2, 6, 4, 3, 0.4), b);
        CHECK(a.str() == b.str());
    }
    SUBCASE("truncated input is rejected") {
        std::stringstream trunc(ss.str().substr(0, 40));
        CHECK_THROWS_AS(parse_sps(trunc), std::invalid_argument);
    }
}
