#include "storyplug/extraction.hpp"

#include "test_support.hpp"

#include <doctest.h>

#include <algorithm>
#include <cstring>

using namespace storyplug;

namespace {

BackendDescriptor with_L(int L) {
    auto d = toy_descriptor();
    d.L = L;
    return d;
}

bool bitwise(const Matrix& a, const Matrix& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<size_t>(a.size())) == 0;
}

}  // namespace

TEST_CASE("token matrix layout for L = 6") {
    const auto d = with_L(6);
    const auto tm = build_token_matrix(d, "girl");
    const int bt = d.token_ids.bos, et = d.token_ids.eos, pt = d.token_ids.pad;
    const int ct = piece_token_id(d, "girl");
    CHECK(tm.rows == 4);
    CHECK(tm.cols == 6);
    auto row = [&](int q) { return std::vector<int>(tm.row(q).begin(), tm.row(q).end()); };
    CHECK(row(0) == std::vector<int>{bt, ct, et, pt, pt, pt});
    CHECK(row(1) == std::vector<int>{pt, bt, ct, et, pt, pt});
    CHECK(row(3) == std::vector<int>{pt, pt, pt, bt, ct, et});
}

TEST_CASE("token matrix invariants for several L") {
    for (int L : {4, 6, 16, 77}) {
        const auto d = L == 77 ? sd21_descriptor() : with_L(L);
        const auto tm = build_token_matrix(d, "girl");
        const int ct = piece_token_id(d, "girl");
        CHECK(tm.rows == L - 2);
        for (int q = 0; q < tm.rows; ++q) {
            auto ids = std::vector<int>(tm.row(q).begin(), tm.row(q).end());
            CHECK(ids[static_cast<size_t>(q)] == d.token_ids.bos);
            CHECK(ids[static_cast<size_t>(q + 1)] == ct);
            CHECK(ids[static_cast<size_t>(q + 2)] == d.token_ids.eos);
            CHECK(std::count(ids.begin(), ids.end(), d.token_ids.pad) == L - 3);
            CHECK(std::count(ids.begin(), ids.end(), ct) == 1);
            CHECK(tm.character_column(q) == q + 1);
        }
    }
    CHECK(build_token_matrix(with_L(4), "dog").rows == 2);
}

TEST_CASE("multi-token class noun is rejected") {
    try {
        build_token_matrix(toy_descriptor(), "teddy-bear");
        FAIL("expected MultiTokenNoun");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::MultiTokenNoun);
    }
}

TEST_CASE("encode_token_matrix equals a loop of single encodes") {
    const ToyBackend backend;
    const auto tm = build_token_matrix(backend.descriptor(), "girl");
    for (std::uint64_t seed : {11u, 12u, 13u}) {
        const auto enc = backend.random_encoder(seed);
        const auto em = encode_token_matrix(backend, enc, tm);
        REQUIRE(em.Q() == tm.rows);
        for (int q = 0; q < tm.rows; ++q) {
            CHECK(bitwise(em.rows[static_cast<size_t>(q)], backend.encode_tokens(enc, tm.row(q))));
        }
        const auto threaded = encode_token_matrix(backend, enc, tm, 4);
        for (int q = 0; q < tm.rows; ++q) CHECK(bitwise(threaded.rows[static_cast<size_t>(q)], em.rows[static_cast<size_t>(q)]));
    }
}

TEST_CASE("synthetic diagonal probe") {
    const int L = 6, H = 3;
    EmbeddingMatrix em;
    for (int q = 0; q < L - 2; ++q) {
        Matrix m(L, H);
        for (int l = 0; l < L; ++l) m.row(l).setConstant(100.0 * q + l);
        em.rows.push_back(m);
        em.character_columns.push_back(q + 1);
    }
    const auto p = extract_plugin(em, {"probe", "girl", "toy-v1", 0});
    REQUIRE(p.rows.rows() == 4);
    REQUIRE(p.rows.cols() == H);
    for (int r = 0; r < 4; ++r)
        for (int h = 0; h < H; ++h) CHECK(p.rows(r, h) == static_cast<float>(100 * r + r + 1));
}

TEST_CASE("plugin equals the per-position single-sequence oracle") {
    const ToyBackend backend;
    const auto& d = backend.descriptor();
    const int ct = piece_token_id(d, "girl");
    for (std::uint64_t seed : {21u, 22u, 23u}) {
        const auto enc = backend.random_encoder(seed);
        const auto plugin = create_plugin(backend, enc, "girl", "alice");
        REQUIRE(plugin.rows.rows() == d.L - 2);
        REQUIRE(plugin.rows.cols() == d.H);
        CHECK(plugin.descriptor_id == d.backend_id);
        for (int p = 1; p <= d.L - 2; ++p) {
            std::vector<int> seq(static_cast<size_t>(d.L), d.token_ids.pad);
            seq[static_cast<size_t>(p - 1)] = d.token_ids.bos;
            seq[static_cast<size_t>(p)] = ct;
            seq[static_cast<size_t>(p + 1)] = d.token_ids.eos;
            const Eigen::RowVectorXf expect = backend.encode_tokens(enc, seq).row(p).cast<float>();
            const Eigen::RowVectorXf got = plugin.rows.row(p - 1);
            CHECK(std::memcmp(expect.data(), got.data(), sizeof(float) * static_cast<size_t>(d.H)) == 0);
        }
    }
}
