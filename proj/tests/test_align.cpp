#include "doctest.h"

#include "vox/align.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>

using namespace vox;

namespace {

// plain DP oracle for the warping path, preferring diagonal, then up, then left on ties
std::vector<std::pair<size_t, size_t>> oracle_dtw(const std::vector<double> & c, size_t m, size_t n) {
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> acc(m * n, inf);
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) {
            double best = (i == 0 && j == 0) ? 0 : inf;
            if (i > 0 && j > 0) best = std::min(best, acc[(i - 1) * n + j - 1]);
            if (i > 0) best = std::min(best, acc[(i - 1) * n + j]);
            if (j > 0) best = std::min(best, acc[i * n + j - 1]);
            acc[i * n + j] = c[i * n + j] + best;
        }
    std::vector<std::pair<size_t, size_t>> path{{m - 1, n - 1}};
    size_t i = m - 1, j = n - 1;
    while (i > 0 || j > 0) {
        double d = (i > 0 && j > 0) ? acc[(i - 1) * n + j - 1] : inf;
        double u = i > 0 ? acc[(i - 1) * n + j] : inf;
        double l = j > 0 ? acc[i * n + j - 1] : inf;
        if (d <= u && d <= l) {
            --i;
            --j;
        } else if (u <= l) {
            --i;
        } else {
            --j;
        }
        path.emplace_back(i, j);
    }
    std::reverse(path.begin(), path.end());
    return path;
}

double oracle_deviation(const AttentionBundle & b, size_t h) {
    const size_t l = b.tokens(), f = b.encoder_frames();
    std::vector<double> cost(l * f);
    for (size_t i = 0; i < l * f; ++i) cost[i] = 1.0 - b.attn[h * l * f + i];
    auto path = oracle_dtw(cost, l, f);
    double dev = 0;
    for (const auto & ts : b.timestamps) {
        double s = 0, n = 0;
        for (auto [t, fr] : path)
            if (t == ts.token) {
                s += double(fr);
                n += 1;
            }
        dev += std::abs((s / n + 0.5) / b.encoder_rate_hz - 0.5 * (ts.start + ts.end));
    }
    return dev / double(b.timestamps.size());
}

// L tokens, each owning `span` encoder frames, linear timestamps
AttentionBundle diagonal_bundle(size_t l, size_t span, size_t heads) {
    AttentionBundle b;
    const size_t f = l * span;
    std::vector<real> a(heads * l * f, 0);
    for (size_t t = 0; t < l; ++t)
        for (size_t s = 0; s < span; ++s) a[t * f + t * span + s] = 1;
    for (size_t h = 1; h < heads; ++h)
        for (size_t i = 0; i < l * f; ++i) a[h * l * f + i] = real(1.0 / double(l));
    b.attn = Tensor({heads, l, f}, a);
    b.hidden = Tensor::zeros({l, 4});
    for (size_t t = 0; t < l; ++t) b.timestamps.push_back({t, double(t * span) / 50.0, double((t + 1) * span) / 50.0});
    return b;
}

}  // namespace

TEST_CASE("select_heads: diagonal head ranks above uniform head") {
    auto b = diagonal_bundle(5, 4, 2);
    auto scores = score_heads(b);
    CHECK(scores[0].head == 0);
    CHECK(scores[0].deviation == doctest::Approx(0).epsilon(1e-9));
    CHECK(scores[1].head == 1);
    CHECK(scores[1].deviation == doctest::Approx(oracle_deviation(b, 1)).epsilon(1e-9));
    CHECK(scores[1].deviation > 0);
    CHECK(select_heads(b, 1) == std::vector<size_t>{0});
}

TEST_CASE("select_heads: deviations match the DP oracle and top_k = heads is a permutation") {
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        auto b = synthetic_bundle({.heads = 5, .tokens = 6, .encoder_frames = 40, .good_heads = {2, 4}}, rng);
        auto scores = score_heads(b);
        for (const auto & s : scores) CHECK(s.deviation == doctest::Approx(oracle_deviation(b, s.head)).epsilon(1e-6));
        for (size_t i = 1; i < scores.size(); ++i) CHECK(scores[i - 1].deviation <= scores[i].deviation);
        auto all = select_heads(b, 5);
        std::vector<size_t> sorted = all;
        std::sort(sorted.begin(), sorted.end());
        CHECK(sorted == std::vector<size_t>{0, 1, 2, 3, 4});
        auto top = select_heads(b, 2);
        std::sort(top.begin(), top.end());
        CHECK(top == std::vector<size_t>{2, 4});
    }
}

TEST_CASE("select_heads: permutation equivariance") {
    Rng rng(11);
    auto b = synthetic_bundle({.heads = 4, .tokens = 5, .encoder_frames = 30, .good_heads = {1}}, rng);
    const std::vector<size_t> perm{2, 0, 3, 1};  // new head i is old head perm[i]
    AttentionBundle p = b;
    const size_t blk = b.tokens() * b.encoder_frames();
    std::vector<real> a(b.attn.numel());
    for (size_t i = 0; i < 4; ++i)
        std::copy_n(b.attn.data().begin() + long(perm[i] * blk), blk, a.begin() + long(i * blk));
    p.attn = Tensor(b.attn.shape(), a);
    auto sb = score_heads(b), sp = score_heads(p);
    for (size_t i = 0; i < 4; ++i) {
        CHECK(perm[sp[i].head] == sb[i].head);
        CHECK(sp[i].deviation == sb[i].deviation);
    }
}

TEST_CASE("select_heads: missing timestamps is an error") {
    auto b = diagonal_bundle(3, 2, 1);
    b.timestamps.clear();
    CHECK_THROWS_WITH_AS(select_heads(b, 1), doctest::Contains("explicit head list"), std::invalid_argument);
}

TEST_CASE("build_alignment: identity attention gives identity alignment") {
    auto b = diagonal_bundle(6, 1, 1);
    Tensor a = build_alignment(b, {0}, 6, {.median_width = 1});
    for (size_t i = 0; i < 6; ++i)
        for (size_t j = 0; j < 6; ++j) CHECK(a[i * 6 + j] == doctest::Approx(i == j ? 1.0 : 0.0));

    // a banded version keeps its (plateaued) maximum on the diagonal under the width-7 filter
    auto band = diagonal_bundle(12, 1, 1);
    std::vector<real> v(144);
    for (size_t i = 0; i < 12; ++i)
        for (size_t j = 0; j < 12; ++j) v[i * 12 + j] = real(std::exp(-0.7 * std::abs(double(i) - double(j))));
    band.attn = Tensor({1, 12, 12}, v);
    Tensor ab = build_alignment(band, {0}, 12);
    for (size_t i = 0; i < 12; ++i) {
        auto row = ab.data().subspan(i * 12, 12);
        CHECK(row[i] == doctest::Approx(*std::max_element(row.begin(), row.end())));
    }
}

TEST_CASE("build_alignment: same frame count equals filtered, averaged, renormalised attention") {
    Rng rng(21);
    auto b = synthetic_bundle({.heads = 3, .tokens = 4, .encoder_frames = 25}, rng);
    const size_t l = 4, f = 25;
    std::vector<size_t> heads{0, 2};
    std::vector<double> avg(l * f, 0);
    for (size_t h : heads) {
        std::vector<double> a(l * f);
        for (size_t i = 0; i < l * f; ++i) a[i] = b.attn[h * l * f + i];
        for (size_t c = 0; c < f; ++c) {
            double s = 0;
            for (size_t t = 0; t < l; ++t) s += a[t * f + c];
            for (size_t t = 0; t < l; ++t) a[t * f + c] /= s;
        }
        for (size_t t = 0; t < l; ++t)
            for (size_t c = 0; c < f; ++c) {
                std::vector<double> w;
                for (int k = -3; k <= 3; ++k) w.push_back(a[t * f + size_t(std::clamp(int(c) + k, 0, int(f) - 1))]);
                std::sort(w.begin(), w.end());
                avg[t * f + c] += w[3] / 2;
            }
    }
    Tensor got = build_alignment(b, heads, f);
    for (size_t t = 0; t < l; ++t) {
        double s = 0;
        for (size_t c = 0; c < f; ++c) s += avg[t * f + c];
        for (size_t c = 0; c < f; ++c) CHECK(got[t * f + c] == doctest::Approx(avg[t * f + c] / s).epsilon(1e-5));
    }
}

TEST_CASE("build_alignment: rows are probability vectors after interpolation") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const size_t fe = 20 + rng.uniform_int(40);
        auto b = synthetic_bundle({.heads = 3, .tokens = 1 + rng.uniform_int(8), .encoder_frames = fe}, rng);
        for (size_t target : {fe / 2, size_t(1), fe, fe * 3}) {
            Tensor a = build_alignment(b, {0, 1}, target);
            for (size_t t = 0; t < b.tokens(); ++t) {
                double s = 0;
                for (size_t c = 0; c < target; ++c) {
                    CHECK(a[t * target + c] >= 0);
                    s += a[t * target + c];
                }
                CHECK(std::abs(s - 1) < 1e-5);
            }
        }
    }
}

TEST_CASE("build_alignment: all-zero attention becomes uniform") {
    AttentionBundle b;
    b.attn = Tensor::zeros({1, 3, 10});
    Tensor a = build_alignment(b, {0}, 5);
    for (real v : a.data()) CHECK(v == doctest::Approx(0.2));
    CHECK_THROWS(build_alignment(b, {}, 5));
    CHECK_THROWS(build_alignment(b, {0}, 0));
}

TEST_CASE("asr_distill_loss: cosine extremes and range") {
    Rng rng(1);
    Linear proj(3, 3, rng, false);
    proj.weight = Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor h({2, 3}, {1, 2, 3, -1, 0.5, 2});
    CHECK(asr_distill_loss(h, eye, h, proj).item() == doctest::Approx(0).epsilon(1e-6));
    CHECK(asr_distill_loss(neg(h), eye, h, proj).item() == doctest::Approx(2));
    Tensor orth({2, 3}, {2, -1, 0, 2, 4, 0});
    CHECK(asr_distill_loss(orth, eye, h, proj).item() == doctest::Approx(1));
    CHECK(asr_distill_loss(Tensor::zeros({2, 3}), eye, h, proj).item() == doctest::Approx(1));

    for (int i = 0; i < 50; ++i) {
        Linear p(4, 5, rng);
        Tensor z({7, 4}, rng.normal_vec(28));
        Tensor a({3, 7}, rng.uniform_vec(21, 0, 1));
        Tensor hh({3, 5}, rng.normal_vec(15));
        const real v = asr_distill_loss(z, a, hh, p).item();
        CHECK(v >= -1e-6);
        CHECK(v <= 2 + 1e-6);
    }
    CHECK_THROWS(asr_distill_loss(Tensor::zeros({2, 4}), eye, h, proj));
    CHECK_THROWS(asr_distill_loss(h, Tensor::zeros({2, 3}), h, proj));
}

TEST_CASE("attention bundle: file round trip") {
    Rng rng(9);
    auto b = synthetic_bundle({}, rng);
    auto stem = std::filesystem::temp_directory_path() / "vox_bundle_test";
    save_bundle(b, stem);
    auto c = load_bundle(stem);
    CHECK(c.attn.to_vector() == b.attn.to_vector());
    CHECK(c.hidden.to_vector() == b.hidden.to_vector());
    REQUIRE(c.timestamps.size() == b.timestamps.size());
    for (size_t i = 0; i < b.timestamps.size(); ++i) {
        CHECK(c.timestamps[i].token == b.timestamps[i].token);
        CHECK(c.timestamps[i].start == doctest::Approx(b.timestamps[i].start));
    }
    CHECK(select_heads(c, 1) == select_heads(b, 1));
}
