#include "doctest.h"

#include "vox/errors.h"
#include "vox/quantize.h"

#include <cmath>
#include <limits>
#include <sstream>

using namespace vox;

namespace {

// exhaustive oracles, written independently of the implementation
int oracle_fsq(real x, size_t levels) {
    const real y = std::tanh(x);
    int best = 0;
    real best_d = std::numeric_limits<real>::infinity();
    for (size_t k = 0; k < levels; ++k) {
        const real level = real(-1) + real(2 * k + 1) / real(levels);
        const real d = std::abs(y - level);
        if (d < best_d) {
            best_d = d;
            best = int(k);
        }
    }
    return best;
}

int oracle_vq(std::span<const real> z, const Tensor & book) {
    const size_t k = book.dim(0), d = book.dim(1);
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < k; ++i) {
        double s = 0;
        for (size_t j = 0; j < d; ++j) s += std::pow(double(z[j]) - book[i * d + j], 2);
        if (s < best_d) {
            best_d = s;
            best = int(i);
        }
    }
    return best;
}

}  // namespace

TEST_CASE("fsq: zero and saturated inputs") {
    auto r = fsq_quantize(Tensor::zeros({36}), 21);
    for (int i : r.indices) CHECK(i == 10);
    for (real v : r.values.data()) CHECK(v == 0);

    auto s = fsq_quantize(Tensor::full({36}, 10), 21);
    for (int i : s.indices) CHECK(i == 20);
    for (real v : s.values.data()) CHECK(v == doctest::Approx(20.0 / 21.0).epsilon(1e-6));
}

TEST_CASE("fsq: nearest centre matches exhaustive search") {
    Rng rng(1);
    for (int i = 0; i < 10000; ++i) {
        const real x = real(rng.normal() * 2);
        CHECK_EQ(fsq_quantize(Tensor::from({x}), 21).indices[0], oracle_fsq(x, 21));
    }
}

TEST_CASE("fsq: level geometry and index round trip") {
    for (size_t k = 0; k < 21; ++k) {
        const real v = fsq_level(k, 21);
        CHECK(v > -1);
        CHECK(v < 1);
        if (k > 0) CHECK(v - fsq_level(k - 1, 21) == doctest::Approx(2.0 / 21.0).epsilon(1e-6));
        CHECK(fsq_index(v, 21) == int(k));
    }
}

TEST_CASE("fsq: straight-through gradient reaches the input through tanh") {
    Tensor x = Tensor::from({0.3, -1.2, 2.0}, true);
    auto r = fsq_quantize(x, 21);
    backward(sum(r.values));
    for (size_t i = 0; i < 3; ++i) {
        const real t = std::tanh(x[i]);
        CHECK(x.grad()[i] == doctest::Approx(1 - t * t));
    }
}

TEST_CASE("fsq: training branches") {
    FSQConfig cfg;
    cfg.validate();
    Rng rng(99);
    size_t counts[3] = {0, 0, 0};
    const size_t draws = 100000;
    Tensor x = Tensor::from({0.4, -0.7, 1.5, 0.0});
    for (size_t i = 0; i < draws; ++i) {
        auto r = fsq_train_forward(x, cfg, rng);
        counts[int(r.mode)]++;
        if (i < 2000) {
            for (size_t j = 0; j < x.numel(); ++j) {
                const real t = std::tanh(x[j]);
                if (r.mode == FsqMode::Passthrough) CHECK(r.values[j] == t);
                if (r.mode == FsqMode::Dither) CHECK(std::abs(r.values[j] - t) <= real(1.0 / 21.0) + 1e-7);
                if (r.mode == FsqMode::Quantize) CHECK(r.values[j] == fsq_level(size_t(oracle_fsq(x[j], 21)), 21));
            }
        }
    }
    CHECK(std::abs(double(counts[0]) / draws - 0.5) < 0.01);
    CHECK(std::abs(double(counts[1]) / draws - 0.25) < 0.01);
    CHECK(std::abs(double(counts[2]) / draws - 0.25) < 0.01);

    FSQConfig bad;
    bad.p_dither = 0.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("vq: worked example, exact hit, ties") {
    VQCodebook book({}, Tensor({2, 2}, {0, 0, 1, 1}));
    auto r = vq_quantize(Tensor::from({0.9, 0.8}), book, false, nullptr);
    CHECK(r.indices[0] == 1);
    CHECK(r.commit.item() == doctest::Approx(0.05));

    auto hit = vq_quantize(Tensor::from({1, 1}), book, false, nullptr);
    CHECK(hit.commit.item() == 0);

    auto tie = vq_quantize(Tensor::from({0.5, 0.5}), book, false, nullptr);
    CHECK(tie.indices[0] == 0);

    CHECK_THROWS(vq_quantize(Tensor::from({1, 1, 1}), book, false, nullptr));
    CHECK_THROWS(VQCodebook({}, Tensor::zeros({0, 2})));
}

TEST_CASE("vq: nearest entry matches exhaustive search") {
    Rng rng(5);
    for (size_t k : {1u, 7u, 64u}) {
        VQConfig cfg{.codebook_size = k, .dim = 8};
        VQCodebook book(cfg, rng);
        for (int i = 0; i < 2000; ++i) {
            auto z = rng.normal_vec(8, 0.5);
            CHECK(book.nearest(z) == oracle_vq(z, book.entries));
        }
    }
}

TEST_CASE("vq: training skips quantization for about half the samples") {
    Rng rng(8);
    VQCodebook book({.codebook_size = 4, .dim = 3}, rng);
    Tensor z({2, 3}, rng.normal_vec(6));
    size_t applied = 0;
    for (int i = 0; i < 4000; ++i) {
        auto r = vq_quantize(z, book, true, &rng);
        if (r.applied) {
            ++applied;
        } else {
            CHECK(r.commit.item() == 0);
            CHECK(r.z_q.to_vector() == z.to_vector());
        }
    }
    CHECK(std::abs(double(applied) / 4000 - 0.5) < 0.03);
}

TEST_CASE("vq: straight-through gradient and commitment gradient") {
    VQCodebook book({}, Tensor({2, 2}, {0, 0, 1, 1}));
    Tensor z = Tensor::from({0.9, 0.8}, true);
    auto r = vq_quantize(z, book, false, nullptr);
    Tensor w = Tensor({1, 2}, {2, -3});
    backward(add(sum(mul(r.z_q, w)), r.commit));
    // d/dz [w.z_q] = w (straight-through); d/dz ||z - sg(q)||^2 = 2 (z - q)
    CHECK(z.grad()[0] == doctest::Approx(2 + 2 * (0.9 - 1)));
    CHECK(z.grad()[1] == doctest::Approx(-3 + 2 * (0.8 - 1)));
    CHECK(book.entries.grad()[0] == 0);
}

TEST_CASE("vq: EMA moves entries toward assigned latents and reseeds dead ones") {
    Rng rng(2);
    VQConfig cfg{.codebook_size = 2, .dim = 1, .ema_decay = 0.5, .dead_after = 3};
    VQCodebook book(cfg, Tensor({2, 1}, {0, 100}));
    Tensor z({2, 1}, {1, 1});
    std::vector<int> idx{0, 0};
    for (int i = 0; i < 3; ++i) vq_ema_update(book, z, idx, rng);
    CHECK(book.entries[0] > 0.5);
    CHECK(book.entries[1] == 1);  // reseeded from batch after 3 idle steps
}

TEST_CASE("bitrate") {
    CHECK(bitrate(12.5, 8192, 36, 21) == doctest::Approx(2139.0).epsilon(0.5 / 2139.0));
    CHECK(bitrate(1, 2, 0, 7) == 1.0);
    CHECK(bitrate(12.5, 2048, 7, 2048) == doctest::Approx(1100.0));
}

TEST_CASE("token frames: serialization and validation") {
    TokenLayout layout;
    Rng rng(4);
    std::vector<TokenFrame> frames;
    for (int i = 0; i < 20; ++i) {
        TokenFrame f{uint16_t(rng.uniform_int(8192)), {}};
        for (int a = 0; a < 36; ++a) f.acoustic.push_back(uint8_t(rng.uniform_int(21)));
        frames.push_back(f);
    }
    frames.push_back(layout.eoa());
    std::stringstream ss;
    write_token_frames(ss, frames, layout);
    CHECK(ss.str().size() == 20 * 38 + 2);
    CHECK(uint8_t(ss.str()[0]) == (frames[0].semantic & 0xff));
    CHECK(read_token_frames(ss, layout) == frames);

    TokenFrame bad{5, std::vector<uint8_t>(36, 21)};
    CHECK_THROWS_AS(layout.validate(bad), std::out_of_range);
    std::stringstream trunc(std::string("\x01\x00\x03", 3));
    CHECK_THROWS_AS(read_token_frames(trunc, layout), IoError);
}
