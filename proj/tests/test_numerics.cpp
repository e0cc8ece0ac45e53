#include "doctest.h"

#include "vox/checkpoint.h"
#include "vox/errors.h"
#include "vox/nn.h"
#include "vox/ops.h"
#include "vox/signal.h"

#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <numbers>

using namespace vox;

TEST_CASE("backward: sum of squares") {
    Tensor x = Tensor::from({1, 2}, true);
    backward(sum(square(x)));
    CHECK(x.grad()[0] == doctest::Approx(2));
    CHECK(x.grad()[1] == doctest::Approx(4));
}

TEST_CASE("backward: constant loss leaves zero gradients") {
    Tensor x = Tensor::from({1, 2, 3}, true);
    Tensor c = Tensor::scalar(5);
    backward(c);
    for (real g : x.grad()) CHECK(g == 0);
}

TEST_CASE("backward: non-scalar loss rejected") {
    Tensor x = Tensor::from({1, 2}, true);
    CHECK_THROWS_AS(backward(square(x)), std::invalid_argument);
}

TEST_CASE("backward releases the graph") {
    Tensor x = Tensor::from({3}, true);
    Tensor y = square(x);
    Tensor loss = sum(y);
    backward(loss);
    CHECK(y.node()->parents.empty());
    CHECK(!y.node()->backward_fn);
    CHECK(x.grad()[0] == doctest::Approx(6));
}

TEST_CASE("no-grad guard suppresses tape") {
    Tensor x = Tensor::from({1, 2}, true);
    NoGradGuard g;
    Tensor y = square(x);
    CHECK(!y.requires_grad());
}

TEST_CASE("tensor invariants") {
    CHECK_THROWS_AS(Tensor({2, 3}, std::vector<real>(5)), std::invalid_argument);
    Tensor t = Tensor::zeros({2, 3});
    CHECK(t.numel() == 6);
    CHECK(t.grad().size() == 6);
}

TEST_CASE("stft: zero and constant input") {
    Tensor zero = Tensor::zeros({1024});
    auto s = stft_magnitude(zero, 256);
    CHECK(s.hop == 64);
    CHECK(s.bins() == 129);
    CHECK(s.frames() == 1 + (1024 - 256) / 64);
    for (real v : s.magnitudes.data()) CHECK(v == 0);

    Tensor dc = Tensor::full({512}, real(0.5));
    auto d = stft_magnitude(dc, 128);
    for (size_t f = 0; f < d.frames(); ++f) {
        CHECK(d.magnitudes[f * d.bins()] > 1);
        // a periodic Hann window has exactly zero leakage beyond bin 1 for DC
        for (size_t k = 2; k < d.bins(); ++k) CHECK(std::abs(d.magnitudes[f * d.bins() + k]) < 1e-4);
    }
}

TEST_CASE("stft: bin-centred sine against the closed-form windowed DFT") {
    // A periodic Hann window maps a bin-centred sine to magnitudes N/4 at k0 and
    // N/8 at k0 +- 1, so the centre bin holds 2/3 of the frame energy and the
    // three-bin main lobe holds all of it.
    const size_t n = 256, k0 = 10;
    std::vector<real> w(n);
    for (size_t i = 0; i < n; ++i) w[i] = real(std::sin(2 * std::numbers::pi * double(k0 * i) / double(n)));
    auto s = stft_magnitude(Tensor({n}, w), n, n / 4);
    REQUIRE(s.frames() == 1);
    double total = 0;
    for (real m : s.magnitudes.data()) total += double(m) * m;
    auto e = [&](size_t k) { return double(s.magnitudes[k]) * s.magnitudes[k]; };
    CHECK(s.magnitudes[k0] == doctest::Approx(n / 4.0).epsilon(1e-4));
    CHECK(s.magnitudes[k0 + 1] == doctest::Approx(n / 8.0).epsilon(1e-4));
    CHECK(e(k0) / total == doctest::Approx(2.0 / 3.0).epsilon(1e-4));
    CHECK((e(k0 - 1) + e(k0) + e(k0 + 1)) / total > 0.999);
}

TEST_CASE("stft: short input gives one zero-padded frame") {
    Tensor w = Tensor::full({10}, 1);
    auto s = stft_magnitude(w, 64);
    CHECK(s.frames() == 1);
    CHECK(s.bins() == 33);
}

namespace {

// exhaustive enumeration of monotone paths
double brute_dtw(const Tensor & c, size_t i, size_t j) {
    const size_t m = c.dim(0), n = c.dim(1);
    const double here = c[i * n + j];
    if (i == m - 1 && j == n - 1) return here;
    double best = std::numeric_limits<double>::infinity();
    if (i + 1 < m) best = std::min(best, brute_dtw(c, i + 1, j));
    if (j + 1 < n) best = std::min(best, brute_dtw(c, i, j + 1));
    if (i + 1 < m && j + 1 < n) best = std::min(best, brute_dtw(c, i + 1, j + 1));
    return here + best;
}

}  // namespace

TEST_CASE("dtw: small examples") {
    Tensor c({2, 2}, {0, 1, 1, 0});
    auto p = dtw_path(c);
    REQUIRE(p.size() == 2);
    CHECK(p[0] == std::pair<size_t, size_t>{0, 0});
    CHECK(p[1] == std::pair<size_t, size_t>{1, 1});
    CHECK(path_cost(c, p) == 0);

    Tensor row({1, 5}, {1, 2, 3, 4, 5});
    auto pr = dtw_path(row);
    CHECK(pr.size() == 5);

    Tensor diag = Tensor::full({4, 4}, 1);
    for (size_t i = 0; i < 4; ++i) diag.mutable_data()[i * 4 + i] = 0;
    auto pd = dtw_path(diag);
    CHECK(pd.size() == 4);
    CHECK(path_cost(diag, pd) == 0);

    CHECK_THROWS(dtw_path(Tensor::zeros({0, 3})));
}

TEST_CASE("dtw: matches exhaustive search up to 6x6 and is monotone") {
    Rng rng(7);
    for (size_t m = 1; m <= 6; ++m) {
        for (size_t n = 1; n <= 6; ++n) {
            for (int rep = 0; rep < 3; ++rep) {
                Tensor c({m, n}, rng.uniform_vec(m * n, 0, 1));
                auto p = dtw_path(c);
                CHECK(p.front() == std::pair<size_t, size_t>{0, 0});
                CHECK(p.back() == std::pair<size_t, size_t>{m - 1, n - 1});
                for (size_t k = 1; k < p.size(); ++k) {
                    const size_t di = p[k].first - p[k - 1].first, dj = p[k].second - p[k - 1].second;
                    CHECK(di <= 1);
                    CHECK(dj <= 1);
                    CHECK(di + dj >= 1);
                }
                CHECK(path_cost(c, p) == doctest::Approx(brute_dtw(c, 0, 0)).epsilon(1e-6));
            }
        }
    }
}

TEST_CASE("median filter, interpolation, sinusoidal embedding") {
    auto m = median_filter_1d(Tensor::from({1, 9, 1}), 3);
    CHECK(m.to_vector() == std::vector<real>{1, 1, 1});
    CHECK_THROWS_AS(median_filter_1d(Tensor::from({1, 2, 3, 4}), 2), std::invalid_argument);

    auto li = linear_interp(Tensor::from({0, 1}), 3);
    CHECK(li.to_vector() == std::vector<real>{0, 0.5, 1});

    Rng rng(3);
    for (size_t n = 1; n < 40; n += 3) {
        Tensor x({n}, rng.normal_vec(n));
        CHECK(linear_interp(x, n).to_vector() == x.to_vector());
    }
    auto up = linear_interp(Tensor::from({2, 4, 8}), 7);
    CHECK(up[0] == 2);
    CHECK(up[6] == 8);
    CHECK(up[3] == 4);

    auto e = sinusoidal_embed(0, 8);
    for (size_t i = 0; i < 8; ++i) CHECK(e[i] == (i % 2 == 0 ? 0 : 1));
    CHECK_THROWS(sinusoidal_embed(0.5, 7));
}

TEST_CASE("checkpoint round trip and length validation") {
    Rng rng(11);
    Linear lin(3, 4, rng);
    ParamSet ps;
    lin.collect(ps, "lin.");
    auto dir = std::filesystem::temp_directory_path() / "vox_ckpt_test";
    std::filesystem::create_directories(dir);
    save_checkpoint(ps, dir / "model");

    Rng other(12);
    Linear lin2(3, 4, other);
    lin2.bias.mutable_data()[0] = 42;
    ParamSet ps2;
    lin2.collect(ps2, "lin.");
    load_checkpoint(ps2, dir / "model");
    CHECK(ps2.values_equal(ps));

    std::filesystem::resize_file(dir / "model.bin", 8);
    CHECK_THROWS_AS(load_checkpoint(ps2, dir / "model"), IoError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("adam reduces a quadratic") {
    Tensor w = Tensor::from({3, -2}, true);
    ParamSet ps;
    ps.add("w", w);
    Adam opt(ps, {.lr = real(0.1)});
    for (int i = 0; i < 200; ++i) {
        backward(sum(square(w)));
        opt.step();
    }
    CHECK(std::abs(w[0]) < 0.05);
    CHECK(std::abs(w[1]) < 0.05);
}

TEST_CASE("rng splits are deterministic and name-dependent") {
    Rng a(5), b(5);
    CHECK(a.split("x").uniform() == b.split("x").uniform());
    CHECK(a.split("x").uniform() != a.split("y").uniform());
}
