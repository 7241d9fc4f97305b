#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <vector>

#include "plansmooth/builders.hpp"
#include "plansmooth/kernel.hpp"
#include "plansmooth/measures.hpp"
#include "plansmooth/rng.hpp"
#include "plansmooth/sobolev.hpp"

using namespace plansmooth;

TEST_CASE("kernel normalization and peak value", "[kernel]") {
    const KernelSpec k{0.1, 1};
    CHECK(std::abs(eta1(0.0, 0.1) - 1.0 / std::sqrt(0.2 * std::numbers::pi)) <= 1e-15);
    const AxisGrid g = make_axis_grid(-12.0 * std::sqrt(0.1), 12.0 * std::sqrt(0.1), 4096);
    double m = 0.0;
    for (std::size_t i = 0; i < g.count; ++i) m += eta1(g.node(i), 0.1) * g.spacing;
    CHECK(std::abs(m - 1.0) <= 1e-10);
    const double z2[2] = {0.3, -0.4};
    const KernelSpec k2{0.1, 2};
    CHECK(std::abs(eta(z2, k2) - eta1(0.3, 0.1) * eta1(-0.4, 0.1)) <= 1e-15);
    (void)k;
}

TEST_CASE("kernel gradient matches finite differences", "[kernel]") {
    const KernelSpec k{0.05, 2};
    const double z[2] = {0.21, -0.13};
    double g[2];
    grad_eta(z, k, g);
    const double h = 1e-6;
    for (int i = 0; i < 2; ++i) {
        double zp[2] = {z[0], z[1]}, zm[2] = {z[0], z[1]};
        zp[i] += h;
        zm[i] -= h;
        const double fd = (eta(zp, k) - eta(zm, k)) / (2.0 * h);
        CHECK(std::abs(g[i] - fd) <= 1e-5 * std::abs(fd));
    }
}

TEST_CASE("tail constant equals 2^{d/2}", "[kernel]") {
    CHECK(std::abs(tail_constant(1) - std::numbers::sqrt2) <= 1e-12);
    CHECK(std::abs(tail_constant(2) - 2.0) <= 1e-12);
    CHECK(std::abs(tail_constant(3) - 2.0 * std::numbers::sqrt2) <= 1e-12);
}

TEST_CASE("measured tails match the closed forms and respect the bound", "[kernel]") {
    for (double eps : {0.025, 0.1, 0.4}) {
        for (double tau : {0.1, 0.5, 1.0}) {
            const TailEstimate t1 = tail_mass(tau, KernelSpec{eps, 1});
            const double exact1 = std::erfc(tau / std::sqrt(2.0 * eps));
            CHECK(std::abs(t1.measured - exact1) <= 1e-10);
            CHECK(t1.measured <= t1.bound);

            const TailEstimate t2 = tail_mass(tau, KernelSpec{eps, 2});
            CHECK(std::abs(t2.measured - std::exp(-0.5 * tau * tau / eps)) <= 1e-10);
            CHECK(t2.measured <= t2.bound);

            const TailEstimate t3 = tail_mass(tau, KernelSpec{eps, 3});
            const double x = tau / std::sqrt(eps);
            const double exact3 = std::erfc(x / std::numbers::sqrt2) +
                                  x * std::sqrt(2.0 / std::numbers::pi) * std::exp(-0.5 * x * x);
            CHECK(std::abs(t3.measured - exact3) <= 1e-10);
            CHECK(t3.measured <= t3.bound);
        }
    }
    CHECK(std::abs(tail_mass(0.0, KernelSpec{0.1, 1}).measured - 1.0) <= 1e-10);
}

TEST_CASE("squared-gradient kernel integral equals d over eps", "[kernel]") {
    for (int d : {1, 2, 3})
        for (double eps : {0.01, 0.1, 1.0}) {
            const KernelConstants c = kernel_constants(KernelSpec{eps, d}, 2.0);
            CHECK(std::abs(c.c_d_over_eps * eps - d) <= 1e-6 * d);
        }
}

TEST_CASE("p-gradient kernel integral and derived constants", "[kernel]") {
    const double mp[3] = {
        std::pow(2.0, 0.75) * std::tgamma(1.25) / std::sqrt(std::numbers::pi),  // p = 1.5
        1.0,                                                                    // p = 2
        std::pow(2.0, 1.5) * std::tgamma(2.0) / std::sqrt(std::numbers::pi),    // p = 3
    };
    const double ps[3] = {1.5, 2.0, 3.0};
    for (int ip = 0; ip < 3; ++ip) {
        const double p = ps[ip];
        for (int d : {1, 2}) {
            const KernelConstants ca = kernel_constants(KernelSpec{0.1, d}, p);
            const double expect = d * mp[ip] * std::pow(0.1, -0.5 * p);
            CHECK(std::abs(ca.C_d_p_eps - expect) <= 1e-6 * expect);
            // c(d, p) does not depend on eps.
            const KernelConstants cb = kernel_constants(KernelSpec{0.025, d}, p);
            CHECK(std::abs(ca.c_d_p - cb.c_d_p) <= 1e-10 * ca.c_d_p);
            CHECK(std::abs(ca.c_d_p - std::pow(d * mp[ip], 1.0 / p) / p) <= 1e-8);
            CHECK(std::abs(ca.clarkson_c_p - std::pow(2.0, (p - 1.0) / p)) <= 1e-15);
        }
    }
    // At p = 2, d = 1 the schedule constant collapses to 1/2.
    CHECK(std::abs(kernel_constants(KernelSpec{0.2, 1}, 2.0).c_d_p - 0.5) <= 1e-9);
}

TEST_CASE("Gaussian convolution has the exact closed form", "[kernel]") {
    const AxisGrid axis = make_axis_grid(-8.0, 8.0, 256);
    const DensityField rho = gaussian_density(axis, 0.0, 1.0);
    const DensityField conv = convolve(rho, KernelSpec{0.1, 1});
    const DensityField expect = gaussian_density(axis, 0.0, std::sqrt(1.1));
    CHECK(sup_distance(conv, expect) <= 1e-13);
    CHECK(std::abs(mass(conv) - mass(rho)) <= 1e-8);
    for (double v : conv.values) CHECK(v > 0.0);
}

TEST_CASE("convolution is a semigroup in eps", "[kernel]") {
    const AxisGrid axis = make_axis_grid(-8.0, 8.0, 256);
    const DensityField rho = gaussian_density(axis, 0.5, 1.0);
    const DensityField two_step = convolve(convolve(rho, KernelSpec{0.05, 1}), KernelSpec{0.05, 1});
    const DensityField one_step = convolve(rho, KernelSpec{0.1, 1});
    CHECK(sup_distance(two_step, one_step) <= 2e-6);
}

TEST_CASE("mollification never raises the energy", "[kernel]") {
    const AxisGrid axis = make_axis_grid(-8.0, 8.0, 256);
    const DensityField rho = gaussian_density(axis, 0.0, 1.0);
    const SobolevConfig cfg{2.0, 1e-12};
    const double e0 = energy(rho, cfg);
    for (double eps : {0.4, 0.2, 0.1, 0.05, 0.025}) {
        const double ec = energy(convolve(rho, KernelSpec{eps, 1}), cfg);
        CHECK(ec <= e0 + 1e-8);
        CHECK(std::abs(ec - 0.25 / (1.0 + eps)) <= 1e-4 * 0.25 / (1.0 + eps));
    }
}

TEST_CASE("convolution onto an extended axis keeps all kernel mass", "[kernel]") {
    const AxisGrid axis = make_axis_grid(0.0, 1.0, 64);
    const DensityField u = uniform_density(axis, 0.0, 1.0);
    const KernelSpec k{0.04, 1};
    // On the tight box the smoothed mass leaks out; on the extended axis the
    // midpoint mass is preserved to quadrature precision.
    const AxisGrid wide = extend_axis(axis, 128);  // 2 units of margin
    const DensityField on_wide = convolve_to(u, k, wide);
    CHECK(std::abs(mass(on_wide) - 1.0) <= 1e-8);
    CHECK(mass(convolve(u, k)) < 1.0 - 1e-3);
}

TEST_CASE("atomic convolution of a single atom is the kernel bump", "[kernel]") {
    const AtomicPlan plan = make_atomic_plan(1, 2, {0.0, 0.5}, {1.0});
    const AxisGrid axis = make_axis_grid(-8.0, 8.0, 64);
    const ProductGrid grid({axis, axis});
    const AtomConvolution ac = convolve_atoms(plan, KernelSpec{0.1, 1}, grid);
    CHECK(ac.margin_ok);
    CHECK(ac.truncated_mass <= 1e-10);
    for (std::size_t i = 0; i < axis.count; ++i)
        for (std::size_t j = 0; j < axis.count; ++j) {
            const double expect = eta1(axis.node(i), 0.1) * eta1(axis.node(j) - 0.5, 0.1);
            CHECK(std::abs(ac.field.values[i * axis.count + j] - expect) <= 1e-15);
        }
}

TEST_CASE("atomic convolution flags thin margins", "[kernel]") {
    const AtomicPlan plan = make_atomic_plan(1, 2, {7.9, 0.0}, {1.0});
    const AxisGrid axis = make_axis_grid(-8.0, 8.0, 64);
    const AtomConvolution ac = convolve_atoms(plan, KernelSpec{0.4, 1}, ProductGrid({axis, axis}));
    CHECK_FALSE(ac.margin_ok);
    CHECK(ac.truncated_mass > 0.1);
    CHECK(ac.truncated_mass < 0.6);
}

TEST_CASE("sampled product plans converge to the product of convolutions", "[kernel]") {
    const AxisGrid ga = make_axis_grid(-8.0, 8.0, 64);
    const AxisGrid gb = make_axis_grid(-7.0, 9.0, 64);
    const KernelSpec k{0.1, 1};
    GaussianSampler rng(20240817);
    const std::size_t M = 10000;
    std::vector<double> coords(2 * M), weights(M, 1.0 / static_cast<double>(M));
    for (std::size_t i = 0; i < M; ++i) {
        coords[2 * i] = rng.normal();
        coords[2 * i + 1] = 1.0 + rng.normal();
    }
    const AtomicPlan plan = make_atomic_plan(1, 2, std::move(coords), std::move(weights));
    const AtomConvolution ac = convolve_atoms(plan, k, ProductGrid({ga, gb}));
    const DensityField expect =
        product_plan({convolve(gaussian_density(ga, 0.0, 1.0), k),
                      convolve(gaussian_density(gb, 1.0, 1.0), k)});
    CHECK(l1_distance(ac.field, expect) <= 0.05);
}
