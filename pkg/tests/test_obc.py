"""Open-boundary surface solvers, Lyapunov equations, and memoization."""

import warnings

import numpy as np
import pytest

from negfgw.errors import ConvergenceError, SpectralRadiusError
from negfgw.obc import (
    ContactBlocks,
    SurfaceCache,
    lyapunov_solve,
    memoized_obc,
    obc_beyn,
    obc_fixed_point,
    obc_sancho_rubio,
    recursion_residual,
    sigma_lg_obc,
    stein_geometric,
)
from negfgw.toys import random_lead

# self-energy of a semi-infinite 1D chain, decaying branch
SCALAR_FIXED_POINT = 0.5358983848622456  # m=2, n=n'=0.5: root 4 - 2*sqrt(3)


def _chain_contact(energy, eta=1e-6, eps=0.0, t=1.0):
    z = energy + 1j * eta
    m = np.array([[z - eps]])
    n = np.array([[-t]])
    return ContactBlocks(m=m, n=n, n_prime=n), z


def _chain_closed_form(z, eps=0.0, t=1.0):
    # g = (z - eps - sqrt((z - eps)^2 - 4 t^2)) / (2 t^2), decaying branch
    d = z - eps
    root = np.sqrt(d * d - 4.0 * t * t)
    g = (d - root) / (2.0 * t * t)
    if abs(g) > 1.0 / abs(t):
        g = (d + root) / (2.0 * t * t)
    return g


def test_fixed_point_zero_coupling_is_direct_inverse():
    rng = np.random.default_rng(0)
    m = rng.normal(size=(4, 4)) + 1j * np.eye(4)
    c = ContactBlocks(m=m, n=np.zeros((4, 4)), n_prime=np.zeros((4, 4)))
    res = obc_fixed_point(c)
    np.testing.assert_allclose(res.x_r, np.linalg.inv(m), atol=1e-12)
    assert res.iters <= 2
    assert res.converged


def test_fixed_point_scalar_frozen_value():
    c = ContactBlocks(
        m=np.array([[2.0 + 0j]]),
        n=np.array([[0.5 + 0j]]),
        n_prime=np.array([[0.5 + 0j]]),
    )
    res = obc_fixed_point(c, tol=1e-14)
    assert res.converged
    assert res.x_r[0, 0] == pytest.approx(SCALAR_FIXED_POINT, abs=1e-12)


def test_fixed_point_warm_start_converges_immediately():
    c = random_lead(seed=1, block_size=4, eta=0.05)
    first = obc_fixed_point(c, tol=1e-12)
    assert first.converged
    again = obc_fixed_point(c, x0=first.x_r, tol=1e-10)
    assert again.iters <= 1


def test_sancho_rubio_matches_fixed_point():
    for seed in range(5):
        c = random_lead(seed=seed, block_size=5, eta=0.02)
        a = obc_fixed_point(c, tol=1e-13, max_iter=20000)
        b = obc_sancho_rubio(c, tol=1e-14)
        assert a.converged and b.converged
        scale = max(np.abs(b.x_r).max(), 1.0)
        assert np.abs(a.x_r - b.x_r).max() <= 1e-8 * scale
        assert recursion_residual(c, b.x_r) <= 1e-10


def test_chain_closed_form_decimation_and_fixed_point():
    # inside and outside the band of the semi-infinite chain
    for energy in (-1.5, -0.3, 0.0, 0.7, 1.8, 2.5):
        c, z = _chain_contact(energy, eta=1e-7)
        exact = _chain_closed_form(z)
        sr = obc_sancho_rubio(c, tol=1e-14)
        assert abs(sr.x_r[0, 0] - exact) <= 1e-8 * max(abs(exact), 1.0)
    for energy in (-2.5, 0.4, 2.4):
        c, z = _chain_contact(energy, eta=0.2)
        exact = _chain_closed_form(z)
        fp = obc_fixed_point(c, tol=1e-14, max_iter=50000)
        assert fp.converged
        assert abs(fp.x_r[0, 0] - exact) <= 1e-8 * max(abs(exact), 1.0)


def test_chain_closed_form_mode_matching():
    # in-band modes cling to the unit circle; the contour quadrature
    # needs broadening and a dense node set to separate them
    cont = {"radius": 1.0, "center": 0.0, "n_quad": 256}
    for energy in (-1.5, -0.3, 0.0, 0.7, 1.8):
        c, z = _chain_contact(energy, eta=0.3)
        exact = _chain_closed_form(z)
        beyn = obc_beyn([c.n_prime, c.m, c.n], contour=cont)
        assert abs(beyn.x_r[0, 0] - exact) <= 1e-6 * max(abs(exact), 1.0)
    # outside the band the modes are evanescent; tiny broadening suffices
    for energy in (-3.0, 2.4, 3.0):
        c, z = _chain_contact(energy, eta=1e-6)
        exact = _chain_closed_form(z)
        beyn = obc_beyn([c.n_prime, c.m, c.n], contour=cont)
        assert abs(beyn.x_r[0, 0] - exact) <= 1e-6 * max(abs(exact), 1.0)


def test_three_solvers_pairwise_agreement():
    cont = {"radius": 1.0, "center": 0.0, "n_quad": 256}
    for seed in range(6):
        c = random_lead(seed=seed, block_size=4, eta=0.3)
        fp = obc_fixed_point(c, tol=1e-13, max_iter=20000).x_r
        sr = obc_sancho_rubio(c, tol=1e-14).x_r
        by = obc_beyn([c.n_prime, c.m, c.n], contour=cont).x_r
        scale = max(np.abs(sr).max(), 1.0)
        assert np.abs(fp - sr).max() <= 1e-6 * scale
        assert np.abs(sr - by).max() <= 1e-6 * scale
        assert np.abs(fp - by).max() <= 1e-6 * scale


def test_beyn_zero_coupling_flags_no_modes():
    m = np.diag([2.0 + 0.5j, 3.0 - 0.25j])
    z = np.zeros((2, 2))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = obc_beyn([z, m, z])
    assert res.n_modes == 0
    assert res.no_modes_warning
    np.testing.assert_allclose(res.x_r, np.linalg.inv(m), atol=1e-12)


def test_sancho_rubio_raises_on_stall():
    # eta = 0 exactly on a band energy: the decimation cannot settle
    c, _ = _chain_contact(0.0, eta=0.0)
    with pytest.raises(ConvergenceError):
        obc_sancho_rubio(c, max_iter=5)


def test_lyapunov_zero_a_returns_q():
    rng = np.random.default_rng(2)
    q = rng.normal(size=(4, 4))
    q = q + q.T
    w = lyapunov_solve(np.zeros((4, 4)), q)
    np.testing.assert_allclose(w, q, atol=1e-14)


def test_lyapunov_doubling_matches_kron_oracle():
    for seed in range(6):
        rng = np.random.default_rng(seed)
        for bs in (2, 4, 8):
            a = rng.normal(size=(bs, bs)) + 1j * rng.normal(size=(bs, bs))
            a *= 0.9 / max(np.abs(np.linalg.eigvals(a)))
            q = rng.normal(size=(bs, bs)) + 1j * rng.normal(size=(bs, bs))
            q = q - q.conj().T  # anti-Hermitian source
            w_d = lyapunov_solve(a, q, method="doubling")
            w_k = lyapunov_solve(a, q, method="kron_oracle")
            scale = max(np.abs(w_k).max(), 1.0)
            assert np.abs(w_d - w_k).max() <= 1e-10 * scale
            # residual of w = a w a^H + q
            res = w_d - a @ w_d @ a.conj().T - q
            assert np.abs(res).max() <= 1e-10 * scale
            # anti-Hermitian q gives anti-Hermitian w
            assert np.abs(w_d + w_d.conj().T).max() <= 1e-10 * scale


def test_lyapunov_eigen_direct_agrees():
    rng = np.random.default_rng(9)
    a = rng.normal(size=(5, 5)) + 1j * rng.normal(size=(5, 5))
    a *= 0.8 / max(np.abs(np.linalg.eigvals(a)))
    q = rng.normal(size=(5, 5)) + 1j * rng.normal(size=(5, 5))
    w_e = lyapunov_solve(a, q, method="eigen_direct")
    w_d = lyapunov_solve(a, q, method="doubling")
    assert np.abs(w_e - w_d).max() <= 1e-9 * max(np.abs(w_d).max(), 1.0)


def test_lyapunov_rejects_unstable_a():
    a = np.diag([1.05 + 0j, 0.2])
    q = np.eye(2, dtype=complex)
    with pytest.raises(SpectralRadiusError):
        lyapunov_solve(a, q, method="doubling")


def test_stein_geometric_fixed_point():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(3, 3)) * 0.3
    q = rng.normal(size=(3, 3))
    w = stein_geometric(a, q)
    res = w - a @ w @ a.conj().T - q
    assert np.abs(res).max() <= 1e-10 * max(np.abs(w).max(), 1.0)


def test_sigma_lg_occupation_split():
    c = random_lead(seed=3, block_size=3, eta=0.05)
    x = obc_sancho_rubio(c).x_r
    # deep below the chemical potential: fully occupied
    sig = sigma_lg_obc(x, contact_mu=5.0, kT=0.025, energy=0.0,
                       couplings=(c.n, c.n_prime))
    gamma_full = sig.sigma_r - sig.sigma_r.conj().T
    np.testing.assert_allclose(sig.sigma_lesser, -gamma_full, atol=1e-12)
    np.testing.assert_allclose(sig.sigma_greater, np.zeros_like(gamma_full),
                               atol=1e-12)
    # identity sigma^> - sigma^< = sigma^R - sigma^A at any filling
    sig2 = sigma_lg_obc(x, contact_mu=0.1, kT=0.05, energy=0.0,
                        couplings=(c.n, c.n_prime))
    lhs = sig2.sigma_greater - sig2.sigma_lesser
    np.testing.assert_allclose(lhs, gamma_full, atol=1e-13)
    # lesser and greater parts are anti-Hermitian
    assert np.abs(sig2.sigma_lesser + sig2.sigma_lesser.conj().T).max() <= 1e-13
    assert np.abs(sig2.sigma_greater + sig2.sigma_greater.conj().T).max() <= 1e-13


def _memo_setup(seed=0, block_size=4, eta=0.05):
    c = random_lead(seed=seed, block_size=block_size, eta=eta)
    inv = np.linalg.inv

    def direct():
        return obc_sancho_rubio(c, tol=1e-14).x_r

    def iterative(x):
        return inv(c.m - c.n @ x @ c.n_prime)

    return c, direct, iterative


def test_memoized_empty_cache_goes_direct():
    c, direct, iterative = _memo_setup()
    cache = SurfaceCache()
    x = memoized_obc(("L", 0), direct, iterative, cache, n_fpi=20, tol=1e-10)
    assert cache.stats["direct_calls"] == 1
    assert cache.stats["memoized_calls"] == 0
    assert recursion_residual(c, x) <= 1e-10


def test_memoized_exact_reuse_is_a_hit():
    c, direct, iterative = _memo_setup()
    cache = SurfaceCache()
    x1 = memoized_obc(("L", 0), direct, iterative, cache, n_fpi=20, tol=1e-10)
    x2 = memoized_obc(("L", 0), direct, iterative, cache, n_fpi=20, tol=1e-10)
    assert cache.stats["memoized_calls"] == 1
    assert np.abs(x2 - x1).max() <= 1e-9


def test_memoized_residual_within_ten_times_direct():
    # perturb the lead slightly between calls; the refresh must land within
    # ten times the direct solve's recursion residual
    base = random_lead(seed=7, block_size=4, eta=0.05)
    cache = SurfaceCache()
    tol = 1e-10
    for step in range(6):
        shift = 1e-4 * step
        c = ContactBlocks(m=base.m + shift * np.eye(4), n=base.n,
                          n_prime=base.n_prime)

        def direct():
            return obc_sancho_rubio(c, tol=1e-14).x_r

        def iterative(x):
            return np.linalg.inv(c.m - c.n @ x @ c.n_prime)

        x = memoized_obc(("L", 0), direct, iterative, cache,
                         n_fpi=30, tol=tol)
        direct_res = recursion_residual(c, obc_sancho_rubio(c, tol=1e-14).x_r)
        assert recursion_residual(c, x) <= 10.0 * max(direct_res, tol)
    assert cache.stats["memoized_calls"] >= 1


def test_memoized_divergent_update_falls_back_to_direct():
    c, direct, _ = _memo_setup(eta=0.05)

    def runaway(x):
        return 10.0 * x + 1.0

    cache = SurfaceCache()
    memoized_obc(("L", 0), direct, runaway, cache, n_fpi=20, tol=1e-10)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        x = memoized_obc(("L", 0), direct, runaway, cache, n_fpi=20, tol=1e-10)
    # second call tried the cache, saw divergence, and recomputed directly
    assert cache.stats["direct_calls"] == 2
    assert recursion_residual(c, x) <= 1e-10


def test_cache_hit_rate_accounting():
    cache = SurfaceCache()
    assert cache.hit_rate() == 0.0
    cache.stats["direct_calls"] = 3
    cache.stats["memoized_calls"] = 9
    assert cache.hit_rate() == pytest.approx(0.75)
