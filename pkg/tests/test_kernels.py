import numpy as np
import pytest

from smoothrl import kernels as K
from smoothrl.autodiff import Mlp

SIZES = [(3, 5, 2), (4, 8, 8, 2), (6, 1), (5, 16, 16, 1)]


def _setup(sizes, n, seed=0):
    rng = np.random.default_rng(seed)
    net = Mlp.init(sizes, rng)
    net.params += 0.1 * rng.standard_normal(net.n_params)
    X = rng.standard_normal((n, sizes[0]))
    return rng, net, X


@pytest.mark.parametrize("sizes", SIZES)
@pytest.mark.parametrize("n", [1, 7, 40])
def test_numpy_and_numba_paths_agree(sizes, n):
    rng, net, X = _setup(sizes, n)
    arr = np.array(sizes, dtype=np.int64)
    out_np, H_np = K.np_mlp_forward(net.params, sizes, X)
    out_nb, H_nb = K.nb_mlp_forward(net.params, arr, X)
    np.testing.assert_allclose(out_nb, out_np, rtol=1e-12, atol=1e-13)
    np.testing.assert_allclose(H_nb, H_np, rtol=1e-12, atol=1e-13)

    G = rng.standard_normal(out_np.shape)
    gp_np, gx_np = K.np_mlp_vjp(net.params, sizes, X, H_np, G)
    gp_nb, gx_nb = K.nb_mlp_vjp(net.params, arr, X, H_nb, G)
    np.testing.assert_allclose(gp_nb, gp_np, rtol=1e-11, atol=1e-12)
    np.testing.assert_allclose(gx_nb, gx_np, rtol=1e-11, atol=1e-12)
    np.testing.assert_allclose(K.nb_mlp_vjp_input(net.params, arr, X, H_nb, G), gx_np,
                               rtol=1e-11, atol=1e-12)
    np.testing.assert_allclose(K.np_mlp_vjp_input(net.params, sizes, X, H_np, G), gx_np,
                               rtol=1e-12, atol=1e-13)

    V = rng.standard_normal(net.n_params)
    np.testing.assert_allclose(K.nb_mlp_jvp(net.params, arr, X, H_nb, V),
                               K.np_mlp_jvp(net.params, sizes, X, H_np, V), rtol=1e-11, atol=1e-12)


@pytest.mark.parametrize("squash", [False, True])
@pytest.mark.parametrize("use_sign", [False, True])
def test_pgd_paths_agree(squash, use_sign):
    rng, net, X = _setup((4, 8, 8, 2), 9)
    d = 3
    w = np.array([0.7, 1.3])
    scale = np.array([1.0, 2.0])
    delta0 = rng.uniform(-0.1, 0.1, size=(9, d))
    a = K.np_pgd_sqdiff(net.params, net.sizes, X, d, w, delta0, 0.1, 0.02, 10, use_sign,
                        scale if squash else None)
    b = K.nb_pgd_sqdiff(net.params, np.array(net.sizes), X, d, w, delta0, 0.1, 0.02, 10,
                        use_sign, squash, scale if squash else np.ones(2))
    np.testing.assert_allclose(b[0], a[0], atol=1e-12)
    np.testing.assert_allclose(b[1], a[1], rtol=1e-10, atol=1e-14)
    assert np.all(np.abs(a[0]) <= 0.1 + 1e-15)


def test_jvp_matches_directional_difference():
    rng, net, X = _setup((4, 8, 3), 5)
    V = rng.standard_normal(net.n_params)
    out, H = K.np_mlp_forward(net.params, net.sizes, X)
    h = 1e-6
    plus, _ = K.np_mlp_forward(net.params + h * V, net.sizes, X)
    minus, _ = K.np_mlp_forward(net.params - h * V, net.sizes, X)
    np.testing.assert_allclose(K.np_mlp_jvp(net.params, net.sizes, X, H, V),
                               (plus - minus) / (2 * h), rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("mode", ["numpy", "numba", "auto"])
def test_dispatch_modes_give_same_results(monkeypatch, mode):
    rng, net, X = _setup((4, 8, 2), 30)
    monkeypatch.setattr(K, "MODE", "numpy")
    ref = K.mlp_forward(net.params, net.sizes, X)[0]
    monkeypatch.setattr(K, "MODE", mode)
    for rows in (1, 30):
        np.testing.assert_allclose(K.mlp_forward(net.params, net.sizes, X[:rows])[0],
                                   ref[:rows], rtol=1e-12, atol=1e-13)


def test_dispatch_rule(monkeypatch):
    monkeypatch.setattr(K, "MODE", "auto")
    assert K._use_numba(1, K.SMALL_BATCH) and K._use_numba(K.SMALL_BATCH, K.SMALL_BATCH)
    assert not K._use_numba(K.SMALL_BATCH + 1, K.SMALL_BATCH)
    assert K._use_numba(10_000)
    monkeypatch.setattr(K, "MODE", "numpy")
    assert not K._use_numba(1) and not K._use_numba(1, K.SMALL_BATCH)
    monkeypatch.setattr(K, "MODE", "numba")
    assert K._use_numba(10_000, K.SMALL_BATCH)


@pytest.mark.parametrize("mode", ["numba", "auto"])
@pytest.mark.parametrize("squashed", [False, True])
def test_pgd_dispatch_modes_agree(monkeypatch, mode, squashed):
    rng, net, X = _setup((4, 8, 2), 40)
    w = np.array([1.0, 0.5])
    d0 = rng.uniform(-0.05, 0.05, X.shape)
    scale = np.array([1.0, 2.0]) if squashed else None
    monkeypatch.setattr(K, "MODE", "numpy")
    ref = K.pgd_sqdiff(net.params, net.sizes, X, 4, w, d0, 0.05, 0.01, 10, False, scale)
    monkeypatch.setattr(K, "MODE", mode)
    for rows in (3, 40):  # below and above the PGD batch limit
        got = K.pgd_sqdiff(net.params, net.sizes, X[:rows], 4, w, d0[:rows], 0.05, 0.01, 10,
                           False, scale)
        np.testing.assert_allclose(got[0], ref[0][:rows], rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(got[1], ref[1][:rows], rtol=1e-9, atol=1e-14)


def test_env_flag_selects_mode():
    import subprocess
    import sys
    code = "from smoothrl import kernels; print(kernels.MODE)"
    for flag, want in [("0", "numpy"), ("1", "numba"), ("auto", "auto")]:
        env = {"SMOOTHRL_NUMBA": flag, "PATH": "/usr/bin:/bin"}
        import os
        env.update({k: v for k, v in os.environ.items() if k not in env})
        env["SMOOTHRL_NUMBA"] = flag
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                             text=True, check=True).stdout.strip()
        assert out == want
