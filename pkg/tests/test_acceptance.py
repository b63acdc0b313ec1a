"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run under pytest (lines are repeated in the terminal summary) or directly
with ``python3 tests/test_acceptance.py``.
"""
import json
import sys
import tempfile
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import ACCEPTANCE, fd_grad, rand_spd, rand_sym, rel_err  # noqa: E402
from tensorcspnet import layers  # noqa: E402
from tensorcspnet.baselines import csp_fit  # noqa: E402
from tensorcspnet.cli import main as cli_main  # noqa: E402
from tensorcspnet.euclid import (ConvSpec, conv2d_blockwise_backward,  # noqa: E402
                                 conv2d_blockwise_forward, dense_backward, dense_forward,
                                 flatten_concat, softmax_ce)
from tensorcspnet.geometry import (airm_inner, distance, exp_map, frechet_mean,  # noqa: E402
                                   geodesic, log_map, parallel_transport)
from tensorcspnet.model import Model, ModelConfig, parameter_count  # noqa: E402
from tensorcspnet.signal import (BandSpec, SegSpec, apply_filterbank,  # noqa: E402
                                 design_filterbank, tensor_stack)
from tensorcspnet.symmat import min_eig  # noqa: E402

INSTANCES = 20


@contextmanager
def criterion(number, title, limit_s):
    """Time the block, record a PASS/FAIL line and re-raise failures."""
    t0 = time.perf_counter()
    detail = {}
    try:
        yield detail
        elapsed = time.perf_counter() - t0
        if elapsed > limit_s:
            raise AssertionError(f"runtime {elapsed:.1f}s exceeds {limit_s}s")
    except BaseException as exc:
        elapsed = time.perf_counter() - t0
        line = f"criterion {number}: FAIL  {title} ({elapsed:.1f}s) {type(exc).__name__}: {exc}"
        ACCEPTANCE.append((number, line))
        print(line)
        raise
    extra = " ".join(f"{k}={v}" for k, v in detail.items())
    line = f"criterion {number}: PASS  {title} ({elapsed:.1f}s) {extra}".rstrip()
    ACCEPTANCE.append((number, line))
    print(line)


# --------------------------------------------------------------------------


def test_c1_parameter_count():
    with criterion(1, "parameter count 5-CSPNet^(9,3,1)@(9,5,10) = 232,360", 1.0) as d:
        cfg = ModelConfig(w=5, m=9, n=3, l=1, o=22, classes=4, channels=22, conv=(9, 5, 10))
        total = parameter_count(cfg).total
        d["total"] = total
        assert total == 232360


def test_c2_shapes():
    with criterion(2, "shape oracles", 1.0) as d:
        rng = np.random.default_rng(0)
        X = tensor_stack(rng.standard_normal((1, 20, 2500)), 1000.0, BandSpec(),
                         SegSpec(500, 500))
        assert X.shape[1:] == (5, 9, 20, 20)
        grid = flatten_concat(np.zeros((1, 5, 9, 20, 20)))
        assert grid.shape[1:] == (5, 3600)
        assert ConvSpec(9, 5, 10).output_shape(5, 9) == (1, 1, 10)
        Wo, Fo, r = ConvSpec(1, 2, 20).output_shape(5, 9)
        assert Wo * Fo * r == 720
        # the same shapes through the actual convolution on the 20x20 grid
        out, _ = conv2d_blockwise_forward(grid, ConvSpec(1, 2, 20), np.zeros((20, 2, 1, 400)))
        assert out[0].size == 720
        d["stack"] = "(5,9,20,20)"


def _instances_bimap(rng):
    x = rand_spd(rng, 5, (2, 1, 2))
    W = layers.stiefel_init(3, 5, rng, bands=2)
    G = rand_sym(rng, 3, (2, 1, 2))
    _, ctx = layers.bimap_forward(W, x)
    gx, gw = layers.bimap_backward(ctx, G)
    return max(rel_err(gx, fd_grad(lambda v: np.sum(G * layers.bimap_forward(W, v)[0]), x)),
               rel_err(gw, fd_grad(lambda v: np.sum(G * layers.bimap_forward(v, x)[0]), W)))


def _instances_reeig(rng):
    q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    # two eigenvalues above and two below eps, all at least 1e-3 from the kink
    lam = np.array([rng.uniform(0.5, 2.0), rng.uniform(0.2, 0.4), rng.uniform(-0.5, 0.05),
                    rng.uniform(-1.0, -0.6)])
    x = (q * lam) @ q.T
    G = rand_sym(rng, 4)
    eps = 0.1
    _, ctx = layers.reeig_forward(x, eps)
    num = fd_grad(lambda v: np.sum(G * layers.reeig_forward(v, eps)[0]), x)
    return rel_err(layers.reeig_backward(ctx, G), num)


def _instances_log(rng):
    x, G = rand_spd(rng, 4, (2,)), rand_sym(rng, 4, (2,))
    _, ctx = layers.logeig_forward(x)
    num = fd_grad(lambda v: np.sum(G * layers.logeig_forward(v)[0]), x)
    return rel_err(layers.logeig_backward(ctx, G), num)


def _instances_rbn(rng):
    x, M, G = rand_spd(rng, 3, (3, 1, 2)), rand_spd(rng, 3, (2,)), rand_spd(rng, 3)
    Gout = rand_sym(rng, 3, (3, 1, 2))

    def run(xv, Gv):
        st = layers.RbnState(np.broadcast_to(np.eye(3), (2, 3, 3)).copy(), Gv)
        return layers.rbn_forward(xv, st, batch_mean=M, update=False)

    _, ctx = run(x, G)
    gx, riem = layers.rbn_backward(ctx, Gout)
    Gi = np.linalg.inv(G)
    return max(rel_err(gx, fd_grad(lambda v: np.sum(Gout * run(v, G)[0]), x)),
               rel_err(Gi @ riem @ Gi, fd_grad(lambda v: np.sum(Gout * run(x, v)[0]), G)))


def _instances_conv(rng):
    spec = ConvSpec(int(rng.choice([1, 3])), int(rng.integers(1, 4)), 2)
    grid, w = rng.standard_normal((2, 3, 3 * 4)), rng.standard_normal((2, spec.q, spec.p, 4))
    b = rng.standard_normal(2)
    out, ctx = conv2d_blockwise_forward(grid, spec, w, b)
    G = rng.standard_normal(out.shape)
    gx, gw, gb = conv2d_blockwise_backward(ctx, G)

    def loss(g=grid, ww=w, bb=b):
        return np.sum(G * conv2d_blockwise_forward(g, spec, ww, bb)[0])

    return max(rel_err(gx, fd_grad(lambda v: loss(g=v), grid)),
               rel_err(gw, fd_grad(lambda v: loss(ww=v), w)),
               rel_err(gb, fd_grad(lambda v: loss(bb=v), b)))


def _instances_dense(rng):
    x, w, b = rng.standard_normal((3, 5)), rng.standard_normal((4, 5)), rng.standard_normal(4)
    G = rng.standard_normal((3, 4))
    _, ctx = dense_forward(x, w, b)
    gx, gw, gb = dense_backward(ctx, G)
    return max(rel_err(gx, fd_grad(lambda v: np.sum(G * dense_forward(v, w, b)[0]), x)),
               rel_err(gw, fd_grad(lambda v: np.sum(G * dense_forward(x, v, b)[0]), w)),
               rel_err(gb, fd_grad(lambda v: np.sum(G * dense_forward(x, w, v)[0]), b)))


def _instances_softmax(rng):
    z, y = rng.standard_normal((4, 3)) * 3, rng.integers(0, 3, 4)
    _, g = softmax_ce(z, y)
    return rel_err(g, fd_grad(lambda v: softmax_ce(v, y)[0], z))


def _instances_end_to_end(rng):
    cfg = ModelConfig(w=2, m=2, n=1, l=1, o=3, classes=2, channels=4, conv=(1, 2, 2),
                      free_o=True).validate()
    model = Model.build(cfg, seed=int(rng.integers(1 << 30)))
    x = rand_spd(rng, 4, (4, 2, 2))
    y = rng.integers(0, 2, 4)
    model.forward(x, "train")
    frozen = dict(model.last_means)
    _, grads = model.loss_and_grads(x, y, frozen_means=frozen, update_stats=False)
    worst = 0.0
    for name, value in model.params.items():
        def loss(v, name=name):
            saved = model.params[name]
            model.params[name] = v
            out = model.forward(x, "train", frozen_means=frozen, update_stats=False)
            model.params[name] = saved
            return softmax_ce(out, y)[0]

        ana = grads[name]
        if model.kinds[name] == "spd":
            Gi = np.linalg.inv(value)
            ana = Gi @ ana @ Gi
        worst = max(worst, rel_err(ana, fd_grad(loss, value)))
    return worst


GRADIENT_CHECKS = [("bimap", _instances_bimap, 1e-5), ("reeig", _instances_reeig, 1e-5),
                   ("log", _instances_log, 1e-5), ("rbn", _instances_rbn, 1e-4),
                   ("conv", _instances_conv, 1e-5), ("dense", _instances_dense, 1e-5),
                   ("softmax_ce", _instances_softmax, 1e-5),
                   ("end_to_end", _instances_end_to_end, 1e-4)]


def test_c3_gradients():
    with criterion(3, f"gradient suite, {INSTANCES} instances per check", 60.0) as d:
        rng = np.random.default_rng(2024)
        failures = []
        for name, fn, tol in GRADIENT_CHECKS:
            errs = [fn(rng) for _ in range(INSTANCES)]
            d[name] = f"{max(errs):.1e}"
            if max(errs) >= tol:
                failures.append(f"{name} max rel err {max(errs):.2e} >= {tol:g}")
        assert not failures, "; ".join(failures)


def test_c4_manifold():
    with criterion(4, "manifold suite", 30.0) as d:
        rng = np.random.default_rng(4)
        worst = {}
        for _ in range(INSTANCES):
            P1, P2, P3 = (rand_spd(rng, 4) for _ in range(3))
            v, w = rand_sym(rng, 4), rand_sym(rng, 4)
            A = rng.standard_normal((4, 4))
            checks = {
                "geodesic_endpoints": max(np.linalg.norm(geodesic(P1, P2, 0.0) - P1),
                                          np.linalg.norm(geodesic(P1, P2, 1.0) - P2)),
                "congruence": abs(distance(A @ P1 @ A.T, A @ P2 @ A.T) - distance(P1, P2)),
                "transport_isometry": abs(
                    airm_inner(P2, parallel_transport(P1, P2, v), parallel_transport(P1, P2, w))
                    - airm_inner(P1, v, w)),
                "exp_log": rel_err(exp_map(P1, log_map(P1, P2)), P2),
                "midpoint": np.linalg.norm(frechet_mean(np.stack([P1, P2]))
                                           - geodesic(P1, P2, 0.5)),
            }
            batch = np.stack([P1, P2, P3])
            wts = rng.dirichlet(np.ones(3))
            M = frechet_mean(batch, wts)
            checks["karcher"] = np.linalg.norm(np.sum(wts[:, None, None] * log_map(M, batch),
                                                      axis=0))
            for k, val in checks.items():
                worst[k] = max(worst.get(k, 0.0), float(val))
        worst["d(I,4I)"] = abs(distance(np.eye(2), 4 * np.eye(2)) - np.sqrt(2) * np.log(4))
        limits = {"geodesic_endpoints": 1e-10, "congruence": 1e-8, "transport_isometry": 1e-8,
                  "exp_log": 1e-8, "midpoint": 1e-8, "karcher": 1e-8, "d(I,4I)": 1e-9}
        d.update({k: f"{v:.1e}" for k, v in worst.items()})
        bad = [k for k, v in worst.items() if not v < limits[k]]
        assert not bad, f"over tolerance: {bad}"


def test_c5_spd_preservation():
    with criterion(5, "SPD preservation for o in {4,...,36}, C=22", 30.0) as d:
        rng = np.random.default_rng(5)
        C, eps = 22, layers.REEIG_EPS
        lowest = np.inf
        for o in range(4, 37):
            for _ in range(2):
                x = rand_spd(rng, C, (4, 1, 2), cond=100.0)
                h, _ = layers.bimap_forward(layers.stiefel_init(o, C, rng, bands=2), x)
                h, _ = layers.rbn_forward(h, layers.RbnState.identity(2, o))
                h, _ = layers.reeig_forward(h, eps)
                lowest = min(lowest, float(min_eig(h).min()))
                assert lowest >= eps - 1e-12, f"o={o}: min eigenvalue {lowest}"
            if o % 4:
                continue
            # the full network path as well
            cfg = ModelConfig(w=1, m=2, n=1, l=1, o=o, classes=2, channels=C)
            Model.build(cfg, seed=o).forward(rand_spd(rng, C, (3, 1, 2)), "train")
        d["min_eig"] = f"{lowest:.3e}"


def test_c6_csp_oracle():
    with criterion(6, "CSP oracle", 10.0) as d:
        m = csp_fit(np.diag([4.0, 1.0]) / 5, np.diag([1.0, 4.0]) / 5)
        err = np.max(np.abs(np.sort(m.generalized_eigenvalues) - [0.25, 4.0]))
        assert err < 1e-10, err
        rng = np.random.default_rng(6)
        worst = 0.0
        for _ in range(100):
            n = int(rng.integers(2, 9))
            Sp, Sm = rand_spd(rng, n), rand_spd(rng, n)
            model = csp_fit(Sp, Sm)
            total = model.W.T @ Sp @ model.W + model.W.T @ Sm @ model.W
            worst = max(worst, float(np.max(np.abs(total - np.eye(n)))))
        d["eig_err"] = f"{err:.1e}"
        d["identity_residual"] = f"{worst:.1e}"
        assert worst < 1e-8


# --------------------------------------------------------------------------
# end-to-end synthetic classification (criteria 7 and 8)

E2E_CONFIG = {"seed": 7, "split": {"kind": "kfold", "k": 10},
              "train": {"lr0": 0.02, "epochs": 30, "patience": 10, "batch": 28}}


def _run_e2e(work: Path, threads: int):
    work.mkdir(parents=True, exist_ok=True)
    cfg = work / "config.json"
    cfg.write_text(json.dumps(E2E_CONFIG))
    data = work / "data"
    if not (data / "meta.json").exists():
        assert cli_main(["synth", "--classes", "2", "--trials", "200", "--channels", "8",
                         "--samples", "1000", "--fs", "250", "--seed", "7",
                         "--separation", "3.0", "--out", str(data)]) == 0
    out = work / f"cv_{threads}"
    assert cli_main(["cv", "--config", str(cfg), "--dataset", str(data), "--out", str(out),
                     "--threads", str(threads)]) == 0
    return out / "metrics.json"


@pytest.fixture(scope="module")
def e2e_dir():
    with tempfile.TemporaryDirectory() as d:
        yield Path(d)


@pytest.mark.slow
def test_c7_end_to_end(e2e_dir):
    with criterion(7, "10-fold CV on synthetic data: CSPNet >= 0.95, MDM >= 0.90", 900.0) as d:
        metrics = json.loads(_run_e2e(e2e_dir, threads=4).read_text())
        cfg = e2e_dir / "config.json"
        assert cli_main(["baseline", "--config", str(cfg), "--dataset", str(e2e_dir / "data"),
                         "--method", "mdm", "--out", str(e2e_dir / "mdm")]) == 0
        mdm = json.loads((e2e_dir / "mdm" / "metrics.json").read_text())
        d["cspnet"] = f"{metrics['mean_accuracy']:.4f}"
        d["mdm"] = f"{mdm['mean_accuracy']:.4f}"
        d["model"] = metrics["model"]["name"]
        assert metrics["mean_accuracy"] >= 0.95
        assert mdm["mean_accuracy"] >= 0.90


@pytest.mark.slow
def test_c8_determinism(e2e_dir):
    with criterion(8, "identical seeds give byte-identical metrics JSON", 900.0) as d:
        first = e2e_dir / "cv_4" / "metrics.json"
        if not first.exists():
            first = _run_e2e(e2e_dir, threads=4)
        second = _run_e2e(e2e_dir, threads=3)
        a, b = first.read_bytes(), second.read_bytes()
        d["bytes"] = len(a)
        assert a == b


def test_c9_filter_bank():
    with criterion(9, "filter bank 4-8 Hz: 6 Hz loss <= 3 dB, 22 Hz >= 30 dB, causal", 10.0) as d:
        fs = 250.0
        bank = design_filterbank(fs, BandSpec())
        n = 4000
        t = np.arange(n) / fs
        settle = n // 2
        win = np.hanning(n - settle)

        def gain_db(freq):
            x = np.sin(2 * np.pi * freq * t)[None]
            y = apply_filterbank(x, bank)[0, 0]
            X = np.abs(np.fft.rfft(x[0, settle:] * win))
            Y = np.abs(np.fft.rfft(y[settle:] * win))
            k = int(round(freq * (n - settle) / fs))
            return 20 * np.log10(Y[k] / X[k])

        g6, g22 = gain_db(6.0), gain_db(22.0)
        d["gain_6Hz_dB"] = f"{g6:.2f}"
        d["gain_22Hz_dB"] = f"{g22:.1f}"
        assert g6 >= -3.0 and g22 <= -30.0
        rng = np.random.default_rng(9)
        x = rng.standard_normal((2, 500))
        base = apply_filterbank(x, bank)
        for t0 in (0, 100, 250, 499):
            x2 = x.copy()
            x2[:, t0] += 1.0
            out = apply_filterbank(x2, bank)
            assert np.array_equal(out[..., :t0], base[..., :t0]), f"output before {t0} changed"
            assert not np.array_equal(out[..., t0:], base[..., t0:])


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
