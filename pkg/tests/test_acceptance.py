"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The end-to-end criteria share two full default pipeline runs (about a
minute each), executed once per session.
"""
import math
import random
import time
from pathlib import Path

import h3
import numpy as np
import pytest
from scipy import sparse
from scipy.stats import ortho_group

import conftest
from gradcheck import max_rel_error, numeric_grad
from oracles import (
    brute_force_radial_counts,
    brute_force_similarity_counts,
    mf_vector_lookup,
    mp_singular_values,
)
from geotower.cli import main
from geotower.dataset import load_impressions
from geotower.metrics import covariance_spectrum, information_abundance
from geotower.models import AlsConfig, ModelArtifact, als_fit
from geotower.numeric import (
    Embedding,
    dense_backward,
    dense_forward,
    l2_normalize_backward,
    l2_normalize_rows,
)
from geotower.rerank import SimConfig, embed_house, radial_filter_replay, replay
from geotower.spatial_index import (
    cell_to_parent,
    format_cell,
    latlng_to_cell,
    make_cell,
    parse_cell,
)
from geotower.training import infonce_masked_loss

pytestmark = pytest.mark.slow

MODELS = ("mf", "tower_r9", "tower_multi")


def criterion(name: str, checks: dict[str, tuple[bool, str]]):
    """Record one line per criterion, then fail if any sub-check failed."""
    ok = all(passed for passed, _ in checks.values())
    detail = "; ".join(f"{k}: {'ok' if p else 'FAILED'} ({d})" for k, (p, d) in checks.items())
    line = f"{'PASS' if ok else 'FAIL'}  {name} -- {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------- fixtures


@pytest.fixture(scope="session")
def default_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    runs, seconds = [], []
    for name in ("a", "b"):
        t0 = time.perf_counter()
        assert main(["pipeline", "--seed", "42", "--out", str(root / name)]) == 0
        seconds.append(time.perf_counter() - t0)
        runs.append(root / name)
    return runs, seconds


@pytest.fixture(scope="session")
def run_a(default_runs):
    root = default_runs[0][0]
    arts = {k: ModelArtifact.load(root / "models" / k) for k in MODELS}
    imps = load_impressions(root / "data" / "impressions.csv")
    return root, arts, imps


# --------------------------------------------------------------- criteria


def test_gradient_validation():
    t0 = time.perf_counter()
    worst = {"dense": 0.0, "dense_relu": 0.0, "embedding": 0.0, "l2_normalize": 0.0, "infonce": 0.0}
    n_cases = 24
    for seed in range(n_cases):
        rng = np.random.default_rng(1000 + seed)
        n, i, o = (int(x) for x in rng.integers(1, 7, size=3))
        W, b, X = rng.normal(size=(o, i)), rng.normal(size=o), rng.normal(size=(n, i))
        R = rng.normal(size=(n, o))
        for key, relu in (("dense", False), ("dense_relu", True)):
            _, cache = dense_forward(W, b, X, relu)
            dW, db, dX = dense_backward(cache, R)
            f = lambda: float(np.sum(dense_forward(W, b, X, relu)[0] * R))
            for a, x in ((dW, W), (db, b), (dX, X)):
                worst[key] = max(worst[key], max_rel_error(a, numeric_grad(f, x)))

        emb = Embedding("e", int(rng.integers(2, 8)), int(rng.integers(1, 6)), seed)
        idx = rng.integers(0, emb.table.value.shape[0], size=int(rng.integers(1, 10)))
        Re = rng.normal(size=(idx.size, emb.table.value.shape[1]))
        _, c = emb.forward(idx)
        emb.backward(c, Re)
        f = lambda: float(np.sum(emb.forward(idx)[0] * Re))
        worst["embedding"] = max(worst["embedding"], max_rel_error(emb.table.grad, numeric_grad(f, emb.table.value)))

        Z = rng.normal(size=(n, int(rng.integers(2, 6))))
        Rz = rng.normal(size=Z.shape)
        _, cn = l2_normalize_rows(Z)
        f = lambda: float(np.sum(l2_normalize_rows(Z)[0] * Rz))
        worst["l2_normalize"] = max(worst["l2_normalize"], max_rel_error(l2_normalize_backward(cn, Rz), numeric_grad(f, Z)))

        B, d = int(rng.integers(2, 9)), int(rng.integers(2, 6))
        U, V = rng.normal(size=(B, d)), rng.normal(size=(B, d))
        mask = rng.random((B, B)) < 0.3
        np.fill_diagonal(mask, True)
        T = float(rng.uniform(0.1, 1.0))
        _, dU, dV = infonce_masked_loss(U, V, mask, T)
        f = lambda: infonce_masked_loss(U, V, mask, T)[0]
        worst["infonce"] = max(worst["infonce"], max_rel_error(dU, numeric_grad(f, U)),
                               max_rel_error(dV, numeric_grad(f, V)))
    seconds = time.perf_counter() - t0
    checks = {k: (v < 1e-4, f"max rel err {v:.2e} over {n_cases} cases") for k, v in worst.items()}
    checks["runtime"] = (seconds < 30, f"{seconds:.1f}s < 30s")
    criterion("gradient validation", checks)


def test_closed_form_loss():
    eye = np.eye(2, dtype=bool)
    l_uniform = infonce_masked_loss(np.array([[1.0, 0], [1, 0]]), np.array([[1.0, 0], [1, 0]]), eye, 1.0)[0]
    l_ident = infonce_masked_loss(np.eye(2), np.eye(2), eye, 1.0)[0]

    rng = np.random.default_rng(0)
    U = rng.normal(size=(5, 4))
    V = rng.normal(size=(5, 4))
    mask = np.eye(5, dtype=bool)
    mask[0, 3] = mask[2, 1] = True
    _, dU, _ = infonce_masked_loss(U, V, mask, 0.1)
    # a masked logit carries zero gradient exactly: moving only the masked
    # location leaves that row's user gradient bitwise unchanged
    zero_grad = True
    for row, col in ((0, 3), (2, 1)):
        V2 = V.copy()
        V2[col] += rng.normal(size=4)
        _, dU2, _ = infonce_masked_loss(U, V2, mask, 0.1)
        zero_grad &= np.array_equal(dU[row], dU2[row])

    lone = infonce_masked_loss(np.eye(2), np.eye(2), np.array([[True, True], [False, True]]), 1.0)
    row0_zero = lone[0] == pytest.approx(math.log1p(math.exp(-1)) / 2, abs=1e-15) and not lone[1][0].any()

    criterion("closed-form loss checks", {
        "uniform B=2 is ln 2": (abs(l_uniform - math.log(2)) < 1e-12, f"|diff| {abs(l_uniform - math.log(2)):.1e}"),
        "[[1,0],[0,1]] is ln(1+e^-1)": (abs(l_ident - math.log1p(math.exp(-1))) < 1e-12,
                                       f"|diff| {abs(l_ident - math.log1p(math.exp(-1))):.1e}"),
        "masked logits zero gradient": (zero_grad and row0_zero, "bitwise"),
    })


def test_ia_properties():
    rng = np.random.default_rng(7)
    ident = information_abundance(np.eye(4)).ia
    rank1 = information_abundance(np.outer([1.0, 2.0], [3.0, 4.0])).ia
    scale_err = rot_err = oracle_err = 0.0
    for seed in range(20):
        E = rng.normal(size=(int(rng.integers(2, 30)), int(rng.integers(2, 10))))
        base = information_abundance(E).ia
        c = float(rng.choice([-1, 1]) * 10 ** rng.uniform(-3, 3))
        scale_err = max(scale_err, abs(information_abundance(c * E).ia - base) / base)
        Q = ortho_group.rvs(E.shape[1], random_state=seed)
        rot_err = max(rot_err, abs(information_abundance(E @ Q).ia - base))
    for seed in range(5):
        E = np.random.default_rng(seed).normal(size=(20, 8))
        s = mp_singular_values(E)
        oracle_err = max(oracle_err, abs(information_abundance(E).ia - sum(s) / s[0]))
    criterion("IA properties", {
        "identity 4x4": (ident == 4.0, f"{ident!r}"),
        "rank-1": (rank1 == 1.0, f"{rank1!r}"),
        "scale invariance": (scale_err < 1e-9, f"max rel err {scale_err:.1e}"),
        "rotation invariance": (rot_err < 1e-9, f"max err {rot_err:.1e}"),
        "oracle agreement": (oracle_err < 1e-9, f"max err {oracle_err:.1e} vs 50-digit eigensolver"),
    })


def test_als():
    worst_increase, steps = -np.inf, 0
    for seed in range(10):
        rng = np.random.default_rng(200 + seed)
        nu, ni = int(rng.integers(3, 20)), int(rng.integers(3, 15))
        M = (rng.random((nu, ni)) < 0.3) * rng.integers(1, 5, size=(nu, ni))
        M[0, 0] += 1
        cfg = AlsConfig(factors=int(rng.integers(1, 6)), alpha=float(rng.uniform(1, 40)),
                        reg=float(rng.uniform(0.01, 1)), iterations=10, seed=seed)
        obj = np.array(als_fit(sparse.csr_matrix(M.astype(float)), cfg).objective)
        steps += obj.size - 1
        worst_increase = max(worst_increase, float(np.max(np.diff(obj) / np.abs(obj[:-1]))))

    one = als_fit(sparse.csr_matrix([[1.0]]), AlsConfig(factors=1, iterations=10))
    s11 = float((one.user_factors @ one.item_factors.T)[0, 0])

    # rank-2 reconstruction vs a brute-force multi-start minimisation of
    # the dense weighted objective
    rng = np.random.default_rng(5)
    A, Bm = rng.random((6, 2)), rng.random((5, 2))
    M = np.round(3 * A @ Bm.T)
    alpha, reg = 2.0, 0.05
    res = als_fit(sparse.csr_matrix(M), AlsConfig(factors=2, alpha=alpha, reg=reg, iterations=300))
    ref = _rank2_oracle(M, alpha, reg)
    err = float(np.abs(res.user_factors @ res.item_factors.T - ref).max())
    criterion("ALS", {
        "monotone objective": (worst_increase <= 1e-12,
                               f"largest relative step change {worst_increase:.1e} over {steps} steps"),
        "1x1 closed form": (0.9 <= s11 <= 1.0, f"x'y = {s11:.6f}"),
        "rank-2 vs oracle": (err < 1e-3, f"max |diff| {err:.1e}"),
    })


def _rank2_oracle(M, alpha, reg):
    """Best reconstruction from many independent L-BFGS descents on the dense objective."""
    from scipy import optimize

    P, C = (M > 0).astype(float), 1 + alpha * M
    nu, ni = M.shape

    def f(z):
        X, Y = z[:nu * 2].reshape(nu, 2), z[nu * 2:].reshape(ni, 2)
        R = C * (X @ Y.T - P)
        val = float(np.sum(C * (P - X @ Y.T) ** 2) + reg * (np.sum(X * X) + np.sum(Y * Y)))
        return val, np.concatenate([(2 * R @ Y + 2 * reg * X).ravel(), (2 * R.T @ X + 2 * reg * Y).ravel()])

    best = min((optimize.minimize(f, np.random.default_rng(s).normal(size=2 * (nu + ni)), jac=True,
                                  method="L-BFGS-B",
                                  options={"gtol": 1e-12, "ftol": 1e-15, "maxiter": 20000})
                for s in range(8)), key=lambda r: r.fun)
    X, Y = best.x[:nu * 2].reshape(nu, 2), best.x[nu * 2:].reshape(ni, 2)
    return X @ Y.T


# recorded from the reference implementation, except the res-6 entry which
# is copied verbatim from the criterion text
CRITERION_PARENTS = {
    9: "8928308280fffff", 8: "8828308281fffff", 7: "872830828ffffff", 6: "862830807ffffff",
}


def test_h3_codec():
    rng = random.Random(0)
    n_rt, rt_ok = 10_000, 0
    for _ in range(n_rt):
        while True:
            res = rng.randint(0, 15)
            c = make_cell(res, rng.randint(0, 121), [rng.randint(0, 6) for _ in range(res)])
            if h3.is_valid_cell(format_cell(c)):
                break
        text = format_cell(c)
        rt_ok += parse_cell(text) == c and format_cell(parse_cell(text)) == text
    child = parse_cell("8928308280fffff")
    parent_rows = [(r, format_cell(cell_to_parent(child, r)), want) for r, want in CRITERION_PARENTS.items()]
    parents_ok = [got == want for _, got, want in parent_rows]
    mismatch = [f"res {r}: got {got}, criterion says {want}, h3 says {h3.cell_to_parent('8928308280fffff', r)}"
                for (r, got, want), ok in zip(parent_rows, parents_ok) if not ok]

    # points uniform on the sphere
    nrng = np.random.default_rng(0)
    n_pts = 10_000
    z = nrng.uniform(-1, 1, n_pts)
    lats, lngs = np.degrees(np.arcsin(z)), nrng.uniform(-180, 180, n_pts)
    agree = sum(
        cell_to_parent(latlng_to_cell(la, lo, 9), 6) == latlng_to_cell(la, lo, 6) for la, lo in zip(lats, lngs)
    ) / n_pts
    ref_agree = sum(
        h3.cell_to_parent(h3.latlng_to_cell(la, lo, 9), 6) == h3.latlng_to_cell(la, lo, 6)
        for la, lo in zip(lats, lngs)
    ) / n_pts
    criterion("H3 codec", {
        "round-trip on 10^4 valid cells": (rt_ok == n_rt, f"{rt_ok}/{n_rt}"),
        "parent vectors": (all(parents_ok), "; ".join(mismatch) or "all match"),
        "direct vs truncated res-6 >= 99%": (agree >= 0.99,
                                             f"{100 * agree:.2f}% (reference h3 gives {100 * ref_agree:.2f}%)"),
    })


def test_simulator_oracle_equivalence(run_a):
    _, arts, imps = run_a
    cfg = SimConfig()
    t0 = time.perf_counter()
    reports = {k: replay(imps, a, cfg) for k, a in arts.items()}
    radial = radial_filter_replay(imps, cfg)
    seconds = time.perf_counter() - t0
    checks = {}
    for k, rep in reports.items():
        if k == "mf":
            vector_of = mf_vector_lookup(arts[k])
        else:
            vector_of = lambda h, a=arts[k]: embed_house(a, h)
        oracle = brute_force_similarity_counts(imps, vector_of, cfg.tau_grid)
        bad = [p.threshold for p in rep.points if (p.retained, p.rent_flows) != oracle[p.threshold]]
        checks[k] = (not bad, f"{len(rep.points)} grid points" + (f", mismatched at {bad}" if bad else ""))
    oracle = brute_force_radial_counts(imps, cfg.radius_grid_km)
    bad = [p.threshold for p in radial.points if (p.retained, p.rent_flows) != oracle[p.threshold]]
    checks["radial"] = (not bad, f"{len(radial.points)} radii" + (f", mismatched at {bad}" if bad else ""))
    checks["log size"] = (len(imps) == 100_000, f"{len(imps)} impressions")
    checks["runtime"] = (seconds < 60, f"{seconds:.1f}s < 60s for 4 replays")
    criterion("simulator oracle equivalence", checks)


def test_model_ordering(default_runs, run_a):
    _, arts, imps = run_a
    seconds = default_runs[1][0]
    ia = {k: information_abundance(a.location_embeddings).ia for k, a in arts.items()}
    reps = {k: replay(imps, a) for k, a in arts.items()}
    up = {k: r.avg_uplift_pct for k, r in reps.items()}
    keep_all = {k: r.points[0].uplift_pct for k, r in reps.items()}
    fmt = lambda d: ", ".join(f"{k} {v:.2f}" for k, v in d.items())
    n_its = sum(1 for _ in (default_runs[0][0] / "data" / "interactions.csv").open()) - 1
    criterion("model ordering", {
        "IA multi > r9": (ia["tower_multi"] > ia["tower_r9"], fmt(ia)),
        "IA r9 > mf": (ia["tower_r9"] > ia["mf"], fmt(ia)),
        "uplift multi > r9 > mf": (up["tower_multi"] > up["tower_r9"] > up["mf"], fmt(up)),
        "uplift mf >= 0": (up["mf"] >= 0, f"{up['mf']:.2f}"),
        "uplift 0 at keep-all": (all(v == 0.0 for v in keep_all.values()), fmt(keep_all)),
        "data size": (len(imps) == 100_000, f"{n_its} logged interactions, {len(imps)} impressions"),
        "pipeline runtime": (seconds < 600, f"{seconds:.0f}s < 600s"),
    })


def test_spectrum_shape(run_a):
    _, arts, _ = run_a
    decay = {k: covariance_spectrum(arts[k].location_embeddings).decay for k in ("tower_r9", "tower_multi")}
    n_finite = {k: int(np.isfinite(covariance_spectrum(arts[k].location_embeddings).log_singular_values).sum())
                for k in decay}
    criterion("spectrum shape", {
        "decay multi <= r9": (decay["tower_multi"] <= decay["tower_r9"],
                              f"ln s1 - ln s32: multi {decay['tower_multi']:.4f}, r9 {decay['tower_r9']:.4f}"),
        "spectra complete": (all(v == 32 for v in n_finite.values()), f"non-sentinel values {n_finite}"),
    })


def test_determinism(default_runs):
    (a, b), _ = default_runs
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.name != "run_log.jsonl")
    differ = [str(f) for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    expected = {Path("reports/metrics_summary.json"), Path("reports/curves.csv"), Path("reports/spectrum.csv")}
    expected |= {Path("models") / k / "location_embeddings.csv" for k in MODELS}
    missing = sorted(str(p) for p in expected - set(files))
    criterion("determinism", {
        "byte-identical outputs": (not differ and not missing,
                                   f"{len(files)} files compared" + (f", differ: {differ}" if differ else "")
                                   + (f", missing: {missing}" if missing else "")),
    })
