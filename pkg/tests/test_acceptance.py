"""End-to-end acceptance checks, one test per numbered criterion.

Each test reports through the ``criterion`` fixture, which prints a PASS/FAIL line and
collects it for the summary at the end of the run.
"""

import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from eigencl import cli
from eigencl import encoder as enc
from eigencl.analysis.classify import knn_classify, logreg_classify, logreg_loss, logreg_train
from eigencl.analysis.staging import cluster_mean_ndre, stage_array, thresholds_from_centroids
from eigencl.analysis.stats import anova_oneway, cluster_statistics, pooled_t
from eigencl.analysis.transfer import FrozenPipeline, evaluate, transfer_evaluate
from eigencl.clustering import (
    adjusted_rand_index,
    ari_bootstrap_ci,
    calinski_harabasz,
    davies_bouldin,
    kmeans,
    silhouette,
)
from eigencl.data import SynthConfig, synthesize
from eigencl.objective import LossHyper, eigencl_loss, ntxent_loss, pull_loss, push_loss
from eigencl.spectral import (
    eigen_decompose,
    explained_variance_ratio,
    median_heuristic_gamma,
    rbf_matrix,
    stress_weights,
    weight_ndre_correlation,
)
from eigencl.trainer import GridSpec, TrainConfig, embed_dataset, grid_search, split_indices, train

import oracles

CORPUS = SynthConfig(n_patches=2000, noise_sd=0.02, seed=7)
SEEDS = (0, 1, 2)
SHIFT = dict(onset_day_range=(20, 30), noise_sd=CORPUS.noise_sd * 1.5)


class Run:
    """Everything fitted for one training seed on the default corpus."""

    def __init__(self, data, weights, seed):
        self.seed = seed
        ec = enc.EncoderConfig()
        self.params, self.history = train(data, weights, ec, TrainConfig(seed=seed))
        self.z = embed_dataset(self.params, data).z
        self.model = kmeans(self.z, 4, seed=seed)
        self.means = cluster_mean_ndre(data, self.model.labels, 4)
        self.thresholds = thresholds_from_centroids(self.means)
        self.stages = stage_array(data.mean_ndre, self.thresholds)
        self.frozen = FrozenPipeline(self.params, self.model, self.thresholds, self.means)
        abl, _ = train(data, weights, ec, TrainConfig(seed=seed, loss_kind="cosine-ablation"))
        self.z_abl = embed_dataset(abl, data).z
        self.model_abl = kmeans(self.z_abl, 4, seed=seed)
        self.model_raw = kmeans(data.values, 4, seed=seed)


@pytest.fixture(scope="module")
def corpus():
    data = synthesize(CORPUS)
    t0 = time.perf_counter()
    kernel = rbf_matrix(data, median_heuristic_gamma(data))
    basis = eigen_decompose(kernel, 2)
    weights = stress_weights(basis)
    seconds = time.perf_counter() - t0
    return data, basis, weights, seconds


@pytest.fixture(scope="module")
def runs(corpus):
    data, _, weights, _ = corpus
    return [Run(data, weights, s) for s in SEEDS]


@pytest.fixture(scope="module")
def in_domain(corpus, runs):
    data = corpus[0]
    return [evaluate(r.frozen, data) for r in runs]


def fmt(x):
    return "none" if x is None else f"{x:.2f}"


def unit_rows(rng, b, d):
    z = rng.normal(size=(b, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def test_criterion_01_kernel_and_eigen(criterion):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    problems = []
    worst = 0.0
    for i in range(200):
        n, t = int(rng.integers(2, 51)), int(rng.integers(1, 9))
        x = rng.uniform(-1, 1, (n, t))
        kernel = rbf_matrix(x, median_heuristic_gamma(x) if n > 2 else 1.0)
        k = kernel.entries
        if not (np.array_equal(k, k.T) and np.all(np.diag(k) == 1.0) and np.all(k > 0)):
            problems.append(f"dataset {i}: kernel structure")
        basis = eigen_decompose(kernel, n)
        v = basis.eigenvectors
        err = np.linalg.norm(k - (v * basis.eigenvalues) @ v.T) / np.linalg.norm(k)
        worst = max(worst, err)
        if err > 1e-6:
            problems.append(f"dataset {i}: reconstruction {err:.2e}")
        if not np.all(stress_weights(basis, 0).w > 0):
            problems.append(f"dataset {i}: principal eigenvector not positive")
    seconds = time.perf_counter() - t0
    ok = not problems and seconds < 30
    criterion(1, ok, f"200 datasets, worst reconstruction {worst:.1e}, {seconds:.1f}s {problems[:3]}")


def test_criterion_02_spectral_structure(criterion, corpus):
    data, basis, weights, seconds = corpus
    ratio = explained_variance_ratio(basis)[0]
    r = weight_ndre_correlation(weights, data)
    ok = ratio >= 0.60 and abs(r) >= 0.90 and seconds < 120
    criterion(2, ok, f"principal ratio {ratio:.3f} (>= 0.60), |r| {abs(r):.3f} (>= 0.90), {seconds:.1f}s")


def _encoder_grad_error(rng, seed):
    b = int(rng.integers(3, 9))
    params = enc.init(enc.EncoderConfig(input_dim=5, hidden_dims=(6, 4), embed_dim=3, seed=seed, features="raw"))
    x, G = rng.normal(size=(b, 5)), rng.normal(size=(b, 3))
    _, cache = enc.forward(params, x, "train")
    analytic = enc.backward(cache, G)

    def loss():
        return float(np.sum(G * enc.forward(params, x, "train")[0].z))

    keys = sorted(analytic)
    numeric = [oracles.central_difference(loss, params.weights[k]).ravel() for k in keys]
    return oracles.rel_error(np.concatenate([analytic[k].ravel() for k in keys]), np.concatenate(numeric))


def test_criterion_03_gradient_integrity(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = {"eigencl": 0.0, "ntxent": 0.0, "encoder": 0.0, "logreg": 0.0}
    for i in range(100):
        z, w = unit_rows(rng, int(rng.integers(2, 7)), 8), None
        w = rng.uniform(0, 1, z.shape[0])
        hyper = LossHyper(lam=rng.uniform(1, 6), tau=rng.uniform(0.05, 0.2), sigma=rng.uniform(0.2, 1),
                          margin=rng.uniform(0, 0.4))
        _, g = eigencl_loss(z, w, hyper)
        num = oracles.central_difference(lambda: eigencl_loss(z, w, hyper)[0], z)
        worst["eigencl"] = max(worst["eigencl"], oracles.rel_error(g, num))

        b = int(rng.integers(2, 6))
        za, zb, tau = unit_rows(rng, b, 6), unit_rows(rng, b, 6), rng.uniform(0.1, 1.0)
        _, ga, gb = ntxent_loss(za, zb, tau)
        na = oracles.central_difference(lambda: ntxent_loss(za, zb, tau)[0], za)
        nb = oracles.central_difference(lambda: ntxent_loss(za, zb, tau)[0], zb)
        worst["ntxent"] = max(worst["ntxent"], oracles.rel_error(np.vstack([ga, gb]), np.vstack([na, nb])))

        worst["encoder"] = max(worst["encoder"], _encoder_grad_error(rng, i))

        n, d, c = int(rng.integers(2, 12)), int(rng.integers(1, 5)), int(rng.integers(2, 5))
        x, codes = rng.normal(size=(n, d)), rng.integers(0, c, n)
        W, bias, l2 = rng.normal(size=(d, c)), rng.normal(size=c), float(rng.uniform(0, 0.1))
        _, gW, gbias = logreg_loss(W, bias, x, codes, l2)
        nW = oracles.central_difference(lambda: logreg_loss(W, bias, x, codes, l2)[0], W)
        nbias = oracles.central_difference(lambda: logreg_loss(W, bias, x, codes, l2)[0], bias)
        err = oracles.rel_error(np.concatenate([gW.ravel(), gbias]), np.concatenate([nW.ravel(), nbias]))
        worst["logreg"] = max(worst["logreg"], err)
    seconds = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-4 and seconds < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    criterion(3, ok, f"100 instances each, worst relative error: {detail}; {seconds:.1f}s")


def test_criterion_04_loss_unit_values(criterion):
    # every reference value below is recomputed by hand with the math module
    checks = []
    orthogonal = 2 * math.exp(-2.0) * math.log(1 + 1 / 0.075) / 2
    checks.append(("B=2 orthogonal", eigencl_loss(np.eye(2), np.array([0.0, 1.0]), LossHyper())[0], orthogonal))
    checks.append(("fixed point", eigencl_loss(np.array([[1.0, 0.0], [1.0, 0.0]]), np.array([0.3, 0.3]),
                                                LossHyper())[0], 0.0))
    sim = np.array([[1.0, 0.925], [0.925, 1.0]])
    checks.append(("pull single pair", pull_loss(sim, np.ones((2, 2)), 0.075), 2 * math.log(2)))
    sim = np.array([[1.0, 0.5], [0.5, 1.0]])
    checks.append(("push single pair", push_loss(sim, np.zeros((2, 2)), 4.0, 0.2), 2.4))
    za = np.eye(4)[:2]
    checks.append(("nt-xent toy", ntxent_loss(za, za.copy(), 0.5)[0], -math.log(math.e**2 / (math.e**2 + 2))))
    errors = {name: abs(got - ref) for name, got, ref in checks}
    ok = max(errors.values()) <= 1e-9
    criterion(4, ok, f"B=2 orthogonal = {checks[0][1]:.10f} (recomputed; the listed 0.357044 is an arithmetic slip), "
                     f"max error {max(errors.values()):.1e}")


def _random_labelled(rng):
    n = int(rng.integers(3, 13))
    k = int(rng.integers(2, min(n - 1, 5) + 1))
    X = rng.normal(size=(n, int(rng.integers(1, 4))))
    labels = np.concatenate([np.arange(k), rng.integers(0, k, n - k)])
    rng.shuffle(labels)
    return X, labels


def test_criterion_05_metric_oracles(criterion):
    rng = np.random.default_rng(5)
    worst = {"silhouette": 0.0, "dbi": 0.0, "chi_rel": 0.0, "ari": 0.0}
    for _ in range(1000):
        X, labels = _random_labelled(rng)
        worst["silhouette"] = max(worst["silhouette"], abs(silhouette(X, labels) - oracles.silhouette(X, labels)))
        worst["dbi"] = max(worst["dbi"], abs(davies_bouldin(X, labels) - oracles.davies_bouldin(X, labels)))
        ref = oracles.calinski_harabasz(X, labels)
        worst["chi_rel"] = max(worst["chi_rel"], abs(calinski_harabasz(X, labels) - ref) / max(1.0, abs(ref)))
        other = rng.integers(0, 4, len(labels))
        worst["ari"] = max(worst["ari"], abs(adjusted_rand_index(labels, other)
                                             - oracles.ari_pairs(list(labels), list(other))))
    ok = max(worst.values()) <= 1e-12
    criterion(5, ok, "1000 labelings, worst: " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def test_criterion_06_method_ordering(criterion, corpus, runs):
    data = corpus[0]
    rows, ok = [], True
    for r in runs:
        s_e, d_e = silhouette(r.z, r.model.labels), davies_bouldin(r.z, r.model.labels)
        s_a, d_a = silhouette(r.z_abl, r.model_abl.labels), davies_bouldin(r.z_abl, r.model_abl.labels)
        s_r, d_r = silhouette(data.values, r.model_raw.labels), davies_bouldin(data.values, r.model_raw.labels)
        ok &= s_e > s_a and s_e > s_r and d_e < d_a and d_e < d_r
        rows.append(f"seed {r.seed}: sil {s_e:.3f}/{s_a:.3f}/{s_r:.3f} dbi {d_e:.3f}/{d_a:.3f}/{d_r:.3f}")
    criterion(6, ok, "eigencl/ablation/raw k-means; " + "; ".join(rows))


def test_criterion_07_ari_vs_stages(criterion, runs):
    rows, ok = [], True
    for r in runs:
        ari, lo, hi = ari_bootstrap_ci(r.model.labels, r.stages, 1000, r.seed)
        ok &= ari >= 0.70 and hi - lo < 0.1
        rows.append(f"seed {r.seed}: ARI {ari:.3f} CI [{lo:.3f}, {hi:.3f}]")
    criterion(7, ok, "; ".join(rows))


def test_criterion_08_downstream_classifiers(criterion, runs):
    rows, ok = [], True
    for r in runs:
        tr, te = split_indices(len(r.z), 0.7, r.seed)
        _, knn = knn_classify(r.z[tr], r.stages[tr], r.z[te], r.stages[te], 5)
        _, lr = logreg_classify(logreg_train(r.z[tr], r.stages[tr], seed=r.seed), r.z[te], r.stages[te])
        ok &= knn.accuracy >= 0.85 and lr.accuracy >= 0.80 and knn.accuracy >= lr.accuracy
        rows.append(f"seed {r.seed}: k-NN {knn.accuracy:.3f} logreg {lr.accuracy:.3f}")
    criterion(8, ok, "; ".join(rows))


def test_criterion_09_early_detection(criterion, in_domain):
    rows, ok = [], True
    for seed, rep in zip(SEEDS, in_domain):
        lead = rep.lead
        consistent = all(
            v == (None if d is None or c is None else c - d)
            for d, c, v in zip(lead.detection_day, lead.crossing_day, lead.lead_days)
        )
        early = lead.fraction_early if lead.fraction_early is not None else float("nan")
        mean = lead.mean_lead_days if lead.mean_lead_days is not None else float("nan")
        ok &= consistent and early >= 0.70 and mean > 0
        rows.append(f"seed {seed}: fraction_early {early:.3f} mean lead {mean:.2f} d, arithmetic "
                    + ("exact" if consistent else "INCONSISTENT"))
    criterion(9, ok, "; ".join(rows))


def test_criterion_10_statistics(criterion, corpus, runs):
    data = corpus[0]
    r = runs[0]
    rep = cluster_statistics(data.mean_ndre, r.model.labels, shuffles=10_000, seed=0)
    worst_tukey = max(row.p_value for row in rep.pairwise)
    rng = np.random.default_rng(10)
    worst_ft = 0.0
    for _ in range(1000):
        a, b = rng.normal(0, 1, int(rng.integers(2, 30))), rng.normal(rng.uniform(-1, 1), 1, int(rng.integers(2, 30)))
        f, _ = anova_oneway([a, b])
        worst_ft = max(worst_ft, abs(f - pooled_t(a, b) ** 2) / max(1.0, f))
    ok = rep.anova_p < 1e-6 and worst_tukey < 0.01 and worst_ft <= 1e-9
    criterion(10, ok, f"ANOVA F {rep.anova_f:.1f} p {rep.anova_p:.1e}; max Tukey p {worst_tukey:.1e} over "
                      f"{len(rep.pairwise)} pairs; max |F - t^2| {worst_ft:.1e}")


def test_criterion_11_transfer(criterion, corpus, runs, in_domain):
    rows, ok = [], True
    for r, home in zip(runs, in_domain):
        shifted = synthesize(replace(CORPUS, seed=CORPUS.seed + 100 + r.seed, **SHIFT))
        before = enc.checkpoint_json(r.params)
        away = transfer_evaluate(r.frozen, shifted)
        frozen_ok = enc.checkpoint_json(r.params) == before
        s_home, s_away = home.validity.silhouette, away.validity.silhouette
        l_home, l_away = home.lead.mean_lead_days, away.lead.mean_lead_days
        lead_ok = l_home is not None and l_away is not None and abs(l_away - l_home) <= 0.3 * abs(l_home)
        ok &= frozen_ok and s_away >= 0.9 * s_home and lead_ok
        rows.append(f"seed {r.seed}: silhouette {s_away:.3f} vs {s_home:.3f}, lead {fmt(l_away)} vs {fmt(l_home)} d")
    criterion(11, ok, "; ".join(rows))


COMMAND_ORDER = cli.PIPELINE[:-1] + ("gridsearch", "report")


def _data_outputs(root):
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.parent.name != "manifests":
            text = p.read_bytes()
            if p.name == cli.HISTORY:
                # wall-clock seconds are the only non-deterministic column
                text = b"\n".join(b",".join(ln.split(b",")[:3]) for ln in text.splitlines())
            out[str(p.relative_to(root))] = text
    return out


def test_criterion_12_cli_determinism(criterion, tmp_path):
    cfg = {
        "stats": {"shuffles": 2000},
        "transfer": {"synth": {"n_patches": 500, "noise_sd": 0.03, "onset_day_range": [20, 30]}},
        "grid": {"epochs": 2, "lam": [2, 4], "tau": [0.075, 0.1], "sigma": [0.5], "margin": [0.2]},
        "seed": 1,
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    snaps, codes = [], []
    for name in ("a", "b"):
        out = tmp_path / name
        for cmd in COMMAND_ORDER:
            codes.append((cmd, cli.main([cmd, "--config", str(path), "--out", str(out)])))
        snaps.append(_data_outputs(out))
    combined = tmp_path / "c"
    codes.append(("run-all", cli.main(["run-all", "--config", str(path), "--out", str(combined)])))
    run_all = {k: v for k, v in _data_outputs(combined).items() if k not in (cli.GRID_CSV, cli.GRID_JSON)}
    sequential = {k: v for k, v in snaps[0].items() if k not in (cli.GRID_CSV, cli.GRID_JSON)}
    bad = [c for c in codes if c[1] != 0]
    differing = sorted(k for k in snaps[0] if snaps[0][k] != snaps[1].get(k))
    ok = not bad and snaps[0].keys() == snaps[1].keys() and not differing and run_all == sequential
    criterion(12, ok, f"{len(COMMAND_ORDER)} commands, {len(snaps[0])} data files rerun byte-identical; "
                      f"run-all matches: {run_all == sequential}; failures {bad} differing {differing}")


def test_criterion_13_grid_search(criterion, corpus):
    data, _, weights, _ = corpus
    ec = enc.EncoderConfig()
    t0 = time.perf_counter()
    full = grid_search(data, weights, GridSpec(), ec, TrainConfig(epochs=2, seed=0), restarts=3)
    full_seconds = time.perf_counter() - t0
    sub = GridSpec(lam=(2.0, 4.0), tau=(0.075, 0.1), sigma=(0.3, 0.5), margin=(0.1, 0.2))
    t0 = time.perf_counter()
    first = grid_search(data, weights, sub, ec, TrainConfig(epochs=2, seed=0), restarts=3)
    second = grid_search(data, weights, sub, ec, TrainConfig(epochs=2, seed=0), restarts=3)
    sub_seconds = (time.perf_counter() - t0) / 2
    ranks = sorted(r.rank for r in full.rows)
    ok = (
        len(full.rows) == 192 and ranks == list(range(1, 193)) and not any(r.failed for r in full.rows)
        and len(first.rows) == 16 and first.to_csv() == second.to_csv() and full_seconds < 3600
        and sub_seconds < 600
    )
    best = full.best.hyper.to_dict()
    criterion(13, ok, f"full grid {len(full.rows)} cells in {full_seconds:.0f}s, best {best}; "
                      f"2x2x2x2 sub-grid reproducible: {first.to_csv() == second.to_csv()} ({sub_seconds:.0f}s)")
