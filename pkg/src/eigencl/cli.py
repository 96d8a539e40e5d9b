"""Command-line pipeline: synth, eigen, train, embed, cluster, stage, detect, classify,
transfer, gridsearch, report and run-all.

Every command reads its inputs from the output directory (or the configured dataset),
writes its outputs there, and records a manifest under ``manifests/`` with the
hashes of everything it read and wrote. A command refuses to run on inputs whose
producing step is out of date unless ``--force`` is given.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import encoder as enc
from .analysis import classify as cls
from .analysis import detection as det
from .analysis import staging as stg
from .analysis.stats import cluster_statistics
from .analysis.transfer import FrozenPipeline, evaluate
from .clustering import ClusterModel, adjusted_rand_index, ari_bootstrap_ci, elbow, kmeans, validity_report
from .data import Dataset, Stage, SynthConfig, dataset_to_csv, load_dataset, synthesize
from .errors import ConfigError, EigenCLError, NumericalError
from .objective import LossHyper
from .spectral import (
    eigen_decompose,
    explained_variance_ratio,
    median_heuristic_gamma,
    rbf_matrix,
    stress_weights,
    weight_ndre_correlation,
    weights_from_csv,
    weights_to_csv,
)
from .trainer import GridSpec, TrainConfig, embed_dataset, grid_search, split_indices, train

log = logging.getLogger("eigencl")

MANIFEST_SCHEMA = "eigencl-manifest/1"
EXIT_OK, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2

# fixed file names inside the output directory
DATASET = "dataset.csv"
WEIGHTS = "weights.csv"
SPECTRUM = "spectrum.csv"
EIGEN_JSON = "eigen.json"
CHECKPOINT = "checkpoint.json"
HISTORY = "history.csv"
EMBEDDINGS = "embeddings.csv"
CLUSTERS = "clusters.csv"
CENTROIDS = "centroids.csv"
CLUSTER_JSON = "cluster.json"
ELBOW = "elbow.csv"
STAGES = "stages.csv"
THRESHOLDS = "thresholds.json"
PROFILES = "profiles.csv"
STATS = "stats.json"
DETECTION = "detection.csv"
LEAD_HIST = "lead_histogram.csv"
DETECT_JSON = "detect.json"
PREDICTIONS = "predictions.csv"
CLASSIFY_JSON = "classify.json"
TRANSFER_DATASET = "transfer_dataset.csv"
TRANSFER_JSON = "transfer.json"
TRANSFER_DETECTION = "transfer_detection.csv"
GRID_CSV = "grid.csv"
GRID_JSON = "grid.json"
PCA_CSV = "pca.csv"
REPORT_JSON = "report.json"

# outputs whose content legitimately varies between identical runs (wall-clock columns)
VOLATILE = {HISTORY}


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    dataset: str | None = None
    synth: dict | None = None
    gamma: str | float = "median"
    encoder: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    clustering: dict = field(default_factory=lambda: {"k": 4, "restarts": 10, "k_max": 10})
    staging: str = "centroid"
    detect: dict = field(default_factory=lambda: {"threshold": det.STRESS_THRESHOLD})
    stats: dict = field(default_factory=lambda: {"shuffles": 10_000, "permutation_anova": False})
    classify: dict = field(
        default_factory=lambda: {
            "train_fraction": 0.7,
            "k_neighbors": 5,
            "l2_penalty": 1e-4,
            "epochs": 500,
            "learning_rate": 0.5,
        }
    )
    transfer: dict = field(default_factory=dict)
    grid: dict = field(default_factory=lambda: {"epochs": 5})
    seed: int = 0
    out: str = "eigencl-out"

    KEYS = (
        "dataset", "synth", "gamma", "encoder", "train", "loss", "clustering", "staging",
        "detect", "stats", "classify", "transfer", "grid", "seed", "out",
    )

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls()
        for key, value in d.items():
            if isinstance(getattr(cfg, key), dict) and isinstance(value, dict):
                merged = dict(getattr(cfg, key))
                merged.update(value)
                value = merged
            setattr(cfg, key, value)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.KEYS}

    def validate(self) -> None:
        if self.dataset is not None and self.synth is not None:
            raise ConfigError("config may name a dataset path or a synth block, not both")
        if self.staging not in ("centroid", "fixed"):
            raise ConfigError("staging must be 'centroid' or 'fixed'")
        if not (self.gamma == "median" or (isinstance(self.gamma, (int, float)) and self.gamma > 0)):
            raise ConfigError("gamma must be 'median' or a positive number")
        k = self.clustering.get("k", 4)
        if not (k == "elbow" or (isinstance(k, int) and k >= 1)):
            raise ConfigError("clustering.k must be a positive integer or 'elbow'")
        # build every typed sub-config once so errors surface before any work
        self.synth_config()
        self.encoder_config(5)
        self.train_config()
        self.loss_hyper()

    def synth_config(self) -> SynthConfig:
        d = dict(self.synth or {})
        d.setdefault("seed", self.seed)
        try:
            return SynthConfig.from_dict(d)
        except TypeError as exc:
            raise ConfigError(f"bad synth block: {exc}") from exc

    def encoder_config(self, t: int) -> enc.EncoderConfig:
        d = dict(self.encoder)
        d.setdefault("seed", self.seed)
        kind = d.get("features", "raw")
        d.setdefault("input_dim", enc.feature_dim(t, kind))
        try:
            return enc.EncoderConfig.from_dict(d)
        except TypeError as exc:
            raise ConfigError(f"bad encoder block: {exc}") from exc

    def train_config(self) -> TrainConfig:
        d = dict(self.train)
        d.setdefault("seed", self.seed)
        try:
            return TrainConfig.from_dict(d)
        except TypeError as exc:
            raise ConfigError(f"bad train block: {exc}") from exc

    def loss_hyper(self) -> LossHyper:
        try:
            return LossHyper.from_dict(self.loss)
        except TypeError as exc:
            raise ConfigError(f"bad loss block: {exc}") from exc


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    return d


# ---------------------------------------------------------------------------
# files, hashes and manifests


class StaleUpstream(EigenCLError):
    pass


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


class Workspace:
    """Output directory plus the bookkeeping of one command invocation."""

    def __init__(self, cfg: RunConfig, force: bool = False):
        self.cfg = cfg
        self.root = Path(cfg.out)
        self.force = force
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str | None] = {}

    def path(self, name: str) -> Path:
        return self.root / name

    def manifest_path(self, command: str) -> Path:
        return self.root / "manifests" / f"{command}.json"

    def dataset_path(self) -> Path:
        return Path(self.cfg.dataset) if self.cfg.dataset is not None else self.path(DATASET)

    # -- inputs

    def require(self, path: Path) -> Path:
        if not path.exists():
            raise FileNotFoundError(2, "missing input (run the upstream command first)", str(path))
        self._check_fresh(path)
        self.inputs[self._key(path)] = sha256_file(path)
        return path

    def _key(self, path: Path) -> str:
        try:
            return str(path.resolve().relative_to(self.root.resolve()))
        except ValueError:
            return str(path.resolve())

    def _producers(self) -> dict[str, dict]:
        out = {}
        mdir = self.root / "manifests"
        if mdir.is_dir():
            for mpath in sorted(mdir.glob("*.json")):
                try:
                    m = json.loads(mpath.read_text())
                except (OSError, json.JSONDecodeError):
                    continue
                if m.get("command") == "run-all":
                    continue
                for name in m.get("outputs", {}):
                    out[name] = m
        return out

    def _check_fresh(self, path: Path, seen=None) -> None:
        """Walk the manifest chain behind ``path`` and compare every recorded hash."""
        if self.force:
            return
        seen = set() if seen is None else seen
        producers = self._producers()
        key = self._key(path)
        if key in seen or key not in producers:
            return
        seen.add(key)
        m = producers[key]
        recorded = m["outputs"][key]
        if recorded is not None and path.exists() and sha256_file(path) != recorded:
            raise StaleUpstream(
                f"{key} was modified after '{m['command']}' wrote it; rerun upstream or pass --force"
            )
        for name, digest in m.get("inputs", {}).items():
            ipath = Path(name) if Path(name).is_absolute() else self.root / name
            if not ipath.exists() or sha256_file(ipath) != digest:
                raise StaleUpstream(
                    f"'{m['command']}' output {key} is stale: its input {name} changed; "
                    "rerun upstream or pass --force"
                )
            self._check_fresh(ipath, seen)

    # -- outputs

    def write(self, name: str, text: str) -> Path:
        path = self.path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        self.outputs[name] = None if name in VOLATILE else sha256_file(path)
        return path

    def write_json(self, name: str, obj) -> Path:
        return self.write(name, dumps(obj))

    def finish(self, command: str, config_echo: dict) -> None:
        manifest = {
            "schema": MANIFEST_SCHEMA,
            "command": command,
            "tool_version": __version__,
            "seed": self.cfg.seed,
            "config": config_echo,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "volatile_outputs": sorted(n for n in self.outputs if n in VOLATILE),
        }
        mpath = self.manifest_path(command)
        mpath.parent.mkdir(parents=True, exist_ok=True)
        mpath.write_text(dumps(manifest))


# ---------------------------------------------------------------------------
# tabular helpers


def _f(v) -> str:
    return repr(float(v))


def matrix_csv(ids, X: np.ndarray, prefix: str, id_name: str = "patch_id") -> str:
    head = ",".join([id_name] + [f"{prefix}{j}" for j in range(X.shape[1])])
    rows = [",".join([str(i)] + [_f(v) for v in row]) for i, row in zip(ids, X)]
    return "\n".join([head] + rows) + "\n"


def read_matrix_csv(path: Path) -> tuple[list[str], np.ndarray]:
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if len(lines) < 2:
        raise ConfigError(f"{path} holds no rows")
    ids, rows = [], []
    for ln in lines[1:]:
        parts = ln.split(",")
        ids.append(parts[0])
        rows.append([float(v) for v in parts[1:]])
    return ids, np.array(rows)


def read_labels(path: Path) -> tuple[list[str], np.ndarray]:
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    ids, labels = [], []
    for ln in lines[1:]:
        pid, lab = ln.split(",")[:2]
        ids.append(pid)
        labels.append(int(lab))
    return ids, np.array(labels, dtype=int)


def _check_ids(expected, got, what: str) -> None:
    if list(expected) != list(got):
        raise ConfigError(f"{what} patch ids do not match the dataset")


# ---------------------------------------------------------------------------
# loaders shared by several commands


def _dataset(ws: Workspace) -> Dataset:
    return load_dataset(ws.require(ws.dataset_path()))


def _weights(ws: Workspace, dataset: Dataset):
    ids, w = weights_from_csv(ws.require(ws.path(WEIGHTS)).read_text())
    _check_ids(dataset.patch_ids, ids, "weights")
    return w


def _params(ws: Workspace) -> enc.EncoderParams:
    return enc.load_checkpoint(ws.require(ws.path(CHECKPOINT)))


def _embeddings(ws: Workspace, dataset: Dataset) -> np.ndarray:
    ids, z = read_matrix_csv(ws.require(ws.path(EMBEDDINGS)))
    _check_ids(dataset.patch_ids, ids, "embedding")
    return z


def _clusters(ws: Workspace, dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    ids, labels = read_labels(ws.require(ws.path(CLUSTERS)))
    _check_ids(dataset.patch_ids, ids, "cluster")
    _, centroids = read_matrix_csv(ws.require(ws.path(CENTROIDS)))
    return labels, centroids


def _frozen(ws: Workspace, dataset: Dataset | None = None) -> FrozenPipeline:
    params = _params(ws)
    _, centroids = read_matrix_csv(ws.require(ws.path(CENTROIDS)))
    th = json.loads(ws.require(ws.path(THRESHOLDS)).read_text())
    if len(th["cluster_mean_ndre"]) != centroids.shape[0]:
        raise ConfigError("thresholds.json and centroids.csv disagree on the cluster count; rerun upstream (stage)")
    model = ClusterModel(centroids, np.zeros(0, dtype=int), float("nan"), centroids.shape[0], ws.cfg.seed)
    return FrozenPipeline(params, model, stg.StageThresholds(tuple(th["thresholds"])),
                          np.array(th["cluster_mean_ndre"]))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(ws: Workspace, args) -> dict:
    if ws.cfg.dataset is not None:
        raise ConfigError("config names an external dataset; there is nothing to synthesize")
    sc = ws.cfg.synth_config()
    if getattr(args, "n", None) is not None:
        sc = replace(sc, n_patches=args.n)
    if getattr(args, "noise", None) is not None:
        sc = replace(sc, noise_sd=args.noise)
    data = synthesize(sc)
    ws.write(DATASET, dataset_to_csv(data))
    print(f"synthesized {len(data)} patches -> {ws.path(DATASET)}")
    return {"synth": sc.to_dict()}


def cmd_eigen(ws: Workspace, args) -> dict:
    data = _dataset(ws)
    gamma = median_heuristic_gamma(data) if ws.cfg.gamma == "median" else float(ws.cfg.gamma)
    kernel = rbf_matrix(data, gamma)
    k = min(getattr(args, "components", None) or 5, len(data))
    basis = eigen_decompose(kernel, k)
    weights = stress_weights(basis, ws.cfg.train_config().eigen_component if k > 1 else 0)
    ratios = explained_variance_ratio(basis)
    ws.write(WEIGHTS, weights_to_csv(data.patch_ids, weights))
    lines = ["component,eigenvalue,explained_ratio"]
    lines += [f"{j},{_f(lam)},{_f(r)}" for j, (lam, r) in enumerate(zip(basis.eigenvalues, ratios))]
    ws.write(SPECTRUM, "\n".join(lines) + "\n")
    try:
        r = weight_ndre_correlation(weights, data)
    except EigenCLError:
        r = None
    summary = {"gamma": gamma, "principal_ratio": float(ratios[0]), "weight_ndre_pearson": r,
               "trace": basis.trace, "components": k}
    ws.write_json(EIGEN_JSON, summary)
    print(f"principal explained ratio {ratios[0]:.4f}; weight-NDRE Pearson r "
          + ("undefined" if r is None else f"{r:.4f}"))
    return {"gamma": ws.cfg.gamma, "components": k}


def cmd_train(ws: Workspace, args) -> dict:
    data = _dataset(ws)
    weights = _weights(ws, data)
    tc = ws.cfg.train_config()
    if getattr(args, "epochs", None) is not None:
        tc = replace(tc, epochs=args.epochs)
    if getattr(args, "loss_kind", None):
        tc = replace(tc, loss_kind=args.loss_kind)
    ec = ws.cfg.encoder_config(data.values.shape[1])
    hyper = ws.cfg.loss_hyper()
    params, history = train(data, weights, ec, replace(tc, batch_size=min(tc.batch_size, len(data))), hyper)
    ws.write(CHECKPOINT, enc.checkpoint_json(params))
    ws.write(HISTORY, history.to_csv())
    print(f"trained {len(history)} epochs ({tc.loss_kind}); final loss "
          + (f"{history.mean_loss[-1]:.6f}" if len(history) else "n/a"))
    return {"train": tc.to_dict(), "encoder": ec.to_dict(), "loss": hyper.to_dict()}


def cmd_embed(ws: Workspace, args) -> dict:
    data = _dataset(ws)
    params = _params(ws)
    z = embed_dataset(params, data).z
    ws.write(EMBEDDINGS, matrix_csv(data.patch_ids, z, "z"))
    print(f"embedded {len(data)} patches in {z.shape[1]} dimensions")
    return {}


def cmd_cluster(ws: Workspace, args) -> dict:
    data = _dataset(ws)
    z = _embeddings(ws, data)
    opts = dict(ws.cfg.clustering)
    if getattr(args, "k", None) is not None:
        opts["k"] = "elbow" if args.k == "elbow" else int(args.k)
    restarts = int(opts.get("restarts", 10))
    summary = {}
    if opts.get("k", 4) == "elbow":
        res = elbow(z, int(opts.get("k_max", 10)), ws.cfg.seed, restarts)
        model = res.models[res.k - 1]
        lines = ["k,inertia,curvature"]
        for k, inertia in enumerate(res.inertias, start=1):
            curv = res.curvature[k - 2] if 2 <= k <= len(res.curvature) + 1 else None
            lines.append(f"{k},{_f(inertia)}," + ("" if curv is None else _f(curv)))
        ws.write(ELBOW, "\n".join(lines) + "\n")
        summary["elbow"] = {"k": res.k, "low_confidence": res.low_confidence}
        print(f"elbow selected k = {res.k}" + (" (low confidence)" if res.low_confidence else ""))
    else:
        model = kmeans(z, int(opts["k"]), ws.cfg.seed, restarts)
    ws.write(CLUSTERS, "patch_id,cluster\n" + "".join(f"{p},{int(c)}\n" for p, c in zip(data.patch_ids, model.labels)))
    ws.write(CENTROIDS, matrix_csv(range(model.k), model.centroids, "c", id_name="cluster"))
    try:
        validity = validity_report(z, model.labels).to_dict()
    except EigenCLError as exc:
        validity = {"error": str(exc)}
    summary.update({"k": model.k, "inertia": model.inertia, "sizes": np.bincount(model.labels, minlength=model.k).tolist(),
                    "validity": validity, "space": "embedding"})
    ws.write_json(CLUSTER_JSON, summary)
    print(f"k = {model.k}: " + ", ".join(f"{k} {v:.4f}" for k, v in validity.items() if isinstance(v, float)))
    return {"clustering": opts}


def cmd_stage(ws: Workspace, args) -> dict:
    data = _dataset(ws)
    labels, centroids = _clusters(ws, data)
    mode = getattr(args, "mode", None) or ws.cfg.staging
    k = centroids.shape[0]
    means = stg.cluster_mean_ndre(data, labels, k)
    if mode == "fixed":
        th = stg.StageThresholds.reference()
    else:
        th = stg.thresholds_from_centroids(means)
    stages = stg.stage_array(data.mean_ndre, th)
    cstages = stg.cluster_stages(means, th)
    lines = ["patch_id,mean_ndre,stage,cluster"]
    lines += [f"{p},{_f(m)},{Stage(int(s)).label},{int(c)}" for p, m, s, c in zip(data.patch_ids, data.mean_ndre, stages, labels)]
    ws.write(STAGES, "\n".join(lines) + "\n")
    ws.write_json(THRESHOLDS, {
        "mode": mode,
        "thresholds": list(th.cuts),
        "named": th.to_dict(),
        "cluster_mean_ndre": means.tolist(),
        "cluster_stage": [Stage(int(s)).label for s in cstages],
    })
    prof = ["cluster,day,mean,half_width,n,degenerate"]
    for p in stg.cluster_profiles(data, labels):
        for day, m, h in zip(data.dates, p.mean, p.half_width):
            prof.append(f"{p.cluster},{day},{_f(m)},{_f(h)},{p.n},{str(p.degenerate).lower()}")
    ws.write(PROFILES, "\n".join(prof) + "\n")
    st = ws.cfg.stats
    report = cluster_statistics(data.mean_ndre, labels, int(st.get("shuffles", 10_000)), ws.cfg.seed,
                                bool(st.get("permutation_anova", False)))
    ari, lo, hi = ari_bootstrap_ci(labels, stages, 1000, ws.cfg.seed)
    out = report.to_dict()
    out["ari_vs_ndre_stage"] = {"ari": ari, "ci_low": lo, "ci_high": hi, "level": 0.95}
    if data.has_truth:
        out["ari_vs_truth_stage"] = adjusted_rand_index(labels, [int(s) for s in data.truth_stage])
    ws.write_json(STATS, out)
    print(f"thresholds {tuple(round(c, 4) for c in th.cuts)} ({mode}); ANOVA F {report.anova_f:.2f}, "
          f"p {report.anova_p:.3g}; ARI vs NDRE stages {ari:.3f} [{lo:.3f}, {hi:.3f}]")
    return {"staging": mode, "stats": st}


def _lead(frozen: FrozenPipeline, data: Dataset, threshold: float):
    days = det.detection_days(frozen.params, data, frozen.clusters, frozen.stress_set)
    return det.lead_time_report(data, days, det.crossing_days(data, threshold))


def cmd_detect(ws: Workspace, args) -> dict:
    data = _dataset(ws)
    frozen = _frozen(ws)
    labels, _ = _clusters(ws, data)
    threshold = float(ws.cfg.detect.get("threshold", det.STRESS_THRESHOLD))
    report = _lead(frozen, data, threshold)
    stages = [Stage(int(s)).label for s in stg.stage_array(data.mean_ndre, frozen.thresholds)]
    ws.write(DETECTION, det.per_patch_csv(report, stages, labels))
    ws.write(LEAD_HIST, report.histogram_csv())
    summary = report.to_dict()
    summary.update({"threshold": threshold, "stress_clusters": sorted(frozen.stress_set)})
    ws.write_json(DETECT_JSON, summary)
    if report.no_stress_events:
        print("no stress events: no patch crosses the threshold")
    else:
        print(f"fraction early {report.fraction_early:.3f}; mean lead "
              + ("n/a" if report.mean_lead_days is None else f"{report.mean_lead_days:.2f} days"))
    return {"detect": ws.cfg.detect}


def cmd_classify(ws: Workspace, args) -> dict:
    data = _dataset(ws)
    z = _embeddings(ws, data)
    th = json.loads(ws.require(ws.path(THRESHOLDS)).read_text())
    stages = stg.stage_array(data.mean_ndre, stg.StageThresholds(tuple(th["thresholds"])))
    opts = ws.cfg.classify
    tr, te = split_indices(len(data), float(opts.get("train_fraction", 0.7)), ws.cfg.seed)
    knn_pred, knn_m = cls.knn_classify(z[tr], stages[tr], z[te], stages[te], int(opts.get("k_neighbors", 5)))
    model = cls.logreg_train(z[tr], stages[tr], float(opts.get("l2_penalty", 1e-4)), int(opts.get("epochs", 500)),
                             float(opts.get("learning_rate", 0.5)), ws.cfg.seed)
    lr_pred, lr_m = cls.logreg_classify(model, z[te], stages[te])
    lines = ["patch_id,stage,knn,logreg"]
    for i, a, b in zip(te, knn_pred, lr_pred):
        lines.append(f"{data.patch_ids[i]},{Stage(int(stages[i])).label},{Stage(int(a)).label},{Stage(int(b)).label}")
    ws.write(PREDICTIONS, "\n".join(lines) + "\n")
    ws.write_json(CLASSIFY_JSON, {"knn": knn_m.to_dict(), "logreg": lr_m.to_dict(),
                                  "n_train": int(tr.size), "n_test": int(te.size)})
    print(f"k-NN accuracy {knn_m.accuracy:.3f} (macro F1 {knn_m.macro_f1:.3f}); "
          f"logistic regression accuracy {lr_m.accuracy:.3f} (macro F1 {lr_m.macro_f1:.3f})")
    return {"classify": opts}


def _transfer_dataset(ws: Workspace) -> Dataset:
    t = ws.cfg.transfer
    if t.get("dataset"):
        return load_dataset(ws.require(Path(t["dataset"])))
    if t.get("synth") is not None:
        d = dict(t["synth"])
        d.setdefault("seed", ws.cfg.seed + 1)
        data = synthesize(SynthConfig.from_dict(d))
        ws.write(TRANSFER_DATASET, dataset_to_csv(data))
        return data
    raise ConfigError("transfer needs transfer.dataset or transfer.synth in the config (or --dataset)")


def cmd_transfer(ws: Workspace, args) -> dict:
    if getattr(args, "dataset", None):
        ws.cfg.transfer = {**ws.cfg.transfer, "dataset": args.dataset, "synth": None}
    frozen = _frozen(ws)
    data = _transfer_dataset(ws)
    before = frozen.params.fingerprint()
    rep = evaluate(frozen, data)
    labels = rep.labels
    stages = [Stage(int(s)).label for s in rep.stages]
    ws.write(TRANSFER_DETECTION, det.per_patch_csv(rep.lead, stages, labels))
    out = rep.to_dict()
    out["checkpoint_sha256_before"] = before
    out["checkpoint_sha256_after"] = frozen.params.fingerprint()
    ws.write_json(TRANSFER_JSON, out)
    sil = rep.validity.silhouette if rep.validity else float("nan")
    print(f"transfer: silhouette {sil:.4f}; staging agreement {rep.stage_agreement:.3f}; mean lead "
          + ("n/a" if rep.lead.mean_lead_days is None else f"{rep.lead.mean_lead_days:.2f} days"))
    return {"transfer": ws.cfg.transfer}


def cmd_gridsearch(ws: Workspace, args) -> dict:
    data = _dataset(ws)
    weights = _weights(ws, data)
    g = dict(ws.cfg.grid)
    epochs = int(g.pop("epochs", 5))
    if getattr(args, "epochs", None) is not None:
        epochs = args.epochs
    spec = GridSpec.from_dict(g)
    tc = replace(ws.cfg.train_config(), epochs=epochs)
    k = ws.cfg.clustering.get("k", 4)
    k = 4 if k == "elbow" else int(k)
    result = grid_search(data, weights, spec, ws.cfg.encoder_config(data.values.shape[1]), tc, k=k,
                         restarts=int(ws.cfg.clustering.get("restarts", 10)))
    ws.write(GRID_CSV, result.to_csv())
    best = result.best
    ws.write_json(GRID_JSON, {"metric": spec.metric, "cells": len(result.rows), "epochs": epochs,
                              "failed": sum(r.failed for r in result.rows),
                              "best": {"cell": best.index, **best.hyper.to_dict()}})
    print(f"{len(result.rows)} cells; best by {spec.metric}: {best.hyper.to_dict()}")
    return {"grid": {**spec.to_dict(), "epochs": epochs}}


def pca_2d(z: np.ndarray) -> np.ndarray:
    """Projection onto the top two principal axes; each axis signed so its largest loading is positive."""
    centered = z - z.mean(axis=0)
    cov = centered.T @ centered / max(len(z) - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    axes = vecs[:, np.argsort(vals)[::-1][:2]]
    for j in range(axes.shape[1]):
        if axes[np.argmax(np.abs(axes[:, j])), j] < 0:
            axes[:, j] = -axes[:, j]
    proj = centered @ axes
    if proj.shape[1] < 2:
        proj = np.hstack([proj, np.zeros((len(z), 2 - proj.shape[1]))])
    return proj


def cmd_report(ws: Workspace, args) -> dict:
    data = _dataset(ws)
    z = _embeddings(ws, data)
    labels, _ = _clusters(ws, data)
    pc = pca_2d(z)
    lines = ["patch_id,pc1,pc2,cluster,mean_ndre"]
    lines += [f"{p},{_f(a)},{_f(b)},{int(c)},{_f(m)}" for p, (a, b), c, m in zip(data.patch_ids, pc, labels, data.mean_ndre)]
    ws.write(PCA_CSV, "\n".join(lines) + "\n")
    summary = {"projection": "pca-2d", "n": len(data)}
    for name in (EIGEN_JSON, CLUSTER_JSON, STATS, DETECT_JSON, CLASSIFY_JSON, TRANSFER_JSON):
        p = ws.path(name)
        if p.exists():
            summary[name.removesuffix(".json")] = json.loads(ws.require(p).read_text())
    ws.write_json(REPORT_JSON, summary)
    print(f"PCA projection of {len(data)} embeddings -> {ws.path(PCA_CSV)}")
    return {}


PIPELINE = ("synth", "eigen", "train", "embed", "cluster", "stage", "detect", "classify", "transfer", "report")

COMMANDS = {
    "synth": cmd_synth,
    "eigen": cmd_eigen,
    "train": cmd_train,
    "embed": cmd_embed,
    "cluster": cmd_cluster,
    "stage": cmd_stage,
    "detect": cmd_detect,
    "classify": cmd_classify,
    "transfer": cmd_transfer,
    "gridsearch": cmd_gridsearch,
    "report": cmd_report,
}


def run_command(name: str, cfg: RunConfig, args, force: bool) -> None:
    ws = Workspace(cfg, force)
    echo = COMMANDS[name](ws, args)
    ws.finish(name, {"run": cfg.to_dict(), **echo})


def cmd_run_all(cfg: RunConfig, args, force: bool) -> None:
    steps = [s for s in PIPELINE if not (s == "synth" and cfg.dataset is not None)]
    if not cfg.transfer.get("dataset") and cfg.transfer.get("synth") is None:
        steps.remove("transfer")
    empty = argparse.Namespace()
    for step in steps:
        print(f"== {step}")
        run_command(step, cfg, empty, force)
    ws = Workspace(cfg, force)
    ws.finish("run-all", {"run": cfg.to_dict(), "steps": steps})


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run-config JSON file")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--force", action="store_true", help="run even if upstream outputs are stale")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="eigencl", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=f"eigencl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--n", type=int, help="number of patches")
    p.add_argument("--noise", type=float, help="noise standard deviation")
    p = sub.add_parser("eigen", parents=[common], help="RBF kernel, eigenvectors and stress weights")
    p.add_argument("--components", type=int, help="number of eigenpairs (default 5)")
    p = sub.add_parser("train", parents=[common], help="train the encoder")
    p.add_argument("--epochs", type=int)
    p.add_argument("--loss-kind", choices=("eigencl", "cosine-ablation", "ntxent"))
    sub.add_parser("embed", parents=[common], help="embed the dataset with the trained encoder")
    p = sub.add_parser("cluster", parents=[common], help="k-means on embeddings")
    p.add_argument("--k", help="cluster count or 'elbow'")
    p = sub.add_parser("stage", parents=[common], help="NDRE staging, profiles and statistics")
    p.add_argument("--mode", choices=("centroid", "fixed"), help="centroid-derived or fixed reference thresholds")
    sub.add_parser("detect", parents=[common], help="early-detection lead times")
    sub.add_parser("classify", parents=[common], help="k-NN and logistic regression on frozen embeddings")
    p = sub.add_parser("transfer", parents=[common], help="evaluate the frozen pipeline on another dataset")
    p.add_argument("--dataset", help="dataset CSV to transfer to")
    p = sub.add_parser("gridsearch", parents=[common], help="hyperparameter grid search")
    p.add_argument("--epochs", type=int, help="epochs per cell")
    sub.add_parser("report", parents=[common], help="PCA projection and summary report")
    sub.add_parser("run-all", parents=[common], help="run the whole pipeline")
    return parser


def _settings(args) -> RunConfig:
    d = load_config(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    if args.out is not None:
        d["out"] = args.out
    return RunConfig.from_dict(d)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _settings(args)
        if args.command == "run-all":
            cmd_run_all(cfg, args, args.force)
        else:
            run_command(args.command, cfg, args, args.force)
    except NumericalError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except StaleUpstream as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        where = exc.filename or ""
        print(f"error: {exc.strerror or exc}: {where}", file=sys.stderr)
        return EXIT_USAGE
    except (EigenCLError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
