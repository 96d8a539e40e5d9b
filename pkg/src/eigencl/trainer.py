"""Mini-batch training of the encoder, dataset embedding and the hyperparameter grid search."""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import encoder as enc
from .clustering import kmeans, validity_report
from .data import Dataset
from .errors import ConfigError, ContractError, EigenCLError, NumericalError, ParameterError
from .objective import LossHyper, cosine_affinity, eigencl_loss, ntxent_loss, pair_loss
from .spectral import StressWeights, pearson

log = logging.getLogger(__name__)

LOSS_KINDS = ("eigencl", "cosine-ablation", "ntxent")
OPTIMIZERS = ("adam", "sgd")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    epochs: int = 50
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    loss_kind: str = "eigencl"
    eigen_component: int = 0
    patience: int = 5
    min_improvement: float = 1e-5
    # NT-Xent baseline augmentation
    jitter_sd: float = 0.02
    scale_jitter: float = 0.05

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainHistory:
    mean_loss: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    stopped_early: bool = False

    def __len__(self) -> int:
        return len(self.mean_loss)

    def to_csv(self) -> str:
        lines = ["epoch,mean_loss,grad_norm,seconds"]
        for i, (l, g, s) in enumerate(zip(self.mean_loss, self.grad_norm, self.seconds), start=1):
            lines.append(f"{i},{l!r},{g!r},{s:.6f}")
        return "\n".join(lines) + "\n"


class TrainingDiverged(NumericalError):
    def __init__(self, epoch: int, batch: int, last_good: enc.EncoderParams):
        self.epoch = epoch
        self.batch = batch
        self.last_good = last_good
        super().__init__(f"non-finite loss or gradient at epoch {epoch}, batch {batch}")


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: enc.EncoderParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            params.weights[name] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        params.bump()


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: enc.EncoderParams, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            params.weights[name] -= self.lr * g
        params.bump()


def make_optimizer(cfg: TrainConfig):
    return Adam(cfg.learning_rate) if cfg.optimizer == "adam" else SGD(cfg.learning_rate)


def encoder_inputs(dataset: Dataset, config: enc.EncoderConfig) -> np.ndarray:
    x = enc.make_features(dataset.values, config.features)
    if x.shape[1] != config.input_dim:
        raise ConfigError(
            f"encoder expects {config.input_dim} features but the dataset gives {x.shape[1]} "
            f"({len(dataset.dates)} dates, features={config.features!r})"
        )
    return x


def augment(values: np.ndarray, rng, jitter_sd: float, scale_jitter: float) -> np.ndarray:
    """Additive Gaussian jitter and a per-series amplitude scale factor in ``1 +- scale_jitter``."""
    scale = rng.uniform(1 - scale_jitter, 1 + scale_jitter, size=(values.shape[0], 1))
    return np.clip(values * scale + rng.normal(0.0, jitter_sd, values.shape), -1.0, 1.0)


def _grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def _finite(loss: float, grads: dict[str, np.ndarray]) -> bool:
    return np.isfinite(loss) and all(np.all(np.isfinite(g)) for g in grads.values())


def _batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    out = [order[s : s + batch_size] for s in range(0, n, batch_size)]
    # a trailing singleton has no batch statistics; fold it into the previous batch
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def batch_step(params, x_batch, w_batch, raw_batch, cfg: TrainConfig, hyper: LossHyper, rng):
    """One loss/gradient evaluation; returns ``(loss, grads)`` without updating ``params``."""
    if cfg.loss_kind == "ntxent":
        fcfg = params.config.features
        va = enc.make_features(augment(raw_batch, rng, cfg.jitter_sd, cfg.scale_jitter), fcfg)
        vb = enc.make_features(augment(raw_batch, rng, cfg.jitter_sd, cfg.scale_jitter), fcfg)
        za, ca = enc.forward(params, va, "train")
        zb, cb = enc.forward(params, vb, "train")
        loss, ga, gb = ntxent_loss(za.z, zb.z, hyper.tau)
        grads = enc.backward(ca, ga)
        for name, g in enc.backward(cb, gb).items():
            grads[name] = grads[name] + g
        return loss, grads
    emb, cache = enc.forward(params, x_batch, "train")
    if cfg.loss_kind == "eigencl":
        loss, gz = eigencl_loss(emb.z, w_batch, hyper)
    else:
        loss, gz = pair_loss(emb.z, cosine_affinity(raw_batch), hyper)
    return loss, enc.backward(cache, gz)


def train(
    dataset: Dataset,
    weights: StressWeights | None,
    encoder_config: enc.EncoderConfig,
    train_config: TrainConfig,
    hyper: LossHyper | None = None,
    params: enc.EncoderParams | None = None,
) -> tuple[enc.EncoderParams, TrainHistory]:
    """Train the encoder; deterministic for fixed seeds.

    ``weights`` are the dataset-wide eigen weights (looked up per batch); they may be
    None for the ``cosine-ablation`` and ``ntxent`` objectives.
    """
    hyper = hyper or LossHyper()
    cfg = train_config
    n = len(dataset)
    if cfg.loss_kind == "eigencl":
        if weights is None or len(weights) != n:
            raise ContractError(f"need one eigen weight per patch ({n}), got {None if weights is None else len(weights)}")
    if cfg.batch_size > n:
        raise ContractError(f"batch_size {cfg.batch_size} exceeds dataset size {n}")
    x = encoder_inputs(dataset, encoder_config)
    raw = dataset.values
    w = None if weights is None else np.asarray(weights.w)
    params = enc.init(encoder_config) if params is None else params.copy()
    history = TrainHistory()
    if cfg.epochs == 0:
        return params, history

    rng = np.random.default_rng(cfg.seed)
    aug_rng = np.random.default_rng([cfg.seed, 1])
    opt = make_optimizer(cfg)
    best, stale = np.inf, 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        losses, norms = [], []
        for bi, idx in enumerate(_batches(n, cfg.batch_size, rng), start=1):
            last_good = params.copy()
            loss, grads = batch_step(
                params, x[idx], None if w is None else w[idx], raw[idx], cfg, hyper, aug_rng
            )
            if not _finite(loss, grads):
                raise TrainingDiverged(epoch, bi, last_good)
            opt.step(params, grads)
            losses.append(loss)
            norms.append(_grad_norm(grads))
        history.mean_loss.append(float(np.mean(losses)))
        history.grad_norm.append(float(np.mean(norms)))
        history.seconds.append(time.perf_counter() - t0)
        log.debug("epoch %d loss %.6f", epoch, history.mean_loss[-1])
        if best - history.mean_loss[-1] >= cfg.min_improvement:
            best, stale = history.mean_loss[-1], 0
        else:
            stale += 1
            if cfg.patience and stale >= cfg.patience:
                history.stopped_early = True
                break
    return params, history


def embed_dataset(params: enc.EncoderParams, dataset: Dataset, batch_size: int = 1024) -> enc.EmbeddingBatch:
    x = encoder_inputs(dataset, params.config)
    return enc.EmbeddingBatch(enc.embed(params, x, batch_size), dataset.patch_ids)


# ---------------------------------------------------------------------------
# grid search

SELECTION_METRICS = ("silhouette", "dbi", "chi", "composite")


@dataclass(frozen=True)
class GridSpec:
    lam: tuple[float, ...] = (1.0, 2.0, 4.0, 6.0)
    tau: tuple[float, ...] = (0.05, 0.075, 0.1, 0.15)
    sigma: tuple[float, ...] = (0.3, 0.5, 0.7, 1.0)
    margin: tuple[float, ...] = (0.1, 0.2, 0.3)
    metric: str = "silhouette"

    def __post_init__(self):
        for name in ("lam", "tau", "sigma", "margin"):
            values = tuple(float(v) for v in getattr(self, name))
            if not values or any(v <= 0 for v in values):
                raise ConfigError(f"grid {name} needs a nonempty list of positive values")
            object.__setattr__(self, name, values)
        if self.metric not in SELECTION_METRICS:
            raise ConfigError(f"selection metric must be one of {SELECTION_METRICS}")

    def cells(self) -> list[LossHyper]:
        return [LossHyper(*c) for c in itertools.product(self.lam, self.tau, self.sigma, self.margin)]

    def to_dict(self) -> dict:
        return {"lambda": list(self.lam), "tau": list(self.tau), "sigma": list(self.sigma),
                "margin": list(self.margin), "metric": self.metric}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class GridRow:
    index: int
    hyper: LossHyper
    seed: int
    silhouette: float = float("nan")
    dbi: float = float("nan")
    chi: float = float("nan")
    distance_r: float = float("nan")
    final_loss: float = float("nan")
    error: str = ""
    rank: int = 0

    @property
    def failed(self) -> bool:
        return bool(self.error)

    def score(self, metric: str) -> float:
        """Higher is better for every metric (DBI is negated)."""
        if metric == "silhouette":
            return self.silhouette
        if metric == "dbi":
            return -self.dbi
        if metric == "chi":
            return self.chi
        return 0.5 * (self.silhouette + self.distance_r)


GRID_COLUMNS = ("rank", "cell", "lambda", "tau", "sigma", "margin", "seed", "silhouette",
                "dbi", "chi", "distance_r", "composite", "final_loss", "error")


@dataclass
class GridResult:
    rows: list[GridRow]
    metric: str

    @property
    def ranked(self) -> list[GridRow]:
        return sorted(self.rows, key=lambda r: r.rank)

    @property
    def best(self) -> GridRow:
        return self.ranked[0]

    def to_csv(self) -> str:
        lines = [",".join(GRID_COLUMNS)]
        for r in self.ranked:
            h = r.hyper
            vals = [r.rank, r.index, h.lam, h.tau, h.sigma, h.margin, r.seed, r.silhouette,
                    r.dbi, r.chi, r.distance_r, r.score("composite"), r.final_loss]
            lines.append(",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in vals)
                         + "," + r.error.replace(",", ";").replace("\n", " "))
        return "\n".join(lines) + "\n"


def cell_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def split_indices(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    cut = int(round(fraction * n))
    return np.sort(order[:cut]), np.sort(order[cut:])


def distance_correlation(z: np.ndarray, x: np.ndarray, max_pairs: int = 20000, seed: int = 0) -> float:
    """Pearson r between pairwise embedding distances and pairwise NDRE-series distances."""
    n = z.shape[0]
    rng = np.random.default_rng(seed)
    i = rng.integers(0, n, max_pairs)
    j = rng.integers(0, n, max_pairs)
    keep = i != j
    i, j = i[keep], j[keep]
    return pearson(np.linalg.norm(z[i] - z[j], axis=1), np.linalg.norm(x[i] - x[j], axis=1))


def grid_search(
    dataset: Dataset,
    weights: StressWeights,
    grid: GridSpec,
    encoder_config: enc.EncoderConfig,
    base_config: TrainConfig,
    k: int = 4,
    train_fraction: float = 0.7,
    restarts: int = 10,
    progress=None,
) -> GridResult:
    """Train one model per grid cell and rank the cells by held-out clustering quality."""
    train_idx, val_idx = split_indices(len(dataset), train_fraction, base_config.seed)
    train_set, val_set = dataset.subset(train_idx), dataset.subset(val_idx)
    w_train = StressWeights(np.asarray(weights.w)[train_idx], weights.source_component)
    batch = min(base_config.batch_size, len(train_set))
    rows = []
    for index, hyper in enumerate(grid.cells()):
        seed = cell_seed(base_config.seed, index)
        row = GridRow(index, hyper, seed)
        try:
            cfg = replace(base_config, seed=seed, batch_size=batch)
            params, hist = train(train_set, w_train, replace(encoder_config, seed=seed), cfg, hyper)
            z = embed_dataset(params, val_set).z
            model = kmeans(z, k, seed=seed, restarts=restarts)
            rep = validity_report(z, model.labels)
            row.silhouette, row.dbi, row.chi = rep.silhouette, rep.davies_bouldin, rep.calinski_harabasz
            row.distance_r = distance_correlation(z, val_set.values, seed=seed)
            row.final_loss = hist.mean_loss[-1] if len(hist) else float("nan")
        except (EigenCLError, FloatingPointError, ValueError) as exc:
            row.error = f"{type(exc).__name__}: {exc}"
            log.warning("grid cell %d failed: %s", index, row.error)
        rows.append(row)
        if progress:
            progress(row)

    def key(r: GridRow):
        if r.failed or not np.isfinite(r.score(grid.metric)):
            return (1, 0.0, 0.0, 0.0, r.index)
        loss = r.final_loss if np.isfinite(r.final_loss) else np.inf
        return (0, -r.score(grid.metric), r.dbi, loss, r.index)

    for rank, r in enumerate(sorted(rows, key=key), start=1):
        r.rank = rank
    return GridResult(rows, grid.metric)
