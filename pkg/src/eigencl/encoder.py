"""Small feed-forward encoder with batch norm, LeakyReLU and an L2-normalized output.

Stands in for a convolutional backbone: the encoder sees the raw NDRE series (optionally
with first differences appended), not rasters. Every layer is
``Linear -> BatchNorm -> LeakyReLU``; the last layer is the projection head and its
output is L2-normalized.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, ParameterError

CHECKPOINT_FORMAT = "eigencl-encoder/1"
FEATURE_KINDS = ("raw", "raw+diff")
NORM_FLOOR = 1e-12


def make_features(values: np.ndarray, kind: str = "raw") -> np.ndarray:
    """Encoder inputs from an ``N x T`` block of series."""
    values = np.asarray(values, dtype=float)
    if kind == "raw":
        return values
    if kind == "raw+diff":
        return np.hstack([values, np.diff(values, axis=1)])
    raise ConfigError(f"unknown feature kind {kind!r}; expected one of {FEATURE_KINDS}")


def feature_dim(t: int, kind: str = "raw") -> int:
    return t if kind == "raw" else 2 * t - 1


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 5
    hidden_dims: tuple[int, ...] = (64, 64)
    embed_dim: int = 32
    leaky_slope: float = 0.01
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.1
    features: str = "raw"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.embed_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ConfigError("all layer widths must be >= 1")
        if not 0 < self.leaky_slope < 1:
            raise ConfigError("leaky_slope must be in (0, 1)")
        if not self.bn_epsilon > 0:
            raise ConfigError("bn_epsilon must be positive")
        if not 0 < self.bn_momentum <= 1:
            raise ConfigError("bn_momentum must be in (0, 1]")
        if self.features not in FEATURE_KINDS:
            raise ConfigError(f"unknown feature kind {self.features!r}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.embed_dim)

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "embed_dim": self.embed_dim,
            "leaky_slope": self.leaky_slope,
            "bn_epsilon": self.bn_epsilon,
            "bn_momentum": self.bn_momentum,
            "features": self.features,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


@dataclass(eq=False)
class EncoderParams:
    """Trainable arrays keyed ``W{i}``, ``b{i}``, ``gamma{i}``, ``beta{i}`` plus running stats.

    ``version`` increments on every in-place update so stale caches can be detected.
    """

    config: EncoderConfig
    weights: dict[str, np.ndarray]
    running: dict[str, np.ndarray]
    version: int = 0

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.config,
            {k: v.copy() for k, v in self.weights.items()},
            {k: v.copy() for k, v in self.running.items()},
            self.version,
        )

    def bump(self) -> None:
        self.version += 1

    def equals(self, other: "EncoderParams") -> bool:
        return (
            self.config == other.config
            and self.weights.keys() == other.weights.keys()
            and all(np.array_equal(v, other.weights[k]) for k, v in self.weights.items())
            and all(np.array_equal(v, other.running[k]) for k, v in self.running.items())
        )

    def fingerprint(self) -> str:
        return hashlib.sha256(checkpoint_json(self).encode()).hexdigest()


def init(config: EncoderConfig) -> EncoderParams:
    """He-uniform weights scaled for LeakyReLU, zero biases, unit BN scale, zero shift."""
    rng = np.random.default_rng(config.seed)
    gain = np.sqrt(2.0 / (1.0 + config.leaky_slope**2))
    weights, running = {}, {}
    for i, (fan_in, fan_out) in enumerate(zip(config.widths[:-1], config.widths[1:])):
        bound = gain * np.sqrt(3.0 / fan_in)
        weights[f"W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        weights[f"b{i}"] = np.zeros(fan_out)
        weights[f"gamma{i}"] = np.ones(fan_out)
        weights[f"beta{i}"] = np.zeros(fan_out)
        running[f"mean{i}"] = np.zeros(fan_out)
        running[f"var{i}"] = np.ones(fan_out)
    return EncoderParams(config, weights, running)


@dataclass(frozen=True, eq=False)
class EmbeddingBatch:
    z: np.ndarray
    patch_ids: tuple[str, ...] = ()

    def __len__(self) -> int:
        return self.z.shape[0]


@dataclass(eq=False)
class ForwardCache:
    params: EncoderParams
    version: int
    mode: str
    layers: list = field(default_factory=list)
    pre_norm: np.ndarray | None = None
    norms: np.ndarray | None = None
    z: np.ndarray | None = None


def forward(params: EncoderParams, inputs, mode: str = "eval", patch_ids=()) -> tuple[EmbeddingBatch, ForwardCache]:
    cfg = params.config
    x = np.asarray(inputs, dtype=float)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ConfigError(f"encoder expects inputs of width {cfg.input_dim}, got shape {x.shape}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and x.shape[0] < 2:
        raise ContractError("train-mode forward needs a batch of at least 2 (batch statistics)")
    cache = ForwardCache(params, params.version, mode)
    w, run = params.weights, params.running
    a = x
    for i in range(cfg.n_layers):
        h = a @ w[f"W{i}"] + w[f"b{i}"]
        if mode == "train":
            mu = h.mean(axis=0)
            var = h.var(axis=0)
            b = h.shape[0]
            m = cfg.bn_momentum
            run[f"mean{i}"] = (1 - m) * run[f"mean{i}"] + m * mu
            run[f"var{i}"] = (1 - m) * run[f"var{i}"] + m * var * b / (b - 1)
        else:
            mu, var = run[f"mean{i}"], run[f"var{i}"]
        inv_std = 1.0 / np.sqrt(var + cfg.bn_epsilon)
        xhat = (h - mu) * inv_std
        y = w[f"gamma{i}"] * xhat + w[f"beta{i}"]
        out = np.where(y > 0, y, cfg.leaky_slope * y)
        cache.layers.append((a, xhat, inv_std, y))
        a = out
    norms = np.maximum(np.linalg.norm(a, axis=1, keepdims=True), NORM_FLOOR)
    z = a / norms
    cache.pre_norm, cache.norms, cache.z = a, norms, z
    return EmbeddingBatch(z, tuple(patch_ids)), cache


def backward(cache: ForwardCache, grad_z) -> dict[str, np.ndarray]:
    """Exact parameter gradients given ``dL/dz`` for the batch in ``cache``."""
    params = cache.params
    if cache.mode != "train":
        raise ContractError("backward needs the cache of a train-mode forward")
    if cache.version != params.version:
        raise ContractError("stale cache: parameters changed since the forward pass")
    g = np.asarray(grad_z, dtype=float)
    if g.shape != cache.z.shape:
        raise ContractError(f"grad_z shape {g.shape} does not match embeddings {cache.z.shape}")
    cfg = params.config
    w = params.weights
    z = cache.z
    # through z = a / ||a||
    da = (g - z * np.sum(g * z, axis=1, keepdims=True)) / cache.norms
    grads = {}
    for i in reversed(range(cfg.n_layers)):
        a_in, xhat, inv_std, y = cache.layers[i]
        dy = np.where(y > 0, da, cfg.leaky_slope * da)
        grads[f"gamma{i}"] = np.sum(dy * xhat, axis=0)
        grads[f"beta{i}"] = dy.sum(axis=0)
        dxhat = dy * w[f"gamma{i}"]
        n = dxhat.shape[0]
        dh = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
        grads[f"W{i}"] = a_in.T @ dh
        grads[f"b{i}"] = dh.sum(axis=0)
        da = dh @ w[f"W{i}"].T
    return grads


def embed(params: EncoderParams, inputs, batch_size: int = 1024) -> np.ndarray:
    """Eval-mode embeddings for many rows, in chunks."""
    x = np.asarray(inputs, dtype=float)
    out = [forward(params, x[s : s + batch_size], "eval")[0].z for s in range(0, x.shape[0], batch_size)]
    if not out:
        return np.zeros((0, params.config.embed_dim))
    return np.vstack(out)


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_dict(params: EncoderParams) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "config": params.config.to_dict(),
        "weights": {k: _arr(v) for k, v in sorted(params.weights.items())},
        "running": {k: _arr(v) for k, v in sorted(params.running.items())},
    }


def _arr(a: np.ndarray) -> dict:
    # repr of a Python float round-trips exactly through JSON
    return {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}


def checkpoint_json(params: EncoderParams) -> str:
    return json.dumps(checkpoint_dict(params), sort_keys=True, separators=(",", ":"))


def params_from_checkpoint(d: dict) -> EncoderParams:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"unsupported checkpoint format {d.get('format')!r}")
    cfg = EncoderConfig.from_dict(d["config"])
    load = lambda e: np.array(e["data"], dtype=float).reshape(e["shape"])
    params = EncoderParams(
        cfg,
        {k: load(v) for k, v in d["weights"].items()},
        {k: load(v) for k, v in d["running"].items()},
    )
    expected = init(cfg)
    for group, ref in (("weights", expected.weights), ("running", expected.running)):
        got = getattr(params, group)
        if got.keys() != ref.keys() or any(got[k].shape != ref[k].shape for k in ref):
            raise ConfigError(f"checkpoint {group} do not match the stored config")
    return params


def save_checkpoint(params: EncoderParams, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(checkpoint_json(params))
        fh.write("\n")


def load_checkpoint(path) -> EncoderParams:
    with open(path, encoding="utf-8") as fh:
        return params_from_checkpoint(json.load(fh))
