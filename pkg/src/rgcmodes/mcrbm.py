"""Mean-covariance restricted Boltzmann machine.

Energies, conditionals, block Gibbs sampling and persistent contrastive
divergence (PCD) training for an mcRBM with Gaussian visibles, binary mean
units ``h_m`` and binary covariance units ``h_c``::

    E(v, h_m, h_c) = eps/2 |v - a|^2 - c.h_m - v.W h_m
                     - d.h_c - ((R^T v) * (R^T v)) . P h_c

With ``P <= 0`` the visible conditional is Gaussian with precision
``eps*I + 2 R diag(-P h_c) R^T`` and mean ``Sigma (eps*a + W h_m)``.

All batch-capable functions accept a single vector ``(n_vis,)`` or a matrix
``(n_samples, n_vis)``.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

logger = logging.getLogger(__name__)

SeedLike = Union[int, np.random.Generator, None]

CHECKPOINT_MAGIC = b"MCRB"
CHECKPOINT_VERSION = 1
_PARAM_NAMES = ("W", "a", "c", "R", "P", "d")
# reconstruction diagnostic runs on a subsample of each minibatch
_RECON_ROWS = 16


class TrainingError(RuntimeError):
    """Raised when a PCD update produces non-finite values."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sigmoid(x):
    # numerically stable for large |x|
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass
class Hyperparams:
    n_vis: int
    n_mean: int = 64
    n_factors: int = 128
    n_cov: int = 64
    learning_rate: float = 1e-3
    momentum: float = 0.9
    initial_momentum: float = 0.5
    momentum_switch_epoch: int = 5
    weight_decay: float = 1e-4
    minibatch_size: int = 100
    n_chains: Optional[int] = None
    epochs: int = 10
    precision_floor: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_chains is None:
            self.n_chains = self.minibatch_size
        for name in ("n_vis", "n_mean", "n_factors", "n_cov", "minibatch_size", "n_chains"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not self.precision_floor > 0:
            raise ValueError(f"precision_floor must be > 0, got {self.precision_floor}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class McRbmModel:
    W: np.ndarray
    a: np.ndarray
    c: np.ndarray
    R: np.ndarray
    P: np.ndarray
    d: np.ndarray
    hyper: Hyperparams
    chains: np.ndarray
    epoch: int = 0
    velocity: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @property
    def n_vis(self):
        return self.W.shape[0]

    @property
    def n_mean(self):
        return self.W.shape[1]

    @property
    def n_factors(self):
        return self.R.shape[1]

    @property
    def n_cov(self):
        return self.P.shape[1]

    @property
    def eps(self):
        return self.hyper.precision_floor

    def params(self):
        return {name: getattr(self, name) for name in _PARAM_NAMES}

    def copy(self):
        return McRbmModel(
            **{k: v.copy() for k, v in self.params().items()},
            hyper=dataclasses.replace(self.hyper),
            chains=self.chains.copy(),
            epoch=self.epoch,
            velocity={k: v.copy() for k, v in self.velocity.items()},
            history=list(self.history),
        )

    def check(self):
        for name, value in self.params().items():
            if not np.all(np.isfinite(value)):
                raise ValueError(f"parameter {name} has non-finite entries")
        if np.any(self.P > 0):
            raise ValueError("pooling matrix P must be non-positive")


@dataclass(frozen=True)
class LatentState:
    """Binary hidden configuration for one rate sample."""

    h_m: np.ndarray
    h_c: np.ndarray

    @property
    def key(self) -> str:
        return state_key(self.h_m, self.h_c)

    def __eq__(self, other):
        return (isinstance(other, LatentState)
                and np.array_equal(self.h_m, other.h_m)
                and np.array_equal(self.h_c, other.h_c))

    def __hash__(self):
        return hash(self.key)


@dataclass
class LatentStates:
    """A batch of latent states, one row per rate sample."""

    h_m: np.ndarray  # (n, n_mean) uint8
    h_c: np.ndarray  # (n, n_cov) uint8

    def __len__(self):
        return self.h_m.shape[0]

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return LatentState(self.h_m[i], self.h_c[i])
        return LatentStates(self.h_m[i], self.h_c[i])

    @property
    def keys(self) -> np.ndarray:
        return state_keys(self.h_m, self.h_c)


def state_key(h_m, h_c) -> str:
    """Canonical hex key of a binary state; injective for fixed unit counts."""
    m = np.packbits(np.asarray(h_m, dtype=np.uint8)).tobytes().hex()
    c = np.packbits(np.asarray(h_c, dtype=np.uint8)).tobytes().hex()
    return f"{m}:{c}"


def state_keys(h_m, h_c) -> np.ndarray:
    h_m = np.atleast_2d(np.asarray(h_m, dtype=np.uint8))
    h_c = np.atleast_2d(np.asarray(h_c, dtype=np.uint8))
    pm = np.packbits(h_m, axis=1)
    pc = np.packbits(h_c, axis=1)
    return np.array([f"{pm[i].tobytes().hex()}:{pc[i].tobytes().hex()}"
                     for i in range(h_m.shape[0])], dtype=object)


# --------------------------------------------------------------------------
# energies


def _check_dims(v, n, name):
    if v.shape[-1] != n:
        raise ValueError(f"{name} has length {v.shape[-1]}, expected {n}")


def energy_binary(v, h, a, b, W):
    """Energy of a binary-binary RBM: ``-a.v - b.h - v.W h``."""
    v, h, a, b, W = (np.asarray(x, dtype=float) for x in (v, h, a, b, W))
    if W.ndim != 2 or v.shape != a.shape or h.shape != b.shape or W.shape != (v.size, h.size):
        raise ValueError(
            f"dimension mismatch: v{v.shape} h{h.shape} a{a.shape} b{b.shape} W{W.shape}")
    return float(-a @ v - b @ h - v @ W @ h)


def energy_mean(v, h_m, model):
    v = np.asarray(v, dtype=float)
    h_m = np.asarray(h_m, dtype=float)
    _check_dims(v, model.n_vis, "v")
    _check_dims(h_m, model.n_mean, "h_m")
    diff = v - model.a
    quad = 0.5 * model.eps * np.sum(diff * diff, axis=-1)
    return quad - h_m @ model.c - np.sum((v @ model.W) * h_m, axis=-1)


def energy_cov(v, h_c, model):
    v = np.asarray(v, dtype=float)
    h_c = np.asarray(h_c, dtype=float)
    _check_dims(v, model.n_vis, "v")
    _check_dims(h_c, model.n_cov, "h_c")
    proj2 = (v @ model.R) ** 2
    return -h_c @ model.d - np.sum((proj2 @ model.P) * h_c, axis=-1)


def total_energy(v, h_m, h_c, model):
    return energy_mean(v, h_m, model) + energy_cov(v, h_c, model)


def free_energy(v, model):
    """Free energy with all hidden units summed out, ``exp(-F) = sum_h exp(-E)``."""
    v = np.asarray(v, dtype=float)
    _check_dims(v, model.n_vis, "v")
    diff = v - model.a
    quad = 0.5 * model.eps * np.sum(diff * diff, axis=-1)
    mean_in = model.c + v @ model.W
    cov_in = model.d + ((v @ model.R) ** 2) @ model.P
    return quad - softplus(mean_in).sum(axis=-1) - softplus(cov_in).sum(axis=-1)


# --------------------------------------------------------------------------
# conditionals and sampling


def infer_hidden(v, model):
    """Posterior probabilities ``(p_m, p_c)`` of the hidden units given ``v``."""
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("visible input contains non-finite values")
    _check_dims(v, model.n_vis, "v")
    p_m = sigmoid(model.c + v @ model.W)
    p_c = sigmoid(model.d + ((v @ model.R) ** 2) @ model.P)
    return p_m, p_c


def encode(v, model, mode="map", seed: SeedLike = None):
    """Binary latent state(s) for ``v``.

    ``mode="map"`` thresholds the posteriors at 0.5 (a probability of exactly
    0.5 maps to 1); ``mode="sample"`` draws Bernoulli units using ``seed``.
    Returns a :class:`LatentState` for a vector and :class:`LatentStates`
    for a matrix.
    """
    p_m, p_c = infer_hidden(v, model)
    if mode == "map":
        h_m = (p_m >= 0.5).astype(np.uint8)
        h_c = (p_c >= 0.5).astype(np.uint8)
    elif mode == "sample":
        rng = _rng(seed)
        h_m = (rng.random(p_m.shape) < p_m).astype(np.uint8)
        h_c = (rng.random(p_c.shape) < p_c).astype(np.uint8)
    else:
        raise ValueError(f"unknown encode mode {mode!r}")
    if h_m.ndim == 1:
        return LatentState(h_m, h_c)
    return LatentStates(h_m, h_c)


def conditional_precision(h_c, model):
    """Precision matrix of ``p(v | h_c)``, batched over leading axes of ``h_c``."""
    h_c = np.asarray(h_c, dtype=float)
    n = model.n_vis
    scale = -(h_c @ model.P.T)  # (..., n_factors), >= 0 since P <= 0
    # one GEMM over all samples: M[k] = sum_f 2 s[k, f] r_f r_f^T
    outer = (model.R[:, None, :] * model.R[None, :, :]).reshape(n * n, -1)
    flat = scale.reshape(-1, scale.shape[-1])
    M = (2.0 * flat @ outer.T).reshape(scale.shape[:-1] + (n, n))
    M += model.eps * np.eye(n)
    return M


def _cholesky(M):
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        lam = np.linalg.eigvalsh(M).min()
        raise np.linalg.LinAlgError(
            f"conditional precision is not positive definite "
            f"(smallest eigenvalue estimate {lam:.3e})") from None


def visible_moments(h_m, h_c, model):
    """Mean and covariance of the Gaussian ``p(v | h_m, h_c)``."""
    M = conditional_precision(h_c, model)
    b = np.asarray(h_m, dtype=float) @ model.W.T + model.eps * model.a
    cov = np.linalg.inv(M)
    mean = (cov @ b[..., None])[..., 0]
    return mean, cov


def sample_visible(h_m, h_c, model, seed: SeedLike = None, return_mean=False):
    """Draw ``v ~ N(Sigma (eps*a + W h_m), Sigma)`` with ``Sigma^-1`` the
    conditional precision, through a Cholesky factor ``M = L L^T``."""
    h_m = np.asarray(h_m, dtype=float)
    h_c = np.asarray(h_c, dtype=float)
    _check_dims(h_m, model.n_mean, "h_m")
    _check_dims(h_c, model.n_cov, "h_c")
    rng = _rng(seed)
    M = conditional_precision(h_c, model)
    L = _cholesky(M)
    b = (h_m @ model.W.T + model.eps * model.a)[..., None]
    z = rng.standard_normal(b.shape)
    # L^-T z = M^-1 L z, so mean and noise share one solve
    v = np.linalg.solve(M, b + L @ z)[..., 0]
    if return_mean:
        return v, np.linalg.solve(M, b)[..., 0]
    return v


def gibbs_sweep(v, model, rng):
    """One block Gibbs sweep ``v -> h -> v'`` on the exact conditionals."""
    p_m, p_c = infer_hidden(v, model)
    h_m = (rng.random(p_m.shape) < p_m).astype(float)
    h_c = (rng.random(p_c.shape) < p_c).astype(float)
    return sample_visible(h_m, h_c, model, rng)


# --------------------------------------------------------------------------
# gradients


def free_energy_grad(v, model):
    """Gradient of the batch-averaged free energy with respect to every
    parameter tensor, using posterior probabilities for the hidden units."""
    v = np.atleast_2d(np.asarray(v, dtype=float))
    n = v.shape[0]
    p_m, p_c = infer_hidden(v, model)
    proj = v @ model.R
    pooled = p_c @ model.P.T  # (n, n_factors)
    return {
        "W": -(v.T @ p_m) / n,
        "a": -model.eps * (v - model.a).mean(axis=0),
        "c": -p_m.mean(axis=0),
        "R": -2.0 * (v.T @ (proj * pooled)) / n,
        "P": -((proj ** 2).T @ p_c) / n,
        "d": -p_c.mean(axis=0),
    }


# --------------------------------------------------------------------------
# training


def init_model(hyper: Hyperparams, seed: SeedLike = None) -> McRbmModel:
    rng = _rng(hyper.seed if seed is None else seed)
    nv, nm, nf, nc = hyper.n_vis, hyper.n_mean, hyper.n_factors, hyper.n_cov
    W = 0.01 * rng.standard_normal((nv, nm))
    R = 0.01 * rng.standard_normal((nv, nf))
    R /= np.linalg.norm(R, axis=0, keepdims=True)
    P = -np.abs(0.01 * rng.standard_normal((nf, nc)))
    P /= np.abs(P).sum(axis=0, keepdims=True)
    chains = rng.standard_normal((hyper.n_chains, nv))
    model = McRbmModel(W=W, a=np.zeros(nv), c=np.zeros(nm), R=R, P=P,
                       d=-np.ones(nc), hyper=hyper, chains=chains)
    model.velocity = {k: np.zeros_like(v) for k, v in model.params().items()}
    return model


def _project(model):
    """Restore the constraints: P <= 0 with unit-L1 columns, unit-norm R columns."""
    np.minimum(model.P, 0.0, out=model.P)
    # without this the pooling weights grow until every covariance unit is off
    mass = np.abs(model.P).sum(axis=0, keepdims=True)
    model.P /= np.where(mass > 0, mass, 1.0)
    norms = np.linalg.norm(model.R, axis=0, keepdims=True)
    model.R /= np.where(norms > 0, norms, 1.0)


def pcd_step(batch, model, rng, momentum=None):
    """One persistent-contrastive-divergence update, in place.

    The positive phase uses the minibatch, the negative phase the persistent
    chains after one block Gibbs sweep. Returns a diagnostics dict.
    """
    hyper = model.hyper
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    if batch.shape[0] == 0:
        raise ValueError("empty minibatch")
    mom = hyper.momentum if momentum is None else momentum

    pos = free_energy_grad(batch, model)
    model.chains = gibbs_sweep(model.chains, model, rng)
    neg = free_energy_grad(model.chains, model)

    for name in _PARAM_NAMES:
        grad = neg[name] - pos[name]  # ascent direction of the log-likelihood
        if name in ("W", "R", "P"):
            grad = grad - hyper.weight_decay * getattr(model, name)
        if not np.all(np.isfinite(grad)):
            raise TrainingError(
                f"non-finite gradient for {name} at epoch {model.epoch}",
                {"epoch": model.epoch, "param": name,
                 "param_norms": {k: float(np.linalg.norm(v)) for k, v in model.params().items()}})
        vel = model.velocity.setdefault(name, np.zeros_like(grad))
        vel *= mom
        vel += hyper.learning_rate * grad
        getattr(model, name)[...] += vel
    _project(model)

    sub = batch[:_RECON_ROWS]
    p_m, p_c = infer_hidden(sub, model)
    recon = reconstruct_mean(p_m >= 0.5, p_c >= 0.5, model)
    return {
        "recon_error": float(np.mean((recon - sub) ** 2)),
        "free_energy_gap": float(free_energy(batch, model).mean()
                                 - free_energy(model.chains, model).mean()),
    }


def reconstruct_mean(h_m, h_c, model):
    M = conditional_precision(np.asarray(h_c, dtype=float), model)
    b = np.asarray(h_m, dtype=float) @ model.W.T + model.eps * model.a
    return np.linalg.solve(M, b[..., None])[..., 0]


def train(rates, hyper: Hyperparams, model: Optional[McRbmModel] = None,
          callback=None) -> McRbmModel:
    """Train an mcRBM on the rows of a standardized rate matrix.

    ``rates`` is a :class:`~rgcmodes.rates.RateMatrix` (must be standardized)
    or a plain array of already standardized rows. Rows are shuffled every
    epoch and split into minibatches of ``hyper.minibatch_size``.
    """
    if hasattr(rates, "values"):
        if not rates.standardized:
            raise ValueError("train requires a standardized RateMatrix")
        data = np.asarray(rates.values, dtype=float)
    else:
        data = np.asarray(rates, dtype=float)
    if data.ndim != 2 or data.shape[1] != hyper.n_vis:
        raise ValueError(f"data shape {data.shape} does not match n_vis={hyper.n_vis}")
    if model is None:
        model = init_model(hyper)
    rng = np.random.default_rng([hyper.seed, 1])
    bs = hyper.minibatch_size
    for _ in range(hyper.epochs):
        mom = hyper.momentum if model.epoch >= hyper.momentum_switch_epoch else hyper.initial_momentum
        order = rng.permutation(data.shape[0])
        recon, gap = [], []
        for start in range(0, data.shape[0], bs):
            diag = pcd_step(data[order[start:start + bs]], model, rng, momentum=mom)
            recon.append(diag["recon_error"])
            gap.append(diag["free_energy_gap"])
        model.epoch += 1
        stats = {"epoch": model.epoch, "recon_error": float(np.mean(recon)),
                 "free_energy_gap": float(np.mean(gap)),
                 "mean_free_energy": float(free_energy(data, model).mean())}
        model.history.append(stats)
        logger.debug("epoch %d recon %.4f gap %.4f", model.epoch, stats["recon_error"],
                     stats["free_energy_gap"])
        if callback is not None:
            callback(model, stats)
    return model


# --------------------------------------------------------------------------
# checkpoints


def _write_tensor(fh, name, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    encoded = name.encode()
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes())


def _read_tensor(fh):
    (n,) = struct.unpack("<I", fh.read(4))
    name = fh.read(n).decode()
    (ndim,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape).astype(float)
    return name, arr


def save_checkpoint(model: McRbmModel, path):
    """Binary checkpoint: magic ``MCRB``, u32 version, JSON hyperparameter
    block, u64 epoch, then named little-endian float64 tensors."""
    path = Path(path)
    hyper = json.dumps(model.hyper.to_dict(), sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(hyper)))
        fh.write(hyper)
        fh.write(struct.pack("<Q", model.epoch))
        tensors = list(model.params().items()) + [("chains", model.chains)]
        tensors += [(f"velocity.{k}", v) for k, v in sorted(model.velocity.items())]
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            _write_tensor(fh, name, arr)
    tmp.replace(path)


def load_checkpoint(path) -> McRbmModel:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not an mcRBM checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (n,) = struct.unpack("<Q", fh.read(8))
        hyper = Hyperparams(**json.loads(fh.read(n).decode()))
        (epoch,) = struct.unpack("<Q", fh.read(8))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = dict(_read_tensor(fh) for _ in range(count))
    velocity = {k.split(".", 1)[1]: v for k, v in tensors.items() if k.startswith("velocity.")}
    return McRbmModel(**{k: tensors[k] for k in _PARAM_NAMES}, hyper=hyper,
                      chains=tensors["chains"], epoch=epoch, velocity=velocity)
