"""Random-feature maps and the over-parameterized linear head.

Fitting is either the closed-form minimum-norm interpolant from an
initialization, or plain mini-batch SGD on the mean squared error, whose
limit on over-parameterized problems is that same interpolant.
"""

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import ONE_HOT, PM_ONE
from .numerics import spd_solve

ACTIVATIONS = {
    "relu": lambda a: np.maximum(a, 0.0),
    "cos": np.cos,
    "tanh": np.tanh,
}


class LearningRateError(RuntimeError):
    """Gradient descent diverged; the learning rate is too large."""


@dataclass(frozen=True)
class RFMap:
    W: np.ndarray
    sigma: float
    activation: str = "relu"
    seed: int = None

    @property
    def D(self):
        return self.W.shape[0]

    @property
    def d(self):
        return self.W.shape[1]

    def metadata(self):
        return {"d": self.d, "D": self.D, "sigma": self.sigma, "activation": self.activation, "seed": self.seed}


def sample_rf_map(d, D, sigma, activation="relu", seed=0):
    """Draw ``W`` with i.i.d. ``N(0, 1/sigma^2)`` entries."""
    if D < 1 or d < 1:
        raise ValueError(f"d and D must be positive, got d={d}, D={D}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}; choose from {sorted(ACTIVATIONS)}")
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((D, d)) / sigma
    return RFMap(W=W, sigma=float(sigma), activation=activation, seed=seed)


def featurize(rf, X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != rf.d:
        raise ValueError(f"X has {X.shape[0]} rows but the map expects d={rf.d}")
    return ACTIVATIONS[rf.activation](rf.W @ X)


@dataclass
class LinearHead:
    """Output weights ``w`` (D x C) with a frozen copy of their initial value."""

    w: np.ndarray
    w_init: np.ndarray

    def __post_init__(self):
        self.w = np.array(self.w, dtype=float)
        w_init = np.array(self.w_init, dtype=float)
        if w_init.shape != self.w.shape:
            raise ValueError(f"w {self.w.shape} and w_init {w_init.shape} differ in shape")
        w_init.setflags(write=False)
        self.w_init = w_init


def init_head(D, C, seed=0, kind="random"):
    """Head initialization: i.i.d. ``N(0, 1/D)`` entries, or zeros."""
    if kind == "zero":
        w0 = np.zeros((D, C))
    elif kind == "random":
        w0 = np.random.default_rng(seed).standard_normal((D, C)) / np.sqrt(D)
    else:
        raise ValueError(f"unknown head init {kind!r}")
    return LinearHead(w=w0, w_init=w0)


@dataclass(frozen=True)
class SgdConfig:
    lr: float
    epochs: int
    batch_size: int
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        # lr == 0 is accepted as an explicit no-op run
        if not self.lr >= 0:
            raise ValueError(f"learning rate must be nonnegative, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


def _as_2d(Y):
    Y = np.asarray(Y, dtype=float)
    return (Y[:, None], True) if Y.ndim == 1 else (Y, False)


def _check_fit_shapes(Z, Y, w0):
    if Z.ndim != 2:
        raise ValueError(f"Z must be (D, N), got {Z.shape}")
    D, N = Z.shape
    if Y.shape[0] != N:
        raise ValueError(f"Y has {Y.shape[0]} rows but Z has {N} samples")
    if w0.shape != (D, Y.shape[1]):
        raise ValueError(f"w0 must have shape {(D, Y.shape[1])}, got {w0.shape}")


def minnorm_fit(Z, Y, w0, lam=0.0):
    """Closest interpolant to ``w0``: ``w0 + Z (Z^T Z + lam I)^{-1} (Y - Z^T w0)``."""
    Z = np.asarray(Z, dtype=float)
    Y, squeeze = _as_2d(Y)
    w0, _ = _as_2d(w0)
    _check_fit_shapes(Z, Y, w0)
    coef = spd_solve(Z.T @ Z, Y - Z.T @ w0, lam, "feature Gram Z^T Z")
    w = w0 + Z @ coef
    return w[:, 0] if squeeze else w


def mse(Z, Y, w):
    r = Z.T @ w - Y
    return float(np.sum(r * r) / Z.shape[1])


def sgd_fit(Z, Y, w0, cfg, callback=None):
    """Mini-batch SGD on ``(1/N) ||Z^T w - Y||_F^2`` starting at ``w0``.

    ``callback(epoch, w)`` runs after every epoch; a truthy return stops
    training early.
    """
    Z = np.asarray(Z, dtype=float)
    Y, squeeze = _as_2d(Y)
    w, _ = _as_2d(w0)
    w = w.copy()
    _check_fit_shapes(Z, Y, w)
    N = Z.shape[1]
    rng = np.random.default_rng(cfg.seed)
    loss0 = mse(Z, Y, w)
    order = np.arange(N)
    # divergence is reported below, so overflow warnings are noise
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            if cfg.shuffle:
                order = rng.permutation(N)
            for start in range(0, N, cfg.batch_size):
                batch = order[start : start + cfg.batch_size]
                Zb = Z[:, batch]
                grad = (2.0 / batch.size) * (Zb @ (Zb.T @ w - Y[batch]))
                w -= cfg.lr * grad
            loss = mse(Z, Y, w)
            if not np.isfinite(loss) or (loss0 > 0 and loss > 10.0 * loss0):
                raise LearningRateError(
                    f"SGD diverged at epoch {epoch}: loss {loss:.3e} vs initial {loss0:.3e} (lr={cfg.lr})"
                )
            if callback is not None and callback(epoch, w):
                break
    return w[:, 0] if squeeze else w


def predict(w, Z):
    Z = np.asarray(Z, dtype=float)
    w = np.asarray(w, dtype=float)
    if w.shape[0] != Z.shape[0]:
        raise ValueError(f"w has {w.shape[0]} rows but Z has D={Z.shape[0]}")
    return Z.T @ w


def decide(outputs, scheme):
    """Class decisions: sign with ``sign(0) -> +1`` for pm-one, argmax (lowest index on ties) for one-hot."""
    outputs = np.asarray(outputs, dtype=float)
    if outputs.ndim == 1:
        outputs = outputs[:, None]
    if scheme == PM_ONE:
        if outputs.shape[1] != 1:
            raise ValueError(f"pm-one decisions need a single output column, got {outputs.shape[1]}")
        return (outputs[:, 0] >= 0).astype(np.int64)
    if scheme == ONE_HOT:
        return np.argmax(outputs, axis=1).astype(np.int64)
    raise ValueError(f"unknown scheme {scheme!r}")


@dataclass
class RFModel:
    """A feature map and a head, evaluated as one classifier."""

    rf: RFMap
    w: np.ndarray
    scheme: str

    def outputs(self, X):
        return predict(self.w, featurize(self.rf, X))

    def decisions(self, X):
        return decide(self.outputs(X), self.scheme)


# --------------------------------------------------------------------------
# serialization

_HEADER = struct.Struct("<QQ")


def save_weights(path, w, metadata=None):
    """Write ``w`` as a little-endian f64 blob with a ``(D, C)`` header.

    ``metadata`` goes to a JSON sidecar ``<path>.json``.
    """
    w = np.asarray(w, dtype=float)
    if w.ndim == 1:
        w = w[:, None]
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(*w.shape))
        fh.write(w.astype("<f8").tobytes(order="C"))
    if metadata is not None:
        path.with_name(path.name + ".json").write_text(json.dumps(metadata, indent=2, sort_keys=True))


def load_weights(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated weight header")
    D, C = _HEADER.unpack_from(raw)
    body = raw[_HEADER.size :]
    if len(body) != 8 * D * C:
        raise ValueError(f"{path}: expected {D * C} values, found {len(body) // 8}")
    return np.frombuffer(body, dtype="<f8").reshape(D, C).astype(float)
