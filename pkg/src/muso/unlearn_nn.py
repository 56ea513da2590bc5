"""Optimal-relabel unlearning for small MLPs with trainable features.

The hidden layers act as a feature map ``Z(.)`` and the final linear layer
as the head ``w``.  Because training moves the features, relabelling and
fine-tuning alternate: each outer iteration recomputes features, rebuilds
an approximate retain-set projector from a subsample, refreshes the forget
targets and takes a few gradient steps.
"""

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ONE_HOT
from .numerics import projector_exact, projector_woodbury, truncated_svd
from .rf_model import ACTIVATIONS, LearningRateError, LinearHead, SgdConfig, decide, minnorm_fit
from .unlearn_linear import RelabelResult

_ACT_GRADS = {
    "tanh": lambda a, h: 1.0 - h * h,
    "relu": lambda a, h: (a > 0).astype(float),
    "cos": lambda a, h: -np.sin(a),
}


@dataclass
class Mlp:
    """Hidden layers (``weights[i]`` is ``d_i x d_{i-1}``) followed by a bias-free linear head.

    ``frozen_prefix`` leading hidden layers receive no gradient updates.
    """

    weights: list
    biases: list
    activations: list
    head: LinearHead
    frozen_prefix: int = 0
    scheme: str = ONE_HOT
    seed: int = None

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases and activations must have equal length")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape[0] != b.shape[0]:
                raise ValueError(f"layer {i}: weight rows {W.shape[0]} != bias length {b.shape[0]}")
            if i and W.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input width {W.shape[1]} != previous width")
        if self.head.w.shape[0] != self.D:
            raise ValueError(f"head input width {self.head.w.shape[0]} != last hidden width {self.D}")
        if not 0 <= self.frozen_prefix < self.n_layers:
            raise ValueError(f"frozen_prefix must be in [0, {self.n_layers}), got {self.frozen_prefix}")

    @property
    def n_hidden(self):
        return len(self.weights)

    @property
    def n_layers(self):
        return self.n_hidden + 1

    @property
    def widths(self):
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def D(self):
        return self.weights[-1].shape[0] if self.weights else self.head.w.shape[0]

    def copy(self):
        return copy.deepcopy(self)

    def outputs(self, X):
        return mlp_forward_features(self, X).T @ self.head.w

    def decisions(self, X):
        return decide(self.outputs(X), self.scheme)


def init_mlp(widths, n_outputs, activation="tanh", seed=0, frozen_prefix=0, scheme=ONE_HOT):
    """LeCun-normal hidden layers with zero biases and an ``N(0, 1/D)`` head."""
    if len(widths) < 2:
        raise ValueError("widths must list the input and at least one hidden width")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in))
        biases.append(np.zeros(fan_out))
    D = widths[-1]
    w0 = rng.standard_normal((D, n_outputs)) / np.sqrt(D)
    return Mlp(
        weights=weights,
        biases=biases,
        activations=[activation] * len(weights),
        head=LinearHead(w=w0, w_init=w0),
        frozen_prefix=frozen_prefix,
        scheme=scheme,
        seed=seed,
    )


def mlp_from_rf(rf, head, scheme=ONE_HOT, frozen=True):
    """One-hidden-layer MLP whose hidden layer is the random-feature map."""
    return Mlp(
        weights=[rf.W.copy()],
        biases=[np.zeros(rf.D)],
        activations=[rf.activation],
        head=LinearHead(w=head.w, w_init=head.w_init),
        frozen_prefix=1 if frozen else 0,
        scheme=scheme,
        seed=rf.seed,
    )


def _forward(m, X):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != m.widths[0]:
        raise ValueError(f"X must have {m.widths[0]} rows, got shape {X.shape}")
    hs, pres = [X], []
    for W, b, act in zip(m.weights, m.biases, m.activations):
        a = W @ hs[-1] + b[:, None]
        pres.append(a)
        hs.append(ACTIVATIONS[act](a))
    return hs, pres


def mlp_forward_features(m, X):
    """Hidden-layer features ``Z`` (D x N); the head is not applied."""
    return _forward(m, X)[0][-1]


def mlp_loss_and_grads(m, X, Y):
    """MSE ``(1/N)||Z^T w - Y||_F^2`` and its gradients.

    Returns ``(loss, grad_weights, grad_biases, grad_head)``.
    """
    hs, pres = _forward(m, X)
    Y = np.asarray(Y, dtype=float)
    N = hs[0].shape[1]
    Z = hs[-1]
    resid = Z.T @ m.head.w - Y
    loss = float(np.sum(resid * resid) / N)
    d_out = (2.0 / N) * resid
    g_head = Z @ d_out
    dh = m.head.w @ d_out.T
    g_w = [None] * m.n_hidden
    g_b = [None] * m.n_hidden
    for i in reversed(range(m.n_hidden)):
        da = dh * _ACT_GRADS[m.activations[i]](pres[i], hs[i + 1])
        g_w[i] = da @ hs[i].T
        g_b[i] = da.sum(axis=1)
        if i > 0:
            dh = m.weights[i].T @ da
    return loss, g_w, g_b, g_head


def mlp_train(m, X, Y, cfg, callback=None):
    """Seeded mini-batch gradient descent on MSE through every non-frozen layer.

    Returns a new model; ``m`` is left untouched.  ``callback(epoch, model)``
    may return True to stop early.
    """
    m = m.copy()
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("training data must be finite")
    N = X.shape[1]
    rng = np.random.default_rng(cfg.seed)
    loss0 = mlp_loss_and_grads(m, X, Y)[0]
    order = np.arange(N)
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            if cfg.shuffle:
                order = rng.permutation(N)
            for start in range(0, N, cfg.batch_size):
                batch = order[start : start + cfg.batch_size]
                _, g_w, g_b, g_head = mlp_loss_and_grads(m, X[:, batch], Y[batch])
                for i in range(m.frozen_prefix, m.n_hidden):
                    m.weights[i] -= cfg.lr * g_w[i]
                    m.biases[i] -= cfg.lr * g_b[i]
                m.head.w -= cfg.lr * g_head
            loss = mlp_loss_and_grads(m, X, Y)[0]
            if not np.isfinite(loss) or (loss0 > 0 and loss > 10.0 * loss0):
                raise LearningRateError(
                    f"MLP training diverged at epoch {epoch}: loss {loss:.3e} vs initial {loss0:.3e} (lr={cfg.lr})"
                )
            if callback is not None and callback(epoch, m):
                break
    return m


# --------------------------------------------------------------------------
# subsampling


def column_select(X, k, c, seed=0):
    """Leverage-score column sampling.

    Returns ``(indices, p)``: ``c`` column indices drawn i.i.d. from the
    multinomial with ``p_i = ||V_k[:, i]||^2 / k``.
    """
    X = np.asarray(X, dtype=float)
    N = X.shape[1]
    if not 1 <= c < N:
        raise ValueError(f"c must be in [1, {N}), got {c}")
    V = truncated_svd(X, k)
    p = np.sum(V * V, axis=0) / k
    p = p / p.sum()
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(N, size=c, replace=True, p=p)), p


def muso_labels_dynamic(Z_u_t, proj_hat_t, w_p, w_init, y_u):
    """Optimal forget targets corrected for features that no longer interpolate.

    ``Z_u^T (P (w_p - w_init) + w_init) - y_u + Z_u^T w_p``.
    """
    Z_u_t = np.asarray(Z_u_t, dtype=float)
    w_p = np.asarray(w_p, dtype=float)
    w_init = np.asarray(w_init, dtype=float)
    y_u = np.asarray(y_u, dtype=float)
    if y_u.ndim == 1:
        y_u = y_u[:, None]
    if Z_u_t.shape[0] != w_p.shape[0] or y_u.shape != (Z_u_t.shape[1], w_p.shape[1]):
        raise ValueError(
            f"shape mismatch: Z_u {Z_u_t.shape}, w_p {w_p.shape}, y_u {y_u.shape}"
        )
    y = Z_u_t.T @ (proj_hat_t.apply(w_p - w_init) + w_init) - y_u + Z_u_t.T @ w_p
    return RelabelResult(y=y, method="muso", provenance={"projector": proj_hat_t.mode, "lam": proj_hat_t.lam})


@dataclass(frozen=True)
class MusoConfig:
    """Settings for the alternating relabel / fine-tune loop.

    ``lr`` is the unlearning learning rate; :meth:`from_pretrain_lr` sets it
    to 5% of the pre-training rate.
    """

    lr: float
    sample_ratio: float = 0.2
    selector: str = "random"
    lam: float = 1e-6
    max_iters: int = 10
    inner_epochs: int = 1
    tol: float = 1e-4
    seed: int = 0
    batch_size: int = 32
    projector: str = "woodbury"
    head_update: str = "sgd"
    rank: int = None

    def __post_init__(self):
        if not 0 < self.sample_ratio <= 1:
            raise ValueError(f"sample_ratio must be in (0, 1], got {self.sample_ratio}")
        if self.selector not in ("random", "column-select"):
            raise ValueError(f"unknown selector {self.selector!r}")
        if not self.lam > 0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        if not self.lr > 0:
            raise ValueError(f"unlearning lr must be positive, got {self.lr}")
        if self.max_iters < 0 or self.inner_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_iters >= 0, inner_epochs >= 1 and batch_size >= 1 required")
        if not self.tol >= 0:
            raise ValueError("tol must be nonnegative")
        if self.projector not in ("woodbury", "exact"):
            raise ValueError(f"unknown projector {self.projector!r}")
        if self.head_update not in ("sgd", "closed-form"):
            raise ValueError(f"unknown head_update {self.head_update!r}")

    @classmethod
    def from_pretrain_lr(cls, pretrain_lr, **kwargs):
        return cls(lr=0.05 * pretrain_lr, **kwargs)


def _subsample(X_r, cfg, rng):
    N_r = X_r.shape[1]
    n_sub = int(np.floor(cfg.sample_ratio * N_r))
    if n_sub < 1:
        raise ValueError(f"sample ratio {cfg.sample_ratio} selects no retain samples out of {N_r}")
    if n_sub >= N_r:
        return np.arange(N_r)
    if cfg.selector == "random":
        return np.sort(rng.choice(N_r, size=n_sub, replace=False))
    k = cfg.rank or min(X_r.shape[0], n_sub)
    idx, _ = column_select(X_r, k, n_sub, seed=int(rng.integers(2**32)))
    return np.unique(idx)


def muso_unlearn(m, m_init, X_r, Y_r, X_u, Y_u, cfg, history=None):
    """Alternate forget-target refreshes with fine-tuning until labels settle.

    ``m`` is the pretrained model, ``m_init`` its initialization snapshot.
    Per-iteration diagnostics are appended to ``history`` when a list is
    given.
    """
    if m.widths != m_init.widths or m.head.w.shape != m_init.head.w.shape:
        raise ValueError("pretrained and initial models must share an architecture")
    X_r = np.asarray(X_r, dtype=float)
    X_u = np.asarray(X_u, dtype=float)
    Y_r = np.asarray(Y_r, dtype=float)
    Y_u = np.asarray(Y_u, dtype=float)
    w_p = m.head.w.copy()
    w_init = m_init.head.w.copy()
    rng = np.random.default_rng(cfg.seed)
    model = m.copy()
    X_a = np.hstack([X_r, X_u])
    prev = None
    for t in range(cfg.max_iters):
        sub = _subsample(X_r, cfg, rng)
        Z_u = mlp_forward_features(model, X_u)
        Z_rs = mlp_forward_features(model, X_r[:, sub])
        if cfg.projector == "woodbury":
            proj = projector_woodbury(Z_rs, cfg.lam)
        else:
            proj = projector_exact(Z_rs, cfg.lam)
        labels = muso_labels_dynamic(Z_u, proj, w_p, w_init, Y_u).y
        Y_a = np.vstack([Y_r, labels])
        if cfg.head_update == "closed-form":
            Z_a = mlp_forward_features(model, X_a)
            model.head.w = minnorm_fit(Z_a, Y_a, model.head.w)
        else:
            sgd = SgdConfig(
                lr=cfg.lr,
                epochs=cfg.inner_epochs,
                batch_size=cfg.batch_size,
                seed=int(rng.integers(2**32)),
            )
            model = mlp_train(model, X_a, Y_a, sgd)
        change = None if prev is None else float(np.mean(np.abs(labels - prev)))
        if history is not None:
            history.append({"iter": t, "n_sub": int(sub.size), "label_change": change})
        if change is not None and change < cfg.tol:
            break
        prev = labels
    return model


def relabel_finetune(m, X_r, Y_r, X_u, y_u_tilde, cfg, callback=None):
    """Fine-tune on the retain set plus relabelled forget samples (baseline unlearners)."""
    X_a = np.hstack([np.asarray(X_r, dtype=float), np.asarray(X_u, dtype=float)])
    Y_a = np.vstack([np.asarray(Y_r, dtype=float), np.asarray(y_u_tilde, dtype=float)])
    return mlp_train(m, X_a, Y_a, cfg, callback=callback)


def mlp_teacher_labels(m, X_u, teacher_seed):
    """Outputs of a freshly initialized network with ``m``'s architecture."""
    teacher = init_mlp(
        m.widths, m.head.w.shape[1], activation=m.activations[0], seed=teacher_seed, scheme=m.scheme
    )
    return RelabelResult(y=teacher.outputs(X_u), method="badteacher", provenance={"teacher_seed": teacher_seed})


# --------------------------------------------------------------------------
# serialization


def save_mlp(m, path, extra=None):
    """Write ``<path>.json`` (architecture manifest) and ``<path>.bin`` (little-endian f64 blob)."""
    path = Path(path)
    arrays = []
    for W, b in zip(m.weights, m.biases):
        arrays += [W, b]
    arrays += [m.head.w, m.head.w_init]
    manifest = {
        "widths": m.widths,
        "n_outputs": int(m.head.w.shape[1]),
        "activations": list(m.activations),
        "frozen_prefix": m.frozen_prefix,
        "scheme": m.scheme,
        "seed": m.seed,
        "shapes": [list(a.shape) for a in arrays],
    }
    if extra:
        manifest.update(extra)
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    path.with_suffix(".bin").write_bytes(blob)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_mlp(path):
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    arrays, offset = [], 0
    for shape in manifest["shapes"]:
        size = int(np.prod(shape))
        if offset + size > flat.size:
            raise ValueError(f"{path}: weight blob shorter than manifest")
        arrays.append(flat[offset : offset + size].reshape(shape).astype(float))
        offset += size
    if offset != flat.size:
        raise ValueError(f"{path}: weight blob longer than manifest")
    n_hidden = len(manifest["widths"]) - 1
    return Mlp(
        weights=arrays[0 : 2 * n_hidden : 2],
        biases=arrays[1 : 2 * n_hidden : 2],
        activations=manifest["activations"],
        head=LinearHead(w=arrays[-2], w_init=arrays[-1]),
        frozen_prefix=manifest["frozen_prefix"],
        scheme=manifest["scheme"],
        seed=manifest["seed"],
    )
