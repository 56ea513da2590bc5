"""Exact unlearning for linear heads on fixed features.

A relabel-then-fine-tune unlearner fits the pretrained weights ``w_p`` to
the retain set plus the forget set under new targets.  The optimal targets
make the minimum-norm fine-tune coincide with retraining from ``w_init``
on the retain set alone; ``gap_decomposition`` gives the remaining
parameter gap for any other choice of targets.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import ONE_HOT, encode_targets
from .numerics import gram_blocks, projector_exact, schur_block_inverse
from .rf_model import featurize, init_head, minnorm_fit, sample_rf_map

METHODS = ("muso", "amnesiac", "badteacher", "mixed")


class InterpolationError(ValueError):
    """The pretrained weights do not interpolate their training data."""


@dataclass
class RelabelResult:
    y: np.ndarray
    method: str
    provenance: dict = field(default_factory=dict)
    original_labels: np.ndarray = None
    indices: np.ndarray = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown relabel method {self.method!r}")
        self.y = np.asarray(self.y, dtype=float)
        if self.y.ndim == 1:
            self.y = self.y[:, None]
        if not np.all(np.isfinite(self.y)):
            raise ValueError("relabelled targets contain non-finite values")

    def to_csv(self, path):
        """Audit table: ``index, original_label, y0..y{C-1}``."""
        n, C = self.y.shape
        indices = np.arange(n) if self.indices is None else self.indices
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "original_label"] + [f"y{j}" for j in range(C)])
            for i in range(n):
                orig = "" if self.original_labels is None else int(self.original_labels[i])
                writer.writerow([int(indices[i]), orig] + [repr(float(v)) for v in self.y[i]])


def _col(a):
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def muso_labels(Z_u, proj_r, w_p, w_init):
    """Optimal forget-set targets ``Z_u^T (P_r (w_p - w_init) + w_init)``.

    ``proj_r`` may be any projector onto (an approximation of) the retain
    feature span.
    """
    Z_u = np.asarray(Z_u, dtype=float)
    w_p, w_init = _col(w_p), _col(w_init)
    if w_p.shape != w_init.shape:
        raise ValueError(f"w_p {w_p.shape} and w_init {w_init.shape} differ in shape")
    if Z_u.shape[0] != w_p.shape[0] or proj_r.dim != w_p.shape[0]:
        raise ValueError(
            f"feature dimension mismatch: Z_u {Z_u.shape[0]}, projector {proj_r.dim}, w {w_p.shape[0]}"
        )
    y = Z_u.T @ (proj_r.apply(w_p - w_init) + w_init)
    return RelabelResult(y=y, method="muso", provenance={"projector": proj_r.mode, "lam": proj_r.lam})


def finetune(Z_r, y_r, Z_u, y_u_tilde, w_p, lam=0.0):
    """Minimum-norm fine-tune of ``w_p`` on the retain set plus the relabelled forget set."""
    Z_a = np.hstack([np.asarray(Z_r, dtype=float), np.asarray(Z_u, dtype=float)])
    y_a = np.vstack([_col(y_r), _col(y_u_tilde)])
    return minnorm_fit(Z_a, y_a, _col(w_p), lam)


def retrain(Z_r, y_r, w_init, lam=0.0):
    """The gold standard: minimum-norm fit from ``w_init`` on the retain set only."""
    return minnorm_fit(np.asarray(Z_r, dtype=float), _col(y_r), _col(w_init), lam)


@dataclass(frozen=True)
class GapDecomposition:
    """``w_r - w_u = C (b - y_tilde)``, split through ``w_p`` as ``term_rp + term_pu``."""

    C_matrix: np.ndarray
    b_vector: np.ndarray
    term_rp: np.ndarray
    term_pu: np.ndarray

    def predicted_gap(self, y_u_tilde=None):
        if y_u_tilde is None:
            return self.term_rp + self.term_pu
        return self.C_matrix @ (self.b_vector - _col(y_u_tilde))


def _rel(a, b):
    nb = np.linalg.norm(b)
    return np.linalg.norm(a - b) / (nb if nb > 0 else 1.0)


def gap_decomposition(Z_r, Z_u, y_r, y_u, y_u_tilde, w_p, w_init, lam=0.0, interp_tol=1e-6):
    """Closed-form gap between retraining and relabel fine-tuning.

    Valid only when ``w_p`` interpolates both the retain and the forget
    data; this is checked and :class:`InterpolationError` raised otherwise.
    """
    Z_r = np.asarray(Z_r, dtype=float)
    Z_u = np.asarray(Z_u, dtype=float)
    y_r, y_u, y_t = _col(y_r), _col(y_u), _col(y_u_tilde)
    w_p, w_init = _col(w_p), _col(w_init)
    for name, Z, y in (("retain", Z_r, y_r), ("forget", Z_u, y_u)):
        err = _rel(Z.T @ w_p, y)
        if err >= interp_tol:
            raise InterpolationError(
                f"w_p does not interpolate the {name} set (relative residual {err:.2e} >= {interp_tol:g})"
            )

    schur = schur_block_inverse(gram_blocks(Z_r, Z_u), lam)
    proj_r = projector_exact(Z_r, lam)
    C_matrix = proj_r.complement(Z_u @ schur.M)
    b_vector = Z_u.T @ (proj_r.apply(w_p - w_init) + w_init)
    # K_ur K_rr^{-1} (y_r - Z_r^T w_init) through the stored coupling block
    retain_term = schur.coupling.T @ (y_r - Z_r.T @ w_init)
    term_rp = C_matrix @ (retain_term + Z_u.T @ w_init - y_u)
    term_pu = C_matrix @ (Z_u.T @ w_p - y_t)
    return GapDecomposition(C_matrix=C_matrix, b_vector=b_vector, term_rp=term_rp, term_pu=term_pu)


def amnesiac_labels(y_u, n_classes, seed=0, scheme=ONE_HOT):
    """Replace each forget label by a uniformly drawn different class."""
    y_u = np.asarray(y_u, dtype=np.int64)
    if n_classes < 2:
        raise ValueError("amnesiac relabelling needs at least two classes")
    rng = np.random.default_rng(seed)
    shift = rng.integers(1, n_classes, size=y_u.size)
    new = (y_u + shift) % n_classes
    targets = encode_targets(new, n_classes, scheme)
    return RelabelResult(
        y=targets.Y,
        method="amnesiac",
        provenance={"seed": seed, "scheme": scheme, "new_labels": new.tolist()},
        original_labels=y_u,
    )


@dataclass(frozen=True)
class TeacherConfig:
    """Random RF teacher: same feature family as the student, independent weights."""

    d: int
    D: int
    sigma: float
    n_outputs: int
    activation: str = "relu"


def badteacher_labels(X_u, teacher_seed, map_cfg):
    """Targets are the outputs of a freshly seeded random RF model."""
    map_seed, head_seed = np.random.SeedSequence(teacher_seed).generate_state(2)
    rf = sample_rf_map(map_cfg.d, map_cfg.D, map_cfg.sigma, map_cfg.activation, seed=int(map_seed))
    head = init_head(map_cfg.D, map_cfg.n_outputs, seed=int(head_seed))
    y = featurize(rf, X_u).T @ head.w
    return RelabelResult(y=y, method="badteacher", provenance={"teacher_seed": teacher_seed})


def mixed_features(Z_r_sub, Z_u, c):
    """``(1 - c) Z_r_sub + c Z_u`` for ``0 < c < 1``."""
    Z_r_sub = np.asarray(Z_r_sub, dtype=float)
    Z_u = np.asarray(Z_u, dtype=float)
    if Z_r_sub.shape != Z_u.shape:
        raise ValueError(f"Z_r_sub {Z_r_sub.shape} must match Z_u {Z_u.shape}")
    if not 0 < c < 1:
        raise ValueError(f"mixing coefficient must lie in (0, 1), got {c}")
    return (1.0 - c) * Z_r_sub + c * Z_u
