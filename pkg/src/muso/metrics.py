"""Evaluation of unlearned models against the retrain oracle.

Accuracies are percentages.  The membership-inference attack thresholds
per-sample squared error: the threshold is fitted on retain (member)
versus test (non-member) losses and then applied to the forget set.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .data import encode_targets

GAP_FIELDS = ("RA", "TA", "FA", "MIA")


@dataclass(frozen=True)
class MetricsReport:
    RA: float
    TA: float
    FA: float
    MIA: float
    delta_w: float = None
    avg_gap: float = None
    seconds: float = None

    def __post_init__(self):
        for name in GAP_FIELDS:
            value = getattr(self, name)
            if value is None or not 0.0 <= value <= 100.0:
                raise ValueError(f"{name} must be a percentage in [0, 100], got {value}")
        if self.delta_w is not None and self.delta_w < 0:
            raise ValueError(f"delta_w must be nonnegative, got {self.delta_w}")

    def to_dict(self, timing=True):
        out = asdict(self)
        if not timing:
            out.pop("seconds")
        return out


def accuracy(model, X, labels):
    """Percent of samples whose decision equals the label."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return 100.0 * float(np.mean(model.decisions(X) == labels))


def delta_w(w, w_r, D=None):
    """``||w - w_r||_F^2 / D``."""
    w = np.asarray(w, dtype=float)
    w_r = np.asarray(w_r, dtype=float)
    if w.shape != w_r.shape:
        raise ValueError(f"shape mismatch: {w.shape} vs {w_r.shape}")
    D = w.shape[0] if D is None else D
    diff = w - w_r
    return float(np.sum(diff * diff) / D)


def sample_losses(model, X, labels, n_classes):
    Y = encode_targets(labels, n_classes, model.scheme).Y
    r = model.outputs(X) - Y
    return np.sum(r * r, axis=1)


def loss_threshold(member_losses, nonmember_losses):
    """Threshold maximizing balanced accuracy of ``loss <= tau`` as the member rule.

    Candidates are the observed losses; ties go to the largest threshold.
    """
    member = np.sort(np.asarray(member_losses, dtype=float))
    nonmember = np.sort(np.asarray(nonmember_losses, dtype=float))
    if member.size == 0 or nonmember.size == 0:
        raise ValueError("both member and non-member losses are required")
    candidates = np.unique(np.concatenate([member, nonmember]))
    tpr = np.searchsorted(member, candidates, side="right") / member.size
    tnr = 1.0 - np.searchsorted(nonmember, candidates, side="right") / nonmember.size
    score = 0.5 * (tpr + tnr)
    best = np.flatnonzero(score == score.max())[-1]
    return float(candidates[best])


def mia_member_rate(model, forget_set, test_set, retain_set, n_classes):
    """Percent of forget samples the loss-threshold attack calls members.

    Each set is an ``(X, labels)`` pair.
    """
    for name, s in (("forget", forget_set), ("test", test_set), ("retain", retain_set)):
        if np.asarray(s[1]).size == 0:
            raise ValueError(f"{name} set is empty")
    tau = loss_threshold(
        sample_losses(model, *retain_set, n_classes),
        sample_losses(model, *test_set, n_classes),
    )
    forget_losses = sample_losses(model, *forget_set, n_classes)
    return 100.0 * float(np.mean(forget_losses <= tau))


def avg_gap(report, reference):
    """Mean absolute difference over RA, TA, FA and MIA."""
    diffs = []
    for name in GAP_FIELDS:
        a = getattr(report, name, None)
        b = getattr(reference, name, None)
        if a is None or b is None:
            raise ValueError(f"missing field {name} for AvgGap")
        diffs.append(abs(a - b))
    return float(np.mean(diffs))


def evaluate(model, retain, forget, test, n_classes, w=None, w_r=None, seconds=None):
    """Full report for one model; ``retain``/``forget``/``test`` are ``(X, labels)`` pairs."""
    return MetricsReport(
        RA=accuracy(model, *retain),
        TA=accuracy(model, *test),
        FA=accuracy(model, *forget),
        MIA=mia_member_rate(model, forget, test, retain, n_classes),
        delta_w=None if w is None or w_r is None else delta_w(w, w_r),
        seconds=seconds,
    )


def with_gap(report, reference):
    return MetricsReport(**{**report.to_dict(), "avg_gap": avg_gap(report, reference)})
