"""Experiment orchestration: pretrain, unlearn with each method, retrain, evaluate.

A run is described by a JSON config (validated against
``config_schema.json``).  For every seed and scenario the harness writes
one JSON report under ``<output>/runs/``; wall-clock timings go to a
separate ``timing.json`` so the numerical reports are byte-reproducible.
``summary.csv`` aggregates mean and standard deviation across seeds.
"""

import csv
import hashlib
import io
import json
import os
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .data import (
    ONE_HOT,
    PM_ONE,
    Scenario,
    encode_targets,
    filter_classes,
    load_idx,
    split_scenario,
    synth_gaussian,
)
from .metrics import GAP_FIELDS, avg_gap, evaluate
from .numerics import projector_exact
from .rf_model import SgdConfig, decide, featurize, init_head, minnorm_fit, sample_rf_map, sgd_fit
from .unlearn_linear import (
    TeacherConfig,
    amnesiac_labels,
    badteacher_labels,
    finetune,
    muso_labels,
)
from .unlearn_nn import (
    MusoConfig,
    init_mlp,
    mlp_teacher_labels,
    mlp_train,
    muso_unlearn,
    relabel_finetune,
)

OUTPUT_ENV = "MUSO_OUTPUT_DIR"
PRETRAINED = "pretrained"
RETRAINED = "retrain"
SUMMARY_FIELDS = ("RA", "TA", "FA", "MIA", "delta_w", "avg_gap")


class ConfigError(ValueError):
    """The experiment config is malformed; the message names the offending field."""


def _schema():
    text = resources.files("muso").joinpath("config_schema.json").read_text()
    return json.loads(text)


def _field_path(parts):
    out = ""
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<root>"


def derive_seed(master, purpose):
    """Sub-seed from a labelled hash so new purposes never shift existing streams."""
    digest = hashlib.sha256(f"{purpose}:{int(master)}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict
    base_dir: Path

    @property
    def name(self):
        return self.raw.get("name", "experiment")

    @property
    def model_kind(self):
        return self.raw["model"]["kind"]

    @property
    def encoding(self):
        return self.raw.get("encoding", ONE_HOT)

    @property
    def lam(self):
        return float(self.raw.get("lam", 0.0))

    @property
    def methods(self):
        return [m for m in self.raw["methods"] if m != "none"]

    @property
    def seeds(self):
        return list(self.raw["seeds"])

    def output_dir(self):
        env = os.environ.get(OUTPUT_ENV)
        if env:
            return Path(env)
        return Path(self.raw.get("output_dir", f"results/{self.name}"))

    def path(self, key):
        p = Path(self.raw["dataset"][key])
        return p if p.is_absolute() else self.base_dir / p


def _semantic_checks(raw):
    model = raw["model"]
    fit = raw["fit"]
    if raw.get("encoding") == PM_ONE:
        ds = raw["dataset"]
        n_classes = len(ds["classes"]) if ds["kind"] == "idx" and "classes" in ds else ds.get("n_classes", 10)
        if n_classes != 2:
            raise ConfigError(f"encoding: pm-one needs exactly 2 classes, dataset has {n_classes}")
    if model["kind"] == "mlp":
        if fit["mode"] != "sgd":
            raise ConfigError("fit.mode: mlp models are trained with sgd")
        if model.get("frozen_prefix", 0) > len(model["widths"]):
            raise ConfigError("model.frozen_prefix: exceeds the number of hidden layers")
    for key in ("fit", "baseline_fit"):
        f = raw.get(key)
        if f and f.get("early_stopping") and f["mode"] != "sgd":
            raise ConfigError(f"{key}.early_stopping: only meaningful with mode sgd")
    for i, sc in enumerate(raw["scenarios"]):
        where = f"scenarios[{i}]"
        if sc["kind"] in ("full-class", "sub-class") and "target" not in sc:
            raise ConfigError(f"{where}.target: required for {sc['kind']}")
        if sc["kind"] == "sub-class" and "count" not in sc:
            raise ConfigError(f"{where}.count: required for sub-class on single-level labels")
        if sc["kind"] == "random" and ("fraction" in sc) == ("count" in sc):
            raise ConfigError(f"{where}: random scenarios take exactly one of fraction or count")
    muso = raw.get("muso", {})
    if "lr" in muso and "lr_fraction" in muso:
        raise ConfigError("muso: give lr or lr_fraction, not both")


def parse_config(raw, base_dir="."):
    """Validate a config mapping; raises :class:`ConfigError` naming the field."""
    validator = jsonschema.Draft202012Validator(_schema())
    error = jsonschema.exceptions.best_match(validator.iter_errors(raw))
    if error is not None:
        raise ConfigError(f"{_field_path(error.absolute_path)}: {error.message}")
    _semantic_checks(raw)
    return ExperimentConfig(raw=raw, base_dir=Path(base_dir))


def load_config(path):
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(raw, base_dir=path.parent)


# --------------------------------------------------------------------------
# data


def build_data(cfg, seed):
    ds_cfg = cfg.raw["dataset"]
    if ds_cfg["kind"] == "synthetic":
        kw = dict(
            d=ds_cfg["d"],
            n_classes=ds_cfg["n_classes"],
            separation=ds_cfg.get("separation", 1.0),
        )
        train = synth_gaussian(per_class=ds_cfg["per_class"], seed=derive_seed(seed, "data:train"), **kw)
        test = synth_gaussian(
            per_class=ds_cfg.get("test_per_class", ds_cfg["per_class"]),
            seed=derive_seed(seed, "data:test"),
            split="test",
            **kw,
        )
        return train, test
    train = load_idx(cfg.path("train_images"), cfg.path("train_labels"), split="train")
    test = load_idx(cfg.path("test_images"), cfg.path("test_labels"), split="test")
    keep = ds_cfg.get("classes")
    if keep is not None:
        train = filter_classes(train, keep, ds_cfg.get("per_class_cap"), seed=derive_seed(seed, "data:train"))
        test = filter_classes(test, keep, ds_cfg.get("test_per_class_cap"), seed=derive_seed(seed, "data:test"))
    return train, test


def scenario_list(cfg, seed):
    out = []
    for i, sc in enumerate(cfg.raw["scenarios"]):
        out.append(
            Scenario(
                kind=sc["kind"],
                target=sc.get("target"),
                fraction=sc.get("fraction"),
                count=sc.get("count"),
                seed=derive_seed(seed, f"split:{i}"),
            )
        )
    return out


def scenario_labels(cfg):
    labels = []
    for sc in cfg.raw["scenarios"]:
        label = sc["kind"]
        if label in labels:
            label = f"{label}-{len(labels)}"
        labels.append(label)
    return labels


# --------------------------------------------------------------------------
# models


@dataclass
class FeatureModel:
    """Linear head evaluated on precomputed features (``X`` arguments are ``Z``)."""

    w: np.ndarray
    scheme: str

    def outputs(self, Z):
        return Z.T @ self.w

    def decisions(self, Z):
        return decide(self.outputs(Z), self.scheme)


def _sgd_config(fit, seed):
    return SgdConfig(lr=fit["lr"], epochs=fit["epochs"], batch_size=fit["batch_size"], seed=seed)


def _early_stop(model_of, forget, test):
    """Stop once forget accuracy no longer exceeds test accuracy."""

    def callback(epoch, state):
        m = model_of(state)
        fa = np.mean(m.decisions(forget[0]) == forget[1])
        ta = np.mean(m.decisions(test[0]) == test[1])
        return fa <= ta

    return callback


class _LinearPath:
    def __init__(self, cfg, seed, train, test):
        m = cfg.raw["model"]
        self.cfg = cfg
        self.seed = seed
        self.scheme = cfg.encoding
        self.n_classes = train.n_classes
        self.rf = sample_rf_map(
            train.d, m["D"], m["sigma"], m.get("activation", "relu"), seed=derive_seed(seed, "rf-map")
        )
        self.Z = featurize(self.rf, train.X)
        self.Z_test = featurize(self.rf, test.X)
        self.X = train.X
        self.Y = encode_targets(train.labels, self.n_classes, self.scheme).Y
        head = init_head(m["D"], self.Y.shape[1], seed=derive_seed(seed, "head-init"), kind=m.get("head_init", "random"))
        self.w_init = head.w_init.copy()

    def model(self, w):
        return FeatureModel(w, self.scheme)

    def fit(self, fit, Z, Y, w0, purpose, forget=None, test=None):
        if fit["mode"] == "closed-form":
            return minnorm_fit(Z, Y, w0, self.cfg.lam)
        callback = None
        if fit.get("early_stopping"):
            callback = _early_stop(self.model, forget, test)
        return sgd_fit(Z, Y, w0, _sgd_config(fit, derive_seed(self.seed, purpose)), callback=callback)

    def pretrain(self):
        self.w_p = self.fit(self.cfg.raw["fit"], self.Z, self.Y, self.w_init, "fit:pretrain")
        return self.model(self.w_p)

    def views(self, split, test_labels, labels):
        Z_r, Z_u = self.Z[:, split.retain], self.Z[:, split.forget]
        return (Z_r, labels[split.retain]), (Z_u, labels[split.forget]), (self.Z_test, test_labels)

    def retrain(self, split, tag):
        Z_r, Y_r = self.Z[:, split.retain], self.Y[split.retain]
        w = self.fit(self.cfg.raw["fit"], Z_r, Y_r, self.w_init, f"fit:retrain:{tag}")
        return self.model(w)

    def unlearn(self, method, split, tag, forget, test):
        Z_r, Z_u = self.Z[:, split.retain], self.Z[:, split.forget]
        Y_r = self.Y[split.retain]
        fit = self.cfg.raw["fit"]
        if method == "muso":
            labels = muso_labels(Z_u, projector_exact(Z_r, self.cfg.lam), self.w_p, self.w_init).y
        else:
            fit = self.cfg.raw.get("baseline_fit", fit)
            if method == "amnesiac":
                labels = amnesiac_labels(
                    forget[1], self.n_classes, seed=derive_seed(self.seed, f"amnesiac:{tag}"), scheme=self.scheme
                ).y
            else:
                m = self.cfg.raw["model"]
                teacher = TeacherConfig(
                    d=self.X.shape[0], D=m["D"], sigma=m["sigma"], n_outputs=self.Y.shape[1],
                    activation=m.get("activation", "relu"),
                )
                labels = badteacher_labels(self.X[:, split.forget], derive_seed(self.seed, f"badteacher:{tag}"), teacher).y
        if fit["mode"] == "closed-form":
            w = finetune(Z_r, Y_r, Z_u, labels, self.w_p, self.cfg.lam)
        else:
            Z_a = np.hstack([Z_r, Z_u])
            Y_a = np.vstack([Y_r, labels])
            w = self.fit(fit, Z_a, Y_a, self.w_p, f"fit:{method}:{tag}", forget, test)
        return self.model(w)


class _MlpPath:
    def __init__(self, cfg, seed, train, test):
        m = cfg.raw["model"]
        self.cfg = cfg
        self.seed = seed
        self.scheme = cfg.encoding
        self.n_classes = train.n_classes
        self.X, self.X_test = train.X, test.X
        self.Y = encode_targets(train.labels, self.n_classes, self.scheme).Y
        self.m_init = init_mlp(
            [train.d] + list(m["widths"]),
            self.Y.shape[1],
            activation=m.get("activation", "tanh"),
            seed=derive_seed(seed, "mlp-init"),
            frozen_prefix=m.get("frozen_prefix", 0),
            scheme=self.scheme,
        )
        fit = cfg.raw["fit"]
        muso = cfg.raw.get("muso", {})
        self.unlearn_lr = muso.get("lr", muso.get("lr_fraction", 0.05) * fit["lr"])
        self.muso_cfg = dict(
            lr=self.unlearn_lr,
            sample_ratio=muso.get("sample_ratio", 0.2),
            selector=muso.get("selector", "random"),
            lam=muso.get("lam", 1e-6),
            max_iters=muso.get("max_iters", 10),
            inner_epochs=muso.get("inner_epochs", 1),
            tol=muso.get("tol", 1e-4),
            batch_size=muso.get("batch_size", fit["batch_size"]),
            projector=muso.get("projector", "woodbury"),
        )
        budget = max(1, self.muso_cfg["max_iters"] * self.muso_cfg["inner_epochs"])
        self.baseline_fit = cfg.raw.get(
            "baseline_fit",
            {"mode": "sgd", "lr": self.unlearn_lr, "epochs": budget, "batch_size": self.muso_cfg["batch_size"]},
        )

    def views(self, split, test_labels, labels):
        return (
            (self.X[:, split.retain], labels[split.retain]),
            (self.X[:, split.forget], labels[split.forget]),
            (self.X_test, test_labels),
        )

    def pretrain(self):
        fit = self.cfg.raw["fit"]
        self.m_p = mlp_train(self.m_init, self.X, self.Y, _sgd_config(fit, derive_seed(self.seed, "fit:pretrain")))
        return self.m_p

    def retrain(self, split, tag):
        fit = self.cfg.raw["fit"]
        cfg = _sgd_config(fit, derive_seed(self.seed, f"fit:retrain:{tag}"))
        return mlp_train(self.m_init, self.X[:, split.retain], self.Y[split.retain], cfg)

    def unlearn(self, method, split, tag, forget, test):
        X_r, X_u = self.X[:, split.retain], self.X[:, split.forget]
        Y_r, Y_u = self.Y[split.retain], self.Y[split.forget]
        if method == "muso":
            cfg = MusoConfig(seed=derive_seed(self.seed, f"muso:{tag}"), **self.muso_cfg)
            return muso_unlearn(self.m_p, self.m_init, X_r, Y_r, X_u, Y_u, cfg)
        if method == "amnesiac":
            labels = amnesiac_labels(
                forget[1], self.n_classes, seed=derive_seed(self.seed, f"amnesiac:{tag}"), scheme=self.scheme
            ).y
        else:
            labels = mlp_teacher_labels(self.m_p, X_u, derive_seed(self.seed, f"badteacher:{tag}")).y
        fit = self.baseline_fit
        callback = _early_stop(lambda m: m, forget, test) if fit.get("early_stopping") else None
        cfg = _sgd_config(fit, derive_seed(self.seed, f"fit:{method}:{tag}"))
        return relabel_finetune(self.m_p, X_r, Y_r, X_u, labels, cfg, callback=callback)


# --------------------------------------------------------------------------
# running


def _report_dict(report):
    return report.to_dict(timing=False)


def run_seed(cfg, seed):
    """All scenarios for one master seed; returns ``(reports, timings)`` keyed by scenario label."""
    train, test = build_data(cfg, seed)
    path_cls = _LinearPath if cfg.model_kind == "rf" else _MlpPath
    path = path_cls(cfg, seed, train, test)
    t0 = time.perf_counter()
    pretrained = path.pretrain()
    pretrain_seconds = time.perf_counter() - t0
    linear = cfg.model_kind == "rf"

    reports, timings = {}, {}
    for idx, (label, scenario) in enumerate(zip(scenario_labels(cfg), scenario_list(cfg, seed))):
        split = split_scenario(train, scenario)
        retain, forget, test_set = path.views(split, test.labels, train.labels)
        models = {PRETRAINED: pretrained}
        seconds = {PRETRAINED: pretrain_seconds}
        for method in cfg.methods:
            t0 = time.perf_counter()
            try:
                models[method] = path.unlearn(method, split, label, forget, test_set)
            except Exception as exc:
                raise RuntimeError(f"method {method} failed on scenario {label} (seed {seed}): {exc}") from exc
            seconds[method] = time.perf_counter() - t0
        t0 = time.perf_counter()
        models[RETRAINED] = path.retrain(split, label)
        seconds[RETRAINED] = time.perf_counter() - t0

        w_r = models[RETRAINED].w if linear else None
        rows = {}
        for name, model in models.items():
            rows[name] = evaluate(
                model, retain, forget, test_set, path.n_classes,
                w=model.w if linear else None, w_r=w_r,
            )
        ref = rows[RETRAINED]
        rows = {name: _report_dict(r) | {"avg_gap": avg_gap(r, ref)} for name, r in rows.items()}
        reports[label] = {
            "experiment": cfg.name,
            "scenario": label,
            "scenario_index": idx,
            "scenario_spec": cfg.raw["scenarios"][idx],
            "seed": seed,
            "n_retain": int(split.retain.size),
            "n_forget": int(split.forget.size),
            "n_test": int(test.N),
            "rows": rows,
            "row_order": list(models),
            "preprocessing": {"pixel_scale": "[0, 1]", "bias_feature": False, "encoding": cfg.encoding},
            "fit_mode": cfg.raw["fit"]["mode"],
        }
        timings[label] = seconds
    return reports, timings


def run_file_name(label, seed):
    return f"{label}__seed{seed}.json"


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def run_experiment(cfg, output_dir=None):
    """Run every seed and write reports; returns the output directory."""
    out = Path(output_dir) if output_dir is not None else cfg.output_dir()
    runs = out / "runs"
    runs.mkdir(parents=True, exist_ok=True)
    all_timing = {}
    for seed in cfg.seeds:
        reports, timings = run_seed(cfg, seed)
        for label, rep in reports.items():
            (runs / run_file_name(label, seed)).write_text(_dump(rep))
        all_timing[str(seed)] = timings
    (out / "config.json").write_text(_dump(cfg.raw))
    (out / "timing.json").write_text(_dump(all_timing))
    (out / "summary.csv").write_text(render_summary(load_reports(out)))
    return out


def load_reports(out):
    files = sorted(Path(out, "runs").glob("*.json"))
    if not files:
        raise FileNotFoundError(f"no run reports under {Path(out, 'runs')}")
    return [json.loads(f.read_text()) for f in files]


def _fmt(values, digits):
    values = [v for v in values if v is not None]
    if not values:
        return ""
    arr = np.asarray(values, dtype=float)
    return f"{arr.mean():.{digits}f}±{arr.std():.{digits}f}"


def render_summary(reports):
    """CSV of mean±std across seeds, one line per (scenario, method)."""
    reports = sorted(reports, key=lambda r: (r["scenario_index"], r["seed"]))
    groups = {}
    order = {}
    for rep in reports:
        key = (rep["scenario_index"], rep["scenario"])
        order.setdefault(key, rep["row_order"])
        for name, row in rep["rows"].items():
            groups.setdefault(key, {}).setdefault(name, []).append(row)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["scenario", "method"] + list(SUMMARY_FIELDS))
    for key in sorted(groups):
        for name in order[key]:
            rows = groups[key][name]
            cells = []
            for field in SUMMARY_FIELDS:
                digits = 6 if field == "delta_w" else 2
                cells.append(_fmt([r.get(field) for r in rows], digits))
            writer.writerow([key[1], name] + cells)
    return buf.getvalue()


def summary_table(out):
    """Parsed ``{(scenario, method): {field: [values per seed]}}`` from run reports."""
    table = {}
    for rep in load_reports(out):
        for name, row in rep["rows"].items():
            cell = table.setdefault((rep["scenario"], name), {f: [] for f in GAP_FIELDS + ("delta_w", "avg_gap")})
            for f in cell:
                cell[f].append(row.get(f))
    return table
