"""Cross-domain evaluation, latent-domain diagnostics and comparison trainers."""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .core import SampleMeta
from .latent import (GesFi, GesFiModel, TrainConfig, TrainReport, accuracy, derive_seed, infer, run_epoch,
                     _optimizer)
from .pipeline import ImageSet

ENTROPY_OFFSET = 1e-12
FACTOR_ALIASES = {"loc": "location", "ori": "orientation", "env": "environment"}


@dataclass
class EvalReport:
    accuracy: float
    per_class: dict[str, float]
    confusion: list[list[int]]
    label_set: list[str]
    n: int
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def evaluate(model: GesFiModel | Callable, target: ImageSet, label_set: Sequence[str] | None = None) -> EvalReport:
    """Accuracy, per-class accuracy and confusion matrix (rows = truth) on ``target``.

    ``model`` is a trained network or any callable mapping an image batch to
    predicted class indices.
    """
    if label_set is not None and list(label_set) != list(target.label_set):
        raise ValueError(f"label set mismatch: model {list(label_set)} vs target {list(target.label_set)}")
    n_classes = len(target.label_set)
    if isinstance(model, GesFiModel):
        if model.num_classes != n_classes:
            raise ValueError(f"label set mismatch: model has {model.num_classes} classes, target {n_classes}")
        pred, _ = infer(target.images, model)
    else:
        pred = np.asarray(model(target.images))
    truth = np.asarray(target.gestures)
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (truth, pred), 1)
    per_class = {}
    for i, name in enumerate(target.label_set):
        total = conf[i].sum()
        per_class[name] = float(conf[i, i] / total) if total else float("nan")
    acc = float(np.trace(conf) / max(len(truth), 1))
    return EvalReport(acc, per_class, conf.tolist(), list(target.label_set), int(len(truth)))


# ---------------------------------------------------------------- purity / entropy


def purity(counts: Sequence[float]) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    return float(counts.max() / total) if total > 0 else 0.0


def entropy(counts: Sequence[float]) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if not total > 0:
        raise ValueError("entropy of an empty count vector is undefined")
    p = counts / total
    return float(-np.sum(p * np.log(p + ENTROPY_OFFSET)))


def _factor_parts(name: str) -> list[str]:
    parts = [FACTOR_ALIASES.get(p.strip().lower(), p.strip().lower()) for p in name.split("+")]
    for p in parts:
        if p not in ("user", "location", "orientation", "environment", "gesture"):
            raise KeyError(f"unknown factor {name!r}")
    return parts


@dataclass
class FactorComposition:
    factor: str
    values: list[str]
    counts: list[list[int]]  # [domain][value]
    purity: list[float]
    entropy: list[float | None]  # None for empty domains
    weighted_purity: float
    weighted_entropy: float
    mean_purity: float
    mean_entropy: float
    ideal_purity: float
    ideal_entropy: float


@dataclass
class DomainComposition:
    K: int
    domain_sizes: list[int]
    factors: dict[str, FactorComposition]

    def to_json(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        head = f"{'factor':<22}{'purity':>9}{'entropy':>9}{'ideal P':>9}{'ideal H':>9}"
        rows = [head]
        for name, fc in self.factors.items():
            rows.append(f"{name:<22}{fc.weighted_purity:>9.3f}{fc.weighted_entropy:>9.3f}"
                        f"{fc.ideal_purity:>9.3f}{fc.ideal_entropy:>9.3f}")
        return "\n".join(rows)


def composition_report(labels: Sequence[int], metas: Sequence[SampleMeta], factors: Sequence[str],
                       K: int | None = None, schema: dict[str, list[str]] | None = None) -> DomainComposition:
    """Purity and entropy of physical factors inside each latent domain.

    A compound factor such as ``"location+orientation"`` (or ``"loc+ori"``)
    takes the Cartesian product of its parts' values. Dataset-level numbers
    are given both sample-weighted and as a plain mean over non-empty domains.
    """
    labels = np.asarray(getattr(labels, "pseudo_labels", labels), dtype=np.int64)
    if len(labels) != len(metas):
        raise ValueError("labels and metas are not aligned")
    K = int(labels.max()) + 1 if K is None else K
    schema = schema or {}
    sizes = np.bincount(labels, minlength=K)
    out = {}
    for name in factors:
        parts = _factor_parts(name)
        per_part = []
        for p in parts:
            vals = schema.get(p) or list(dict.fromkeys(m.factor(p) for m in metas))
            per_part.append([str(v) for v in vals])
        values = ["+".join(v) for v in itertools.product(*per_part)]
        index = {v: i for i, v in enumerate(values)}
        cnt = np.zeros((K, len(values)), dtype=np.int64)
        for lab, m in zip(labels, metas):
            cnt[lab, index["+".join(m.factor(p) for p in parts)]] += 1
        pur = [purity(c) for c in cnt]
        ent = [entropy(c) if c.sum() > 0 else None for c in cnt]
        nonempty = sizes > 0
        w = sizes / sizes.sum()
        M = len(values)
        out[name] = FactorComposition(
            factor=name, values=values, counts=cnt.tolist(), purity=pur, entropy=ent,
            weighted_purity=float(np.dot(w, pur)),
            weighted_entropy=float(sum(wk * e for wk, e in zip(w, ent) if e is not None)),
            mean_purity=float(np.mean([p for p, ne in zip(pur, nonempty) if ne])),
            mean_entropy=float(np.mean([e for e in ent if e is not None])),
            ideal_purity=1.0 / M, ideal_entropy=float(np.log(M)))
    return DomainComposition(K, sizes.tolist(), out)


# ---------------------------------------------------------------- inter-domain class confusion


@dataclass
class EtaResult:
    eta: float | None  # None when no pair falls inside delta
    pairs_within: int
    delta: float


def _pair_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(np.maximum(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1), 0.0))


def default_delta(feats_i, feats_j, quantile: float = 0.05, max_pairs: int = 1_000_000, seed: int = 0) -> float:
    """5th percentile of cross-domain pair distances (sampled when the pair count is large)."""
    feats_i, feats_j = np.asarray(feats_i, float), np.asarray(feats_j, float)
    if len(feats_i) * len(feats_j) <= max_pairs:
        d = _pair_dist(feats_i, feats_j).ravel()
    else:
        rng = np.random.default_rng(seed)
        a = rng.integers(0, len(feats_i), max_pairs // 10)
        b = rng.integers(0, len(feats_j), max_pairs // 10)
        d = np.linalg.norm(feats_i[a] - feats_j[b], axis=1)
    return float(np.quantile(d, quantile))


def estimate_eta(feats_i, labels_i, feats_j, labels_j, delta: float | None = None, n_pairs: int = 200_000,
                 seed: int = 0, exhaustive: bool = False) -> EtaResult:
    """P(labels differ | cross-domain pair within distance ``delta``).

    Monte-Carlo over uniformly drawn pairs by default; ``exhaustive``
    enumerates every pair instead.
    """
    feats_i, feats_j = np.asarray(feats_i, float), np.asarray(feats_j, float)
    labels_i, labels_j = np.asarray(labels_i), np.asarray(labels_j)
    if delta is None:
        delta = default_delta(feats_i, feats_j, seed=seed)
    if delta <= 0:
        raise ValueError("delta must be positive")
    if exhaustive:
        close = _pair_dist(feats_i, feats_j) <= delta
        differ = labels_i[:, None] != labels_j[None, :]
        n = int(close.sum())
        return EtaResult(float((close & differ).sum() / n) if n else None, n, float(delta))
    rng = np.random.default_rng(seed)
    a = rng.integers(0, len(feats_i), n_pairs)
    b = rng.integers(0, len(feats_j), n_pairs)
    close = np.linalg.norm(feats_i[a] - feats_j[b], axis=1) <= delta
    n = int(close.sum())
    if n == 0:
        return EtaResult(None, 0, float(delta))
    return EtaResult(float(np.mean(labels_i[a][close] != labels_j[b][close])), n, float(delta))


# ---------------------------------------------------------------- baselines


BASELINES = ("erm", "physical-adversarial", "kmeans-latent")


def _supervised_run(source: ImageSet, cfg: TrainConfig, target: ImageSet | None,
                    domain_labels: np.ndarray | None) -> TrainReport:
    """Extractor + gesture head, optionally with an unweighted adversary on ``domain_labels``.

    A non-trainable extractor still trains for the first ``pre_epochs`` epochs,
    matching the latent-domain trainer's schedule.
    """
    n_dom = int(domain_labels.max()) + 1 if domain_labels is not None else cfg.K
    torch.manual_seed(derive_seed(cfg.seed, "init"))
    model = GesFiModel(cfg.backbone, len(source.label_set), max(n_dom, 2), cfg.bottleneck_dim, cfg.adv_hidden)
    modules = [model.extractor, model.invariant]
    if domain_labels is not None:
        modules.append(model.domain_adv)
    opt = _optimizer(modules, cfg.learning_rate)
    gen = torch.Generator()
    gen.manual_seed(derive_seed(cfg.seed, "baseline"))
    images = torch.from_numpy(np.ascontiguousarray(source.images, dtype=np.float32))
    gestures = torch.from_numpy(np.asarray(source.gestures, dtype=np.int64))
    y_dom = None if domain_labels is None else torch.from_numpy(np.asarray(domain_labels, dtype=np.int64))
    report = TrainReport(config=cfg.to_dict())
    for e in range(cfg.epochs):
        lr = cfg.lr_at(e)
        for g in opt.param_groups:
            g["lr"] = lr
        l_ges, l_dadv = run_epoch(model.extractor, model.invariant, images, gestures, opt, gen, cfg.batch_size,
                                  adversary=model.domain_adv if y_dom is not None else None,
                                  adv_labels=y_dom, lambd=cfg.lambda2,
                                  train_extractor=cfg.extractor_trainable or e < cfg.pre_epochs)
        rec = {"epoch": e, "lr": lr, "stage": "baseline", "L_super": 0.0, "L_lad": 0.0, "L_adv": 0.0,
               "L_ges": l_ges, "L_dadv": l_dadv, "total": l_ges + l_dadv}
        if target is not None:
            rec["target_accuracy"] = accuracy(model, target)
        report.epochs.append(rec)
    report.model = model
    return report


def train_baseline(kind: str, source: ImageSet, cfg: TrainConfig, target: ImageSet | None = None,
                   domain_factor: str | None = None) -> TrainReport:
    """Comparison trainers.

    ``erm``: extractor + classifier. ``physical-adversarial``: the same plus a
    gradient-reversed discriminator on a physical factor's labels.
    ``kmeans-latent``: the full latent-domain method with the softmax-weighted
    centroid start replaced by k random samples.
    """
    if kind == "erm":
        return _supervised_run(source, cfg, target, None)
    if kind == "physical-adversarial":
        if domain_factor is None:
            raise ValueError("physical-adversarial needs a domain_factor")
        try:
            labels = source.factor_codes(domain_factor)
        except (KeyError, ValueError) as exc:
            raise ValueError(f"missing factor labels for {domain_factor!r}") from exc
        _, labels = np.unique(labels, return_inverse=True)
        return _supervised_run(source, cfg, target, labels)
    if kind == "kmeans-latent":
        return GesFi(source, replace(cfg, centroid_init="kmeans"), target).run()
    raise ValueError(f"unknown baseline {kind!r}; choose from {BASELINES}")


# ---------------------------------------------------------------- plots


def write_plots(out_dir, report: TrainReport | None = None, evaluation: EvalReport | None = None,
                composition: DomainComposition | None = None) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if report is not None and report.epochs:
        fig, ax = plt.subplots(figsize=(6, 4))
        for key in ("L_super", "L_lad", "L_adv", "L_ges", "L_dadv", "total"):
            ax.plot([e[key] for e in report.epochs], label=key)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / "losses.png", dpi=100)
        plt.close(fig)
        written.append(out_dir / "losses.png")
    if evaluation is not None:
        conf = np.asarray(evaluation.confusion)
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.imshow(conf, cmap="viridis")
        ax.set_xticks(range(len(evaluation.label_set)), evaluation.label_set, rotation=45)
        ax.set_yticks(range(len(evaluation.label_set)), evaluation.label_set)
        for (i, j), v in np.ndenumerate(conf):
            ax.text(j, i, str(v), ha="center", va="center", color="w")
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        fig.tight_layout()
        fig.savefig(out_dir / "confusion.png", dpi=100)
        plt.close(fig)
        written.append(out_dir / "confusion.png")
    if composition is not None:
        (out_dir / "composition.txt").write_text(composition.table() + "\n")
        written.append(out_dir / "composition.txt")
    return written


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, default=float))
