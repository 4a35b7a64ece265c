"""Latent-domain mining and domain-invariant gesture learning.

Training runs three steps that are optimized one after another:

1. pre-learning: extractor + gesture head on gesture labels;
2. latent-domain mining: soft centroids from the latent head's softmax,
   nearest-centroid pseudo-domain labels, hard-mean refinement, then one
   epoch on (domain CE on the pseudo labels) + (gesture CE behind a gradient
   reversal layer), which strips gesture information from the domain space;
3. invariant learning: gesture CE plus a count-balanced domain adversary on
   the pseudo labels, again through gradient reversal.

Steps 2 and 3 alternate once per epoch after pre-learning.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .models import Head, build_backbone, grad_reverse, load_checkpoint, save_checkpoint, weighted_ce
from .pipeline import ImageSet

METRICS = ("cosine", "euclidean")


def derive_seed(seed: int, label: str) -> int:
    """Seed for a named random stream derived from the run seed."""
    return int(hashlib.sha256(f"{seed}/{label}".encode()).hexdigest()[:15], 16)


@dataclass
class TrainConfig:
    K: int = 3
    lambda1: float = 1.0
    lambda2: float = 1.0
    learning_rate: float = 0.002
    lr_decay: float = 0.1
    lr_step: int = 10
    epochs: int = 50
    pre_epochs: int = 2
    batch_size: int = 32
    seed: int = 0
    distance_metric: str = "cosine"
    refinement_rounds: int = 2
    backbone: str = "desk"
    extractor_trainable: bool = True
    bottleneck_dim: int = 256
    adv_hidden: int = 256
    weight_cap: float = 10.0  # weights clipped at weight_cap * K
    carry_centroids: bool = False
    centroid_init: str = "soft"  # "soft" (softmax-weighted) or "kmeans" (k random points)
    balance_gesture_adv: bool = False
    early_stop: bool = True
    early_stop_tol: float = 1e-4
    early_stop_patience: int = 5

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if not self.epochs >= self.pre_epochs >= 1:
            raise ValueError("need epochs >= pre_epochs >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.distance_metric not in METRICS:
            raise ValueError(f"distance_metric must be one of {METRICS}")
        if self.refinement_rounds < 1:
            raise ValueError("refinement_rounds must be >= 1")
        if self.centroid_init not in ("soft", "kmeans"):
            raise ValueError("centroid_init must be 'soft' or 'kmeans'")
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay ** (epoch // self.lr_step)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class LatentDomainState:
    K: int
    centroids: np.ndarray  # [K, B]
    pseudo_labels: np.ndarray  # [N], 0-based domain index
    counts: np.ndarray  # [K]
    weights: np.ndarray  # [K]; 0 for empty domains

    def to_json(self) -> dict:
        return {"K": self.K, "centroids": self.centroids.tolist(), "pseudo_labels": self.pseudo_labels.tolist(),
                "counts": self.counts.tolist(), "weights": self.weights.tolist()}

    @classmethod
    def from_json(cls, doc) -> "LatentDomainState":
        return cls(doc["K"], np.asarray(doc["centroids"]), np.asarray(doc["pseudo_labels"], dtype=np.int64),
                   np.asarray(doc["counts"], dtype=np.int64), np.asarray(doc["weights"]))


# ---------------------------------------------------------------- clustering


def l2_normalize(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norm, 1e-12)


def distances(features: np.ndarray, centroids: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """[N, K] distance table; cosine distance is 1 - cos, euclidean is the squared distance."""
    if metric == "cosine":
        return 1.0 - l2_normalize(features) @ l2_normalize(centroids).T
    if metric == "euclidean":
        diff = features[:, None, :] - centroids[None, :, :]
        return np.einsum("nkb,nkb->nk", diff, diff)
    raise ValueError(f"unknown metric {metric!r}")


def _reseed_empty(features, centroids, empty, metric):
    """Move each empty domain's centroid onto the feature farthest from all non-empty centroids."""
    centroids = centroids.copy()
    alive = ~np.asarray(empty, dtype=bool)
    for k in np.flatnonzero(empty):
        if alive.any():
            nearest = distances(features, centroids[alive], metric).min(axis=1)
            pick = int(np.argmax(nearest))
        else:
            pick = 0
        centroids[k] = features[pick]
        alive[k] = True
    return centroids


def init_centroids(features: np.ndarray, domain_probs: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """Softmax-weighted mean feature per domain: sum_n p_k(n) f(n) / sum_n p_k(n)."""
    features = np.asarray(features, dtype=np.float64)
    probs = np.asarray(domain_probs, dtype=np.float64)
    mass = probs.sum(axis=0)
    empty = mass <= 0
    centroids = (probs.T @ features) / np.where(empty, 1.0, mass)[:, None]
    if empty.any():
        centroids = _reseed_empty(features, centroids, empty, metric)
    return centroids


def assign_pseudo_labels(features: np.ndarray, centroids: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """Nearest centroid per sample; ties go to the lowest domain index."""
    return np.argmin(distances(np.asarray(features, dtype=np.float64), centroids, metric), axis=1)


def hard_centroids(features: np.ndarray, labels: np.ndarray, K: int, metric: str = "cosine") -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    onehot = np.eye(K)[labels]
    counts = onehot.sum(axis=0)
    empty = counts == 0
    centroids = (onehot.T @ features) / np.where(empty, 1.0, counts)[:, None]
    if empty.any():
        centroids = _reseed_empty(features, centroids, empty, metric)
    return centroids


def refine_centroids(features: np.ndarray, labels: np.ndarray, rounds: int = 2, metric: str = "cosine",
                     K: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Alternate hard-mean centroids and nearest-centroid relabelling ``rounds`` times."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    labels = np.asarray(labels, dtype=np.int64)
    K = int(labels.max()) + 1 if K is None else K
    centroids = None
    for _ in range(rounds):
        centroids = hard_centroids(features, labels, K, metric)
        labels = assign_pseudo_labels(features, centroids, metric)
    return centroids, labels


def within_cluster_ss(features: np.ndarray, labels: np.ndarray, K: int) -> float:
    total = 0.0
    for k in range(K):
        pts = features[labels == k]
        if len(pts):
            total += float(((pts - pts.mean(axis=0)) ** 2).sum())
    return total


def domain_weights(counts: Sequence[int], cap: float | None = None) -> np.ndarray:
    """Per-domain balancing weight (sum of counts) / count; 0 for empty domains, clipped at ``cap``."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    w = np.divide(total, counts, out=np.zeros_like(counts), where=counts > 0)
    if cap is not None:
        w = np.minimum(w, cap)
    return w


def make_state(centroids, labels, K, cap_factor: float | None) -> LatentDomainState:
    counts = np.bincount(labels, minlength=K).astype(np.int64)
    cap = None if cap_factor is None else cap_factor * K
    return LatentDomainState(K, np.asarray(centroids), np.asarray(labels, dtype=np.int64), counts,
                             domain_weights(counts, cap))


# ---------------------------------------------------------------- networks


class GesFiModel(nn.Module):
    """Shared extractor plus one head per role."""

    def __init__(self, backbone: str, num_classes: int, K: int, bottleneck: int = 256, adv_hidden: int = 256):
        super().__init__()
        self.extractor = build_backbone(backbone)
        F = self.extractor.spec.out_features
        self.pre = Head("pre", F, num_classes, bottleneck)
        self.latent = Head("latent", F, K, bottleneck)
        self.anti_gesture = Head("anti-gesture", bottleneck, num_classes, None, hidden=adv_hidden)
        self.invariant = Head("invariant", F, num_classes, bottleneck)
        self.domain_adv = Head("domain-adversary", bottleneck, K, None, hidden=adv_hidden)
        self.num_classes = num_classes
        self.K = K

    def forward(self, x):
        return self.invariant(self.extractor(x))

    def descriptor(self) -> dict:
        return {"backbone": self.extractor.spec.name, "features": self.extractor.spec.out_features,
                "num_classes": self.num_classes, "K": self.K}


def _batches(n: int, batch_size: int, gen: torch.Generator) -> list[torch.Tensor]:
    perm = torch.randperm(n, generator=gen)
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) == 1:  # batch norm cannot train on a single sample
        out[-2] = torch.cat([out[-2], out.pop()])
    return out


def run_epoch(extractor: nn.Module, head: Head, images: torch.Tensor, labels: torch.Tensor,
              optimizer: torch.optim.Optimizer, gen: torch.Generator, batch_size: int,
              adversary: Head | None = None, adv_labels: torch.Tensor | None = None,
              adv_weights: torch.Tensor | None = None, lambd: float = 1.0,
              label_weights: torch.Tensor | None = None, train_extractor: bool = True) -> tuple[float, float]:
    """One pass of ``CE(head(z), labels) + weighted CE(adversary(GRL(z)), adv_labels)``.

    ``z`` is the head's bottleneck output. Returns the sample-averaged
    (classification loss, adversarial loss).
    """
    extractor.train(train_extractor)
    head.train()
    if adversary is not None:
        adversary.train()
    n = len(images)
    sum_cls = sum_adv = 0.0
    for idx in _batches(n, batch_size, gen):
        x = images[idx]
        with torch.set_grad_enabled(train_extractor):
            feats = extractor(x)
        z = head.embed(feats)
        loss_cls = weighted_ce(head.classifier(z), labels[idx],
                               None if label_weights is None else label_weights[labels[idx]])
        loss = loss_cls
        loss_adv = torch.zeros(())
        if adversary is not None:
            w = None if adv_weights is None else adv_weights[adv_labels[idx]]
            loss_adv = weighted_ce(adversary(grad_reverse(z, lambd)), adv_labels[idx], w)
            loss = loss + loss_adv
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        sum_cls += float(loss_cls.detach()) * len(idx)
        sum_adv += float(loss_adv.detach()) * len(idx)
    return sum_cls / n, sum_adv / n


@torch.no_grad()
def embed_all(extractor: nn.Module, head: Head, images: torch.Tensor, batch_size: int = 256):
    """Eval-mode bottleneck features and softmax outputs for every image."""
    extractor.eval()
    head.eval()
    feats, probs = [], []
    for i in range(0, len(images), batch_size):
        z = head.embed(extractor(images[i:i + batch_size]))
        feats.append(z)
        probs.append(torch.softmax(head.classifier(z), dim=-1))
    return torch.cat(feats).double().numpy(), torch.cat(probs).double().numpy()


@torch.no_grad()
def predict(extractor: nn.Module, head: Head, images, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    extractor.eval()
    head.eval()
    images = torch.as_tensor(images)
    probs = []
    for i in range(0, len(images), batch_size):
        probs.append(torch.softmax(head(extractor(images[i:i + batch_size])), dim=-1))
    p = torch.cat(probs) if probs else torch.zeros((0, head.num_classes))
    return p.argmax(dim=1).numpy(), p.double().numpy()


def infer(images, model: GesFiModel) -> tuple[np.ndarray, np.ndarray]:
    """Gesture predictions and distributions from the invariant head.

    Accepts one image ``[3, H, W]`` or a batch ``[N, 3, H, W]``.
    """
    x = torch.as_tensor(np.asarray(images, dtype=np.float32))
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[1] != 3:
        raise ValueError(f"expected [N, 3, H, W] images, got {tuple(x.shape)}")
    labels, probs = predict(model.extractor, model.invariant, x)
    return (labels[0], probs[0]) if single else (labels, probs)


def accuracy(model: GesFiModel, data: ImageSet) -> float:
    labels, _ = predict(model.extractor, model.invariant, torch.from_numpy(data.images))
    return float(np.mean(labels == data.gestures))


# ---------------------------------------------------------------- training


LOSS_KEYS = ("L_super", "L_lad", "L_adv", "L_ges", "L_dadv")


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    stopped_early: bool = False
    checkpoint: str | None = None
    model: GesFiModel | None = field(default=None, repr=False)
    state: LatentDomainState | None = field(default=None, repr=False)

    @property
    def target_accuracy(self) -> float | None:
        if self.epochs and "target_accuracy" in self.epochs[-1]:
            return self.epochs[-1]["target_accuracy"]
        return None

    def losses(self, key: str) -> list[float]:
        return [e[key] for e in self.epochs]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.epochs)

    def write_jsonl(self, path) -> None:
        Path(path).write_text(self.to_jsonl())


def _optimizer(modules: Sequence[nn.Module], lr: float) -> torch.optim.Adam:
    params = [p for m in modules for p in m.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=lr)


class GesFi:
    """Holds the networks, optimizers and random streams of one training run."""

    def __init__(self, source: ImageSet, cfg: TrainConfig, target: ImageSet | None = None):
        if len(source) == 0:
            raise ValueError("empty source dataset")
        if target is not None and list(target.label_set) != list(source.label_set):
            raise ValueError("target label set differs from source")
        self.cfg = cfg
        self.source = source
        self.target = target
        self.images = torch.from_numpy(np.ascontiguousarray(source.images, dtype=np.float32))
        self.gestures = torch.from_numpy(np.asarray(source.gestures, dtype=np.int64))
        torch.manual_seed(derive_seed(cfg.seed, "init"))
        self.model = GesFiModel(cfg.backbone, len(source.label_set), cfg.K, cfg.bottleneck_dim, cfg.adv_hidden)
        m = self.model
        # h_f always trains during pre-learning; extractor_trainable decides whether it keeps training after
        ext = [m.extractor] if cfg.extractor_trainable else []
        self.optimizers = {
            "pre": _optimizer([m.extractor, m.pre], cfg.learning_rate),
            "mine": _optimizer(ext + [m.latent, m.anti_gesture], cfg.learning_rate),
            "invariant": _optimizer(ext + [m.invariant, m.domain_adv], cfg.learning_rate),
        }
        self.gens = {}
        for name in ("pre", "mine", "invariant", "kmeans"):
            g = torch.Generator()
            g.manual_seed(derive_seed(cfg.seed, name))
            self.gens[name] = g
        self.state: LatentDomainState | None = None
        self.report = TrainReport(config=cfg.to_dict())
        self.epoch = 0
        gcounts = np.bincount(source.gestures, minlength=len(source.label_set)).astype(np.float64)
        self.gesture_weights = torch.from_numpy(domain_weights(gcounts)).float()

    def set_lr(self, epoch: int):
        lr = self.cfg.lr_at(epoch)
        for opt in self.optimizers.values():
            for group in opt.param_groups:
                group["lr"] = lr
        return lr

    def pre_learn_epoch(self) -> float:
        m = self.model
        loss, _ = run_epoch(m.extractor, m.pre, self.images, self.gestures, self.optimizers["pre"],
                            self.gens["pre"], self.cfg.batch_size)
        return loss

    def cluster(self) -> LatentDomainState:
        """Pseudo-domain labels from the current latent features (no parameter update)."""
        cfg, m = self.cfg, self.model
        feats, probs = embed_all(m.extractor, m.latent, self.images)
        if cfg.distance_metric == "cosine":
            feats = l2_normalize(feats)
        if cfg.carry_centroids and self.state is not None:
            centroids = self.state.centroids
        elif cfg.centroid_init == "kmeans":
            pick = torch.randperm(len(feats), generator=self.gens["kmeans"])[:cfg.K].numpy()
            centroids = feats[pick]
        else:
            centroids = init_centroids(feats, probs, cfg.distance_metric)
        labels = assign_pseudo_labels(feats, centroids, cfg.distance_metric)
        centroids, labels = refine_centroids(feats, labels, cfg.refinement_rounds, cfg.distance_metric, cfg.K)
        return make_state(centroids, labels, cfg.K, cfg.weight_cap)

    def mine(self) -> tuple[LatentDomainState, float, float]:
        """One mining pass: cluster, then one epoch on the latent-domain + anti-gesture losses."""
        cfg, m = self.cfg, self.model
        self.state = self.cluster()
        y_d = torch.from_numpy(self.state.pseudo_labels)
        l_lad, l_adv = run_epoch(
            m.extractor, m.latent, self.images, y_d, self.optimizers["mine"], self.gens["mine"], cfg.batch_size,
            adversary=m.anti_gesture, adv_labels=self.gestures, lambd=cfg.lambda1,
            adv_weights=self.gesture_weights if cfg.balance_gesture_adv else None,
            train_extractor=cfg.extractor_trainable)
        return self.state, l_lad, l_adv

    def invariant_epoch(self) -> tuple[float, float]:
        cfg, m, state = self.cfg, self.model, self.state
        if state is None:
            raise RuntimeError("invariant learning needs pseudo-domain labels; run mine() first")
        assert np.all(state.counts[state.pseudo_labels] > 0)
        y_d = torch.from_numpy(state.pseudo_labels)
        w = torch.from_numpy(state.weights).float()
        return run_epoch(m.extractor, m.invariant, self.images, self.gestures, self.optimizers["invariant"],
                         self.gens["invariant"], cfg.batch_size, adversary=m.domain_adv, adv_labels=y_d,
                         adv_weights=w, lambd=cfg.lambda2, train_extractor=cfg.extractor_trainable)

    def step(self) -> dict:
        """Run the next epoch and append its record to the report."""
        cfg, e = self.cfg, self.epoch
        lr = self.set_lr(e)
        rec = {"epoch": e, "lr": lr, **{k: 0.0 for k in LOSS_KEYS}}
        if e < cfg.pre_epochs:
            rec["stage"] = "pre"
            rec["L_super"] = self.pre_learn_epoch()
            if e == cfg.pre_epochs - 1:
                # the gesture head of the inference path starts from the pre-learned one
                self.model.invariant.load_state_dict(self.model.pre.state_dict())
        else:
            rec["stage"] = "latent"
            state, rec["L_lad"], rec["L_adv"] = self.mine()
            rec["L_ges"], rec["L_dadv"] = self.invariant_epoch()
            rec["counts"] = state.counts.tolist()
        rec["total"] = sum(rec[k] for k in LOSS_KEYS)
        if self.target is not None:
            rec["target_accuracy"] = accuracy(self.model, self.target)
        self.report.epochs.append(rec)
        self.epoch += 1
        return rec

    def converged(self) -> bool:
        cfg = self.cfg
        eps = [r for r in self.report.epochs if r["stage"] == "latent"]
        if not cfg.early_stop or len(eps) <= cfg.early_stop_patience:
            return False
        tail = [r["total"] for r in eps[-(cfg.early_stop_patience + 1):]]
        return all(abs(b - a) < cfg.early_stop_tol for a, b in zip(tail, tail[1:]))

    def run(self, checkpoint: str | Path | None = None, every_epoch: bool = False) -> TrainReport:
        while self.epoch < self.cfg.epochs:
            self.step()
            if checkpoint is not None and every_epoch:
                self.save(checkpoint)
            if self.converged():
                self.report.stopped_early = True
                break
        self.report.model = self.model
        self.report.state = self.state
        if checkpoint is not None:
            self.save(checkpoint)
            self.report.checkpoint = str(checkpoint)
        return self.report

    # -- persistence

    def save(self, path, **extra) -> None:
        save_checkpoint(
            path, {"model": self.model},
            descriptor=self.model.descriptor(), config=self.cfg.to_dict(), config_hash=self.cfg.hash(),
            label_set=list(self.source.label_set), epoch=self.epoch,
            optimizers={k: o.state_dict() for k, o in self.optimizers.items()},
            generators={k: g.get_state() for k, g in self.gens.items()},
            domain_state=None if self.state is None else self.state.to_json(),
            report=self.report.epochs, **extra)

    @classmethod
    def resume(cls, path, source: ImageSet, target: ImageSet | None = None) -> "GesFi":
        payload = torch.load(path, map_location="cpu", weights_only=False)
        cfg = TrainConfig(**payload["config"])
        run = cls(source, cfg, target)
        load_checkpoint(path, {"model": run.model})
        for k, o in run.optimizers.items():
            o.load_state_dict(payload["optimizers"][k])
        for k, g in run.gens.items():
            g.set_state(payload["generators"][k])
        run.state = None if payload["domain_state"] is None else LatentDomainState.from_json(payload["domain_state"])
        run.report.epochs = list(payload["report"])
        run.epoch = payload["epoch"]
        return run


def load_model(path) -> tuple[GesFiModel, dict]:
    """Rebuild the network stored in a checkpoint; returns ``(model, payload)``."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    d = payload["descriptor"]
    cfg = payload.get("config", {})
    model = GesFiModel(d["backbone"], d["num_classes"], d["K"], cfg.get("bottleneck_dim", 256),
                       cfg.get("adv_hidden", 256))
    load_checkpoint(path, {"model": model})
    model.eval()
    return model, payload


def save_model(path, model: GesFiModel, cfg: TrainConfig, label_set: Sequence[str], **extra) -> None:
    """Checkpoint a trained network so that :func:`load_model` can rebuild it."""
    save_checkpoint(path, {"model": model}, descriptor=model.descriptor(), config=cfg.to_dict(),
                    config_hash=cfg.hash(), label_set=list(label_set), **extra)


def latent_domains(model: GesFiModel, images, cfg: TrainConfig) -> LatentDomainState:
    """Pseudo-domains of ``images`` under a trained model: softmax-weighted start, then refinement."""
    feats, probs = embed_all(model.extractor, model.latent, torch.as_tensor(images))
    if cfg.distance_metric == "cosine":
        feats = l2_normalize(feats)
    labels = assign_pseudo_labels(feats, init_centroids(feats, probs, cfg.distance_metric), cfg.distance_metric)
    centroids, labels = refine_centroids(feats, labels, cfg.refinement_rounds, cfg.distance_metric, cfg.K)
    return make_state(centroids, labels, cfg.K, cfg.weight_cap)


# ---------------------------------------------------------------- functional surface


def pre_learn(images: ImageSet, cfg: TrainConfig) -> tuple[nn.Module, Head]:
    """Train extractor + pre-learning head for ``cfg.pre_epochs`` epochs."""
    run = GesFi(images, replace(cfg, epochs=cfg.pre_epochs))
    for _ in range(cfg.pre_epochs):
        run.step()
    return run.model.extractor, run.model.pre


def mine_latent_domains(run: GesFi) -> LatentDomainState:
    state, _, _ = run.mine()
    return state


def learn_invariant(run: GesFi) -> dict:
    l_ges, l_dadv = run.invariant_epoch()
    return {"L_ges": l_ges, "L_dadv": l_dadv}


def train_gesfi(source: ImageSet, cfg: TrainConfig, target: ImageSet | None = None,
                checkpoint: str | Path | None = None) -> TrainReport:
    return GesFi(source, cfg, target).run(checkpoint)
