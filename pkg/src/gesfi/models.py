"""Network pieces shared by every training step."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

PROB_FLOOR = 1e-12
ROLES = ("pre", "latent", "anti-gesture", "invariant", "domain-adversary")


def grl_forward(x):
    return x


def grl_backward(upstream_grad, lambd: float):
    return -lambd * upstream_grad


class _GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lambd):
        ctx.lambd = lambd
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grl_backward(grad_output, ctx.lambd), None


def grad_reverse(x: torch.Tensor, lambd: float = 1.0) -> torch.Tensor:
    return _GradientReversal.apply(x, float(lambd))


class GradientReversal(nn.Module):
    def __init__(self, lambd: float = 1.0):
        super().__init__()
        self.lambd = float(lambd)

    def forward(self, x):
        return grad_reverse(x, self.lambd)

    def extra_repr(self):
        return f"lambd={self.lambd}"


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    out_features: int


class DeskBackbone(nn.Module):
    """Three conv blocks and a projection to ``out_features``; small enough for CPU tests."""

    def __init__(self, out_features: int = 128, width: int = 16):
        super().__init__()
        w = width

        def block(cin, cout):
            return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1, bias=False),
                                 nn.BatchNorm2d(cout), nn.ReLU(inplace=True), nn.MaxPool2d(2))

        self.features = nn.Sequential(block(3, w), block(w, 2 * w), block(2 * w, 4 * w),
                                      nn.AdaptiveAvgPool2d(2), nn.Flatten())
        self.proj = nn.Sequential(nn.Linear(16 * w, out_features), nn.ReLU(inplace=True))
        self.spec = BackboneSpec("desk", out_features)

    def forward(self, x):
        return self.proj(self.features(x))


class IdentityBackbone(nn.Module):
    """Parameter-free extractor: average-pool the image to ``grid x grid`` and flatten."""

    def __init__(self, grid: int = 8, channels: int = 3):
        super().__init__()
        self.grid = grid
        self.spec = BackboneSpec("identity", channels * grid * grid)

    def forward(self, x):
        return F.adaptive_avg_pool2d(x, self.grid).flatten(1)


class ResNetBackbone(nn.Module):
    """18-layer residual network with the classification layer removed (512 features).

    ``pretrained`` pulls ImageNet weights through torchvision, which needs
    network access or a populated torch hub cache.
    """

    def __init__(self, pretrained: bool = True):
        super().__init__()
        from torchvision.models import ResNet18_Weights, resnet18
        net = resnet18(weights=ResNet18_Weights.IMAGENET1K_V1 if pretrained else None)
        net.fc = nn.Identity()
        self.net = net
        self.spec = BackboneSpec("paper", 512)

    def forward(self, x):
        return self.net(x)


def build_backbone(profile: str) -> nn.Module:
    if profile == "desk":
        return DeskBackbone()
    if profile == "identity":
        return IdentityBackbone()
    if profile == "paper":
        return ResNetBackbone(pretrained=True)
    if profile == "paper-scratch":
        return ResNetBackbone(pretrained=False)
    raise ValueError(f"unknown backbone profile {profile!r}")


class Bottleneck(nn.Module):
    def __init__(self, in_features: int, dim: int = 256, norm: bool = True):
        super().__init__()
        layers = [nn.Linear(in_features, dim)]
        if norm:
            layers.append(nn.BatchNorm1d(dim))
        layers.append(nn.ReLU(inplace=True))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Head(nn.Module):
    """Optional bottleneck followed by a classifier producing logits.

    ``hidden`` > 0 inserts one ReLU layer of that width in the classifier.
    """

    def __init__(self, role: str, in_features: int, num_classes: int, bottleneck: int | None = 256,
                 hidden: int = 0, norm: bool = True):
        super().__init__()
        if role not in ROLES:
            raise ValueError(f"unknown head role {role!r}")
        self.role = role
        self.in_features = in_features
        self.num_classes = num_classes
        self.bottleneck = Bottleneck(in_features, bottleneck, norm) if bottleneck else nn.Identity()
        width = bottleneck or in_features
        if hidden:
            self.classifier = nn.Sequential(nn.Linear(width, hidden), nn.ReLU(inplace=True),
                                            nn.Linear(hidden, num_classes))
        else:
            self.classifier = nn.Linear(width, num_classes)

    def embed(self, x):
        return self.bottleneck(x)

    def forward(self, x):
        return self.classifier(self.bottleneck(x))


def forward_head(features: torch.Tensor, head: Head) -> torch.Tensor:
    """Softmax probabilities of ``head`` on backbone features (1-D or batched)."""
    if features.shape[-1] != head.in_features:
        raise ValueError(f"feature dimension {features.shape[-1]} != head input {head.in_features}")
    single = features.dim() == 1
    logits = head(features.unsqueeze(0) if single else features)
    probs = torch.softmax(logits, dim=-1)
    return probs[0] if single else probs


def cross_entropy(probs: torch.Tensor, label, weight=None, eps: float = PROB_FLOOR) -> torch.Tensor:
    """-log p[label] with a probability floor; batched inputs give the (weighted) mean."""
    probs = torch.as_tensor(probs)
    n_classes = probs.shape[-1]
    label = torch.as_tensor(label, dtype=torch.long, device=probs.device)
    if torch.any(label < 0) or torch.any(label >= n_classes):
        raise ValueError(f"label out of range for {n_classes} classes")
    if probs.dim() == 1:
        return -torch.log(torch.clamp(probs[label], min=eps))
    nll = -torch.log(torch.clamp(probs.gather(1, label.view(-1, 1)).squeeze(1), min=eps))
    if weight is not None:
        nll = nll * torch.as_tensor(weight, dtype=nll.dtype)
    return nll.mean()


def weighted_ce(logits: torch.Tensor, labels: torch.Tensor, weight: torch.Tensor | None = None) -> torch.Tensor:
    """Training-path cross-entropy on logits (log-softmax form), optional per-sample weights."""
    nll = F.cross_entropy(logits, labels, reduction="none")
    if weight is not None:
        nll = nll * weight
    return nll.mean()


def save_checkpoint(path, modules: dict[str, nn.Module], **extra) -> None:
    payload = {"state": {k: m.state_dict() for k, m in modules.items()},
               "shapes": {k: {n: tuple(t.shape) for n, t in m.state_dict().items()} for k, m in modules.items()}}
    payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(path, modules: dict[str, nn.Module] | None = None) -> dict:
    """Load a checkpoint, restoring ``modules`` in place after checking every tensor shape."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    for name, module in (modules or {}).items():
        if name not in payload["state"]:
            raise ValueError(f"checkpoint has no module {name!r}")
        saved = payload["state"][name]
        current = module.state_dict()
        for key, tensor in current.items():
            if key not in saved or tuple(saved[key].shape) != tuple(tensor.shape):
                got = tuple(saved[key].shape) if key in saved else None
                raise ValueError(f"shape mismatch for {name}.{key}: checkpoint {got}, model {tuple(tensor.shape)}")
        module.load_state_dict(saved)
    return payload
