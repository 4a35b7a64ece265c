"""Synthetic multi-domain CSI with planted ground truth.

Channel per antenna ``a``, subcarrier ``c`` and packet ``t``::

    H[a,c,t] = exp(-1j*theta[t]) * (Hs[a,c] + sum_k h_k[a,c] * exp(-2j*pi*(d_k[t] + dd[a]) / lam)) + noise

``theta`` is a per-packet offset shared by all antennas and subcarriers of
the receiver, ``dd[a]`` the extra path length to antenna ``a``, ``d_k`` the
length of dynamic path ``k``. A gesture is a 2-D hand velocity trajectory
``v(tau)``; path ``k`` changes length at rate ``v . u_k``. Domain factors
act on the trajectory (rotation, speed as a time warp, reflection amplitude,
path-length offset, arrival angle) and on the room: its static and dynamic
path gains and any constant-Doppler movers such as fans.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .core import CsiRecord, Dataset, SampleMeta, write_manifest

Shape = Callable[[np.ndarray], np.ndarray]  # tau in [0, 1] -> [len(tau), 2] unit-peak velocity


def _push_pull(tau):
    s = np.sin(2 * np.pi * tau)
    return np.stack([s, np.zeros_like(s)], axis=-1)


def _sweep(tau):
    s = np.sin(2 * np.pi * tau)
    return np.stack([np.zeros_like(s), s], axis=-1)


def _slide(tau):
    s = np.sin(np.pi * tau)
    return np.stack([s, np.zeros_like(s)], axis=-1)


def _circle(tau):
    w = 2 * np.pi * tau
    return np.stack([np.cos(w), np.sin(w)], axis=-1) * np.sin(np.pi * tau)[:, None]


def _linear(tau):
    return np.stack([np.ones_like(tau), np.zeros_like(tau)], axis=-1)


SHAPES: dict[str, Shape] = {
    "push-pull": _push_pull,
    "sweep": _sweep,
    "slide": _slide,
    "circle": _circle,
    "linear": _linear,
}


@dataclass(frozen=True)
class GestureProfile:
    name: str
    shape: str  # key into SHAPES
    peak_speed: float = 1.0  # m/s of path-length change at the trajectory peak
    duration_s: float = 0.8


@dataclass(frozen=True)
class DomainFactor:
    domain_id: int
    rotation_rad: float = 0.0
    speed: float = 1.0  # >1 = faster and shorter
    amplitude: float = 1.0  # scales every dynamic path
    offset_m: float = 0.0  # added to every dynamic path length
    aoa_rad: float = 0.0  # sets the per-antenna path difference
    interferer_hz: tuple[float, ...] = ()  # constant-Doppler movers in the room (fans, machinery)
    interferer_gain: float = 0.0
    room: int | None = None  # seeds this domain's own static and dynamic path gains
    factors: dict = field(default_factory=dict)  # physical labels written to SampleMeta


@dataclass
class ScenarioSpec:
    gestures: list[GestureProfile]
    domain_factors: list[DomainFactor]
    reps: int = 10
    sample_rate_hz: float = 1000.0
    wavelength_m: float = 0.0517  # 5.8 GHz
    A: int = 3
    C: int = 30
    T: int = 1000
    noise_sigma: float = 0.0
    phase_noise: bool = True
    static_level: float = 1.0  # mean |Hs|
    rician_k: float = 4.0  # line-of-sight to scattered power ratio of the static channel; inf = no scatter
    path_directions_rad: tuple[float, ...] = (0.0, np.pi / 3)
    path_gains: tuple[float, ...] = (0.3, 0.15)
    antenna_dynamic_gain: tuple[float, ...] = (1.0, 0.6, 0.0)  # the last antenna is out of the motion's reach
    speed_jitter: float = 0.1
    amplitude_jitter: float = 0.1
    rotation_jitter_rad: float = 0.0
    seed: int = 0

    def validate(self):
        if not self.wavelength_m > 0:
            raise ValueError("wavelength must be positive")
        if not self.sample_rate_hz > 0:
            raise ValueError("sample rate must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not self.rician_k >= 0:
            raise ValueError("rician_k must be >= 0")
        if not self.domain_factors:
            raise ValueError("need at least one domain factor")
        if not self.gestures:
            raise ValueError("need at least one gesture")
        if len(self.path_directions_rad) != len(self.path_gains):
            raise ValueError("path_directions_rad and path_gains differ in length")
        if len(self.antenna_dynamic_gain) < self.A:
            raise ValueError("antenna_dynamic_gain needs one entry per antenna")
        for g in self.gestures:
            if g.shape not in SHAPES:
                raise ValueError(f"unknown gesture shape {g.shape!r}")


@dataclass
class PlantedTruth:
    domain_ids: list[int]
    doppler_hz: list[np.ndarray]  # per record, [paths, T]: -d'(t)/lambda

    def subset(self, idx) -> "PlantedTruth":
        return PlantedTruth([self.domain_ids[i] for i in idx], [self.doppler_hz[i] for i in idx])

    def to_json(self) -> dict:
        return {"domain_ids": list(map(int, self.domain_ids)),
                "doppler_hz": [d.tolist() for d in self.doppler_hz]}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "PlantedTruth":
        doc = json.loads(Path(path).read_text())
        return cls(doc["domain_ids"], [np.asarray(d) for d in doc["doppler_hz"]])


def record_seed(seed: int, *key: int) -> np.random.Generator:
    """Independent stream per record, so output does not depend on generation order."""
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def _static_gains(spec: ScenarioSpec, room: int | None = None) -> tuple[np.ndarray, list[np.ndarray]]:
    rng = record_seed(spec.seed, 0xA11) if room is None else record_seed(room, 0xA11)
    A, C = spec.A, spec.C
    c = np.arange(C)
    # Rician static channel: a line-of-sight term plus a few scattered paths with distinct delays
    los = np.exp(1j * rng.uniform(0, 2 * np.pi, (A, 1))) * np.exp(-1j * rng.uniform(0, 0.1) * c)[None, :]
    scatter = np.zeros((A, C), complex)
    for _ in range(4):
        g = (rng.normal() + 1j * rng.normal()) / np.sqrt(8)
        delay = rng.uniform(0, 2 * np.pi / C * 3)
        scatter += g * np.exp(-1j * delay * c)[None, :] * np.exp(1j * rng.uniform(0, 2 * np.pi, (A, 1)))
    k = spec.rician_k
    if np.isinf(k):  # line of sight only
        hs = los.copy()
    else:
        hs = np.sqrt(k / (k + 1)) * los + np.sqrt(1 / (k + 1)) * scatter
    hs *= spec.static_level / np.abs(hs).mean()
    dyn = []
    for gain in spec.path_gains:
        h = np.exp(1j * rng.uniform(0, 2 * np.pi, (A, C))) * (1 + 0.1 * rng.normal(size=(A, C)))
        dyn.append(gain * h * np.asarray(spec.antenna_dynamic_gain[:A])[:, None])
    return hs, dyn


def trajectory(gesture: GestureProfile, dom: DomainFactor, spec: ScenarioSpec,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Path lengths ``d[k, t]`` (m) and their rates ``v[k, t]`` (m/s) for one repetition."""
    fs, T = spec.sample_rate_hz, spec.T
    speed = dom.speed * (1 + spec.speed_jitter * rng.uniform(-1, 1))
    duration = gesture.duration_s / speed
    n = min(int(round(duration * fs)), T)
    onset = int(rng.integers(0, T - n + 1))
    tau = np.arange(n) / max(n - 1, 1)
    vel2d = np.zeros((T, 2))
    vel2d[onset:onset + n] = SHAPES[gesture.shape](tau) * gesture.peak_speed * speed
    rot = dom.rotation_rad + spec.rotation_jitter_rad * rng.uniform(-1, 1)
    c, s = np.cos(rot), np.sin(rot)
    vel2d = vel2d @ np.array([[c, s], [-s, c]])
    dirs = np.array([[np.cos(a), np.sin(a)] for a in spec.path_directions_rad]).reshape(-1, 2)
    rate = dirs @ vel2d.T  # [paths, T]
    d0 = rng.uniform(0, spec.wavelength_m, size=(len(dirs), 1)) + dom.offset_m
    # left Riemann sum: d[t] = d0 + sum_{s<t} v[s]/fs, so the phase step t->t+1 is exactly v[t]/fs
    d = d0 + np.concatenate([np.zeros((len(dirs), 1)), np.cumsum(rate[:, :-1], axis=1) / fs], axis=1)
    return d, rate


def synthesize(spec: ScenarioSpec, gesture: GestureProfile, dom: DomainFactor, rep: int,
               rng: np.random.Generator, static=None) -> tuple[np.ndarray, np.ndarray]:
    """One record's complex CSI ``[A, C, T]`` and its analytic Doppler ``[paths, T]``."""
    hs, dyn = static if static is not None else _static_gains(spec, dom.room)
    lam = spec.wavelength_m
    d, rate = trajectory(gesture, dom, spec, rng)
    if not (np.all(np.isfinite(d)) and np.all(np.isfinite(rate))):
        raise ValueError("non-finite trajectory")
    dd = np.arange(spec.A) * (lam / 2) * np.sin(dom.aoa_rad)
    amp = dom.amplitude * (1 + spec.amplitude_jitter * rng.uniform(-1, 1))
    H = np.broadcast_to(hs[:, :, None], (spec.A, spec.C, spec.T)).astype(complex)
    for k, hk in enumerate(dyn):
        ph = np.exp(-2j * np.pi * (d[k][None, :] + dd[:, None]) / lam)  # [A, T]
        H = H + amp * hk[:, :, None] * ph[:, None, :]
    for f_int in dom.interferer_hz:
        # path length changes at -f*lam m/s for the whole record
        hi = dom.interferer_gain * np.exp(1j * rng.uniform(0, 2 * np.pi, (spec.A, spec.C)))
        t = np.arange(spec.T) / spec.sample_rate_hz
        ph = np.exp(2j * np.pi * (f_int * t[None, :] - dd[:, None] / lam))
        H = H + hi[:, :, None] * ph[:, None, :]
    if spec.phase_noise:
        theta = rng.uniform(0, 2 * np.pi, spec.T)
        H = H * np.exp(-1j * theta)[None, None, :]
    if spec.noise_sigma > 0:
        H = H + spec.noise_sigma / np.sqrt(2) * (rng.normal(size=H.shape) + 1j * rng.normal(size=H.shape))
    return H, -rate / lam


def generate(spec: ScenarioSpec) -> tuple[Dataset, PlantedTruth]:
    """All (gesture, domain, repetition) records, ordered gesture-major."""
    spec.validate()
    rooms = {dom.room: _static_gains(spec, dom.room) for dom in spec.domain_factors}
    records, domains, dopplers = [], [], []
    schema: dict[str, dict[str, None]] = {}
    for gi, gesture in enumerate(spec.gestures):
        for di, dom in enumerate(spec.domain_factors):
            for rep in range(spec.reps):
                rng = record_seed(spec.seed, gi, di, rep)
                H, dop = synthesize(spec, gesture, dom, rep, rng, rooms[dom.room])
                factors = {"environment": "0", "user": "0", "location": "0", "orientation": "0"}
                factors.update({k: str(v) for k, v in dom.factors.items()})
                factors.setdefault("environment", "0")
                for k, v in factors.items():
                    schema.setdefault(k, {})[v] = None
                meta = SampleMeta(gesture=gesture.name, repetition=rep + 1, **factors)
                rid = f"g{gi}-d{dom.domain_id}-r{rep:03d}"
                records.append(CsiRecord(H, spec.sample_rate_hz, spec.wavelength_m, meta, record_id=rid))
                domains.append(dom.domain_id)
                dopplers.append(dop)
    ds = Dataset(records, [g.name for g in spec.gestures], {k: list(v) for k, v in schema.items()})
    return ds, PlantedTruth(domains, dopplers)


# ---------------------------------------------------------------- benchmarks

PROFILES = ("mixture3", "semantic-conflict", "manifold-gap")


def _room(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([seed, 0xB00, i]).generate_state(1)[0])


def _mixture3(seed: int) -> tuple[ScenarioSpec, list[int]]:
    # three rooms, each with its own multipath and a fan at its own Doppler; the target is a fourth room
    fans = (-70.0, 75.0, -85.0, 90.0)
    doms = [DomainFactor(i, interferer_hz=(f,), interferer_gain=0.3, room=_room(seed, i),
                         factors={"location": str(i), "environment": str(i)}) for i, f in enumerate(fans)]
    gestures = [GestureProfile("push-pull", "push-pull"), GestureProfile("slide", "slide")]
    return ScenarioSpec(gestures, doms, reps=50, noise_sigma=0.05, seed=seed), [3]


def _semantic_conflict(seed: int) -> tuple[ScenarioSpec, list[int]]:
    # a push-pull performed facing 90 degrees away traces exactly a sweep at 0 degrees
    room = _room(seed, 0)
    rot = {0: 0.0, 1: np.pi / 2, 2: np.pi / 4}
    doms = [DomainFactor(i, rotation_rad=r, room=room, factors={"orientation": str(i)}) for i, r in rot.items()]
    gestures = [GestureProfile("push-pull", "push-pull"), GestureProfile("sweep", "sweep"),
                GestureProfile("slide", "slide")]
    return ScenarioSpec(gestures, doms, reps=50, noise_sigma=0.05, seed=seed), [2]


def _manifold_gap(seed: int) -> tuple[ScenarioSpec, list[int]]:
    # five orientations 30 degrees apart; the middle one is the target, 1 and 3 are its neighbours
    room = _room(seed, 0)
    angles = np.deg2rad([-60.0, -30.0, 0.0, 30.0, 60.0])
    doms = [DomainFactor(i, rotation_rad=float(a), room=room, factors={"orientation": str(i)})
            for i, a in enumerate(angles)]
    gestures = [GestureProfile("push-pull", "push-pull"), GestureProfile("slide", "slide"),
                GestureProfile("circle", "circle")]
    return ScenarioSpec(gestures, doms, reps=30, noise_sigma=0.05, seed=seed), [2]


def benchmark_spec(profile: str, seed: int = 0) -> tuple[ScenarioSpec, list[int]]:
    """Scenario and target domain ids of a named benchmark."""
    builders = {"mixture3": _mixture3, "semantic-conflict": _semantic_conflict, "manifold-gap": _manifold_gap}
    if profile not in builders:
        raise ValueError(f"unknown benchmark profile {profile!r}; choose from {PROFILES}")
    return builders[profile](seed)


def planted_benchmark(profile: str, seed: int = 0) -> tuple[Dataset, Dataset, PlantedTruth]:
    """Named source/target split with planted ground truth.

    ``mixture3``: 3 source domains x 2 gestures x 50 repetitions, one target
    domain (a new room with a new fan). ``semantic-conflict``: orientations 0
    and 90 degrees, where push-pull at 90 equals sweep at 0 in distribution;
    target at 45 degrees. ``manifold-gap``: orientations -60..60 in 30 degree
    steps with the middle one held out.

    The returned truth covers the source records followed by the target records.
    """
    spec, target_ids = benchmark_spec(profile, seed)
    ds, truth = generate(spec)
    tgt = [i for i, d in enumerate(truth.domain_ids) if d in target_ids]
    src = [i for i, d in enumerate(truth.domain_ids) if d not in target_ids]
    return ds.subset(src), ds.subset(tgt), truth.subset(src + tgt)


def write_benchmark(profile: str, seed: int, out_dir) -> dict[str, Path]:
    """Write source/target manifests (sharing one record directory) and the truth sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    source, target, truth = planted_benchmark(profile, seed)
    paths = {"source": write_manifest(source, out_dir / "source.json"),
             "target": write_manifest(target, out_dir / "target.json")}
    truth.save(out_dir / "truth.json")
    paths["truth"] = out_dir / "truth.json"
    return paths
