"""Command-line entry point.

Every command writes under an output root: ``--out`` if given, else the
``GESFI_OUT`` environment variable, else ``./gesfi-out``. Options can also
come from a flat ``key=value`` file passed with ``--config``; flags given on
the command line win. Exit status is 0 on success, 2 on bad input and 1 on
an internal error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import traceback
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import core, evaluation, latent, pipeline, synth
from .core import CsiError

OUT_ENV = "GESFI_OUT"
DEFAULT_OUT = "gesfi-out"
BOOL_STRINGS = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}

log = logging.getLogger("gesfi")


class UserError(Exception):
    """Bad input from the caller; maps to exit status 2."""


# ---------------------------------------------------------------- helpers


def out_root(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def command_dir(args, name: str) -> Path:
    path = out_root(args) / name
    path.mkdir(parents=True, exist_ok=True)
    return path


def read_config(path) -> dict[str, str]:
    """Parse a flat ``key=value`` file; blank lines and ``#`` comments are ignored."""
    path = Path(path)
    if not path.exists():
        raise UserError(f"config file {path} not found")
    values = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UserError(f"{path}:{n}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_hash(path) -> str:
    """Digest of a manifest together with every record file it references."""
    path = Path(path)
    h = hashlib.sha256(path.read_bytes())
    try:
        entries = json.loads(path.read_text()).get("records", [])
    except json.JSONDecodeError:
        entries = []
    for entry in entries:
        f = path.parent / str(entry.get("file", ""))
        if f.is_file():
            h.update(sha256_file(f).encode())
    return h.hexdigest()


def array_hash(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def write_report(path: Path, args, inputs: dict, **results) -> None:
    doc = {"command": args.command, "args": {k: v for k, v in vars(args).items() if k != "func"},
           "seed": getattr(args, "seed", None), "inputs": inputs, **results}
    evaluation.dump_json(doc, path)


def dsp_config(args) -> pipeline.DspConfig:
    size = args.size or (224 if args.backbone.startswith("paper") else 32)
    return pipeline.DspConfig(window=args.window, hop=args.hop, cutoff_hz=args.cutoff, size=size)


def load_images(manifest, cfg: pipeline.DspConfig, cache=None, workers: int = 1) -> tuple[pipeline.ImageSet, str]:
    ds = core.load_manifest(manifest)
    if not len(ds):
        raise UserError(f"{manifest}: no records")
    if cache:
        images = pipeline.load_cached_images(ds, cache, cfg)
    else:
        images = pipeline.build_image_set(ds, cfg, workers)
    return images, manifest_hash(manifest)


def profile_images(profile: str, seed: int, cfg: pipeline.DspConfig, workers: int = 1):
    source, target, _ = synth.planted_benchmark(profile, seed)
    src = pipeline.build_image_set(source, cfg, workers)
    tgt = pipeline.build_image_set(target, cfg, workers)
    return src, tgt


def hold_out(images: pipeline.ImageSet, spec: str) -> tuple[pipeline.ImageSet, pipeline.ImageSet]:
    if "=" not in spec:
        raise UserError("--hold-out expects factor=value")
    factor, value = spec.split("=", 1)
    values = [m.factor(factor) for m in images.metas]
    tgt = [i for i, v in enumerate(values) if v == value]
    src = [i for i, v in enumerate(values) if v != value]
    if not tgt:
        raise UserError(f"no records with {factor}={value}")
    if not src:
        raise UserError(f"holding out {factor}={value} leaves an empty source")
    return images.subset(src), images.subset(tgt)


def training_data(args, cfg: pipeline.DspConfig):
    """Source and optional target images plus their input hashes."""
    if args.profile:
        data_seed = args.seed if args.data_seed is None else args.data_seed
        src, tgt = profile_images(args.profile, data_seed, cfg, args.workers)
        inputs = {"profile": args.profile, "data_seed": data_seed,
                  "source_images": array_hash(src.images, src.gestures),
                  "target_images": array_hash(tgt.images, tgt.gestures)}
        return src, tgt, inputs
    if not args.source:
        raise UserError("give --profile or --source")
    src, h = load_images(args.source, cfg, args.cache, args.workers)
    inputs = {"source": h}
    tgt = None
    if args.target:
        tgt, inputs["target"] = load_images(args.target, cfg, args.target_cache, args.workers)
    elif args.hold_out:
        src, tgt = hold_out(src, args.hold_out)
        inputs["hold_out"] = args.hold_out
    return src, tgt, inputs


def train_config(args) -> latent.TrainConfig:
    return latent.TrainConfig(
        K=args.K, lambda1=args.lambda1, lambda2=args.lambda2, learning_rate=args.lr, lr_decay=args.lr_decay,
        lr_step=args.lr_step, epochs=args.epochs, pre_epochs=args.pre_epochs, batch_size=args.batch_size,
        seed=args.seed, distance_metric=args.metric, refinement_rounds=args.refinement_rounds,
        backbone=args.backbone, extractor_trainable=not args.freeze_extractor, early_stop=not args.no_early_stop)


def varying_factors(images: pipeline.ImageSet) -> list[str]:
    return [f for f in core.FACTORS if len({m.factor(f) for m in images.metas}) > 1]


def domain_composition(model, images: pipeline.ImageSet, cfg: latent.TrainConfig, factors):
    """Factor composition of the model's latent domains over the values present in ``images``."""
    state = latent.latent_domains(model, images.images, cfg)
    try:
        return evaluation.composition_report(state.pseudo_labels, images.metas, factors, cfg.K)
    except KeyError as exc:
        raise UserError(str(exc)) from exc


# ---------------------------------------------------------------- commands


def cmd_ingest(args) -> int:
    ds = core.load_manifest(args.manifest)
    if not len(ds):
        raise UserError(f"{args.manifest}: no records")
    out = command_dir(args, "ingest")
    manifest = core.write_manifest(ds, out / "manifest.json")
    factors = {name: ds.factor_values(name) for name in core.FACTORS}
    print(f"records: {len(ds)}")
    print(f"gestures: {len(ds.label_set)} ({', '.join(ds.label_set)})")
    for name, values in factors.items():
        print(f"{name}: {len(values)} ({', '.join(values)})")
    write_report(out / "report.json", args, {"manifest": manifest_hash(args.manifest)},
                 records=len(ds), label_set=ds.label_set, factors=factors, written=str(manifest))
    return 0


def cmd_preprocess(args) -> int:
    ds = core.load_manifest(args.manifest)
    if not len(ds):
        raise UserError(f"{args.manifest}: no records")
    cfg = dsp_config(args)
    cache = Path(args.cache) if args.cache else out_root(args) / "cache"
    try:
        res = pipeline.preprocess_to_cache(ds, cache, cfg, strict=args.strict, workers=args.workers)
    except (ValueError, IndexError) as exc:
        raise UserError(f"preprocessing failed: {exc}") from exc
    for rid in res.hits:
        print(f"cache hit {rid}")
    for rid in res.rendered:
        print(f"rendered {rid}")
    for rid, why in res.failed.items():
        print(f"skipped {rid}: {why}")
    print(f"{len(res.rendered)} rendered, {len(res.hits)} cache hits, {len(res.failed)} skipped "
          f"(config {cfg.hash()})")
    write_report(cache / "report.json", args, {"manifest": manifest_hash(args.manifest)},
                 config=asdict(cfg), config_hash=cfg.hash(), rendered=res.rendered, hits=res.hits,
                 skipped=res.failed)
    return 0


def cmd_synth(args) -> int:
    out = command_dir(args, "synth")
    paths = synth.write_benchmark(args.profile, args.seed, out)
    src, tgt = core.load_manifest(paths["source"]), core.load_manifest(paths["target"])
    print(f"{args.profile}: {len(src)} source and {len(tgt)} target records in {out}")
    write_report(out / "report.json", args, {}, files={k: str(v) for k, v in paths.items()},
                 hashes={k: manifest_hash(v) if k != "truth" else sha256_file(v) for k, v in paths.items()})
    return 0


def cmd_train(args) -> int:
    cfg = train_config(args)
    dcfg = dsp_config(args)
    src, tgt, inputs = training_data(args, dcfg)
    out = command_dir(args, "train")
    ckpt = out / "model.pt"
    if args.baseline is None or args.baseline == "kmeans-latent":
        if args.baseline == "kmeans-latent":
            cfg = latent.TrainConfig(**{**cfg.to_dict(), "centroid_init": "kmeans"})
        run = latent.GesFi(src, cfg, tgt)
        report = run.run()
        run.save(ckpt, dsp=asdict(dcfg))
    else:
        factor = args.domain_factor
        if args.baseline == "physical-adversarial" and factor is None:
            factor = "location"
        report = evaluation.train_baseline(args.baseline, src, cfg, tgt, domain_factor=factor)
        latent.save_model(ckpt, report.model, cfg, src.label_set, dsp=asdict(dcfg), report=report.epochs)
    report.write_jsonl(out / "losses.jsonl")
    ev = evaluation.evaluate(report.model, tgt) if tgt is not None else None
    comp = None
    factors = varying_factors(src)
    if report.state is not None and factors:
        comp = domain_composition(report.model, src, cfg, factors)
    plots = evaluation.write_plots(out, report, ev, comp) if not args.no_plots else []
    acc = report.target_accuracy
    print(f"trained {args.baseline or 'gesfi'} for {len(report.epochs)} epochs"
          + (f"; target accuracy {acc:.4f}" if acc is not None else ""))
    write_report(out / "report.json", args, inputs, config=cfg.to_dict(), dsp=asdict(dcfg),
                 checkpoint=str(ckpt), epochs=len(report.epochs), stopped_early=report.stopped_early,
                 target_accuracy=acc, evaluation=ev.to_json() if ev else None,
                 composition=comp.to_json() if comp else None, plots=[str(p) for p in plots])
    return 0


def _load_checkpoint(args):
    if not args.checkpoint:
        raise UserError("no checkpoint given (--checkpoint)")
    path = Path(args.checkpoint)
    if not path.is_file():
        raise UserError(f"checkpoint {path} not found")
    model, payload = latent.load_model(path)
    dcfg = pipeline.DspConfig(**payload["dsp"]) if "dsp" in payload else pipeline.DspConfig(size=32)
    return model, payload, dcfg, {"checkpoint": sha256_file(path)}


def cmd_eval(args) -> int:
    model, payload, dcfg, inputs = _load_checkpoint(args)
    if args.profile:
        data_seed = args.seed if args.data_seed is None else args.data_seed
        _, tgt = profile_images(args.profile, data_seed, dcfg, args.workers)
        inputs.update(profile=args.profile, data_seed=data_seed, target_images=array_hash(tgt.images, tgt.gestures))
    elif args.target:
        tgt, inputs["target"] = load_images(args.target, dcfg, args.target_cache, args.workers)
    else:
        raise UserError("give --profile or --target")
    ev = evaluation.evaluate(model, tgt, payload.get("label_set"))
    out = command_dir(args, "eval")
    plots = evaluation.write_plots(out, evaluation=ev) if not args.no_plots else []
    print(f"accuracy {ev.accuracy:.4f} on {ev.n} records")
    for name, acc in ev.per_class.items():
        print(f"  {name}: {acc:.4f}")
    write_report(out / "report.json", args, inputs, evaluation=ev.to_json(), plots=[str(p) for p in plots])
    return 0


def cmd_analyze_domains(args) -> int:
    model, payload, dcfg, inputs = _load_checkpoint(args)
    if args.profile:
        data_seed = args.seed if args.data_seed is None else args.data_seed
        images, _ = profile_images(args.profile, data_seed, dcfg, args.workers)
        inputs.update(profile=args.profile, data_seed=data_seed, images=array_hash(images.images))
    elif args.source:
        images, inputs["source"] = load_images(args.source, dcfg, args.cache, args.workers)
    else:
        raise UserError("give --profile or --source")
    cfg = latent.TrainConfig(**payload["config"])
    if args.factors:
        factors = [f.strip() for f in args.factors.split(",") if f.strip()]
    else:
        factors = varying_factors(images)
    if not factors:
        raise UserError("no factor varies in this data; pass --factors")
    comp = domain_composition(model, images, cfg, factors)
    out = command_dir(args, "analyze-domains")
    print(f"domain sizes: {comp.domain_sizes}")
    print(comp.table())
    evaluation.write_plots(out, composition=comp)
    write_report(out / "report.json", args, inputs, composition=comp.to_json())
    return 0


# ---------------------------------------------------------------- parser


class _Help(argparse.ArgumentDefaultsHelpFormatter):
    """Shows defaults only where there is one worth showing."""

    def _get_help_string(self, action):
        text = action.help or ""
        if action.default is None or action.nargs == 0 or "%(default)" in text:
            return text
        return super()._get_help_string(action)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value file; command-line flags override it")
    p.add_argument("--out", help=f"output root (default: ${OUT_ENV} or ./{DEFAULT_OUT})")
    p.add_argument("--seed", type=int, default=0, help="seed for every random stream (default: %(default)s)")
    p.add_argument("--workers", type=int, default=1, help="preprocessing processes (default: %(default)s)")
    p.add_argument("-v", "--verbose", action="store_true")


def _dsp_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("preprocessing")
    g.add_argument("--window", type=int, default=pipeline.dsp.HANN_WINDOW, help="STFT Hann window (default: %(default)s)")
    g.add_argument("--hop", type=int, default=pipeline.dsp.HOP, help="STFT hop (default: %(default)s)")
    g.add_argument("--cutoff", type=float, default=pipeline.dsp.HIGHPASS_CUTOFF_HZ,
                   help="high-pass cutoff in Hz (default: %(default)s)")
    g.add_argument("--size", type=int, default=None, help="image side (default: 224 for paper backbones, else 32)")
    g.add_argument("--backbone", default="desk", choices=["desk", "identity", "paper", "paper-scratch"],
                   help="feature extractor profile (default: %(default)s)")


def _data_options(p: argparse.ArgumentParser, source: bool = True, target: bool = True) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--profile", choices=synth.PROFILES, help="use a synthetic benchmark instead of manifests")
    g.add_argument("--data-seed", type=int, default=None, help="benchmark seed (default: --seed)")
    if source:
        g.add_argument("--source", help="source manifest")
        g.add_argument("--cache", help="image cache built by preprocess for the source")
    if target:
        g.add_argument("--target", help="target manifest")
        g.add_argument("--target-cache", help="image cache for the target")


def build_parser() -> argparse.ArgumentParser:
    d = latent.TrainConfig()
    parser = argparse.ArgumentParser(prog="gesfi", description="WiFi CSI gesture recognition with latent domains.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a manifest and write it in the canonical format",
                       formatter_class=_Help)
    _common(p)
    p.add_argument("manifest")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("preprocess", help="render records into a cached image set",
                       formatter_class=_Help)
    _common(p)
    _dsp_options(p)
    p.add_argument("manifest")
    p.add_argument("--cache", help="cache directory (default: <out>/cache)")
    p.add_argument("--strict", action="store_true", help="fail on the first bad record instead of skipping it")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="write a synthetic benchmark with its planted truth",
                       formatter_class=_Help)
    _common(p)
    p.add_argument("--profile", choices=synth.PROFILES, default="mixture3", help="(default: %(default)s)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the latent-domain model or a baseline",
                       formatter_class=_Help)
    _common(p)
    _dsp_options(p)
    _data_options(p)
    p.add_argument("--hold-out", help="factor=value to hold out of --source as the target")
    g = p.add_argument_group("training")
    g.add_argument("--baseline", choices=evaluation.BASELINES, default=None,
                   help="train a comparison model instead of the full method")
    g.add_argument("--domain-factor", default=None,
                   help="physical factor for the physical-adversarial baseline (default: location)")
    g.add_argument("--epochs", type=int, default=d.epochs, help="total epochs")
    g.add_argument("--pre-epochs", type=int, default=d.pre_epochs, help="pre-learning epochs")
    g.add_argument("--batch-size", type=int, default=d.batch_size, help="samples per step")
    g.add_argument("--lr", type=float, default=d.learning_rate, help="initial learning rate (Adam)")
    g.add_argument("--lr-decay", type=float, default=d.lr_decay, help="learning-rate factor per step")
    g.add_argument("--lr-step", type=int, default=d.lr_step, help="epochs between learning-rate steps")
    g.add_argument("--K", type=int, default=d.K, help="number of latent domains")
    g.add_argument("--lambda1", type=float, default=d.lambda1, help="anti-gesture reversal strength")
    g.add_argument("--lambda2", type=float, default=d.lambda2, help="domain-adversary reversal strength")
    g.add_argument("--metric", choices=latent.METRICS, default=d.distance_metric, help="centroid distance")
    g.add_argument("--refinement-rounds", type=int, default=d.refinement_rounds, help="centroid refinement rounds")
    g.add_argument("--freeze-extractor", action="store_true", help="stop training the feature extractor after pre-learning")
    g.add_argument("--no-early-stop", action="store_true", help="always run every epoch")
    g.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and confusion matrix of a checkpoint on target data",
                       formatter_class=_Help)
    _common(p)
    _data_options(p, source=False)
    p.add_argument("--checkpoint", help="model.pt written by train")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze-domains", help="purity and entropy of physical factors in the latent domains",
                       formatter_class=_Help)
    _common(p)
    _data_options(p, target=False)
    p.add_argument("--checkpoint", help="model.pt written by train")
    p.add_argument("--factors", help="comma-separated factors, e.g. location,orientation or loc+ori")
    p.set_defaults(func=cmd_analyze_domains)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv, args):
    values = read_config(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in sub._actions}
    for key, value in values.items():
        action = known.get(key)
        if action is None or key in ("config", "help"):
            raise UserError(f"unknown config key {key!r} for {args.command}")
        if action.nargs == 0:  # store_true
            if value.lower() not in BOOL_STRINGS:
                raise UserError(f"config key {key!r} expects a boolean")
            values[key] = BOOL_STRINGS[value.lower()]
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.config:
            args = _apply_config(parser, argv, args)
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UserError, CsiError, FileNotFoundError, ValueError, KeyError) as exc:
        # ValueError and KeyError are what the wrapped modules raise on invalid input
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
