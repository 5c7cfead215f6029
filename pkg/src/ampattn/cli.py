"""Command line entry point: ``ampattn {synth,train,eval,attn-map,gradcheck,ablation}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Machine-readable results go to files or stdout; logs go to stderr, with the
level taken from ``AMPATTN_LOG`` (error, info or debug).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .attention import Variant
from .data import (Dataset, FeatureSet, ManifestError, SynthConfig, assign_folds, build_features,
                   generate_synthetic, load_manifest)
from .dsp import MfccConfig, Segment, amplitude_peak_frame, compute_mfcc, load_wav, segment_mfcc
from .model import ModelConfig, load_checkpoint, model_forward
from .tensor import save_csv
from .training import TrainConfig, evaluate, normalize_inputs, run_ablation, run_cv

log = logging.getLogger("ampattn")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything a run depends on; persisted as ``run_config.json`` in each run directory."""

    command: str = "train"
    manifest: Optional[str] = None
    variant: str = "faca"
    folds: int = 5
    fold_seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0])
    tolerance: int = 5
    seg_len: int = 50
    seg_hop: int = 10
    label_remap: dict[str, str] = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    mfcc: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def mfcc_config(self) -> MfccConfig:
        return MfccConfig(**self.mfcc)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.train)

    def model_config(self, n_classes: int) -> ModelConfig:
        mc = MfccConfig(**self.mfcc)
        d = {**self.model, "n_mfcc": mc.n_mfcc, "n_classes": n_classes, "seg_len": self.seg_len,
             "variant": self.variant}
        return ModelConfig.from_dict(d)

    def resolve(self, n_classes: int) -> "RunConfig":
        """Copy with every default spelled out."""
        for section, cls in (("model", ModelConfig), ("train", TrainConfig), ("mfcc", MfccConfig)):
            unknown = set(getattr(self, section)) - {f.name for f in dataclasses.fields(cls)}
            if unknown:
                raise ConfigError(f"unknown {section} config keys: {sorted(unknown)}")
        try:
            Variant.parse(self.variant)
            mfcc = dataclasses.asdict(self.mfcc_config())
            model = self.model_config(n_classes).to_dict()
            train = self.train_config().to_dict()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return dataclasses.replace(self, mfcc=mfcc, model=model, train=train,
                                   variant=Variant.parse(self.variant).value)

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True))


def _setup_logging() -> None:
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("AMPATTN_LOG", "info").lower(), logging.INFO)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("ampattn")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


def _load_run_config(args) -> RunConfig:
    rc = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    for name in ("manifest", "variant", "folds", "tolerance", "fold_seed"):
        val = getattr(args, name, None)
        if val is not None:
            setattr(rc, name, val)
    if getattr(args, "seeds", None):
        rc.seeds = args.seeds
    if rc.manifest is None:
        raise ConfigError("no manifest given (--manifest or config 'manifest')")
    return rc


def _prepare(rc: RunConfig) -> tuple[RunConfig, Dataset, FeatureSet]:
    """Load the corpus and pin every setting that depends on it."""
    try:
        ds = assign_folds(load_manifest(rc.manifest, rc.label_remap), rc.folds, rc.fold_seed)
        sample_rate = load_wav(ds.wav_path(ds.entries[0])).sample_rate
        mfcc = rc.mfcc_config().resolved(sample_rate)
    except (ManifestError, ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    rc = dataclasses.replace(rc, manifest=str(Path(rc.manifest).resolve()), mfcc=dataclasses.asdict(mfcc))
    rc = rc.resolve(len(ds.vocabulary))
    fs = build_features(ds, mfcc=mfcc, seg_len=rc.seg_len, hop=rc.seg_hop)
    return rc, ds, fs


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = SynthConfig(n_classes=args.classes, per_class=args.per_class, seed=args.seed,
                      duration=args.duration, sample_rate=args.sample_rate)
    try:
        cfg.resolved_classes()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    ds, _, _ = generate_synthetic(cfg, args.out)
    log.info("wrote %d utterances to %s", len(ds), args.out)
    print(json.dumps({"out": str(args.out), "utterances": len(ds), "classes": ds.vocabulary}))
    return 0


def cmd_train(args) -> int:
    rc = _load_run_config(args)
    rc.command = "train"
    rc, ds, fs = _prepare(rc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rc.write(out / "run_config.json")
    mcfg, tcfg = rc.model_config(len(ds.vocabulary)), rc.train_config()
    log.info("training %s, %d folds, %d utterances, %d segments", mcfg.variant.value, rc.folds,
             len(ds), len(fs))
    try:
        res = run_cv(fs, rc.folds, mcfg, tcfg, out_dir=out, tolerance=rc.tolerance, jobs=args.jobs)
    except Exception as exc:  # noqa: BLE001 - reported with stage name
        log.error("training failed: %s", exc)
        print(f"error: training stage failed: {exc}", file=sys.stderr)
        return 1
    for r in range(rc.folds):
        _annotate_checkpoint(out / f"fold{r}" / "checkpoint", rc, ds)
    report = res.report.to_dict()
    report["alignment"] = res.alignment.to_dict(segments=False) if res.alignment else None
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    print(json.dumps({"WA": res.report.WA, "UA": res.report.UA, "WA_std": res.report.WA_std,
                      "UA_std": res.report.UA_std, "folds": rc.folds}))
    return 0


def _annotate_checkpoint(path: Path, rc: RunConfig, ds: Dataset) -> None:
    mf = path / "manifest.json"
    meta = json.loads(mf.read_text())
    meta["run"] = dataclasses.asdict(rc)
    meta["vocabulary"] = ds.vocabulary
    mf.write_text(json.dumps(meta, indent=2, sort_keys=True))


def _checkpoint_run(meta: dict) -> RunConfig:
    run = meta.get("run")
    return RunConfig(**run) if run else RunConfig()


def cmd_eval(args) -> int:
    mp, meta = load_checkpoint(args.checkpoint)
    rc = _checkpoint_run(meta)
    rc.manifest = args.manifest
    try:
        ds = load_manifest(args.manifest, rc.label_remap)
    except ManifestError as exc:
        raise ConfigError(str(exc)) from None
    vocab = meta.get("vocabulary")
    if vocab is not None and list(vocab) != list(ds.vocabulary):
        print(f"error: label vocabulary mismatch: checkpoint {vocab} vs manifest {ds.vocabulary}",
              file=sys.stderr)
        return 1
    ds = assign_folds(ds, rc.folds, rc.fold_seed)
    fs = build_features(ds, mfcc=rc.mfcc_config(), seg_len=rc.seg_len, hop=rc.seg_hop)
    if args.fold is not None:
        idx = fs.fold_indices([args.fold])
        if idx.size == 0:
            print(f"error: fold {args.fold} holds no utterances", file=sys.stderr)
            return 1
        fs = fs.subset(idx)
    report = evaluate(mp, fs)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def cmd_attn_map(args) -> int:
    mp, meta = load_checkpoint(args.checkpoint)
    rc = _checkpoint_run(meta)
    mcfg_mfcc = rc.mfcc_config()
    w = load_wav(args.wav)
    mat = compute_mfcc(w, mcfg_mfcc)
    m = mp.config.seg_len
    total = mat.frames.shape[0]
    off = args.segment_offset
    if off < 0 or (total >= m and off > total - m) or (total < m and off != 0):
        raise ConfigError(f"segment offset {off} beyond utterance ({total} frames, segment {m})")
    if total >= m:
        seg = Segment(mat.frames[off:off + m].copy(), off)
    else:
        seg = segment_mfcc(mat, m, rc.seg_hop)[0]
    x = normalize_inputs(mp, seg.frames[None])
    valid = None if seg.valid_len == m else np.array([seg.valid_len])
    logits, trace = model_forward(x, mp, "eval", valid_len=valid, capture=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    utt = Path(args.wav).stem
    written = []
    for i in range(mp.config.heads):
        kinds = {"H_o": trace.H_o[0, i]}
        if trace.focal_bias is not None:
            kinds["f"] = trace.focal_bias[0, i]
        if trace.H_s is not None:
            kinds["H_s"] = trace.H_s[0, i]
        for kind, mat_i in kinds.items():
            name = f"{utt}_{off}_head{i}_{kind}.csv"
            save_csv(mat_i, out / name)
            written.append(name)
    peak = amplitude_peak_frame(w, mcfg_mfcc, seg)
    sidecar = {
        "utterance": utt,
        "offset": off,
        "variant": mp.config.variant.value,
        "heads": mp.config.heads,
        "seg_len": m,
        "amplitude_peak_frame": peak,
        "logits": logits.data[0].tolist(),
        "mu_tilde": None if trace.mu_tilde is None else trace.mu_tilde[0].tolist(),
        "sigma_tilde": None if trace.sigma_tilde is None else trace.sigma_tilde[0].tolist(),
        "s": None if trace.s is None else trace.s[0].tolist(),
        "files": written,
    }
    (out / f"{utt}_{off}_trace.json").write_text(json.dumps(sidecar, indent=2))
    print(json.dumps({"out": str(out), "files": len(written) + 1, "amplitude_peak_frame": peak}))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    rows = run_gradcheck(scale=args.scale, seed=args.seed)
    print("item,max_rel_error,status")
    failing = []
    for name, err in rows:
        ok = err <= args.tol
        if not ok:
            failing.append(name)
        print(f"{name},{err:.3e},{'pass' if ok else 'FAIL'}")
    if failing:
        print(f"error: gradient check failed for {', '.join(failing)}", file=sys.stderr)
        return 1
    return 0


def cmd_ablation(args) -> int:
    rc = _load_run_config(args)
    rc.command = "ablation"
    rc, ds, fs = _prepare(rc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rc.write(out / "run_config.json")
    run_ablation(fs, rc.folds, rc.model_config(len(ds.vocabulary)), rc.train_config(), rc.seeds,
                 rc.tolerance, jobs=args.jobs, out_dir=out)
    sys.stdout.write((out / "ablation.csv").read_text())
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _seed_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ampattn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic burst corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--per-class", type=int, default=25)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--duration", type=float, default=0.52)
    s.add_argument("--sample-rate", type=int, default=16000)
    s.set_defaults(func=cmd_synth)

    variants = ["bmhsa", "fa", "faca"]
    t = sub.add_parser("train", help="k-fold training run")
    t.add_argument("--manifest")
    t.add_argument("--config", help="JSON RunConfig (a persisted run_config.json reproduces a run)")
    t.add_argument("--variant", choices=variants)
    t.add_argument("--folds", type=int)
    t.add_argument("--fold-seed", type=int, dest="fold_seed")
    t.add_argument("--out", required=True)
    t.add_argument("--jobs", type=int, default=1)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--fold", type=int)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("attn-map", help="export attention maps for one segment")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--wav", required=True)
    a.add_argument("--segment-offset", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attn_map)

    g = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    g.add_argument("--scale", choices=["tiny"], default="tiny")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("ablation", help="bmhsa / fa / faca comparison over seeds")
    b.add_argument("--manifest")
    b.add_argument("--config")
    b.add_argument("--seeds", type=_seed_list)
    b.add_argument("--folds", type=int)
    b.add_argument("--fold-seed", type=int, dest="fold_seed")
    b.add_argument("--tolerance", type=int)
    b.add_argument("--out", default="ablation_out")
    b.add_argument("--jobs", type=int, default=1)
    b.set_defaults(func=cmd_ablation)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors, --help, --version
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {args.command} failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
