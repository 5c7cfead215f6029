"""Cross-entropy/Adam training, k-fold rotation, WA/UA metrics, ablation and alignment."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import tensor as tn
from .attention import Variant
from .data import FeatureSet
from .model import ModelConfig, ModelParams, init_params, model_forward, save_checkpoint
from .tensor import Tensor

log = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass
class TrainConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 128
    epochs: int = 100
    seed: int = 0
    eval_batch: int = 256

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------------------
# Loss and optimiser
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean ``-log softmax(logits)[label]`` over the batch (or a single vector)."""
    logits = tn.as_tensor(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    n = logits.shape[-1]
    if labels.min() < 0 or labels.max() >= n:
        raise ValueError(f"labels {labels.tolist()} out of range for {n} classes")
    lp = tn.log_softmax(logits)
    if lp.ndim == 1:
        return tn.neg(lp[int(labels[0])])
    picked = lp[np.arange(lp.shape[0]), labels]
    return tn.neg(tn.mean(picked))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], state: AdamState, cfg: TrainConfig) -> AdamState:
    """Bias-corrected Adam update in place; a missing grad counts as zero."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise tn.DimensionError(f"adam: grad {g.shape} vs param {p.data.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        elif m.shape != p.data.shape:
            raise tn.DimensionError(f"adam: moment {m.shape} vs param {p.data.shape} for {name}")
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return state


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    confusion: np.ndarray
    WA: float
    UA: float
    n_utterances: int
    truth: list[int] = field(default_factory=list)
    pred: list[int] = field(default_factory=list)
    per_fold: list["EvalReport"] = field(default_factory=list)
    WA_std: float = 0.0
    UA_std: float = 0.0

    def to_dict(self, predictions: bool = True) -> dict:
        d = {
            "WA": self.WA,
            "UA": self.UA,
            "confusion": self.confusion.astype(int).tolist(),
            "n_utterances": self.n_utterances,
        }
        if predictions:
            d["truth"] = list(map(int, self.truth))
            d["pred"] = list(map(int, self.pred))
        if self.per_fold:
            d["WA_std"] = self.WA_std
            d["UA_std"] = self.UA_std
            d["per_fold"] = [r.to_dict(predictions=False) for r in self.per_fold]
        return d


def confusion_matrix(truth: Sequence[int], pred: Sequence[int], n_classes: int) -> np.ndarray:
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (np.asarray(truth, dtype=int), np.asarray(pred, dtype=int)), 1)
    return conf


def wa_ua(conf: np.ndarray) -> tuple[float, float]:
    """Overall accuracy and mean per-class recall; zero-support classes are left out of UA."""
    total = conf.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    wa = float(np.trace(conf) / total)
    support = conf.sum(axis=1)
    present = support > 0
    if not present.all():
        log.warning("classes %s have no test support; excluded from UA", np.flatnonzero(~present).tolist())
    ua = float(np.mean(np.diag(conf)[present] / support[present]))
    return wa, ua


def report_from_predictions(truth: Sequence[int], pred: Sequence[int], n_classes: int) -> EvalReport:
    conf = confusion_matrix(truth, pred, n_classes)
    wa, ua = wa_ua(conf)
    return EvalReport(conf, wa, ua, int(conf.sum()), list(map(int, truth)), list(map(int, pred)))


def aggregate_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """Mean and population std of WA/UA across folds; confusion matrices summed."""
    conf = sum(r.confusion for r in reports)
    was = np.array([r.WA for r in reports])
    uas = np.array([r.UA for r in reports])
    return EvalReport(conf, float(was.mean()), float(uas.mean()), int(conf.sum()),
                      [t for r in reports for t in r.truth], [p for r in reports for p in r.pred],
                      list(reports), float(was.std()), float(uas.std()))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def aggregate_utterance(segment_logits) -> int:
    """Argmax of the mean per-segment softmax; lowest class id on ties."""
    logits = np.atleast_2d(np.asarray(segment_logits, dtype=np.float64))
    if logits.shape[0] < 1:
        raise ValueError("need at least one segment")
    return int(np.argmax(softmax_np(logits).mean(axis=0)))


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def normalize_inputs(mp: ModelParams, X: np.ndarray) -> np.ndarray:
    mean = mp.buffers.get("input.mean")
    if mean is None:
        return X
    return (X - mean) / mp.buffers["input.std"]


def predict_logits(mp: ModelParams, fs: FeatureSet, batch: int = 256, capture: bool = False):
    """Eval-mode logits for every segment; with ``capture`` also the stacked attention maps."""
    out, maps = [], []
    X = normalize_inputs(mp, fs.X)
    for start in range(0, len(fs), batch):
        sl = slice(start, start + batch)
        vl = fs.valid_len[sl]
        valid = None if np.all(vl == X.shape[1]) else vl
        logits, trace = model_forward(X[sl], mp, "eval", valid_len=valid, capture=capture)
        out.append(logits.data)
        if capture:
            maps.append(trace.maps)
    logits = np.concatenate(out, axis=0)
    return (logits, np.concatenate(maps, axis=0)) if capture else logits


def utterance_predictions(segment_logits: np.ndarray, fs: FeatureSet) -> np.ndarray:
    preds = np.empty(len(fs.utt_ids), dtype=int)
    for u in range(len(fs.utt_ids)):
        preds[u] = aggregate_utterance(segment_logits[fs.utt == u])
    return preds


def evaluate(mp: ModelParams, fs: FeatureSet, batch: int = 256) -> EvalReport:
    if len(fs) == 0:
        raise ValueError("evaluate: empty test set")
    preds = utterance_predictions(predict_logits(mp, fs, batch), fs)
    return report_from_predictions(fs.utt_labels, preds, mp.config.n_classes)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class FoldResult:
    checkpoint: ModelParams
    history: list[dict]
    best_epoch: int
    test: Optional[EvalReport] = None


def train_fold(train: FeatureSet, val: FeatureSet, tcfg: TrainConfig, mcfg: ModelConfig,
               on_epoch: Optional[Callable[[dict], None]] = None) -> FoldResult:
    """Segment-level training; keeps the parameters with the best validation UA."""
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train_fold: empty train or validation split")
    overlap = set(train.utt_ids) & set(val.utt_ids)
    if overlap:
        raise ValueError(f"train/val share utterances: {sorted(overlap)[:5]}")
    mp = init_params(mcfg, tcfg.seed)
    mean = train.X.reshape(-1, train.X.shape[-1]).mean(axis=0)
    std = train.X.reshape(-1, train.X.shape[-1]).std(axis=0) + 1e-8
    mp.buffers["input.mean"] = mean
    mp.buffers["input.std"] = std
    X = normalize_inputs(mp, train.X)
    rng = np.random.default_rng(tcfg.seed)
    state = AdamState()
    params = mp.params
    best, best_ua, best_epoch = mp.copy(), -1.0, 0
    history = []
    full = np.all(train.valid_len == X.shape[1])
    for epoch in range(1, tcfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train))
        total, seen = 0.0, 0
        for start in range(0, len(order), tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            vl = None if full else train.valid_len[idx]
            logits, _ = model_forward(X[idx], mp, "train", valid_len=vl)
            loss = cross_entropy(logits, train.labels[idx])
            tn.zero_grad(params.values())
            tn.backward(loss)
            adam_step(params, state, tcfg)
            total += float(loss.data) * idx.size
            seen += idx.size
        rep = evaluate(mp, val, tcfg.eval_batch)
        row = {"epoch": epoch, "train_loss": total / seen, "val_WA": rep.WA, "val_UA": rep.UA,
               "seconds": time.perf_counter() - t0}
        history.append(row)
        if on_epoch:
            on_epoch(row)
        log.debug("epoch %d loss %.4f val WA %.4f UA %.4f", epoch, row["train_loss"], rep.WA, rep.UA)
        if rep.UA > best_ua:
            best, best_ua, best_epoch = mp.copy(), rep.UA, epoch
    return FoldResult(best, history, best_epoch)


def write_history(path: PathLike, history: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["epoch", "train_loss", "val_WA", "val_UA"])
        for r in history:
            out.writerow([r["epoch"], repr(r["train_loss"]), repr(r["val_WA"]), repr(r["val_UA"])])


def cv_splits(k: int) -> list[tuple[list[int], int, int]]:
    """``(train_folds, val_fold, test_fold)`` per rotation: test ``r``, val ``r+1 mod k``."""
    if k < 3:
        raise ValueError("k must be >= 3")
    return [([f for f in range(k) if f not in (r, (r + 1) % k)], (r + 1) % k, r) for r in range(k)]


@dataclass
class CVResult:
    report: EvalReport
    folds: list[FoldResult]
    alignment: Optional["AlignmentReport"] = None


def run_cv(fs: FeatureSet, k: int, mcfg: ModelConfig, tcfg: TrainConfig,
           out_dir: Optional[PathLike] = None, rotations: Optional[Sequence[int]] = None,
           tolerance: Optional[int] = None, jobs: int = 1) -> CVResult:
    """k-fold rotation; optional per-fold checkpoints/histories under ``out_dir``.

    With ``tolerance`` set, attention alignment is also measured on every test
    fold and pooled.  ``jobs > 1`` trains rotations in worker processes; results
    are identical to a serial run.
    """
    if np.any(fs.utt_folds < 0) or np.any(fs.utt_folds >= k):
        raise ValueError(f"every utterance needs a fold id in [0, {k})")
    tasks = [(r, split, fs, k, mcfg, tcfg, tolerance, out_dir)
             for r, split in enumerate(cv_splits(k)) if rotations is None or r in rotations]
    if jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_rotation, tasks))
    else:
        outcomes = [_rotation(t) for t in tasks]
    results = [res for res, _ in outcomes]
    align = [a for _, a in outcomes if a is not None]
    alignment = merge_alignment(align) if align else None
    return CVResult(aggregate_reports([r.test for r in results]), results, alignment)


def _rotation(task) -> tuple[FoldResult, Optional["AlignmentReport"]]:
    r, (train_f, val_f, test_f), fs, k, mcfg, tcfg, tolerance, out_dir = task
    train = fs.subset(fs.fold_indices(train_f))
    val = fs.subset(fs.fold_indices([val_f]))
    test = fs.subset(fs.fold_indices([test_f]))
    log.info("rotation %d/%d: train %d / val %d / test %d utterances", r + 1, k,
             len(train.utt_ids), len(val.utt_ids), len(test.utt_ids))
    res = train_fold(train, val, tcfg, mcfg)
    res.test = evaluate(res.checkpoint, test, tcfg.eval_batch)
    log.info("rotation %d test WA %.4f UA %.4f (best epoch %d)", r + 1, res.test.WA, res.test.UA,
             res.best_epoch)
    align = alignment_analysis(res.checkpoint, test, tolerance) if tolerance is not None else None
    if out_dir is not None:
        fold_dir = Path(out_dir) / f"fold{r}"
        save_checkpoint(fold_dir / "checkpoint", res.checkpoint, {
            "epoch": res.best_epoch, "vocabulary": fs.vocabulary,
            "metrics": res.test.to_dict(predictions=False),
            "splits": {"train": train_f, "val": val_f, "test": test_f},
        })
        write_history(fold_dir / "history.csv", res.history)
    return res, align


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------


@dataclass
class AlignmentReport:
    tolerance: int
    hit_rate: float
    chance_rate: float
    self_query_offpeak_rate: float
    per_head_hit_rate: list[float]
    segments: list[dict] = field(default_factory=list)
    variant: str = ""

    def to_dict(self, segments: bool = True) -> dict:
        d = dataclasses.asdict(self)
        if not segments:
            d.pop("segments")
        return d


def alignment_from_maps(maps: np.ndarray, peaks: np.ndarray, tolerance: int,
                        valid_len: Optional[np.ndarray] = None, ids: Optional[Sequence] = None,
                        variant: str = "") -> AlignmentReport:
    """Hit rate of attention-row argmax within ``tolerance`` frames of each segment's peak.

    ``maps`` is ``[N, h, m, m]`` (query rows, key columns).  The self-query
    off-peak rate is the share of (segment, head) rows for the peak query whose
    argmax key is not the peak itself.
    """
    n, h, m, _ = maps.shape
    valid_len = np.full(n, m) if valid_len is None else np.asarray(valid_len)
    arg = np.argmax(maps, axis=-1)  # N,h,m (first max on ties)
    hits = np.abs(arg - peaks[:, None, None]) <= tolerance
    qmask = np.arange(m)[None, :] < valid_len[:, None]  # N,m
    per_seg_head = (hits * qmask[:, None, :]).sum(-1) / qmask.sum(-1)[:, None]  # N,h
    chance = np.array([(min(p + tolerance, v - 1) - max(p - tolerance, 0) + 1) / v
                       for p, v in zip(peaks, valid_len)])
    offpeak = arg[np.arange(n), :, peaks] != peaks[:, None]
    segments = []
    for i in range(n):
        segments.append({
            "id": ids[i] if ids is not None else i,
            "peak_frame": int(peaks[i]),
            "hit_rate": per_seg_head[i].tolist(),
            "argmax": arg[i].tolist(),
        })
    return AlignmentReport(tolerance, float(per_seg_head.mean()), float(chance.mean()),
                           float(offpeak.mean()), per_seg_head.mean(axis=0).tolist(), segments, variant)


def alignment_analysis(mp: ModelParams, fs: FeatureSet, tolerance: int = 5,
                       batch: int = 256) -> AlignmentReport:
    _, maps = predict_logits(mp, fs, batch, capture=True)
    ids = [f"{fs.utt_ids[u]}@{o}" for u, o in zip(fs.utt, fs.offsets)]
    return alignment_from_maps(maps, fs.peak, tolerance, fs.valid_len, ids, mp.config.variant.value)


def merge_alignment(reports: Sequence[AlignmentReport]) -> AlignmentReport:
    """Pool per-segment results of several reports (segment-weighted)."""
    segs = [s for r in reports for s in r.segments]
    weights = np.array([len(r.segments) for r in reports], dtype=float)
    w = weights / weights.sum()
    return AlignmentReport(
        reports[0].tolerance,
        float(sum(wi * r.hit_rate for wi, r in zip(w, reports))),
        float(sum(wi * r.chance_rate for wi, r in zip(w, reports))),
        float(sum(wi * r.self_query_offpeak_rate for wi, r in zip(w, reports))),
        np.average(np.array([r.per_head_hit_rate for r in reports]), axis=0, weights=w).tolist(),
        segs, reports[0].variant)


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

VARIANTS = (Variant.BMHSA, Variant.MHSA_FA, Variant.MHSA_FACA)
ABLATION_COLUMNS = ["variant", "WA_mean", "WA_std", "UA_mean", "UA_std", "align_hit_rate"]


@dataclass
class AblationRow:
    variant: str
    WA: list[float]
    UA: list[float]
    hit_rate: list[float]

    def summary(self) -> dict:
        return {
            "variant": self.variant,
            "WA_mean": float(np.mean(self.WA)), "WA_std": float(np.std(self.WA)),
            "UA_mean": float(np.mean(self.UA)), "UA_std": float(np.std(self.UA)),
            "align_hit_rate": float(np.mean(self.hit_rate)) if self.hit_rate else float("nan"),
        }


def run_ablation(fs: FeatureSet, k: int, mcfg: ModelConfig, tcfg: TrainConfig,
                 seeds: Sequence[int], tolerance: int = 5, jobs: int = 1,
                 out_dir: Optional[PathLike] = None) -> tuple[list[AblationRow], dict]:
    """All three variants, identically seeded, over ``seeds``; returns rows and per-run details."""
    tasks = [(v, s) for s in seeds for v in VARIANTS]
    args = [(fs, k, dataclasses.replace(mcfg, variant=v, seed=s), dataclasses.replace(tcfg, seed=s),
             tolerance) for v, s in tasks]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_ablation_task, args))
    else:
        outcomes = [_ablation_task(a) for a in args]
    rows = {v: AblationRow(v.value, [], [], []) for v in VARIANTS}
    details = {}
    for (v, s), (report, align) in zip(tasks, outcomes):
        rows[v].WA.append(report.WA)
        rows[v].UA.append(report.UA)
        rows[v].hit_rate.append(align.hit_rate)
        details[f"{v.value}/seed{s}"] = {"report": report.to_dict(predictions=False),
                                        "alignment": align.to_dict(segments=False)}
    out = [rows[v] for v in VARIANTS]
    if out_dir is not None:
        write_ablation_csv(Path(out_dir) / "ablation.csv", out)
        (Path(out_dir) / "ablation_runs.json").write_text(json.dumps(details, indent=2, sort_keys=True))
    return out, details


def _ablation_task(args):
    fs, k, mcfg, tcfg, tolerance = args
    res = run_cv(fs, k, mcfg, tcfg, tolerance=tolerance)
    log.info("ablation %s seed %d: WA %.4f UA %.4f hit %.3f", mcfg.variant.value, tcfg.seed,
             res.report.WA, res.report.UA, res.alignment.hit_rate)
    return res.report, res.alignment


def write_ablation_csv(path: PathLike, rows: Sequence[AblationRow]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        out.writeheader()
        for r in rows:
            out.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.summary().items()})
