"""Streaming benchmark protocol: seeded stage plans, the predict-then-adapt
driving loop, per-class GZSL metrics, multi-seed aggregation, evolution
curves and the ablation suite.
"""
from __future__ import annotations

import csv
import io
import json
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import evolver
from .data import DatasetBundle
from .evolver import AblationFlags, EvolverConfig, init_state
from .model import CompatibilityModel, clone_model

# permutation = stable argsort of Philox4x64-10 raw draws keyed by the seed
PRNG_ID = "philox4x64-10/argsort-v1"
REPORT_SCHEMA_VERSION = 1
METRICS = ("acc_unseen", "acc_seen", "harmonic")


@dataclass
class StreamPlan:
    seed: int
    stage_size: int
    order: np.ndarray
    stages: list

    @property
    def prng(self) -> str:
        return PRNG_ID


def _philox_keys(seed: int, n: int) -> np.ndarray:
    bitgen = np.random.Philox(key=int(seed))
    return bitgen.random_raw(n)


def make_stream(test_set, stage_size: int, seed: int) -> StreamPlan:
    """Shuffle the test indices once and cut them into consecutive stages.

    ``test_set`` is either an index array or a sample count. The last stage
    holds the remainder and may be short.
    """
    if stage_size < 1:
        raise ValueError("stage_size must be >= 1")
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    idx = np.arange(test_set) if np.ndim(test_set) == 0 else np.asarray(test_set, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("test set is empty")
    order = idx[np.argsort(_philox_keys(seed, idx.size), kind="stable")]
    stages = [order[i:i + stage_size] for i in range(0, order.size, stage_size)]
    return StreamPlan(int(seed), int(stage_size), order, stages)


def harmonic_mean(acc_seen: float, acc_unseen: float) -> float:
    total = acc_seen + acc_unseen
    return 2.0 * acc_seen * acc_unseen / total if total > 0 else 0.0


@dataclass
class EvalReport:
    per_class_hits: np.ndarray
    per_class_totals: np.ndarray
    acc_unseen: float
    acc_seen: float
    harmonic: float

    def metrics(self) -> dict:
        return {k: getattr(self, k) for k in METRICS}


def _class_average(hits, totals, classes) -> float:
    classes = np.asarray(classes, dtype=np.int64)
    classes = classes[totals[classes] > 0]
    # classes without test samples drop out of the average
    if classes.size == 0:
        return 0.0
    return float(np.mean(hits[classes] / totals[classes]))


def report_from_counts(hits, totals, seen_classes, unseen_classes) -> EvalReport:
    hits = np.asarray(hits, dtype=np.int64)
    totals = np.asarray(totals, dtype=np.int64)
    acc_s = _class_average(hits, totals, seen_classes)
    acc_u = _class_average(hits, totals, unseen_classes)
    return EvalReport(hits, totals, acc_u, acc_s, harmonic_mean(acc_s, acc_u))


def evaluate_predictions(y_true, y_pred, seen_classes, unseen_classes, n_classes) -> EvalReport:
    """Per-class top-1 accuracies over seen and unseen classes, and their H."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    totals = np.bincount(y_true, minlength=n_classes)
    hits = np.bincount(y_true[y_true == y_pred], minlength=n_classes)
    return report_from_counts(hits, totals, seen_classes, unseen_classes)


def evaluate_model(model: CompatibilityModel, features, labels, seen_classes, unseen_classes) -> EvalReport:
    pred = np.argmax(np.asarray(features) @ model.W.T, axis=1)
    return evaluate_predictions(labels, pred, seen_classes, unseen_classes, model.class_count)


@dataclass
class StageRecord:
    t: int
    n: int
    seen_hits: int
    seen_count: int
    unseen_hits: int
    unseen_count: int
    ce_sel: float
    kl: float
    total: float
    mask_fill: float


@dataclass
class EvolutionRun:
    report: EvalReport
    state: evolver.EvolverState
    log: list
    snapshots: dict = field(default_factory=dict)
    predictions: np.ndarray | None = None


def run_evolution(base_model: CompatibilityModel, plan: StreamPlan, features, labels,
                  seen_classes, unseen_classes, config: EvolverConfig = EvolverConfig(),
                  flags: AblationFlags = AblationFlags(), erm: bool = False,
                  snapshot_stride: int | None = None) -> EvolutionRun:
    """Drive one stream: score each stage's predictions, then let the model adapt.

    ``labels`` are read here for scoring only; the evolver receives feature
    rows and nothing else. Snapshots (when ``snapshot_stride`` is set) are
    frozen weight copies keyed by the number of completed stages.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    seen_mask = np.zeros(base_model.class_count, dtype=bool)
    seen_mask[np.asarray(seen_classes, dtype=np.int64)] = True

    state = init_state(base_model, config, flags)
    step = evolver.erm_step if erm else evolver.evolve_step
    n_classes = base_model.class_count
    hits = np.zeros(n_classes, dtype=np.int64)
    totals = np.zeros(n_classes, dtype=np.int64)
    predictions = np.full(labels.shape[0], -1, dtype=np.int64)
    log, snapshots = [], {}
    if snapshot_stride:
        snapshots[0] = state.current.W.copy()

    for t, idx in enumerate(plan.stages, start=1):
        batch = features[idx]
        outcome, state = step(state, batch)
        pred = outcome.predictions
        truth = labels[idx]
        predictions[idx] = pred
        correct = pred == truth
        totals += np.bincount(truth, minlength=n_classes)
        hits += np.bincount(truth[correct], minlength=n_classes)
        is_seen = seen_mask[truth]
        log.append(StageRecord(
            t=t, n=int(idx.size),
            seen_hits=int(correct[is_seen].sum()), seen_count=int(is_seen.sum()),
            unseen_hits=int(correct[~is_seen].sum()), unseen_count=int((~is_seen).sum()),
            ce_sel=outcome.ce_sel, kl=outcome.kl, total=outcome.total,
            mask_fill=outcome.mask_fill,
        ))
        if snapshot_stride and (t % snapshot_stride == 0 or t == len(plan.stages)):
            snapshots[t] = state.current.W.copy()

    report = report_from_counts(hits, totals, seen_classes, unseen_classes)
    return EvolutionRun(report, state, log, snapshots, predictions)


@dataclass
class ProtocolReport:
    seeds: list
    per_seed: list
    mean: dict
    std: dict
    runs: list = field(default_factory=list)

    def row(self) -> dict:
        return {"mean": self.mean, "std": self.std}


def aggregate(per_seed: list) -> tuple[dict, dict]:
    """Mean and sample standard deviation (n-1) of each metric; std is 0 for one run."""
    mean, std = {}, {}
    for k in METRICS:
        # exact rational arithmetic: identical runs give std 0.0, not rounding noise
        vals = [float(m[k]) for m in per_seed]
        mean[k] = float(statistics.mean(vals))
        std[k] = float(statistics.stdev(vals)) if len(vals) > 1 else 0.0
    return mean, std


def _one_seed(args):
    base_model, bundle, stage_size, seed, config, flags, erm, stride = args
    plan = make_stream(bundle.test_indices, stage_size, seed)
    return run_evolution(clone_model(base_model), plan, bundle.features, bundle.labels,
                         bundle.seen_classes, bundle.unseen_classes, config, flags, erm, stride)


def run_protocol(bundle: DatasetBundle, base_model: CompatibilityModel, config: EvolverConfig = EvolverConfig(),
                 flags: AblationFlags = AblationFlags(), seeds=(0, 1, 2, 3, 4), stage_size: int = 100,
                 erm: bool = False, jobs: int = 1, snapshot_stride: int | None = None) -> ProtocolReport:
    """Repeat the stream evaluation once per seed from a fresh copy of the base model."""
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("at least one seed is required")
    tasks = [(base_model, bundle, stage_size, s, config, flags, erm, snapshot_stride) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_one_seed, tasks))
    else:
        runs = [_one_seed(t) for t in tasks]
    per_seed = [r.report.metrics() for r in runs]
    mean, std = aggregate(per_seed)
    return ProtocolReport(seeds, per_seed, mean, std, runs)


@dataclass
class CurvePoint:
    time_step: int
    acc_unseen: float
    acc_seen: float
    harmonic: float
    # evaluated on the whole labeled test set: explanatory only
    diagnostic: bool = True


def evolution_curve(snapshots: dict, features, labels, seen_classes, unseen_classes) -> list:
    points = []
    for t in sorted(snapshots):
        W = snapshots[t].W if isinstance(snapshots[t], CompatibilityModel) else snapshots[t]
        rep = evaluate_model(CompatibilityModel(np.array(W)), features, labels, seen_classes, unseen_classes)
        points.append(CurvePoint(t, rep.acc_unseen, rep.acc_seen, rep.harmonic))
    return points


ABLATIONS = {
    "full": AblationFlags(),
    "w/o momentum model": AblationFlags(disable_momentum_model=True),
    "w/o class selection": AblationFlags(disable_class_selection=True),
    "w/o data selection": AblationFlags(disable_data_selection=True),
    "adaptive->fixed threshold": AblationFlags(fixed_threshold=True),
}


def run_ablation_suite(bundle: DatasetBundle, base_model: CompatibilityModel,
                       config: EvolverConfig = EvolverConfig(), seeds=(0, 1, 2, 3, 4),
                       stage_size: int = 10, include_erm: bool = False, jobs: int = 1) -> dict:
    """Full model plus the four ablations, all over the same seeded stream plans."""
    table = {name: run_protocol(bundle, base_model, config, flags, seeds, stage_size, jobs=jobs)
             for name, flags in ABLATIONS.items()}
    if include_erm:
        table["erm"] = run_protocol(bundle, base_model, config, AblationFlags.erm(), seeds,
                                    stage_size, erm=True, jobs=jobs)
    return table


def format_table(rows: dict, scale: float = 100.0) -> str:
    """Plain-text mean±std table; column order A^u, A^s, H."""
    width = max([len("method")] + [len(n) for n in rows])
    lines = [f"{'method':<{width}}  {'A^u':>12}  {'A^s':>12}  {'H':>12}"]
    for name, rep in rows.items():
        cells = [f"{scale * rep.mean[k]:6.2f}±{scale * rep.std[k]:<5.2f}" for k in METRICS]
        lines.append(f"{name:<{width}}  " + "  ".join(f"{c:>12}" for c in cells))
    return "\n".join(lines)


def report_document(result: ProtocolReport, stage_size: int, config: EvolverConfig,
                    flags: AblationFlags, erm: bool = False, extra: dict | None = None) -> dict:
    """JSON-serializable report: metrics, config echo, seeds and per-stage logs."""
    doc = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "prng": PRNG_ID,
        "seeds": result.seeds,
        "stage_size": stage_size,
        "erm": erm,
        "config": asdict(config),
        "flags": asdict(flags),
        "metrics": {"mean": result.mean, "std": result.std},
        "per_seed": [dict(seed=s, **m) for s, m in zip(result.seeds, result.per_seed)],
        "stages": {str(s): [asdict(r) for r in run.log] for s, run in zip(result.seeds, result.runs)},
    }
    if extra:
        doc.update(extra)
    return doc


def dumps_report(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


STAGE_COLUMNS = ["seed"] + [f.name for f in StageRecord.__dataclass_fields__.values()]


def stage_csv(result: ProtocolReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(STAGE_COLUMNS)
    for seed, run in zip(result.seeds, result.runs):
        for rec in run.log:
            writer.writerow([seed] + [getattr(rec, c) for c in STAGE_COLUMNS[1:]])
    return buf.getvalue()


def curve_csv(curves: dict) -> str:
    """``curves`` maps seed -> list of CurvePoint."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["seed", "time_step", "acc_unseen", "acc_seen", "harmonic", "diagnostic"])
    for seed, points in curves.items():
        for p in points:
            writer.writerow([seed, p.time_step, p.acc_unseen, p.acc_seen, p.harmonic, int(p.diagnostic)])
    return buf.getvalue()
