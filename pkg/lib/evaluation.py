"""
Evaluation of trained checkpoints: set-loss metrics, subset metrics for the
anomaly task, the S/T schedule ablation, multi-modality reports and the CSV
files they are written to.

Example i always uses prediction chains keyed (i, r), and examples are split
into fixed chunks that only depend on their ids, so results are identical for
any worker count.
"""
import csv
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field

from lib.baselines import BaselinePredictor, OutlierBaseline, split_anomaly
from lib.checkpoint import Checkpoint
from lib.config import SamplerConfig, resolve_sampler, worker_count
from lib.datasets import (
    DIGIT_SKELETONS,
    DIGITS,
    PAD_THRESHOLD,
    POLYGON_CENTER,
    STYLES,
    Example,
    TaskInfo,
    dataset_task,
    encode_inputs,
    sample_skeleton,
    skeleton_length,
    task_info,
)
from lib.errors import ContractError, UndefinedAngleError
from lib.langevin import ClampSpec, predict_values
from lib.set_losses import chamfer, hungarian, set_size_rmse, subset_metrics
from lib.set_networks import EnergyModel, PaddedSetBatch, energy_of

ANOMALY_PREDICTIONS = 10
CHUNK_SIZE = 16
ABLATION_HEADER = ["ratio", "S", "T", "mean_energy", "chamfer", "hungarian"]


class RunMetrics(BaseModel):
    """One evaluation row; loss columns are null where the task has no such metric."""

    dataset: str
    model_kind: str
    split: str = "all"
    examples: int = Field(..., ge=0)
    chamfer: Optional[float] = Field(None, ge=0)
    chamfer_std: Optional[float] = Field(None, ge=0)
    hungarian: Optional[float] = Field(None, ge=0)
    hungarian_std: Optional[float] = Field(None, ge=0)
    set_size_rmse: Optional[float] = Field(None, ge=0)
    mean_energy: Optional[float] = None
    precision: Optional[float] = Field(None, ge=0, le=1)
    recall: Optional[float] = Field(None, ge=0, le=1)
    f1: Optional[float] = Field(None, ge=0, le=1)
    seed: int = 0


METRICS_HEADER = list(RunMetrics.model_fields)


# -- geometry -------------------------------------------------------------------

def estimate_rotation(vertices, n: int) -> float:
    """Rotation of a regular n-gon in [0, 2π/n), independent of vertex order.

    Uses the circular mean of n·atan2(v) so every vertex votes for the same
    angle modulo 2π.
    """
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 2)
    if vertices.shape[0] < 3:
        raise ContractError(f"need at least 3 vertices, got {vertices.shape[0]}")
    rel = vertices - np.asarray(POLYGON_CENTER)
    if np.all(np.linalg.norm(rel, axis=1) < PAD_THRESHOLD):
        raise UndefinedAngleError("all vertices lie at the polygon center")
    resultant = np.exp(1j * n * np.arctan2(rel[:, 1], rel[:, 0])).mean()
    if abs(resultant) < 1e-12:
        raise UndefinedAngleError("vertex angles cancel; no dominant rotation")
    period = 2.0 * np.pi / n
    est = float(np.mod(np.angle(resultant), 2.0 * np.pi) / n)
    # np.angle can return -0.0 or -tiny, which the mod maps onto 2π itself
    return est if est < period else 0.0


def circular_std(angles: Sequence[float], n: int = 1) -> float:
    """sqrt(-2 ln R) / n for angles with period 2π/n."""
    if len(angles) == 0:
        raise ContractError("circular std of no angles")
    r = min(1.0, abs(np.exp(1j * n * np.asarray(angles, dtype=np.float64)).mean()))
    if r == 0.0:
        return float("inf")
    return float(np.sqrt(-2.0 * np.log(r)) / n)


def skeleton_points(digit: str, style: str, count: int = 200) -> np.ndarray:
    segments = DIGIT_SKELETONS[digit][style]
    return sample_skeleton(segments, np.linspace(0.0, skeleton_length(segments), count))


def classify_digit_style(points, digit: str) -> str:
    """Style whose densely sampled skeleton is nearest in symmetric Chamfer distance."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    scores = [chamfer(points, skeleton_points(digit, style)) for style in STYLES]
    return STYLES[int(np.argmin(scores))]


# -- predictions ----------------------------------------------------------------

def eval_sampler(sampler: Optional[SamplerConfig], kind: str, seed: int) -> SamplerConfig:
    sampler = resolve_sampler(sampler or SamplerConfig(), kind)
    return sampler.model_copy(update={"seed": int(seed)})


def _clamp(info: TaskInfo, examples: Sequence[Example], repeats: int) -> Optional[ClampSpec]:
    mask = info.free_mask()
    if mask is None:
        return None
    values = PaddedSetBatch.from_examples(examples, info).values
    return ClampSpec(np.repeat(values, repeats, axis=0), mask)


def raw_predictions(model, info: TaskInfo, examples: Sequence[Example], ids: Sequence[int],
                    sampler: SamplerConfig, repeats: int = 1) -> np.ndarray:
    """Raw [len(ids) * repeats, M, d] outputs, example-major; chains keyed (id, r)."""
    x = np.repeat(encode_inputs(examples, info), repeats, axis=0)
    if isinstance(model, EnergyModel):
        keys = [(int(i), r) for i in ids for r in range(repeats)]
        return predict_values(model, x, sampler, shape=(info.max_size, info.element_dim),
                              chain_keys=keys, clamp=_clamp(info, examples, repeats))
    if isinstance(model, BaselinePredictor):
        return model.predict_values(x)
    raise ContractError(f"{type(model).__name__} does not predict sets")


def set_metrics(example: Example, info: TaskInfo, values: np.ndarray) -> Tuple[float, float, int]:
    """(chamfer, hungarian, predicted size) for one raw prediction."""
    pred = PaddedSetBatch.from_prediction(values[None])
    target = PaddedSetBatch.from_examples([example], info)
    hung, _ = hungarian(pred.values[0], target.values[0])
    kept = pred.sets()[0]
    cham = chamfer(kept, example.target) if len(kept) else chamfer(pred.values[0], target.values[0])
    return cham, hung, int(pred.cardinality[0])


def anomaly_subsets(model, info: TaskInfo, examples: Sequence[Example], ids: Sequence[int],
                    sampler: SamplerConfig, repeats: int = ANOMALY_PREDICTIONS) -> Tuple[List[List[List[int]]], np.ndarray]:
    """Predicted outlier subsets (``repeats`` per example) and the raw values they came from.

    The indicator coordinate is rounded by sign: o > 0 marks an outlier.
    """
    if isinstance(model, OutlierBaseline):
        features, _ = split_anomaly(PaddedSetBatch.from_examples(examples, info).values)
        subsets = model.predict_outliers(features)
        return [[s] * repeats for s in subsets], np.zeros((0,))
    values = raw_predictions(model, info, examples, ids, sampler, repeats)
    flat = [np.flatnonzero(v[:, -1] > 0).tolist() for v in values]
    return [flat[b * repeats:(b + 1) * repeats] for b in range(len(examples))], values


def _chunks(count: int, size: int = CHUNK_SIZE) -> List[np.ndarray]:
    return [np.arange(s, min(s + size, count)) for s in range(0, count, size)]


def _map_chunks(fn, count: int) -> List[Any]:
    chunks = _chunks(count)
    workers = min(worker_count(), max(1, len(chunks)))
    logger.info("evaluating {} examples in {} chunks with {} workers", count, len(chunks), workers)
    if workers == 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))


def evaluate(ckpt: Checkpoint, examples: Sequence[Example], *, seed: int = 0,
             sampler: Optional[SamplerConfig] = None, split: str = "all", dataset: str = "") -> RunMetrics:
    """Metrics of ``ckpt`` over ``examples``; bit-reproducible for a fixed seed."""
    if not examples:
        raise ContractError("evaluation set is empty")
    task = dataset_task(examples)
    info = task_info(task)
    if split == "ambiguous":
        if task != "anomaly":
            raise ContractError("the ambiguous split exists only for the anomaly task")
        examples = [e for e in examples if e.meta.get("ambiguous")]
        if not examples:
            raise ContractError("no ambiguous examples in the evaluation set")
    elif split != "all":
        raise ContractError(f"unknown split {split!r}")
    model = ckpt.model
    sampler = eval_sampler(sampler, ckpt.kind if ckpt.is_energy else "DeepSets", seed)
    base = {"dataset": dataset or task, "model_kind": ckpt.kind, "split": split,
            "examples": len(examples), "seed": int(seed)}

    if task == "anomaly":
        def run(ids):
            chunk = [examples[i] for i in ids]
            subsets, values = anomaly_subsets(model, info, chunk, ids, sampler)
            scores = [subset_metrics(s, e.meta["valid"]) for s, e in zip(subsets, chunk)]
            energies = (energy_of(model, np.repeat(encode_inputs(chunk, info), ANOMALY_PREDICTIONS, axis=0), values)
                        if isinstance(model, EnergyModel) else np.zeros(0))
            return scores, energies

        parts = _map_chunks(run, len(examples))
        scores = np.array([s for p in parts for s in p[0]])
        energies = np.concatenate([p[1] for p in parts])
        metrics = RunMetrics(**base, precision=float(scores[:, 0].mean()), recall=float(scores[:, 1].mean()),
                             f1=float(scores[:, 2].mean()),
                             mean_energy=float(energies.mean()) if energies.size else None)
    else:
        def run(ids):
            chunk = [examples[i] for i in ids]
            values = raw_predictions(model, info, chunk, ids, sampler)
            rows = [set_metrics(e, info, v) for e, v in zip(chunk, values)]
            energies = (energy_of(model, encode_inputs(chunk, info), values)
                        if isinstance(model, EnergyModel) else np.zeros(0))
            return rows, energies

        parts = _map_chunks(run, len(examples))
        rows = np.array([r for p in parts for r in p[0]], dtype=np.float64)
        energies = np.concatenate([p[1] for p in parts])
        metrics = RunMetrics(**base, chamfer=float(rows[:, 0].mean()), chamfer_std=float(rows[:, 0].std()),
                             hungarian=float(rows[:, 1].mean()), hungarian_std=float(rows[:, 1].std()),
                             set_size_rmse=set_size_rmse([len(e.target) for e in examples], rows[:, 2].astype(int)),
                             mean_energy=float(energies.mean()) if energies.size else None)
    logger.info("{} on {} ({}): {}", ckpt.kind, metrics.dataset, split,
                {k: v for k, v in metrics.model_dump().items() if isinstance(v, float)})
    return metrics


def ablate_st(ckpt: Checkpoint, examples: Sequence[Example], ratios: Sequence[float], *,
              sampler: Optional[SamplerConfig] = None, seeds: Sequence[int] = (0,)) -> List[Dict[str, float]]:
    """Mean energy and set losses per S/T ratio, averaged over ``seeds``."""
    if not ckpt.is_energy:
        raise ContractError("the S/T ablation needs an energy checkpoint")
    if dataset_task(examples) == "anomaly":
        raise ContractError("the S/T ablation reports set losses; use polygons or digits")
    base = resolve_sampler(sampler or SamplerConfig(), ckpt.kind)
    rows = []
    for ratio in ratios:
        if not 0.0 <= ratio <= 1.0:
            raise ContractError(f"S/T ratio {ratio} outside [0, 1]")
        schedule = base.with_ratio(ratio)
        runs = [evaluate(ckpt, examples, seed=s, sampler=schedule) for s in seeds]
        rows.append({
            "ratio": float(ratio), "S": schedule.S, "T": schedule.T,
            "mean_energy": float(np.mean([r.mean_energy for r in runs])),
            "chamfer": float(np.mean([r.chamfer for r in runs])),
            "hungarian": float(np.mean([r.hungarian for r in runs])),
        })
        logger.info("S/T {:.2f}: energy {:.6f}, hungarian {:.6f}", ratio, rows[-1]["mean_energy"],
                    rows[-1]["hungarian"])
    return rows


def multimodal_report(model: EnergyModel, task: str, *, n: int = 5, k: int = 16, seed: int = 0,
                      sampler: Optional[SamplerConfig] = None) -> Dict[str, Any]:
    """K seeded predictions per input and how spread out they are.

    Polygons: rotation estimates of one n-gon input and their circular std.
    Digits: style histogram per digit under the nearest-skeleton rule.
    """
    info = task_info(task)
    sampler = eval_sampler(sampler, model.kind, seed)
    inputs = [n] if task == "polygons" else list(DIGITS) if task == "digits" else None
    if inputs is None:
        raise ContractError("multi-modality reports cover polygons and digits")
    if task == "polygons" and not 3 <= n <= info.max_size:
        raise ContractError(f"polygon input {n} outside 3..{info.max_size}")
    report: Dict[str, Any] = {"task": task, "k": k, "seed": int(seed), "inputs": {}}
    for index, value in enumerate(inputs):
        x = np.repeat(info.encode(value)[None], k, axis=0)
        values = predict_values(model, x, sampler, shape=(info.max_size, info.element_dim),
                                chain_keys=[(index, r) for r in range(k)])
        sets = PaddedSetBatch.from_prediction(values).sets()
        entry: Dict[str, Any] = {"sets": sets}
        if task == "polygons":
            angles = []
            for s in sets:
                try:
                    angles.append(estimate_rotation(s, n))
                except (UndefinedAngleError, ContractError):
                    continue
            entry.update(angles=angles, undefined=k - len(angles),
                         circular_std=circular_std(angles, n) if angles else None)
        else:
            styles = [classify_digit_style(s, value) if len(s) else None for s in sets]
            entry["styles"] = {style: styles.count(style) for style in STYLES}
            entry["empty"] = styles.count(None)
        report["inputs"][str(value)] = entry
    return report


# -- CSV ------------------------------------------------------------------------

def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_rows(path: Union[str, Path], header: Sequence[str], rows: Sequence[Dict[str, Any]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(header), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(row.get(k)) for k in header})


def read_rows(path: Union[str, Path]) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_metrics(path: Union[str, Path], metrics: Sequence[RunMetrics]) -> None:
    write_rows(path, METRICS_HEADER, [m.model_dump() for m in metrics])


def read_metrics(path: Union[str, Path]) -> List[RunMetrics]:
    """Parse a metrics CSV written by ``write_metrics``."""
    return [RunMetrics.model_validate({k: (v if v != "" else None) for k, v in row.items()})
            for row in read_rows(path)]
