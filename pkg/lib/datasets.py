"""
Seedable generators for the Polygons, Digits and subset-anomaly tasks,
the zero-padding scheme, and the JSON-lines dataset format.

Every generator is a pure function of its parameters and the supplied
``numpy.random.Generator``; ``generate`` derives one stream per example id so
datasets can be produced in any order or in parallel.
"""
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import orjson
from loguru import logger

from lib.config import chain_rng
from lib.errors import ContractError

PAD_THRESHOLD = 0.05

POLYGON_RADIUS = 0.5
POLYGON_CENTER = (0.0, 0.0)

DIGIT_DENSITY = 30.0
DIGIT_JITTER = 0.01
DIGIT_MIN_POINTS = 12

_ONE_A = [((0.5, 0.1), (0.5, 0.9))]
_SEVEN_A = [((0.2, 0.9), (0.8, 0.9)), ((0.8, 0.9), (0.35, 0.1))]
DIGIT_SKELETONS: Dict[str, Dict[str, List[Tuple[Tuple[float, float], Tuple[float, float]]]]] = {
    "one": {
        "A": _ONE_A,
        "B": _ONE_A + [((0.35, 0.75), (0.5, 0.9)), ((0.35, 0.1), (0.65, 0.1))],
    },
    "seven": {
        "A": _SEVEN_A,
        "B": _SEVEN_A + [((0.35, 0.5), (0.65, 0.5))],
    },
}
DIGITS = ("one", "seven")
STYLES = ("A", "B")

ANOMALY_ATTRIBUTES = (
    "bald", "bangs", "blond_hair", "double_chin", "eyeglasses", "goatee",
    "gray_hair", "male", "no_beard", "wearing_hat", "wearing_necktie",
)
ANOMALY_SET_SIZE = 5
ANOMALY_FLIP_PROB = 0.1
ANOMALY_FEATURE_NOISE = 0.05
ANOMALY_BIT_PROB = 0.3
MIN_INLIERS = 3


@dataclass(frozen=True)
class TaskInfo:
    name: str
    element_dim: int
    max_size: int
    x_dim: int
    viewport: Optional[Tuple[float, float]]
    free_dims: Optional[Tuple[int, ...]] = None

    def encode(self, x: Any) -> np.ndarray:
        """One-hot encoding of the discrete input."""
        vec = np.zeros(self.x_dim)
        if self.name == "polygons":
            if not 0 <= int(x) < self.x_dim:
                raise ContractError(f"polygon size {x!r} outside 0..{self.x_dim - 1}")
            vec[int(x)] = 1.0
        elif self.name == "digits":
            if x not in DIGITS:
                raise ContractError(f"unknown digit {x!r}; expected one of {list(DIGITS)}")
            vec[DIGITS.index(x)] = 1.0
        else:
            vec[0] = 1.0
        return vec

    def free_mask(self) -> Optional[np.ndarray]:
        """Coordinates the sampler may move; None means all of them."""
        if self.free_dims is None:
            return None
        mask = np.zeros(self.element_dim, dtype=bool)
        mask[list(self.free_dims)] = True
        return mask


TASKS: Dict[str, TaskInfo] = {
    "polygons": TaskInfo("polygons", 2, 8, 9, (-0.75, 0.75)),
    "digits": TaskInfo("digits", 2, 60, len(DIGITS), (0.0, 1.0)),
    "anomaly": TaskInfo("anomaly", len(ANOMALY_ATTRIBUTES) + 1, ANOMALY_SET_SIZE, 1, None,
                        free_dims=(len(ANOMALY_ATTRIBUTES),)),
}


def task_info(name: str) -> TaskInfo:
    try:
        return TASKS[name]
    except KeyError:
        raise ContractError(f"unknown task {name!r}; expected one of {sorted(TASKS)}") from None


@dataclass(eq=False)
class Example:
    """One (x, Y) pair; ``target`` holds the set rows, unpadded."""

    task: str
    input: Any
    target: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Example):
            return NotImplemented
        return (self.task == other.task and self.input == other.input
                and self.target.shape == other.target.shape
                and np.array_equal(self.target, other.target) and self.meta == other.meta)

    def to_record(self) -> Dict[str, Any]:
        return {"x": self.input, "set": self.target, "meta": {**self.meta, "task": self.task}}

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "Example":
        meta = dict(record.get("meta") or {})
        task = meta.pop("task", None)
        if task is None:
            raise ContractError("dataset record has no meta.task")
        width = task_info(task).element_dim
        target = np.asarray(record["set"], dtype=np.float64).reshape(-1, width)
        return cls(task, record.get("x"), target, meta)


# -- Polygons -----------------------------------------------------------------

def polygon_vertices(n: int, angle: float) -> np.ndarray:
    k = np.arange(n)
    theta = angle + 2.0 * np.pi * k / n
    return np.stack([POLYGON_CENTER[0] + POLYGON_RADIUS * np.cos(theta),
                     POLYGON_CENTER[1] + POLYGON_RADIUS * np.sin(theta)], axis=1)


def gen_polygon(n: int, rng: np.random.Generator, *, max_size: int = TASKS["polygons"].max_size,
                angle: Optional[float] = None) -> Example:
    """Vertices of a regular n-gon with radius 0.5 around the origin at a random rotation."""
    if not 3 <= n <= max_size:
        raise ContractError(f"polygon size {n} outside 3..{max_size}")
    phi = float(rng.uniform(0.0, 2.0 * np.pi)) if angle is None else float(angle)
    return Example("polygons", int(n), polygon_vertices(n, phi), {"angle": phi})


# -- Digits -------------------------------------------------------------------

def skeleton_length(segments) -> float:
    return float(sum(np.hypot(b[0] - a[0], b[1] - a[1]) for a, b in segments))


def digit_point_count(digit: str, style: str, density: float = DIGIT_DENSITY) -> int:
    length = skeleton_length(DIGIT_SKELETONS[digit][style])
    return max(DIGIT_MIN_POINTS, int(np.floor(density * length + 0.5)))


def sample_skeleton(segments, positions: np.ndarray) -> np.ndarray:
    """Map arc-length ``positions`` along the concatenated segments to points."""
    starts = np.array([a for a, _ in segments], dtype=np.float64)
    ends = np.array([b for _, b in segments], dtype=np.float64)
    lengths = np.linalg.norm(ends - starts, axis=1)
    offsets = np.concatenate([[0.0], np.cumsum(lengths)[:-1]])
    seg = np.clip(np.searchsorted(offsets, positions, side="right") - 1, 0, len(segments) - 1)
    frac = np.clip((positions - offsets[seg]) / lengths[seg], 0.0, 1.0)
    return starts[seg] + frac[:, None] * (ends[seg] - starts[seg])


def gen_digit(digit: str, rng: np.random.Generator, *, style: Optional[str] = None,
              density: float = DIGIT_DENSITY, jitter: float = DIGIT_JITTER) -> Example:
    """Point cloud along one of the two writing-style skeletons of ``digit``."""
    if digit not in DIGIT_SKELETONS:
        raise ContractError(f"unknown digit {digit!r}")
    style = STYLES[int(rng.integers(len(STYLES)))] if style is None else style
    segments = DIGIT_SKELETONS[digit][style]
    count = digit_point_count(digit, style, density)
    positions = rng.uniform(0.0, skeleton_length(segments), size=count)
    points = sample_skeleton(segments, positions)
    noise = rng.normal(0.0, jitter, size=points.shape)
    norms = np.linalg.norm(noise, axis=1, keepdims=True)
    cap = 4.0 * jitter
    noise = np.where(norms > cap, noise * (cap / np.maximum(norms, 1e-300)), noise)
    points = np.clip(points + noise, 0.0, 1.0)
    return Example("digits", digit, points, {"style": style})


# -- Subset anomaly -----------------------------------------------------------

def valid_outlier_subsets(attributes: np.ndarray, min_inliers: int = MIN_INLIERS) -> List[List[int]]:
    """Outlier subsets whose complement shares an attribute pair no outlier holds jointly."""
    attributes = np.asarray(attributes, dtype=bool)
    size, n_attr = attributes.shape
    valid = []
    for mask in range(1 << size):
        outliers = [i for i in range(size) if mask >> i & 1]
        inliers = [i for i in range(size) if not mask >> i & 1]
        if len(inliers) < min_inliers:
            continue
        shared = np.flatnonzero(attributes[inliers].all(axis=0))
        out_attrs = attributes[outliers]
        for p, q in combinations(shared, 2):
            if not np.any(out_attrs[:, p] & out_attrs[:, q]):
                valid.append(outliers)
                break
    return sorted(valid, key=lambda s: (len(s), s))


def gen_anomaly_set(rng: np.random.Generator) -> Example:
    """Five attribute vectors, 3-5 sharing a random attribute pair; the rest are outliers."""
    n_attr = len(ANOMALY_ATTRIBUTES)
    a, b = sorted(int(i) for i in rng.choice(n_attr, size=2, replace=False))
    n_in = int(rng.integers(MIN_INLIERS, ANOMALY_SET_SIZE + 1))
    inliers = rng.random((n_in, n_attr)) < ANOMALY_BIT_PROB
    inliers[:, [a, b]] = True
    outliers = []
    while len(outliers) < ANOMALY_SET_SIZE - n_in:
        row = rng.random(n_attr) < ANOMALY_BIT_PROB
        if not (row[a] and row[b]):
            outliers.append(row)
    attrs = np.vstack([inliers] + ([np.array(outliers)] if outliers else []))
    is_outlier = np.array([False] * n_in + [True] * len(outliers))
    order = rng.permutation(ANOMALY_SET_SIZE)
    attrs, is_outlier = attrs[order], is_outlier[order]

    flips = rng.random(attrs.shape) < ANOMALY_FLIP_PROB
    features = (attrs ^ flips).astype(np.float64) + rng.normal(0.0, ANOMALY_FEATURE_NOISE, attrs.shape)
    indicator = np.where(is_outlier, 1.0, -1.0)
    target = np.concatenate([features, indicator[:, None]], axis=1)

    valid = valid_outlier_subsets(attrs)
    meta = {
        "pair": [a, b],
        "attributes": attrs.astype(int).tolist(),
        "outliers": np.flatnonzero(is_outlier).tolist(),
        "valid": valid,
        "ambiguous": len(valid) >= 2,
    }
    return Example("anomaly", None, target, meta)


# -- padding ------------------------------------------------------------------

def pad(target: np.ndarray, max_size: int) -> np.ndarray:
    """Append zero rows up to ``max_size``."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape[0] > max_size:
        raise ContractError(f"set of {target.shape[0]} elements does not fit max size {max_size}")
    out = np.zeros((max_size, target.shape[1]))
    out[: target.shape[0]] = target
    return out


def unpad(rows: np.ndarray, threshold: float = PAD_THRESHOLD) -> np.ndarray:
    """Drop rows whose norm is below ``threshold``; a norm equal to it is kept."""
    rows = np.asarray(rows, dtype=np.float64)
    keep = np.linalg.norm(rows, axis=-1) >= threshold
    return rows[keep]


# -- generation and files -------------------------------------------------------

def parse_sizes(spec: str) -> List[int]:
    """``"3..6"`` or ``"3,5,8"`` to a list of polygon sizes."""
    try:
        if ".." in spec:
            lo, hi = spec.split("..", 1)
            return list(range(int(lo), int(hi) + 1))
        return [int(s) for s in spec.split(",") if s.strip()]
    except ValueError:
        raise ContractError(f"cannot parse sizes {spec!r}") from None


def generate(task: str, count: int, seed: int, *, sizes: Optional[Sequence[int]] = None,
             digits: Sequence[str] = DIGITS, start: int = 0) -> List[Example]:
    """``count`` examples; example i draws from its own stream ``(seed, start + i)``."""
    info = task_info(task)
    sizes = list(sizes) if sizes else list(range(3, info.max_size + 1))
    examples = []
    for i in range(start, start + count):
        rng = chain_rng(seed, i)
        if task == "polygons":
            n = sizes[int(rng.integers(len(sizes)))]
            examples.append(gen_polygon(n, rng, max_size=info.max_size))
        elif task == "digits":
            examples.append(gen_digit(digits[int(rng.integers(len(digits)))], rng))
        else:
            examples.append(gen_anomaly_set(rng))
    logger.debug("generated {} {} examples (seed {})", count, task, seed)
    return examples


def write_dataset(path: Union[str, Path], examples: Iterable[Example]) -> int:
    count = 0
    with open(path, "wb") as fh:
        for example in examples:
            fh.write(orjson.dumps(example.to_record(), option=orjson.OPT_SERIALIZE_NUMPY))
            fh.write(b"\n")
            count += 1
    return count


def read_dataset(path: Union[str, Path]) -> List[Example]:
    examples = []
    with open(path, "rb") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                examples.append(Example.from_record(orjson.loads(line)))
            except (orjson.JSONDecodeError, KeyError, ValueError) as exc:
                raise ContractError(f"{path}:{lineno}: bad dataset record ({exc})") from exc
    return examples


def dataset_task(examples: Sequence[Example]) -> str:
    tasks = {e.task for e in examples}
    if len(tasks) != 1:
        raise ContractError(f"dataset must hold exactly one task, found {sorted(tasks)}")
    return tasks.pop()


def encode_inputs(examples: Sequence[Example], info: TaskInfo) -> np.ndarray:
    return np.stack([info.encode(e.input) for e in examples]) if examples else np.zeros((0, info.x_dim))
