"""
Permutation-invariant energy networks over zero-padded set batches.

``EnergyModel`` holds the parameters θ and the architecture descriptor for
either the DeepSets energy E_DS(x, Y) = f(pool_y g([h(x); y])) or the set
encoder energy E_SE(x, Y) = Σ Huber(g(Y) − h(x)). Pooling sorts every latent
channel first (stable on ties), so all three pooling choices are exactly
permutation invariant.
"""
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from lib.config import ModelDims
from lib.datasets import PAD_THRESHOLD, Example, TaskInfo, pad, unpad
from lib.errors import ContractError, DimensionError
from lib.tensor_autodiff import (
    Tape,
    Tensor,
    add,
    as_tensor,
    concat_last,
    huber,
    matmul,
    mul,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    sort_desc_columns,
    sub,
    tile_rows,
)

Layer = Tuple[Tensor, Tensor]


@dataclass
class PaddedSetBatch:
    """Sets stored as ``values[B, M, d]``; rows at or past ``cardinality[b]`` are zero."""

    values: np.ndarray
    cardinality: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.cardinality = np.asarray(self.cardinality, dtype=np.int64)
        if self.values.ndim != 3 or self.cardinality.shape != (self.values.shape[0],):
            raise DimensionError(f"values {self.values.shape} / cardinality {self.cardinality.shape}")

    @property
    def batch_size(self) -> int:
        return self.values.shape[0]

    @property
    def max_size(self) -> int:
        return self.values.shape[1]

    @property
    def element_dim(self) -> int:
        return self.values.shape[2]

    def validate(self, allow_empty: bool = False, threshold: float = PAD_THRESHOLD) -> None:
        low = 0 if allow_empty else 1
        if np.any(self.cardinality < low) or np.any(self.cardinality > self.max_size):
            raise ContractError(f"cardinality must lie in {low}..{self.max_size}")
        norms = np.linalg.norm(self.values, axis=-1)
        rows = np.arange(self.max_size)[None, :]
        real = rows < self.cardinality[:, None]
        if np.any(self.values[~real] != 0.0):
            raise ContractError("padding rows must be exact zero vectors")
        if np.any(norms[real] < threshold):
            raise ContractError(f"set elements must have norm >= {threshold}")

    def sets(self) -> List[np.ndarray]:
        return [self.values[b, : self.cardinality[b]].copy() for b in range(self.batch_size)]

    def __getitem__(self, index) -> "PaddedSetBatch":
        index = np.atleast_1d(np.arange(self.batch_size)[index])
        return PaddedSetBatch(self.values[index], self.cardinality[index])

    @classmethod
    def from_sets(cls, sets: Sequence[np.ndarray], max_size: int, element_dim: Optional[int] = None,
                  allow_empty: bool = False, threshold: float = PAD_THRESHOLD) -> "PaddedSetBatch":
        if not sets and element_dim is None:
            raise ContractError("cannot infer element width of an empty batch")
        width = element_dim if element_dim is not None else np.asarray(sets[0]).shape[-1]
        values = np.zeros((len(sets), max_size, width))
        card = np.zeros(len(sets), dtype=np.int64)
        for b, s in enumerate(sets):
            s = np.asarray(s, dtype=np.float64).reshape(-1, width)
            values[b] = pad(s, max_size)
            card[b] = s.shape[0]
        batch = cls(values, card)
        batch.validate(allow_empty=allow_empty, threshold=threshold)
        return batch

    @classmethod
    def from_examples(cls, examples: Sequence[Example], info: TaskInfo) -> "PaddedSetBatch":
        return cls.from_sets([e.target for e in examples], info.max_size, info.element_dim)

    @classmethod
    def from_prediction(cls, values: np.ndarray, threshold: float = PAD_THRESHOLD) -> "PaddedSetBatch":
        """Unpad every row of raw sampler output and compact the survivors to the front."""
        values = np.asarray(values, dtype=np.float64)
        kept = [unpad(v, threshold) for v in values]
        return cls.from_sets(kept, values.shape[1], values.shape[2], allow_empty=True, threshold=threshold)


# -- parameters ---------------------------------------------------------------

def mlp_shapes(prefix: str, fan_in: int, widths: Sequence[int]) -> List[Tuple[str, Tuple[int, ...], int]]:
    shapes = []
    for i, width in enumerate(widths):
        shapes.append((f"{prefix}.{i}.W", (fan_in, width), fan_in))
        shapes.append((f"{prefix}.{i}.b", (width,), fan_in))
        fan_in = width
    return shapes


def parameter_shapes(dims: ModelDims) -> List[Tuple[str, Tuple[int, ...], int]]:
    """(name, shape, fan_in) for every parameter, in canonical order."""
    pool_width = dims.g_layers[-1]
    if dims.kind == "DeepSets":
        shapes = (mlp_shapes("h", dims.x_dim, dims.h_layers)
                  + mlp_shapes("g", dims.h_layers[-1] + dims.element_dim, dims.g_layers)
                  + mlp_shapes("f", pool_width, dims.f_layers))
    else:
        if dims.f_layers[-1] != dims.h_layers[-1]:
            raise DimensionError(
                f"set encoder latent {dims.f_layers[-1]} differs from input embedding {dims.h_layers[-1]}")
        shapes = (mlp_shapes("h", dims.x_dim, dims.h_layers)
                  + mlp_shapes("g", dims.element_dim, dims.g_layers)
                  + mlp_shapes("f", pool_width, dims.f_layers))
    if dims.pool == "fspool":
        shapes.append(("pool.control_points", (dims.fspool_knots, pool_width), dims.fspool_knots))
    return shapes


@dataclass(frozen=True)
class FsPoolWeights:
    """K equally spaced knots per latent channel of a piecewise-linear weight function."""

    control_points: Tensor

    def __post_init__(self):
        if self.control_points.ndim != 2 or self.control_points.shape[0] < 2:
            raise ContractError(f"fspool needs K >= 2 knots, got shape {self.control_points.shape}")

    @property
    def knots(self) -> int:
        return self.control_points.shape[0]


def fspool_interpolation(m: int, knots: int) -> np.ndarray:
    """Matrix A[m, K] with (A @ control_points)[i] = W(r_i), r_i = i / (m - 1)."""
    r = np.arange(m) / (m - 1) if m > 1 else np.zeros(1)
    pos = r * (knots - 1)
    lo = np.minimum(np.floor(pos).astype(int), knots - 1)
    hi = np.minimum(lo + 1, knots - 1)
    frac = pos - lo
    a = np.zeros((m, knots))
    a[np.arange(m), lo] += 1.0 - frac
    a[np.arange(m), hi] += frac
    return a


def mlp_forward(layers: Sequence[Layer], inputs) -> Tensor:
    """Affine-ReLU chain; the last layer stays affine."""
    out = as_tensor(inputs)
    for i, (w, b) in enumerate(layers):
        if out.shape[-1] != w.shape[0]:
            raise DimensionError(f"layer {i} expects width {w.shape[0]}, got {out.shape[-1]}")
        out = add(matmul(out, w), b)
        if i < len(layers) - 1:
            out = relu(out)
    return out


def fspool(z, weights: FsPoolWeights) -> Tensor:
    """Σ_i W_j(r_i) · sort_desc(z)[i, j] for every channel j."""
    z = as_tensor(z)
    if z.shape[-1] != weights.control_points.shape[1]:
        raise DimensionError(f"fspool: {z.shape[-1]} channels vs {weights.control_points.shape[1]} weights")
    ordered, _ = sort_desc_columns(z)
    w = matmul(Tensor(fspool_interpolation(z.shape[-2], weights.knots)), weights.control_points)
    return reduce_sum(mul(ordered, w), axis=-2)


class EnergyModel:
    """Parameters θ plus architecture; immutable once built."""

    def __init__(self, dims: ModelDims, params: Dict[str, np.ndarray]):
        self.dims = dims
        expected = parameter_shapes(dims)
        missing = [n for n, _, _ in expected if n not in params]
        extra = set(params) - {n for n, _, _ in expected}
        if missing or extra:
            raise ContractError(f"parameter set mismatch: missing {missing}, unexpected {sorted(extra)}")
        for name, shape, _ in expected:
            if tuple(np.shape(params[name])) != shape:
                raise DimensionError(f"{name}: expected {shape}, got {np.shape(params[name])}")
        self.params = {n: np.asarray(params[n], dtype=np.float64) for n, _, _ in expected}

    @classmethod
    def init(cls, dims: ModelDims, rng: np.random.Generator) -> "EnergyModel":
        params = {}
        for name, shape, fan_in in parameter_shapes(dims):
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
        return cls(dims, params)

    @property
    def kind(self) -> str:
        return self.dims.kind

    @property
    def names(self) -> List[str]:
        return list(self.params)

    def with_params(self, params: Dict[str, np.ndarray]) -> "EnergyModel":
        return EnergyModel(self.dims, params)

    def bind(self, tape: Optional[Tape] = None) -> Dict[str, Tensor]:
        """Parameter tensors: tape leaves when differentiating θ, constants otherwise."""
        if tape is None:
            return {n: Tensor(v) for n, v in self.params.items()}
        return {n: tape.leaf(v) for n, v in self.params.items()}

    def _layers(self, bound: Dict[str, Tensor], prefix: str) -> List[Layer]:
        count = len(getattr(self.dims, f"{prefix}_layers"))
        return [(bound[f"{prefix}.{i}.W"], bound[f"{prefix}.{i}.b"]) for i in range(count)]

    def _pool(self, bound: Dict[str, Tensor], z: Tensor) -> Tensor:
        if self.dims.pool == "fspool":
            return fspool(z, FsPoolWeights(bound["pool.control_points"]))
        ordered, _ = sort_desc_columns(z)
        return reduce_sum(ordered, axis=-2) if self.dims.pool == "sum" else reduce_mean(ordered, axis=-2)

    def _check_inputs(self, x: Tensor, y: Tensor) -> None:
        if x.ndim != 2 or x.shape[1] != self.dims.x_dim:
            raise DimensionError(f"x must be [B, {self.dims.x_dim}], got {x.shape}")
        if y.ndim != 3 or y.shape[0] != x.shape[0] or y.shape[2] != self.dims.element_dim:
            raise DimensionError(f"Y must be [{x.shape[0]}, M, {self.dims.element_dim}], got {y.shape}")

    def energy(self, x, y, bound: Optional[Dict[str, Tensor]] = None) -> Tensor:
        """Per-example energy ``[B]``; ``bound`` defaults to constant parameters."""
        bound = self.bind() if bound is None else bound
        if isinstance(y, PaddedSetBatch):
            y = Tensor(y.values)
        x, y = as_tensor(x), as_tensor(y)
        self._check_inputs(x, y)
        if self.kind == "DeepSets":
            return energy_ds(self, bound, x, y)
        return energy_se(self, bound, x, y)

    __call__ = energy

    def to_state(self) -> Dict[str, object]:
        return {
            "kind": self.kind,
            "dims": self.dims.model_dump(mode="json"),
            "tensors": {n: {"shape": list(v.shape), "data": v.reshape(-1)} for n, v in self.params.items()},
        }

    @classmethod
    def from_state(cls, state: Dict[str, object]) -> "EnergyModel":
        dims = ModelDims.model_validate(state["dims"])
        if dims.kind != state.get("kind"):
            raise ContractError(f"checkpoint kind {state.get('kind')!r} disagrees with dims {dims.kind!r}")
        tensors = {n: np.asarray(t["data"], dtype=np.float64).reshape(t["shape"])
                   for n, t in state["tensors"].items()}
        return cls(dims, tensors)


def energy_ds(model: EnergyModel, bound: Dict[str, Tensor], x: Tensor, y: Tensor) -> Tensor:
    """f(pool(g([h(x); y]))): h(x) is tiled onto every row, padding rows included."""
    if model.kind != "DeepSets":
        raise ContractError("energy_ds needs a DeepSets model")
    hx = mlp_forward(model._layers(bound, "h"), x)
    rows = concat_last(tile_rows(hx, y.shape[1]), y)
    z = mlp_forward(model._layers(bound, "g"), rows)
    out = mlp_forward(model._layers(bound, "f"), model._pool(bound, z))
    return reshape(out, (x.shape[0],))


def energy_se(model: EnergyModel, bound: Dict[str, Tensor], x: Tensor, y: Tensor) -> Tensor:
    """Σ Huber_δ(g(Y) − h(x)) with g = per-element MLP, pool, MLP."""
    if model.kind != "SetEncoder":
        raise ContractError("energy_se needs a SetEncoder model")
    z = mlp_forward(model._layers(bound, "g"), y)
    gy = mlp_forward(model._layers(bound, "f"), model._pool(bound, z))
    hx = mlp_forward(model._layers(bound, "h"), x)
    if gy.shape != hx.shape:
        raise DimensionError(f"latent mismatch: g(Y) {gy.shape} vs h(x) {hx.shape}")
    return reduce_sum(huber(sub(gy, hx), model.dims.huber_delta), axis=-1)


def energy_of(model: EnergyModel, x, values) -> np.ndarray:
    """Energies as a plain array, no tape."""
    return model.energy(x, values).data.copy()


def default_dims(info: TaskInfo, kind: str = "DeepSets", **overrides) -> ModelDims:
    """Architecture defaults per task and energy kind."""
    base = {"kind": kind, "x_dim": info.x_dim, "element_dim": info.element_dim, "max_size": info.max_size}
    if kind == "SetEncoder":
        base.update(h_layers=[256, 64], g_layers=[256, 256, 64], f_layers=[256, 64])
    elif info.name == "anomaly":
        base.update(h_layers=[64], g_layers=[256, 256], f_layers=[256, 1])
    base.update(overrides)
    return ModelDims.model_validate(base)
