"""
Direct-risk-minimization set decoders and the per-element outlier classifier.

``BaselinePredictor`` regresses a padded M x d set straight from x under
either set loss. ``OutlierBaseline`` scores every element of an anomaly set
independently after a few permutation-equivariant layers.
"""
from typing import Dict, List, Optional, Tuple

import numpy as np

from lib.config import DecoderDims, OutlierDims
from lib.errors import ContractError, DimensionError
from lib.set_losses import linear_assignment
from lib.set_networks import mlp_forward, mlp_shapes
from lib.tensor_autodiff import (
    Tape,
    Tensor,
    add,
    as_tensor,
    gather_rows,
    matmul,
    mul,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    softplus,
    square,
    sub,
    tile_rows,
)

Shapes = List[Tuple[str, Tuple[int, ...], int]]


class _ParamModel:
    """Named float64 parameters checked against a shape list."""

    KIND = ""
    DIMS = None

    def __init__(self, dims, params: Dict[str, np.ndarray]):
        self.dims = dims
        expected = self.shapes(dims)
        names = {n for n, _, _ in expected}
        if set(params) != names:
            raise ContractError(f"{self.KIND}: parameter names {sorted(params)} != {sorted(names)}")
        for name, shape, _ in expected:
            if tuple(np.shape(params[name])) != shape:
                raise DimensionError(f"{name}: expected {shape}, got {np.shape(params[name])}")
        self.params = {n: np.asarray(params[n], dtype=np.float64) for n, _, _ in expected}

    @staticmethod
    def shapes(dims) -> Shapes:
        raise NotImplementedError

    @classmethod
    def init(cls, dims, rng: np.random.Generator):
        params = {}
        for name, shape, fan_in in cls.shapes(dims):
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
        return cls(dims, params)

    def with_params(self, params: Dict[str, np.ndarray]):
        return type(self)(self.dims, params)

    def bind(self, tape: Optional[Tape] = None) -> Dict[str, Tensor]:
        if tape is None:
            return {n: Tensor(v) for n, v in self.params.items()}
        return {n: tape.leaf(v) for n, v in self.params.items()}

    def to_state(self) -> Dict[str, object]:
        return {
            "kind": self.KIND,
            "dims": self.dims.model_dump(mode="json"),
            "tensors": {n: {"shape": list(v.shape), "data": v.reshape(-1)} for n, v in self.params.items()},
        }

    @classmethod
    def from_state(cls, state: Dict[str, object]):
        if state.get("kind") != cls.KIND:
            raise ContractError(f"expected a {cls.KIND} checkpoint, got {state.get('kind')!r}")
        dims = cls.DIMS.model_validate(state["dims"])
        tensors = {n: np.asarray(t["data"], dtype=np.float64).reshape(t["shape"])
                   for n, t in state["tensors"].items()}
        return cls(dims, tensors)


# -- set decoder --------------------------------------------------------------

def hungarian_set_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean matched squared distance; the optimal matching is held fixed for backward."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred.data[:, :, None, :] - target[:, None, :, :]
    costs = np.einsum("bijk,bijk->bij", diff, diff)
    matched = np.stack([target[b][linear_assignment(costs[b]).columns()] for b in range(target.shape[0])])
    return reduce_mean(reduce_sum(square(sub(pred, Tensor(matched))), axis=-1))


def chamfer_set_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Both mean nearest-neighbour terms; nearest neighbours are held fixed for backward."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred.data[:, :, None, :] - target[:, None, :, :]
    costs = np.einsum("bijk,bijk->bij", diff, diff)
    nearest_target = np.take_along_axis(target, costs.argmin(axis=2)[..., None], axis=1)
    forward = reduce_mean(reduce_sum(square(sub(pred, Tensor(nearest_target))), axis=-1))
    reverse = reduce_mean(reduce_sum(square(sub(gather_rows(pred, costs.argmin(axis=1)), Tensor(target))), axis=-1))
    return add(forward, reverse)


SET_LOSSES = {"hungarian": hungarian_set_loss, "chamfer": chamfer_set_loss}


class BaselinePredictor(_ParamModel):
    """MLP decoder from the encoded input to a padded M x d set."""

    KIND = "Baseline"
    DIMS = DecoderDims

    @staticmethod
    def shapes(dims: DecoderDims) -> Shapes:
        return mlp_shapes("dec", dims.x_dim, list(dims.hidden) + [dims.max_size * dims.element_dim])

    @property
    def loss_kind(self) -> str:
        return self.dims.loss_kind

    def forward(self, x, bound: Optional[Dict[str, Tensor]] = None) -> Tensor:
        bound = self.bind() if bound is None else bound
        x = as_tensor(x)
        layers = [(bound[f"dec.{i}.W"], bound[f"dec.{i}.b"]) for i in range(len(self.dims.hidden) + 1)]
        out = mlp_forward(layers, x)
        return reshape(out, (x.shape[0], self.dims.max_size, self.dims.element_dim))

    def loss(self, x, target: np.ndarray, bound: Dict[str, Tensor]) -> Tensor:
        return SET_LOSSES[self.loss_kind](self.forward(x, bound), target)

    def predict_values(self, x) -> np.ndarray:
        return self.forward(x).data.copy()


# -- outlier classifier -------------------------------------------------------

class OutlierBaseline(_ParamModel):
    """z' = relu(z W1 + mean(z) W2 + b) per layer, then one logit per element."""

    KIND = "OutlierBaseline"
    DIMS = OutlierDims

    @staticmethod
    def shapes(dims: OutlierDims) -> Shapes:
        shapes, fan_in = [], dims.feature_dim
        for i, width in enumerate(dims.widths):
            shapes += [(f"eq.{i}.W1", (fan_in, width), 2 * fan_in),
                       (f"eq.{i}.W2", (fan_in, width), 2 * fan_in),
                       (f"eq.{i}.b", (width,), 2 * fan_in)]
            fan_in = width
        return shapes + [("out.W", (fan_in, 1), fan_in), ("out.b", (1,), fan_in)]

    def logits(self, features, bound: Optional[Dict[str, Tensor]] = None) -> Tensor:
        bound = self.bind() if bound is None else bound
        z = as_tensor(features)
        if z.ndim != 3 or z.shape[-1] != self.dims.feature_dim:
            raise DimensionError(f"features must be [B, M, {self.dims.feature_dim}], got {z.shape}")
        rows = z.shape[1]
        for i in range(len(self.dims.widths)):
            pooled = matmul(reduce_mean(z, axis=-2), bound[f"eq.{i}.W2"])
            z = relu(add(add(matmul(z, bound[f"eq.{i}.W1"]), tile_rows(pooled, rows)), bound[f"eq.{i}.b"]))
        out = add(matmul(z, bound["out.W"]), bound["out.b"])
        return reshape(out, (z.shape[0], rows))

    def loss(self, features, labels: np.ndarray, bound: Dict[str, Tensor]) -> Tensor:
        """Binary cross-entropy softplus(l) - t*l averaged over elements."""
        logits = self.logits(features, bound)
        return reduce_mean(sub(softplus(logits), mul(logits, Tensor(np.asarray(labels, dtype=np.float64)))))

    def predict_outliers(self, features) -> List[List[int]]:
        logits = self.logits(features).data
        return [np.flatnonzero(row > 0).tolist() for row in logits]


def split_anomaly(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Features and 0/1 outlier labels from anomaly set rows (last coordinate is o)."""
    values = np.asarray(values, dtype=np.float64)
    return values[..., :-1], (values[..., -1] > 0).astype(np.float64)
