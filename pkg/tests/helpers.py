"""Shared test helpers: finite differences, small model factories, SVG inspection."""
import numpy as np
from defusedxml import ElementTree as SafeET

from lib.config import ModelDims
from lib.set_networks import EnergyModel


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` at every element of ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        hi = f(x)
        x[idx] = orig - eps
        lo = f(x)
        x[idx] = orig
        grad[idx] = (hi - lo) / (2 * eps)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(1.0, float(np.max(np.abs(numeric))) if np.size(numeric) else 1.0)
    return float(np.max(np.abs(analytic - numeric))) / scale if np.size(numeric) else 0.0


def small_model(kind: str = "DeepSets", pool: str = "fspool", seed: int = 0, *, x_dim: int = 3,
                element_dim: int = 2, max_size: int = 5) -> EnergyModel:
    if kind == "DeepSets":
        dims = ModelDims(kind=kind, x_dim=x_dim, element_dim=element_dim, max_size=max_size,
                         h_layers=[4], g_layers=[6, 5], f_layers=[4, 1], pool=pool, fspool_knots=4)
    else:
        dims = ModelDims(kind=kind, x_dim=x_dim, element_dim=element_dim, max_size=max_size,
                         h_layers=[6, 3], g_layers=[6, 5], f_layers=[4, 3], pool=pool, fspool_knots=4)
    return EnergyModel.init(dims, np.random.default_rng(seed))


SVG_NS = "http://www.w3.org/2000/svg"


def svg_groups(path) -> dict:
    """Every ``<g>`` element of an SVG file that carries an id, keyed by id."""
    root = SafeET.parse(path).getroot()
    return {g.get("id"): g for g in root.iter(f"{{{SVG_NS}}}g") if g.get("id")}


def svg_marks(group) -> int:
    """Points drawn inside a scatter group.

    matplotlib writes a shared marker under ``<defs>`` plus one ``<use>`` per
    point, or one ``<path>`` per point when there are too few to share.
    """
    if group is None:
        return 0
    uses = len(list(group.iter(f"{{{SVG_NS}}}use")))
    paths = len(list(group.iter(f"{{{SVG_NS}}}path")))
    shared = sum(len(list(d.iter(f"{{{SVG_NS}}}path"))) for d in group.iter(f"{{{SVG_NS}}}defs"))
    return uses + paths - shared
