"""SVG scatter panels of 2-d sets."""
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

from lib.errors import DimensionError  # noqa: E402

PANEL_INCHES = 2.0
COLUMNS = 4
POINT_SIZE = 12
POINT_COLOR = "#1f77b4"
DEFAULT_VIEWPORT = (-0.75, 0.75)


def panel_gid(index: int) -> str:
    """SVG id of the axes group drawn for set ``index``."""
    return f"panel_{index}"


def points_gid(index: int) -> str:
    """SVG id of the scatter group inside panel ``index``."""
    return f"points_{index}"


def _as_sets(sets: Sequence[np.ndarray]):
    out = []
    for i, s in enumerate(sets):
        s = np.asarray(s, dtype=np.float64)
        if s.size == 0:
            s = s.reshape(0, 2)
        if s.ndim != 2 or s.shape[1] != 2:
            raise DimensionError(f"set {i} has shape {s.shape}; only 2-d elements can be drawn")
        out.append(s)
    return out


def draw_sets(sets: Sequence[np.ndarray], viewport: Optional[Tuple[float, float]] = DEFAULT_VIEWPORT,
              columns: int = COLUMNS) -> Figure:
    """One square panel per set, ``columns`` per row, both axes spanning ``viewport``."""
    lo, hi = viewport or DEFAULT_VIEWPORT
    sets = _as_sets(sets)
    cols = max(1, min(columns, len(sets)))
    rows = max(1, -(-len(sets) // cols))
    fig = plt.figure(figsize=(cols * PANEL_INCHES, rows * PANEL_INCHES))
    for i, s in enumerate(sets):
        ax = fig.add_subplot(rows, cols, i + 1)
        ax.set_gid(panel_gid(i))
        ax.scatter(s[:, 0], s[:, 1], s=POINT_SIZE, c=POINT_COLOR, gid=points_gid(i))
        ax.set_xlim(lo, hi)
        ax.set_ylim(lo, hi)
        ax.set_aspect("equal")
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    return fig


def render_svg(sets: Sequence[np.ndarray], path: Union[str, Path],
               viewport: Optional[Tuple[float, float]] = DEFAULT_VIEWPORT, columns: int = COLUMNS) -> Path:
    path = Path(path)
    fig = draw_sets(sets, viewport, columns)
    with matplotlib.rc_context({"svg.hashsalt": "desp"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
