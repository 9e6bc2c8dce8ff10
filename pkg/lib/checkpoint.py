"""JSON checkpoints for energy models and the baseline predictors."""
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import orjson
from loguru import logger
from pydantic import ValidationError

from lib.baselines import BaselinePredictor, OutlierBaseline
from lib.errors import CheckpointError, DespError
from lib.set_networks import EnergyModel

ENERGY_KINDS = ("DeepSets", "SetEncoder")
_LOADERS = {
    "DeepSets": EnergyModel,
    "SetEncoder": EnergyModel,
    BaselinePredictor.KIND: BaselinePredictor,
    OutlierBaseline.KIND: OutlierBaseline,
}


@dataclass
class Checkpoint:
    kind: str
    model: Any
    config_hash: str = ""
    state: Dict[str, Any] = field(default_factory=dict)

    @property
    def is_energy(self) -> bool:
        return self.kind in ENERGY_KINDS


def pack_array(value: np.ndarray) -> Dict[str, Any]:
    value = np.asarray(value, dtype=np.float64)
    return {"shape": list(value.shape), "data": value.reshape(-1)}


def unpack_array(record: Dict[str, Any]) -> np.ndarray:
    return np.asarray(record["data"], dtype=np.float64).reshape(record["shape"])


def save_checkpoint(path: Union[str, Path], model, *, config_hash: str = "",
                    state: Optional[Dict[str, Any]] = None) -> Path:
    """Write ``model`` (and optional training state) as one JSON document.

    The file is replaced atomically, so an interrupted write leaves the
    previous checkpoint intact.
    """
    path = Path(path)
    payload = dict(model.to_state())
    payload["config_hash"] = config_hash
    payload["state"] = state or {}
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(orjson.dumps(payload, option=orjson.OPT_SERIALIZE_NUMPY))
    os.replace(tmp, path)
    logger.debug("checkpoint written to {}", path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        payload = orjson.loads(path.read_bytes())
    except orjson.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a JSON checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or "kind" not in payload:
        raise CheckpointError(f"{path}: missing 'kind'")
    kind = payload["kind"]
    loader = _LOADERS.get(kind)
    if loader is None:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")
    try:
        model = loader.from_state(payload)
    except (KeyError, TypeError, ValueError, ValidationError, DespError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return Checkpoint(kind, model, payload.get("config_hash", ""), payload.get("state") or {})
