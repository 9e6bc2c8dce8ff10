"""
Contrastive NLL training for energy models, plus the direct-risk baselines.

The energy model is trained by contrasting data with model samples:

    loss = mean_b [ E(x_b, ỹ⁺_b) − (1/k) Σ_j E(x_b, y⁻_bj) ]

where ỹ⁺ is the target with small Gaussian noise on its real rows and y⁻ are
truncated Langevin samples treated as constants. Every random draw is keyed
by (seed, purpose, epoch, ...) so a run, or a resumed run, is a pure function
of the dataset and the config.
"""
import csv
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from tqdm import tqdm

from lib.baselines import BaselinePredictor, OutlierBaseline, split_anomaly
from lib.checkpoint import pack_array, save_checkpoint, unpack_array
from lib.config import (
    BaselineConfig,
    DecoderDims,
    OutlierDims,
    TrainConfig,
    chain_rng,
    derive_seed,
    resolve_sampler,
)
from lib.datasets import Example, TaskInfo, dataset_task, encode_inputs, task_info
from lib.errors import ContractError, DimensionError, SamplerDivergenceError, TrainingDivergedError
from lib.langevin import ClampSpec, sample_negative
from lib.set_networks import EnergyModel, PaddedSetBatch
from lib.tensor_autodiff import Tape, backward, reduce_mean

# stream purposes under the training seed
SHUFFLE, DATA_NOISE, NEGATIVES, VALIDATION, INIT = range(5)

METRICS_HEADER = ["epoch", "loss", "mean_E_pos", "mean_E_neg", "wall_ms", "val_E_pos", "val_E_neg"]

Params = Dict[str, np.ndarray]


@dataclass
class ContrastiveResult:
    loss: float
    grads: Params
    mean_e_pos: float
    mean_e_neg: float


@dataclass(frozen=True)
class AdamState:
    t: int
    m: Params
    v: Params

    @classmethod
    def zeros(cls, params: Params) -> "AdamState":
        return cls(0, {n: np.zeros_like(p) for n, p in params.items()},
                   {n: np.zeros_like(p) for n, p in params.items()})

    def to_state(self) -> Dict[str, object]:
        state: Dict[str, object] = {"adam.t": self.t}
        for name in self.m:
            state[f"adam.m.{name}"] = pack_array(self.m[name])
            state[f"adam.v.{name}"] = pack_array(self.v[name])
        return state

    @classmethod
    def from_state(cls, state: Dict[str, object], names: Sequence[str]) -> "AdamState":
        return cls(int(state["adam.t"]),
                   {n: unpack_array(state[f"adam.m.{n}"]) for n in names},
                   {n: unpack_array(state[f"adam.v.{n}"]) for n in names})


@dataclass
class EpochLog:
    epoch: int
    loss: float
    mean_e_pos: float
    mean_e_neg: float
    wall_ms: int = 0
    val_e_pos: Optional[float] = None
    val_e_neg: Optional[float] = None

    def to_row(self) -> List[str]:
        opt = lambda v: "" if v is None else repr(float(v))
        return [str(self.epoch), repr(float(self.loss)), repr(float(self.mean_e_pos)),
                repr(float(self.mean_e_neg)), str(int(self.wall_ms)), opt(self.val_e_pos), opt(self.val_e_neg)]


@dataclass
class TrainResult:
    model: EnergyModel
    logs: List[EpochLog]
    adam_state: AdamState
    last_checkpoint: Optional[str] = None


@dataclass
class BaselineFit:
    model: object
    losses: List[float] = field(default_factory=list)


# -- optimizer ------------------------------------------------------------------

def adam_step(params: Params, grads: Params, state: AdamState, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> Tuple[Params, AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    if set(params) != set(grads):
        raise ContractError(f"gradient names {sorted(grads)} differ from parameters {sorted(params)}")
    t = state.t + 1
    new_params, m, v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise DimensionError(f"{name}: parameter {p.shape}, gradient {g.shape}, moment {state.m[name].shape}")
        m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m[name] / (1.0 - beta1 ** t)
        v_hat = v[name] / (1.0 - beta2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(t, m, v)


# -- contrastive objective --------------------------------------------------------

def _noise_mask(y_pos: PaddedSetBatch, clamp: Optional[ClampSpec]) -> np.ndarray:
    real = np.arange(y_pos.max_size)[None, :] < y_pos.cardinality[:, None]
    mask = np.broadcast_to(real[..., None], y_pos.values.shape)
    if clamp is not None:
        mask = mask & np.asarray(clamp.free_mask, dtype=bool)
    return mask


def _mean_energy_grads(model: EnergyModel, x: np.ndarray, y: np.ndarray) -> Tuple[float, Params]:
    tape = Tape()
    bound = model.bind(tape)
    mean = reduce_mean(model.energy(x, y, bound))
    grads = backward(tape, mean, [bound[n] for n in model.names])
    return mean.item(), dict(zip(model.names, grads))


def contrastive_loss(model: EnergyModel, x: np.ndarray, y_pos: PaddedSetBatch, config: TrainConfig,
                     rng: np.random.Generator, *, negatives: Optional[np.ndarray] = None,
                     chain_keys: Optional[Sequence[Tuple[int, ...]]] = None,
                     clamp: Optional[ClampSpec] = None) -> ContrastiveResult:
    """Loss and ∂loss/∂θ for one mini-batch.

    ``negatives`` (shape [B*k, M, d], example-major) replaces Langevin sampling
    when given; ``chain_keys`` names the B*k negative chains otherwise.
    ``clamp`` pins non-free coordinates of both the noisy positives and the
    negatives.
    """
    x = np.asarray(x, dtype=np.float64)
    k = config.negatives
    noise = rng.normal(0.0, config.data_noise_std, size=y_pos.values.shape)
    y_noisy = y_pos.values + np.where(_noise_mask(y_pos, clamp), noise, 0.0)

    x_rep = np.repeat(x, k, axis=0)
    if negatives is None:
        sampler = resolve_sampler(config.sampler, model.kind)
        keys = chain_keys or [(b, j) for b in range(x.shape[0]) for j in range(k)]
        neg_clamp = None if clamp is None else ClampSpec(np.repeat(clamp.values, k, axis=0), clamp.free_mask)
        try:
            negatives = sample_negative(model, x_rep, sampler, shape=(y_pos.max_size, y_pos.element_dim),
                                        chain_keys=keys, clamp=neg_clamp)
        except SamplerDivergenceError as exc:
            raise exc.with_batch((exc.batch_index or 0) // k) from exc
    negatives = np.asarray(negatives, dtype=np.float64)
    if negatives.shape != (x_rep.shape[0],) + y_pos.values.shape[1:]:
        raise DimensionError(f"negatives must be {(x_rep.shape[0],) + y_pos.values.shape[1:]}, got {negatives.shape}")

    e_pos, g_pos = _mean_energy_grads(model, x, y_noisy)
    e_neg, g_neg = _mean_energy_grads(model, x_rep, negatives)
    grads = {n: g_pos[n] - g_neg[n] for n in model.names}
    return ContrastiveResult(e_pos - e_neg, grads, e_pos, e_neg)


# -- training loop --------------------------------------------------------------

def _progress(progress: Optional[bool]) -> bool:
    return sys.stderr.isatty() if progress is None else progress


def _clamp_for(info: TaskInfo, y: PaddedSetBatch) -> Optional[ClampSpec]:
    mask = info.free_mask()
    return None if mask is None else ClampSpec(y.values, mask)


def _batches(count: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    order = chain_rng(seed, SHUFFLE, epoch).permutation(count)
    return [order[s:s + batch_size] for s in range(0, count, batch_size)]


def training_sampler(config: TrainConfig, kind: str):
    """Sampler for negative chains, seeded from the training seed."""
    return resolve_sampler(config.sampler, kind).model_copy(update={"seed": derive_seed(config.seed, NEGATIVES)})


def init_energy_model(info: TaskInfo, dims, config: TrainConfig) -> EnergyModel:
    if dims.x_dim != info.x_dim or dims.element_dim != info.element_dim:
        raise DimensionError(f"model dims do not fit task {info.name}")
    return EnergyModel.init(dims, chain_rng(config.seed, INIT))


def validation_energies(model: EnergyModel, examples: Sequence[Example], info: TaskInfo,
                        config: TrainConfig, epoch: int) -> Tuple[float, float]:
    """Mean noiseless E⁺ and mean E⁻ of fresh negatives on held-out examples."""
    sampler = training_sampler(config, model.kind)
    pos, neg = [], []
    for start in range(0, len(examples), config.batch_size):
        chunk = examples[start:start + config.batch_size]
        x = encode_inputs(chunk, info)
        y = PaddedSetBatch.from_examples(chunk, info)
        keys = [(VALIDATION, epoch, start + b) for b in range(len(chunk))]
        y_neg = sample_negative(model, x, sampler, shape=(info.max_size, info.element_dim),
                                chain_keys=keys, clamp=_clamp_for(info, y))
        pos.append(model.energy(x, y.values).data)
        neg.append(model.energy(x, y_neg).data)
    return float(np.concatenate(pos).mean()), float(np.concatenate(neg).mean())


def write_metrics(path: Union[str, Path], logs: Sequence[EpochLog], append: bool = False) -> None:
    path = Path(path)
    fresh = not append or not path.exists()
    with open(path, "w" if fresh else "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(METRICS_HEADER)
        for log in logs:
            writer.writerow(log.to_row())


def read_metrics(path: Union[str, Path]) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def train(model: EnergyModel, dataset: Sequence[Example], config: TrainConfig, *,
          info: Optional[TaskInfo] = None, checkpoint_path: Optional[Union[str, Path]] = None,
          metrics_path: Optional[Union[str, Path]] = None, val: Optional[Sequence[Example]] = None,
          start_epoch: int = 0, adam_state: Optional[AdamState] = None, config_digest: str = "",
          resumed_from: Optional[Union[str, Path]] = None, progress: Optional[bool] = None) -> TrainResult:
    """Run epochs ``start_epoch .. config.epochs - 1`` of contrastive training.

    Checkpoints go to ``checkpoint_path`` every ``checkpoint_every`` epochs and
    after the last one; metrics rows are appended to ``metrics_path`` per epoch.
    A non-finite loss raises TrainingDivergedError and leaves the last
    checkpoint as it was. ``resumed_from`` names the checkpoint a resumed run
    was loaded from; it counts as the last good checkpoint until a new one is
    written, and a resume with no epochs left still writes ``checkpoint_path``
    when it is a different file.
    """
    if not dataset:
        raise ContractError("training set is empty")
    info = info or task_info(dataset_task(dataset))
    adam = adam_state or AdamState.zeros(model.params)
    last_ckpt = str(resumed_from) if resumed_from else None
    logs: List[EpochLog] = []
    if metrics_path is not None:
        write_metrics(metrics_path, [], append=start_epoch > 0)

    def checkpoint(epoch: int) -> Optional[str]:
        state = {"epoch": epoch, **adam.to_state()}
        save_checkpoint(checkpoint_path, model, config_hash=config_digest, state=state)
        logger.debug("epoch {}: checkpoint saved", epoch)
        return str(checkpoint_path)

    batch_config = config.model_copy(update={"sampler": training_sampler(config, model.kind)})
    for epoch in range(start_epoch, config.epochs):
        started = time.perf_counter()
        losses, e_pos, e_neg = [], [], []
        batches = _batches(len(dataset), config.batch_size, config.seed, epoch)
        for index, ids in enumerate(tqdm(batches, desc=f"epoch {epoch}", disable=not _progress(progress),
                                         leave=False)):
            chunk = [dataset[i] for i in ids]
            x = encode_inputs(chunk, info)
            y = PaddedSetBatch.from_examples(chunk, info)
            keys = [(NEGATIVES, epoch, int(i), j) for i in ids for j in range(config.negatives)]
            result = contrastive_loss(model, x, y, batch_config, chain_rng(config.seed, DATA_NOISE, epoch, index),
                                      chain_keys=keys, clamp=_clamp_for(info, y))
            finite = np.isfinite(result.loss) and all(np.all(np.isfinite(g)) for g in result.grads.values())
            if not finite:
                logger.error("non-finite loss at epoch {}, batch {}", epoch, index)
                raise TrainingDivergedError(epoch, index, last_ckpt)
            params, adam = adam_step(model.params, result.grads, adam, **config.adam.model_dump())
            model = model.with_params(params)
            losses.append(result.loss)
            e_pos.append(result.mean_e_pos)
            e_neg.append(result.mean_e_neg)

        log = EpochLog(epoch, float(np.mean(losses)), float(np.mean(e_pos)), float(np.mean(e_neg)))
        if config.log_wall_time:
            log.wall_ms = int(round((time.perf_counter() - started) * 1000))
        if val:
            log.val_e_pos, log.val_e_neg = validation_energies(model, val, info, config, epoch)
        logs.append(log)
        logger.info("epoch {}: loss {:.6f}  E+ {:.6f}  E- {:.6f}", epoch, log.loss, log.mean_e_pos, log.mean_e_neg)
        if metrics_path is not None:
            write_metrics(metrics_path, [log], append=True)
        done = epoch + 1
        if checkpoint_path and (done == config.epochs or (config.checkpoint_every and done % config.checkpoint_every == 0)):
            last_ckpt = checkpoint(done)

    if checkpoint_path and not logs and (resumed_from is None or not _same_file(resumed_from, checkpoint_path)):
        last_ckpt = checkpoint(start_epoch)
    elif checkpoint_path and not logs:
        last_ckpt = str(checkpoint_path)
    return TrainResult(model, logs, adam, last_ckpt)


def _same_file(a: Union[str, Path], b: Union[str, Path]) -> bool:
    return Path(a).resolve() == Path(b).resolve()


def resume_state(ckpt_state: Dict[str, object], model) -> Tuple[int, AdamState]:
    """(next epoch, Adam state) from a checkpoint's ``state`` section."""
    if "epoch" not in ckpt_state:
        return 0, AdamState.zeros(model.params)
    return int(ckpt_state["epoch"]), AdamState.from_state(ckpt_state, model.names)


# -- direct risk minimization ---------------------------------------------------

def _fit(model, loss_fn: Callable, count: int, config: BaselineConfig, label: str,
         progress: Optional[bool]) -> BaselineFit:
    """Shared Adam loop; ``loss_fn(model, ids, bound)`` returns a scalar tensor."""
    adam = AdamState.zeros(model.params)
    names = list(model.params)
    losses = []
    for epoch in tqdm(range(config.epochs), desc=label, disable=not _progress(progress), leave=False):
        batch_losses = []
        for index, ids in enumerate(_batches(count, config.batch_size, config.seed, epoch)):
            tape = Tape()
            bound = model.bind(tape)
            loss = loss_fn(model, ids, bound)
            grads = dict(zip(names, backward(tape, loss, [bound[n] for n in names])))
            if not np.isfinite(loss.item()):
                logger.error("{}: non-finite loss at epoch {}, batch {}", label, epoch, index)
                raise TrainingDivergedError(epoch, index)
            params, adam = adam_step(model.params, grads, adam, **config.adam.model_dump())
            model = model.with_params(params)
            batch_losses.append(loss.item())
        losses.append(float(np.mean(batch_losses)))
        logger.info("{} epoch {}: loss {:.6f}", label, epoch, losses[-1])
    return BaselineFit(model, losses)


def train_baseline(loss_kind: str, dataset: Sequence[Example], config: BaselineConfig, *,
                   info: Optional[TaskInfo] = None, progress: Optional[bool] = None) -> BaselineFit:
    """Regress padded targets directly under the Chamfer or Hungarian loss."""
    if not dataset:
        raise ContractError("training set is empty")
    info = info or task_info(dataset_task(dataset))
    dims = DecoderDims(loss_kind=loss_kind, x_dim=info.x_dim, element_dim=info.element_dim,
                       max_size=info.max_size, hidden=config.hidden)
    model = BaselinePredictor.init(dims, chain_rng(config.seed, INIT))
    x_all = encode_inputs(dataset, info)
    y_all = PaddedSetBatch.from_examples(dataset, info).values

    def loss_fn(m, ids, bound):
        return m.loss(x_all[ids], y_all[ids], bound)

    return _fit(model, loss_fn, len(dataset), config, f"{loss_kind} baseline", progress)


def train_outlier_baseline(dataset: Sequence[Example], config: BaselineConfig, *,
                           progress: Optional[bool] = None) -> BaselineFit:
    """Binary cross-entropy on the per-element outlier indicator."""
    if not dataset:
        raise ContractError("training set is empty")
    info = task_info(dataset_task(dataset))
    if info.name != "anomaly":
        raise ContractError(f"outlier baseline needs the anomaly task, got {info.name}")
    features, labels = split_anomaly(PaddedSetBatch.from_examples(dataset, info).values)
    model = OutlierBaseline.init(OutlierDims(feature_dim=features.shape[-1]), chain_rng(config.seed, INIT))

    def loss_fn(m, ids, bound):
        return m.loss(features[ids], labels[ids], bound)

    return _fit(model, loss_fn, len(dataset), config, "outlier baseline", progress)
