"""
Truncated Langevin sampling and the noisy-then-deterministic prediction optimizer.

Both drive set values Y by the clipped energy gradient ∂E/∂Y:

    Y ← Y − λ·clip(∂E/∂Y) + Z,   Z ~ N(0, noise_std²·I)

with no Metropolis correction. Negatives use noise on every step; prediction
uses noise for the first S of T steps and plain descent afterwards. Every
chain owns a numpy Generator derived from (seed, chain key), so a chain's
trajectory does not depend on which other chains share its batch.
"""
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from lib.config import SamplerConfig, chain_rng
from lib.datasets import PAD_THRESHOLD
from lib.errors import ContractError, SamplerDivergenceError
from lib.set_networks import PaddedSetBatch
from lib.tensor_autodiff import Tape, Tensor, backward, reduce_sum

EnergyFn = Callable[[np.ndarray, Tensor], Tensor]
ChainKey = Tuple[int, ...]


@dataclass(frozen=True)
class ClampSpec:
    """Coordinates outside ``free_mask`` stay pinned to ``values``."""

    values: np.ndarray
    free_mask: np.ndarray

    def apply(self, y: np.ndarray) -> np.ndarray:
        return np.where(self.free_mask, y, self.values)


@dataclass
class Chain:
    """A batch of chains advanced in lock step; ``rngs[b]`` belongs to chain b."""

    y: np.ndarray
    rngs: List[np.random.Generator]
    step: int = 0
    clipped: List[float] = field(default_factory=list)


def energy_and_grad(energy_fn: EnergyFn, x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-chain energies and ∂E/∂Y (chains are independent, so one sum suffices)."""
    tape = Tape()
    yt = tape.leaf(y)
    energies = energy_fn(x, yt)
    (grad,) = backward(tape, reduce_sum(energies), [yt])
    return energies.data.copy(), grad


def clip_rows(grad: np.ndarray, max_norm: float) -> Tuple[np.ndarray, float]:
    """Scale every element's gradient to L2 norm ≤ ``max_norm``; returns the clipped fraction."""
    norms = np.linalg.norm(grad, axis=-1, keepdims=True)
    over = norms > max_norm
    factor = np.where(over, max_norm / np.where(over, norms, 1.0), 1.0)
    return grad * factor, float(over.mean()) if over.size else 0.0


def _check_finite(values: np.ndarray, step: int) -> None:
    if values.size == 0:
        return
    bad = ~np.isfinite(values).reshape(values.shape[0], -1).all(axis=1)
    if bad.any():
        raise SamplerDivergenceError(step, int(np.flatnonzero(bad)[0]))


def langevin_step(energy_fn: EnergyFn, x: np.ndarray, y: np.ndarray, noise_std: float,
                  rngs: Sequence[np.random.Generator], *, step_size: float, grad_clip: float,
                  step: int = 0, clamp: Optional[ClampSpec] = None) -> Tuple[np.ndarray, float]:
    """One transition ``y − λ·clip(∂E/∂y) + Z``; returns the new values and the clipped fraction."""
    _check_finite(y, step)
    _, grad = energy_and_grad(energy_fn, x, y)
    _check_finite(grad, step)
    grad, clipped = clip_rows(grad, grad_clip)
    out = y - step_size * grad
    if noise_std > 0:
        out = out + np.stack([rng.normal(0.0, noise_std, size=y.shape[1:]) for rng in rngs])
    if clamp is not None:
        out = clamp.apply(out)
    return out, clipped


def init_chain(config: SamplerConfig, shape: Tuple[int, int], keys: Sequence[ChainKey],
               clamp: Optional[ClampSpec] = None) -> Chain:
    """Y⁽⁰⁾ ~ N(0, init_std²) per chain, drawn from that chain's own stream."""
    rngs = [chain_rng(config.seed, *key) for key in keys]
    y = np.stack([rng.normal(0.0, config.init_std, size=shape) for rng in rngs]) if rngs \
        else np.zeros((0,) + tuple(shape))
    if clamp is not None:
        y = clamp.apply(y)
    return Chain(y, rngs)


def run_chain(energy_fn: EnergyFn, x: np.ndarray, chain: Chain, config: SamplerConfig, noisy_steps: int,
              clamp: Optional[ClampSpec] = None) -> Chain:
    """Advance ``chain`` to step T; the first ``noisy_steps`` steps add noise."""
    while chain.step < config.T:
        noise = config.noise_std if chain.step < noisy_steps else 0.0
        chain.y, clipped = langevin_step(energy_fn, x, chain.y, noise, chain.rngs, step_size=config.step_size,
                                         grad_clip=config.grad_clip, step=chain.step, clamp=clamp)
        chain.clipped.append(clipped)
        chain.step += 1
    if chain.clipped:
        logger.debug("chain finished: {} steps, mean clipped fraction {:.3f}",
                     chain.step, float(np.mean(chain.clipped)))
    return chain


def _keys(batch: int, chain_keys: Optional[Sequence[ChainKey]]) -> List[ChainKey]:
    if chain_keys is None:
        return [(b,) for b in range(batch)]
    if len(chain_keys) != batch:
        raise ContractError(f"{len(chain_keys)} chain keys for a batch of {batch}")
    return [tuple(k) for k in chain_keys]


def _shape(energy_fn: EnergyFn, shape: Optional[Tuple[int, int]]) -> Tuple[int, int]:
    if shape is not None:
        return tuple(shape)
    dims = getattr(energy_fn, "dims", None)
    if dims is None:
        raise ContractError("set shape is required for energies without an architecture descriptor")
    return dims.max_size, dims.element_dim


def sample_negative(energy_fn: EnergyFn, x: np.ndarray, config: SamplerConfig, *,
                    shape: Optional[Tuple[int, int]] = None, chain_keys: Optional[Sequence[ChainKey]] = None,
                    clamp: Optional[ClampSpec] = None) -> np.ndarray:
    """Y⁽ᵀ⁾ after T noisy steps from a Gaussian start; a plain array, detached from θ."""
    x = np.asarray(x, dtype=np.float64)
    chain = init_chain(config, _shape(energy_fn, shape), _keys(x.shape[0], chain_keys), clamp)
    return run_chain(energy_fn, x, chain, config, config.T, clamp).y.copy()


def predict_values(energy_fn: EnergyFn, x: np.ndarray, config: SamplerConfig, *,
                   shape: Optional[Tuple[int, int]] = None, chain_keys: Optional[Sequence[ChainKey]] = None,
                   clamp: Optional[ClampSpec] = None) -> np.ndarray:
    """Raw Y⁽ᵀ⁾ of the prediction schedule: S noisy steps, then T − S descent steps."""
    x = np.asarray(x, dtype=np.float64)
    chain = init_chain(config, _shape(energy_fn, shape), _keys(x.shape[0], chain_keys), clamp)
    return run_chain(energy_fn, x, chain, config, config.S, clamp).y.copy()


def predict(energy_fn: EnergyFn, x: np.ndarray, config: SamplerConfig, *,
            shape: Optional[Tuple[int, int]] = None, chain_keys: Optional[Sequence[ChainKey]] = None,
            clamp: Optional[ClampSpec] = None, threshold: float = PAD_THRESHOLD) -> PaddedSetBatch:
    """Predicted sets, unpadded at ``threshold`` and compacted."""
    values = predict_values(energy_fn, x, config, shape=shape, chain_keys=chain_keys, clamp=clamp)
    return PaddedSetBatch.from_prediction(values, threshold)
