"""Network input/output feature construction.

Static/delta/delta-delta stacking with edge replication, z-score
normalization fitted on the training partition, and seeded Gaussian-noise
augmentation of raw articulatory trajectories.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateDataError, DomainError

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class WindowSet:
    """The three regression windows applied to every static channel.

    ``static`` must be the unit impulse; all windows have odd length and are
    applied centered, with first/last-frame replication at the edges.
    """

    static: tuple = (1.0,)
    delta: tuple = (-0.5, 0.0, 0.5)
    delta_delta: tuple = (1.0, -2.0, 1.0)

    def __post_init__(self):
        for name, win in self.items():
            if len(win) % 2 != 1:
                raise DomainError(f"{name} window must have odd length, got {len(win)}")
        if tuple(self.static) != (1.0,):
            raise DomainError("static window must be the unit impulse [1]")

    def items(self):
        return (
            ("static", tuple(self.static)),
            ("delta", tuple(self.delta)),
            ("delta_delta", tuple(self.delta_delta)),
        )

    @property
    def half_width(self) -> int:
        return max(len(w) // 2 for _, w in self.items())


DEFAULT_WINDOWS = WindowSet()


def stack_deltas(X: np.ndarray, windows: WindowSet = DEFAULT_WINDOWS) -> np.ndarray:
    """Stack [static | delta | delta-delta] feature blocks.

    Parameters
    ----------
    X : (T, D) array
        Static feature sequence, T >= 1.
    windows : WindowSet
        Window coefficients; each derived block is the centered windowed
        convolution of the static channels with first/last frame replication.

    Returns
    -------
    (T, 3*D) array with column blocks ordered [static, delta, delta-delta].
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 1:
        raise DomainError(f"expected non-empty (T, D) input, got shape {X.shape}")
    half = windows.half_width
    padded = np.pad(X, ((half, half), (0, 0)), mode="edge")
    T = X.shape[0]
    blocks = []
    for _, win in windows.items():
        c = len(win) // 2
        block = np.zeros_like(X)
        for j, w in enumerate(win):
            if w == 0.0:
                continue
            offset = half + (j - c)
            block += w * padded[offset:offset + T]
        blocks.append(block)
    return np.concatenate(blocks, axis=1)


@dataclass
class Normalizer:
    """Per-dimension z-score statistics with a variance floor.

    ``std`` is floored at STD_FLOOR so constant dimensions normalize to 0
    and invert exactly.
    """

    mean: np.ndarray
    std: np.ndarray
    floored: np.ndarray = field(default=None)

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.std

    def invert(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z, dtype=float) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        mean = np.asarray(d["mean"], dtype=float)
        std = np.asarray(d["std"], dtype=float)
        return cls(mean=mean, std=std, floored=std <= STD_FLOOR)


def fit_normalizer(frames: np.ndarray | list) -> Normalizer:
    """Fit z-score statistics over all frames of the training partition.

    Accepts a single (N, D) array or a list of (T_i, D) sequences, which are
    concatenated along time.  Requires at least two frames in total.
    """
    if isinstance(frames, (list, tuple)):
        frames = np.concatenate([np.asarray(f, dtype=float) for f in frames], axis=0)
    frames = np.asarray(frames, dtype=float)
    if frames.ndim != 2:
        raise DomainError(f"expected (N, D) frames, got shape {frames.shape}")
    if frames.shape[0] < 2:
        raise DegenerateDataError(
            f"need >= 2 frames to estimate statistics, got {frames.shape[0]}"
        )
    mean = frames.mean(axis=0)
    std = frames.std(axis=0)
    floored = std <= STD_FLOOR
    std = np.where(floored, 1.0, std)
    return Normalizer(mean=mean, std=std, floored=floored)


def _utterance_seed(seed: int, utterance_id: str) -> list[int]:
    digest = hashlib.blake2s(utterance_id.encode("utf-8"), digest_size=8).digest()
    return [int(seed), int.from_bytes(digest, "little")]


def augment(X: np.ndarray, sigma: float, seed: int, utterance_id: str) -> np.ndarray:
    """Add i.i.d. Gaussian noise N(0, sigma^2) to a raw trajectory.

    The generator is keyed on (seed, utterance_id), so the same pair always
    produces the same noise and different utterances never share a stream.
    Noise is applied before delta stacking.
    """
    if sigma < 0:
        raise DomainError(f"sigma must be >= 0, got {sigma}")
    X = np.asarray(X, dtype=float)
    rng = np.random.default_rng(_utterance_seed(seed, utterance_id))
    return X + sigma * rng.standard_normal(X.shape)
