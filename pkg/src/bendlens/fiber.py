"""Speckle measurement simulator.

Stands in for the optical bench: builds one non-negative measurement matrix
per fiber bend configuration, with controllable decorrelation between
configurations, and applies the two-channel measurement normalization.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPKL_MAGIC = b"SPKL"
SPKL_VERSION = 1

WAVEFRONT_SHAPED = "wavefront_shaped"
RANDOM = "random"

DEFAULT_NOISE_STD = 0.015
DEFAULT_DECORRELATION_SCALE = 0.64
DEFAULT_SPECKLE_MEMORY = 0.75

ARM_RANGE_MM = (10.0, 0.0)
ROTATION_RANGE_DEG = (230.0, 280.0)


class FiberSimError(ValueError):
    pass


@dataclass(frozen=True)
class FiberConfiguration:
    """One bend state of the fiber, summarized by a scalar bend parameter t."""

    id: str
    arm_position: float  # mm
    rotation: float  # degrees
    t: float  # 0 at the calibrated end, 1 at the strongest bend


@dataclass
class SpeckleEnsemble:
    M: int
    N: int
    configurations: list[FiberConfiguration]
    matrices: list[np.ndarray]  # one M x N matrix per configuration
    mode: str
    seed: int
    decorrelation_scale: float
    speckle_memory: float = DEFAULT_SPECKLE_MEMORY

    def matrix_for(self, config_id: str) -> np.ndarray:
        for cfg, mat in zip(self.configurations, self.matrices):
            if cfg.id == config_id:
                return mat
        raise FiberSimError(f"unknown configuration id '{config_id}'")

    def config_ids(self) -> list[str]:
        return [c.id for c in self.configurations]


def make_config_grid(count: int,
                     arm_range: tuple[float, float] = ARM_RANGE_MM,
                     rotation_range: tuple[float, float] = ROTATION_RANGE_DEG,
                     ) -> list[FiberConfiguration]:
    """Evenly spaced bend configurations from the calibrated position outwards.

    ids run C_{count-1} .. C_0 so the default 11-point grid is C_10 .. C_0
    (arm 10 mm -> 0 mm, rotation 230 -> 280 degrees).
    """
    if count < 2:
        raise FiberSimError(f"need at least 2 configurations, got {count}")
    configs = []
    for i in range(count):
        t = i / (count - 1)
        arm = arm_range[0] + t * (arm_range[1] - arm_range[0])
        rot = rotation_range[0] + t * (rotation_range[1] - rotation_range[0])
        configs.append(FiberConfiguration(
            id=f"C_{count - 1 - i}", arm_position=arm, rotation=rot, t=t,
        ))
    return configs


def gen_speckle_ensemble(M: int, N: int, configs: list[FiberConfiguration],
                         mode: str = RANDOM,
                         decorrelation_scale: float = DEFAULT_DECORRELATION_SCALE,
                         seed: int = 0,
                         speckle_memory: float = DEFAULT_SPECKLE_MEMORY,
                         ) -> SpeckleEnsemble:
    """Blend a calibrated field with a drifting speckle background per bend.

    A(t) = |cos(theta_t) B0 + sin(theta_t) B_t|^2 with theta_t = t / scale
    clamped to [0, pi/2], rows normalized to unit max. B0 is the calibrated
    field shared by every configuration; B_t is a complex Gaussian background
    that drifts with the bend as a stationary AR(1) chain across the grid
    (step correlation exp(-dt / speckle_memory)), so neighbouring bends share
    partial speckle structure while distant bends look fresh. In
    wavefront_shaped mode B0 carries one focal spot per row (at the row's
    raster position), so A(0) is a raster-scan pattern that degrades into
    speckle as t grows.
    """
    if M < 1 or N < 1:
        raise FiberSimError("M and N must be >= 1")
    if decorrelation_scale <= 0:
        raise FiberSimError("decorrelation_scale must be positive")
    if speckle_memory <= 0:
        raise FiberSimError("speckle_memory must be positive")
    if mode not in (WAVEFRONT_SHAPED, RANDOM):
        raise FiberSimError(f"unknown ensemble mode '{mode}'")
    rng = np.random.default_rng(seed)
    if mode == WAVEFRONT_SHAPED:
        b0 = np.zeros((M, N), dtype=complex)
        spots = (np.arange(M) * N // M) % N
        b0[np.arange(M), spots] = np.sqrt(N)
    else:
        b0 = (rng.normal(size=(M, N)) + 1j * rng.normal(size=(M, N))) / np.sqrt(2.0)
    matrices = []
    b_t = None
    prev_t = None
    for cfg in configs:
        theta = min(cfg.t / decorrelation_scale, np.pi / 2.0)
        fresh = (rng.normal(size=(M, N)) + 1j * rng.normal(size=(M, N))) / np.sqrt(2.0)
        if b_t is None:
            b_t = fresh
        else:
            rho = np.exp(-abs(cfg.t - prev_t) / speckle_memory)
            b_t = rho * b_t + np.sqrt(1.0 - rho * rho) * fresh
        prev_t = cfg.t
        fld = np.cos(theta) * b0 + np.sin(theta) * b_t
        a = np.abs(fld) ** 2
        row_max = a.max(axis=1, keepdims=True)
        row_max[row_max == 0.0] = 1.0
        matrices.append(a / row_max)
    return SpeckleEnsemble(M=M, N=N, configurations=list(configs), matrices=matrices,
                           mode=mode, seed=seed, decorrelation_scale=decorrelation_scale,
                           speckle_memory=speckle_memory)


def forward_measure(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Noiseless projection of an image onto the speckle rows: A x."""
    a = np.asarray(a, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if a.ndim != 2 or a.shape[1] != x.size:
        raise FiberSimError(
            f"dimension mismatch: matrix {a.shape} vs image of {x.size} pixels"
        )
    return a @ x


def _range_normalize(v: np.ndarray) -> tuple[np.ndarray, bool]:
    span = v.max() - v.min()
    if span == 0.0:
        return np.zeros_like(v), True
    return (v - v.min()) / span, False


def apply_normalization(ax: np.ndarray, s: float, w: np.ndarray, b: np.ndarray,
                        channels: str = "both") -> tuple[np.ndarray, bool]:
    """Two-channel measurement normalization.

    Channel 1 range-normalizes the raw projection; channel 2 range-normalizes
    the damping-corrected, background-referenced projection (Ax/s - b)/(w - b).
    Returns (y, degenerate) where degenerate flags a constant projection.
    """
    ax = np.asarray(ax, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if s <= 0:
        raise FiberSimError("damping factor s must be positive")
    if w.shape != ax.shape or b.shape != ax.shape:
        raise FiberSimError("backgrounds must match the measurement length")
    if not np.all(w > b):
        raise FiberSimError("white background must exceed black background elementwise")
    ch1, deg1 = _range_normalize(ax)
    ch2, deg2 = _range_normalize((ax / s - b) / (w - b))
    degenerate = deg1 or deg2
    if channels == "both":
        return np.concatenate([ch1, ch2]), degenerate
    if channels == "first":
        return ch1, degenerate
    if channels == "second":
        return ch2, degenerate
    raise FiberSimError(f"unknown channel selection '{channels}'")


def simulate_backgrounds(a: np.ndarray, dark_level: float = 0.02) -> tuple[np.ndarray, np.ndarray]:
    """Stand-ins for the optically recorded white/black backgrounds."""
    w = forward_measure(a, np.ones(a.shape[1]))
    return w, dark_level * w


def speckle_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of the flattened matrices."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise FiberSimError("correlation needs equal shapes")
    if a.std() == 0.0 or b.std() == 0.0:
        raise FiberSimError("correlation undefined for a zero-variance matrix")
    return float(np.corrcoef(a, b)[0, 1])


# ---- SPKL file format ----------------------------------------------------

class SpeckleFileError(ValueError):
    pass


def save_ensemble(path, ensemble: SpeckleEnsemble) -> None:
    blob = bytearray()
    blob += SPKL_MAGIC
    blob += struct.pack("<IIII", SPKL_VERSION, ensemble.M, ensemble.N,
                        len(ensemble.configurations))
    mode_flag = 1 if ensemble.mode == WAVEFRONT_SHAPED else 0
    blob += struct.pack("<BQdd", mode_flag, ensemble.seed,
                        ensemble.decorrelation_scale, ensemble.speckle_memory)
    for cfg, mat in zip(ensemble.configurations, ensemble.matrices):
        encoded = cfg.id.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<ddd", cfg.t, cfg.arm_position, cfg.rotation)
        blob += np.ascontiguousarray(mat, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_ensemble(path) -> SpeckleEnsemble:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise SpeckleFileError(f"unexpected EOF in ensemble file {path}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != SPKL_MAGIC:
        raise SpeckleFileError(f"bad magic in ensemble file {path}")
    version, m, n, count = struct.unpack("<IIII", take(16))
    if version != SPKL_VERSION:
        raise SpeckleFileError(f"unsupported ensemble version {version} in {path}")
    mode_flag, seed, scale, memory = struct.unpack("<BQdd", take(25))
    configs = []
    matrices = []
    for _ in range(count):
        (id_len,) = struct.unpack("<I", take(4))
        cid = bytes(take(id_len)).decode("utf-8")
        t, arm, rot = struct.unpack("<ddd", take(24))
        mat = np.frombuffer(take(8 * m * n), dtype="<f8").reshape(m, n).copy()
        configs.append(FiberConfiguration(id=cid, arm_position=arm, rotation=rot, t=t))
        matrices.append(mat)
    if pos != len(view):
        raise SpeckleFileError(f"trailing bytes in ensemble file {path}")
    return SpeckleEnsemble(
        M=m, N=n, configurations=configs, matrices=matrices,
        mode=WAVEFRONT_SHAPED if mode_flag else RANDOM,
        seed=seed, decorrelation_scale=scale, speckle_memory=memory,
    )
