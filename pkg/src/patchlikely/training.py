"""Maximum-likelihood training of the patch flow.

Owns the patch sampling pipeline, the dequantization convention, the
adaptive-moment optimizer loop, and the checkpoint file format.

Randomness is counter-based: every consumer derives its generator from
(seed, stream), where stream 0 seeds parameter initialization, stream 1 the
actnorm-init batch, and stream 2+t training step t.  A checkpoint therefore
only needs (seed, step) to resume bit-exactly.
"""

from __future__ import annotations

import logging
import struct
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data_io
from . import numerics as nx
from .errors import CheckpointError, ConfigError, NumericsError
from .flow import FlowParams, actnorm_initialize, init_flow_params, log_likelihood
from .numerics import Rng, Tape, Var, gradient

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PLFW"
CHECKPOINT_VERSION = 1

STREAM_PARAMS = 0
STREAM_INIT_BATCH = 1
STREAM_STEP_BASE = 2

# keeps each dequantized value strictly inside its own quantization level in
# float32, so quantize() recovers the original 8-bit value exactly
_U_MARGIN = np.float32(1.0 - 2.0 ** -16)


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

class PatchDataset:
    """Patch source backed by a corpus directory or a single image file.

    Images smaller than the patch size are skipped with a warning; an empty
    source is an error.
    """

    def __init__(self, source, patch_size: int = 16) -> None:
        source = Path(source)
        if source.is_dir():
            paths = data_io.scan_corpus(source)
        elif source.is_file():
            paths = [source]
        else:
            raise FileNotFoundError(f"dataset source not found: {source}")
        if not paths:
            raise ConfigError(f"no images found under {source}")

        self.patch_size = int(patch_size)
        self.source = source
        self.paths: list[Path] = []
        self.images: list[np.ndarray] = []
        for p in paths:
            img = data_io.load_image(p)
            if img.shape[0] < patch_size or img.shape[1] < patch_size:
                warnings.warn(f"{p}: smaller than patch size, skipped")
                continue
            self.paths.append(p)
            self.images.append(img)
        if not self.images:
            raise ConfigError(
                f"no images of at least {patch_size}x{patch_size} under {source}")

    def __len__(self) -> int:
        return len(self.images)


def sample_patches(dataset: PatchDataset, count: int, rng: Rng) -> np.ndarray:
    """Draw ``count`` uint8 patches: image index uniform over the corpus,
    top-left corner uniform over all valid positions of that image."""
    if count < 1:
        raise ConfigError(f"patch count must be >= 1, got {count}")
    ps = dataset.patch_size
    out = np.empty((count, ps, ps, 3), dtype=np.uint8)
    for k in range(count):
        img = dataset.images[int(rng.integers(0, len(dataset.images)))]
        row = int(rng.integers(0, img.shape[0] - ps + 1))
        col = int(rng.integers(0, img.shape[1] - ps + 1))
        out[k] = img[row:row + ps, col:col + ps]
    return out


def dequantize(patch8: np.ndarray, rng: Rng) -> np.ndarray:
    """Map 8-bit values to continuous [-0.5, 0.5): (v + u) / 256 - 0.5 with
    u ~ Uniform[0, 1)."""
    v = np.asarray(patch8)
    u = rng.random01(v.shape) * _U_MARGIN
    return ((v.astype(np.float32) - 128.0) + u) * np.float32(1.0 / 256.0)


def dequantize_deterministic(patch8: np.ndarray) -> np.ndarray:
    """Dequantize with u fixed at 0.5 (level centers); used wherever scoring
    must be reproducible."""
    v = np.asarray(patch8)
    return ((v.astype(np.float32) - 128.0) + np.float32(0.5)) * np.float32(1.0 / 256.0)


def quantize(patch: np.ndarray) -> np.ndarray:
    """Continuous [-0.5, 0.5) values back to 8-bit levels.

    floor((x + 0.5) * 256) recovers dequantized values exactly and equals
    round-half-up of the continuous level (x + 0.5) * 256 - 0.5.
    """
    levels = np.floor(np.asarray(patch, dtype=np.float64) * 256.0 + 128.0)
    return np.clip(levels, 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def nll_loss(batch, params: FlowParams):
    """Mean negative log-likelihood of a batch, in nats.

    Eager numpy inputs give a float (with a per-sample finiteness check
    naming the offending index); recorded parameters give a scalar
    :class:`~.numerics.Var` for differentiation.
    """
    arr = batch.value if isinstance(batch, Var) else np.asarray(batch)
    if arr.ndim != 4 or arr.shape[0] < 1:
        raise ConfigError(f"nll_loss expects a nonempty batch, got shape {arr.shape}")
    logp = log_likelihood(batch, params)
    if isinstance(logp, Var):
        return nx.neg(nx.reduce_mean(logp))
    per_sample = -np.asarray(logp, dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(per_sample))
    if bad.size:
        raise NumericsError(f"non-finite NLL at batch index {int(bad[0])}")
    return float(per_sample.mean())


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 256
    steps: int = 1000
    learning_rate: float = 1e-4
    warmup_steps: int = 500
    checkpoint_every: int = 500
    seed: int = 0
    patch_size: int = 16
    flow_steps: int = 32
    hidden_width: int = 128
    grad_clip: float = 50.0

    def __post_init__(self) -> None:
        for name in ("batch_size", "learning_rate", "warmup_steps",
                     "checkpoint_every", "patch_size", "flow_steps",
                     "hidden_width", "grad_clip"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"TrainConfig.{name} must be positive")
        if self.steps < 0:
            raise ConfigError("TrainConfig.steps must be >= 0")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: FlowParams) -> "AdamState":
        arrays = params.param_arrays()
        return cls(m=[np.zeros_like(a) for a in arrays],
                   v=[np.zeros_like(a) for a in arrays])


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def train_step(params: FlowParams, opt: AdamState, batch: np.ndarray,
               config: TrainConfig, step: int):
    """One adaptive-moment update with linear LR warmup and global-norm
    gradient clipping.  A non-finite loss or gradient skips the update and
    logs the step index."""
    if not params.actnorm_initialized:
        raise NumericsError("train_step requires actnorm-initialized parameters")

    lr = config.learning_rate * min(1.0, (step + 1) / config.warmup_steps)
    tape = Tape()
    leaves = [tape.var(a) for a in params.param_arrays()]
    var_params = params.with_param_arrays(leaves)

    try:
        loss = nll_loss(batch, var_params)
        nll = float(loss.value)
        if not np.isfinite(nll):
            raise NumericsError("non-finite loss")
        grads = gradient(loss, leaves)
    except NumericsError as exc:
        log.warning("step %d skipped: %s", step, exc)
        metrics = {"nll": float("nan"), "grad_norm": float("nan"),
                   "lr": lr, "skipped": True}
        return params, opt, metrics

    gnorm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2))
                              for g in grads)))
    if gnorm > config.grad_clip:
        scale = np.float32(config.grad_clip / gnorm)
        grads = [g * scale for g in grads]

    t = step + 1  # bias correction uses the global step counter
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    new_arrays, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.param_arrays(), grads, opt.m, opt.v):
        m = ADAM_BETA1 * m + np.float32(1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + np.float32(1 - ADAM_BETA2) * g * g
        update = (m / np.float32(c1)) / (np.sqrt(v / np.float32(c2)) + np.float32(ADAM_EPS))
        new_arrays.append(p - np.float32(lr) * update)
        new_m.append(m)
        new_v.append(v)

    new_params = params.with_param_arrays(new_arrays)
    metrics = {"nll": nll, "grad_norm": gnorm, "lr": lr, "skipped": False}
    return new_params, AdamState(new_m, new_v), metrics


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: FlowParams
    opt: AdamState
    step: int
    seed: int


def _pack_tensor(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f4")
    head = struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """Serialize: magic, version, header, tensors (params then optimizer
    moments, canonical order), trailing CRC32.  Little-endian throughout."""
    p = ckpt.params
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    out += struct.pack("<IIII", p.patch_size, p.IN_CHANNELS, p.num_steps,
                       p.hidden_width)
    out += struct.pack("<QQ", ckpt.step, ckpt.seed & Rng.MASK64)
    for a in p.param_arrays():
        out += _pack_tensor(a)
    for a in ckpt.opt.m:
        out += _pack_tensor(a)
    for a in ckpt.opt.v:
        out += _pack_tensor(a)
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes, path) -> None:
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def tensor(self) -> np.ndarray:
        rank = self.u32()
        if rank > 8:
            raise CheckpointError(f"{self.path}: implausible tensor rank {rank}")
        shape = struct.unpack(f"<{rank}I", self.take(4 * rank))
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = self.take(4 * n)
        return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def checkpoint_from_bytes(data: bytes, path="<bytes>") -> Checkpoint:
    if len(data) < 12:
        raise CheckpointError(f"{path}: truncated checkpoint")
    crc_stored = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError(f"{path}: CRC mismatch (corrupt checkpoint)")
    r = _Reader(data[:-4], path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic (not a checkpoint file)")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported version {version} (expected {CHECKPOINT_VERSION})")
    patch_size, channels, k, hidden = (r.u32() for _ in range(4))
    if channels != FlowParams.IN_CHANNELS:
        raise CheckpointError(f"{path}: unsupported channel count {channels}")
    step = r.u64()
    seed = r.u64()

    try:
        skeleton = init_flow_params(patch_size=patch_size, num_steps=k,
                                    hidden_width=hidden, rng=Rng(0))
    except Exception as exc:
        raise CheckpointError(f"{path}: invalid hyperparameters ({exc})") from exc
    expected = [a.shape for a in skeleton.param_arrays()]
    arrays = []
    for shape in expected:
        a = r.tensor()
        if a.shape != shape:
            raise CheckpointError(
                f"{path}: tensor shape {a.shape} does not match expected {shape}")
        arrays.append(a)
    m = []
    v = []
    for shape in expected:
        a = r.tensor()
        if a.shape != shape:
            raise CheckpointError(f"{path}: optimizer tensor shape mismatch")
        m.append(a)
    for shape in expected:
        a = r.tensor()
        if a.shape != shape:
            raise CheckpointError(f"{path}: optimizer tensor shape mismatch")
        v.append(a)
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes")

    params = skeleton.with_param_arrays(arrays)
    params.actnorm_initialized = True  # checkpoints are only written post-init
    return Checkpoint(params=params, opt=AdamState(m, v), step=step, seed=seed)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    try:
        path.write_bytes(checkpoint_bytes(ckpt))
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return checkpoint_from_bytes(data, path)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def step_rng(seed: int, step: int) -> Rng:
    """Generator for training step ``step``; independent of run history."""
    return Rng(seed, stream=STREAM_STEP_BASE + step)


def train(config: TrainConfig, dataset: PatchDataset, out_path=None,
          resume_from: Checkpoint | None = None, log_fn=None) -> Checkpoint:
    """Initialize (or resume), run the optimizer loop, and return the final
    checkpoint; ``log_fn(step, metrics)`` observes every step."""
    if dataset.patch_size != config.patch_size:
        raise ConfigError(f"dataset patch size {dataset.patch_size} differs "
                          f"from config patch size {config.patch_size}")

    if resume_from is not None:
        params = resume_from.params
        opt = resume_from.opt
        start_step = resume_from.step
        if (params.patch_size != config.patch_size
                or params.num_steps != config.flow_steps
                or params.hidden_width != config.hidden_width
                or resume_from.seed != config.seed):
            raise ConfigError("checkpoint hyperparameters differ from config")
    else:
        params = init_flow_params(patch_size=config.patch_size,
                                  num_steps=config.flow_steps,
                                  hidden_width=config.hidden_width,
                                  rng=Rng(config.seed, STREAM_PARAMS))
        init_rng = Rng(config.seed, STREAM_INIT_BATCH)
        init_count = max(2, config.batch_size)
        init_batch = dequantize(sample_patches(dataset, init_count, init_rng),
                                init_rng)
        params = actnorm_initialize(init_batch, params)
        opt = AdamState.zeros_like(params)
        start_step = 0

    ckpt = Checkpoint(params=params, opt=opt, step=start_step, seed=config.seed)
    for step in range(start_step, config.steps):
        rng = step_rng(config.seed, step)
        batch8 = sample_patches(dataset, config.batch_size, rng)
        batch = dequantize(batch8, rng)
        params, opt, metrics = train_step(params, opt, batch, config, step)
        if log_fn is not None:
            log_fn(step, metrics)
        ckpt = Checkpoint(params=params, opt=opt, step=step + 1, seed=config.seed)
        if out_path is not None and (step + 1) % config.checkpoint_every == 0:
            save_checkpoint(ckpt, out_path)
    if out_path is not None:
        save_checkpoint(ckpt, out_path)
    return ckpt
