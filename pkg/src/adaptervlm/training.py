"""Two-stage training: AdamW with decoupled decay, warmup-cosine schedule,
bit-exact checkpoints, and a deterministic batch/instruction sampler.

Stage 1 does next-token loss on [visual prefix, caption] sequences. Stage 2
prepends a uniformly sampled instruction from a fixed pool and computes the
loss on the response (caption) region only. Every random draw comes from a
generator keyed by (seed, stage, step), so a run resumed from a checkpoint
replays exactly the batches an uninterrupted run would have seen.

Checkpoint files: 8-byte magic ``AG4CKPT1``, a version byte, a 32-byte
config digest, a length-prefixed stage tag, the u64 next step, then
length-prefixed named float64 arrays.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import DatasetManifest, ManifestItem
from .model import ConfigError, Model, ModelConfig
from .policy import ParamPolicy, apply_policy, snapshot
from .tensor import ShapeError, Tensor
from .vision import qformer_stub, project_visual, read_features

CHECKPOINT_MAGIC = b"AG4CKPT1"
CHECKPOINT_VERSION = 1

STAGE_TAGS = ("stage1", "stage2")

# Fixed caption-style instruction pool for stage 2, in the reserved id range
# of the 32-token toy vocabulary.
INSTRUCTION_POOL: tuple[tuple[int, ...], ...] = ((24, 25), (26, 27), (28, 29), (30, 31))

TRACE_HEADER = "step,stage,lr,loss"


class CheckpointError(ValueError):
    """A checkpoint file is corrupt, truncated, or mismatched."""


@dataclass(frozen=True)
class TrainConfig:
    init_lr: float = 1e-7
    min_lr: float = 8e-7
    warmup_lr: float = 1e-8
    weight_decay: float = 0.05
    max_epochs: int = 2
    batch_size: int = 32
    warmup_steps: int = 5000
    iters_per_epoch: int = 5000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if min(self.init_lr, self.min_lr, self.warmup_lr) <= 0:
            raise ConfigError("all learning rates must be > 0")
        if self.max_epochs < 1 or self.iters_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("epochs, iters_per_epoch and batch_size must be positive")
        if self.warmup_steps < 0 or self.warmup_steps > self.total_steps:
            raise ConfigError(
                f"warmup_steps {self.warmup_steps} exceeds total steps {self.total_steps}"
            )
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("invalid Adam constants")

    @property
    def total_steps(self) -> int:
        return self.max_epochs * self.iters_per_epoch


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to init_lr, then half-cosine from init_lr to min_lr."""
    if total_steps <= cfg.warmup_steps:
        raise ValueError(f"total_steps {total_steps} must exceed warmup {cfg.warmup_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.warmup_lr + (cfg.init_lr - cfg.warmup_lr) * step / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / (total_steps - cfg.warmup_steps)
    return cfg.min_lr + 0.5 * (cfg.init_lr - cfg.min_lr) * (1.0 + np.cos(np.pi * frac))


def adamw_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
                 step: int, lr: float, cfg: TrainConfig) -> None:
    """One in-place decoupled-decay Adam step; ``step`` is 1-based."""
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise ShapeError("adamw_update operands must share one shape")
    m *= cfg.beta1
    m += (1.0 - cfg.beta1) * grad
    v *= cfg.beta2
    v += (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1 ** step)
    v_hat = v / (1.0 - cfg.beta2 ** step)
    param -= lr * (m_hat / (np.sqrt(v_hat) + cfg.adam_eps) + cfg.weight_decay * param)


class AdamW:
    """Moment state for the policy-trainable parameters only."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.cfg = cfg
        self.params = params
        self.m = {p: np.zeros_like(t.data) for p, t in params.items()}
        self.v = {p: np.zeros_like(t.data) for p, t in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        for path, p in self.params.items():
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            adamw_update(p.data, grad, self.m[path], self.v[path], self.t, lr, self.cfg)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# -- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    weights: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    step: int
    stage: str
    config_digest: bytes

    def __post_init__(self):
        if self.stage not in STAGE_TAGS:
            raise ValueError(f"stage must be one of {STAGE_TAGS}, got {self.stage!r}")
        if len(self.config_digest) != 32:
            raise ValueError("config digest must be 32 bytes")


def config_digest(model_cfg: ModelConfig, train_cfg: TrainConfig, preset: str) -> bytes:
    blob = json.dumps(
        {"model": asdict(model_cfg), "train": asdict(train_cfg), "preset": preset},
        sort_keys=True,
    ).encode("utf-8")
    return hashlib.sha256(blob).digest()


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    name_b = name.encode("utf-8")
    out = struct.pack("<I", len(name_b)) + name_b
    out += struct.pack("<I", arr.ndim)
    out += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return out


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    arrays: list[tuple[str, np.ndarray]] = list(ckpt.weights.items())
    arrays += [(f"opt.m/{p}", a) for p, a in ckpt.opt_m.items()]
    arrays += [(f"opt.v/{p}", a) for p, a in ckpt.opt_v.items()]
    stage_b = ckpt.stage.encode("utf-8")
    blob = CHECKPOINT_MAGIC
    blob += struct.pack("<B", CHECKPOINT_VERSION)
    blob += ckpt.config_digest
    blob += struct.pack("<B", len(stage_b)) + stage_b
    blob += struct.pack("<Q", ckpt.step)
    blob += struct.pack("<I", len(arrays))
    for name, arr in arrays:
        blob += _pack_array(name, arr)
    Path(path).write_bytes(blob)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated while reading {what}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk


def load_checkpoint(path, expected_digest: Optional[bytes] = None) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version = struct.unpack("<B", r.take(1, "version"))[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    digest = r.take(32, "config digest")
    if expected_digest is not None and digest != expected_digest:
        raise CheckpointError(f"{path}: config digest mismatch")
    stage_len = struct.unpack("<B", r.take(1, "stage tag"))[0]
    stage = r.take(stage_len, "stage tag").decode("utf-8")
    if stage not in STAGE_TAGS:
        raise CheckpointError(f"{path}: corrupt stage tag {stage!r}")
    step = struct.unpack("<Q", r.take(8, "step"))[0]
    count = struct.unpack("<I", r.take(4, "array count"))[0]
    weights: dict[str, np.ndarray] = {}
    opt_m: dict[str, np.ndarray] = {}
    opt_v: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = struct.unpack("<I", r.take(4, "array name length"))[0]
        name = r.take(name_len, "array name").decode("utf-8")
        ndim = struct.unpack("<I", r.take(4, f"{name} ndim"))[0]
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"{name} dims")) if ndim else ()
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(r.take(8 * n, f"{name} data"), dtype="<f8")
        arr = arr.reshape(dims).astype(np.float64)
        if name.startswith("opt.m/"):
            opt_m[name[6:]] = arr
        elif name.startswith("opt.v/"):
            opt_v[name[6:]] = arr
        else:
            weights[name] = arr
    if r.pos != len(r.raw):
        raise CheckpointError(f"{path}: {len(r.raw) - r.pos} trailing bytes")
    return Checkpoint(weights=weights, opt_m=opt_m, opt_v=opt_v,
                      step=step, stage=stage, config_digest=digest)


def load_weights_into(model: Model, weights: dict[str, np.ndarray]) -> None:
    params = model.named_params()
    if set(params) != set(weights):
        missing = sorted(set(params) - set(weights))
        extra = sorted(set(weights) - set(params))
        raise CheckpointError(f"weight paths mismatch: missing {missing}, extra {extra}")
    for path, p in params.items():
        if weights[path].shape != p.shape:
            raise CheckpointError(
                f"{path}: checkpoint shape {weights[path].shape} != model shape {p.shape}"
            )
        p.data[...] = weights[path]


# -- loss trace ---------------------------------------------------------------


@dataclass(frozen=True)
class TracePoint:
    step: int
    stage: str
    lr: float
    loss: float


def write_trace(path, trace: list[TracePoint]) -> None:
    lines = [TRACE_HEADER]
    lines += [f"{p.step},{p.stage},{p.lr!r},{p.loss!r}" for p in trace]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_trace(path) -> list[TracePoint]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != TRACE_HEADER:
        raise ValueError(f"{path}: not a loss trace (missing '{TRACE_HEADER}' header)")
    out = []
    for line in lines[1:]:
        step, stage, lr, loss = line.split(",")
        out.append(TracePoint(int(step), stage, float(lr), float(loss)))
    return out


# -- training loops -----------------------------------------------------------


def _load_feature_cache(manifest: DatasetManifest, items: list[ManifestItem],
                        vis_width: int) -> dict[str, np.ndarray]:
    cache: dict[str, np.ndarray] = {}
    for it in items:
        if it.feature_file not in cache:
            feats = read_features(manifest.feature_path(it))
            if feats.shape[1] != vis_width:
                raise ShapeError(
                    f"{it.id}: feature width {feats.shape[1]} != model vis_width {vis_width}"
                )
            cache[it.feature_file] = feats
    return cache


def _item_loss(model: Model, features: np.ndarray, caption: tuple[int, ...],
               instruction: tuple[int, ...] | None) -> Tensor:
    tokens = qformer_stub(Tensor(features), model.vision.queries)
    prefix = project_visual(tokens, model.vision.proj_w, model.vision.proj_b)
    if instruction is None:
        ids = np.asarray(caption, dtype=np.int64)
        _, loss = model.forward_loss(ids, prefix, prefix_row=0, loss_start=0)
    else:
        ids = np.asarray(list(instruction) + list(caption), dtype=np.int64)
        _, loss = model.forward_loss(ids, prefix, prefix_row=len(instruction),
                                     loss_start=len(instruction))
    return loss


def dataset_loss(model: Model, manifest: DatasetManifest, split: str,
                 pool: tuple[tuple[int, ...], ...] | None = None,
                 pool_index: int = 0) -> float:
    """Mean per-item loss over a split; stage2 items get a fixed instruction."""
    items = manifest.split_items(split)
    if not items:
        raise ValueError(f"no items in split {split!r}")
    cache = _load_feature_cache(manifest, items, model.config.vis_width)
    total = 0.0
    for it in items:
        instruction = pool[pool_index] if pool is not None else None
        loss = _item_loss(model, cache[it.feature_file], it.caption_tokens, instruction)
        total += loss.item()
    return total / len(items)


def caption_accuracy(model: Model, manifest: DatasetManifest, split: str = "stage1") -> float:
    """Fraction of loss-position tokens predicted by greedy argmax."""
    items = manifest.split_items(split)
    if not items:
        raise ValueError(f"no items in split {split!r}")
    cache = _load_feature_cache(manifest, items, model.config.vis_width)
    hits = 0
    total = 0
    for it in items:
        tokens = qformer_stub(Tensor(cache[it.feature_file]), model.vision.queries)
        prefix = project_visual(tokens, model.vision.proj_w, model.vision.proj_b)
        ids = np.asarray(it.caption_tokens, dtype=np.int64)
        logits = model.forward(ids, prefix, prefix_row=0)
        n_prefix = prefix.shape[0]
        for t in range(1, ids.size):
            pred = int(np.argmax(logits.data[n_prefix + t - 1]))
            hits += pred == ids[t]
            total += 1
    return hits / total


def _stage_number(stage: str) -> int:
    return STAGE_TAGS.index(stage) + 1


def _run_stage(model: Model, policy: ParamPolicy, manifest: DatasetManifest,
               cfg: TrainConfig, stage: str,
               pool: tuple[tuple[int, ...], ...] | None,
               resume: Optional[Checkpoint], stop_after: Optional[int],
               ) -> tuple[Checkpoint, list[TracePoint]]:
    items = manifest.split_items(stage)
    if not items:
        raise ValueError(f"empty dataset: no {stage} items")
    if stage == "stage2":
        if pool is None or len(pool) == 0:
            raise ValueError("empty instruction pool")
        top = max(max(instr) for instr in pool)
        if top >= model.config.vocab_size:
            raise ValueError(
                f"instruction token {top} outside vocabulary of size {model.config.vocab_size}"
            )
    cache = _load_feature_cache(manifest, items, model.config.vis_width)
    digest = config_digest(model.config, cfg, policy.preset)

    trainable = apply_policy(model, policy)
    opt = AdamW(trainable, cfg)
    start = 0
    if resume is not None:
        if resume.stage != stage:
            raise CheckpointError(f"cannot resume {stage} from a {resume.stage} checkpoint")
        if resume.config_digest != digest:
            raise CheckpointError("config digest mismatch on resume")
        load_weights_into(model, resume.weights)
        if set(resume.opt_m) != set(trainable):
            raise CheckpointError("optimizer moment paths do not match trainable set")
        for p in trainable:
            opt.m[p][...] = resume.opt_m[p]
            opt.v[p][...] = resume.opt_v[p]
        opt.t = resume.step
        start = resume.step

    total = cfg.total_steps
    end = total if stop_after is None else min(total, stop_after)
    stage_no = _stage_number(stage)
    trace: list[TracePoint] = []
    for step in range(start, end):
        lr = lr_at(step, total, cfg)
        rng = np.random.default_rng([cfg.seed, stage_no, step])
        batch = rng.integers(0, len(items), size=cfg.batch_size)
        losses = []
        for i in batch:
            it = items[int(i)]
            instruction = None
            if stage == "stage2":
                instruction = pool[int(rng.integers(0, len(pool)))]
            losses.append(_item_loss(model, cache[it.feature_file],
                                     it.caption_tokens, instruction))
        total_loss = losses[0]
        for extra in losses[1:]:
            total_loss = total_loss + extra
        total_loss = total_loss * (1.0 / len(losses))
        opt.zero_grad()
        total_loss.backward()
        opt.step(lr)
        trace.append(TracePoint(step=step, stage=stage, lr=lr, loss=total_loss.item()))

    ckpt = Checkpoint(weights=snapshot(model),
                      opt_m={p: a.copy() for p, a in opt.m.items()},
                      opt_v={p: a.copy() for p, a in opt.v.items()},
                      step=end, stage=stage, config_digest=digest)
    return ckpt, trace


def train_stage1(model: Model, policy: ParamPolicy, manifest: DatasetManifest,
                 cfg: TrainConfig, resume: Optional[Checkpoint] = None,
                 stop_after: Optional[int] = None) -> tuple[Checkpoint, list[TracePoint]]:
    """Align on [visual prefix, caption] pairs with next-token loss."""
    return _run_stage(model, policy, manifest, cfg, "stage1", None, resume, stop_after)


def train_stage2(model: Model, policy: ParamPolicy, manifest: DatasetManifest,
                 cfg: TrainConfig, pool: tuple[tuple[int, ...], ...] = INSTRUCTION_POOL,
                 resume: Optional[Checkpoint] = None,
                 stop_after: Optional[int] = None) -> tuple[Checkpoint, list[TracePoint]]:
    """Instruction-templated fine-tune; loss on the response region only."""
    return _run_stage(model, policy, manifest, cfg, "stage2", pool, resume, stop_after)
