"""Loss, optimization schedule, and checkpointing.

The loss has two parts: the squared distance between predicted and true
partners, and a cycle term that feeds the predictions back through the
network with the images swapped and penalizes the distance back to the
original queries. Both passes share parameters, and the gradient flows
through the re-encoding of the predicted coordinates, which is why the
tensor kernel carries sin/cos primitives.

Training runs in three stages: backbone frozen on whole images, everything
unfrozen on whole images at a lower rate, then everything unfrozen on
zoomed crop pairs so inference-time zoom-ins stay in distribution. Stage
lengths here are desk-scale defaults, not the original multi-week schedule.
"""

from __future__ import annotations

import struct
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import ModelConfig, backbone_parameter_names, init_params, model_forward
from .synth import SceneOptions, render_pair, sample_scene_spec, sample_training_crop
from .tensor import AdamState, Tensor, adam_update, backward_accumulate

__all__ = [
    "LossTerms",
    "TrainingPlan",
    "Checkpoint",
    "TrainingDivergedError",
    "CheckpointError",
    "BadCheckpointMagicError",
    "CheckpointVersionError",
    "TruncatedCheckpointError",
    "ConfigMismatchError",
    "compute_loss",
    "loss_graph",
    "train_step",
    "CorpusSampler",
    "run_staged_training",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"COTRCKPT"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """The loss stopped being finite; training state is not trustworthy."""


@dataclass(frozen=True)
class LossTerms:
    corr: float
    cycle: float

    @property
    def total(self):
        return self.corr + self.cycle

    def __str__(self):
        return f"corr={self.corr:.6g} cycle={self.cycle:.6g} total={self.total:.6g}"


def loss_graph(queries, targets, img_a, img_b, params, config):
    """Differentiable (corr, cycle) pair for one batch.

    queries/targets: (B, Q, 2) arrays of matched points, all valid (the
    sampler never emits occluded or out-of-frame pairs). The cycle pass
    runs the network on (img_b, img_a) with the fresh predictions as
    queries, so one training step contains two stacked forward passes.
    """
    dtype = next(iter(params.values())).dtype  # float64 during gradchecks
    q = np.asarray(queries, dtype=dtype)
    t = np.asarray(targets, dtype=dtype)
    if q.shape != t.shape:
        raise T.ShapeError(f"queries {q.shape} vs targets {t.shape}")
    if q.ndim != 3:
        raise T.ShapeError(f"expected (B,Q,2) batches, got {q.shape}")
    denom = 1.0 / (q.shape[0] * q.shape[1])
    if config.variant == "mlp":
        pred = model_forward(params, config, img_a, img_b, Tensor(q),
                             row_stable=False)
        back = model_forward(params, config, img_b, img_a, pred,
                             row_stable=False)
    else:
        # one backbone + one batched encoder pass feed both directions;
        # the BLAS query path trades cross-batch bit-stability (an
        # inference-only contract) for a much cheaper step
        from .model import decode_queries, encode_points, paired_context_memories
        mem_fwd, mem_rev = paired_context_memories(img_a, img_b, params, config)
        emb_q = encode_points(Tensor(q), config.d_model, config.pos_enc_mode)
        pred = decode_queries(emb_q, mem_fwd, params, config, row_stable=False)
        emb_p = encode_points(pred, config.d_model, config.pos_enc_mode)
        back = decode_queries(emb_p, mem_rev, params, config, row_stable=False)
    corr = T.multiply(T.sqnorm(T.subtract(pred, Tensor(t))), denom)
    cycle = T.multiply(T.sqnorm(T.subtract(back, Tensor(q))), denom)
    return corr, cycle


def compute_loss(queries, targets, img_a, img_b, params, config):
    """LossTerms for one batch, without touching any gradient state."""
    with T.no_grad():
        corr, cycle = loss_graph(queries, targets, img_a, img_b, params, config)
    return LossTerms(corr=corr.item(), cycle=cycle.item())


def _stack_batch(batch):
    if not batch:
        raise ValueError("empty training batch")
    img_a = Tensor(np.stack([s.crop_a for s in batch]))
    img_b = Tensor(np.stack([s.crop_b for s in batch]))
    queries = np.stack([s.queries for s in batch])
    targets = np.stack([s.targets for s in batch])
    return queries, targets, img_a, img_b


def train_step(batch, params, opt_state, config, lr, step, frozen=()):
    """One optimizer step on the mean loss of a TrainSample batch.

    Returns (params, opt_state, LossTerms). Deterministic for a fixed
    batch; raises TrainingDivergedError on a non-finite loss.
    """
    queries, targets, img_a, img_b = _stack_batch(batch)
    corr, cycle = loss_graph(queries, targets, img_a, img_b, params, config)
    total = T.add(corr, cycle)
    terms = LossTerms(corr=corr.item(), cycle=cycle.item())
    if not np.isfinite(terms.total):
        raise TrainingDivergedError(
            f"step {step}: non-finite loss ({terms}); aborting")
    grads = backward_accumulate(total, params)
    raw = {k: p.data for k, p in params.items()}
    new_raw, new_state = adam_update(raw, grads, opt_state, lr=lr, step=step,
                                     skip=frozen)
    new_params = {k: Tensor(v, requires_grad=True) for k, v in new_raw.items()}
    return new_params, new_state, terms


# -- data stream ----------------------------------------------------------------


class CorpusSampler:
    """Stream of TrainSamples drawn from a seeded synthetic corpus.

    Scenes are rendered lazily at the model's input size and kept in a
    bounded cache; everything is a pure function of (scene seed, options),
    so eviction never changes values, only speed.
    """

    def __init__(self, scene_seeds, options, model_size, n_corr=100,
                 cache_pairs=256):
        self.scene_seeds = list(scene_seeds)
        if not self.scene_seeds:
            raise ValueError("empty corpus")
        self.options = options
        self.model_size = model_size
        self.native_size = max(model_size, 64)  # renderer floor
        self.n_corr = n_corr
        self._cache = {}
        self._cache_cap = cache_pairs

    def pair(self, seed):
        got = self._cache.get(seed)
        if got is None:
            got = render_pair(sample_scene_spec(seed, self.options), self.native_size)
            if len(self._cache) >= self._cache_cap:
                self._cache.pop(next(iter(self._cache)))
            self._cache[seed] = got
        return got

    def draw(self, rng, zoomed):
        """One valid TrainSample; skipping discarded pairs is part of the
        protocol, so retry across scenes (bounded)."""
        for _ in range(64):
            seed = self.scene_seeds[int(rng.integers(len(self.scene_seeds)))]
            sample = sample_training_crop(self.pair(seed), rng, self.model_size,
                                          zoom=None if zoomed else 1.0,
                                          n_corr=self.n_corr)
            if sample is not None:
                return sample
        raise RuntimeError("corpus kept rejecting crop pairs; motions too extreme?")

    def draw_batch(self, rng, size, zoomed):
        return [self.draw(rng, zoomed) for _ in range(size)]


@dataclass(frozen=True)
class TrainingPlan:
    """Run-level knobs for staged training (model knobs live in ModelConfig)."""

    stage_steps: tuple = (2000, 10000, 2000)
    stage_lrs: tuple = (1e-4, 1e-5, 1e-5)
    batch_size: int = 8
    seed: int = 0
    n_scenes: int = 2000
    scene_seed_base: int = 10_000
    scene_options: SceneOptions = field(default_factory=SceneOptions)
    n_corr: int = 100
    log_every: int = 50
    val_scenes: int = 16

    def scene_seeds(self):
        return range(self.scene_seed_base, self.scene_seed_base + self.n_scenes)

    def val_seeds(self):
        # held-out block far above the training range
        base = self.scene_seed_base + self.n_scenes + 50_000
        return range(base, base + self.val_scenes)


def _validation_loss(sampler, seeds, params, config, rng_seed):
    rng = np.random.default_rng(rng_seed)
    losses = []
    for seed in seeds:
        pair = sampler.pair(seed)
        sample = sample_training_crop(pair, rng, sampler.model_size, zoom=1.0,
                                      n_corr=sampler.n_corr)
        if sample is None:
            continue
        terms = compute_loss(sample.queries[None], sample.targets[None],
                             sample.crop_a[None], sample.crop_b[None],
                             params, config)
        losses.append(terms.total)
    return float(np.mean(losses)) if losses else float("nan")


def run_staged_training(config, plan, log_stream=None, echo=True):
    """Three-stage schedule; returns the final Checkpoint.

    Stage 1 freezes the backbone, stage 2 unfreezes everything, stage 3
    switches the sampler to zoomed crop pairs. Progress lines go to stdout
    (and ``log_stream`` when given) as 'step=.. stage=.. corr=.. cycle=..
    total=..'.
    """
    params = init_params(config, seed=plan.seed)
    opt_state = AdamState.zeros_like({k: p.data for k, p in params.items()})
    sampler = CorpusSampler(plan.scene_seeds(), plan.scene_options,
                            config.input_size, n_corr=plan.n_corr)
    val_sampler = CorpusSampler(plan.val_seeds(), plan.scene_options,
                                config.input_size, n_corr=plan.n_corr,
                                cache_pairs=plan.val_scenes)
    rng = np.random.default_rng(plan.seed)
    frozen_sets = (frozenset(backbone_parameter_names(params)), frozenset(),
                   frozenset())

    def emit(line):
        if echo:
            print(line)
            sys.stdout.flush()
        if log_stream is not None:
            log_stream.write(line + "\n")

    step = 0
    t0 = time.perf_counter()
    prefetch = ThreadPoolExecutor(max_workers=1)
    for stage, (n_steps, lr, frozen) in enumerate(
            zip(plan.stage_steps, plan.stage_lrs, frozen_sets), start=1):
        zoomed = stage == 3
        val = _validation_loss(val_sampler, plan.val_seeds(), params, config,
                               rng_seed=plan.seed + 999)
        emit(f"stage={stage} start val_total={val:.6g}")
        # one-batch lookahead; the single worker consumes the shared rng
        # in the same order a serial loop would, so runs stay bit-identical
        pending = prefetch.submit(sampler.draw_batch, rng, plan.batch_size,
                                  zoomed) if n_steps else None
        for i in range(n_steps):
            step += 1
            batch = pending.result()
            if i + 1 < n_steps:
                pending = prefetch.submit(sampler.draw_batch, rng,
                                          plan.batch_size, zoomed)
            params, opt_state, terms = train_step(batch, params, opt_state,
                                                  config, lr, step,
                                                  frozen=frozen)
            if step % plan.log_every == 0 or step == 1:
                rate = step / (time.perf_counter() - t0)
                emit(f"step={step} stage={stage} {terms} steps_per_s={rate:.2f}")
    prefetch.shutdown()
    val = _validation_loss(val_sampler, plan.val_seeds(), params, config,
                           rng_seed=plan.seed + 999)
    emit(f"training done step={step} val_total={val:.6g}")
    return Checkpoint(config=config, params={k: p.data for k, p in params.items()},
                      opt_state=opt_state, step=step)


# -- checkpoint format ------------------------------------------------------------


class CheckpointError(ValueError):
    pass


class BadCheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    opt_state: AdamState
    step: int

    def param_tensors(self):
        return {k: Tensor(v, requires_grad=True) for k, v in self.params.items()}


def _write_named_block(f, name, arr):
    data = np.ascontiguousarray(arr, dtype="<f4")
    nb = name.encode("utf-8")
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    f.write(struct.pack("<I", data.ndim))
    f.write(struct.pack(f"<{data.ndim}I", *data.shape))
    f.write(data.tobytes())


def save_checkpoint(ckpt, path):
    """Versioned little-endian binary; see the reader for the exact layout."""
    cfg_text = "\n".join(f"{k}={v}" for k, v in ckpt.config.to_dict().items())
    cfg_bytes = cfg_text.encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(cfg_bytes)))
        f.write(cfg_bytes)
        f.write(struct.pack("<I", len(ckpt.params)))
        for name in sorted(ckpt.params):
            _write_named_block(f, name, ckpt.params[name])
        opt_items = ([("adam.m." + k, v) for k, v in sorted(ckpt.opt_state.m.items())]
                     + [("adam.v." + k, v) for k, v in sorted(ckpt.opt_state.v.items())])
        f.write(struct.pack("<I", len(opt_items)))
        for name, arr in opt_items:
            _write_named_block(f, name, arr)
        f.write(struct.pack("<Q", ckpt.step))


class _Reader:
    def __init__(self, raw, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise TruncatedCheckpointError(
                f"{self.path}: needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.raw)}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]


def _read_named_block(r):
    name = r.take(r.u32()).decode("utf-8")
    rank = r.u32()
    shape = struct.unpack(f"<{rank}I", r.take(4 * rank)) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).copy()
    return name, arr


def load_checkpoint(path, expect_config=None):
    """Read a checkpoint; distinct errors for bad magic / version /
    truncation, and a config-mismatch error when the caller pins one."""
    with open(path, "rb") as f:
        raw = f.read()
    r = _Reader(raw, path)
    magic = r.take(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise BadCheckpointMagicError(f"{path}: magic {magic!r}")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, "
                                     f"expected {CHECKPOINT_VERSION}")
    cfg_text = r.take(r.u32()).decode("utf-8")
    cfg_map = dict(line.split("=", 1) for line in cfg_text.splitlines() if line)
    config = ModelConfig.from_dict(cfg_map)
    if expect_config is not None and config != expect_config:
        raise ConfigMismatchError(
            f"{path}: stored config {config} != expected {expect_config}")
    params = dict(_read_named_block(r) for _ in range(r.u32()))
    m, v = {}, {}
    for _ in range(r.u32()):
        name, arr = _read_named_block(r)
        if name.startswith("adam.m."):
            m[name[len("adam.m."):]] = arr
        elif name.startswith("adam.v."):
            v[name[len("adam.v."):]] = arr
        else:
            raise CheckpointError(f"{path}: unknown optimizer block {name!r}")
    step = r.u64()
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes")
    return Checkpoint(config=config, params=params,
                      opt_state=AdamState(m=m, v=v), step=step)
