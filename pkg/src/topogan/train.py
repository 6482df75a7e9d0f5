"""Alternating adversarial training: one D update then one G update per step.

An "iteration" is one pass over the dataset (ceil(n / batch) steps); batch
order is a fresh seeded shuffle per iteration, derived from (seed, iteration)
so that a resumed run replays the identical order. All other randomness
(noise, mismatch draws) comes from one generator whose state rides along in
the checkpoint, making interrupt/resume bit-identical.

Checkpoint binary (little-endian): magic "CRCG", u32 version=1, u64 step,
u32 tensor count; per tensor u16 name length, UTF-8 name, u8 ndim, u32 dims,
f64 data. Network/optimizer structure travels as 0-d "meta.*" tensors; the
trailing length-prefixed blob holds the rng state. Metrics are one JSON
object per line with keys step, iter, d_loss, g_loss, diversity,
mean_score_real, mean_score_fake, mean_score_mismatch (null when unused),
wall_ms.
"""
from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import AdamState, Tensor, adam_step
from .data import Dataset
from .exceptions import (
    ConsistencyError,
    ContractError,
    DomainError,
    FormatError,
    ParameterError,
    TrainingAbort,
)
from .nets import (
    Discriminator,
    DiscriminatorSpec,
    Generator,
    GeneratorSpec,
    build_discriminator,
    build_generator,
)
from .objectives import (
    ConditionSampler,
    ScoreBatch,
    get_objective,
    objective_names,
    sample_mismatched_condition,
)

log = logging.getLogger(__name__)

CKPT_MAGIC = b"CRCG"
CKPT_VERSION = 1

COLLAPSE_WINDOW = 100    # trailing steps for the diversity median
COLLAPSE_FACTOR = 0.1    # warn when diversity < factor * trailing median


@dataclass(frozen=True)
class TrainConfig:
    objective: str
    batch_size: int = 100
    steps: int | None = None              # total steps (including resumed ones)
    iterations: int | None = None         # alternative budget: dataset passes
    steps_per_iteration: int | None = None  # default ceil(dataset / batch)
    seed: int = 0
    z_dim: int = 64
    gen_channels: tuple[int, int] = (128, 64)
    disc_channels: tuple[int, int] = (32, 64)
    feature_dim: int = 64
    minibatch_discrimination: bool = True
    minibatch_kernels: int = 32
    minibatch_dim: int = 8
    non_saturating: bool = True
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    mismatch_margin: float = 0.05
    checkpoint_every: int = 0             # 0: final checkpoint only
    metrics_every: int = 1

    def __post_init__(self):
        get_objective(self.objective)
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.minibatch_discrimination and self.batch_size < 2:
            raise ParameterError("minibatch discrimination needs batch_size >= 2")
        if (self.steps is None) == (self.iterations is None):
            raise ParameterError("set exactly one of steps or iterations")
        budget = self.steps if self.steps is not None else self.iterations
        if budget < 0:
            raise ParameterError("budget must be >= 0")
        if self.lr <= 0:
            raise ParameterError("lr must be positive")

    def resolve_steps(self, dataset_size: int) -> tuple[int, int]:
        """(total steps, steps per iteration) for a concrete dataset."""
        spi = self.steps_per_iteration
        if spi is None:
            spi = max(1, -(-dataset_size // self.batch_size))
        total = self.steps if self.steps is not None else self.iterations * spi
        return total, spi


@dataclass
class TrainState:
    config: TrainConfig
    gen: Generator
    disc: Discriminator
    adam_g: AdamState
    adam_d: AdamState
    rng: np.random.Generator
    sampler: ConditionSampler
    step: int = 0
    diversity_history: list = None

    def __post_init__(self):
        if self.diversity_history is None:
            self.diversity_history = []


def _sampler_for(dataset: Dataset, config: TrainConfig) -> ConditionSampler:
    if dataset.kind == "class":
        return ConditionSampler(kind="class", cardinality=dataset.cardinality,
                                seed=config.seed)
    lo = float(dataset.conditions.min())
    hi = float(dataset.conditions.max())
    if hi - lo < config.mismatch_margin:
        hi = lo + max(2 * config.mismatch_margin, 1e-3)
    return ConditionSampler(kind="continuous", low=lo, high=min(hi, 1.0),
                            margin=config.mismatch_margin, seed=config.seed)


def init_state(config: TrainConfig, dataset: Dataset) -> TrainState:
    h, w = dataset.height, dataset.width
    gen_spec = GeneratorSpec(
        out_h=h, out_w=w, z_dim=config.z_dim, condition_kind=dataset.kind,
        condition_cardinality=dataset.cardinality, channels=config.gen_channels)
    disc_spec = DiscriminatorSpec(
        in_h=h, in_w=w, condition_kind=dataset.kind,
        condition_cardinality=dataset.cardinality, channels=config.disc_channels,
        feature_dim=config.feature_dim, minibatch=config.minibatch_discrimination,
        minibatch_kernels=config.minibatch_kernels, minibatch_dim=config.minibatch_dim)
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    gen = build_generator(gen_spec, seed=seeds[0])
    disc = build_discriminator(disc_spec, seed=seeds[1])
    gp, dp = list(gen.params().values()), list(disc.params().values())
    return TrainState(
        config=config, gen=gen, disc=disc,
        adam_g=AdamState.for_params(gp, config.lr, config.beta1, config.beta2, config.eps),
        adam_d=AdamState.for_params(dp, config.lr, config.beta1, config.beta2, config.eps),
        rng=np.random.default_rng(seeds[2]),
        sampler=_sampler_for(dataset, config),
    )


def epoch_order(seed: int, iteration: int, dataset_size: int) -> np.ndarray:
    """Shuffled sample order for one iteration, a pure function of its inputs."""
    return np.random.default_rng([seed, 7919, iteration]).permutation(dataset_size)


def batch_indices(config: TrainConfig, spi: int, step: int, dataset_size: int) -> np.ndarray:
    """Dataset indices for 0-based global step; short tails wrap within the epoch."""
    iteration, pos = divmod(step, spi)
    order = epoch_order(config.seed, iteration, dataset_size)
    idx = order[pos * config.batch_size:(pos + 1) * config.batch_size]
    if idx.size < config.batch_size:
        idx = np.concatenate([idx, order[:config.batch_size - idx.size]])
    return idx


def diversity_metric(images: np.ndarray) -> float:
    """Mean pairwise L1 distance between images, normalized by pixel count."""
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    if n < 2:
        raise ContractError("diversity metric needs at least 2 images")
    flat = images.reshape(n, -1)
    pixels = flat.shape[1]
    # per pixel column: sum_{i<j} |x_i - x_j| = sum_k (2k - n + 1) x_(k)
    coeff = 2.0 * np.arange(n) - (n - 1)
    total = float((np.sort(flat, axis=0) * coeff[:, None]).sum())
    return total / (n * (n - 1) / 2 * pixels)


def _mismatch_conditions(conds: np.ndarray, sampler: ConditionSampler,
                         rng: np.random.Generator) -> np.ndarray:
    return np.array([
        float(sample_mismatched_condition(float(c), sampler, rng=rng)) for c in conds
    ])


def _mismatch_partners(conds: np.ndarray, sampler: ConditionSampler,
                       rng: np.random.Generator) -> np.ndarray:
    """Index j per sample i with a differing condition, drawn within the batch."""
    out = np.empty(conds.size, dtype=np.int64)
    for i, c in enumerate(conds):
        if sampler.kind == "class":
            candidates = np.flatnonzero(conds.astype(int) != int(c))
        else:
            candidates = np.flatnonzero(np.abs(conds - c) >= sampler.margin)
        if candidates.size == 0:
            raise ContractError(
                "crcgan-b needs each batch to contain differing conditions")
        out[i] = candidates[rng.integers(0, candidates.size)]
    return out


def training_step(state: TrainState, images: np.ndarray,
                  conditions: np.ndarray) -> dict:
    """One discriminator update followed by one generator update (fresh noise)."""
    cfg = state.config
    if images.shape[0] != cfg.batch_size:
        raise ContractError(
            f"batch size {images.shape[0]} != configured {cfg.batch_size}")
    objective = get_objective(cfg.objective)
    t0 = time.monotonic()
    b = cfg.batch_size
    x_real = np.asarray(images, dtype=np.float64)[:, None, :, :]
    conds = np.asarray(conditions, dtype=np.float64)

    gen_params = state.gen.params()
    disc_params = state.disc.params()

    # discriminator update
    z = state.rng.standard_normal((b, cfg.z_dim))
    fake = state.gen.forward(z, conds).detach()
    d_real = state.disc.forward(x_real, conds)
    d_mismatch = None
    if objective.needs_mismatch:
        if cfg.objective == "crcgan-a":
            y2 = _mismatch_conditions(conds, state.sampler, state.rng)
            d_mismatch = state.disc.forward(x_real, y2)
        else:  # crcgan-b: second real samples whose condition differs from y
            partners = _mismatch_partners(conds, state.sampler, state.rng)
            d_mismatch = state.disc.forward(x_real[partners], conds)
    d_fake = state.disc.forward(fake, conds)
    scores = ScoreBatch(d_real_matched=d_real, d_fake=d_fake,
                        d_real_mismatched=d_mismatch)
    d_loss, _ = objective.loss_fn(scores, non_saturating=cfg.non_saturating)
    if not np.isfinite(d_loss.item()):
        raise TrainingAbort(f"non-finite discriminator loss at step {state.step + 1}")
    for p in disc_params.values():
        p.zero_grad()
    d_loss.backward()
    adam_step(list(disc_params.values()),
              [p.grad for p in disc_params.values()], state.adam_d)

    # generator update on fresh noise, against the just-updated discriminator
    z2 = state.rng.standard_normal((b, cfg.z_dim))
    fake2 = state.gen.forward(z2, conds)
    d_fake2 = state.disc.forward(fake2, conds)
    g_scores = ScoreBatch(
        d_real_matched=d_real.detach(), d_fake=d_fake2,
        d_real_mismatched=None if d_mismatch is None else d_mismatch.detach())
    _, g_loss = objective.loss_fn(g_scores, non_saturating=cfg.non_saturating)
    if not np.isfinite(g_loss.item()):
        raise TrainingAbort(f"non-finite generator loss at step {state.step + 1}")
    for p in gen_params.values():
        p.zero_grad()
    for p in disc_params.values():
        p.zero_grad()
    g_loss.backward()
    adam_step(list(gen_params.values()),
              [p.grad for p in gen_params.values()], state.adam_g)

    diversity = diversity_metric(fake2.data[:, 0, :, :])
    collapse_warning = False
    history = state.diversity_history
    if len(history) >= COLLAPSE_WINDOW:
        trailing = float(np.median(history[-COLLAPSE_WINDOW:]))
        if diversity < COLLAPSE_FACTOR * trailing:
            collapse_warning = True
            log.warning("possible mode collapse at step %d: diversity %.3e "
                        "< %.1f%% of trailing median %.3e",
                        state.step + 1, diversity, 100 * COLLAPSE_FACTOR, trailing)
    history.append(diversity)

    state.step += 1
    return {
        "step": state.step,
        "d_loss": d_loss.item(),
        "g_loss": g_loss.item(),
        "diversity": diversity,
        "mean_score_real": float(d_real.data.mean()),
        "mean_score_fake": float(d_fake.data.mean()),
        "mean_score_mismatch": None if d_mismatch is None
        else float(d_mismatch.data.mean()),
        "collapse_warning": collapse_warning,
        "wall_ms": (time.monotonic() - t0) * 1000.0,
    }


# ---------------------------------------------------------------------------
# checkpoint serialization

def _rng_blob(rng: np.random.Generator) -> bytes:
    return json.dumps(rng.bit_generator.state).encode("utf-8")


def _rng_from_blob(blob: bytes) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = json.loads(blob.decode("utf-8"))
    return rng


def save_checkpoint(path, step: int, tensors: dict[str, np.ndarray],
                    rng_blob: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQI", CKPT_VERSION, step, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.astype("<f8").tobytes())
        fh.write(struct.pack("<I", len(rng_blob)))
        fh.write(rng_blob)


def load_checkpoint(path) -> tuple[int, dict[str, np.ndarray], bytes]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20:
        raise FormatError("truncated checkpoint header", offset=len(blob))
    if blob[:4] != CKPT_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}", offset=0)
    version, step, count = struct.unpack_from("<IQI", blob, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    offset = 20
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            dims = struct.unpack_from(f"<{ndim}I", blob, offset) if ndim else ()
            offset += 4 * ndim
            n_values = int(np.prod(dims)) if ndim else 1
            if len(blob) < offset + 8 * n_values:
                raise FormatError("truncated tensor data", offset=offset)
            arr = np.frombuffer(blob, dtype="<f8", count=n_values, offset=offset)
            offset += 8 * n_values
            tensors[name] = arr.reshape(dims).copy()
        (blob_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        rng_blob = blob[offset:offset + blob_len]
        if len(rng_blob) != blob_len:
            raise FormatError("truncated rng state blob", offset=offset)
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}", offset=offset) from exc
    return step, tensors, rng_blob


_KIND_CODE = {"continuous": 0.0, "class": 1.0}


def _state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    cfg = state.config
    tensors: dict[str, np.ndarray] = {}
    for name, p in state.gen.params().items():
        tensors[f"g.{name}"] = p.data
    for name, p in state.disc.params().items():
        tensors[f"d.{name}"] = p.data
    for (prefix, net, adam) in (("g", state.gen, state.adam_g),
                                ("d", state.disc, state.adam_d)):
        for (name, _), m, v in zip(net.params().items(), adam.m, adam.v):
            tensors[f"adam.{prefix}.m.{name}"] = m
            tensors[f"adam.{prefix}.v.{name}"] = v
        tensors[f"meta.adam_step_{prefix}"] = np.float64(adam.step)
    kind = state.gen.spec.condition_kind
    meta = {
        "objective": float(objective_names().index(cfg.objective)),
        "batch_size": float(cfg.batch_size),
        "seed": float(cfg.seed),
        "z_dim": float(cfg.z_dim),
        "out_h": float(state.gen.spec.out_h),
        "out_w": float(state.gen.spec.out_w),
        "cond_kind": _KIND_CODE[kind],
        "cond_cardinality": float(state.gen.spec.condition_cardinality),
        "gen_c0": float(cfg.gen_channels[0]),
        "gen_c1": float(cfg.gen_channels[1]),
        "disc_c1": float(cfg.disc_channels[0]),
        "disc_c2": float(cfg.disc_channels[1]),
        "feature_dim": float(cfg.feature_dim),
        "minibatch": float(cfg.minibatch_discrimination),
        "minibatch_kernels": float(cfg.minibatch_kernels),
        "minibatch_dim": float(cfg.minibatch_dim),
        "non_saturating": float(cfg.non_saturating),
        "lr": cfg.lr,
        "beta1": cfg.beta1,
        "beta2": cfg.beta2,
        "eps": cfg.eps,
        "mismatch_margin": cfg.mismatch_margin,
    }
    for key, value in meta.items():
        tensors[f"meta.{key}"] = np.float64(value)
    # trailing window only: it is all the collapse monitor ever looks at
    tensors["meta.diversity_history"] = np.asarray(
        state.diversity_history[-COLLAPSE_WINDOW:], dtype=np.float64)
    return tensors


def write_state(state: TrainState, path) -> None:
    save_checkpoint(path, state.step, _state_tensors(state), _rng_blob(state.rng))


def config_from_checkpoint(path, steps: int | None = None,
                           iterations: int | None = None, **overrides) -> TrainConfig:
    """Rebuild the structural TrainConfig stored in a checkpoint's meta tensors."""
    _, tensors, _ = load_checkpoint(path)

    def meta(key):
        return float(tensors[f"meta.{key}"])

    if steps is None and iterations is None:
        steps = 0
    return TrainConfig(
        objective=objective_names()[int(meta("objective"))],
        batch_size=int(meta("batch_size")),
        steps=steps, iterations=iterations,
        seed=int(meta("seed")),
        z_dim=int(meta("z_dim")),
        gen_channels=(int(meta("gen_c0")), int(meta("gen_c1"))),
        disc_channels=(int(meta("disc_c1")), int(meta("disc_c2"))),
        feature_dim=int(meta("feature_dim")),
        minibatch_discrimination=bool(meta("minibatch")),
        minibatch_kernels=int(meta("minibatch_kernels")),
        minibatch_dim=int(meta("minibatch_dim")),
        non_saturating=bool(meta("non_saturating")),
        lr=meta("lr"), beta1=meta("beta1"), beta2=meta("beta2"), eps=meta("eps"),
        mismatch_margin=meta("mismatch_margin"),
        **overrides,
    )


def load_state(path, dataset: Dataset, config: TrainConfig) -> TrainState:
    """Restore a TrainState; `config` must structurally match the checkpoint."""
    stored = config_from_checkpoint(path, steps=config.steps,
                                    iterations=config.iterations,
                                    steps_per_iteration=config.steps_per_iteration,
                                    checkpoint_every=config.checkpoint_every,
                                    metrics_every=config.metrics_every)
    if stored != config:
        raise ConsistencyError(
            "config does not match checkpoint structure "
            f"(stored {stored}, requested {config})")
    step, tensors, rng_blob = load_checkpoint(path)
    state = init_state(config, dataset)
    for name, p in state.gen.params().items():
        p.data[...] = tensors[f"g.{name}"]
    for name, p in state.disc.params().items():
        p.data[...] = tensors[f"d.{name}"]
    for prefix, net, adam in (("g", state.gen, state.adam_g),
                              ("d", state.disc, state.adam_d)):
        adam.step = int(float(tensors[f"meta.adam_step_{prefix}"]))
        for i, (name, _) in enumerate(net.params().items()):
            adam.m[i][...] = tensors[f"adam.{prefix}.m.{name}"]
            adam.v[i][...] = tensors[f"adam.{prefix}.v.{name}"]
    state.step = step
    state.rng = _rng_from_blob(rng_blob)
    state.diversity_history = tensors["meta.diversity_history"].tolist()
    return state


# ---------------------------------------------------------------------------
# training driver

@dataclass
class TrainOutcome:
    checkpoint_path: Path
    metrics_path: Path
    state: TrainState


def train(config: TrainConfig, dataset: Dataset, out_dir,
          resume_from=None) -> TrainOutcome:
    """Run the training budget; write metrics JSONL and checkpoints under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    final_path = out_dir / "final.ckpt"

    if dataset.kind == "class" and get_objective(config.objective).needs_mismatch \
            and dataset.cardinality < 2:
        raise DomainError("mismatch objectives need at least 2 classes")

    if resume_from is not None:
        state = load_state(resume_from, dataset, config)
        mode = "a"
    else:
        state = init_state(config, dataset)
        mode = "w"
    total_steps, spi = config.resolve_steps(len(dataset))

    with open(metrics_path, mode, encoding="utf-8") as metrics_fh:
        while state.step < total_steps:
            idx = batch_indices(config, spi, state.step, len(dataset))
            try:
                record = training_step(
                    state, dataset.images[idx], dataset.conditions[idx])
            except TrainingAbort as exc:
                snapshot = out_dir / f"diverged_step{state.step}.ckpt"
                write_state(state, snapshot)
                raise TrainingAbort(str(exc), snapshot_path=snapshot) from exc
            record["iter"] = (record["step"] - 1) // spi
            if state.step % config.metrics_every == 0 or state.step == total_steps:
                metrics_fh.write(json.dumps(record) + "\n")
            if config.checkpoint_every and state.step % config.checkpoint_every == 0:
                write_state(state, out_dir / f"step{state.step:08d}.ckpt")
    write_state(state, final_path)
    return TrainOutcome(checkpoint_path=final_path, metrics_path=metrics_path,
                        state=state)


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# sampling from a checkpoint

def generator_from_checkpoint(path) -> tuple[Generator, dict]:
    _, tensors, _ = load_checkpoint(path)

    def meta(key):
        return float(tensors[f"meta.{key}"])

    kind = "class" if meta("cond_kind") == 1.0 else "continuous"
    spec = GeneratorSpec(
        out_h=int(meta("out_h")), out_w=int(meta("out_w")),
        z_dim=int(meta("z_dim")), condition_kind=kind,
        condition_cardinality=int(meta("cond_cardinality")),
        channels=(int(meta("gen_c0")), int(meta("gen_c1"))))
    gen = build_generator(spec, seed=0)
    for name, p in gen.params().items():
        p.data[...] = tensors[f"g.{name}"]
    return gen, {k[len("meta."):]: float(v) for k, v in tensors.items()
                 if k.startswith("meta.") and v.ndim == 0}


def sample(checkpoint_path, condition, count: int, seed: int) -> np.ndarray:
    """Generate `count` images at a fixed condition; deterministic given seed."""
    gen, _ = generator_from_checkpoint(checkpoint_path)
    spec = gen.spec
    if isinstance(condition, (int, np.integer)) and spec.condition_kind == "continuous":
        condition = float(condition)
    if spec.condition_kind == "class":
        condition = int(condition)
        if not (0 <= condition < spec.condition_cardinality):
            raise DomainError(
                f"class {condition} outside cardinality {spec.condition_cardinality}")
    else:
        condition = float(condition)
        if not (0.0 <= condition <= 1.0):
            raise DomainError(f"continuous condition {condition} outside [0, 1]")
    if count == 0:
        return np.empty((0, spec.out_h, spec.out_w))
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((count, spec.z_dim))
    conds = np.full(count, condition, dtype=np.float64)
    images = gen.forward(z, conds).data[:, 0, :, :]
    return images
