"""Deterministic contrastive fine-tuning loop.

One optimizer step embeds a batch of triplets (premise, entailment,
contradiction), evaluates the configured contrastive objective, and updates
only the adapter parameters with the decoupled-weight-decay adaptive-moment
rule under a linear-warmup + cosine-annealing learning-rate schedule.

Data-parallel training is simulated in-process: the global batch is cut
into contiguous shards, each shard computes its loss with shard-local
in-batch negatives, and shard gradients are averaged in fixed shard order
before a single optimizer update — so runs are reproducible regardless of
how the arithmetic is grouped.
"""

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .checkpoint import Checkpoint, check_compatible
from .data import ByteTokenizer, TripletBatch, TokenBatch, batch_iterator, load_triplets
from .errors import (
    CheckpointError,
    ConfigError,
    DataFormatError,
    NonFiniteLossError,
    TapeError,
)
from .lora import LoraConfig, attach, trainable_parameters
from .model import ModelConfig, TransformerLM
from .objective import ContrastiveBatch, infonce_loss, infonce_loss_no_hard_neg
from .rng import RngStreams, _name_key
from .tensor import Tape, backward

OBJECTIVES = ("eq1", "eq2")


@dataclass
class TrainConfig:
    """Run hyperparameters; defaults mirror the canonical fine-tuning setup."""

    learning_rate: float = 5e-5
    batch_size: int = 60
    warmup_steps: int = 100
    max_epochs: int = 1
    temperature: float = 0.05
    objective: str = "eq1"
    seed: int = 42
    num_shards: int = 1
    eta_min: float = 0.0
    checkpoint_interval: int = 20
    total_steps: int = None  # derived from data size / batch size / epochs
    lora: LoraConfig = field(default_factory=LoraConfig)

    def __post_init__(self):
        self.learning_rate = float(self.learning_rate)
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        for name in ("batch_size", "max_epochs", "num_shards", "checkpoint_interval"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
            setattr(self, name, int(value))
        if not isinstance(self.warmup_steps, (int, np.integer)) or self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps must be a non-negative integer, got {self.warmup_steps!r}")
        self.warmup_steps = int(self.warmup_steps)
        self.temperature = float(self.temperature)
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if not isinstance(self.seed, (int, np.integer)) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        self.seed = int(self.seed)
        if self.num_shards > 1 and self.batch_size % self.num_shards != 0:
            raise ConfigError(
                f"num_shards ({self.num_shards}) must divide batch_size ({self.batch_size})"
            )
        self.eta_min = float(self.eta_min)
        if not 0 <= self.eta_min <= self.learning_rate:
            raise ConfigError(
                f"eta_min must lie in [0, learning_rate], got {self.eta_min}"
            )
        if self.total_steps is not None:
            if not isinstance(self.total_steps, (int, np.integer)) or self.total_steps < 1:
                raise ConfigError(f"total_steps must be a positive integer, got {self.total_steps!r}")
            self.total_steps = int(self.total_steps)
        if isinstance(self.lora, dict):
            self.lora = LoraConfig.from_dict(self.lora)

    def to_dict(self):
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "warmup_steps": self.warmup_steps,
            "max_epochs": self.max_epochs,
            "temperature": self.temperature,
            "objective": self.objective,
            "seed": self.seed,
            "num_shards": self.num_shards,
            "eta_min": self.eta_min,
            "checkpoint_interval": self.checkpoint_interval,
            "total_steps": self.total_steps,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def lr_at(step, config):
    """Learning rate at an optimizer step: linear warmup, then cosine decay."""
    if config.total_steps is None:
        raise ConfigError("lr_at needs config.total_steps (derive it from the data first)")
    total = config.total_steps
    if not 0 <= step < total:
        raise ConfigError(f"step {step} outside [0, {total})")
    if step < config.warmup_steps:
        return config.learning_rate * (step + 1) / config.warmup_steps
    span = total - config.warmup_steps
    progress = (step - config.warmup_steps) / span
    return config.eta_min + (config.learning_rate - config.eta_min) * 0.5 * (
        1.0 + math.cos(math.pi * progress)
    )


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay and bias correction."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = dict(params)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = {name: np.zeros_like(p.values) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.values) for name, p in self.params.items()}

    def step(self, lr):
        """One in-place update of every parameter from its .grad."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                raise TapeError(f"optimizer step before any backward: {name!r} has no grad")
            grad = np.ascontiguousarray(p.grad).reshape(-1)
            kernels.adamw_update(
                p.values.reshape(-1), grad,
                self.m[name].reshape(-1), self.v[name].reshape(-1),
                lr, self.beta1, self.beta2, self.eps, self.weight_decay, bc1, bc2,
            )

    def hyper_dict(self):
        return {
            "t": self.t,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
        }


# ---------------------------------------------------------------------------
# single and sharded steps


def _slice_batch(batch, start, stop):
    def cut(tb):
        return TokenBatch(
            tb.tokens[start:stop], tb.padding_mask[start:stop], tb.eos_positions[start:stop]
        )

    return TripletBatch(cut(batch.premise), cut(batch.entailment), cut(batch.contradiction))


def _embed(handle, tb):
    return handle.extract_embedding(tb.tokens, tb.eos_positions, tb.padding_mask)


def _diagnose_non_finite(H, H_pos, H_neg):
    for name, block in (("premise", H), ("entailment", H_pos), ("contradiction", H_neg)):
        bad = ~np.isfinite(block.values).all(axis=1)
        if bad.any():
            return f"{name} embedding row {int(np.flatnonzero(bad)[0])} is non-finite"
    return "all embeddings finite; loss overflowed in the objective"


def _batch_loss(handle, batch, config):
    """Forward + backward on one (sub)batch; grads land on the adapters."""
    with Tape() as tape:
        H = _embed(handle, batch.premise)
        H_pos = _embed(handle, batch.entailment)
        H_neg = _embed(handle, batch.contradiction)
        cbatch = ContrastiveBatch(H, H_pos, H_neg, temperature=config.temperature)
        if config.objective == "eq1":
            loss = infonce_loss(cbatch)
        else:
            loss = infonce_loss_no_hard_neg(cbatch)
    value = float(loss.values)
    if not math.isfinite(value):
        raise NonFiniteLossError(
            f"non-finite loss on a batch of {batch.size}: "
            + _diagnose_non_finite(H, H_pos, H_neg)
        )
    backward(tape, loss)
    return value


def train_step(handle, batch, config, optimizer, step):
    """One optimizer update over the full batch; returns the loss value."""
    value = _batch_loss(handle, batch, config)
    optimizer.step(lr_at(step, config))
    return value


def sharded_step(handle, batch, config, optimizer, step, num_shards=None):
    """Simulated data-parallel step; returns the per-shard loss list.

    The batch splits into ``num_shards`` contiguous shards (defaults to the
    configured count); every shard sees only its own in-batch negatives.
    Shard gradients are accumulated in shard-index order and divided by the
    shard count, then a single optimizer update is applied.
    """
    K = config.num_shards if num_shards is None else int(num_shards)
    if K < 1:
        raise ConfigError(f"shard count must be >= 1, got {K}")
    if batch.size % K != 0:
        raise ConfigError(f"shard count {K} does not divide batch size {batch.size}")
    per = batch.size // K
    params = trainable_parameters(handle)
    losses = []
    accum = None
    for k in range(K):
        losses.append(_batch_loss(handle, _slice_batch(batch, k * per, (k + 1) * per), config))
        grads = [p.grad.copy() for p in params.values()]
        if accum is None:
            accum = grads
        else:
            for acc, g in zip(accum, grads):
                acc += g
    for acc, p in zip(accum, params.values()):
        acc /= K
        p.grad = acc
    optimizer.step(lr_at(step, config))
    return losses


# ---------------------------------------------------------------------------
# the full run


def _epoch_seed(seed, epoch):
    """Pure shuffle seed for an epoch; no stream state involved, so a resumed
    run can regenerate any epoch's batch order from scratch."""
    return np.random.SeedSequence([seed, _name_key("epoch_shuffle"), epoch])


def make_checkpoint(step, model, handle, config, model_config, optimizer, streams):
    """Snapshot everything needed to resume bit-identically."""
    tensors = {}
    for name, t in model.params.items():
        tensors[f"model.{name}"] = t.values
    adapters = trainable_parameters(handle)
    for name, t in adapters.items():
        tensors[f"adapter.{name}"] = t.values
    for name in adapters:
        tensors[f"optim.m.{name}"] = optimizer.m[name]
        tensors[f"optim.v.{name}"] = optimizer.v[name]
    configs = {
        "model": model_config.to_dict(),
        "lora": config.lora.to_dict(),
        "train": config.to_dict(),
        "optim": optimizer.hyper_dict(),
    }
    return Checkpoint(step, configs, tensors, streams.state_dict())


def _restore_from_checkpoint(ckpt, model, handle, config, model_config, optimizer, streams):
    shapes = {}
    for name, t in model.params.items():
        shapes[f"model.{name}"] = t.shape
    adapters = trainable_parameters(handle)
    for name, t in adapters.items():
        shapes[f"adapter.{name}"] = t.shape
        shapes[f"optim.m.{name}"] = t.shape
        shapes[f"optim.v.{name}"] = t.shape
    check_compatible(
        ckpt,
        {
            "model": model_config.to_dict(),
            "lora": config.lora.to_dict(),
            "train": config.to_dict(),
        },
        shapes,
    )
    for name, t in model.params.items():
        t.values[...] = ckpt.tensors[f"model.{name}"]
    for name, t in adapters.items():
        t.values[...] = ckpt.tensors[f"adapter.{name}"]
        optimizer.m[name][...] = ckpt.tensors[f"optim.m.{name}"]
        optimizer.v[name][...] = ckpt.tensors[f"optim.v.{name}"]
    optimizer.t = int(ckpt.configs["optim"]["t"])
    streams.restore(ckpt.rng_state)


@dataclass
class TrainResult:
    handle: object  # AdaptedModel, adapters still attached
    model: TransformerLM
    log_rows: list  # (step, loss, lr)
    final_checkpoint: str
    total_steps: int


def _checkpoint_path(out_dir, step):
    return os.path.join(out_dir, f"checkpoint-{step:06d}.bin")


def run_training(config, model_config, data, out_dir, resume_from=None, log_fn=None):
    """Train for ``config.max_epochs`` over the triplets; write checkpoints.

    ``data`` is a triplet-file path or a list of triplet records.  The run
    writes a step-0 checkpoint before the first update (which also verifies
    the output directory is writable), one every ``checkpoint_interval``
    steps, and one at completion; a ``loss_log.csv`` accumulates one
    ``step,loss,lr`` row per optimizer step.  With ``resume_from`` pointing
    at an earlier checkpoint of the same run, training continues to results
    bit-identical to the uninterrupted run.

    When the shard count exceeds 1 but the final partial batch is not
    divisible by it, that batch runs unsharded (a divisor of its size would
    be arbitrary); all full batches use the configured count.
    """
    records = load_triplets(data) if isinstance(data, (str, os.PathLike)) else list(data)
    if not records:
        raise DataFormatError("no training triplets")
    os.makedirs(out_dir, exist_ok=True)

    steps_per_epoch = -(-len(records) // config.batch_size)  # ceil division
    derived_total = steps_per_epoch * config.max_epochs
    if config.total_steps is None:
        config.total_steps = derived_total
    elif config.total_steps != derived_total:
        raise ConfigError(
            f"configured total_steps {config.total_steps} != derived "
            f"{derived_total} (= ceil({len(records)}/{config.batch_size}) "
            f"x {config.max_epochs} epochs)"
        )

    tokenizer = ByteTokenizer(model_config.max_seq_len)
    streams = RngStreams(config.seed)
    model = TransformerLM(model_config, streams.stream("model_init"))
    handle = attach(model, config.lora, streams.stream("adapter_init"))
    optimizer = AdamW(trainable_parameters(handle))

    start_step = 0
    if resume_from is not None:
        ckpt = Checkpoint.load(resume_from)
        _restore_from_checkpoint(ckpt, model, handle, config, model_config, optimizer, streams)
        start_step = ckpt.step
        if start_step > config.total_steps:
            raise ConfigError(
                f"checkpoint is at step {start_step}, beyond total_steps {config.total_steps}"
            )
    handle.train(streams.stream("dropout"))

    def save(step):
        path = _checkpoint_path(out_dir, step)
        make_checkpoint(step, model, handle, config, model_config, optimizer, streams).save(path)
        return path

    save(start_step)  # also the writability probe, before any update
    log_rows = []
    step = start_step
    for epoch in range(start_step // steps_per_epoch, config.max_epochs):
        iterator = batch_iterator(
            records, config.batch_size, _epoch_seed(config.seed, epoch), tokenizer
        )
        for index, batch in enumerate(iterator):
            global_step = epoch * steps_per_epoch + index
            if global_step < start_step:
                continue  # replaying the resume epoch's already-trained prefix
            shards = config.num_shards
            if shards > 1 and batch.size % shards != 0:
                shards = 1  # final partial batch; see docstring
            if shards > 1:
                losses = sharded_step(handle, batch, config, optimizer, step, shards)
                loss_value = float(np.mean(losses))
            else:
                loss_value = train_step(handle, batch, config, optimizer, step)
            rate = lr_at(step, config)
            log_rows.append((step, loss_value, rate))
            if log_fn is not None:
                log_fn(step, loss_value, rate)
            step += 1
            if step % config.checkpoint_interval == 0 and step != config.total_steps:
                save(step)
    final_path = save(step)

    log_path = os.path.join(out_dir, "loss_log.csv")
    fresh = resume_from is None or not os.path.exists(log_path)
    with open(log_path, "a" if not fresh else "w", encoding="utf-8") as fh:
        if fresh:
            fh.write("step,loss,lr\n")
        for row_step, loss_value, rate in log_rows:
            fh.write(f"{row_step},{loss_value!r},{rate!r}\n")

    return TrainResult(handle, model, log_rows, final_path, config.total_steps)


def load_for_inference(path):
    """Rebuild a frozen model (+adapters, eval mode) from a checkpoint file.

    Returns ``(handle_or_model, model_config)``.  Optimizer and stream state
    are ignored — inference needs only the weights.
    """
    ckpt = Checkpoint.load(path)
    model_config = ModelConfig.from_dict(ckpt.configs["model"])
    model = TransformerLM(model_config, np.random.default_rng(0))
    for name, t in model.params.items():
        key = f"model.{name}"
        if key not in ckpt.tensors:
            raise CheckpointError(f"checkpoint is missing tensor {key!r}")
        if ckpt.tensors[key].shape != t.values.shape:
            raise CheckpointError(
                f"tensor {key!r}: checkpoint shape {ckpt.tensors[key].shape} "
                f"!= model shape {t.values.shape}"
            )
        t.values[...] = ckpt.tensors[key]
    adapter_keys = [k for k in ckpt.tensors if k.startswith("adapter.")]
    if adapter_keys:
        lora_config = LoraConfig.from_dict(ckpt.configs["lora"])
        handle = attach(model, lora_config, np.random.default_rng(0))
        for name, t in trainable_parameters(handle).items():
            t.values[...] = ckpt.tensors[f"adapter.{name}"]
        handle.eval()
        return handle, model_config
    return model, model_config
