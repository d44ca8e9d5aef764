"""Low-rank adaptation of the attention projection matrices.

Instead of fine-tuning a weight matrix ``W`` directly, a pair of small
matrices is trained: ``A`` [rank x d_in] and ``B`` [d_out x rank].  The
adapted projection computes ``W x + (alpha/rank) * B A dropout(x)``.  With
``B`` zero-initialized the adapted model starts out exactly equal to the
base model, and because only ``A`` and ``B`` receive gradients the base
weights stay bit-identical throughout training.

The model stores projection weights in row-vector convention (``x @ W`` with
``W`` [d_in x d_out]), so the merged weight is ``W + scale * (B A)^T`` —
the same update expressed in the transposed layout.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import AdapterError, ConfigError
from .tensor import Tensor

TARGET_NAMES = ("W_q", "W_k", "W_v", "W_o")


@dataclass
class LoraConfig:
    """Adapter hyperparameters."""

    rank: int = 8
    alpha: float = 32.0
    dropout: float = 0.1
    target_matrices: tuple = field(default_factory=lambda: TARGET_NAMES)

    def __post_init__(self):
        if not isinstance(self.rank, (int, np.integer)) or isinstance(self.rank, bool):
            raise ConfigError(f"rank must be an integer, got {self.rank!r}")
        self.rank = int(self.rank)
        if self.rank < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")
        self.alpha = float(self.alpha)
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        self.dropout = float(self.dropout)
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        targets = tuple(self.target_matrices)
        if not targets:
            raise ConfigError("target_matrices must name at least one projection")
        for name in targets:
            if name not in TARGET_NAMES:
                raise ConfigError(
                    f"unknown target matrix {name!r}; choose from {list(TARGET_NAMES)}"
                )
        if len(set(targets)) != len(targets):
            raise ConfigError(f"duplicate target matrix in {targets}")
        # canonical order, independent of how the caller listed them
        self.target_matrices = tuple(n for n in TARGET_NAMES if n in targets)

    @property
    def scale(self):
        return self.alpha / self.rank

    def to_dict(self):
        return {
            "rank": self.rank,
            "alpha": self.alpha,
            "dropout": self.dropout,
            "target_matrices": list(self.target_matrices),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "target_matrices" in d:
            d["target_matrices"] = tuple(d["target_matrices"])
        return cls(**d)


class LoraAdapter:
    """One low-rank pair attached to a single projection matrix."""

    def __init__(self, d_in, d_out, config, init_rng):
        if config.rank > min(d_in, d_out):
            raise ConfigError(
                f"rank {config.rank} exceeds min(d_in, d_out) = {min(d_in, d_out)}"
            )
        self.A = Tensor(init_rng.normal(0.0, 0.02, size=(config.rank, d_in)), requires_grad=True)
        self.B = Tensor(np.zeros((d_out, config.rank)), requires_grad=True)
        self.scale = config.scale

    def delta_weight(self):
        """The merged-layout update: scale * (B A)^T, shape [d_in, d_out]."""
        return self.scale * (self.B.values @ self.A.values).T


class AdaptedModel:
    """A base model plus attached adapters; created by :func:`attach`.

    The handle delegates ``forward`` / ``extract_embedding`` to the base
    model, whose projection hooks route through the adapters.  Training mode
    controls adapter-input dropout only; the base model has no dropout.
    """

    def __init__(self, model, config):
        self.model = model
        self.config = config
        self.adapters = {}  # projection parameter name -> LoraAdapter
        self.training = False
        self.dropout_rng = None
        self._merged = False

    # -- mode ---------------------------------------------------------------

    def train(self, dropout_rng=None):
        """Enable adapter dropout; a generator is required when dropout > 0."""
        self._check_live()
        if self.config.dropout > 0 and dropout_rng is None:
            raise ConfigError(
                "training mode with nonzero dropout needs a random generator"
            )
        self.training = True
        self.dropout_rng = dropout_rng
        return self

    def eval(self):
        """Disable adapter dropout (inference mode)."""
        self._check_live()
        self.training = False
        self.dropout_rng = None
        return self

    # -- delegation ----------------------------------------------------------

    def forward(self, tokens, padding_mask=None):
        self._check_live()
        return self.model.forward(tokens, padding_mask)

    def extract_embedding(self, tokens, eos_positions, padding_mask=None):
        self._check_live()
        return self.model.extract_embedding(tokens, eos_positions, padding_mask)

    def _check_live(self):
        if self._merged:
            raise AdapterError("adapters were already merged into the base model")

    def _delta_fn(self, adapter):
        def delta(x):
            if self.training and self.config.dropout > 0:
                x = T.dropout(x, self.config.dropout, self.dropout_rng)
            u = T.matmul(x, T.transpose(adapter.A, (1, 0)))
            return T.scale(T.matmul(u, T.transpose(adapter.B, (1, 0))), adapter.scale)

        return delta


def attach(model, config, init_rng):
    """Freeze the base model and hook adapters onto the target projections.

    Returns an :class:`AdaptedModel` handle.  Adapter ``A`` matrices are
    drawn Gaussian (std 0.02) from ``init_rng`` in a fixed order (layer by
    layer, projections in canonical order), ``B`` starts at zero, so the
    adapted forward initially equals the base forward.
    """
    if model.deltas:
        raise AdapterError("model already has adapters attached")
    handle = AdaptedModel(model, config)
    for i in range(model.config.n_layers):
        for proj in config.target_matrices:
            name = f"layers.{i}.attn.{proj}"
            w = model.params[name]
            d_in, d_out = w.shape
            adapter = LoraAdapter(d_in, d_out, config, init_rng)
            handle.adapters[name] = adapter
            model.deltas[name] = handle._delta_fn(adapter)
    for t in model.params.values():
        t.requires_grad = False
        t.grad = None
    return handle


def trainable_parameters(handle):
    """Name -> Tensor mapping of exactly the adapter matrices, fixed order."""
    handle._check_live()
    out = {}
    for name, adapter in handle.adapters.items():
        out[f"{name}.lora_A"] = adapter.A
        out[f"{name}.lora_B"] = adapter.B
    return out


def merge(handle):
    """Fold adapters into the base weights and return the plain model.

    After merging, ``W' = W + scale * (B A)^T`` for every adapted projection;
    the handle is consumed and the base parameters are trainable again.
    Refused in training mode: dropout is stochastic, so the merged forward
    could not match the adapted forward it replaces.
    """
    handle._check_live()
    if handle.training:
        raise AdapterError("cannot merge while in training mode; call eval() first")
    model = handle.model
    for name, adapter in handle.adapters.items():
        model.params[name].values = model.params[name].values + adapter.delta_weight()
        del model.deltas[name]
    for t in model.params.values():
        t.requires_grad = True
    handle.adapters = {}
    handle._merged = True
    return model
