"""Tiny decoder-only transformer and EOS-token sentence embedding extraction.

A sentence is encoded by running the (prompt-wrapped, EOS-terminated) token
sequence through the causal transformer and reading the last layer's hidden
state at the EOS position.  No mean pooling, no CLS token: the embedding is
exactly one position's vector.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

_MASK_VALUE = -1e30  # additive attention mask; exp(-1e30 shift) underflows to 0.0


@dataclass
class ModelConfig:
    """Architecture hyperparameters for :class:`TransformerLM`."""

    vocab_size: int = 260
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 64
    pad_token_id: int = 256
    eos_token_id: int = 257

    def __post_init__(self):
        for field in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            value = getattr(self, field)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value <= 0:
                raise ConfigError(f"{field} must be a positive integer, got {value!r}")
            setattr(self, field, int(value))
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        for field in ("pad_token_id", "eos_token_id"):
            value = getattr(self, field)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
                raise ConfigError(f"{field} must be an integer, got {value!r}")
            setattr(self, field, int(value))
            if not 0 <= int(value) < self.vocab_size:
                raise ConfigError(
                    f"{field} ({value}) must lie in [0, vocab_size={self.vocab_size})"
                )
        if self.pad_token_id == self.eos_token_id:
            raise ConfigError("pad_token_id and eos_token_id must be distinct")

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    def to_dict(self):
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "max_seq_len": self.max_seq_len,
            "pad_token_id": self.pad_token_id,
            "eos_token_id": self.eos_token_id,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class TransformerLM:
    """Pre-layer-norm causal transformer with learned positional embeddings.

    Parameters live in ``self.params``, an insertion-ordered mapping from
    dotted names to :class:`Tensor`.  The creation order is fixed so that a
    given seed always produces the same initialization, independent of how
    the model is later used.

    ``self.deltas`` is an extension point: a mapping from a projection
    weight's parameter name to a callable ``fn(x) -> Tensor`` whose output is
    added to that projection's result.  Low-rank adapters install themselves
    here; the base forward logic never changes.
    """

    def __init__(self, config, init_rng):
        self.config = config
        self.params = {}
        self.deltas = {}
        rng = init_rng
        c = config

        def weight(name, shape):
            self.params[name] = Tensor(
                rng.normal(0.0, 0.02, size=shape), requires_grad=True
            )

        def zeros(name, shape):
            self.params[name] = Tensor(np.zeros(shape), requires_grad=True)

        def ones(name, shape):
            self.params[name] = Tensor(np.ones(shape), requires_grad=True)

        weight("tok_emb", (c.vocab_size, c.d_model))
        weight("pos_emb", (c.max_seq_len, c.d_model))
        for i in range(c.n_layers):
            p = f"layers.{i}"
            ones(f"{p}.ln1.gamma", (c.d_model,))
            zeros(f"{p}.ln1.beta", (c.d_model,))
            for proj in ("W_q", "W_k", "W_v", "W_o"):
                weight(f"{p}.attn.{proj}", (c.d_model, c.d_model))
                zeros(f"{p}.attn.{proj.replace('W', 'b')}", (c.d_model,))
            ones(f"{p}.ln2.gamma", (c.d_model,))
            zeros(f"{p}.ln2.beta", (c.d_model,))
            weight(f"{p}.ff.W_in", (c.d_model, c.d_ff))
            zeros(f"{p}.ff.b_in", (c.d_ff,))
            weight(f"{p}.ff.W_out", (c.d_ff, c.d_model))
            zeros(f"{p}.ff.b_out", (c.d_model,))
        ones("ln_f.gamma", (c.d_model,))
        zeros("ln_f.beta", (c.d_model,))

    # -- parameter access ---------------------------------------------------

    def parameters(self):
        """The full name -> Tensor mapping, in creation order."""
        return self.params

    def num_parameters(self):
        return sum(t.values.size for t in self.params.values())

    # -- forward ------------------------------------------------------------

    def _validate_tokens(self, tokens):
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ShapeError(f"forward: tokens must be 2-D [batch, seq], got {tokens.shape}")
        if not np.issubdtype(tokens.dtype, np.integer):
            raise ShapeError(f"forward: tokens must be integers, got dtype {tokens.dtype}")
        if tokens.shape[1] > self.config.max_seq_len:
            raise ShapeError(
                f"forward: sequence length {tokens.shape[1]} exceeds "
                f"max_seq_len {self.config.max_seq_len}"
            )
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise ShapeError(
                f"forward: token ids must lie in [0, {self.config.vocab_size}), "
                f"got range [{tokens.min()}, {tokens.max()}]"
            )
        return tokens

    def _attention_mask(self, tokens, padding_mask):
        """Additive [B, 1, L, L] mask: 0 where key j is visible to query i."""
        B, L = tokens.shape
        causal = np.tril(np.ones((L, L), dtype=bool))
        visible = causal[None, :, :] & ~padding_mask[:, None, :]
        mask = np.where(visible, 0.0, _MASK_VALUE)
        return Tensor(mask[:, None, :, :])

    def _linear(self, name, bias_name, x):
        out = T.add(T.matmul(x, self.params[name]), self.params[bias_name])
        delta = self.deltas.get(name)
        if delta is not None:
            out = T.add(out, delta(x))
        return out

    def forward(self, tokens, padding_mask=None):
        """Hidden states [B, L, d_model] after the final layer norm.

        ``padding_mask`` marks positions to exclude as attention keys; when
        omitted it is derived from ``tokens == pad_token_id``.
        """
        tokens = self._validate_tokens(tokens)
        c = self.config
        B, L = tokens.shape
        if padding_mask is None:
            padding_mask = tokens == c.pad_token_id
        else:
            padding_mask = np.asarray(padding_mask, dtype=bool)
            if padding_mask.shape != tokens.shape:
                raise ShapeError(
                    f"forward: padding_mask shape {padding_mask.shape} "
                    f"!= tokens shape {tokens.shape}"
                )

        x = T.add(
            T.embedding_lookup(self.params["tok_emb"], tokens),
            T.embedding_lookup(self.params["pos_emb"], np.arange(L)),
        )
        mask = self._attention_mask(tokens, padding_mask)
        H, Dh = c.n_heads, c.head_dim
        inv_sqrt_dh = 1.0 / np.sqrt(Dh)

        for i in range(c.n_layers):
            p = f"layers.{i}"
            xn = T.layer_norm(x, self.params[f"{p}.ln1.gamma"], self.params[f"{p}.ln1.beta"])
            q = self._linear(f"{p}.attn.W_q", f"{p}.attn.b_q", xn)
            k = self._linear(f"{p}.attn.W_k", f"{p}.attn.b_k", xn)
            v = self._linear(f"{p}.attn.W_v", f"{p}.attn.b_v", xn)
            # [B, L, D] -> [B, H, L, Dh]
            q = T.transpose(T.reshape(q, (B, L, H, Dh)), (0, 2, 1, 3))
            k = T.transpose(T.reshape(k, (B, L, H, Dh)), (0, 2, 1, 3))
            v = T.transpose(T.reshape(v, (B, L, H, Dh)), (0, 2, 1, 3))
            scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), inv_sqrt_dh)
            attn = T.softmax_rows(T.add(scores, mask))
            ctx = T.matmul(attn, v)  # [B, H, L, Dh]
            ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, L, c.d_model))
            x = T.add(x, self._linear(f"{p}.attn.W_o", f"{p}.attn.b_o", ctx))

            xn = T.layer_norm(x, self.params[f"{p}.ln2.gamma"], self.params[f"{p}.ln2.beta"])
            h = T.gelu(self._linear_plain(f"{p}.ff.W_in", f"{p}.ff.b_in", xn))
            x = T.add(x, self._linear_plain(f"{p}.ff.W_out", f"{p}.ff.b_out", h))

        return T.layer_norm(x, self.params["ln_f.gamma"], self.params["ln_f.beta"])

    def _linear_plain(self, name, bias_name, x):
        return T.add(T.matmul(x, self.params[name]), self.params[bias_name])

    # -- embedding extraction -----------------------------------------------

    def extract_embedding(self, tokens, eos_positions, padding_mask=None):
        """Sentence embeddings [B, d_model]: last-layer state at each EOS.

        ``eos_positions[b]`` must index the appended end-of-text token of
        sequence ``b``; anything else is rejected because it would silently
        read the wrong position's vector.
        """
        tokens = self._validate_tokens(tokens)
        eos_positions = np.asarray(eos_positions)
        if eos_positions.ndim != 1 or eos_positions.shape[0] != tokens.shape[0]:
            raise ShapeError(
                f"extract_embedding: eos_positions must be [batch]={tokens.shape[0]}, "
                f"got shape {eos_positions.shape}"
            )
        if eos_positions.size and (
            eos_positions.min() < 0 or eos_positions.max() >= tokens.shape[1]
        ):
            raise ShapeError("extract_embedding: eos position out of sequence bounds")
        held = tokens[np.arange(tokens.shape[0]), eos_positions]
        if not np.all(held == self.config.eos_token_id):
            bad = int(np.flatnonzero(held != self.config.eos_token_id)[0])
            raise ShapeError(
                f"extract_embedding: sequence {bad} does not hold the end-of-text "
                f"token at position {int(eos_positions[bad])}"
            )
        hidden = self.forward(tokens, padding_mask)
        return T.take_per_row(hidden, eos_positions)
