"""Cosine similarity and the two contrastive training objectives.

Both objectives score an anchor embedding against every positive in the
batch (in-batch negatives); the full objective additionally scores it
against every contradiction embedding (hard negatives).  All similarities
are cosine, scaled by a temperature, and each anchor's loss is the
log-sum-exp denominator minus its own positive logit — computed that way
so large logits never overflow.  Anchor-to-anchor similarities never enter
either objective.
"""

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


def cosine_sim(u, v):
    """Cosine of the angle between two 1-D vectors, in [-1, 1]."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise ShapeError(
            f"cosine_sim: expected two equal-length vectors, got {u.shape} and {v.shape}"
        )
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ShapeError("cosine_sim: zero-norm vector has no direction")
    return float(np.dot(u, v) / (nu * nv))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class ContrastiveBatch:
    """Anchor, positive, and optional hard-negative embedding blocks.

    Blocks may be plain arrays (for evaluation) or tape-recorded tensors
    (for training); rows are validated to be nonzero because cosine
    similarity is undefined for the zero vector.
    """

    def __init__(self, H, H_pos, H_neg=None, temperature=0.05):
        self.H = _as_tensor(H)
        self.H_pos = _as_tensor(H_pos)
        self.H_neg = None if H_neg is None else _as_tensor(H_neg)
        self.temperature = float(temperature)
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {temperature}")
        blocks = [("anchor", self.H), ("positive", self.H_pos)]
        if self.H_neg is not None:
            blocks.append(("hard-negative", self.H_neg))
        for name, block in blocks:
            if block.values.ndim != 2:
                raise ShapeError(
                    f"{name} block must be 2-D [batch, dim], got {block.shape}"
                )
            if block.shape != self.H.shape:
                raise ShapeError(
                    f"{name} block shape {block.shape} != anchor shape {self.H.shape}"
                )
            norms = np.linalg.norm(block.values, axis=1)
            if np.any(norms == 0.0):
                row = int(np.flatnonzero(norms == 0.0)[0])
                raise ShapeError(f"{name} block row {row} is the zero vector")
        if self.H.shape[0] < 1:
            raise ShapeError("batch must contain at least one triplet")

    @property
    def size(self):
        return self.H.shape[0]


def _scaled_similarities(anchors, others, temperature):
    """[N, N] matrix of cos(anchor_i, other_j) / temperature, differentiable."""
    a = T.l2_normalize_rows(anchors)
    b = T.l2_normalize_rows(others)
    return T.scale(T.matmul(a, T.transpose(b, (1, 0))), 1.0 / temperature)


def infonce_loss(batch):
    """Contrastive loss with in-batch negatives plus hard negatives.

    For each anchor i, the positive logit is cos(h_i, h_i+)/tau and the
    denominator sums exp of that anchor's logits against every positive and
    every hard negative in the batch.  Returns the scalar mean over anchors
    as a differentiable tensor; always positive, because the hard-negative
    terms strictly enlarge the denominator.
    """
    if batch.H_neg is None:
        raise ConfigError(
            "this objective needs hard negatives; use infonce_loss_no_hard_neg"
        )
    pos_logits = _scaled_similarities(batch.H, batch.H_pos, batch.temperature)
    neg_logits = _scaled_similarities(batch.H, batch.H_neg, batch.temperature)
    all_logits = T.concatenate([pos_logits, neg_logits], axis=1)  # [N, 2N]
    denom = T.logsumexp_rows(all_logits)  # [N]
    own = T.take_per_row(pos_logits, np.arange(batch.size))  # [N]
    return T.mean_all(T.add(denom, T.scale(own, -1.0)))


def infonce_loss_no_hard_neg(batch):
    """Contrastive loss with in-batch negatives only (hard negatives ignored).

    Same construction without the hard-negative block: the denominator for
    anchor i sums only the positive logits.  For a single-element batch the
    denominator equals the numerator and the loss is exactly zero.
    """
    pos_logits = _scaled_similarities(batch.H, batch.H_pos, batch.temperature)
    denom = T.logsumexp_rows(pos_logits)
    own = T.take_per_row(pos_logits, np.arange(batch.size))
    return T.mean_all(T.add(denom, T.scale(own, -1.0)))
