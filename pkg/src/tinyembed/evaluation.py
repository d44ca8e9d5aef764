"""Semantic-similarity evaluation: Spearman correlation and aggregation.

A benchmark run embeds both sentences of every pair (identical prompt
template on both sides), scores each pair by cosine similarity, and reports
the Spearman correlation between those similarities and the gold scores, as
a percentage.  Aggregation across benchmarks is mean ± population standard
deviation, displayed to two decimals.
"""

import os
import re
from dataclasses import dataclass

import numpy as np

from .data import ByteTokenizer, collate, TEMPLATES
from .errors import CheckpointError, DegenerateEvaluationError, ShapeError, TinyembedError
from .objective import cosine_sim
from .trainer import load_for_inference


def _average_ranks(values):
    """1-based ranks with ties assigned the mean of their rank range."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    sorted_values = values[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_values[j + 1] == sorted_values[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y):
    """Rank correlation in [-1, 1]: Pearson correlation of average ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or x.shape != y.shape:
        raise ShapeError(
            f"spearman: expected two equal-length 1-D lists, got {x.shape} and {y.shape}"
        )
    if len(x) < 2:
        raise ShapeError("spearman: need at least 2 observations")
    for name, v in (("x", x), ("y", y)):
        if np.all(v == v[0]):
            raise DegenerateEvaluationError(
                f"spearman: {name} is constant, rank correlation is undefined"
            )
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    # identical / exactly reversed orderings give rank vectors that are equal
    # (or mirror images) bit for bit; return the exact endpoint in that case
    if np.array_equal(rx, ry):
        return 1.0
    if np.array_equal(rx + ry, np.full_like(rx, len(rx) + 1.0)):
        return -1.0
    rx -= rx.mean()
    ry -= ry.mean()
    return float(np.dot(rx, ry) / (np.linalg.norm(rx) * np.linalg.norm(ry)))


# ---------------------------------------------------------------------------
# embedding + benchmark evaluation


class ModelEmbedder:
    """Adapts a trained model (or adapter handle) to the embedder protocol.

    ``embed(texts, template)`` tokenizes with the wrapped tokenizer, runs
    batched forwards, and returns an [N, d] float64 array of EOS-position
    embeddings.  Deterministic: inference has no dropout.
    """

    def __init__(self, model, tokenizer=None, batch_size=32):
        self.model = model
        config = model.config if hasattr(model, "config") else None
        if config is not None and not hasattr(config, "max_seq_len"):
            config = model.model.config  # adapter handle wraps the model
        if tokenizer is None:
            tokenizer = ByteTokenizer(config.max_seq_len if config else 64)
        self.tokenizer = tokenizer
        self.batch_size = int(batch_size)

    def embed(self, texts, template=TEMPLATES["none"]):
        rows = []
        for start in range(0, len(texts), self.batch_size):
            chunk = collate(texts[start : start + self.batch_size], self.tokenizer, template)
            emb = self.model.extract_embedding(
                chunk.tokens, chunk.eos_positions, chunk.padding_mask
            )
            rows.append(emb.values)
        return np.concatenate(rows, axis=0)


@dataclass
class EvalReport:
    """One benchmark's outcome."""

    benchmark: str
    spearman_pct: float  # percentage in [-100, 100]
    n_pairs: int
    prompt: str

    def display(self):
        return f"{self.benchmark}: {self.spearman_pct:.2f} ({self.n_pairs} pairs, prompt={self.prompt})"


def evaluate_sts(embedder, records, template=TEMPLATES["none"], benchmark="sts"):
    """Score one benchmark: Spearman(cosine similarities, gold) as a percent.

    The template wraps both sentences of every pair identically.  If every
    predicted similarity comes out equal (e.g. all pairs identical), the
    rank correlation is undefined and the degenerate outcome is raised as a
    named error rather than returned as a number.
    """
    records = list(records)
    if not records:
        raise ShapeError("evaluate_sts: empty benchmark")
    left = embedder.embed([r.sentence1 for r in records], template)
    right = embedder.embed([r.sentence2 for r in records], template)
    sims = [cosine_sim(left[i], right[i]) for i in range(len(records))]
    gold = [r.gold_score for r in records]
    correlation = spearman(sims, gold)
    return EvalReport(
        benchmark=benchmark,
        spearman_pct=100.0 * correlation,
        n_pairs=len(records),
        prompt=template.name,
    )


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class AggregateReport:
    """Overall mean ± population standard deviation of benchmark scores."""

    scores: list
    mean: float
    std: float

    def display(self):
        return f"{self.mean:.2f} ± {self.std:.2f}"


def aggregate(scores):
    """Mean and population (divide-by-n) standard deviation of the scores."""
    scores = [float(s) for s in scores]
    if not scores:
        raise ShapeError("aggregate: empty score list")
    arr = np.asarray(scores, dtype=np.float64)
    return AggregateReport(scores=scores, mean=float(arr.mean()), std=float(arr.std()))


def performance_gain(after_overall, before_overall):
    """Percentage-point improvement: after minus before."""
    return float(after_overall) - float(before_overall)


# ---------------------------------------------------------------------------
# checkpoint curves


@dataclass
class CurveRow:
    step: int
    overall: float  # nan when failed
    failed: bool


def _checkpoint_steps(checkpoint_dir):
    pattern = re.compile(r"^checkpoint-(\d+)\.bin$")
    found = []
    for name in os.listdir(checkpoint_dir):
        match = pattern.match(name)
        if match:
            found.append((int(match.group(1)), os.path.join(checkpoint_dir, name)))
    return sorted(found)


def checkpoint_curve(checkpoint_dir, datasets, template=TEMPLATES["none"],
                     tolerance=0.5, embedder_factory=None):
    """Evaluate every checkpoint on every benchmark; report the curve.

    ``datasets`` maps benchmark name -> STS records.  Returns ``(rows,
    convergence_step)`` where rows are :class:`CurveRow` in ascending step
    order and ``convergence_step`` is the earliest step whose overall mean
    lies within ``tolerance`` points of the final checkpoint's overall.  A
    checkpoint that fails to load (corrupt file) contributes a failed row
    and the sweep continues.
    """
    found = _checkpoint_steps(checkpoint_dir)
    if not found:
        raise CheckpointError(f"no checkpoint files in {checkpoint_dir!r}")
    if not datasets:
        raise ShapeError("checkpoint_curve: no benchmarks given")
    if embedder_factory is None:
        def embedder_factory(path):
            handle, model_config = load_for_inference(path)
            return ModelEmbedder(handle, ByteTokenizer(model_config.max_seq_len))

    rows = []
    for step, path in found:
        try:
            embedder = embedder_factory(path)
            scores = [
                evaluate_sts(embedder, records, template, benchmark=name).spearman_pct
                for name, records in datasets.items()
            ]
            rows.append(CurveRow(step=step, overall=aggregate(scores).mean, failed=False))
        except TinyembedError:
            rows.append(CurveRow(step=step, overall=float("nan"), failed=True))
    usable = [r for r in rows if not r.failed]
    convergence_step = None
    if usable:
        final = usable[-1].overall
        for row in usable:
            if abs(row.overall - final) <= tolerance:
                convergence_step = row.step
                break
    return rows, convergence_step
