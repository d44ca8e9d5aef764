"""Tokenization, dataset loading, prompt templating, and a synthetic corpus.

The tokenizer is byte-level: ids 0-255 are raw UTF-8 bytes, followed by
dedicated PAD and EOS ids.  Byte tokenization needs no learned vocabulary,
so encode/decode round-trips are exactly testable.  Two id slots are left
reserved so the model's vocabulary is a round 260.

Prompt templates wrap a sentence before tokenization ("This sentence:
... means in one word: "), the EOS token is appended last and always
survives truncation, and its position is recorded because the model reads
the sentence embedding from exactly that position.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError

PAD_ID = 256
EOS_ID = 257
VOCAB_SIZE = 260  # 256 bytes + PAD + EOS + 2 reserved slots


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class TripletRecord:
    """An anchor sentence with one entailed and one contradicted sentence."""

    premise: str
    entailment: str
    contradiction: str


@dataclass(frozen=True)
class StsRecord:
    """A sentence pair with a human similarity score in [0, 5]."""

    sentence1: str
    sentence2: str
    gold_score: float


# ---------------------------------------------------------------------------
# tokenizer


class ByteTokenizer:
    """Byte-level tokenizer with PAD/EOS specials and a length cap."""

    def __init__(self, max_seq_len=64):
        if not isinstance(max_seq_len, (int, np.integer)) or max_seq_len < 2:
            raise ConfigError(
                f"max_seq_len must be an integer >= 2 (text + EOS), got {max_seq_len!r}"
            )
        self.max_seq_len = int(max_seq_len)
        self.pad_id = PAD_ID
        self.eos_id = EOS_ID
        self.vocab_size = VOCAB_SIZE

    def encode(self, text):
        """Raw byte ids of ``text`` (no specials, no truncation)."""
        return list(text.encode("utf-8"))

    def decode(self, ids):
        """Text from ids, ignoring PAD/EOS and reserved slots."""
        return bytes(i for i in ids if 0 <= i < 256).decode("utf-8", errors="replace")


# ---------------------------------------------------------------------------
# prompt templates

_PLACEHOLDER = "{original_sentence}"


@dataclass(frozen=True)
class PromptTemplate:
    """A wrapper pattern with exactly one sentence placeholder."""

    name: str
    pattern: str

    def __post_init__(self):
        if self.pattern.count(_PLACEHOLDER) != 1:
            raise ConfigError(
                f"template {self.name!r} must contain exactly one "
                f"{_PLACEHOLDER} placeholder, got {self.pattern!r}"
            )

    def apply(self, text):
        return self.pattern.replace(_PLACEHOLDER, text)


TEMPLATES = {
    "none": PromptTemplate("none", "{original_sentence}"),
    "prompt1": PromptTemplate(
        "prompt1", "This sentence: {original_sentence} means in one word: "
    ),
    "prompt2": PromptTemplate("prompt2", "This sentence {original_sentence} means: "),
    "prompt3": PromptTemplate("prompt3", "{original_sentence} is: "),
}


def get_template(name):
    if name not in TEMPLATES:
        raise ConfigError(
            f"unknown template {name!r}; choose from {sorted(TEMPLATES)}"
        )
    return TEMPLATES[name]


def prepare_input(text, template, tokenizer):
    """Token ids with EOS appended, plus the EOS position.

    The template wraps the text first, then the result is byte-tokenized and
    truncated to ``max_seq_len - 1`` so the trailing EOS always fits; the
    returned position indexes that EOS (= token count - 1).
    """
    if not text:
        raise DataFormatError("cannot prepare an empty text")
    ids = tokenizer.encode(template.apply(text))
    ids = ids[: tokenizer.max_seq_len - 1]
    ids.append(tokenizer.eos_id)
    return ids, len(ids) - 1


# ---------------------------------------------------------------------------
# file loaders


def _require_text(value, key, lineno):
    if not isinstance(value, str) or not value.strip():
        raise DataFormatError(f"line {lineno}: field {key!r} is empty or not text")
    return value


def load_triplets(path):
    """Read JSON-lines with keys premise / entailment / contradiction."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as ex:
                raise DataFormatError(f"line {lineno}: not valid JSON ({ex.msg})") from None
            if not isinstance(obj, dict):
                raise DataFormatError(f"line {lineno}: expected a JSON object")
            fields = []
            for key in ("premise", "entailment", "contradiction"):
                if key not in obj:
                    raise DataFormatError(f"line {lineno}: missing key {key!r}")
                fields.append(_require_text(obj[key], key, lineno))
            records.append(TripletRecord(*fields))
    return records


def _parse_score(raw, lineno):
    try:
        score = float(raw)
    except (TypeError, ValueError):
        raise DataFormatError(f"line {lineno}: score {raw!r} is not a number") from None
    if not 0.0 <= score <= 5.0:
        raise DataFormatError(f"line {lineno}: score {score} outside [0, 5]")
    return score


def load_sts(path):
    """Read sentence pairs with gold scores.

    Two formats are accepted: JSON-lines with keys sentence1 / sentence2 /
    score, or 3-column tab-separated lines.  The first non-empty line fixes
    the format; a later line in the other format is an error.
    """
    records = []
    mode = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            looks_json = line.lstrip().startswith("{")
            if mode is None:
                mode = "json" if looks_json else "tsv"
            elif looks_json != (mode == "json"):
                raise DataFormatError(
                    f"line {lineno}: mixed formats — file started as {mode} "
                    f"but this line is not"
                )
            if mode == "json":
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as ex:
                    raise DataFormatError(
                        f"line {lineno}: not valid JSON ({ex.msg})"
                    ) from None
                if not isinstance(obj, dict):
                    raise DataFormatError(f"line {lineno}: expected a JSON object")
                for key in ("sentence1", "sentence2", "score"):
                    if key not in obj:
                        raise DataFormatError(f"line {lineno}: missing key {key!r}")
                s1 = _require_text(obj["sentence1"], "sentence1", lineno)
                s2 = _require_text(obj["sentence2"], "sentence2", lineno)
                score = _parse_score(obj["score"], lineno)
            else:
                cols = line.split("\t")
                if len(cols) != 3:
                    raise DataFormatError(
                        f"line {lineno}: expected 3 tab-separated columns, got {len(cols)}"
                    )
                s1 = _require_text(cols[0], "sentence1", lineno)
                s2 = _require_text(cols[1], "sentence2", lineno)
                score = _parse_score(cols[2], lineno)
            records.append(StsRecord(s1, s2, score))
    return records


# ---------------------------------------------------------------------------
# batching


@dataclass
class TokenBatch:
    """A right-padded token matrix with its padding mask and EOS positions."""

    tokens: np.ndarray  # [B, L] int64
    padding_mask: np.ndarray  # [B, L] bool, True at PAD positions
    eos_positions: np.ndarray  # [B] int64


@dataclass
class TripletBatch:
    """Tokenized premise / entailment / contradiction blocks of one batch."""

    premise: TokenBatch
    entailment: TokenBatch
    contradiction: TokenBatch

    @property
    def size(self):
        return self.premise.tokens.shape[0]


def collate(texts, tokenizer, template=TEMPLATES["none"]):
    """Tokenize ``texts`` and right-pad them into one :class:`TokenBatch`."""
    if not texts:
        raise DataFormatError("cannot collate an empty list of texts")
    encoded = [prepare_input(t, template, tokenizer) for t in texts]
    width = max(len(ids) for ids, _ in encoded)
    tokens = np.full((len(encoded), width), tokenizer.pad_id, dtype=np.int64)
    eos_positions = np.zeros(len(encoded), dtype=np.int64)
    for row, (ids, eos_pos) in enumerate(encoded):
        tokens[row, : len(ids)] = ids
        eos_positions[row] = eos_pos
    return TokenBatch(tokens, tokens == tokenizer.pad_id, eos_positions)


def batch_iterator(records, batch_size, shuffle_seed, tokenizer, template=TEMPLATES["none"]):
    """Yield :class:`TripletBatch` objects in a seed-determined order.

    The sequence is a pure function of (records, batch_size, shuffle_seed):
    the records are permuted once with a generator seeded by ``shuffle_seed``
    and cut into consecutive batches, keeping the final partial batch.
    """
    if not isinstance(batch_size, (int, np.integer)) or batch_size < 1:
        raise ConfigError(f"batch_size must be a positive integer, got {batch_size!r}")
    records = list(records)
    if not records:
        raise DataFormatError("cannot iterate over an empty dataset")
    order = np.random.default_rng(shuffle_seed).permutation(len(records))
    for start in range(0, len(records), int(batch_size)):
        chunk = [records[i] for i in order[start : start + int(batch_size)]]
        yield TripletBatch(
            premise=collate([r.premise for r in chunk], tokenizer, template),
            entailment=collate([r.entailment for r in chunk], tokenizer, template),
            contradiction=collate([r.contradiction for r in chunk], tokenizer, template),
        )


# ---------------------------------------------------------------------------
# synthetic corpus

# Each cluster owns three letters of the alphabet and builds its words from
# them alone, so clusters are disjoint at the byte level while every cluster
# has the same word-length distribution (the same patterns are used for all).
_WORD_PATTERNS = (
    "12312", "23123", "31231", "12131", "23212", "31323",
    "121323", "232131", "313212", "13231", "21312", "32123",
)


def _make_cluster_words():
    alphabet = "abcdefghijklmnopqrstuvwx"
    pools = []
    for c in range(8):
        letters = alphabet[3 * c : 3 * c + 3]
        pools.append(
            tuple("".join(letters[int(d) - 1] for d in pat) for pat in _WORD_PATTERNS)
        )
    return tuple(pools)


_CLUSTER_WORDS = _make_cluster_words()

_FRAMES = (
    "the {a} and the {b} met the {c}",
    "a {a} with a {b} near a {c}",
    "some {a} kept the {b} by the {c}",
    "that {a} met a {b} and a {c}",
    "one {a} saw the {b} near some {c}",
    "each {a} and one {b} took a {c}",
    "no {a} had the {b} or the {c}",
    "this {a} put a {b} on that {c}",
)


def _frame(rng, words):
    """Wrap three slot words in a randomly chosen shared frame."""
    frame = _FRAMES[rng.integers(len(_FRAMES))]
    return frame.format(a=words[0], b=words[1], c=words[2])


def _pick(rng, pool, k):
    """k distinct words from a pool, order randomized."""
    idx = rng.choice(len(pool), size=k, replace=False)
    return [pool[i] for i in idx]


def synthetic_corpus(seed, n_clusters=8, triplets_per_cluster=50):
    """Deterministic cluster-themed training triplets and scored STS pairs.

    Every sentence is one of a few shared frames with three slot words.  A
    pure sentence draws all slots from a single cluster's word pool; a mixed
    sentence replaces one slot with a word from a second cluster.  Triplets
    pair a premise with an entailment that keeps two of its three words
    (swapping the third within the cluster, order reshuffled) — the way a
    real entailment shares content with its premise — against a
    contradiction drawn wholly from a different cluster.

    STS pairs come in three gold bands by shared-content fraction: same
    cluster 5.0, pure versus two-thirds-overlapping mixed 10/3, and
    disjoint clusters 0.0.  Frames are deliberately anti-correlated with
    the bands — cross-cluster pairs share a frame while same-cluster pairs
    never do — so raw byte overlap alone misranks the pairs and only the
    slot words' cluster identity recovers the gold order.
    """
    if not isinstance(n_clusters, (int, np.integer)) or n_clusters < 2:
        raise ConfigError(f"n_clusters must be an integer >= 2, got {n_clusters!r}")
    if n_clusters > len(_CLUSTER_WORDS):
        raise ConfigError(
            f"n_clusters must be <= {len(_CLUSTER_WORDS)}, got {n_clusters}"
        )
    if not isinstance(triplets_per_cluster, (int, np.integer)) or triplets_per_cluster < 1:
        raise ConfigError(
            f"triplets_per_cluster must be a positive integer, got {triplets_per_cluster!r}"
        )
    rng = np.random.default_rng(seed)
    pools = _CLUSTER_WORDS[: int(n_clusters)]

    triplets = []
    for c, pool in enumerate(pools):
        for _ in range(int(triplets_per_cluster)):
            words = _pick(rng, pool, 3)
            kept = [words[i] for i in rng.permutation(3)[:2]]
            swap_in = pool[rng.integers(len(pool))]
            entail_words = kept + [swap_in]
            entail_words = [entail_words[i] for i in rng.permutation(3)]
            other = (c + 1 + int(rng.integers(len(pools) - 1))) % len(pools)
            triplets.append(
                TripletRecord(
                    premise=_frame(rng, words),
                    entailment=_frame(rng, entail_words),
                    contradiction=_frame(rng, _pick(rng, pools[other], 3)),
                )
            )

    pairs = []
    for c, pool in enumerate(pools):
        for _ in range(3):
            i, j = rng.choice(len(_FRAMES), size=2, replace=False)
            six = _pick(rng, pool, 6)
            pairs.append(
                StsRecord(
                    _FRAMES[i].format(a=six[0], b=six[1], c=six[2]),
                    _FRAMES[j].format(a=six[3], b=six[4], c=six[5]),
                    5.0,
                )
            )
        for _ in range(3):
            partner = (c + 1 + int(rng.integers(len(pools) - 1))) % len(pools)
            mixed = _pick(rng, pool, 2) + _pick(rng, pools[partner], 1)
            mixed = [mixed[i] for i in rng.permutation(3)]
            i, j = rng.choice(len(_FRAMES), size=2, replace=False)
            pure = _pick(rng, pool, 3)
            pairs.append(
                StsRecord(
                    _FRAMES[i].format(a=pure[0], b=pure[1], c=pure[2]),
                    _FRAMES[j].format(a=mixed[0], b=mixed[1], c=mixed[2]),
                    10.0 / 3.0,
                )
            )
        for _ in range(3):
            partner = (c + 1 + int(rng.integers(len(pools) - 1))) % len(pools)
            k = int(rng.integers(len(_FRAMES)))
            ours = _pick(rng, pool, 3)
            theirs = _pick(rng, pools[partner], 3)
            pairs.append(
                StsRecord(
                    _FRAMES[k].format(a=ours[0], b=ours[1], c=ours[2]),
                    _FRAMES[k].format(a=theirs[0], b=theirs[1], c=theirs[2]),
                    0.0,
                )
            )
    return triplets, pairs
