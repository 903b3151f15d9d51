"""Synthetic speech-translation task: generation, persistence, and batching.

Each example pairs a frame sequence with a source transcript and a target
translation. Frames are noisy one-hot encodings of the transcript tokens
(several frames per token, so frame-to-transcript alignment is monotonic);
the translation is a fixed substitution cipher applied to the *reversed*
transcript, which makes the transcript-to-translation alignment globally
non-monotonic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Vocabulary",
    "FeatureSequence",
    "TokenSequence",
    "ExamplePair",
    "Dataset",
    "Batch",
    "DataError",
    "generate",
    "split",
    "batch",
    "save_dataset",
    "load_dataset",
]


class DataError(Exception):
    pass


@dataclass(frozen=True)
class Vocabulary:
    """Content tokens followed by the reserved <pad>, <bos>, <eos>, <blank>.

    The blank always takes the highest id.
    """

    tokens: tuple[str, ...]

    RESERVED = ("<pad>", "<bos>", "<eos>", "<blank>")

    @classmethod
    def make(cls, prefix: str, content_size: int) -> "Vocabulary":
        if content_size < 1:
            raise DataError("vocabulary needs at least one content token")
        return cls(tuple(f"{prefix}{i}" for i in range(content_size)) + cls.RESERVED)

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def content_size(self) -> int:
        return len(self.tokens) - len(self.RESERVED)

    @property
    def pad_id(self) -> int:
        return self.size - 4

    @property
    def bos_id(self) -> int:
        return self.size - 3

    @property
    def eos_id(self) -> int:
        return self.size - 2

    @property
    def blank_id(self) -> int:
        return self.size - 1

    def word(self, token_id: int) -> str:
        return self.tokens[token_id]

    def id(self, word: str) -> int:
        return self.tokens.index(word)

    def to_words(self, ids) -> str:
        """Render content ids as a whitespace-joined sentence."""
        return " ".join(self.tokens[i] for i in ids)


@dataclass
class FeatureSequence:
    frames: np.ndarray  # (T, F)

    @property
    def length(self) -> int:
        return self.frames.shape[0]


@dataclass
class TokenSequence:
    ids: np.ndarray
    role: str  # "transcript" | "translation"

    @property
    def length(self) -> int:
        return len(self.ids)


@dataclass
class ExamplePair:
    id: int
    x: FeatureSequence
    f: TokenSequence  # transcript, source content ids
    e: TokenSequence  # translation, target content ids


@dataclass
class Dataset:
    examples: list[ExamplePair]
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    cipher: np.ndarray  # content-id permutation: e-token = cipher[f-token]
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.examples)

    def decipher(self, e_ids: np.ndarray) -> np.ndarray:
        inverse = np.argsort(self.cipher)
        return inverse[np.asarray(e_ids)]


def generate(
    seed: int,
    n_examples: int,
    vocab_size: int,
    len_range: tuple[int, int] = (3, 8),
    frames_per_token_range: tuple[int, int] = (5, 7),
    noise_sigma: float = 0.3,
    task_seed: int = 0,
) -> Dataset:
    """Build a deterministic synthetic dataset.

    The cipher permutation depends only on (task_seed, vocab_size), so
    datasets generated with different seeds but the same task share one
    translation mapping and can serve as ASR / MT / ST corpora for the same
    task.
    """
    if vocab_size < 4:
        raise DataError("vocab_size must be at least 4")
    lo, hi = len_range
    rlo, rhi = frames_per_token_range
    if lo < 1 or hi < lo:
        raise DataError(f"bad length range {len_range}")
    if rlo < 2 or rhi < rlo:
        raise DataError(f"frames per token must be >= 2, got {frames_per_token_range}")
    src_vocab = Vocabulary.make("s", vocab_size)
    tgt_vocab = Vocabulary.make("t", vocab_size)
    cipher = np.random.default_rng(task_seed).permutation(vocab_size)
    rng = np.random.default_rng(seed)
    examples = []
    for idx in range(n_examples):
        J = int(rng.integers(lo, hi + 1))
        f = rng.integers(0, vocab_size, size=J)
        reps = rng.integers(rlo, rhi + 1, size=J)
        frames = np.repeat(np.eye(vocab_size)[f], reps, axis=0)
        frames = frames + rng.normal(0.0, noise_sigma, size=frames.shape)
        e = cipher[f[::-1]]
        examples.append(
            ExamplePair(
                id=idx,
                x=FeatureSequence(frames),
                f=TokenSequence(f.astype(np.int64), "transcript"),
                e=TokenSequence(e.astype(np.int64), "translation"),
            )
        )
    manifest = {
        "seed": seed,
        "task_seed": task_seed,
        "n_examples": n_examples,
        "vocab_size": vocab_size,
        "len_range": list(len_range),
        "frames_per_token_range": list(frames_per_token_range),
        "noise_sigma": noise_sigma,
        "cipher": cipher.tolist(),
    }
    return Dataset(examples, src_vocab, tgt_vocab, cipher, manifest)


def split(dataset: Dataset, fractions: tuple[float, ...], seed: int) -> list[Dataset]:
    """Disjoint, deterministic partition by shuffled assignment."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"fractions must sum to 1, got {fractions}")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    bounds = np.floor(np.cumsum(fractions) * n + 0.5).astype(int)
    bounds[-1] = n
    parts = []
    start = 0
    for frac, end in zip(fractions, bounds):
        chosen = sorted(order[start:end])
        if frac > 0 and not chosen:
            raise DataError("split produced an empty part")
        parts.append(
            Dataset([dataset.examples[i] for i in chosen], dataset.src_vocab, dataset.tgt_vocab, dataset.cipher, dataset.manifest)
        )
        start = end
    return parts


@dataclass
class Batch:
    """Padded example group; masks are float 0/1, padding is all-zero."""

    ids: list[int]
    frames: np.ndarray  # (B, Tmax, F)
    frame_mask: np.ndarray  # (B, Tmax)
    src: np.ndarray  # (B, Jmax) transcript ids, pad_id beyond length
    src_mask: np.ndarray  # (B, Jmax)
    tgt: np.ndarray  # (B, Imax)
    tgt_mask: np.ndarray  # (B, Imax)

    @property
    def size(self) -> int:
        return len(self.ids)

    def src_lengths(self) -> np.ndarray:
        return self.src_mask.sum(axis=1).astype(np.int64)

    def tgt_lengths(self) -> np.ndarray:
        return self.tgt_mask.sum(axis=1).astype(np.int64)


@dataclass
class FilterReport:
    kept: int
    dropped_too_long: int
    dropped_ctc_infeasible: int


def _pad_batch(examples: list[ExamplePair], pad_src: int, pad_tgt: int) -> Batch:
    B = len(examples)
    F = examples[0].x.frames.shape[1]
    Tmax = max(ex.x.length for ex in examples)
    Jmax = max(ex.f.length for ex in examples)
    Imax = max(ex.e.length for ex in examples)
    frames = np.zeros((B, Tmax, F))
    frame_mask = np.zeros((B, Tmax))
    src = np.full((B, Jmax), pad_src, dtype=np.int64)
    src_mask = np.zeros((B, Jmax))
    tgt = np.full((B, Imax), pad_tgt, dtype=np.int64)
    tgt_mask = np.zeros((B, Imax))
    for i, ex in enumerate(examples):
        frames[i, : ex.x.length] = ex.x.frames
        frame_mask[i, : ex.x.length] = 1.0
        src[i, : ex.f.length] = ex.f.ids
        src_mask[i, : ex.f.length] = 1.0
        tgt[i, : ex.e.length] = ex.e.ids
        tgt_mask[i, : ex.e.length] = 1.0
    return Batch(
        ids=[ex.id for ex in examples],
        frames=frames,
        frame_mask=frame_mask,
        src=src,
        src_mask=src_mask,
        tgt=tgt,
        tgt_mask=tgt_mask,
    )


def batch(
    dataset: Dataset,
    batch_size: int,
    max_len: int | None = None,
    pool_product: int = 1,
    ctc_filter: bool = False,
    order: np.ndarray | None = None,
) -> tuple[list[Batch], FilterReport]:
    """Group examples into padded batches, filtering unusable ones.

    Examples whose transcript or translation exceeds ``max_len`` tokens are
    dropped, as are CTC-infeasible ones (extended label length 2J+1 larger
    than the pooled frame count) when ``ctc_filter`` is set. ``order``
    optionally permutes the dataset before grouping.
    """
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    kept: list[ExamplePair] = []
    too_long = infeasible = 0
    for ex in dataset.examples:
        if max_len is not None and (ex.f.length > max_len or ex.e.length > max_len):
            too_long += 1
            continue
        if ctc_filter:
            pooled = -(-ex.x.length // pool_product)  # ceil-pool chain == ceil by the product
            if 2 * ex.f.length + 1 > pooled:
                infeasible += 1
                continue
        kept.append(ex)
    if not kept:
        raise DataError("no examples remain after filtering")
    if order is not None:
        kept = [kept[i] for i in order]
    pad_src = dataset.src_vocab.pad_id
    pad_tgt = dataset.tgt_vocab.pad_id
    batches = [
        _pad_batch(kept[i : i + batch_size], pad_src, pad_tgt) for i in range(0, len(kept), batch_size)
    ]
    return batches, FilterReport(len(kept), too_long, infeasible)


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write one JSON record per line plus a sibling manifest file."""
    path = Path(path)
    with path.open("w") as fh:
        for ex in dataset.examples:
            fh.write(
                json.dumps(
                    {
                        "id": ex.id,
                        "frames": ex.x.frames.tolist(),
                        "transcript": ex.f.ids.tolist(),
                        "translation": ex.e.ids.tolist(),
                    }
                )
                + "\n"
            )
    path.with_suffix(".manifest.json").write_text(json.dumps(dataset.manifest, indent=2) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".manifest.json").read_text())
    src_vocab = Vocabulary.make("s", manifest["vocab_size"])
    tgt_vocab = Vocabulary.make("t", manifest["vocab_size"])
    examples = []
    with path.open() as fh:
        for line in fh:
            rec = json.loads(line)
            examples.append(
                ExamplePair(
                    id=rec["id"],
                    x=FeatureSequence(np.asarray(rec["frames"], dtype=np.float64)),
                    f=TokenSequence(np.asarray(rec["transcript"], dtype=np.int64), "transcript"),
                    e=TokenSequence(np.asarray(rec["translation"], dtype=np.int64), "translation"),
                )
            )
    return Dataset(examples, src_vocab, tgt_vocab, np.asarray(manifest["cipher"]), manifest)
