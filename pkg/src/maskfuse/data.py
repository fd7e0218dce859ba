"""Procedural paired text+image toy data with enumerable ground truth,
binary shard persistence, and the training batch iterator.

Each sample is a grid of colored cells plus a caption listing how many cells
hold each color. The caption is a pure function of the grid, so text given
image is deterministic while image given text stays multi-modal; both
retrieval directions are therefore meaningful.
"""

import struct
from dataclasses import dataclass

import numpy as np

from maskfuse.denoiser import ToyJointDistribution
from maskfuse.vocab import (
    ConfigError,
    JointVocab,
    ModalityLayout,
    build_vocab,
    validate_tokens,
)

SHARD_MAGIC = b"MFTS1"
SHARD_VERSION = 1

ENUMERABLE_LIMIT = 4096


class ShardFormatError(ValueError):
    """Bad magic, version, truncated payload, or vocab mismatch on read."""


@dataclass(frozen=True)
class ToyWorldConfig:
    rows: int = 2
    cols: int = 2
    palette_size: int = 2
    caption_templates: int = 1
    text_len: int = 0  # 0 = derive (two tokens per color: count, color word)
    image_first: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ConfigError("grid must be at least 1x1")
        if self.palette_size < 1:
            raise ConfigError("palette_size must be >= 1")
        if self.caption_templates < 1:
            raise ConfigError("caption_templates must be >= 1")
        if self.text_len < 0:
            raise ConfigError("text_len must be >= 0 (0 derives the default)")

    @property
    def image_len(self) -> int:
        return self.rows * self.cols

    @property
    def resolved_text_len(self) -> int:
        return self.text_len if self.text_len > 0 else 2 * self.palette_size

    @property
    def text_vocab_size(self) -> int:
        # count words 0..cells, one word per color, one filler word
        return (self.image_len + 1) + self.palette_size + 1

    def vocab(self) -> JointVocab:
        return build_vocab(self.text_vocab_size, self.palette_size)

    def layout(self) -> ModalityLayout:
        return ModalityLayout(self.rows, self.cols, self.resolved_text_len, self.image_first)

    @property
    def support_size(self) -> int:
        return self.palette_size**self.image_len


@dataclass
class ToyDataset:
    sequences: np.ndarray  # (N, L) int64
    layout: ModalityLayout
    vocab: JointVocab
    config: ToyWorldConfig
    dist: ToyJointDistribution | None = None

    @property
    def size(self) -> int:
        return self.sequences.shape[0]


def _caption_tokens(grid: np.ndarray, config: ToyWorldConfig) -> np.ndarray:
    """Deterministic caption: (count, color-word) pairs over a rotated color
    order; rotation (the "template") is itself a function of the grid."""
    counts = np.bincount(grid, minlength=config.palette_size)
    rotation = int(counts[0]) % config.caption_templates
    color_word_base = config.image_len + 1
    filler = color_word_base + config.palette_size
    caption = []
    for i in range(config.palette_size):
        c = (i + rotation) % config.palette_size
        caption.append(int(counts[c]))
        caption.append(color_word_base + c)
    caption = caption[: config.resolved_text_len]
    caption += [filler] * (config.resolved_text_len - len(caption))
    return np.array(caption, dtype=np.int64)


def _pair_tokens(grid: np.ndarray, config: ToyWorldConfig, layout: ModalityLayout, vocab: JointVocab) -> np.ndarray:
    tokens = np.empty(layout.length, dtype=np.int64)
    tokens[layout.image_slice] = vocab.image_start + grid
    tokens[layout.text_slice] = _caption_tokens(grid, config)
    return tokens


def generate_toy_dataset(
    config: ToyWorldConfig,
    n_samples: int | None = None,
    enumerable: bool = True,
) -> ToyDataset:
    """Build the toy world.

    Enumerable mode lists every grid once (uniform joint) and attaches the
    exact distribution; the large-toy mode draws n_samples random grids and
    attaches no distribution (property checks only).
    """
    layout = config.layout()
    vocab = config.vocab()
    if enumerable:
        if config.support_size > ENUMERABLE_LIMIT:
            raise ConfigError(
                f"support {config.support_size} exceeds enumerable limit {ENUMERABLE_LIMIT}"
            )
        grids = np.stack(
            np.meshgrid(*([np.arange(config.palette_size)] * config.image_len), indexing="ij"),
            axis=-1,
        ).reshape(-1, config.image_len)
        sequences = np.stack([_pair_tokens(g, config, layout, vocab) for g in grids])
        probs = np.full(sequences.shape[0], 1.0 / sequences.shape[0])
        dist = ToyJointDistribution(sequences, probs, layout, vocab)
        return ToyDataset(sequences, layout, vocab, config, dist)
    if n_samples is None or n_samples < 1:
        raise ConfigError("large-toy mode needs n_samples >= 1")
    rng = np.random.default_rng(config.seed)
    grids = rng.integers(0, config.palette_size, size=(n_samples, config.image_len))
    sequences = np.stack([_pair_tokens(g, config, layout, vocab) for g in grids])
    return ToyDataset(sequences, layout, vocab, config, None)


# -- shard persistence ------------------------------------------------------

_HEADER = struct.Struct("<5sHIIIHHBI")  # magic, version, text, image, L, rows, cols, image_first, count


def write_shard(dataset: ToyDataset, path) -> None:
    """Bit-exact binary shard: fixed header then uint16 little-endian tokens."""
    vocab, layout = dataset.vocab, dataset.layout
    if vocab.total_size > 65535:
        raise ShardFormatError("16-bit shard ids cap total vocab size at 65535")
    for row in dataset.sequences:
        report = validate_tokens(row, layout, vocab)
        if not report:
            raise ValueError(f"sequence invalid at position {report.position}; refusing to write")
    header = _HEADER.pack(
        SHARD_MAGIC,
        SHARD_VERSION,
        vocab.text_size,
        vocab.image_size,
        layout.length,
        layout.image_rows,
        layout.image_cols,
        1 if layout.image_first else 0,
        dataset.size,
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(dataset.sequences.astype("<u2").tobytes())


def write_token_shard(tokens: np.ndarray, layout: ModalityLayout, vocab: JointVocab, path) -> None:
    """Shard persistence for generated sequences outside a ToyDataset."""
    ds = ToyDataset(np.asarray(tokens, dtype=np.int64), layout, vocab, ToyWorldConfig())
    write_shard(ds, path)


def read_shard(path, expected_vocab: JointVocab | None = None) -> ToyDataset:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise ShardFormatError("shard shorter than its header")
    magic, version, text_size, image_size, length, rows, cols, image_first, count = _HEADER.unpack_from(raw)
    if magic != SHARD_MAGIC:
        raise ShardFormatError(f"bad magic {magic!r}, expected {SHARD_MAGIC!r}")
    if version != SHARD_VERSION:
        raise ShardFormatError(f"unsupported shard version {version}")
    vocab = build_vocab(text_size, image_size)
    if expected_vocab is not None and (
        expected_vocab.text_size != text_size or expected_vocab.image_size != image_size
    ):
        raise ShardFormatError(
            f"shard vocab ({text_size},{image_size}) does not match run config "
            f"({expected_vocab.text_size},{expected_vocab.image_size})"
        )
    layout = ModalityLayout(rows, cols, length - rows * cols, bool(image_first))
    expected_bytes = _HEADER.size + 2 * count * length
    if len(raw) != expected_bytes:
        raise ShardFormatError(f"payload length {len(raw)} != expected {expected_bytes}")
    tokens = np.frombuffer(raw, dtype="<u2", offset=_HEADER.size).astype(np.int64)
    sequences = tokens.reshape(count, length)
    for row in sequences:
        report = validate_tokens(row, layout, vocab)
        if not report:
            raise ShardFormatError(f"stored sequence invalid at position {report.position}")
    return ToyDataset(sequences.copy(), layout, vocab, ToyWorldConfig(), None)


# -- batching ----------------------------------------------------------------

@dataclass
class Batch:
    tokens: np.ndarray  # (B, L), already in this batch's layout order
    layout: ModalityLayout
    flipped: bool


def _flip_tokens(tokens: np.ndarray, layout: ModalityLayout) -> np.ndarray:
    flipped = layout.flipped()
    out = np.empty_like(tokens)
    out[:, flipped.image_slice] = tokens[:, layout.image_slice]
    out[:, flipped.text_slice] = tokens[:, layout.text_slice]
    return out


def batch_iterator(
    dataset: ToyDataset,
    batch_size: int,
    rng: np.random.Generator,
    flip_modality_prob: float = 0.0,
    epochs: int | None = None,
):
    """Deterministic shuffled epochs; optional per-sample modality-order flip.

    Flipped samples are emitted as their own sub-batch (a batch holds one
    layout), so a shuffle batch yields one or two Batch objects.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    epoch = 0
    while epochs is None or epoch < epochs:
        order = rng.permutation(dataset.size)
        for start in range(0, dataset.size, batch_size):
            idx = order[start : start + batch_size]
            tokens = dataset.sequences[idx]
            if flip_modality_prob > 0.0:
                flip = rng.random(idx.size) < flip_modality_prob
            else:
                flip = np.zeros(idx.size, dtype=bool)
            if (~flip).any():
                yield Batch(tokens[~flip], dataset.layout, False)
            if flip.any():
                yield Batch(_flip_tokens(tokens[flip], dataset.layout), dataset.layout.flipped(), True)
        epoch += 1
