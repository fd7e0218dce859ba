"""Joint token space: text ids, image ids, one shared mask id, and layouts."""

from dataclasses import dataclass, field, replace

import numpy as np

TEXT = 0
IMAGE = 1


class ConfigError(ValueError):
    """Invalid configuration value (sizes, divisibility, bounds)."""


class StructuralError(ValueError):
    """Shape/length mismatch between related structures."""


@dataclass(frozen=True)
class JointVocab:
    """Partitioned id space: text [0, T), image [T, T+I), mask at T+I."""

    text_size: int
    image_size: int

    def __post_init__(self):
        if self.text_size < 1 or self.image_size < 1:
            raise ConfigError(
                f"vocab sizes must be >= 1, got text={self.text_size} image={self.image_size}"
            )

    @property
    def mask_id(self) -> int:
        return self.text_size + self.image_size

    @property
    def total_size(self) -> int:
        return self.text_size + self.image_size + 1

    @property
    def image_start(self) -> int:
        return self.text_size

    def modality_range(self, tag: int) -> range:
        if tag == TEXT:
            return range(0, self.text_size)
        if tag == IMAGE:
            return range(self.image_start, self.image_start + self.image_size)
        raise ValueError(f"unknown modality tag {tag}")


def build_vocab(text_size: int, image_size: int) -> JointVocab:
    """Build the joint vocabulary; both sizes must be positive."""
    return JointVocab(int(text_size), int(image_size))


@dataclass(frozen=True)
class ModalityLayout:
    """Per-position modality tags plus the 2D grid shape of the image block.

    Image positions form one contiguous block of exactly rows*cols entries;
    `image_first` controls whether that block precedes or follows the text.
    """

    image_rows: int
    image_cols: int
    text_len: int
    image_first: bool = True
    tags: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.text_len < 1:
            raise ConfigError(f"text_len must be >= 1, got {self.text_len}")
        if self.image_rows < 1 or self.image_cols < 1:
            raise ConfigError(
                f"image grid must be >= 1x1, got {self.image_rows}x{self.image_cols}"
            )
        img = np.full(self.image_len, IMAGE, dtype=np.uint8)
        txt = np.full(self.text_len, TEXT, dtype=np.uint8)
        tags = np.concatenate([img, txt] if self.image_first else [txt, img])
        tags.flags.writeable = False
        object.__setattr__(self, "tags", tags)

    @property
    def image_len(self) -> int:
        return self.image_rows * self.image_cols

    @property
    def length(self) -> int:
        return self.image_len + self.text_len

    @property
    def image_grid(self) -> tuple[int, int]:
        return (self.image_rows, self.image_cols)

    @property
    def image_slice(self) -> slice:
        start = 0 if self.image_first else self.text_len
        return slice(start, start + self.image_len)

    @property
    def text_slice(self) -> slice:
        start = self.image_len if self.image_first else 0
        return slice(start, start + self.text_len)

    def positions(self, tag: int) -> np.ndarray:
        return np.nonzero(self.tags == tag)[0]

    def flipped(self) -> "ModalityLayout":
        return replace(self, image_first=not self.image_first)

    def key(self) -> tuple:
        """Hashable identity used for per-layout caches."""
        return (self.image_rows, self.image_cols, self.text_len, self.image_first)


@dataclass
class MaskedSequence:
    """A (possibly corrupted) token sequence with its modality timesteps."""

    tokens: np.ndarray
    layout: ModalityLayout
    t_text: float = 0.0
    t_image: float = 0.0

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 1:
            raise StructuralError(f"tokens must be 1-D, got shape {self.tokens.shape}")
        for name, t in (("t_text", self.t_text), ("t_image", self.t_image)):
            if not 0.0 <= t <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {t}")

    def mask_flags(self, vocab: JointVocab) -> np.ndarray:
        return self.tokens == vocab.mask_id

    def copy(self) -> "MaskedSequence":
        return MaskedSequence(self.tokens.copy(), self.layout, self.t_text, self.t_image)


def allowed_token_set(position: int, layout: ModalityLayout, vocab: JointVocab) -> set[int]:
    """Ids valid at `position`: its modality's range plus the mask id."""
    if not 0 <= position < layout.length:
        raise IndexError(f"position {position} out of range for length {layout.length}")
    tag = int(layout.tags[position])
    return set(vocab.modality_range(tag)) | {vocab.mask_id}


def allowed_mask(layout: ModalityLayout, vocab: JointVocab) -> np.ndarray:
    """(L, V) boolean table of valid ids per position (vectorized form)."""
    table = np.zeros((2, vocab.total_size), dtype=bool)
    table[TEXT, : vocab.text_size] = True
    table[IMAGE, vocab.image_start : vocab.image_start + vocab.image_size] = True
    table[:, vocab.mask_id] = True
    return table[layout.tags]


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    position: int | None = None
    token: int | None = None

    def __bool__(self) -> bool:
        return self.ok


def validate_sequence(seq: MaskedSequence, vocab: JointVocab) -> ValidationReport:
    """Check every token against its position's allowed set.

    Returns the first offending position when invalid; raises StructuralError
    on a length mismatch with the layout.
    """
    if seq.tokens.shape[0] != seq.layout.length:
        raise StructuralError(
            f"sequence length {seq.tokens.shape[0]} != layout length {seq.layout.length}"
        )
    return validate_tokens(seq.tokens, seq.layout, vocab)


def validate_tokens(tokens: np.ndarray, layout: ModalityLayout, vocab: JointVocab) -> ValidationReport:
    tokens = np.asarray(tokens)
    in_range = (tokens >= 0) & (tokens < vocab.total_size)
    ok = in_range & allowed_mask(layout, vocab)[np.arange(layout.length), np.clip(tokens, 0, vocab.total_size - 1)]
    bad = np.nonzero(~ok)[0]
    if bad.size == 0:
        return ValidationReport(ok=True)
    pos = int(bad[0])
    return ValidationReport(ok=False, position=pos, token=int(tokens[pos]))
