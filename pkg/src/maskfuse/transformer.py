"""Trainable denoiser: a small transformer over the joint vocabulary.

One module serves both roles: bidirectional attention gives the diffusion
denoiser, causal attention gives the autoregressive baseline. The two differ
only in the attention mask and how logits are consumed, mirroring how the
losses are paired elsewhere.
"""

import io
import math
import struct
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from maskfuse.util import NEG_INF
from maskfuse.vocab import (
    IMAGE,
    TEXT,
    ConfigError,
    JointVocab,
    ModalityLayout,
    StructuralError,
    allowed_mask,
)

BIDIRECTIONAL = "bidirectional"
CAUSAL = "causal"

CHECKPOINT_MAGIC = b"MFUS1"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint container."""


class CapabilityError(RuntimeError):
    """Requested an operation the model cannot provide (e.g. KV cache)."""


@dataclass(frozen=True)
class ModelSpec:
    n_layers: int
    n_heads: int
    d_model: int
    text_size: int
    image_size: int
    image_rows: int
    image_cols: int
    text_len: int
    image_first: bool = True
    ffn_multiplier: int = 4
    attention: str = BIDIRECTIONAL
    qk_norm: bool = True
    sandwich_norm: bool = True
    zero_init_output: bool = True
    suppress_invalid: bool = True
    use_rope: bool = True
    use_modality_embed: bool = True
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.use_rope and (self.d_model // self.n_heads) % 4 != 0:
            raise ConfigError("rotary embeddings need head_dim divisible by 4 (two 2-D axes)")
        if self.attention not in (BIDIRECTIONAL, CAUSAL):
            raise ConfigError(f"attention must be {BIDIRECTIONAL} or {CAUSAL}")
        if self.n_layers < 0 or self.n_heads < 1 or self.d_model < 1:
            raise ConfigError("model dimensions must be positive (n_layers may be 0)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def ffn_hidden(self) -> int:
        return self.ffn_multiplier * self.d_model

    def vocab(self) -> JointVocab:
        return JointVocab(self.text_size, self.image_size)

    def layout(self) -> ModalityLayout:
        return ModalityLayout(self.image_rows, self.image_cols, self.text_len, self.image_first)

    def to_lines(self) -> list[str]:
        return [f"{k}={v}" for k, v in asdict(self).items()]

    @classmethod
    def from_lines(cls, lines) -> "ModelSpec":
        fields = cls.__dataclass_fields__  # type: ignore[attr-defined]
        types = {
            name: (f.type if isinstance(f.type, str) else f.type.__name__)
            for name, f in fields.items()
        }
        kwargs = {}
        for line in lines:
            key, _, value = line.partition("=")
            if key not in types:
                raise CheckpointError(f"unknown spec field {key!r}")
            t = types[key]
            if t == "bool":
                kwargs[key] = value == "True"
            elif t == "int":
                kwargs[key] = int(value)
            elif t == "float":
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        return cls(**kwargs)


def position_coords(layout: ModalityLayout) -> np.ndarray:
    """(L, 2) rotary coordinates: (row, col) on the grid for image positions,
    (i, i) with the local text index for text positions."""
    coords = np.zeros((layout.length, 2), dtype=np.int64)
    img = layout.positions(IMAGE)
    local = np.arange(img.size)
    coords[img, 0] = local // layout.image_cols
    coords[img, 1] = local % layout.image_cols
    txt = layout.positions(TEXT)
    coords[txt, 0] = np.arange(txt.size)
    coords[txt, 1] = np.arange(txt.size)
    return coords


def _rope_tables(coords: torch.Tensor, head_dim: int, base: float, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    quarter = head_dim // 4
    inv = base ** (-torch.arange(quarter, dtype=torch.float64) / quarter)
    angles = torch.cat([coords[:, :1].double() * inv, coords[:, 1:].double() * inv], dim=-1)
    return angles.cos().to(dtype), angles.sin().to(dtype)


def _apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    # x: (B, H, L, hd); cos/sin: (L, hd/2)
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.eps = eps

    def forward(self, x):
        rms = torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps)
        return self.weight * (x * rms)


class Attention(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.n_heads = spec.n_heads
        self.head_dim = spec.head_dim
        self.qkv = nn.Linear(spec.d_model, 3 * spec.d_model, bias=False)
        self.proj = nn.Linear(spec.d_model, spec.d_model, bias=False)
        self.use_qk_norm = spec.qk_norm
        self.causal = spec.attention == CAUSAL
        self.use_rope = spec.use_rope
        if spec.qk_norm:
            self.qk_scale = nn.Parameter(torch.full((spec.n_heads,), math.sqrt(spec.head_dim)))

    def _split(self, x):
        b, l, _ = x.shape
        return x.view(b, l, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(self, x, rope, kv_cache=None, cache_out=None, image_slice=None, capture=None):
        """rope: (cos, sin) for this pass's rows. kv_cache: (k, v) extra key
        rows prepended to attention (already rotary-encoded). cache_out:
        list collecting this layer's image-position (k, v)."""
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q, k, v = self._split(q), self._split(k), self._split(v)
        if self.use_qk_norm:
            q = q / q.norm(dim=-1, keepdim=True).clamp_min(1e-12)
            k = k / k.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        if capture is not None:
            capture.append((q.detach().clone(), k.detach().clone()))
        if self.use_rope:
            cos, sin = rope
            q = _apply_rope(q, cos, sin)
            k = _apply_rope(k, cos, sin)
        if cache_out is not None:
            cache_out.append((k[:, :, image_slice], v[:, :, image_slice]))
        if kv_cache is not None:
            k = torch.cat([kv_cache[0], k], dim=2)
            v = torch.cat([kv_cache[1], v], dim=2)
        if self.use_qk_norm:
            scale = self.qk_scale.view(1, -1, 1, 1)
        else:
            scale = 1.0 / math.sqrt(self.head_dim)
        att = (q @ k.transpose(-2, -1)) * scale
        if self.causal:
            lq, lk = att.shape[-2], att.shape[-1]
            mask = torch.triu(torch.ones(lq, lk, dtype=torch.bool, device=att.device), diagonal=1 + lk - lq)
            att = att.masked_fill(mask, float("-inf"))
        att = att.softmax(dim=-1)
        y = att @ v
        y = y.transpose(1, 2).reshape(x.shape[0], x.shape[1], -1)
        return self.proj(y)


class Block(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.attn_norm = RMSNorm(spec.d_model)
        self.attn = Attention(spec)
        self.ffn_norm = RMSNorm(spec.d_model)
        self.ffn_in = nn.Linear(spec.d_model, spec.ffn_hidden, bias=False)
        self.ffn_out = nn.Linear(spec.ffn_hidden, spec.d_model, bias=False)
        self.ffn_post_norm = RMSNorm(spec.d_model) if spec.sandwich_norm else None

    def forward(self, x, rope, kv_cache=None, cache_out=None, image_slice=None, capture=None):
        x = x + self.attn(self.attn_norm(x), rope, kv_cache, cache_out, image_slice, capture)
        h = self.ffn_out(F.gelu(self.ffn_in(self.ffn_norm(x))))
        if self.ffn_post_norm is not None:
            h = self.ffn_post_norm(h)
        return x + h


class UnifiedTransformer(nn.Module):
    """Token + modality embeddings, rotary attention blocks, joint-vocab head."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        v = spec.vocab().total_size
        self.tok_emb = nn.Embedding(v, spec.d_model)
        if spec.use_modality_embed:
            self.mod_emb = nn.Parameter(torch.zeros(2, spec.d_model))
        self.blocks = nn.ModuleList(Block(spec) for _ in range(spec.n_layers))
        self.final_norm = RMSNorm(spec.d_model) if spec.n_layers > 0 else None
        self.head = nn.Linear(spec.d_model, v, bias=False)
        self._layout_buffers: dict = {}
        self._init_weights()

    def _init_weights(self):
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.normal_(module.weight, mean=0.0, std=0.02)
            elif isinstance(module, nn.Embedding):
                nn.init.normal_(module.weight, mean=0.0, std=0.02)
        if self.spec.use_modality_embed:
            nn.init.normal_(self.mod_emb, mean=0.0, std=0.02)
        if self.spec.zero_init_output:
            nn.init.zeros_(self.head.weight)

    def _buffers_for(self, layout: ModalityLayout):
        dtype = self.tok_emb.weight.dtype
        key = layout.key() + (dtype,)
        if key not in self._layout_buffers:
            coords = torch.from_numpy(position_coords(layout))
            cos, sin = _rope_tables(coords, self.spec.head_dim, self.spec.rope_base, dtype)
            tags = torch.from_numpy(layout.tags.copy()).long()
            allowed = torch.from_numpy(allowed_mask(layout, self.spec.vocab()))
            self._layout_buffers[key] = (cos, sin, tags, allowed)
        return self._layout_buffers[key]

    def _embed(self, tokens: torch.Tensor, tags: torch.Tensor) -> torch.Tensor:
        h = self.tok_emb(tokens)
        if self.spec.use_modality_embed:
            h = h + self.mod_emb[tags]
        return h

    def forward(
        self,
        tokens: torch.Tensor,
        layout: ModalityLayout | None = None,
        collect_cache: bool = False,
        capture_qk: list | None = None,
    ):
        """tokens: (B, L) long. Returns (B, L, V) logits, plus the per-layer
        image-position KV cache when collect_cache is set."""
        layout = layout or self.spec.layout()
        if tokens.shape[1] != layout.length:
            raise StructuralError(f"tokens length {tokens.shape[1]} != layout {layout.length}")
        cos, sin, tags, allowed = self._buffers_for(layout)
        h = self._embed(tokens, tags)
        cache = [] if collect_cache else None
        img = layout.image_slice
        for block in self.blocks:
            h = block(h, (cos, sin), cache_out=cache, image_slice=img, capture=capture_qk)
        if self.final_norm is not None:
            h = self.final_norm(h)
        logits = self.head(h)
        if self.spec.suppress_invalid:
            logits = logits.masked_fill(~allowed, NEG_INF)
        if collect_cache:
            return logits, cache
        return logits

    def forward_text_cached(
        self,
        tokens: torch.Tensor,
        layout: ModalityLayout,
        cache: list,
    ) -> torch.Tensor:
        """Text-rows-only pass against a frozen image KV cache.

        Recomputes hidden states for text positions; image keys/values come
        from the cache captured at the last full pass (an approximation for
        n_layers > 1, exact when the cache is fresh every step)."""
        if self.spec.attention != BIDIRECTIONAL:
            raise CapabilityError("cached text pass requires bidirectional attention")
        cos, sin, tags, allowed = self._buffers_for(layout)
        txt = layout.text_slice
        h = self._embed(tokens[:, txt], tags[txt])
        rope = (cos[txt], sin[txt])
        for block, kv in zip(self.blocks, cache):
            h = block(h, rope, kv_cache=kv)
        if self.final_norm is not None:
            h = self.final_norm(h)
        logits = self.head(h)
        if self.spec.suppress_invalid:
            logits = logits.masked_fill(~allowed[txt], NEG_INF)
        return logits


def build_transformer(spec: ModelSpec, seed: int, dtype=torch.float32) -> "TransformerDenoiser":
    """Deterministically initialized model wrapped in the denoiser interface."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        module = UnifiedTransformer(spec)
    module = module.to(dtype)
    module._layout_buffers.clear()
    return TransformerDenoiser(module)


class TransformerDenoiser:
    """Numpy-facing adapter around UnifiedTransformer for the samplers."""

    def __init__(self, module: UnifiedTransformer):
        self.module = module
        self.spec = module.spec
        self.vocab = module.spec.vocab()

    @property
    def supports_cache(self) -> bool:
        return self.spec.attention == BIDIRECTIONAL

    @property
    def layout(self) -> ModalityLayout:
        return self.spec.layout()

    def _to_tensor(self, tokens: np.ndarray) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(tokens, dtype=np.int64))

    def logits(self, tokens: np.ndarray, layout: ModalityLayout | None = None) -> np.ndarray:
        with torch.no_grad():
            out = self.module(self._to_tensor(tokens), layout)
        return out.double().numpy()

    def logits_with_cache(self, tokens: np.ndarray, layout: ModalityLayout | None = None):
        if not self.supports_cache:
            raise CapabilityError("KV cache requires a bidirectional model")
        with torch.no_grad():
            out, cache = self.module(self._to_tensor(tokens), layout, collect_cache=True)
        return out.double().numpy(), cache

    def text_logits(self, tokens: np.ndarray, layout: ModalityLayout, cache) -> np.ndarray:
        with torch.no_grad():
            out = self.module.forward_text_cached(self._to_tensor(tokens), layout, cache)
        return out.double().numpy()

    def parameters(self):
        return self.module.parameters()

    def non_embedding_param_count(self) -> int:
        """Parameters excluding the token/modality embedding tables, head included."""
        skip = ("tok_emb.", "mod_emb")
        return sum(
            p.numel() for name, p in self.module.named_parameters() if not name.startswith(skip)
        )


def ar_predict(model: TransformerDenoiser, tokens: np.ndarray, layout: ModalityLayout | None = None) -> np.ndarray:
    """Next-token logits for a causal model.

    Input of length n yields n+1 prediction rows internally (a mask token is
    prepended as a start-of-sequence surrogate); row i is the distribution of
    token i given tokens < i, and the trailing row is dropped. An empty input
    returns the single prefix-free row. Row 0 is never trained (the loss
    skips the first position) and exists for the shape/causality contract.
    """
    if model.spec.attention != CAUSAL:
        raise CapabilityError("ar_predict requires a causal model")
    layout = layout or model.layout
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1:
        raise StructuralError("ar_predict takes a single (L,) sequence")
    logits = ar_logits_batch(model, tokens[None, :], layout)
    return logits[0]


def ar_logits_batch(model: TransformerDenoiser, tokens: np.ndarray, layout: ModalityLayout | None = None) -> np.ndarray:
    """Batched ar_predict: (B, n) inputs -> (B, max(n, 1), V) rows."""
    layout = layout or model.layout
    with torch.no_grad():
        out = _ar_forward(model.module, model._to_tensor(tokens), layout)
    return out.double().numpy()


def _ar_forward(module: UnifiedTransformer, tokens: torch.Tensor, layout: ModalityLayout) -> torch.Tensor:
    """Causal forward with the prepended start mask; returns rows 0..n-1
    (or the single row 0 for empty input), row i predicting token i."""
    spec = module.spec
    b, n = tokens.shape[0], tokens.shape[1]
    mask_col = torch.full((b, 1), spec.vocab().mask_id, dtype=torch.long)
    padded = torch.cat([mask_col, tokens], dim=1)

    cos, sin, tags, allowed = module._buffers_for(layout)
    zero = torch.zeros(1, dtype=torch.long)
    ext_tags = torch.cat([zero, tags[:n]])
    ext_cos = torch.cat([torch.ones_like(cos[:1]), cos[:n]])
    ext_sin = torch.cat([torch.zeros_like(sin[:1]), sin[:n]])

    h = module._embed(padded, ext_tags)
    for block in module.blocks:
        h = block(h, (ext_cos, ext_sin))
    if module.final_norm is not None:
        h = module.final_norm(h)
    logits = module.head(h)
    rows = logits[:, : max(n, 1)]
    if spec.suppress_invalid:
        row_allowed = allowed[: rows.shape[1]] if n else allowed[:1]
        rows = rows.masked_fill(~row_allowed, NEG_INF)
    return rows


def save_checkpoint(path, model: TransformerDenoiser) -> None:
    """Versioned binary container: magic, spec block, then raw little-endian
    float32 tensors in parameter declaration order."""
    lines = model.spec.to_lines()
    for name, p in model.module.named_parameters():
        shape = ",".join(str(d) for d in p.shape)
        lines.append(f"tensor.{name}={shape}")
    header = "\n".join(lines).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<HI", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    for _, p in model.module.named_parameters():
        buf.write(p.detach().to(torch.float32).numpy().astype("<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path, dtype=torch.float32) -> TransformerDenoiser:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:5] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {raw[:5]!r}, expected {CHECKPOINT_MAGIC!r}")
    version, header_len = struct.unpack_from("<HI", raw, 5)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header_end = 11 + header_len
    lines = raw[11:header_end].decode("utf-8").splitlines()
    spec_lines = [l for l in lines if not l.startswith("tensor.")]
    tensor_lines = [l for l in lines if l.startswith("tensor.")]
    spec = ModelSpec.from_lines(spec_lines)
    model = build_transformer(spec, seed=0, dtype=dtype)

    manifest = {}
    for line in tensor_lines:
        key, _, shape = line.partition("=")
        manifest[key[len("tensor.") :]] = tuple(int(d) for d in shape.split(",") if d)
    offset = header_end
    with torch.no_grad():
        for name, p in model.module.named_parameters():
            if name not in manifest:
                raise CheckpointError(f"checkpoint missing tensor {name}")
            if tuple(p.shape) != manifest[name]:
                raise CheckpointError(
                    f"tensor {name} shape {tuple(p.shape)} != stored {manifest[name]}"
                )
            nbytes = p.numel() * 4
            if offset + nbytes > len(raw):
                raise CheckpointError("checkpoint payload truncated")
            flat = np.frombuffer(raw, dtype="<f4", count=p.numel(), offset=offset)
            p.copy_(torch.from_numpy(flat.reshape(tuple(p.shape)).copy()).to(dtype))
            offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{len(raw) - offset} trailing bytes in checkpoint")
    return model
