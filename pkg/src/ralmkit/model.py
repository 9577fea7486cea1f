"""Decoder-only transformer with incremental decoding over a KvCache.

Pre-norm blocks, multi-head causal attention with rotary position encoding
(learned absolute positions available behind config), a GELU MLP, an
untied output head, and optional low-rank adapters on the key/value
projections.  The vocabulary is byte-level (256 byte tokens plus
begin-of-text and padding) extended with two marking tokens that bracket
retrieved evidence; the marking-token embedding rows and the adapter
matrices form the trainable partition, everything else stays frozen.

Positions are a function of the absolute index supplied by the caller, so
cached key/value rows are only valid while the token keeps its logical
position; re-encoding after a position change is the caller's job and is
what the generation strategies' truncation rules enforce.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kvcache import KvCache
from .numerics import (
    KV_PROJECTION,
    LORA,
    OTHER,
    STRICT,
    FlopsLedger,
    Tensor2,
    gelu,
    layer_norm,
    matmul,
    seeded_rng,
)

BOT_TOKEN = 256  # begin-of-text
PAD_TOKEN = 257

ROTARY_BASE = 10000.0

CHECKPOINT_MAGIC = "ralmkit-checkpoint v1"


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    hidden: int = 256
    heads: int = 4
    mlp_dim: int = 1024
    vocab_base: int = 258
    max_seq: int = 4096
    lora_rank: int = 0
    lora_alpha: float = 16.0
    lora_targets: str = "kv"  # "kv" or "qkvo"
    position_scheme: str = "rotary"  # "rotary" or "learned"

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.position_scheme == "rotary" and self.head_dim % 2 != 0:
            raise ValueError(f"rotary needs even head_dim, got {self.head_dim}")
        if self.max_seq < 1 or self.lora_rank < 0 or self.layers < 1:
            raise ValueError("max_seq and layers must be >= 1, lora_rank >= 0")
        if self.lora_targets not in ("kv", "qkvo"):
            raise ValueError(f"lora_targets must be 'kv' or 'qkvo', got {self.lora_targets!r}")
        if self.position_scheme not in ("rotary", "learned"):
            raise ValueError(f"unknown position_scheme {self.position_scheme!r}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def vocab_size(self) -> int:
        return self.vocab_base + 2  # marking tokens appended after the base vocab


@dataclass(frozen=True)
class Vocabulary:
    """Byte-level base vocabulary plus the two appended marking tokens."""

    base_size: int = 258

    @property
    def mark_l_id(self) -> int:
        return self.base_size

    @property
    def mark_r_id(self) -> int:
        return self.base_size + 1

    @property
    def size(self) -> int:
        return self.base_size + 2

    def encode_text(self, text: str, bos: bool = False) -> list[int]:
        ids = list(text.encode("utf-8"))
        return [BOT_TOKEN] + ids if bos else ids

    def decode_tokens(self, ids) -> str:
        return bytes(t for t in ids if t < 256).decode("utf-8", errors="replace")


def param_names(cfg: ModelConfig) -> list[str]:
    """Canonical parameter order: also the checkpoint serialization order."""
    names = ["embed"]
    if cfg.position_scheme == "learned":
        names.append("pos_embed")
    for i in range(cfg.layers):
        p = f"layer{i}."
        names += [p + "ln1.gain", p + "ln1.bias", p + "wq", p + "wk", p + "wv", p + "wo"]
        if cfg.lora_rank > 0:
            for t in cfg.lora_targets:
                names += [p + f"lora_{t}.a", p + f"lora_{t}.b"]
        names += [p + "ln2.gain", p + "ln2.bias", p + "mlp.w1", p + "mlp.b1", p + "mlp.w2", p + "mlp.b2"]
    names += ["ln_f.gain", "ln_f.bias", "w_out"]
    return names


def param_shape(cfg: ModelConfig, name: str) -> tuple[int, ...]:
    h, r, m = cfg.hidden, cfg.lora_rank, cfg.mlp_dim
    if name == "embed":
        return (cfg.vocab_size, h)
    if name == "pos_embed":
        return (cfg.max_seq, h)
    leaf = name.split(".", 1)[1] if name.startswith("layer") else name
    if leaf in ("ln1.gain", "ln1.bias", "ln2.gain", "ln2.bias") or name in ("ln_f.gain", "ln_f.bias"):
        return (h,)
    if leaf in ("wq", "wk", "wv", "wo"):
        return (h, h)
    if leaf.startswith("lora_"):
        return (h, r) if leaf.endswith(".a") else (r, h)
    if leaf == "mlp.w1":
        return (h, m)
    if leaf == "mlp.b1":
        return (m,)
    if leaf == "mlp.w2":
        return (m, h)
    if leaf == "mlp.b2":
        return (h,)
    if name == "w_out":
        return (h, cfg.vocab_size)
    raise KeyError(name)


class ModelParams:
    """Named parameter tensors plus the frozen/trainable partition.

    In fine-tuning mode the trainable set is exactly the marking-token
    embedding rows and the adapter matrices; everything else is frozen.
    """

    def __init__(self, cfg: ModelConfig, tensors: dict[str, np.ndarray]):
        expected = param_names(cfg)
        missing = [n for n in expected if n not in tensors]
        extra = [n for n in tensors if n not in expected]
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing {missing}, extra {extra}")
        for n in expected:
            want = param_shape(cfg, n)
            if tensors[n].shape != want:
                raise ValueError(f"{n}: expected shape {want}, got {tensors[n].shape}")
        self.cfg = cfg
        self.tensors = tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.cfg.vocab_base)

    def trainable_ids(self) -> frozenset[str]:
        """Identifiers of what fine-tuning may change.

        The embedding matrix is frozen except for its two marking-token
        rows, which get pseudo-identifiers of their own.
        """
        ids = {"embed.mark_l", "embed.mark_r"}
        for n in param_names(self.cfg):
            if ".lora_" in n:
                ids.add(n)
        return frozenset(ids)

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {n: t.copy() for n, t in self.tensors.items()})


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Deterministic initialization; adapter B matrices start at zero and
    the marking-token rows start at the mean of the base embedding rows."""
    rng = seeded_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name in param_names(cfg):
        shape = param_shape(cfg, name)
        leaf = name.split(".", 1)[1] if name.startswith("layer") else name
        if leaf.endswith("gain"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif leaf.endswith("bias") or leaf in ("mlp.b1", "mlp.b2"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        elif ".lora_" in name and name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            tensors[name] = (rng.standard_normal(shape) * 0.02).astype(np.float32)
    vocab = Vocabulary(cfg.vocab_base)
    emb = tensors["embed"]
    base_mean = emb[: cfg.vocab_base].mean(axis=0)
    emb[vocab.mark_l_id] = base_mean
    emb[vocab.mark_r_id] = base_mean
    return ModelParams(cfg, tensors)


def lora_delta(
    x: Tensor2,
    a: Tensor2,
    b: Tensor2,
    ledger: FlopsLedger | None = None,
    scale: float = 1.0,
    precision: str = STRICT,
) -> Tensor2:
    """Low-rank update ``(x @ A) @ B * scale``; books 4*n*h*r adapter FLOPs."""
    down = matmul(x, a, ledger, LORA, precision)
    up = matmul(down, b, ledger, LORA, precision)
    if scale != 1.0:
        up = up * x.dtype.type(scale)
    return up


def rotary_cos_sin(positions: np.ndarray, head_dim: int, dtype=np.float32):
    """cos/sin tables for the given absolute positions, shape [n, head_dim/2]."""
    half = head_dim // 2
    inv_freq = ROTARY_BASE ** (-np.arange(0, half, dtype=np.float64) / half)
    ang = positions.astype(np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def apply_rotary(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate interleaved pairs of the last axis; x is [n, heads, head_dim]."""
    xe = x[:, :, 0::2]
    xo = x[:, :, 1::2]
    c = cos[:, None, :]
    s = sin[:, None, :]
    out = np.empty_like(x)
    out[:, :, 0::2] = xe * c - xo * s
    out[:, :, 1::2] = xe * s + xo * c
    return out


@dataclass
class ForwardOutput:
    logits: Tensor2  # one row per newly supplied token (or just the last, on request)


def _attention_softmax(scores: np.ndarray, precision: str) -> np.ndarray:
    if precision == STRICT:
        x = scores.astype(np.float64)
        x -= x.max(axis=-1, keepdims=True)
        e = np.exp(x)
        return (e / e.sum(axis=-1, keepdims=True)).astype(scores.dtype)
    scores = scores - scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    return scores


def forward_incremental(
    params: ModelParams,
    cfg: ModelConfig,
    cache: KvCache,
    new_tokens,
    start_position: int,
    ledger: FlopsLedger | None = None,
    precision: str = STRICT,
    logits_rows: str = "all",
) -> ForwardOutput:
    """Run the model over ``new_tokens`` continuing from the cache.

    Appends exactly ``len(new_tokens)`` key/value rows per layer; position
    ``i`` of the new block attends to cache rows ``0..start_position+i``.
    Key/value projection products are booked under ``kv_projection``,
    adapter products under ``lora``, and everything else under ``other``.
    """
    tok = np.asarray(new_tokens, dtype=np.int64)
    n = tok.shape[0]
    if n == 0:
        raise ValueError("new_tokens must be non-empty")
    if cache.logical_len != start_position:
        raise ValueError(
            f"cache length {cache.logical_len} != start_position {start_position}"
        )
    if start_position + n > cfg.max_seq:
        raise ValueError(
            f"sequence of {start_position + n} tokens exceeds max_seq {cfg.max_seq}"
        )
    if tok.min() < 0 or tok.max() >= cfg.vocab_size:
        raise ValueError(
            f"token id out of range [0, {cfg.vocab_size}): {int(tok.max())}"
        )

    h, heads, hd = cfg.hidden, cfg.heads, cfg.head_dim
    positions = np.arange(start_position, start_position + n)
    x = params["embed"][tok].copy()
    if cfg.position_scheme == "learned":
        x += params["pos_embed"][positions]
    if cfg.position_scheme == "rotary":
        cos, sin = rotary_cos_sin(positions, hd, dtype=x.dtype)

    ctx = start_position + n
    # causal mask over the full context for the new rows
    col = np.arange(ctx)
    disallowed = col[None, :] > (positions[:, None])
    scale = np.float32(1.0 / np.sqrt(hd))
    lora_scale = cfg.lora_alpha / cfg.lora_rank if cfg.lora_rank > 0 else 0.0

    for i in range(cfg.layers):
        p = f"layer{i}."
        a = layer_norm(x, params[p + "ln1.gain"], params[p + "ln1.bias"])
        q = matmul(a, params[p + "wq"], ledger, OTHER, precision)
        k = matmul(a, params[p + "wk"], ledger, KV_PROJECTION, precision)
        v = matmul(a, params[p + "wv"], ledger, KV_PROJECTION, precision)
        if cfg.lora_rank > 0:
            k = k + lora_delta(a, params[p + "lora_k.a"], params[p + "lora_k.b"], ledger, lora_scale, precision)
            v = v + lora_delta(a, params[p + "lora_v.a"], params[p + "lora_v.b"], ledger, lora_scale, precision)
            if "q" in cfg.lora_targets:
                q = q + lora_delta(a, params[p + "lora_q.a"], params[p + "lora_q.b"], ledger, lora_scale, precision)

        qh = q.reshape(n, heads, hd)
        kh = k.reshape(n, heads, hd)
        if cfg.position_scheme == "rotary":
            qh = apply_rotary(qh, cos, sin)
            kh = apply_rotary(kh, cos, sin)
        cache.write_rows(i, start_position, kh.reshape(n, h), v)

        k_all = cache.keys(i, ctx).reshape(ctx, heads, hd)
        v_all = cache.values(i, ctx).reshape(ctx, heads, hd)
        if precision == STRICT:
            qq = qh.astype(np.float64).transpose(1, 0, 2)
            kk = k_all.astype(np.float64).transpose(1, 2, 0)
            scores = (np.matmul(qq, kk) * float(scale)).astype(np.float32)
        else:
            scores = np.matmul(qh.transpose(1, 0, 2), k_all.transpose(1, 2, 0)) * scale
        if ledger is not None:
            ledger.add(OTHER, 2 * n * h * ctx)
        scores[:, disallowed] = -np.inf
        weights = _attention_softmax(scores, precision)
        if precision == STRICT:
            ww = weights.astype(np.float64)
            vv = v_all.astype(np.float64).transpose(1, 0, 2)
            att = np.matmul(ww, vv).astype(np.float32)
        else:
            att = np.matmul(weights, v_all.transpose(1, 0, 2))
        if ledger is not None:
            ledger.add(OTHER, 2 * n * h * ctx)
        att2 = att.transpose(1, 0, 2).reshape(n, h)
        o = matmul(np.ascontiguousarray(att2), params[p + "wo"], ledger, OTHER, precision)
        if cfg.lora_rank > 0 and "o" in cfg.lora_targets:
            o = o + lora_delta(att2, params[p + "lora_o.a"], params[p + "lora_o.b"], ledger, lora_scale, precision)
        x = x + o

        m = layer_norm(x, params[p + "ln2.gain"], params[p + "ln2.bias"])
        u = matmul(m, params[p + "mlp.w1"], ledger, OTHER, precision) + params[p + "mlp.b1"]
        f = matmul(gelu(u), params[p + "mlp.w2"], ledger, OTHER, precision) + params[p + "mlp.b2"]
        x = x + f

    cache.advance(n)
    if logits_rows == "last":
        x = x[-1:]
    y = layer_norm(x, params["ln_f.gain"], params["ln_f.bias"])
    logits = matmul(y, params["w_out"], ledger, OTHER, precision)
    return ForwardOutput(logits=logits)


def save_checkpoint(path, params: ModelParams, seed: int | None = None) -> None:
    """Plain-text header (config fields, format version) then raw
    little-endian float32 bytes for each parameter in canonical order."""
    cfg = params.cfg
    lines = [CHECKPOINT_MAGIC]
    for key in ("layers", "hidden", "heads", "mlp_dim", "vocab_base", "max_seq",
                "lora_rank", "lora_alpha", "lora_targets", "position_scheme"):
        lines.append(f"{key}={getattr(cfg, key)}")
    if seed is not None:
        lines.append(f"seed={seed}")
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as f:
        f.write(header)
        for name in param_names(cfg):
            arr = np.ascontiguousarray(params[name], dtype=np.float32)
            f.write(arr.astype("<f4", copy=False).tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict[str, str]]:
    """Inverse of save_checkpoint; round-trips bit-exactly."""
    with open(path, "rb") as f:
        data = f.read()
    nl = data.index(b"\n")
    if data[:nl].decode("utf-8") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a ralmkit checkpoint")
    pos = nl + 1
    fields: dict[str, str] = {}
    while True:
        nl = data.index(b"\n", pos)
        line = data[pos:nl].decode("utf-8")
        pos = nl + 1
        if line == "end":
            break
        key, _, value = line.partition("=")
        fields[key] = value
    cfg = ModelConfig(
        layers=int(fields["layers"]),
        hidden=int(fields["hidden"]),
        heads=int(fields["heads"]),
        mlp_dim=int(fields["mlp_dim"]),
        vocab_base=int(fields["vocab_base"]),
        max_seq=int(fields["max_seq"]),
        lora_rank=int(fields["lora_rank"]),
        lora_alpha=float(fields["lora_alpha"]),
        lora_targets=fields["lora_targets"],
        position_scheme=fields["position_scheme"],
    )
    tensors: dict[str, np.ndarray] = {}
    for name in param_names(cfg):
        shape = param_shape(cfg, name)
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos)
        pos += count * 4
        tensors[name] = arr.reshape(shape).astype(np.float32, copy=True)
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes after parameters")
    return ModelParams(cfg, tensors), fields
