"""Fine-tuning and evaluation.

Training adapts the model to a context pattern while the base weights stay
frozen: gradients are computed for the adapter matrices and the two
marking-token embedding rows only, with the next-token cross-entropy
restricted to the target span of each example.  The backward pass is
written out by hand against a float64 replica of the forward computation,
which keeps central finite differences meaningful as an independent check
of every trainable coordinate.

Evaluation implements the continuous-retrieval protocol: a token chunk is
split by the retrieval stride into prefixes, each prefix retrieves its own
passage, and the next ``stride`` tokens are scored teacher-forced.  The
cached evaluator drives the same layout bookkeeping as generation, so a
no-cache oracle over the per-prefix contexts must agree with it.
Perplexity is ``exp`` of the token-mean negative log-likelihood with
marking-token positions excluded from both the sum and the count.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .generation import ContextPattern, _Branch, wrap_evidence
from .kvcache import KvCache
from .model import (
    ModelConfig,
    ModelParams,
    Vocabulary,
    apply_rotary,
    forward_incremental,
    param_names,
    rotary_cos_sin,
)
from .numerics import STRICT, gelu, gelu_grad, seeded_rng
from .retrieval import RetrievalConfig, Retriever


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    steps: int = 100
    warmup_fraction: float = 0.10
    schedule: str = "cosine"
    batch_size: int = 4
    stride: int = 16
    max_seq: int = 256  # context window for example construction
    lora_rank: int = 16
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError(f"warmup_fraction must be in [0, 1], got {self.warmup_fraction}")
        if self.schedule != "cosine":
            raise ValueError(f"only the cosine schedule is implemented, got {self.schedule!r}")


@dataclass
class TrainExample:
    tokens: list[int]
    mask: list[bool]  # True only on target positions (a contiguous span)

    def __post_init__(self):
        if len(self.tokens) != len(self.mask):
            raise ValueError("tokens and mask must have equal length")
        idx = [i for i, m in enumerate(self.mask) if m]
        if not idx:
            raise ValueError("mask selects no target tokens")
        if idx != list(range(idx[0], idx[-1] + 1)):
            raise ValueError("target span must be contiguous")
        if idx[0] == 0:
            raise ValueError("the first position cannot be a target (nothing precedes it)")


def learning_rate_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup from 0 to peak, then cosine decay to 0."""
    warmup = max(1, round(cfg.warmup_fraction * cfg.steps))
    if step <= warmup:
        return cfg.learning_rate * step / warmup
    span = max(1, cfg.steps - warmup)
    frac = min(1.0, (step - warmup) / span)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * frac))


def masked_nll(logits: np.ndarray, tokens: Sequence[int], mask: Sequence[bool]) -> float:
    """Mean NLL over target tokens; position k scores logits row k-1.

    Logit rows at mask-false targets never enter the value, exactly.
    """
    rows = [k - 1 for k, m in enumerate(mask) if m]
    labels = [tokens[k] for k, m in enumerate(mask) if m]
    z = logits.astype(np.float64, copy=False)
    total = 0.0
    for row, label in zip(rows, labels):
        zr = z[row] - z[row].max()
        total += math.log(np.exp(zr).sum()) - zr[label]
    return total / len(rows)


def _upcast(params: ModelParams) -> dict[str, np.ndarray]:
    return {n: t.astype(np.float64) for n, t in params.tensors.items()}


def _ln_fwd(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5):
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * istd
    return xhat * gain + bias, xhat, istd


def _ln_bwd(dy: np.ndarray, xhat: np.ndarray, istd: np.ndarray, gain: np.ndarray) -> np.ndarray:
    dxhat = dy * gain
    return (
        dxhat
        - dxhat.mean(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
    ) * istd


def _rotary_inverse(g: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Adjoint of apply_rotary (the rotation is orthogonal)."""
    ge = g[:, :, 0::2]
    go = g[:, :, 1::2]
    c = cos[:, None, :]
    s = sin[:, None, :]
    out = np.empty_like(g)
    out[:, :, 0::2] = ge * c + go * s
    out[:, :, 1::2] = -ge * s + go * c
    return out


def _forward_tape(w: dict[str, np.ndarray], cfg: ModelConfig, tokens: Sequence[int]):
    """Float64 full-context forward that records what backward needs."""
    tok = np.asarray(tokens, dtype=np.int64)
    n = tok.shape[0]
    h, heads, hd = cfg.hidden, cfg.heads, cfg.head_dim
    sc = cfg.lora_alpha / cfg.lora_rank if cfg.lora_rank > 0 else 0.0
    positions = np.arange(n)
    x = w["embed"][tok].copy()
    if cfg.position_scheme == "learned":
        x = x + w["pos_embed"][positions]
    cos, sin = rotary_cos_sin(positions, hd, dtype=np.float64)
    mask = np.triu(np.ones((n, n), dtype=bool), k=1)
    scale = 1.0 / math.sqrt(hd)

    layers = []
    for i in range(cfg.layers):
        p = f"layer{i}."
        rec: dict = {"x": x}
        a, rec["xhat1"], rec["istd1"] = _ln_fwd(x, w[p + "ln1.gain"], w[p + "ln1.bias"])
        rec["a"] = a
        q = a @ w[p + "wq"]
        k = a @ w[p + "wk"]
        v = a @ w[p + "wv"]
        if cfg.lora_rank > 0:
            rec["zk"] = a @ w[p + "lora_k.a"]
            rec["zv"] = a @ w[p + "lora_v.a"]
            k = k + rec["zk"] @ w[p + "lora_k.b"] * sc
            v = v + rec["zv"] @ w[p + "lora_v.b"] * sc
            if "q" in cfg.lora_targets:
                rec["zq"] = a @ w[p + "lora_q.a"]
                q = q + rec["zq"] @ w[p + "lora_q.b"] * sc
        qh = q.reshape(n, heads, hd)
        kh = k.reshape(n, heads, hd)
        if cfg.position_scheme == "rotary":
            qh = apply_rotary(qh, cos, sin)
            kh = apply_rotary(kh, cos, sin)
        rec["qr"] = qh
        rec["kr"] = kh
        vh = v.reshape(n, heads, hd)
        rec["vh"] = vh
        scores = np.matmul(qh.transpose(1, 0, 2), kh.transpose(1, 2, 0)) * scale
        scores[:, mask] = -np.inf
        smax = scores - scores.max(axis=-1, keepdims=True)
        e = np.exp(smax)
        weights = e / e.sum(axis=-1, keepdims=True)
        rec["weights"] = weights
        att = np.matmul(weights, vh.transpose(1, 0, 2))  # [heads, n, hd]
        att2 = att.transpose(1, 0, 2).reshape(n, h)
        rec["att2"] = att2
        o = att2 @ w[p + "wo"]
        if cfg.lora_rank > 0 and "o" in cfg.lora_targets:
            rec["zo"] = att2 @ w[p + "lora_o.a"]
            o = o + rec["zo"] @ w[p + "lora_o.b"] * sc
        x1 = x + o
        rec["x1"] = x1
        m, rec["xhat2"], rec["istd2"] = _ln_fwd(x1, w[p + "ln2.gain"], w[p + "ln2.bias"])
        rec["m"] = m
        u = m @ w[p + "mlp.w1"] + w[p + "mlp.b1"]
        rec["u"] = u
        f = gelu(u) @ w[p + "mlp.w2"] + w[p + "mlp.b2"]
        x = x1 + f
        layers.append(rec)

    y, xhat_f, istd_f = _ln_fwd(x, w["ln_f.gain"], w["ln_f.bias"])
    logits = y @ w["w_out"]
    tape = {"layers": layers, "xhat_f": xhat_f, "istd_f": istd_f,
            "cos": cos, "sin": sin, "scale": scale, "tok": tok, "n": n}
    return logits, tape


def _backward(
    w: dict[str, np.ndarray],
    cfg: ModelConfig,
    tape: dict,
    dlogits: np.ndarray,
    grads: dict[str, np.ndarray],
) -> None:
    """Accumulate trainable gradients into ``grads`` (adapters + mark rows)."""
    n, heads, hd, h = tape["n"], cfg.heads, cfg.head_dim, cfg.hidden
    sc = cfg.lora_alpha / cfg.lora_rank if cfg.lora_rank > 0 else 0.0
    cos, sin, scale = tape["cos"], tape["sin"], tape["scale"]

    dy = dlogits @ w["w_out"].T
    dx = _ln_bwd(dy, tape["xhat_f"], tape["istd_f"], w["ln_f.gain"])

    for i in reversed(range(cfg.layers)):
        p = f"layer{i}."
        rec = tape["layers"][i]
        # MLP block: x2 = x1 + gelu(m@W1 + b1) @ W2 + b2
        dg = dx @ w[p + "mlp.w2"].T
        du = dg * gelu_grad(rec["u"])
        dm = du @ w[p + "mlp.w1"].T
        dx1 = dx + _ln_bwd(dm, rec["xhat2"], rec["istd2"], w[p + "ln2.gain"])
        # attention block
        do = dx1
        datt2 = do @ w[p + "wo"].T
        if cfg.lora_rank > 0 and "o" in cfg.lora_targets:
            tmp = do @ w[p + "lora_o.b"].T * sc
            grads[p + "lora_o.a"] += rec["att2"].T @ tmp
            grads[p + "lora_o.b"] += rec["zo"].T @ do * sc
            datt2 = datt2 + tmp @ w[p + "lora_o.a"].T
        datt = datt2.reshape(n, heads, hd).transpose(1, 0, 2)  # [heads, n, hd]
        weights, vh = rec["weights"], rec["vh"]
        dweights = np.matmul(datt, vh.transpose(1, 2, 0))  # [heads, n, n]
        dvh = np.matmul(weights.transpose(0, 2, 1), datt)  # [heads, n, hd]
        dscores = weights * (dweights - (dweights * weights).sum(axis=-1, keepdims=True))
        dqr = np.matmul(dscores, rec["kr"].transpose(1, 0, 2)) * scale
        dkr = np.matmul(dscores.transpose(0, 2, 1), rec["qr"].transpose(1, 0, 2)) * scale
        dqh = dqr.transpose(1, 0, 2)
        dkh = dkr.transpose(1, 0, 2)
        if cfg.position_scheme == "rotary":
            dqh = _rotary_inverse(dqh, cos, sin)
            dkh = _rotary_inverse(dkh, cos, sin)
        dq = dqh.reshape(n, h)
        dk = dkh.reshape(n, h)
        dv = dvh.transpose(1, 0, 2).reshape(n, h)
        a = rec["a"]
        da = dq @ w[p + "wq"].T + dk @ w[p + "wk"].T + dv @ w[p + "wv"].T
        if cfg.lora_rank > 0:
            tmp = dk @ w[p + "lora_k.b"].T * sc
            grads[p + "lora_k.a"] += a.T @ tmp
            grads[p + "lora_k.b"] += rec["zk"].T @ dk * sc
            da = da + tmp @ w[p + "lora_k.a"].T
            tmp = dv @ w[p + "lora_v.b"].T * sc
            grads[p + "lora_v.a"] += a.T @ tmp
            grads[p + "lora_v.b"] += rec["zv"].T @ dv * sc
            da = da + tmp @ w[p + "lora_v.a"].T
            if "q" in cfg.lora_targets:
                tmp = dq @ w[p + "lora_q.b"].T * sc
                grads[p + "lora_q.a"] += a.T @ tmp
                grads[p + "lora_q.b"] += rec["zq"].T @ dq * sc
                da = da + tmp @ w[p + "lora_q.a"].T
        dx = dx1 + _ln_bwd(da, rec["xhat1"], rec["istd1"], w[p + "ln1.gain"])

    vocab = Vocabulary(cfg.vocab_base)
    tok = tape["tok"]
    for mark_name, mark_id in (("embed.mark_l", vocab.mark_l_id), ("embed.mark_r", vocab.mark_r_id)):
        hits = tok == mark_id
        if hits.any():
            grads[mark_name] += dx[hits].sum(axis=0)


def trainable_grad_shapes(params: ModelParams) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for name in param_names(params.cfg):
        if ".lora_" in name:
            shapes[name] = params.tensors[name].shape
    shapes["embed.mark_l"] = (params.cfg.hidden,)
    shapes["embed.mark_r"] = (params.cfg.hidden,)
    return shapes


def loss_and_grads(
    params: ModelParams,
    cfg: ModelConfig,
    examples: Sequence[TrainExample],
    weights64: dict[str, np.ndarray] | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Token-mean masked cross-entropy over the batch plus trainable grads."""
    if not examples:
        raise ValueError("empty batch")
    w = weights64 if weights64 is not None else _upcast(params)
    grads = {n: np.zeros(s, dtype=np.float64) for n, s in trainable_grad_shapes(params).items()}
    total_nll = 0.0
    total_targets = 0
    per_example: list[tuple[np.ndarray, dict, list[int], list[int]]] = []
    for ex in examples:
        logits, tape = _forward_tape(w, cfg, ex.tokens)
        rows = [k - 1 for k, m in enumerate(ex.mask) if m]
        labels = [ex.tokens[k] for k, m in enumerate(ex.mask) if m]
        z = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        for row, label in zip(rows, labels):
            total_nll += lse[row] - z[row, label]
        total_targets += len(rows)
        per_example.append((z, tape, rows, labels))
    for z, tape, rows, labels in per_example:
        probs = np.exp(z[rows]) / np.exp(z[rows]).sum(axis=1, keepdims=True)
        dlogits = np.zeros_like(z)
        dlogits[rows] = probs / total_targets
        for row, label in zip(rows, labels):
            dlogits[row, label] -= 1.0 / total_targets
        _backward(w, cfg, tape, dlogits, grads)
    return total_nll / total_targets, grads


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    count: int = 0


def init_adam(params: ModelParams) -> AdamState:
    shapes = trainable_grad_shapes(params)
    return AdamState(
        m={n: np.zeros(s, dtype=np.float64) for n, s in shapes.items()},
        v={n: np.zeros(s, dtype=np.float64) for n, s in shapes.items()},
    )


def train_step(
    params: ModelParams,
    batch: Sequence[TrainExample],
    cfg: TrainConfig,
    step: int,
    opt: AdamState | None = None,
) -> tuple[ModelParams, float]:
    """One optimizer step; only the trainable partition is ever written.

    Returns the (mutated in place) params and the batch loss measured
    before the update.  Frozen tensors are untouched bit for bit.
    """
    opt = opt if opt is not None else init_adam(params)
    loss, grads = loss_and_grads(params, params.cfg, batch)
    lr = learning_rate_at(cfg, step)
    opt.count += 1
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    vocab = Vocabulary(params.cfg.vocab_base)
    mark_rows = {"embed.mark_l": vocab.mark_l_id, "embed.mark_r": vocab.mark_r_id}
    for name, g in grads.items():
        opt.m[name] = b1 * opt.m[name] + (1 - b1) * g
        opt.v[name] = b2 * opt.v[name] + (1 - b2) * g * g
        mhat = opt.m[name] / (1 - b1**opt.count)
        vhat = opt.v[name] / (1 - b2**opt.count)
        update = lr * mhat / (np.sqrt(vhat) + eps)
        if name in mark_rows:
            row = mark_rows[name]
            new = params.tensors["embed"][row].astype(np.float64) - update
            params.tensors["embed"][row] = new.astype(np.float32)
        else:
            new = params.tensors[name].astype(np.float64) - update
            params.tensors[name] = new.astype(np.float32)
    return params, float(loss)


def train_loop(
    params: ModelParams,
    dataset: Sequence[TrainExample],
    cfg: TrainConfig,
) -> list[tuple[int, float, float]]:
    """Run ``cfg.steps`` steps cycling through the dataset deterministically.

    Returns (step, lr, loss) rows, one per step.
    """
    opt = init_adam(params)
    metrics: list[tuple[int, float, float]] = []
    bs = max(1, cfg.batch_size)
    for step in range(cfg.steps + 1):
        lo = (step * bs) % len(dataset)
        batch = [dataset[(lo + j) % len(dataset)] for j in range(min(bs, len(dataset)))]
        _, loss = train_step(params, batch, cfg, step, opt)
        metrics.append((step, learning_rate_at(cfg, step), loss))
    return metrics


@dataclass(frozen=True)
class GradCheckReport:
    checked: int
    passed: int
    worst_rel: float

    @property
    def fraction_ok(self) -> float:
        return self.passed / self.checked if self.checked else 1.0


def finite_difference_check(
    params: ModelParams,
    cfg: ModelConfig,
    examples: Sequence[TrainExample],
    eps: float = 1e-3,
    rel_tol: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Central finite differences vs the analytic gradient, per coordinate.

    The step is ``eps * max(|w|, 1)``; both sides run the same float64
    loss.  Coordinates where both gradients are below 1e-8 count as
    passing (the relative error is meaningless there).
    """
    w = _upcast(params)
    _, grads = loss_and_grads(params, cfg, examples, weights64=w)
    vocab = Vocabulary(cfg.vocab_base)
    targets: list[tuple[str, np.ndarray, tuple, float]] = []
    for name, g in grads.items():
        if name == "embed.mark_l":
            arr, base_idx = w["embed"], vocab.mark_l_id
        elif name == "embed.mark_r":
            arr, base_idx = w["embed"], vocab.mark_r_id
        else:
            arr, base_idx = w[name], None
        for idx in np.ndindex(g.shape):
            full_idx = (base_idx,) + idx if base_idx is not None else idx
            targets.append((name, arr, full_idx, float(g[idx])))
    if max_coords is not None and len(targets) > max_coords:
        rng = seeded_rng(seed)
        pick = rng.choice(len(targets), size=max_coords, replace=False)
        targets = [targets[i] for i in sorted(pick)]

    def loss_only() -> float:
        total, count = 0.0, 0
        for ex in examples:
            logits, _ = _forward_tape(w, cfg, ex.tokens)
            total += masked_nll(logits, ex.tokens, ex.mask) * sum(ex.mask)
            count += sum(ex.mask)
        return total / count

    passed = 0
    worst = 0.0
    for _, arr, idx, analytic in targets:
        base = arr[idx]
        h = eps * max(abs(base), 1.0)
        arr[idx] = base + h
        lp = loss_only()
        arr[idx] = base - h
        lm = loss_only()
        arr[idx] = base
        fd = (lp - lm) / (2 * h)
        denom = max(abs(fd), abs(analytic))
        if denom < 1e-8:
            passed += 1
            continue
        rel = abs(fd - analytic) / denom
        worst = max(worst, rel)
        if rel <= rel_tol:
            passed += 1
    return GradCheckReport(checked=len(targets), passed=passed, worst_rel=worst)


# ---------------------------------------------------------------------------
# dataset construction and persistence


def build_training_set(
    corpus_tokens: Sequence[int],
    s: int,
    T: int,
    seed: int,
    retriever: Retriever | None = None,
    pattern: ContextPattern = ContextPattern.APPEND,
    use_marks: bool = True,
    query_len: int = 16,
    vocab: Vocabulary | None = None,
    limit: int | None = None,
) -> list[TrainExample]:
    """Examples with the target's start offset drawn from U{T/2, T-s}.

    Every ``s``-token window of the corpus past the first ``T`` tokens
    becomes a target; its prefix is the ``p`` preceding corpus tokens where
    ``p ~ U{T/2, T-s}``, the retrieval query is the prefix's trailing
    ``query_len`` tokens, and the retrieved passage is laid out per the
    chosen pattern.  The loss mask covers exactly the target span.
    """
    corpus = list(corpus_tokens)
    if len(corpus) <= T:
        raise ValueError(f"corpus of {len(corpus)} tokens is shorter than the window T={T}")
    if not T // 2 <= T - s:
        raise ValueError(f"stride s={s} too large for window T={T}")
    vocab = vocab or Vocabulary()
    rng = seeded_rng(seed)
    examples: list[TrainExample] = []
    for j in range(T, len(corpus) - s + 1, s):
        p = int(rng.integers(T // 2, T - s + 1))
        prefix = corpus[j - p:j]
        target = corpus[j:j + s]
        evidence: tuple[int, ...] = ()
        if retriever is not None and pattern is not ContextPattern.NONE:
            query = prefix[-query_len:]
            docs = retriever.retrieve_docs(query, 1)
            evidence = wrap_evidence(docs[0].tokens if docs else (), use_marks, vocab)
        if pattern is ContextPattern.PREPEND:
            tokens = list(evidence) + prefix + target
        elif pattern is ContextPattern.APPEND:
            tokens = prefix + list(evidence) + target
        else:
            tokens = prefix + target
        mask = [False] * (len(tokens) - s) + [True] * s
        examples.append(TrainExample(tokens=tokens, mask=mask))
        if limit is not None and len(examples) >= limit:
            break
    return examples


def save_examples(path, examples: Sequence[TrainExample]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps({"tokens": ex.tokens, "mask": [int(m) for m in ex.mask]}))
            f.write("\n")


def load_examples(path) -> list[TrainExample]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                rec = json.loads(line)
                out.append(TrainExample(tokens=rec["tokens"], mask=[bool(m) for m in rec["mask"]]))
    return out


# ---------------------------------------------------------------------------
# continuous-retrieval perplexity


@dataclass(frozen=True)
class EvalChunk:
    tokens: tuple[int, ...]
    stride: int

    def __post_init__(self):
        if len(self.tokens) % self.stride != 0:
            raise ValueError("chunk length must be a multiple of the stride")
        if len(self.tokens) < 2 * self.stride:
            raise ValueError("chunk must cover at least one prefix and one target stride")

    def prefixes(self) -> list[tuple[int, ...]]:
        s = self.stride
        return [self.tokens[:j] for j in range(s, len(self.tokens), s)]


def make_eval_chunks(tokens: Sequence[int], chunk_len: int, stride: int) -> list[EvalChunk]:
    usable = (chunk_len // stride) * stride
    if usable < 2 * stride:
        raise ValueError(f"chunk_len {chunk_len} too small for stride {stride}")
    chunks = []
    toks = list(tokens)
    for start in range(0, len(toks) - usable + 1, usable):
        chunks.append(EvalChunk(tokens=tuple(toks[start:start + usable]), stride=stride))
    return chunks


def _log_softmax_pick(logits_row: np.ndarray, label: int) -> float:
    z = logits_row.astype(np.float64)
    z = z - z.max()
    return float(math.log(np.exp(z).sum()) - z[label])


def chunk_nll(
    params: ModelParams,
    cfg: ModelConfig,
    retriever: Retriever | None,
    chunk: EvalChunk,
    pattern: ContextPattern,
    retrieval_cfg: RetrievalConfig,
    use_marks: bool = False,
    precision: str = STRICT,
    exclude_marks: bool = True,
) -> tuple[float, int]:
    """(NLL sum, token count) for one chunk under the cached evaluator.

    Exact pairs like this reduce by summation, so sharding chunks across
    workers cannot change the result.
    """
    vocab = params.vocabulary()
    toks = list(chunk.tokens)
    s = chunk.stride
    branch = _Branch(params, cfg, pattern, None, precision)
    branch.prefill(toks[:s])
    nlls: list[float] = []
    count = 0
    for n in range(s, len(toks)):
        boundary = pattern is not ContextPattern.NONE and (n - s) % s == 0
        wrapped: tuple[int, ...] = ()
        if boundary:
            query = toks[max(0, n - retrieval_cfg.query_len):n]
            docs = retriever.retrieve_docs(query, 1) if retriever else []
            wrapped = wrap_evidence(docs[0].tokens if docs else (), use_marks, vocab)
        logits, _ = branch.step(toks, n, boundary, wrapped)
        target = toks[n]
        if exclude_marks and target in (vocab.mark_l_id, vocab.mark_r_id):
            continue
        nlls.append(_log_softmax_pick(logits[-1], target))
        count += 1
    return math.fsum(nlls), count


def perplexity_continuous(
    params: ModelParams,
    cfg: ModelConfig,
    retriever: Retriever | None,
    chunks: Sequence[EvalChunk],
    pattern: ContextPattern,
    retrieval_cfg: RetrievalConfig,
    use_marks: bool = False,
    precision: str = STRICT,
    exclude_marks: bool = True,
) -> float:
    """exp(token-mean NLL) across all prefixes of all chunks, teacher forced."""
    if not chunks:
        raise ValueError("empty evaluation set")
    sums: list[float] = []
    total = 0
    for chunk in chunks:
        nll, cnt = chunk_nll(
            params, cfg, retriever, chunk, pattern, retrieval_cfg,
            use_marks, precision, exclude_marks,
        )
        sums.append(nll)
        total += cnt
    if total == 0:
        raise ValueError("no scored tokens in the evaluation set")
    return math.exp(math.fsum(sums) / total)


def sequence_nll(
    params: ModelParams,
    cfg: ModelConfig,
    tokens: Sequence[int],
    scored_from: int = 1,
    exclude_token_ids: Sequence[int] = (),
    precision: str = STRICT,
) -> tuple[float, int]:
    """Teacher-forced NLL over one full sequence, no cache reuse.

    Targets whose id is in ``exclude_token_ids`` are dropped from both the
    sum and the count, which is how marking tokens stay out of the metric.
    """
    toks = list(tokens)
    cache = KvCache(cfg.layers, cfg.hidden, len(toks))
    out = forward_incremental(params, cfg, cache, toks, 0, None, precision)
    excluded = set(exclude_token_ids)
    nlls = [
        _log_softmax_pick(out.logits[k - 1], toks[k])
        for k in range(max(1, scored_from), len(toks))
        if toks[k] not in excluded
    ]
    return math.fsum(nlls), len(nlls)
