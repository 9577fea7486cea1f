"""Closed-form FLOP cost model for the two context patterns.

``c0`` is the recomputation cost of prepended evidence: every retrieval
re-encodes the whole context, whose length at retrieval ``i`` is ``i*s``,
so the key/value projection work sums to ``2l * sum_i 2*b*i*s*h^2`` and
closes to ``2*T*(T+s)*b*h^2*l / s`` when ``T`` divides by ``s``.  It grows
quadratically in the maximum sequence length.

``c1`` is the adapter overhead of the appending pattern: every sequence
token is projected once through the rank-``r`` adapters, and every
retrieval additionally processes the evidence (``d`` tokens) plus the
``s`` tokens merged back ahead of it.  The model carries a small linear
term (``b*T*h`` and ``b*(d+s)*h`` per layer pair) alongside the adapter
products; its attribution is not spelled out anywhere, so breakdowns
label it "unattributed_linear" and the measured comparison only targets
the adapter products, which the ledger's ``lora`` category counts.

All functions are exact integer arithmetic.  ``reconcile`` compares
measured ledger numbers from an instrumented run against these forms and
demands equality, not approximation: any mismatch is a counting bug.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class FlopsParams:
    b: int  # batch
    h: int  # hidden size
    l: int  # layers
    T: int  # modeled maximum sequence length
    s: int  # retrieval stride
    r: int = 0  # adapter rank
    d: int = 0  # average evidence length (marking tokens excluded by default)

    def __post_init__(self):
        if min(self.b, self.h, self.l, self.T, self.s) < 1:
            raise ValueError(f"b, h, l, T, s must be >= 1, got {self}")
        if self.r < 0 or self.d < 0:
            raise ValueError(f"r and d must be >= 0, got r={self.r}, d={self.d}")

    @property
    def divisible(self) -> bool:
        return self.T % self.s == 0


def _warn_fallback(name: str, p: FlopsParams) -> None:
    warnings.warn(
        f"{name}: T={p.T} not divisible by s={p.s}; falling back to the summation form",
        RuntimeWarning,
        stacklevel=3,
    )


def c0_sum(p: FlopsParams) -> int:
    """Recomputation FLOPs, summation form: 2l * sum_{i=1}^{T/s} 2*b*i*s*h^2."""
    return 2 * p.l * sum(2 * p.b * i * p.s * p.h * p.h for i in range(1, p.T // p.s + 1))


def c0_closed(p: FlopsParams) -> int:
    """Recomputation FLOPs, closed form 2*T*(T+s)*b*h^2*l / s (exact integer)."""
    if not p.divisible:
        _warn_fallback("c0_closed", p)
        return c0_sum(p)
    num = 2 * p.T * (p.T + p.s) * p.b * p.h * p.h * p.l
    q, rem = divmod(num, p.s)
    assert rem == 0
    return q


def c1_sum(p: FlopsParams) -> int:
    """Adapter-pattern FLOPs, summation form:
    2l*(4bThr + bTh) + 2l * sum_{i=1}^{T/s} [4b(d+s)hr + b(d+s)h]."""
    base = 2 * p.l * (4 * p.b * p.T * p.h * p.r + p.b * p.T * p.h)
    per = 4 * p.b * (p.d + p.s) * p.h * p.r + p.b * (p.d + p.s) * p.h
    return base + 2 * p.l * sum(per for _ in range(p.T // p.s))


def c1_closed(p: FlopsParams) -> int:
    """Adapter-pattern FLOPs, closed form 2l*(4r+1)*b*h*T*(d+2s) / s."""
    if not p.divisible:
        _warn_fallback("c1_closed", p)
        return c1_sum(p)
    num = 2 * p.l * (4 * p.r + 1) * p.b * p.h * p.T * (p.d + 2 * p.s)
    q, rem = divmod(num, p.s)
    assert rem == 0
    return q


def c1_lora_terms_sum(p: FlopsParams) -> int:
    """Only the adapter products of c1 (what the lora ledger category counts)."""
    return 2 * p.l * 4 * p.b * p.T * p.h * p.r + 2 * p.l * (p.T // p.s) * 4 * p.b * (p.d + p.s) * p.h * p.r


def c1_unattributed_linear_sum(p: FlopsParams) -> int:
    """The model's leftover linear term (bTh / b(d+s)h per layer pair)."""
    return 2 * p.l * p.b * p.T * p.h + 2 * p.l * (p.T // p.s) * p.b * (p.d + p.s) * p.h


def c_decrement(p: FlopsParams) -> int:
    """FLOPs saved by appending with adapters: c0 - c1, closed form
    2*l*T*b*h*[(T+s)*h - (4r+1)*(d+2s)] / s (may be negative)."""
    if not p.divisible:
        _warn_fallback("c_decrement", p)
        return c0_sum(p) - c1_sum(p)
    num = 2 * p.l * p.T * p.b * p.h * ((p.T + p.s) * p.h - (4 * p.r + 1) * (p.d + 2 * p.s))
    q, rem = divmod(num, p.s)
    assert rem == 0
    assert q == c0_closed(p) - c1_closed(p)
    return q


@dataclass(frozen=True)
class CostBreakdown:
    c0_recompute: int
    c1_lora_append: int
    c_decrement: int
    components: dict

    def __post_init__(self):
        if self.c_decrement != self.c0_recompute - self.c1_lora_append:
            raise ValueError("c_decrement must equal c0 - c1 exactly")


def cost_breakdown(p: FlopsParams) -> CostBreakdown:
    c0 = c0_closed(p) if p.divisible else c0_sum(p)
    c1 = c1_closed(p) if p.divisible else c1_sum(p)
    return CostBreakdown(
        c0_recompute=c0,
        c1_lora_append=c1,
        c_decrement=c0 - c1,
        components={
            "c1_lora_products": c1_lora_terms_sum(p),
            "c1_unattributed_linear": c1_unattributed_linear_sum(p),
            "retrievals": p.T // p.s,
        },
    )


@dataclass(frozen=True)
class ReconMeasurement:
    """Aggregated instrumentation from one reconciliation-mode run."""

    pattern: str
    kv_flops: int
    lora_flops: int
    other_flops: int
    boundary_kv_nonevidence: int  # kv work on non-evidence rows in boundary passes
    boundary_kv_evidence: int
    prefix_reencode_kv: int  # kv work re-encoding prompt rows after their first pass
    reencoded_rows: int
    first_encoded_rows: int
    evidence_rows: int
    retrievals: int
    mode: str = "reconciliation"


@dataclass(frozen=True)
class ReconciliationReport:
    pattern: str
    params: FlopsParams
    comparable: bool
    exact_match: bool
    measured: dict
    analytic: dict
    deltas: dict
    notes: tuple[str, ...]

    def to_json(self) -> str:
        payload = {
            "pattern": self.pattern,
            "params": asdict(self.params),
            "comparable": self.comparable,
            "exact_match": self.exact_match,
            "measured": self.measured,
            "analytic": self.analytic,
            "deltas": self.deltas,
            "notes": list(self.notes),
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"reconciliation: pattern={self.pattern} comparable={self.comparable} "
                 f"exact_match={self.exact_match}"]
        for key in sorted(self.analytic):
            m = self.measured.get(key)
            a = self.analytic[key]
            d = self.deltas.get(key)
            lines.append(f"  {key}: measured={m} analytic={a} delta={d}")
        for note in self.notes:
            lines.append(f"  note: {note}")
        return "\n".join(lines)


def reconcile(measured: ReconMeasurement, p: FlopsParams, pattern: str) -> ReconciliationReport:
    """Compare an instrumented run against the analytic cost model.

    Prepend: the kv-projection work attributable to non-evidence rows of
    boundary passes must equal ``c0_sum`` exactly.  Append: the measured
    adapter products must equal the adapter terms of ``c1_sum`` exactly
    and no prompt-prefix row may ever be re-encoded.  None: the pattern
    has no boundary recomputation at all.
    """
    notes: list[str] = []
    comparable = True
    if measured.mode != "reconciliation":
        notes.append(f"run mode {measured.mode!r} is not reconciliation; report non-comparable")
        comparable = False
    if measured.pattern != pattern:
        notes.append(f"run pattern {measured.pattern!r} does not match requested {pattern!r}")
        comparable = False
    if not p.divisible:
        notes.append(f"T={p.T} not divisible by s={p.s}; comparison uses summation forms")
    if measured.retrievals != p.T // p.s and pattern != "none":
        notes.append(
            f"run performed {measured.retrievals} retrievals, model assumes {p.T // p.s}"
        )
        comparable = False

    analytic: dict = {}
    measured_d: dict = {}
    if pattern == "prepend":
        analytic["boundary_kv_nonevidence"] = c0_sum(p)
        measured_d["boundary_kv_nonevidence"] = measured.boundary_kv_nonevidence
    elif pattern == "append":
        analytic["lora_flops"] = c1_lora_terms_sum(p)
        measured_d["lora_flops"] = measured.lora_flops
        analytic["prefix_reencode_kv"] = 0
        measured_d["prefix_reencode_kv"] = measured.prefix_reencode_kv
    elif pattern == "none":
        analytic["boundary_kv_nonevidence"] = 0
        measured_d["boundary_kv_nonevidence"] = measured.boundary_kv_nonevidence
    else:
        raise ValueError(f"unknown pattern {pattern!r}")

    deltas = {k: measured_d[k] - analytic[k] for k in analytic}
    exact = comparable and all(v == 0 for v in deltas.values())
    return ReconciliationReport(
        pattern=pattern,
        params=p,
        comparable=comparable,
        exact_match=exact,
        measured=measured_d,
        analytic=analytic,
        deltas=deltas,
        notes=tuple(notes),
    )
