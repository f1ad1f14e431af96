"""Naive vs. decomposed triaffine scoring: exactness gate, FLOPs, wall clock.

Both methods share the attention prefix (boundary/content/value heads, the
trilinear attention scores, the softmax).  They differ in the scoring stage:
the naive order aggregates value vectors per span and evaluates the full
trilinear form once per (span, label); the decomposed order contracts the
scoring tensors with the two boundary maps once, shares that across the
content axis, and aggregates the resulting scalars.  Timing only runs after
the two orders agree on identical 64-bit inputs.

The FLOP counter is shape-only and mirrors the two evaluation orders as
implemented here, counting the canonical mode-by-mode contraction sequence;
multiply-adds only, elementwise and softmax traffic ignored.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .tensor import cached_einsum
from .triaffine import span_mask

# context from the original large-scale GPU runs (d=256, N=192, m=30, totals
# for 10 iterations); printed for orientation, never asserted.
REFERENCE_MS = {
    "token": {"naive": 638.1, "decomposed": 432.7},
    "cross": {"naive": 140.8, "decomposed": 132.3},
}

CLAMP = 50.0  # attention logits are clamped to +-CLAMP in 32-bit mode only


@dataclass
class BenchConfig:
    batch: int = 2
    seq_len: int = 64
    d: int = 64
    labels: int = 6  # includes the None class
    m: int = 30
    iterations: int = 5
    precision: int = 64  # 32 or 64
    seed: int = 0
    gate_tolerance: float = 1e-9  # relative, checked at 64-bit before timing

    def validate(self) -> None:
        if min(self.batch, self.seq_len, self.d, self.labels, self.m) < 1:
            raise ConfigError("batch, seq_len, d, labels, and m must all be >= 1")
        if self.iterations < 3:
            raise ConfigError(f"iterations must be >= 3, got {self.iterations}")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64


# ---------------------------------------------------------------------------
# analytic FLOP formulas (multiply-adds)
# ---------------------------------------------------------------------------

def _span_counts(n: int) -> tuple[int, int]:
    spans = n * (n + 1) // 2
    sum_len = n * (n + 1) * (n + 2) // 6
    return spans, sum_len


def _form_cost(d: int) -> int:
    # full trilinear form on one content vector, evaluated mode by mode
    dp = d + 1
    return dp * d * dp + d * dp + dp


def _shared_cost(d: int) -> int:
    # boundary contractions (modes 1 and 3) shared across the content axis
    dp = d + 1
    return dp * d * dp + d * dp


def flops_token_prefix(b: int, n: int, r: int, d: int) -> int:
    dp = d + 1
    heads = 6 * n * d * d  # attention left/right/content, value, scoring left/right
    scores = r * (n * dp * d * dp + n * n * d * dp + n ** 3 * d)
    return b * (heads + scores)


def flops_token_naive(b: int, n: int, r: int, d: int) -> int:
    spans, sum_len = _span_counts(n)
    return b * r * (sum_len * d + spans * _form_cost(d))


def flops_token_decomposed(b: int, n: int, r: int, d: int) -> int:
    dp = d + 1
    return b * r * (n * dp * d * dp + n * n * d * dp + n ** 3 * d + n ** 3)


def flops_cross_prefix(b: int, m: int, r: int, d: int) -> int:
    dp = d + 1
    heads = 4 * m * d * d + 2 * m * r * d * d  # boundary maps, key and value heads
    scores = r * (m * dp * d * dp + m * d * dp + m * m * d)
    return b * (heads + scores)


def flops_cross_naive(b: int, m: int, r: int, d: int) -> int:
    return b * r * (m * m * d + m * _form_cost(d))


def flops_cross_decomposed(b: int, m: int, r: int, d: int) -> int:
    return b * r * (m * _shared_cost(d) + m * m * d + m * m)


# ---------------------------------------------------------------------------
# raw evaluation paths (plain numpy; no tape)
# ---------------------------------------------------------------------------

def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _augment(x: np.ndarray) -> np.ndarray:
    pad = np.ones(x.shape[:-1] + (1,), x.dtype)
    return np.concatenate([x, pad], axis=-1)


def _head_weights(rng, d_in: int, d_out: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    return (
        rng.normal(0.0, 0.1, (d_in, d_out)).astype(dtype),
        rng.normal(0.0, 0.05, d_out).astype(dtype),
    )


def token_inputs(cfg: BenchConfig, dtype) -> tuple[np.ndarray, dict]:
    """Seeded token features and stage weights; identical values at any dtype."""
    rng = np.random.default_rng(cfg.seed)
    b, n, r, d = cfg.batch, cfg.seq_len, cfg.labels, cfg.d
    h = (0.5 * rng.standard_normal((b, n, d))).astype(dtype)
    w: dict[str, np.ndarray] = {
        "att_tensors": rng.normal(0.0, 0.05, (r, d + 1, d, d + 1)).astype(dtype),
        "score_tensors": rng.normal(0.0, 0.2, (r, d + 1, d, d + 1)).astype(dtype),
    }
    for tag in ("att_l", "att_r", "att_c", "val", "score_l", "score_r"):
        w[f"{tag}_w"], w[f"{tag}_b"] = _head_weights(rng, d, d, dtype)
    return h, w


def token_prefix(h: np.ndarray, w: dict, clamp: bool):
    u2 = _augment(_relu(h @ w["att_l_w"] + w["att_l_b"]))
    v2 = _augment(_relu(h @ w["att_r_w"] + w["att_r_b"]))
    toks = _relu(h @ w["att_c_w"] + w["att_c_b"])
    vals = _relu(h @ w["val_w"] + w["val_b"])
    s = cached_einsum("rabc,nia,nkb,njc->nijkr", w["att_tensors"], u2, toks, v2)
    if clamp:
        s = np.clip(s, -CLAMP, CLAMP)
    n = h.shape[1]
    mask = np.broadcast_to(span_mask(n)[None, :, :, :, None], s.shape)
    z = np.where(mask, s, -np.inf)
    mx = z.max(axis=3, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(mask, np.exp(z - mx), 0.0)
    tot = e.sum(axis=3, keepdims=True)
    alpha = e / np.where(tot == 0.0, 1.0, tot)
    su2 = _augment(_relu(h @ w["score_l_w"] + w["score_l_b"]))
    sv2 = _augment(_relu(h @ w["score_r_w"] + w["score_r_b"]))
    return alpha, vals, su2, sv2


def token_stage_naive(alpha, vals, su2, sv2, tensors, spans0) -> np.ndarray:
    b = alpha.shape[0]
    r = tensors.shape[0]
    out = np.empty((b, len(spans0), r), alpha.dtype)
    for bi in range(b):
        for sx, (i0, j0) in enumerate(spans0):
            a = alpha[bi, i0, j0, i0 : j0 + 1, :]
            rep = a.T @ vals[bi, i0 : j0 + 1, :]  # aggregated (labels, d) representation
            out[bi, sx] = cached_einsum(
                "rabc,a,rb,c->r", tensors, su2[bi, i0], rep, sv2[bi, j0]
            )
    return out


def token_stage_decomposed(alpha, vals, su2, sv2, tensors, flat) -> np.ndarray:
    per_token = cached_einsum("rabc,nia,nkb,njc->nijkr", tensors, su2, vals, sv2)
    p = cached_einsum("nijkr,nijkr->nijr", alpha, per_token)
    b, n = alpha.shape[0], alpha.shape[1]
    return p.reshape(b, n * n, tensors.shape[0])[:, flat, :]


def cross_inputs(cfg: BenchConfig, dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray, dict]:
    """Seeded retained-span boundaries, candidate representations, and weights."""
    rng = np.random.default_rng(cfg.seed + 1)
    b, m, r, d = cfg.batch, cfg.m, cfg.labels, cfg.d
    left = (0.5 * rng.standard_normal((b, m, d))).astype(dtype)
    right = (0.5 * rng.standard_normal((b, m, d))).astype(dtype)
    reps = (0.5 * rng.standard_normal((b, m, r, d))).astype(dtype)
    w: dict[str, np.ndarray] = {
        "att_tensors": rng.normal(0.0, 0.05, (r, d + 1, d, d + 1)).astype(dtype),
        "score_tensors": rng.normal(0.0, 0.2, (r, d + 1, d, d + 1)).astype(dtype),
    }
    for tag in ("att_l", "att_r", "key", "val", "score_l", "score_r"):
        w[f"{tag}_w"], w[f"{tag}_b"] = _head_weights(rng, d, d, dtype)
    return left, right, reps, w


def cross_prefix(left, right, reps, w, clamp: bool):
    u2 = _augment(_relu(left @ w["att_l_w"] + w["att_l_b"]))
    v2 = _augment(_relu(right @ w["att_r_w"] + w["att_r_b"]))
    keys = _relu(reps @ w["key_w"] + w["key_b"])
    q = cached_einsum("rabc,nla,ngrb,nlc->nlgr", w["att_tensors"], u2, keys, v2)
    if clamp:
        q = np.clip(q, -CLAMP, CLAMP)
    q = q - q.max(axis=2, keepdims=True)
    e = np.exp(q)
    beta = e / e.sum(axis=2, keepdims=True)
    vals = _relu(reps @ w["val_w"] + w["val_b"])
    su2 = _augment(_relu(left @ w["score_l_w"] + w["score_l_b"]))
    sv2 = _augment(_relu(right @ w["score_r_w"] + w["score_r_b"]))
    return beta, vals, su2, sv2


def cross_stage_naive(beta, vals, su2, sv2, tensors) -> np.ndarray:
    b, m = beta.shape[0], beta.shape[1]
    r = tensors.shape[0]
    out = np.empty((b, m, r), beta.dtype)
    for bi in range(b):
        for l in range(m):
            hc = cached_einsum("gr,grd->rd", beta[bi, l], vals[bi])
            out[bi, l] = cached_einsum("rabc,a,rb,c->r", tensors, su2[bi, l], hc, sv2[bi, l])
    return out


def cross_stage_decomposed(beta, vals, su2, sv2, tensors) -> np.ndarray:
    per_candidate = cached_einsum("rabc,nla,ngrb,nlc->nlgr", tensors, su2, vals, sv2)
    return cached_einsum("nlgr,nlgr->nlr", beta, per_candidate)


# ---------------------------------------------------------------------------
# harness
# ---------------------------------------------------------------------------

@dataclass
class MethodStats:
    times: list[float]  # per-iteration seconds, warm-up discarded
    flops: int

    @property
    def median(self) -> float:
        return float(np.median(self.times))

    @property
    def t_min(self) -> float:
        return float(np.min(self.times))

    @property
    def t_max(self) -> float:
        return float(np.max(self.times))

    def to_dict(self) -> dict:
        return {
            "times_s": [round(t, 6) for t in self.times],
            "median_s": self.median,
            "min_s": self.t_min,
            "max_s": self.t_max,
            "flops": self.flops,
        }


@dataclass
class BenchReport:
    stage: str  # "token" or "cross"
    config: dict
    naive: MethodStats
    decomposed: MethodStats
    prefix_flops: int
    max_rel_diff: float
    speedup: float  # naive median / decomposed median
    logical_cpus: int = field(default_factory=lambda: os.cpu_count() or 1)
    threads: str = field(default_factory=lambda: os.environ.get("TRISPAN_THREADS", "unset"))

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "config": self.config,
            "naive": self.naive.to_dict(),
            "decomposed": self.decomposed.to_dict(),
            "prefix_flops": self.prefix_flops,
            "max_rel_diff": self.max_rel_diff,
            "speedup": self.speedup,
            "logical_cpus": self.logical_cpus,
            "threads": self.threads,
            "reference_ms_large_scale": REFERENCE_MS[self.stage],
        }

    def format_text(self) -> str:
        ref = REFERENCE_MS[self.stage]
        base = self.naive.median
        rows = [
            f"stage: {self.stage} scoring  {self.config}",
            f"exactness gate (64-bit): max relative difference {self.max_rel_diff:.3e}",
            f"{'method':<12}{'median':>10}{'min':>10}{'max':>10}{'mult-adds':>14}{'time %':>9}",
        ]
        for name, st in (("naive", self.naive), ("decomposed", self.decomposed)):
            pct = 100.0 * st.median / base if base > 0 else float("nan")
            rows.append(
                f"{name:<12}{st.median:>9.4f}s{st.t_min:>9.4f}s{st.t_max:>9.4f}s"
                f"{st.flops + self.prefix_flops:>14,d}{pct:>8.1f}%"
            )
        rows.append(f"speedup (naive/decomposed): {self.speedup:.2f}x")
        rows.append(
            f"large-scale reference (10 iterations, GPU+CPU): "
            f"naive {ref['naive']}ms vs decomposed {ref['decomposed']}ms"
        )
        rows.append(f"logical cpus: {self.logical_cpus}, thread limit: {self.threads}")
        return "\n".join(rows)


def _relative_gap(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b) / (1.0 + np.abs(a)))) if a.size else 0.0


def _timed(fn, iterations: int) -> list[float]:
    fn()  # warm-up, discarded
    out = []
    for _ in range(iterations):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return out


def bench_scoring(cfg: BenchConfig) -> BenchReport:
    """Compare the two scoring orders over every span of random sentences."""
    cfg.validate()
    b, n, r, d = cfg.batch, cfg.seq_len, cfg.labels, cfg.d
    spans0 = [(i0, j0) for i0 in range(n) for j0 in range(i0, n)]
    flat = np.asarray([i0 * n + j0 for i0, j0 in spans0], dtype=np.int64)

    h64, w64 = token_inputs(cfg, np.float64)
    pre = token_prefix(h64, w64, clamp=False)
    out_naive = token_stage_naive(*pre, w64["score_tensors"], spans0)
    out_dec = token_stage_decomposed(*pre, w64["score_tensors"], flat)
    gap = _relative_gap(out_naive, out_dec)
    if gap > cfg.gate_tolerance:
        raise NumericError(
            f"scoring orders disagree: relative gap {gap:.3e} > {cfg.gate_tolerance:.1e}"
        )

    h, w = token_inputs(cfg, cfg.dtype)
    clamp = cfg.precision == 32

    def run_naive():
        return token_stage_naive(*token_prefix(h, w, clamp), w["score_tensors"], spans0)

    def run_decomposed():
        return token_stage_decomposed(*token_prefix(h, w, clamp), w["score_tensors"], flat)

    naive = MethodStats(_timed(run_naive, cfg.iterations), flops_token_naive(b, n, r, d))
    dec = MethodStats(_timed(run_decomposed, cfg.iterations), flops_token_decomposed(b, n, r, d))
    return BenchReport(
        stage="token",
        config={"B": b, "N": n, "d": d, "R": r, "precision": cfg.precision, "iterations": cfg.iterations},
        naive=naive,
        decomposed=dec,
        prefix_flops=flops_token_prefix(b, n, r, d),
        max_rel_diff=gap,
        speedup=naive.median / dec.median if dec.median > 0 else float("inf"),
    )


def bench_cross_scoring(cfg: BenchConfig) -> BenchReport:
    """Compare the two scoring orders over retained candidate sets."""
    cfg.validate()
    b, m, r, d = cfg.batch, cfg.m, cfg.labels, cfg.d

    ins64 = cross_inputs(cfg, np.float64)
    pre = cross_prefix(*ins64[:3], ins64[3], clamp=False)
    out_naive = cross_stage_naive(*pre, ins64[3]["score_tensors"])
    out_dec = cross_stage_decomposed(*pre, ins64[3]["score_tensors"])
    gap = _relative_gap(out_naive, out_dec)
    if gap > cfg.gate_tolerance:
        raise NumericError(
            f"cross scoring orders disagree: relative gap {gap:.3e} > {cfg.gate_tolerance:.1e}"
        )

    left, right, reps, w = cross_inputs(cfg, cfg.dtype)
    clamp = cfg.precision == 32

    def run_naive():
        return cross_stage_naive(*cross_prefix(left, right, reps, w, clamp), w["score_tensors"])

    def run_decomposed():
        return cross_stage_decomposed(*cross_prefix(left, right, reps, w, clamp), w["score_tensors"])

    naive = MethodStats(_timed(run_naive, cfg.iterations), flops_cross_naive(b, m, r, d))
    dec = MethodStats(_timed(run_decomposed, cfg.iterations), flops_cross_decomposed(b, m, r, d))
    return BenchReport(
        stage="cross",
        config={"B": b, "m": m, "d": d, "R": r, "precision": cfg.precision, "iterations": cfg.iterations},
        naive=naive,
        decomposed=dec,
        prefix_flops=flops_cross_prefix(b, m, r, d),
        max_rel_diff=gap,
        speedup=naive.median / dec.median if dec.median > 0 else float("inf"),
    )
