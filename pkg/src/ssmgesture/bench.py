"""Wall-time and peak-memory scaling of the scan forms and of full stacks.

Timing takes the best of several untraced runs; peak allocation comes from
one separate run under ``tracemalloc`` (numpy reports its buffers to it).
"""

from __future__ import annotations

import csv
import gc
import time
import tracemalloc
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .adaln import AdaLNStack, AdaLNStackConfig, AttentionStack, AttentionStackConfig
from .autograd import Tensor, no_tape
from .mamba2 import Mamba2BlockConfig
from .nn import meta_init
from .ssd import scan_heads

KERNEL_LENGTHS = (512, 1024, 2048, 4096, 8192, 16384)
STACK_LENGTHS = (400, 800, 1200, 1600, 2000)
COLUMNS = ("form", "T", "d_model", "wall_ns", "peak_bytes")


@dataclass
class BenchRow:
    form: str
    T: int
    d_model: int
    wall_ns: int
    peak_bytes: int


def measure(fn: Callable[[], object], repeats: int = 3) -> tuple[int, int]:
    """Best wall time (ns) over ``repeats`` runs and peak traced bytes of one run."""
    best = None
    for _ in range(max(1, repeats)):
        gc.collect()
        t0 = time.perf_counter_ns()
        fn()
        dt = time.perf_counter_ns() - t0
        best = dt if best is None else min(best, dt)
    gc.collect()
    tracemalloc.start()
    try:
        fn()
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return best, peak


def kernel_bench(lengths=KERNEL_LENGTHS, forms=("linear", "quadratic"), d_state: int = 16,
                 d_head: int = 64, n_heads: int = 1, repeats: int = 3, seed: int = 0,
                 large_repeats: int = 1, large_T: int = 8192) -> list[BenchRow]:
    """Single-layer scan over one head group; ``d_model`` column holds ``n_heads * d_head``."""
    rng = np.random.default_rng(seed)
    rows = []
    for T in lengths:
        a = rng.uniform(0.9, 1.0, (T, n_heads))
        B = rng.standard_normal((T, d_state))
        C = rng.standard_normal((T, d_state))
        V = rng.standard_normal((T, n_heads, d_head))
        reps = repeats if T < large_T else large_repeats
        for form in forms:
            wall, peak = measure(lambda: scan_heads(a, B, C, V, form), reps)
            rows.append(BenchRow(form, T, n_heads * d_head, wall, peak))
    return rows


def loglog_slope(rows: list[BenchRow], form: str) -> float:
    sel = [r for r in rows if r.form == form]
    x = np.log([r.T for r in sel])
    y = np.log([r.wall_ns for r in sel])
    return float(np.polyfit(x, y, 1)[0])


@dataclass
class StackSetup:
    d_model: int = 256
    M: int = 6
    d_state: int = 64
    expand: int = 2
    conv_width: int = 4
    n_heads: int | None = None
    attn_heads: int | None = None

    def mamba(self) -> AdaLNStackConfig:
        blk = Mamba2BlockConfig(self.d_model, self.expand, self.d_state, self.conv_width,
                                self.n_heads)
        return AdaLNStackConfig(self.M, self.d_model, block=blk)

    def attention(self) -> AttentionStackConfig:
        heads = self.attn_heads or max(1, self.d_model // 64)
        return AttentionStackConfig(2 * self.M, self.d_model, n_heads=heads)


def param_counts(setup: StackSetup) -> dict[str, int]:
    """Parameter counts without allocating weights."""
    rng = np.random.default_rng(0)
    with meta_init():
        mamba = AdaLNStack(setup.mamba(), rng).num_parameters()
        attn = AttentionStack(setup.attention(), rng).num_parameters()
    return {f"adaln_mamba2_M{setup.M}": mamba, f"adaln_attention_M{2 * setup.M}": attn}


def stack_bench(setup: StackSetup, lengths=STACK_LENGTHS, repeats: int = 1,
                seed: int = 0, forms=("mamba2-linear", "mamba2-quadratic", "attention")
                ) -> list[BenchRow]:
    """Forward pass of the conditioned stacks (no tape) at each length."""
    rng = np.random.default_rng(seed)
    mamba = AdaLNStack(setup.mamba(), rng)
    attn = AttentionStack(setup.attention(), rng) if "attention" in forms else None
    rows = []
    for T in lengths:
        x = Tensor(rng.standard_normal((T, setup.d_model)))
        c = Tensor(rng.standard_normal((T, setup.d_model)))
        for form in forms:
            if form == "attention":
                fn = lambda: attn(x, c)  # noqa: E731
            else:
                mamba.set_form(form.split("-")[1])
                fn = lambda: mamba(x, c)  # noqa: E731
            with no_tape():
                wall, peak = measure(fn, repeats)
            rows.append(BenchRow(form, T, setup.d_model, wall, peak))
    mamba.set_form("linear")
    return rows


def write_csv(rows: list[BenchRow], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))


def read_csv(path: str | Path) -> list[BenchRow]:
    with open(path, newline="") as f:
        return [BenchRow(r["form"], int(r["T"]), int(r["d_model"]), int(r["wall_ns"]),
                         int(r["peak_bytes"])) for r in csv.DictReader(f)]
