"""First-order dataflow folding model: each convolution is a matrix engine
whose parallelism is set by PE (output-channel lanes) and SIMD (input
elements per lane). A layer with folded matrix width MW = k*k*in_ch and
height MH = out_ch needs (MW/SIMD) * (MH/PE) cycles per output pixel;
pools cost one cycle per output pixel. Steady-state pipeline throughput is
the clock divided by the slowest layer. Memory stalls and FIFO effects are
out of scope.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import CONV_PLAN, plan_shapes

__all__ = [
    "LayerWork",
    "FoldingSpec",
    "conv_works",
    "pool_pixels",
    "layer_cycles",
    "all_cycles",
    "estimate_throughput",
    "balance_folding",
    "full_unfold",
    "parse_folding_spec",
    "format_report",
    "DEFAULT_CLOCK_HZ",
]

DEFAULT_CLOCK_HZ = 100e6


@dataclass(frozen=True)
class LayerWork:
    mw: int
    mh: int
    ofm_pixels: int

    def __post_init__(self) -> None:
        if self.mw < 1 or self.mh < 1 or self.ofm_pixels < 1:
            raise ValueError(f"non-positive work {self}")


@dataclass(frozen=True)
class FoldingSpec:
    """(pe, simd) per convolution, in graph order."""

    folds: tuple

    def __post_init__(self) -> None:
        works = conv_works()
        if len(self.folds) != len(works):
            raise ValueError(f"{len(self.folds)} folds for {len(works)} conv layers")
        for (name, work), (pe, simd) in zip(works, self.folds):
            _check_fold(work, pe, simd, name)


def _check_fold(work: LayerWork, pe: int, simd: int, name: str = "layer") -> None:
    if pe < 1 or simd < 1:
        raise ValueError(f"{name}: pe/simd must be >= 1")
    if work.mh % pe:
        raise ValueError(f"{name}: pe {pe} does not divide MH {work.mh}")
    if work.mw % simd:
        raise ValueError(f"{name}: simd {simd} does not divide MW {work.mw}")


def conv_works() -> list:
    """(name, LayerWork) for the 10 convolutions, graph order."""
    out = []
    conv_i = 0
    for name, in_shape, out_shape in plan_shapes():
        if not name.startswith("conv"):
            continue
        _cin, cout, k = CONV_PLAN[conv_i]
        conv_i += 1
        out.append(
            (
                name,
                LayerWork(
                    mw=k * k * in_shape[2],
                    mh=cout,
                    ofm_pixels=out_shape[0] * out_shape[1],
                ),
            )
        )
    return out


def pool_pixels() -> list:
    """(name, output pixels) for the 6 pools, graph order."""
    return [
        (name, out_shape[0] * out_shape[1])
        for name, _in, out_shape in plan_shapes()
        if name.startswith("pool")
    ]


def layer_cycles(work: LayerWork, pe: int, simd: int) -> int:
    """cycles = (MW/SIMD) * (MH/PE) * output pixels."""
    _check_fold(work, pe, simd)
    return (work.mw // simd) * (work.mh // pe) * work.ofm_pixels


def all_cycles(spec: FoldingSpec) -> list:
    """(name, cycles) for all 16 layers in graph order."""
    conv = {
        name: layer_cycles(work, pe, simd)
        for (name, work), (pe, simd) in zip(conv_works(), spec.folds)
    }
    pools = dict(pool_pixels())
    rows = []
    for name, _in, _out in plan_shapes():
        rows.append((name, conv[name] if name in conv else pools[name]))
    return rows

def estimate_throughput(spec: FoldingSpec, clock_hz: float = DEFAULT_CLOCK_HZ):
    """(frames per second, bottleneck layer name); earliest layer wins ties."""
    if clock_hz <= 0:
        raise ValueError("clock must be positive")
    rows = all_cycles(spec)
    worst = max(c for _n, c in rows)
    bottleneck = next(n for n, c in rows if c == worst)
    return clock_hz / worst, bottleneck


def full_unfold() -> FoldingSpec:
    return FoldingSpec(folds=tuple((w.mh, w.mw) for _n, w in conv_works()))


def _divisors(n: int) -> list:
    return [d for d in range(1, n + 1) if n % d == 0]


def _ladder(work: LayerWork) -> list:
    """All (product, pe, simd) choices sorted by rising parallelism."""
    pairs = [
        (pe * simd, pe, simd)
        for pe in _divisors(work.mh)
        for simd in _divisors(work.mw)
    ]
    pairs.sort()
    return pairs


def balance_folding(budget: int) -> FoldingSpec:
    """Spend a total pe*simd budget greedily on the current bottleneck.

    Each step moves one layer to its cheapest strictly-more-parallel
    divisor pair; the slowest layer gets first claim, and when it cannot
    afford a step (or is fully unfolded) the next-slowest is considered.
    Cycles depend on pe and simd only through their product, so the result
    is locally optimal: no single in-budget reassignment of one layer can
    lower the bottleneck's cycle count.
    """
    works = conv_works()
    if budget < len(works):
        raise ValueError(
            f"budget {budget} below minimum {len(works)} (one pe*simd unit per layer)"
        )
    ladders = [_ladder(w) for _n, w in works]
    pos = [0] * len(works)  # ladders start at (1, 1, 1)
    total = len(works)
    while True:
        order = sorted(
            range(len(works)),
            key=lambda i: (
                -layer_cycles(works[i][1], ladders[i][pos[i]][1], ladders[i][pos[i]][2]),
                i,
            ),
        )
        granted = False
        for i in order:
            cur = ladders[i][pos[i]][0]
            for j in range(pos[i] + 1, len(ladders[i])):
                new = ladders[i][j][0]
                if new == cur:
                    continue
                if total - cur + new <= budget:
                    pos[i] = j
                    total += new - cur
                    granted = True
                break
            if granted:
                break
        if not granted:
            return FoldingSpec(
                folds=tuple((ladders[i][pos[i]][1], ladders[i][pos[i]][2])
                            for i in range(len(works)))
            )


def parse_folding_spec(path) -> FoldingSpec:
    """One line per conv layer: "layer_index pe simd" (1-based index).

    Blank lines and lines starting with '#' are ignored; every conv layer
    must appear exactly once.
    """
    works = conv_works()
    seen = {}
    with open(path, "r", encoding="utf-8") as f:
        for ln, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            toks = line.split()
            if len(toks) != 3:
                raise ValueError(f"line {ln}: expected 'layer_index pe simd'")
            try:
                idx, pe, simd = (int(t) for t in toks)
            except ValueError:
                raise ValueError(f"line {ln}: non-integer field") from None
            if not 1 <= idx <= len(works):
                raise ValueError(f"line {ln}: layer index {idx} outside 1..{len(works)}")
            if idx in seen:
                raise ValueError(f"line {ln}: duplicate layer {idx}")
            seen[idx] = (pe, simd)
    missing = [i for i in range(1, len(works) + 1) if i not in seen]
    if missing:
        raise ValueError(f"missing folding for layers {missing}")
    return FoldingSpec(folds=tuple(seen[i] for i in range(1, len(works) + 1)))


def format_report(spec: FoldingSpec, clock_hz: float = DEFAULT_CLOCK_HZ) -> str:
    """Aligned per-conv cycle table plus bottleneck and fps lines."""
    fps, bottleneck = estimate_throughput(spec, clock_hz)
    cycles = dict(all_cycles(spec))
    header = f"{'layer':<8}{'MW':>6}{'MH':>6}{'PE':>6}{'SIMD':>6}{'cycles':>12}{'ms':>10}"
    lines = [header]
    for (name, work), (pe, simd) in zip(conv_works(), spec.folds):
        c = cycles[name]
        ms = c / clock_hz * 1e3
        lines.append(
            f"{name:<8}{work.mw:>6}{work.mh:>6}{pe:>6}{simd:>6}{c:>12}{ms:>10.3f}"
        )
    lines.append(f"bottleneck: {bottleneck} ({cycles[bottleneck]} cycles)")
    lines.append(f"estimated fps at {clock_hz / 1e6:.1f} MHz: {fps:.1f}")
    return "\n".join(lines)
