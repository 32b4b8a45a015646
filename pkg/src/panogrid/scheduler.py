"""Next-crop prediction: growing a panorama past a fixed token budget.

A generator that can only emit p = s*s tokens at a time is redirected instead
of stopped: after the first s x s block, each vertical iteration re-feeds the
last (s - r) rows of the accumulated panorama as the conditioning window and
emits r new rows; each horizontal iteration extends every row independently by
c tokens conditioned on that row's last (s - c) tokens. Conditioning windows
are copies of committed tokens - the panorama only ever grows by appending.

Stream keys: the first block samples on stream (seed, 0, 0); expansion
iteration i (1-based, the first block being iteration 1) samples on block
index i - 1, with the row index carrying the global panorama row for
horizontal steps. Distinct keys give independent, order-insensitive streams,
so horizontal rows may be generated concurrently with identical results.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from math import isqrt

from .codebook import Codebook, blend_boundary, encode_image
from .errors import CapacityError, LayoutError, PlanError, ShapeError
from .generators import ConditioningContext, PromptEmbedding, SamplingParams, encode_prompt
from .grid import TokenGrid, hconcat, row_tail, tail_tokens, vconcat

MODES = ("vertical", "horizontal", "both")


@dataclass(frozen=True)
class ExpansionPlan:
    """Shape of one panorama run.

    side is the block side s (token budget p = s*s). n counts iterations in
    the primary direction, the first block included; mode "both" runs the
    vertical pass first (n iterations), then extends every s-row band
    horizontally (n_horizontal iterations each).
    """

    mode: str
    side: int
    n: int
    rows_per_iter: int | None = None  # r, new rows per vertical iteration
    cols_per_iter: int | None = None  # c, new columns per horizontal iteration
    n_horizontal: int | None = None  # only for mode "both"; defaults to n

    def __post_init__(self):
        if self.mode not in MODES:
            raise PlanError(f"unknown mode {self.mode!r}")
        if self.side < 2:
            raise PlanError(f"block side must be >= 2, got {self.side}")
        if self.n < 1:
            raise PlanError(f"iteration count must be >= 1, got {self.n}")
        s = self.side
        if self.mode in ("vertical", "both"):
            r = self.rows_per_iter
            if r is None or not 1 <= r < s:
                raise PlanError(f"rows per iteration must be in [1, {s - 1}], got {r}")
        if self.mode in ("horizontal", "both"):
            c = self.cols_per_iter
            # c == s is the legal degenerate stride u = 1 (empty windows)
            if c is None or not 1 <= c <= s:
                raise PlanError(f"cols per iteration must be in [1, {s}], got {c}")
        if self.mode == "both":
            height = s + (self.n - 1) * self.rows_per_iter
            if height % s:
                raise PlanError(
                    f"both-direction plans need a band-aligned height; "
                    f"{height} rows is not a multiple of {s}"
                )
            if self.n_horizontal is not None and self.n_horizontal < 1:
                raise PlanError("horizontal iteration count must be >= 1")
        elif self.n_horizontal is not None:
            raise PlanError("n_horizontal only applies to mode 'both'")

    @property
    def token_budget(self) -> int:
        return self.side * self.side

    @property
    def horizontal_n(self) -> int:
        return self.n_horizontal if self.n_horizontal is not None else self.n

    @property
    def stride(self) -> Fraction:
        """Expansion stride u: fraction of the block side newly generated."""
        if self.mode == "vertical":
            return Fraction(self.rows_per_iter, self.side)
        return Fraction(self.cols_per_iter, self.side)

    def out_rows(self) -> int:
        if self.mode == "horizontal":
            return self.side
        return self.side + (self.n - 1) * self.rows_per_iter

    def out_cols(self) -> int:
        if self.mode == "vertical":
            return self.side
        n_h = self.horizontal_n
        return self.side + (n_h - 1) * self.cols_per_iter


def step_from_stride(side: int, stride: Fraction) -> int:
    """New rows/cols per iteration for a stride u; u * side must be integral."""
    step = stride * side
    if step.denominator != 1:
        raise PlanError(f"stride {stride} times side {side} is not an integer")
    return int(step)


def iterations_for_extent(side: int, step: int, target: int) -> int:
    """n such that side + (n - 1) * step == target, or a PlanError naming the
    nearest reachable extents."""
    if target < side or (target - side) % step:
        k = max(0, (target - side) // step)
        lo, hi = side + k * step, side + (k + 1) * step
        raise PlanError(
            f"extent {target} tokens unreachable with side {side} and step {step}; "
            f"nearest reachable: {lo} and {hi}"
        )
    return 1 + (target - side) // step


@dataclass(frozen=True)
class LayoutSegment:
    """A run of iterations driven by one prompt.

    blend, when set, is the transition factor applied along the seam where
    this segment begins (ignored on the first segment).
    """

    start: int
    end: int
    prompt: str
    blend: float | None = None

    def __post_init__(self):
        if self.start < 1 or self.end < self.start:
            raise LayoutError(f"bad segment range [{self.start}, {self.end}]")
        if self.blend is not None and not 0.0 <= self.blend <= 1.0:
            raise LayoutError(f"blend factor must be in [0, 1], got {self.blend}")


@dataclass(frozen=True)
class LayoutSpec:
    segments: tuple[LayoutSegment, ...]

    def validate(self, n: int) -> None:
        if not self.segments:
            raise LayoutError("layout has no segments")
        expected = 1
        for seg in self.segments:
            if seg.start != expected:
                raise LayoutError(
                    f"segments must be contiguous: expected start {expected}, got {seg.start}"
                )
            expected = seg.end + 1
        if expected != n + 1:
            raise LayoutError(f"layout covers 1..{expected - 1} but the plan has {n} iterations")

    def segment_for(self, iteration: int) -> LayoutSegment:
        for seg in self.segments:
            if seg.start <= iteration <= seg.end:
                return seg
        raise LayoutError(f"iteration {iteration} not covered by any segment")


@dataclass(frozen=True)
class TraceStep:
    """Audit record for one iteration.

    windows holds [start, end) flat conditioning indices into the panorama as
    it stood before the iteration (one window per generated row in horizontal
    steps). For band steps of a both-direction run, indices are local to the
    band's own grid and `band` names the band.
    """

    iteration: int
    mode: str  # "first" | "vertical" | "horizontal"
    windows: tuple[tuple[int, int], ...]
    streams: tuple[tuple[int, int, int], ...]
    tokens_emitted: int
    millis: float
    band: int | None = None


@dataclass(frozen=True)
class BlendRecord:
    """One boundary re-quantization: original token, blended token, factor."""

    iteration: int
    flat_index: int
    original: int
    blended: int
    lam: float


@dataclass
class GenerationTrace:
    steps: list[TraceStep] = field(default_factory=list)
    blends: list[BlendRecord] = field(default_factory=list)

    def log_lines(self) -> list[str]:
        lines = []
        for step in self.steps:
            record = {
                "iteration": step.iteration,
                "mode": step.mode,
                "band": step.band,
                "windows": [list(w) for w in step.windows],
                "streams": [list(sk) for sk in step.streams],
                "tokens": step.tokens_emitted,
                "millis": round(step.millis, 3),
            }
            blends = [
                {
                    "flat_index": b.flat_index,
                    "original": b.original,
                    "blended": b.blended,
                    "lam": b.lam,
                }
                for b in self.blends
                if b.iteration == step.iteration
            ]
            if blends:
                record["blends"] = blends
            lines.append(json.dumps(record, separators=(",", ":")))
        return lines

    def write_log(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line in self.log_lines():
                fh.write(line + "\n")

    def total_millis(self) -> float:
        return sum(step.millis for step in self.steps)


def generate_first_block(
    gen,
    prompt: PromptEmbedding,
    p: int,
    params: SamplingParams,
    *,
    prefix: tuple[int, ...] = (),
    trace: GenerationTrace | None = None,
) -> TokenGrid:
    """The initial s x s block, prompt-conditioned with an empty token prefix
    (or a prefilled one for image guidance)."""
    side = isqrt(p)
    if side * side != p:
        raise PlanError(f"token budget {p} is not a perfect square")
    if gen.capacity is not None and p > gen.capacity:
        raise CapacityError(f"block of {p} tokens exceeds generator capacity {gen.capacity}")
    if len(prefix) > p:
        raise CapacityError(f"prefill of {len(prefix)} tokens exceeds the block budget {p}")
    start = time.perf_counter()
    tokens = prefix
    stream = (params.seed, 0, 0)
    if len(prefix) < p:
        ctx = ConditioningContext(prompt=prompt, prefix_tokens=prefix, stream_id=stream)
        tokens = prefix + gen.generate(ctx, p - len(prefix), params)
    block = TokenGrid(side, side, tokens)
    if trace is not None:
        trace.steps.append(
            TraceStep(
                iteration=1,
                mode="first",
                windows=(),
                streams=(stream,),
                tokens_emitted=p - len(prefix),
                millis=(time.perf_counter() - start) * 1000.0,
            )
        )
    return block


def expand_vertical(
    gen,
    panorama: TokenGrid,
    r: int,
    params: SamplingParams,
    *,
    prompt: PromptEmbedding | None = None,
    iteration: int | None = None,
    conditioned: bool = True,
    trace: GenerationTrace | None = None,
) -> TokenGrid:
    """Append r rows, conditioning on the last (s - r) rows of the panorama.

    The window is exactly p - r*s tokens: the generator's position index is
    effectively redirected to p - r*s before emitting the r*s new tokens.
    """
    s = panorama.cols
    if not 1 <= r < s:
        raise PlanError(f"rows per iteration must be in [1, {s - 1}], got {r}")
    if iteration is None:
        iteration = (panorama.rows - s) // r + 2
    start_t = time.perf_counter()
    window_len = (s - r) * s
    window = tail_tokens(panorama, window_len) if conditioned else ()
    stream = (params.seed, iteration - 1, 0)
    ctx = ConditioningContext(prompt=prompt, prefix_tokens=window, stream_id=stream)
    tokens = gen.generate(ctx, r * s, params)
    result = vconcat(panorama, TokenGrid(r, s, tokens))
    if trace is not None:
        total = len(panorama.tokens)
        windows = ((total - window_len, total),) if conditioned else ()
        trace.steps.append(
            TraceStep(
                iteration=iteration,
                mode="vertical",
                windows=windows,
                streams=(stream,),
                tokens_emitted=r * s,
                millis=(time.perf_counter() - start_t) * 1000.0,
            )
        )
    return result


def expand_horizontal(
    gen,
    panorama: TokenGrid,
    c: int,
    params: SamplingParams,
    *,
    prompt: PromptEmbedding | None = None,
    iteration: int | None = None,
    conditioned: bool = True,
    parallel: bool = False,
    row_offset: int = 0,
    band: int | None = None,
    trace: GenerationTrace | None = None,
) -> TokenGrid:
    """Extend every row by c tokens, interleaved: row j is conditioned only on
    its own last (s - c) tokens, so rows are independent and may run in any
    order (or concurrently) with identical results."""
    s = panorama.rows
    if not 1 <= c <= s:
        raise PlanError(f"cols per iteration must be in [1, {s}], got {c}")
    if iteration is None:
        iteration = (panorama.cols - s) // c + 2
    start_t = time.perf_counter()
    cols = panorama.cols
    tail_len = s - c

    def emit_row(j: int) -> tuple[int, ...]:
        window = row_tail(panorama, j, tail_len) if conditioned else ()
        stream = (params.seed, iteration - 1, row_offset + j)
        ctx = ConditioningContext(prompt=prompt, prefix_tokens=window, stream_id=stream)
        return gen.generate(ctx, c, params)

    if parallel:
        with ThreadPoolExecutor(max_workers=min(8, s)) as pool:
            new_rows = list(pool.map(emit_row, range(s)))
    else:
        new_rows = [emit_row(j) for j in range(s)]
    result = hconcat(panorama, TokenGrid.from_rows(new_rows))
    if trace is not None:
        windows = (
            tuple((j * cols + cols - tail_len, (j + 1) * cols) for j in range(s))
            if conditioned
            else ()
        )
        streams = tuple((params.seed, iteration - 1, row_offset + j) for j in range(s))
        trace.steps.append(
            TraceStep(
                iteration=iteration,
                mode="horizontal",
                windows=windows,
                streams=streams,
                tokens_emitted=c * s,
                millis=(time.perf_counter() - start_t) * 1000.0,
                band=band,
            )
        )
    return result


def _band(grid: TokenGrid, index: int, side: int) -> TokenGrid:
    start = index * side * grid.cols
    return TokenGrid(side, grid.cols, grid.tokens[start : start + side * grid.cols])


def _blend_row_seam(
    grid: TokenGrid, seam_row: int, lam: float, codebook: Codebook, trace, iteration
) -> TokenGrid:
    """Re-quantize the first new row against the row above it."""
    emb = codebook.embeddings
    tokens = list(grid.tokens)
    for x in range(grid.cols):
        prev_t = grid.token_at(seam_row - 1, x)
        flat = seam_row * grid.cols + x
        cur_t = tokens[flat]
        new_t = blend_boundary(emb[prev_t], emb[cur_t], lam, codebook)
        if trace is not None:
            trace.blends.append(BlendRecord(iteration, flat, cur_t, new_t, lam))
        tokens[flat] = new_t
    return TokenGrid(grid.rows, grid.cols, tuple(tokens))


def _blend_col_seam(
    grid: TokenGrid, seam_col: int, lam: float, codebook: Codebook, trace, iteration
) -> TokenGrid:
    """Re-quantize the first new column against the column left of it."""
    emb = codebook.embeddings
    tokens = list(grid.tokens)
    for j in range(grid.rows):
        prev_t = grid.token_at(j, seam_col - 1)
        flat = j * grid.cols + seam_col
        cur_t = tokens[flat]
        new_t = blend_boundary(emb[prev_t], emb[cur_t], lam, codebook)
        if trace is not None:
            trace.blends.append(BlendRecord(iteration, flat, cur_t, new_t, lam))
        tokens[flat] = new_t
    return TokenGrid(grid.rows, grid.cols, tuple(tokens))


def _iteration_prompts(
    n: int, prompt: PromptEmbedding | None, layout: LayoutSpec | None
) -> list[tuple[PromptEmbedding, float | None]]:
    if layout is None:
        return [(prompt, None)] * n
    layout.validate(n)
    cache: dict[str, PromptEmbedding] = {}
    out = []
    for i in range(1, n + 1):
        seg = layout.segment_for(i)
        if seg.prompt not in cache:
            cache[seg.prompt] = encode_prompt(seg.prompt)
        lam = seg.blend if (i == seg.start and seg.start > 1) else None
        out.append((cache[seg.prompt], lam))
    return out


def _run_plan(
    plan: ExpansionPlan,
    gen,
    params: SamplingParams,
    *,
    prompt: PromptEmbedding | None = None,
    layout: LayoutSpec | None = None,
    conditioned: bool = True,
    first_prefix: tuple[int, ...] = (),
    codebook: Codebook | None = None,
    parallel: bool = False,
) -> tuple[TokenGrid, GenerationTrace]:
    if layout is not None and plan.mode == "both":
        raise LayoutError("layout control applies to single-direction plans")
    prompts = _iteration_prompts(plan.n, prompt, layout)
    trace = GenerationTrace()
    s = plan.side

    pano = generate_first_block(
        gen, prompts[0][0], plan.token_budget, params, prefix=first_prefix, trace=trace
    )

    if plan.mode in ("vertical", "both"):
        for i in range(2, plan.n + 1):
            emb, lam = prompts[i - 1]
            pano = expand_vertical(
                gen,
                pano,
                plan.rows_per_iter,
                params,
                prompt=emb,
                iteration=i,
                conditioned=conditioned,
                trace=trace,
            )
            if lam is not None:
                if codebook is None:
                    raise LayoutError("seam blending requires a codebook")
                pano = _blend_row_seam(pano, pano.rows - plan.rows_per_iter, lam, codebook, trace, i)

    if plan.mode == "horizontal":
        for i in range(2, plan.n + 1):
            emb, lam = prompts[i - 1]
            pre_cols = pano.cols
            pano = expand_horizontal(
                gen,
                pano,
                plan.cols_per_iter,
                params,
                prompt=emb,
                iteration=i,
                conditioned=conditioned,
                parallel=parallel,
                trace=trace,
            )
            if lam is not None:
                if codebook is None:
                    raise LayoutError("seam blending requires a codebook")
                pano = _blend_col_seam(pano, pre_cols, lam, codebook, trace, i)

    if plan.mode == "both":
        bands = pano.rows // s
        counter = plan.n
        emb = prompts[0][0]
        out_bands = []
        for b in range(bands):
            band_grid = _band(pano, b, s)
            for _ in range(2, plan.horizontal_n + 1):
                counter += 1
                band_grid = expand_horizontal(
                    gen,
                    band_grid,
                    plan.cols_per_iter,
                    params,
                    prompt=emb,
                    iteration=counter,
                    conditioned=conditioned,
                    parallel=parallel,
                    row_offset=b * s,
                    band=b,
                    trace=trace,
                )
            out_bands.append(band_grid)
        pano = out_bands[0]
        for band_grid in out_bands[1:]:
            pano = vconcat(pano, band_grid)

    return pano, trace


def generate_panorama(
    plan: ExpansionPlan,
    prompt: PromptEmbedding,
    gen,
    params: SamplingParams,
    *,
    parallel: bool = False,
) -> tuple[TokenGrid, GenerationTrace]:
    """First block then n - 1 redirected expansions in the plan's direction."""
    return _run_plan(plan, gen, params, prompt=prompt, parallel=parallel)


def layout_generate(
    plan: ExpansionPlan,
    layout: LayoutSpec,
    gen,
    params: SamplingParams,
    *,
    codebook: Codebook | None = None,
    parallel: bool = False,
) -> tuple[TokenGrid, GenerationTrace]:
    """Per-iteration prompts from a layout; optional seam blending at segment
    boundaries (recorded in the trace with the pre-blend tokens)."""
    return _run_plan(
        plan, gen, params, layout=layout, codebook=codebook, parallel=parallel
    )


def image_guided_generate(
    plan: ExpansionPlan,
    guide,
    prompt: PromptEmbedding,
    gen,
    codebook: Codebook,
    params: SamplingParams,
    *,
    parallel: bool = False,
) -> tuple[TokenGrid, GenerationTrace]:
    """Prefill the first block with the encoded guide image, then expand.

    The guide must span the full block width so its tokens form a raster
    prefix; prefilled tokens are never regenerated.
    """
    if guide is None:
        return generate_panorama(plan, prompt, gen, params, parallel=parallel)
    encoded = encode_image(guide, codebook)
    s = plan.side
    if encoded.rows > s or encoded.cols > s:
        raise CapacityError(
            f"guide of {encoded.rows}x{encoded.cols} tokens exceeds the {s}x{s} block"
        )
    if encoded.cols != s:
        raise ShapeError(
            f"guide must span the full block width ({s} tokens), got {encoded.cols}"
        )
    return _run_plan(
        plan, gen, params, prompt=prompt, first_prefix=encoded.tokens, parallel=parallel
    )


def baseline_independent(
    plan: ExpansionPlan,
    prompt: PromptEmbedding,
    gen,
    params: SamplingParams,
    *,
    parallel: bool = False,
) -> tuple[TokenGrid, GenerationTrace]:
    """Control arm: same shapes and streams, but every crop is generated from
    prompt conditioning alone (empty token prefix) - no next-crop redirection."""
    return _run_plan(plan, gen, params, prompt=prompt, conditioned=False, parallel=parallel)
