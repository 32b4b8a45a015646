"""Seam-coherence evaluation: crop pairs, seam TV, SSIM, and the COH score.

All computations are pure. TV is the anisotropic (L1) discrete total
variation, averaged over a pixel band straddling a seam; SSIM is the standard
single-scale index (11x11 Gaussian window, sigma 1.5, C1=(0.01*255)^2,
C2=(0.03*255)^2). COH folds coherence metrics into one lower-is-better score:
SSIM is flipped to 1-SSIM, every metric is min-max normalized across the
compared methods, and the normalized values are averaged with equal weights.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, replace
from fractions import Fraction
from statistics import mean, pstdev

import numpy as np
from skimage.metrics import structural_similarity

from .codebook import Codebook, decode_tokens
from .errors import MetricError, PlanError, ShapeError
from .generators import PromptEmbedding, SamplingParams
from .scheduler import (
    ExpansionPlan,
    baseline_independent,
    generate_panorama,
    iterations_for_extent,
    step_from_stride,
)

SSIM_WINDOW = 11
DEFAULT_SEAM_HALF_WIDTH = 8

CSV_COLUMNS = ("method", "u", "w_prime", "seed", "tv_mean", "ssim_mean", "coh", "wall_ms")


@dataclass(frozen=True)
class CropPair:
    """Two adjacent, non-overlapping square crops and their shared boundary."""

    left: np.ndarray
    right: np.ndarray
    seam_x: int  # panorama x coordinate of the boundary between the crops


@dataclass(frozen=True)
class MetricReport:
    seam_tv: tuple[float, ...]
    pair_ssim: tuple[float, ...]
    tv_mean: float
    tv_std: float
    ssim_mean: float
    ssim_std: float
    coh: float | None = None
    wall_ms: float | None = None


def extract_adjacent_crops(panorama: np.ndarray, crop_side: int) -> list[CropPair]:
    """Tile square crops from the left edge; consecutive tiles form pairs.

    A trailing margin narrower than crop_side is discarded. Crops are taken
    from the top crop_side rows.
    """
    panorama = np.asarray(panorama)
    if panorama.ndim != 3 or panorama.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) image, got shape {panorama.shape}")
    h, w = panorama.shape[:2]
    if crop_side < 1:
        raise ShapeError(f"crop side must be >= 1, got {crop_side}")
    if h < crop_side or w < 2 * crop_side:
        raise ShapeError(
            f"panorama {h}x{w} too small for two {crop_side}x{crop_side} crops"
        )
    count = w // crop_side
    crops = [
        panorama[:crop_side, i * crop_side : (i + 1) * crop_side] for i in range(count)
    ]
    return [
        CropPair(crops[i], crops[i + 1], (i + 1) * crop_side) for i in range(count - 1)
    ]


def tv_seam(
    panorama: np.ndarray, seam_x: int, half_width: int = DEFAULT_SEAM_HALF_WIDTH
) -> float:
    """Mean anisotropic TV over the band [seam_x - w, seam_x + w).

    Per pixel: |forward horizontal difference| + |forward vertical difference|,
    averaged over channels, with samples scaled to [0, 1]. Differences at the
    last row/column are zero.
    """
    panorama = np.asarray(panorama)
    if panorama.ndim != 3 or panorama.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) image, got shape {panorama.shape}")
    if half_width < 1:
        raise ShapeError(f"seam half-width must be >= 1, got {half_width}")
    w = panorama.shape[1]
    lo, hi = seam_x - half_width, seam_x + half_width
    if lo < 0 or hi > w:
        raise ShapeError(f"seam band [{lo}, {hi}) outside image of width {w}")
    arr = panorama.astype(np.float64) / 255.0
    dx = np.zeros_like(arr)
    dy = np.zeros_like(arr)
    dx[:, :-1] = arr[:, 1:] - arr[:, :-1]
    dy[:-1, :] = arr[1:] - arr[:-1]
    tv_map = (np.abs(dx) + np.abs(dy)).mean(axis=2)
    return float(tv_map[:, lo:hi].mean())


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Single-scale SSIM between two RGB images, channel-averaged."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 3 or a.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) images, got shape {a.shape}")
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ShapeError(f"images must be at least {SSIM_WINDOW}px on each side")
    return float(
        structural_similarity(
            a,
            b,
            channel_axis=2,
            win_size=SSIM_WINDOW,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            data_range=255,
        )
    )


# metric orientations: True means higher raw values are better and must be
# flipped before normalization
_COH_METRICS = (("lpips", False), ("dists", False), ("tv", False), ("ssim", True))


def coh(method_metrics: dict[str, dict[str, float]]) -> dict[str, float]:
    """Composite coherence score across >= 2 methods/configurations.

    Accepts per-method dicts with keys among {lpips, dists, tv, ssim}; tv and
    ssim are required, the neural slots participate only when every method
    provides them. Lower COH is better.
    """
    methods = list(method_metrics)
    if len(methods) < 2:
        raise MetricError("COH normalization needs at least 2 methods")
    for name, metrics in method_metrics.items():
        if "tv" not in metrics or "ssim" not in metrics:
            raise MetricError(f"method {name!r} must provide tv and ssim")

    used = [
        (key, flip)
        for key, flip in _COH_METRICS
        if all(key in m for m in method_metrics.values())
    ]
    normalized = {name: [] for name in methods}
    for key, flip in used:
        values = {
            name: (1.0 - m[key]) if flip else float(m[key])
            for name, m in method_metrics.items()
        }
        lo, hi = min(values.values()), max(values.values())
        if hi == lo:
            warnings.warn(
                f"metric {key!r} identical across methods; normalized to 0",
                stacklevel=2,
            )
            for name in methods:
                normalized[name].append(0.0)
        else:
            for name in methods:
                normalized[name].append((values[name] - lo) / (hi - lo))
    return {name: float(np.mean(vals)) for name, vals in normalized.items()}


def evaluate_panorama(
    panorama: np.ndarray,
    crop_side: int | None = None,
    seam_half_width: int = DEFAULT_SEAM_HALF_WIDTH,
) -> MetricReport:
    """Per-seam TV and per-pair SSIM over the adjacent-crop tiling."""
    panorama = np.asarray(panorama)
    side = crop_side if crop_side else panorama.shape[0]
    pairs = extract_adjacent_crops(panorama, side)
    tvs = tuple(tv_seam(panorama, p.seam_x, seam_half_width) for p in pairs)
    ssims = tuple(ssim(p.left, p.right) for p in pairs)
    return MetricReport(
        seam_tv=tvs,
        pair_ssim=ssims,
        tv_mean=mean(tvs),
        tv_std=pstdev(tvs) if len(tvs) > 1 else 0.0,
        ssim_mean=mean(ssims),
        ssim_std=pstdev(ssims) if len(ssims) > 1 else 0.0,
    )


def _fmt(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, float):
        return format(value, ".9g")
    return str(value)


def write_metric_csv(path, rows: list[dict]) -> None:
    """Fixed-column CSV: method,u,w_prime,seed,tv_mean,ssim_mean,coh,wall_ms."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row.get(col)) for col in CSV_COLUMNS])


def _run_arm(method: str, plan, prompt, gen, params, codebook, crop_side, half_width):
    runner = generate_panorama if method == "next_crop" else baseline_independent
    grid, trace = runner(plan, prompt, gen, params)
    image = decode_tokens(grid, codebook)
    report = evaluate_panorama(image, crop_side, half_width)
    return replace(report, wall_ms=trace.total_millis())


def _aggregate(rows_for_group: list[dict]) -> dict:
    agg = dict(rows_for_group[0])
    agg["seed"] = "mean"
    agg["tv_mean"] = mean(r["tv_mean"] for r in rows_for_group)
    agg["ssim_mean"] = mean(r["ssim_mean"] for r in rows_for_group)
    agg["wall_ms"] = mean(r["wall_ms"] for r in rows_for_group)
    return agg


def _attach_coh(aggregates: list[dict]) -> None:
    if len(aggregates) < 2:
        return
    scores = coh(
        {
            f"{a['method']}|u={a['u']}|w={a['w_prime']}": {
                "tv": a["tv_mean"],
                "ssim": a["ssim_mean"],
            }
            for a in aggregates
        }
    )
    for a in aggregates:
        a["coh"] = scores[f"{a['method']}|u={a['u']}|w={a['w_prime']}"]


def ablate_stride(
    strides,
    seeds: int,
    *,
    side: int,
    width_px: int,
    codebook: Codebook,
    gen,
    prompt: PromptEmbedding,
    params: SamplingParams,
    crop_side: int | None = None,
    seam_half_width: int = DEFAULT_SEAM_HALF_WIDTH,
    include_baseline: bool = False,
) -> list[dict]:
    """Quality/efficiency protocol across expansion strides at a fixed width.

    Emits one row per (stride, seed) and one aggregate row per stride (per
    method arm); aggregate rows carry the COH score normalized across the
    whole compared set.
    """
    q = codebook.patch_size
    if width_px % q:
        raise PlanError(f"width {width_px}px is not divisible by patch size {q}")
    width_tokens = width_px // q
    crop = crop_side if crop_side else side * q
    methods = ["next_crop"] + (["independent"] if include_baseline else [])

    data_rows: list[dict] = []
    aggregates: list[dict] = []
    for stride in strides:
        u = Fraction(stride)
        c = step_from_stride(side, u)
        n = iterations_for_extent(side, c, width_tokens)
        plan = ExpansionPlan("horizontal", side, n, cols_per_iter=c)
        for method in methods:
            group = []
            for seed in range(seeds):
                report = _run_arm(
                    method, plan, prompt, gen,
                    replace(params, seed=seed), codebook, crop, seam_half_width,
                )
                group.append(
                    {
                        "method": method,
                        "u": str(u),
                        "w_prime": width_px,
                        "seed": seed,
                        "tv_mean": report.tv_mean,
                        "ssim_mean": report.ssim_mean,
                        "coh": "",
                        "wall_ms": report.wall_ms,
                    }
                )
            data_rows.extend(group)
            aggregates.append(_aggregate(group))
    _attach_coh(aggregates)
    return data_rows + aggregates


def ablate_size(
    widths_px,
    seeds: int,
    *,
    side: int,
    stride,
    codebook: Codebook,
    gen,
    prompt: PromptEmbedding,
    params: SamplingParams,
    crop_side: int | None = None,
    seam_half_width: int = DEFAULT_SEAM_HALF_WIDTH,
    include_baseline: bool = False,
) -> list[dict]:
    """Same record structure as ablate_stride, keyed by panorama width."""
    q = codebook.patch_size
    u = Fraction(stride)
    c = step_from_stride(side, u)
    crop = crop_side if crop_side else side * q
    methods = ["next_crop"] + (["independent"] if include_baseline else [])

    data_rows: list[dict] = []
    aggregates: list[dict] = []
    for width_px in widths_px:
        if width_px % q:
            raise PlanError(f"width {width_px}px is not divisible by patch size {q}")
        width_tokens = width_px // q
        if width_tokens < side or (width_tokens - side) % c:
            k = max(0, (width_tokens - side) // c)
            lo = (side + k * c) * q
            hi = (side + (k + 1) * c) * q
            raise PlanError(
                f"width {width_px}px unreachable with side {side}, step {c}, patch {q}; "
                f"nearest reachable widths: {lo}px and {hi}px"
            )
        n = 1 + (width_tokens - side) // c
        plan = ExpansionPlan("horizontal", side, n, cols_per_iter=c)
        for method in methods:
            group = []
            for seed in range(seeds):
                report = _run_arm(
                    method, plan, prompt, gen,
                    replace(params, seed=seed), codebook, crop, seam_half_width,
                )
                group.append(
                    {
                        "method": method,
                        "u": str(u),
                        "w_prime": width_px,
                        "seed": seed,
                        "tv_mean": report.tv_mean,
                        "ssim_mean": report.ssim_mean,
                        "coh": "",
                        "wall_ms": report.wall_ms,
                    }
                )
            data_rows.extend(group)
            aggregates.append(_aggregate(group))
    _attach_coh(aggregates)
    return data_rows + aggregates
