"""Command-line surface: generate / layout / guide / evaluate / ablate /
train-tiny / config.

Exit codes: 0 success, 2 config error, 3 plan error, 4 engine error,
5 I/O error. Every error path prints a single machine-parsable line to stderr:
"E<code> <category>: <message>".
"""

from __future__ import annotations

import argparse
import configparser
import csv
import os
import sys
from pathlib import Path

from .codebook import decode_tokens, read_pcbk, read_png, write_png
from .config import RunConfig
from .errors import (
    CapacityError,
    CodebookError,
    ConfigError,
    GridIndexError,
    InputError,
    LayoutError,
    MetricError,
    PanogridError,
    PlanError,
    ShapeError,
    TrainingError,
)
from .generators import (
    MarkovGenerator,
    TinyCausalModel,
    encode_prompt,
    train_tiny,
    write_pmdl,
)
from .grid import read_ptok, write_ptok
from .metrics import (
    ablate_size,
    ablate_stride,
    evaluate_panorama,
    write_metric_csv,
)
from .scheduler import (
    LayoutSegment,
    LayoutSpec,
    image_guided_generate,
    layout_generate,
    generate_panorama,
)


def _atomic(path: Path, write_fn) -> None:
    """Write through a temp file in the same directory, then rename."""
    tmp = path.with_name(path.name + ".tmp")
    write_fn(tmp)
    os.replace(tmp, path)


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from exc
        cfg = RunConfig.from_ini(text)
    else:
        cfg = RunConfig()
    overrides = {
        "seed": "seed",
        "mode": "mode",
        "stride": "stride",
        "width": "width_px",
        "height": "height_px",
        "prompt": "prompt",
        "layout": "layout_path",
        "guide": "guide_path",
        "generator": "generator",
        "out": "out_dir",
        "n": "n",
        "side": "side",
    }
    for flag, attr in overrides.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, attr, value)
    if getattr(args, "parallel", False):
        cfg.parallel_rows = True
    cfg.validate()
    return cfg


def _write_run_outputs(cfg: RunConfig, grid, trace, codebook) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    image = decode_tokens(grid, codebook)
    _atomic(out / "panorama.ptok", lambda p: write_ptok(grid, codebook.size, p))
    _atomic(out / "panorama.png", lambda p: write_png(image, p))
    _atomic(out / "trace.log", trace.write_log)
    _atomic(out / "run.ini", lambda p: p.write_text(cfg.to_ini(), encoding="utf-8"))
    print(
        f"panorama: {grid.rows}x{grid.cols} tokens, "
        f"{image.shape[0]}x{image.shape[1]} px, "
        f"{trace.total_millis():.1f} ms generation -> {out}"
    )
    return out


def _prepare(cfg: RunConfig):
    codebook = cfg.build_codebook()
    prompt = encode_prompt(cfg.prompt)
    gen = cfg.build_generator(prompt, codebook)
    return codebook, prompt, gen, cfg.build_plan(), cfg.sampling_params()


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    codebook, prompt, gen, plan, params = _prepare(cfg)
    grid, trace = generate_panorama(plan, prompt, gen, params, parallel=cfg.parallel_rows)
    _write_run_outputs(cfg, grid, trace, codebook)
    return 0


def _parse_layout_file(path) -> LayoutSpec:
    parser = configparser.ConfigParser()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read layout {path}: {exc}") from exc
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise LayoutError(f"cannot parse layout {path}: {exc}") from exc
    segments = []
    for section in parser.sections():
        sec = parser[section]
        try:
            segments.append(
                LayoutSegment(
                    start=sec.getint("start"),
                    end=sec.getint("end"),
                    prompt=sec.get("prompt", ""),
                    blend=sec.getfloat("blend") if "blend" in sec else None,
                )
            )
        except (ValueError, TypeError) as exc:
            raise LayoutError(f"bad segment [{section}]: {exc}") from exc
        if not segments[-1].prompt:
            raise LayoutError(f"segment [{section}] has no prompt")
    return LayoutSpec(tuple(segments))


def cmd_layout(args) -> int:
    cfg = _load_config(args)
    if not cfg.layout_path:
        raise ConfigError("layout mode needs --layout PATH")
    layout = _parse_layout_file(cfg.layout_path)
    codebook, _prompt, gen, plan, params = _prepare(cfg)
    grid, trace = layout_generate(
        plan, layout, gen, params, codebook=codebook, parallel=cfg.parallel_rows
    )
    _write_run_outputs(cfg, grid, trace, codebook)
    return 0


def cmd_guide(args) -> int:
    cfg = _load_config(args)
    if not cfg.guide_path:
        return cmd_generate(args)
    guide = read_png(cfg.guide_path)
    codebook, prompt, gen, plan, params = _prepare(cfg)
    grid, trace = image_guided_generate(
        plan, guide, prompt, gen, codebook, params, parallel=cfg.parallel_rows
    )
    _write_run_outputs(cfg, grid, trace, codebook)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    path = Path(args.input)
    if not path.exists():
        raise InputError(f"no such input: {path}")
    if path.suffix == ".ptok":
        grid, k = read_ptok(path)
        if args.codebook:
            codebook = read_pcbk(args.codebook)
        else:
            codebook = cfg.build_codebook()
        if codebook.size != k:
            raise CodebookError(
                f"{path} was written with codebook size {k}, decoder has {codebook.size}"
            )
        image = decode_tokens(grid, codebook)
    else:
        image = read_png(path)
    crop_side = cfg.crop_side or cfg.side * cfg.patch_size
    report = evaluate_panorama(image, crop_side, cfg.seam_half_width)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [
        {
            "method": "evaluate",
            "u": "",
            "w_prime": image.shape[1],
            "seed": i,  # seam ordinal
            "tv_mean": tv,
            "ssim_mean": sv,
            "coh": "",
            "wall_ms": "",  # omitted so repeated evaluation is byte-identical
        }
        for i, (tv, sv) in enumerate(zip(report.seam_tv, report.pair_ssim))
    ]
    rows.append(
        {
            "method": "evaluate",
            "u": "",
            "w_prime": image.shape[1],
            "seed": "mean",
            "tv_mean": report.tv_mean,
            "ssim_mean": report.ssim_mean,
            "coh": "",
            "wall_ms": "",
        }
    )
    csv_path = out / "metrics.csv"
    _atomic(csv_path, lambda p: write_metric_csv(p, rows))
    print(
        f"{len(report.seam_tv)} seams: tv_mean={report.tv_mean:.6g} "
        f"ssim_mean={report.ssim_mean:.6g} -> {csv_path}"
    )
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    if bool(args.strides) == bool(args.widths):
        raise ConfigError("pass exactly one of --strides or --widths")
    codebook = cfg.build_codebook()
    prompt = encode_prompt(cfg.prompt)
    gen = cfg.build_generator(prompt, codebook)
    params = cfg.sampling_params()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    common = dict(
        side=cfg.side,
        codebook=codebook,
        gen=gen,
        prompt=prompt,
        params=params,
        crop_side=cfg.crop_side or None,
        seam_half_width=cfg.seam_half_width,
        include_baseline=args.include_baseline,
    )
    if args.strides:
        strides = [s.strip() for s in args.strides.split(",") if s.strip()]
        rows = ablate_stride(
            strides, args.seeds, width_px=cfg.width_px, **common
        )
        csv_path = out / "stride_ablation.csv"
    else:
        widths = [int(w) for w in args.widths.split(",") if w.strip()]
        rows = ablate_size(widths, args.seeds, stride=cfg.stride, **common)
        csv_path = out / "size_ablation.csv"
    _atomic(csv_path, lambda p: write_metric_csv(p, rows))
    print(f"{len(rows)} rows -> {csv_path}")
    return 0


def _corpus_sequences(corpus_dir: Path, window: int) -> list[tuple[int, ...]]:
    files = sorted(corpus_dir.glob("*.ptok"))
    if not files:
        raise InputError(f"no .ptok files under {corpus_dir}")
    sequences = []
    for path in files:
        grid, _k = read_ptok(path)
        stream = grid.tokens
        for start in range(0, len(stream), window):
            chunk = stream[start : start + window]
            if len(chunk) >= 2:
                sequences.append(chunk)
    return sequences


def cmd_train_tiny(args) -> int:
    cfg = _load_config(args)
    window = args.window
    if args.corpus:
        sequences = _corpus_sequences(Path(args.corpus), window)
    else:
        # synthetic corpus sampled from the Markov oracle
        prompt = encode_prompt(cfg.prompt)
        gen = MarkovGenerator(cfg.codebook_size, cfg.markov_order, prompt)
        params = cfg.sampling_params()
        from .generators import ConditioningContext

        sequences = [
            gen.generate(
                ConditioningContext(prompt, (), (params.seed, 0, i)),
                args.length,
                params,
            )
            for i in range(args.sequences)
        ]
    top = max(max(seq) for seq in sequences)
    if top >= cfg.codebook_size:
        raise CodebookError(
            f"corpus token {top} outside configured codebook size {cfg.codebook_size}"
        )
    model = TinyCausalModel(cfg.codebook_size, window, args.dim, seed=cfg.tiny_seed)
    model, curve = train_tiny(model, sequences, args.epochs, args.lr)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _atomic(out / "tiny.pmdl", lambda p: write_pmdl(model, p))

    def write_curve(path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("epoch", "loss"))
            for epoch, loss in enumerate(curve):
                writer.writerow((epoch, format(loss, ".9g")))

    _atomic(out / "loss_curve.csv", write_curve)
    print(
        f"trained on {len(sequences)} sequences for {args.epochs} epochs: "
        f"loss {curve[0]:.4f} -> {curve[-1]:.4f} -> {out}"
    )
    return 0


def cmd_config(args) -> int:
    if args.dump_defaults:
        sys.stdout.write(RunConfig().to_ini())
        return 0
    cfg = _load_config(args)
    sys.stdout.write(cfg.to_ini())
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="config file (key = value with sections)")
    parser.add_argument("--seed", type=int, help="global RNG seed (u64)")
    parser.add_argument("--mode", choices=("vertical", "horizontal", "both"))
    parser.add_argument("--stride", help="expansion stride u, e.g. 3/4")
    parser.add_argument("--width", type=int, help="target panorama width in px")
    parser.add_argument("--height", type=int, help="target panorama height in px")
    parser.add_argument("--n", type=int, help="iteration count (overrides width/height)")
    parser.add_argument("--side", type=int, help="block side in tokens")
    parser.add_argument("--prompt", help="prompt text")
    parser.add_argument("--layout", help="layout file path")
    parser.add_argument("--guide", help="guide PNG path")
    parser.add_argument("--generator", choices=("markov", "tiny"))
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--parallel", action="store_true", help="generate rows concurrently")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="panogrid",
        description="Endless panoramic token-grid generation by next-crop prediction.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, extra in (
        ("generate", cmd_generate, None),
        ("layout", cmd_layout, None),
        ("guide", cmd_guide, None),
    ):
        p = sub.add_parser(name)
        _add_common(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("evaluate")
    _add_common(p)
    p.add_argument("input", help="panorama .png or .ptok")
    p.add_argument("--codebook", help="PCBK file to decode .ptok inputs")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate")
    _add_common(p)
    p.add_argument("--strides", help="comma-separated strides, e.g. 1,3/4,1/2")
    p.add_argument("--widths", help="comma-separated widths in px")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--include-baseline", action="store_true")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("train-tiny")
    _add_common(p)
    p.add_argument("--corpus", help="directory of .ptok files")
    p.add_argument("--sequences", type=int, default=16, help="synthetic corpus size")
    p.add_argument("--length", type=int, default=64, help="synthetic sequence length")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--window", type=int, default=64)
    p.add_argument("--dim", type=int, default=8)
    p.set_defaults(fn=cmd_train_tiny)

    p = sub.add_parser("config")
    _add_common(p)
    p.add_argument("--dump-defaults", action="store_true")
    p.set_defaults(fn=cmd_config)

    return parser


_ERROR_EXITS = (
    (ConfigError, "config", 2),
    (LayoutError, "layout", 3),
    (PlanError, "plan", 3),
    (CapacityError, "engine", 4),
    (CodebookError, "engine", 4),
    (ShapeError, "engine", 4),
    (GridIndexError, "engine", 4),
    (MetricError, "engine", 4),
    (TrainingError, "engine", 4),
    (InputError, "io", 5),
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except PanogridError as exc:
        for kind, category, code in _ERROR_EXITS:
            if isinstance(exc, kind):
                print(f"E{code} {category}: {exc}", file=sys.stderr)
                return code
        print(f"E4 engine: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"E5 io: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
