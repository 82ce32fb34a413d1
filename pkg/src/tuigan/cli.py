"""Command-line interface: ``tuigan train | translate | evaluate | ablate``.

Exit codes: 0 success, 1 configuration/input/manifest error (or a failed
ablation cell), 2 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import torch

from . import checkpoint
from .config import TrainConfig
from .errors import CheckpointError, ConfigError, ImageFormatError, ManifestError, TrainingDivergence
from .imaging import fit_max_size, load_image, resample, save_image
from .losses import LossWeights
from .metrics import evaluate_run, make_extractor
from .trainer import load_model, train_all, translate

log = logging.getLogger("tuigan")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2

OUT_ROOT_ENV = "TUIGAN_OUT_ROOT"
DEFAULT_OUT_ROOT = "run"
DEFAULT_MAX_SIZE = 250

PRESETS: dict[str, dict] = {
    "full": {},
    "smoke": {"resize": 64, "N": 2, "iters_per_scale": 200, "channels": 16},
}

# the loss/attention ablations keep the full pyramid depth
ABLATION_BASE_N = 4


@dataclass(frozen=True)
class AblationSpec:
    disable_attention: bool = False
    disable_cyc: bool = False
    disable_idt: bool = False
    disable_tv: bool = False
    override_N: int | None = None

    def apply(self, cfg: TrainConfig) -> TrainConfig:
        w = cfg.weights
        weights = LossWeights(
            lambda_cyc=0.0 if self.disable_cyc else w.lambda_cyc,
            lambda_idt=0.0 if self.disable_idt else w.lambda_idt,
            lambda_tv=0.0 if self.disable_tv else w.lambda_tv,
            lambda_pen=w.lambda_pen,
        )
        return cfg.replace(
            weights=weights,
            attention=cfg.attention and not self.disable_attention,
            N=cfg.N if self.override_N is None else self.override_N,
        )


# (cell id, column label, spec), in the column order of the ablation table
ABLATION_CELLS: list[tuple[str, str, AblationSpec]] = [
    ("no-attn", "w/o A", AblationSpec(disable_attention=True)),
    ("no-cyc", "w/o L_CYC", AblationSpec(disable_cyc=True)),
    ("no-idt", "w/o L_IDT", AblationSpec(disable_idt=True)),
    ("no-tv", "w/o L_TV", AblationSpec(disable_tv=True)),
] + [(f"n{k}", f"N={k}", AblationSpec(override_N=k)) for k in range(5)]


class UsageError(Exception):
    pass


def _out_root(value: str | None) -> Path:
    return Path(value or os.environ.get(OUT_ROOT_ENV) or DEFAULT_OUT_ROOT)


def _load_flag_image(path: str | None, flag: str) -> torch.Tensor:
    if not path:
        raise UsageError(f"{flag} is required")
    if not Path(path).is_file():
        raise UsageError(f"{flag}: no such file: {path}")
    try:
        return load_image(path)
    except (OSError, ImageFormatError) as exc:
        raise UsageError(f"{flag}: cannot read image: {exc}") from exc


def preprocess(img: torch.Tensor, resize: int | None, max_size: int) -> torch.Tensor:
    if resize:
        return resample(img, resize, resize)
    return fit_max_size(img, max_size)


def config_from_args(args) -> tuple[TrainConfig, dict]:
    """Reference defaults, then the preset, then explicit flags."""
    preset = dict(PRESETS[args.preset])
    resize = preset.pop("resize", None)
    cfg = TrainConfig(**preset)
    overrides = {}
    for flag, field in (("n_scales", "N"), ("iters", "iters_per_scale"), ("lr", "lr_initial"),
                        ("seed", "seed"), ("channels", "channels"), ("scale_factor", "s"),
                        ("d_steps", "d_steps"), ("g_steps", "g_steps")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field] = value
    w = cfg.weights
    weights = LossWeights(
        lambda_cyc=w.lambda_cyc if args.lambda_cyc is None else args.lambda_cyc,
        lambda_idt=w.lambda_idt if args.lambda_idt is None else args.lambda_idt,
        lambda_tv=w.lambda_tv if args.lambda_tv is None else args.lambda_tv,
        lambda_pen=w.lambda_pen if args.lambda_pen is None else args.lambda_pen,
    )
    if getattr(args, "no_attention", False):
        overrides["attention"] = False
    cfg = cfg.replace(weights=weights, **overrides)
    prep = {"prep.preset": args.preset, "prep.resize": resize or 0, "prep.max_size": args.max_size}
    return cfg, prep


def run_training(img_a, img_b, cfg: TrainConfig, run_dir: Path, extra: dict) -> None:
    """Train (or resume) into ``run_dir`` and write inputs and both translations as PNGs."""
    run_dir.mkdir(parents=True, exist_ok=True)
    save_image(img_a, run_dir / "input_a.png")
    save_image(img_b, run_dir / "input_b.png")
    model = train_all(img_a, img_b, cfg, run_dir=run_dir, extra_manifest=extra)
    save_image(translate(model, img_a, "ab"), run_dir / "translated_ab.png")
    save_image(translate(model, img_b, "ba"), run_dir / "translated_ba.png")


def cmd_train(args) -> int:
    try:
        img_a = _load_flag_image(args.image_a, "--image-a")
        img_b = _load_flag_image(args.image_b, "--image-b")
        cfg, prep = config_from_args(args)
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    resize = prep["prep.resize"] or None
    img_a = preprocess(img_a, resize, args.max_size)
    img_b = preprocess(img_b, resize, args.max_size)
    run_dir = _out_root(args.out) / args.name
    extra = {**prep, "input.a": str(args.image_a), "input.b": str(args.image_b)}
    log.info("effective config: %s", cfg.to_flat())
    try:
        run_training(img_a, img_b, cfg, run_dir, extra)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergence as exc:
        print(f"error: training diverged: {exc}; completed scales are kept in {run_dir}", file=sys.stderr)
        return EXIT_DIVERGED
    print(run_dir)
    return EXIT_OK


def cmd_translate(args) -> int:
    run_dir = Path(args.model)
    if not run_dir.is_dir():
        print(f"error: --model: no such run directory: {run_dir}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        model = load_model(run_dir)
        _, extra = checkpoint.read_config(run_dir)
        img = _load_flag_image(args.input, "--input")
    except (CheckpointError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    img = preprocess(img, int(extra.get("prep.resize", 0)) or None, int(extra.get("prep.max_size", DEFAULT_MAX_SIZE)))
    try:
        out = translate(model, img, args.direction)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    output = Path(args.output) if args.output else run_dir / f"translated_{args.direction}_{Path(args.input).stem}.png"
    save_image(out, output)
    print(output)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    manifest = Path(args.manifest)
    if not manifest.is_file():
        print(f"error: --manifest: no such file: {manifest}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        extractor = make_extractor(args.extractor)
    except (ValueError, OSError) as exc:
        print(f"error: --extractor: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    root = Path(args.root) if args.root else manifest.parent
    report = Path(args.report) if args.report else manifest.with_name(manifest.stem + ".report.txt")
    try:
        _, agg = evaluate_run(root, manifest, extractor, report_path=report)
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"sifid={agg['sifid']:.6g} pd={agg['pd']:.6g} pairs={agg['pairs']} report={report}")
    return EXIT_OK


def _run_cell(cell: str, cfg: TrainConfig, img_a, img_b, cell_dir: Path, extra: dict, extractor_spec: str) -> dict:
    if os.environ.get("TUIGAN_CELL_WORKER"):
        torch.set_num_threads(1)
    row = {"cell": cell, "status": "ok"}
    try:
        run_training(img_a, img_b, cfg, cell_dir, extra)
        extractor = make_extractor(extractor_spec)
        for direction, line in (
            ("ab", "input_a.png input_b.png translated_ab.png"),
            ("ba", "input_b.png input_a.png translated_ba.png"),
        ):
            manifest = cell_dir / f"pairs_{direction}.txt"
            manifest.write_text(line + "\n")
            _, agg = evaluate_run(cell_dir, manifest, extractor, report_path=cell_dir / f"metrics_{direction}.txt")
            row[f"sifid_{direction}"] = agg["sifid"]
            row[f"pd_{direction}"] = agg["pd"]
    except Exception as exc:  # one failed cell must not stop the matrix
        log.exception("ablation cell %s failed", cell)
        row["status"] = f"failed: {type(exc).__name__}: {exc}"
    return row


def format_comparison(rows: list[dict]) -> str:
    """Markdown table, one row per ablation cell in column order of the ablation study."""
    header = "| cell | variant | SIFID A->B | SIFID B->A | PD A->B | PD B->A | status |"
    lines = [header, "|" + "---|" * 7]
    labels = {cell: label for cell, label, _ in ABLATION_CELLS}
    order = {cell: i for i, (cell, _, _) in enumerate(ABLATION_CELLS)}
    for row in sorted(rows, key=lambda r: order[r["cell"]]):
        def num(key):
            return f"{row[key]:.6g}" if key in row else "-"

        lines.append(
            f"| {row['cell']} | {labels[row['cell']]} | {num('sifid_ab')} | {num('sifid_ba')} | "
            f"{num('pd_ab')} | {num('pd_ba')} | {row['status']} |"
        )
    return "\n".join(lines) + "\n"


def parse_comparison(text: str) -> list[dict]:
    rows = []
    for line in text.strip().splitlines()[2:]:
        cells = [c.strip() for c in line.strip().strip("|").split("|")]
        row = {"cell": cells[0], "variant": cells[1], "status": cells[6]}
        for key, value in zip(("sifid_ab", "sifid_ba", "pd_ab", "pd_ba"), cells[2:6]):
            if value != "-":
                row[key] = float(value)
        rows.append(row)
    return rows


def cmd_ablate(args) -> int:
    try:
        img_a = _load_flag_image(args.image_a, "--image-a")
        img_b = _load_flag_image(args.image_b, "--image-b")
        base, prep = config_from_args(args)
        make_extractor(args.extractor)
    except (UsageError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.n_scales is None:
        base = base.replace(N=ABLATION_BASE_N)
    cells = ABLATION_CELLS
    if args.only:
        wanted = [c.strip() for c in args.only.split(",") if c.strip()]
        known = {cell for cell, _, _ in ABLATION_CELLS}
        unknown = [c for c in wanted if c not in known]
        if unknown:
            print(f"error: --only: unknown cells {unknown}; choose from {sorted(known)}", file=sys.stderr)
            return EXIT_CONFIG
        cells = [c for c in ABLATION_CELLS if c[0] in wanted]
    resize = prep["prep.resize"] or None
    img_a = preprocess(img_a, resize, args.max_size)
    img_b = preprocess(img_b, resize, args.max_size)
    root = _out_root(args.out) / args.name
    root.mkdir(parents=True, exist_ok=True)
    jobs = []
    for cell, _, spec in cells:
        cfg = spec.apply(base)
        extra = {**prep, "ablation.cell": cell}
        jobs.append((cell, cfg, img_a, img_b, root / cell, extra, args.extractor))

    if args.jobs > 1:
        os.environ["TUIGAN_CELL_WORKER"] = "1"
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_run_cell, *zip(*jobs)))
    else:
        rows = [_run_cell(*job) for job in jobs]

    table = format_comparison(rows)
    (root / "comparison.md").write_text(table)
    print(table, end="")
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_CONFIG


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--image-a", help="image of domain A")
    p.add_argument("--image-b", help="image of domain B")
    p.add_argument("--out", help=f"output root (default ${OUT_ROOT_ENV} or ./{DEFAULT_OUT_ROOT})")
    p.add_argument("--name", default="default", help="run name; outputs go to <out>/<name>")
    p.add_argument("--preset", choices=sorted(PRESETS), default="full")
    p.add_argument("--n-scales", type=int, help="coarsest scale index N (N+1 scales)")
    p.add_argument("--iters", type=int, help="iterations per scale")
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--seed", type=int)
    p.add_argument("--channels", type=int, help="hidden feature width")
    p.add_argument("--scale-factor", type=float, help="pyramid scale factor s")
    p.add_argument("--d-steps", type=int)
    p.add_argument("--g-steps", type=int)
    p.add_argument("--lambda-cyc", type=float)
    p.add_argument("--lambda-idt", type=float)
    p.add_argument("--lambda-tv", type=float)
    p.add_argument("--lambda-pen", type=float)
    p.add_argument("--max-size", type=int, default=DEFAULT_MAX_SIZE, help="longest input side after resizing")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tuigan", description="Two-image unpaired image translation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train both pyramids on two images")
    _add_train_flags(p)
    p.add_argument("--no-attention", action="store_true", help="replace the attention blend by addition")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="translate an image with a trained run")
    p.add_argument("--model", required=True, help="run directory")
    p.add_argument("--input", help="image to translate")
    p.add_argument("--direction", choices=("ab", "ba"), default="ab")
    p.add_argument("--output")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="SIFID/PD over a manifest of (source target translated) triples")
    p.add_argument("--manifest", required=True)
    p.add_argument("--root", help="directory relative manifest paths resolve against")
    p.add_argument("--extractor", default="synthetic", help="synthetic | file:<vgg19 weights>")
    p.add_argument("--report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the ablation matrix and tabulate SIFID/PD")
    _add_train_flags(p)
    p.add_argument("--only", help="comma-separated cells: " + ",".join(c for c, _, _ in ABLATION_CELLS))
    p.add_argument("--jobs", type=int, default=1, help="cells to run in parallel")
    p.add_argument("--extractor", default="synthetic")
    p.set_defaults(func=cmd_ablate, name="ablation")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
