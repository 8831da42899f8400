"""Command-line interface: train / sample / eval / ablate.

Every command is deterministic given (config bytes, seed, checkpoint bytes).
Exit codes: 0 success, 2 usage or config error, 3 numerical failure,
4 IO/checkpoint failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import figures, gridworld, metrics
from .backbone import build_denoiser
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigError, NumericalError
from .gridworld import (
    GridWorldConfig,
    PairedSample,
    enumerate_joint,
    sample_packed_batch,
)
from .runconfig import RunConfig
from .sampler import (
    GenerationMode,
    decode_batch,
    init_canvas,
    torch_denoise_fn,
)
from .training import (
    STREAM_DATA,
    STREAM_EVAL,
    STREAM_SAMPLE,
    TrainState,
    rng_for,
    train_step,
)
from .vocab import unpack, TokenSequence

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

DECODE_CHUNK = 4096

MODE_NAMES = {
    "joint": "joint_unconditional",
    "t2i": "report_to_image",
    "i2t": "image_to_report",
    "prompted": "prompted_joint",
}

ABLATION_GRIDS = ("causal", "timestep", "adaln", "backbone_scratch")

SUITES = ("dist", "consistency", "recovery", "text", "nelbo")


# ----------------------------------------------------------------------
# Shared helpers


def _resolve_threads(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("MDDM_THREADS")
    if env:
        return int(env)
    return os.cpu_count() or 1


def _fresh_state(cfg: RunConfig) -> TrainState:
    model = build_denoiser(cfg.backbone_config(), cfg.layout(), cfg.train_config().seed)
    return TrainState(
        model=model,
        config=cfg.train_config(),
        schedule=cfg.schedule(),
        vocab=cfg.vocab(),
        run_config=cfg.to_dict(),
    )


def _train_loop(
    state: TrainState,
    world: GridWorldConfig,
    run_dir: Path,
    quiet: bool = False,
) -> TrainState:
    cfg = state.config
    csv_path = run_dir / "metrics.csv"
    new_file = not csv_path.exists()
    steps, losses, lrs = [], [], []
    report_every = max(1, cfg.total_steps // 20)
    t_start = time.monotonic()
    with open(csv_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(["step", "loss", "lr", "wallclock"])
        while state.step < cfg.total_steps:
            batch = sample_packed_batch(
                world, cfg.batch_size, rng_for(cfg.seed, STREAM_DATA, state.step)
            )
            loss, lr = train_step(state, batch)
            writer.writerow(
                [state.step - 1, f"{loss:.6f}", f"{lr:.8f}", f"{time.monotonic() - t_start:.3f}"]
            )
            steps.append(state.step - 1)
            losses.append(loss)
            lrs.append(lr)
            if state.step % cfg.checkpoint_every == 0 and state.step < cfg.total_steps:
                save_checkpoint(state, run_dir / f"ckpt_{state.step:06d}.mddm")
            if not quiet and state.step % report_every == 0:
                print(f"step {state.step}/{cfg.total_steps} loss {loss:.4f} lr {lr:.2e}")
    save_checkpoint(state, run_dir / "ckpt_final.mddm")
    if steps:
        figures.save_loss_curve(steps, losses, lrs, run_dir / "loss_curve.png")
    return state


def _generate_rows(
    model,
    cfg: RunConfig,
    canvases: np.ndarray,
    seed: int,
    stream: int,
    base: int,
) -> np.ndarray:
    """Chunked batched decoding with one derived generator per fixed-size chunk."""
    fn = torch_denoise_fn(model)
    vocab, layout = cfg.vocab(), cfg.layout()
    s_cfg, schedule = cfg.sampler_config(), cfg.schedule()
    out = []
    for idx in range(0, canvases.shape[0], DECODE_CHUNK):
        chunk = canvases[idx : idx + DECODE_CHUNK]
        rng = rng_for(seed, stream, base + idx // DECODE_CHUNK)
        out.append(decode_batch(fn, chunk, vocab, layout, s_cfg, schedule, rng))
    return np.concatenate(out, axis=0)


def _canvas_rows(mode: GenerationMode, cfg: RunConfig, n: int) -> np.ndarray:
    canvas = init_canvas(mode, cfg.vocab(), cfg.layout())
    return np.tile(canvas.ids, (n, 1))


def _rows_to_pairs(rows: np.ndarray, cfg: RunConfig) -> list[PairedSample]:
    vocab, layout, world = cfg.vocab(), cfg.layout(), cfg.world()
    pairs = []
    for row in rows:
        report, image_local = unpack(TokenSequence(ids=row, layout=layout), vocab)
        try:
            grid = gridworld.grid_from_image_tokens(image_local, world)
        except ValueError:
            grid = np.full((world.grid_size, world.grid_size), -1, dtype=np.int64)
        pairs.append(
            PairedSample(grid=grid, report_ids=report, image_tokens=image_local)
        )
    return pairs


def write_pgm(path, gray: np.ndarray) -> None:
    """Binary P5 image; gray must be uint8 [H, W]."""
    gray = np.asarray(gray, dtype=np.uint8)
    header = f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(gray.tobytes())


def image_tokens_to_gray(tokens: np.ndarray, world: GridWorldConfig) -> np.ndarray:
    """One gray level per codebook id, each cell expanded to a patch block."""
    levels = np.round(
        (np.arange(world.k_img, dtype=np.float64) + 0.5) * 255.0 / world.k_img
    ).astype(np.uint8)
    cells = levels[np.asarray(tokens, dtype=np.int64)].reshape(
        world.grid_size, world.grid_size
    )
    return np.repeat(np.repeat(cells, world.patch_size, 0), world.patch_size, 1)


# ----------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    out_root = Path(args.out)
    run_dir = out_root / cfg.run_name()
    if (run_dir / "config.json").exists() and not (args.force or args.resume):
        raise ConfigError(
            f"run directory {run_dir} already exists for this config; "
            "pass --force to overwrite or --resume to continue"
        )
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.canonical_json() + "\n")

    if args.resume:
        state = load_checkpoint(args.resume)
        if RunConfig.from_dict(state.run_config).config_hash() != cfg.config_hash():
            raise ConfigError("--resume checkpoint was written by a different config")
    else:
        state = _fresh_state(cfg)
    state = _train_loop(state, cfg.world(), run_dir, quiet=args.quiet)
    print(f"trained to step {state.step}; artifacts in {run_dir}")
    return EXIT_OK


# ----------------------------------------------------------------------
# sample


def _load_condition(args, mode_name: str, cfg: RunConfig) -> GenerationMode:
    variant = MODE_NAMES[mode_name]
    if variant == "joint_unconditional":
        if args.condition:
            raise ConfigError("mode joint takes no --condition")
        return GenerationMode(variant=variant)
    if not args.condition:
        raise ConfigError(f"mode {mode_name} requires --condition FILE")
    path = Path(args.condition)
    if not path.exists():
        raise ConfigError(f"condition file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"condition file is not valid JSON: {exc}") from exc
    key = {
        "report_to_image": "report_ids",
        "image_to_report": "image_ids",
        "prompted_joint": "report_prefix",
    }[variant]
    if key not in doc:
        raise ConfigError(f"condition file must contain {key!r} for mode {mode_name}")
    try:
        return GenerationMode(variant=variant, condition=np.asarray(doc[key]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_sample(args) -> int:
    state = load_checkpoint(args.ckpt)
    cfg = RunConfig.from_dict(state.run_config)
    world = cfg.world()
    seed = args.seed if args.seed is not None else cfg.sampler_config().seed
    mode = _load_condition(args, args.mode, cfg)
    try:
        canvases = _canvas_rows(mode, cfg, args.num)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    state.model.eval()
    rows = _generate_rows(state.model, cfg, canvases, seed, STREAM_SAMPLE, 0)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    vocab, layout = cfg.vocab(), cfg.layout()
    for i, row in enumerate(rows):
        report, image_local = unpack(TokenSequence(ids=row, layout=layout), vocab)
        pgm_name = f"sample_{i:03d}.pgm"
        txt_name = f"sample_{i:03d}.report.txt"
        write_pgm(out_dir / pgm_name, image_tokens_to_gray(image_local, world))
        text = " ".join(str(int(t)) for t in report)
        detok = gridworld.detokenize_report(report, world)
        (out_dir / txt_name).write_text(text + "\n" + detok + "\n")
        files.extend([pgm_name, txt_name])
    manifest = {
        "mode": args.mode,
        "seed": seed,
        "num": args.num,
        "config_hash": cfg.config_hash(),
        "files": files,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    )
    print(f"wrote {args.num} pairs to {out_dir}")
    return EXIT_OK


# ----------------------------------------------------------------------
# eval


def _eval_pairs_source(cfg: RunConfig, n: int, seed: int, base: int) -> np.ndarray:
    return sample_packed_batch(cfg.world(), n, rng_for(seed, STREAM_EVAL, base))


def run_eval_suites(state: TrainState, suites: set[str], seed: int) -> dict[str, float]:
    """Compute the requested metric families on a trained (or fresh) state."""
    cfg = RunConfig.from_dict(state.run_config)
    world, vocab, layout = cfg.world(), cfg.vocab(), cfg.layout()
    if world.pixel_mode:
        raise ConfigError("the eval suites require a token-direct world")
    ev = cfg.eval_section()
    schedule = cfg.schedule()
    state.model.eval()
    out: dict[str, float] = {}

    def joint_rows(n: int, base: int) -> np.ndarray:
        canvases = _canvas_rows(GenerationMode(variant="joint_unconditional"), cfg, n)
        return _generate_rows(state.model, cfg, canvases, seed, STREAM_EVAL, base)

    if "dist" in suites:
        rows = joint_rows(ev["n_joint_samples"], base=10_000)
        exact = enumerate_joint(world).as_dict()
        out["tv_joint"] = metrics.tv_distance(metrics.counts_from_rows(rows), exact)

    if "consistency" in suites:
        n = ev["n_pairs"]
        out["consistency_joint"] = metrics.consistency_rate(
            _rows_to_pairs(joint_rows(n, base=20_000), cfg), world
        )
        source = _eval_pairs_source(cfg, n, seed, base=21_000)
        reports = source[:, : layout.len_report]
        images_local = source[:, layout.len_report :] - vocab.k_text

        canv = np.full((n, layout.len_total), vocab.mask_id, dtype=np.int64)
        canv[:, : layout.len_report] = reports
        rows = _generate_rows(state.model, cfg, canv, seed, STREAM_EVAL, 22_000)
        out["consistency_r2i"] = metrics.consistency_rate(_rows_to_pairs(rows, cfg), world)

        canv = np.full((n, layout.len_total), vocab.mask_id, dtype=np.int64)
        canv[:, layout.len_report :] = images_local + vocab.k_text
        rows = _generate_rows(state.model, cfg, canv, seed, STREAM_EVAL, 23_000)
        out["consistency_i2t"] = metrics.consistency_rate(_rows_to_pairs(rows, cfg), world)

        plen = ev["prompt_len"]
        canv = np.full((n, layout.len_total), vocab.mask_id, dtype=np.int64)
        canv[:, :plen] = reports[:, :plen]
        rows = _generate_rows(state.model, cfg, canv, seed, STREAM_EVAL, 24_000)
        out["consistency_prompted"] = metrics.consistency_rate(
            _rows_to_pairs(rows, cfg), world
        )
        out["prompt_match_rate"] = float(
            (rows[:, :plen] == reports[:, :plen]).all(axis=1).mean()
        )

    if "recovery" in suites:
        source = _eval_pairs_source(cfg, ev["n_pairs"], seed, base=30_000)
        for i, t in enumerate(ev["recovery_ts"]):
            out[f"recovery@{t}"] = metrics.masked_recovery_accuracy(
                state.model,
                source,
                schedule,
                vocab,
                t,
                rng_for(seed, STREAM_EVAL, 31_000 + i),
            )

    if "text" in suites:
        n = ev["n_pairs"]
        source = _eval_pairs_source(cfg, n, seed, base=40_000)
        images = source[:, layout.len_report :]
        canv = np.full((n, layout.len_total), vocab.mask_id, dtype=np.int64)
        canv[:, layout.len_report :] = images
        rows = _generate_rows(state.model, cfg, canv, seed, STREAM_EVAL, 41_000)
        refs = source[:, : layout.len_report]
        cands = rows[:, : layout.len_report]
        for order in (1, 2, 3):
            out[f"bleu{order}"] = float(
                np.mean([metrics.bleu_n(c, r, order) for c, r in zip(cands, refs)])
            )
        out["rouge_l"] = float(
            np.mean([metrics.rouge_l(c, r) for c, r in zip(cands, refs)])
        )

    if "nelbo" in suites:
        source = _eval_pairs_source(cfg, ev["n_pairs"], seed, base=50_000)
        out["nelbo_per_token"] = metrics.nelbo_estimate(
            state.model,
            source,
            schedule,
            vocab,
            ev["nelbo_t_samples"],
            rng_for(seed, STREAM_EVAL, 51_000),
        )
        out["nelbo_uniform_reference"] = math.log(vocab.k_total)

    return out


def _write_eval_outputs(
    values: dict[str, float], suites: set[str], cfg: RunConfig, seed: int, out_dir: Path
) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "mode", "seed", "value"])
        for key, value in values.items():
            mode = "joint"
            for tag, name in (("_r2i", "t2i"), ("_i2t", "i2t"), ("_prompted", "prompted"), ("prompt_", "prompted")):
                if tag in key:
                    mode = name
            writer.writerow([key, mode, seed, f"{value:.10g}"])
    summary = {
        "suite": sorted(suites),
        "seed": seed,
        "config_hash": cfg.config_hash(),
        "metrics": {k: float(v) for k, v in values.items()},
        "conventions": metrics.TEXT_METRIC_CONVENTIONS,
    }
    (out_dir / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n"
    )
    figures.save_metric_bars(values, out_dir / "metrics.png", title="eval metrics")


def cmd_eval(args) -> int:
    state = load_checkpoint(args.ckpt)
    cfg = RunConfig.from_dict(state.run_config)
    if args.suite == "all":
        suites = set(SUITES)
    elif args.suite in SUITES:
        suites = {args.suite}
    else:
        raise ConfigError(f"unknown suite {args.suite!r}")
    seed = cfg.eval_section()["seed"]
    values = run_eval_suites(state, suites, seed)
    out_dir = Path(args.out)
    _write_eval_outputs(values, suites, cfg, seed, out_dir)
    if cfg.eval_section()["materialize_eval_set"]:
        source = _eval_pairs_source(cfg, cfg.eval_section()["n_pairs"], seed, base=60_000)
        gridworld.save_token_records(out_dir / "eval_set.bin", list(source))
    for key in sorted(values):
        print(f"{key}: {values[key]:.4f}")
    return EXIT_OK


# ----------------------------------------------------------------------
# ablate


def variant_config(cfg: RunConfig, grid: str) -> RunConfig:
    if grid == "causal":
        return cfg.with_overrides(backbone={"causal": True})
    if grid == "timestep":
        return cfg.with_overrides(
            backbone={"use_timestep_embed": False, "adaln_mode": "none"}
        )
    if grid == "adaln":
        return cfg.with_overrides(backbone={"adaln_mode": "none"})
    if grid == "backbone_scratch":
        # Weight transfer from a pretrained backbone is out of scope, so the
        # from-scratch row is the base configuration itself.
        return cfg
    raise ConfigError(f"unknown ablation grid {grid!r}")


def cmd_ablate(args) -> int:
    cfg = RunConfig.load(args.config)
    grids = []
    for token in args.grid.split(","):
        token = token.strip()
        if token == "all":
            grids.extend(g for g in ABLATION_GRIDS if g not in grids)
        elif token in ABLATION_GRIDS:
            if token not in grids:
                grids.append(token)
        else:
            raise ConfigError(f"unknown ablation grid {token!r}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for variant in ["full"] + grids:
        v_cfg = cfg if variant == "full" else variant_config(cfg, variant)
        run_dir = out_dir / variant
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(v_cfg.canonical_json() + "\n")
        print(f"[{variant}] training {v_cfg.train_config().total_steps} steps")
        state = _train_loop(_fresh_state(v_cfg), v_cfg.world(), run_dir, quiet=True)
        values = run_eval_suites(state, set(SUITES), v_cfg.eval_section()["seed"])
        _write_eval_outputs(values, set(SUITES), v_cfg, v_cfg.eval_section()["seed"], run_dir)
        rows.append({"variant": variant, **{k: f"{v:.10g}" for k, v in values.items()}})

    keys = ["variant"] + sorted(k for k in rows[0] if k != "variant")
    with open(out_dir / "comparison.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    chart_keys = [
        k for k in ("tv_joint", "consistency_joint", "consistency_r2i", "consistency_i2t")
        if k in rows[0]
    ]
    figures.save_ablation_chart(rows, chart_keys, out_dir / "comparison.png")
    print(f"ablation table written to {out_dir / 'comparison.csv'}")
    return EXIT_OK


# ----------------------------------------------------------------------
# entry


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mddm",
        description="Joint image-report masked discrete diffusion at desk scale",
    )
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="compute threads (default: MDDM_THREADS or all cores)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--resume", default=None, help="checkpoint to continue from")
    p_train.add_argument("--force", action="store_true")
    p_train.add_argument("--quiet", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_sample = sub.add_parser("sample", help="generate image-report pairs")
    p_sample.add_argument("--ckpt", required=True)
    p_sample.add_argument("--mode", required=True, choices=sorted(MODE_NAMES))
    p_sample.add_argument("--num", type=int, default=4)
    p_sample.add_argument("--seed", type=int, default=None)
    p_sample.add_argument("--condition", default=None)
    p_sample.add_argument("--out", required=True)
    p_sample.set_defaults(func=cmd_sample)

    p_eval = sub.add_parser("eval", help="run metric suites on a checkpoint")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--suite", default="all", choices=sorted(SUITES) + ["all"])
    p_eval.add_argument("--out", required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_ablate = sub.add_parser("ablate", help="train and compare component variants")
    p_ablate.add_argument("--config", required=True)
    p_ablate.add_argument(
        "--grid", required=True, help="comma list of: causal,timestep,adaln,backbone_scratch,all"
    )
    p_ablate.add_argument("--out", required=True)
    p_ablate.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    torch.set_num_threads(_resolve_threads(args.threads))
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as exc:
        print(f"io failure: {exc}", file=sys.stderr)
        return EXIT_IO


def entrypoint() -> None:
    raise SystemExit(main(sys.argv[1:]))
