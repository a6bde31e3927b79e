"""``uhdpromer`` command line: train, infer, eval, ablate, profile, dump-ndp.

Exit codes: 0 success, 1 operational error (bad config, missing data, IO),
2 usage error (argparse).
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import torch

from . import plotting
from .checkpoint import CheckpointError, load_checkpoint
from .complexity import (ProfileOOMError, count_params, flop_ledger, format_param_table,
                         profile_runtime)
from .config import ConfigError, dump_config, read_config_file, resolve
from .data import IMAGE_SUFFIXES, load_image, save_image
from .losses import loss_terms
from .metrics import evaluate_dirs
from .model import VARIANTS, build_model, make_variant
from .ndp import dump_ndp_maps, prior_to_gray
from .train import OVERFIT_DEFAULTS, NonFiniteLossError, fit

log = logging.getLogger("uhdpromer")

REFERENCE_PARAMS_M = 0.7430
REFERENCE_FLOPS_G = 32.56
REFERENCE_RUNTIME_S = 0.12
PARAM_CALIBRATION_TOL = 0.25

# Published parameter counts (millions) for each ablation variant.
REFERENCE_VARIANT_PARAMS = {
    "full": "0.7430",
    "a": "0.5322",
    "b": "0.7348",
    "c": "0.5404",
    "d": "0.7430",
    "e": "0.5322",
    "cascaded": "0.7414",
    "no_sr_branch": "0.7425",
}
VARIANT_LABELS = {
    "full": "full model",
    "a": "w/o NDP in NDPA&NDPN",
    "b": "w/o NDP in NDPA",
    "c": "w/o NDP in NDPN",
    "d": "NDP -> direct feature",
    "e": "NDP before NDPTB",
    "cascaded": "cascaded reconstruction",
    "no_sr_branch": "w/o SR loss term",
}

# flag dest -> (config section, field)
FLAG_FIELDS = {
    "channels": ("model", "channels"),
    "blocks": ("model", "blocks"),
    "heads": ("model", "heads"),
    "shuffle": ("model", "shuffle"),
    "beta": ("model", "expansion"),
    "shared_mixer": ("model", "shared_mixer"),
    "factorized_mixer": ("model", "factorized_mixer"),
    "variant": ("model", "variant"),
    "seed": ("model", "seed"),
    "steps": ("train", "total_steps"),
    "batch_size": ("train", "batch_size"),
    "patch_size": ("train", "patch_size"),
    "lr": ("train", "lr_init"),
    "lr_min": ("train", "lr_min"),
    "weight_decay": ("train", "weight_decay"),
    "data_root": ("train", "data_root"),
    "overfit_synthetic": ("train", "overfit_synthetic"),
    "checkpoint_interval": ("train", "checkpoint_interval"),
    "flips": ("train", "flips"),
    "workers": ("train", "workers"),
    "alpha_sr": ("loss", "alpha_sr"),
    "lambda_freq": ("loss", "lambda_freq"),
}


def _add_config(p):
    p.add_argument("--config", type=Path, help="YAML config with model/train/loss sections")


def _add_model(p):
    g = p.add_argument_group("model")
    g.add_argument("--channels", type=int, help="feature channels C (default 16)")
    g.add_argument("--blocks", type=int, help="transformer blocks L (default 15)")
    g.add_argument("--heads", type=int, help="attention heads (default 8, or gcd(C, 8) when 8 does not divide C)")
    g.add_argument("--shuffle", type=int, help="shuffle-down factor s (default 8)")
    g.add_argument("--beta", type=float, help="feed-forward expansion factor (default 2.0)")
    g.add_argument("--shared-mixer", dest="shared_mixer", action=argparse.BooleanOptionalAction, default=None,
                   help="share one strided mixer across all blocks")
    g.add_argument("--factorized-mixer", dest="factorized_mixer", action=argparse.BooleanOptionalAction,
                   default=None, help="depthwise-strided + pointwise mixer instead of a dense strided conv")
    g.add_argument("--variant", choices=VARIANTS, help="ablation variant (default full)")
    g.add_argument("--seed", type=int, help="init / data seed (default 0)")


def _add_train(p):
    g = p.add_argument_group("training")
    g.add_argument("--data-root", dest="data_root", help="dataset root with input/ and gt/ subdirs")
    g.add_argument("--overfit-synthetic", dest="overfit_synthetic", action="store_true", default=None,
                   help="train on two synthetic 64x64 pairs (desk-scale sanity run)")
    g.add_argument("--steps", type=int, help="total optimizer steps")
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--patch-size", dest="patch_size", type=int)
    g.add_argument("--lr", type=float, help="initial learning rate")
    g.add_argument("--lr-min", dest="lr_min", type=float, help="final learning rate")
    g.add_argument("--weight-decay", dest="weight_decay", type=float)
    g.add_argument("--checkpoint-interval", dest="checkpoint_interval", type=int)
    g.add_argument("--flips", action=argparse.BooleanOptionalAction, default=None, help="paired random flips")
    g.add_argument("--workers", type=int, help="patch-loading threads (0 = inline)")
    g.add_argument("--resume", type=Path, help="checkpoint to resume from")
    g = p.add_argument_group("loss")
    g.add_argument("--alpha-sr", dest="alpha_sr", type=float, help="weight of the SR-branch term (default 0.5)")
    g.add_argument("--lambda-freq", dest="lambda_freq", type=float, help="frequency term weight (default 0.1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uhdpromer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model (or the synthetic overfit check)")
    _add_config(p)
    _add_model(p)
    _add_train(p)
    p.add_argument("--out", type=Path, default=Path("runs/train"), help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="restore every image in a directory")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True, help="directory of .png/.jpg images")
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--save-sr", dest="save_sr", action="store_true", help="also write SR-branch images to <output>/sr")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="PSNR/SSIM of predictions against ground truth")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--out", type=Path, default=Path("runs/eval"))
    p.add_argument("--workers", type=int, default=0, help="threads for per-image metrics")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="build every ablation variant, count parameters, smoke-train one step")
    _add_config(p)
    _add_model(p)
    p.add_argument("--size", type=int, default=None, help="smoke-test image side (default 2*s)")
    p.add_argument("--out", type=Path, default=Path("runs/ablate"))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("profile", help="parameter count, FLOP ledgers and runtime")
    _add_config(p)
    _add_model(p)
    p.add_argument("--sizes", default="1024", help="comma-separated square sizes, e.g. 256,512")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--no-runtime", dest="runtime", action="store_false", help="skip wall-clock timing")
    p.add_argument("--out", type=Path, default=Path("runs/profile"))
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("dump-ndp", help="write one grayscale prior map per transformer block")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_dump_ndp)
    return parser


def configs_from_args(args, defaults: dict | None = None):
    """Resolve (ModelConfig, TrainConfig, LossConfig): flag > file > ``defaults`` > built-in."""
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    overrides: dict[str, dict] = {}
    for dest, (section, name) in FLAG_FIELDS.items():
        val = getattr(args, dest, None)
        if val is not None:
            overrides.setdefault(section, {})[name] = val
    defaults = dict(defaults or {})
    # heads default of 8 cannot divide small channel counts
    channels = overrides.get("model", {}).get("channels", file_values.get("model", {}).get("channels"))
    heads_set = "heads" in overrides.get("model", {}) or "heads" in file_values.get("model", {})
    if channels is not None and not heads_set and channels % 8:
        defaults.setdefault("model", {})["heads"] = math.gcd(channels, 8)
    return resolve(defaults, file_values, overrides)


def cmd_train(args) -> int:
    defaults = {"train": dict(OVERFIT_DEFAULTS)} if args.overfit_synthetic else {}
    mcfg, tcfg, lcfg = configs_from_args(args, defaults)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(mcfg, tcfg, lcfg))
    report = fit(mcfg, tcfg, out, lcfg, resume=args.resume)
    plotting.plot_training_curves(report.log_path, out / "loss_curve.png")
    print(f"steps: {report.steps_run} (final step {report.final_step})")
    if report.initial_loss is not None:
        print(f"loss: {report.initial_loss:.6f} -> {report.final_loss:.6f} "
              f"(reduction {100 * report.loss_reduction:.2f}%)")
    print(f"final PSNR: {report.train_psnr:.2f} dB")
    print(f"log: {report.log_path}")
    print(f"checkpoint: {report.checkpoint}")
    return 0


def _list_images(d: Path):
    if not d.is_dir():
        raise FileNotFoundError(f"input directory {d} does not exist")
    return [p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES]


@torch.no_grad()
def cmd_infer(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    model = ck.model.eval()
    failed = 0
    images = _list_images(args.input)
    for path in images:
        try:
            x = torch.from_numpy(load_image(path))[None]
            restored, sr = model(x)
            save_image(restored[0], args.output / f"{path.stem}.png")
            if args.save_sr and sr is not None:
                save_image(sr[0], args.output / "sr" / f"{path.stem}.png")
        except (OSError, ValueError, RuntimeError) as exc:
            failed += 1
            log.error("%s: %s", path, exc)
    print(f"restored {len(images) - failed}/{len(images)} images into {args.output}")
    return 1 if failed else 0


def cmd_eval(args) -> int:
    report = evaluate_dirs(args.pred, args.gt, workers=args.workers)
    args.out.mkdir(parents=True, exist_ok=True)
    report.write_csv(args.out / "metrics.csv")
    summary = report.summary()
    (args.out / "summary.txt").write_text(summary + "\n")
    plotting.plot_metrics(report, args.out / "metrics.png")
    print(summary)
    return 0


def _smoke_step(model, size: int):
    gen = torch.Generator().manual_seed(model.config.seed)
    x = torch.rand(1, 3, size, size, generator=gen)
    y = torch.rand(1, 3, size, size, generator=gen)
    restored, sr = model(x)
    loss = loss_terms(restored, sr, y, _LOSS, model.config.variant)[0]
    loss.backward()
    return loss.item()


def ablation_rows(mcfg, size: int | None = None):
    """Build every variant, count params and run one forward/backward step.

    Returns ``[(variant, params, smoke_ok, message)]``.
    """
    size = size or 2 * mcfg.shuffle
    rows = []
    for v in VARIANTS:
        try:
            model = make_variant(mcfg, v)
            n = count_params(model)
            loss = _smoke_step(model, size)
            ok = math.isfinite(loss)
            rows.append((v, n, ok, f"loss {loss:.4f}"))
        except Exception as exc:  # report every variant, keep going
            rows.append((v, None, False, f"{type(exc).__name__}: {exc}"))
    return rows


def ablation_relations(params: dict) -> list[tuple[str, bool]]:
    p = params
    return [
        ("d == full params", p["d"] == p["full"]),
        ("a == e params", p["a"] == p["e"]),
        ("a < full params", p["a"] < p["full"]),
        ("a < c < full params", p["a"] < p["c"] < p["full"]),
    ]


def format_ablation(rows) -> str:
    lines = [f"{'variant':<13} {'experiment':<24} {'params':>10} {'params (M)':>10} {'ref (M)':>9}  smoke"]
    for v, n, ok, msg in rows:
        pm = "-" if n is None else f"{n / 1e6:.4f}"
        ns = "-" if n is None else f"{n:,d}"
        lines.append(f"{v:<13} {VARIANT_LABELS[v]:<24} {ns:>10} {pm:>10} {REFERENCE_VARIANT_PARAMS[v]:>9}  "
                     f"{'ok' if ok else 'FAIL'} ({msg})")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    mcfg, _, _ = configs_from_args(args)
    rows = ablation_rows(mcfg, args.size)
    print(format_ablation(rows))
    params = {v: n for v, n, _, _ in rows}
    status = 0
    if any(n is None for n in params.values()):
        status = 1
    else:
        for label, ok in ablation_relations(params):
            print(f"{label}: {'PASS' if ok else 'FAIL'}")
            status |= 0 if ok else 1
        ours = sorted(("a", "b", "c"), key=lambda v: params[v])
        ref = sorted(("a", "b", "c"), key=lambda v: float(REFERENCE_VARIANT_PARAMS[v]))
        note = "matches" if ours == ref else "differs from"
        print(f"ordering a/b/c by params: {' < '.join(ours)} ({note} reference: {' < '.join(ref)}; reported, not gated)")
        plotting.plot_param_counts([(v, params[v], float(REFERENCE_VARIANT_PARAMS[v])) for v in VARIANTS],
                                   _mkdir(args.out) / "params.png")
    failed = [v for v, _, ok, _ in rows if not ok]
    for v in failed:
        print(f"variant {v} failed its smoke step", file=sys.stderr)
    return 1 if failed else status


def _mkdir(p: Path) -> Path:
    p.mkdir(parents=True, exist_ok=True)
    return p


def param_calibration_line(n: int) -> str:
    dev = n / (REFERENCE_PARAMS_M * 1e6) - 1.0
    flag = "within" if abs(dev) <= PARAM_CALIBRATION_TOL else "OUTSIDE"
    return (f"params: {n:,d} ({n / 1e6:.4f}M) vs published 0.7430M: {100 * dev:+.1f}% "
            f"({flag} +/-{100 * PARAM_CALIBRATION_TOL:.0f}% calibration band; non-gating)")


def flops_comparison_line(total: int) -> str:
    return (f"FLOPs @1024x1024: {total / 1e9:.2f}G (2 x MAC) = {total / 2e9:.2f} GMAC; "
            f"published {REFERENCE_FLOPS_G}G with an unstated convention (likely MACs)")


def cmd_profile(args) -> int:
    mcfg, _, _ = configs_from_args(args)
    out = _mkdir(args.out)
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--sizes must be comma-separated integers, got {args.sizes!r}")
    model = build_model(mcfg)
    n = count_params(model)
    print(param_calibration_line(n))
    (out / "params.txt").write_text(format_param_table(model, depth=2) + "\n")
    ledgers = []
    for sz in sizes:
        led = flop_ledger(mcfg, sz, sz, model)
        ledgers.append(led)
        (out / f"flops_{sz}x{sz}.txt").write_text(led.format() + "\n")
        conv = led.total_for("conv")
        print(f"FLOPs @{sz}x{sz}: {led.total:,d} ({led.total / 1e9:.3f}G; conv {conv / 1e9:.3f}G)")
        if sz == 1024:
            print(flops_comparison_line(led.total))
    base = ledgers[0].total_for("conv") if ledgers else 0
    for led in ledgers[1:]:
        ratio = led.total_for("conv") / base
        print(f"conv FLOP ratio {led.height}^2 / {ledgers[0].height}^2 = {ratio:.4f}")
    if ledgers:
        plotting.plot_flop_ledgers(ledgers, out / "flops.png")
    status = 0
    if args.runtime:
        for sz in sizes:
            try:
                prof = profile_runtime(model, sz, sz, reps=args.reps, warmup=args.warmup)
            except ProfileOOMError as exc:
                print(f"runtime @{sz}x{sz}: {exc}")
                status = 1
                continue
            print(f"runtime @{sz}x{sz}: {prof.mean_s:.4f}s +/- {prof.std_s:.4f}s over {prof.reps} reps "
                  f"[{prof.hardware}]" + (f"; published {REFERENCE_RUNTIME_S}s on a GPU (not comparable)" if sz == 1024 else ""))
    return status


@torch.no_grad()
def cmd_dump_ndp(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    model = ck.model.eval()
    x = torch.from_numpy(load_image(args.image))[None]
    record: list = []
    model(x, record=record)
    if not record:
        raise ValueError(f"variant {ck.config.variant!r} computes no prior; nothing to dump")
    out = _mkdir(args.out)
    for i, prior in enumerate(record):
        dump_ndp_maps(prior, out / f"ndp_block{i:02d}.png")
    plotting.plot_ndp_maps([prior_to_gray(p) for p in record], out / "ndp_overview.png")
    print(f"wrote {len(record)} prior maps to {out}")
    return 0


_LOSS = resolve()[2]


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, NonFiniteLossError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
