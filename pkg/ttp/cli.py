"""`python -m ttp <subcommand>`: train-disc, train-gen, attack, eval, baseline, report, gradcheck.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

import argparse
import glob
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import torch
from dotenv import load_dotenv
from pydantic import ValidationError
from torchvision.utils import save_image

from ttp import __version__
from ttp.attacks import craft
from ttp.config import RunConfig, load_run_config, parse_override
from ttp.data import load_dataset, make_streams
from ttp.errors import TTPError, UsageError
from ttp.evaluate import TaggedGenerator, TransferMatrix, evaluate_baseline, evaluate_transfer
from ttp.gradcheck import run_gradcheck
from ttp.models import DiscriminatorEnsemble
from ttp.projection import Budget, SmoothingKernel
from ttp.train import generator_card, train_discriminator, train_generator
from ttp.weights import card_for, load_weights, save_weights, write_tensors

log = logging.getLogger("ttp.cli")

LOG_FORMAT = "ts=%(asctime)s level=%(levelname)s logger=%(name)s %(message)s"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit with 2
        raise UsageError(message)


def _int_list(raw: str) -> List[int]:
    try:
        return [int(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {raw!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="ttp", description="Generative targeted transferable perturbations at desk scale.")
    ap.add_argument("--version", action="version", version=f"ttp {__version__}")
    ap.add_argument("--seed", type=int, default=None, help="Root 64-bit seed (overrides the config file).")
    ap.add_argument("--config", type=Path, default=None, help="TOML file with dotted RunConfig keys.")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def data_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("--data", type=Path, required=True, help="Dataset directory or file.")
        p.add_argument("--format", default="cifar10-bin", choices=["cifar10-bin", "idx"])

    p = sub.add_parser("train-disc", help="Train a surrogate / victim classifier.")
    p.add_argument("--arch", required=True, choices=["convnet-a", "resnet-s", "toy"])
    data_args(p)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--min-accuracy", type=float, default=None)
    p.add_argument("--no-gate", action="store_true", help="Skip the test-accuracy gate.")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train-gen", help="Train one generator for a (surrogate set, target class) pair.")
    p.add_argument("--disc", required=True, help="FILE[,FILE...]; several files form an ensemble.")
    data_args(p)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--eps", type=float, default=None, help="Budget on the 0-255 scale.")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--loss", choices=["ttp", "ce"], default=None)
    p.add_argument("--no-aug", action="store_true")
    p.add_argument("--no-sim", action="store_true")
    p.add_argument("--no-smooth", action="store_true")
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--source-classes", type=_int_list, default=None, help="Non-target classes to train on.")
    p.add_argument("--telemetry", type=Path, default=None, help="Per-step JSONL loss records.")
    p.add_argument("--checkpoint-dir", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("attack", help="Craft adversaries for a test split with a trained generator.")
    p.add_argument("--gen", type=Path, required=True)
    data_args(p)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="Top-1 target accuracy of generators against a victim.")
    p.add_argument("--gens", nargs="+", required=True, help="Generator files or glob patterns.")
    p.add_argument("--victim", type=Path, required=True)
    data_args(p)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--defense", choices=["identity", "median-blur"], default=None)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--source-classes", type=_int_list, default=None)
    p.add_argument("--report", type=Path, required=True)

    p = sub.add_parser("baseline", help="Targeted PGD / MIM transfer baseline.")
    p.add_argument("--method", choices=["pgd", "mim"], default=None)
    p.add_argument("--surrogate", type=Path, required=True)
    p.add_argument("--victim", type=Path, required=True)
    data_args(p)
    p.add_argument("--targets", type=_int_list, required=True)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None, help="Step size on the 0-255 scale.")
    p.add_argument("--defense", choices=["identity", "median-blur"], default=None)
    p.add_argument("--report", type=Path, required=True)

    p = sub.add_parser("report", help="Merge TransferReport files into the surrogate x victim grid.")
    p.add_argument("reports", nargs="+", type=Path)
    p.add_argument("--out", type=Path, required=True, help="Matrix JSON; the CSV lands next to it.")
    p.add_argument("--csv", type=Path, default=None)

    p = sub.add_parser("gradcheck", help="Finite-difference check of the generator loss gradient.")
    p.add_argument("--probes", type=int, default=100)
    p.add_argument("--step", type=float, default=1e-4)
    return ap


# flag name -> dotted RunConfig key, per subcommand
_FLAG_KEYS: Dict[str, Dict[str, str]] = {
    "train-disc": {"epochs": "disc.epochs", "min_accuracy": "disc.min_accuracy"},
    "train-gen": {
        "eps": "budget.eps",
        "epochs": "train.epochs",
        "loss": "loss.objective",
        "max_steps": "train.max_steps",
        "source_classes": "train.source_classes",
    },
    "attack": {"eps": "budget.eps"},
    "eval": {"eps": "budget.eps", "defense": "eval.defense", "window": "eval.window", "source_classes": "eval.source_classes"},
    "baseline": {
        "eps": "budget.eps",
        "method": "baseline.method",
        "steps": "baseline.steps",
        "alpha": "baseline.alpha",
        "defense": "eval.defense",
    },
}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults < --config file < --set overrides < explicit flags."""
    overrides: Dict[str, Any] = {}
    for item in args.overrides:
        try:
            key, value = parse_override(item)
        except ValueError as e:
            raise UsageError(str(e)) from e
        overrides[key] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    for flag, key in _FLAG_KEYS.get(args.command, {}).items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if args.command == "train-gen":
        if args.no_aug:
            overrides["loss.use_aug"] = False
        if args.no_sim:
            overrides["loss.use_sim"] = False
        if args.no_smooth:
            overrides["train.smooth"] = False
    if args.config is not None and not args.config.exists():
        raise UsageError(f"config file {args.config} does not exist")
    return load_run_config(args.config, overrides)


def _configure_logging(verbose: int) -> None:
    level = logging.DEBUG if verbose > 1 else logging.INFO if verbose == 1 else logging.WARNING
    logging.basicConfig(stream=sys.stderr, level=level, format=LOG_FORMAT, force=True)


def _configure_threads() -> None:
    raw = os.environ.get("TTP_THREADS")
    if raw:
        try:
            threads = int(raw)
        except ValueError:
            raise UsageError(f"TTP_THREADS must be an integer, got {raw!r}") from None
        if threads < 1:
            raise UsageError(f"TTP_THREADS must be >= 1, got {threads}")
        torch.set_num_threads(threads)


def _prefetch_depth() -> int:
    return 2 if int(os.environ.get("TTP_THREADS", "1")) > 1 else 0


def cmd_train_disc(args: argparse.Namespace, cfg: RunConfig) -> int:
    train = load_dataset(args.data, args.format, "train")
    test = None if args.no_gate else load_dataset(args.data, args.format, "test")
    model = train_discriminator(
        train, args.arch, cfg.disc, seed=cfg.seed, test_set=test, min_accuracy=cfg.disc.min_accuracy
    )
    model.tag = args.out.stem
    save_weights(model, args.out, card_for(model, accuracy=getattr(model, "accuracy", None), seed=cfg.seed))
    acc = getattr(model, "accuracy", None)
    print(f"Wrote {args.out}" + (f" (test accuracy {acc * 100:.2f}%)" if acc is not None else ""))
    return 0


def cmd_train_gen(args: argparse.Namespace, cfg: RunConfig) -> int:
    paths = [Path(p) for p in args.disc.split(",") if p]
    ensemble = DiscriminatorEnsemble([load_weights(p) for p in paths]).freeze()
    config = cfg.train_config(args.target, [str(p) for p in paths])
    data = load_dataset(args.data, args.format, "train")
    source, target = make_streams(
        data,
        config.target_class,
        config.batch_size,
        config.seed,
        augment=config.augment if config.needs_augmented else None,
        source_classes=config.source_classes,
    )
    run = train_generator(
        config,
        ensemble,
        source,
        target,
        telemetry_path=args.telemetry,
        checkpoint_dir=args.checkpoint_dir,
        prefetch_depth=_prefetch_depth(),
    )
    save_weights(run.generator, args.out, generator_card(run.generator, config, ensemble.tag, config.epochs))
    print(f"Wrote {args.out} ({len(run.telemetry)} steps, config {cfg.fingerprint()})")
    return 0


def _generator_budget(gens: Sequence[TaggedGenerator], cfg: RunConfig) -> Budget:
    """Explicit eps (flag, --set or config file) first, else the eps the generators were trained at."""
    if "eps" in cfg.budget.model_fields_set:
        return Budget.from_pixels(cfg.budget.eps)
    trained = {g.generator.card.eps for g in gens if getattr(g.generator, "card", None) is not None}
    trained.discard(None)
    if len(trained) > 1:
        raise UsageError(f"generators were trained at different budgets {sorted(trained)}; pass --eps")
    eps = trained.pop() if trained else cfg.budget.eps
    return Budget.from_pixels(eps)


def cmd_attack(args: argparse.Namespace, cfg: RunConfig) -> int:
    tagged = TaggedGenerator.from_file(args.gen)
    budget = _generator_budget([tagged], cfg)
    data = load_dataset(args.data, args.format, "test")
    keep = (data.labels != tagged.target_class).nonzero(as_tuple=True)[0]
    if args.limit is not None:
        keep = keep[: args.limit]
    images, labels = data.images[keep], data.labels[keep]
    kernel = SmoothingKernel() if tagged.smooth else None
    batch = cfg.eval.batch_size
    adv = torch.cat(
        [craft(tagged.generator, images[i : i + batch], budget, kernel).images for i in range(0, len(images), batch)]
    ) if len(images) else images.clone()

    args.out.mkdir(parents=True, exist_ok=True)
    tensors = {"images": adv, "anchors": images, "labels": labels.to(torch.float32)}
    write_tensors(args.out / "adversaries.ttpw", tensors)
    if len(adv):
        preview = torch.cat([images[:8], adv[:8]])
        save_image(preview, args.out / "preview.png", nrow=min(8, len(adv)))
    print(f"Wrote {len(adv)} adversaries for target {tagged.target_class} to {args.out}")
    return 0


def _expand(patterns: Sequence[str]) -> List[Path]:
    paths: List[Path] = []
    for pattern in patterns:
        matches = sorted(glob.glob(pattern)) if glob.has_magic(pattern) else [pattern]
        paths.extend(Path(m) for m in matches if not m.endswith(".json"))
    if not paths:
        raise UsageError(f"no generator files match {list(patterns)}")
    return paths


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> int:
    gens = [TaggedGenerator.from_file(p) for p in _expand(args.gens)]
    victim = load_weights(args.victim)
    data = load_dataset(args.data, args.format, "test")
    report = evaluate_transfer(
        gens,
        victim,
        data,
        _generator_budget(gens, cfg),
        defense=cfg.eval.defense,
        window=cfg.eval.window,
        batch_size=cfg.eval.batch_size,
        source_classes=cfg.eval.source_classes,
        config_hash=cfg.fingerprint(),
        progress=True,
    )
    report.write(args.report)
    _print_report(report)
    return 0


def cmd_baseline(args: argparse.Namespace, cfg: RunConfig) -> int:
    surrogate = load_weights(args.surrogate)
    victim = load_weights(args.victim)
    data = load_dataset(args.data, args.format, "test")
    report = evaluate_baseline(
        cfg.baseline.method,
        surrogate,
        victim,
        data,
        args.targets,
        Budget.from_pixels(cfg.budget.eps),
        steps=cfg.baseline.steps,
        alpha=cfg.baseline.alpha / 255.0,
        mu=cfg.baseline.mu,
        defense=cfg.eval.defense,
        window=cfg.eval.window,
        batch_size=cfg.eval.batch_size,
        source_classes=cfg.eval.source_classes,
        config_hash=cfg.fingerprint(),
        progress=True,
    )
    report.write(args.report)
    _print_report(report)
    return 0


def _print_report(report) -> None:
    flag = " (white-box)" if report.white_box else ""
    print(f"{report.method}: {report.surrogate_tag} -> {report.victim_tag}{flag}, eps={report.epsilon * 255:g}")
    for t, acc in sorted(report.per_target.items()):
        print(f"  target {t}: {acc * 100:.2f}% of {report.per_target_counts[t]}")
    print(f"  mean target accuracy: {report.mean_target_accuracy * 100:.2f}%")


def cmd_report(args: argparse.Namespace, cfg: RunConfig) -> int:
    matrix = TransferMatrix.read(args.reports)
    matrix.write(args.out, args.csv)
    print(matrix.to_markdown())
    bb = matrix.black_box_mean()
    print(f"\nblack-box mean: {bb * 100:.2f}%" if bb is not None else "\nblack-box mean: n/a (white-box entries only)")
    return 0


def cmd_gradcheck(args: argparse.Namespace, cfg: RunConfig) -> int:
    result = run_gradcheck(cfg.seed, probes=args.probes, step=args.step)
    print(f"max rel. err = {result.max_rel_err:.3e} ({result.probes} probes, {result.skipped} redrawn)")
    return 0 if result.passed else 2


COMMANDS = {
    "train-disc": cmd_train_disc,
    "train-gen": cmd_train_gen,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "report": cmd_report,
    "gradcheck": cmd_gradcheck,
}


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"ttp: error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)

    _configure_logging(args.verbose)
    try:
        _configure_threads()
        cfg = resolve_config(args)
    except (UsageError, ValidationError, ValueError) as e:  # ValueError covers malformed TOML
        log.error("event=failure error=%s detail=%s", type(e).__name__, str(e).replace("\n", " "))
        return 1

    log.info("event=start command=%s seed=%d config=%s", args.command, cfg.seed, cfg.fingerprint())
    try:
        return COMMANDS[args.command](args, cfg)
    except UsageError as e:
        log.error("event=failure error=%s detail=%s", type(e).__name__, e)
        return 1
    except (TTPError, ValueError, RuntimeError, OSError) as e:
        log.error("event=failure error=%s detail=%s", type(e).__name__, e)
        return 2
