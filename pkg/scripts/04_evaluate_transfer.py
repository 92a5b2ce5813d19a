import os
import pathlib

import torch
from dotenv import load_dotenv

from ttp.data import load_dataset
from ttp.evaluate import TaggedGenerator, TransferMatrix, evaluate_baseline, evaluate_transfer
from ttp.models import build_generator
from ttp.projection import Budget
from ttp.seeding import derive_seed
from ttp.train import checkpoint_name
from ttp.weights import load_weights

ROWS = ["convnet-a_s0", "convnet-a_s0+convnet-a_s1"]
BASELINE_SURROGATE = "convnet-a_s0"


def main() -> None:
    load_dotenv()
    root = pathlib.Path(__file__).resolve().parents[1]
    data_dir = root / "data" / "cifar-10-batches-bin"
    disc_dir = root / "models" / "discriminators"
    targets = [int(t) for t in os.environ.get("TARGETS", "0,3,8").split(",")]
    eps = float(os.environ.get("EPS", "16"))
    seed = int(os.environ.get("SEED", "0"))
    pgd_steps = int(os.environ.get("PGD_STEPS", "100"))
    blur_eps = [float(e) for e in os.environ.get("BLUR_EPS", "32").split(",") if e.strip()]
    gen_dir = root / "models" / f"generators_seed{seed}"
    out_dir = root / "reports" / f"seed{seed}"
    out_dir.mkdir(parents=True, exist_ok=True)
    if not gen_dir.exists():
        print("Generators not found. Run 03_train_generators.py first.")
        return

    test = load_dataset(data_dir, "cifar10-bin", "test")
    victims = [load_weights(p) for p in sorted(disc_dir.glob("*.ttpw"))]
    budget = Budget.from_pixels(eps)
    print(f"Loaded {len(test)} test images, {len(victims)} victims: {[v.tag for v in victims]}")

    reports = []

    def record(report, method: str):
        report = report.model_copy(update={"method": method})
        name = f"{method}__{report.surrogate_tag}__{report.victim_tag}__{report.defense_tag}.json"
        report.write(out_dir / name)
        reports.append(report)
        print(f"{method:>16} {report.surrogate_tag:>26} -> {report.victim_tag:<14} [{report.defense_tag}] "
              f"{report.mean_target_accuracy * 100:6.2f}%{' *' if report.white_box else ''}")

    for variant_dir in sorted(p for p in gen_dir.iterdir() if p.is_dir()):
        variant = variant_dir.name
        for row in ROWS:
            paths = [variant_dir / f"gen_t{t}_eps{eps:g}_{row}.ttpw" for t in targets]
            if not all(p.exists() for p in paths):
                continue
            gens = [TaggedGenerator.from_file(p) for p in paths]
            for victim in victims:
                record(evaluate_transfer(gens, victim, test, budget), f"ttp-{variant}")
                if variant == "full":
                    record(evaluate_transfer(gens, victim, test, budget, defense="median-blur"), "ttp-full")
            first = [variant_dir / "checkpoints" / checkpoint_name(t, eps, row, 1) for t in targets]
            if variant == "full" and all(p.exists() for p in first):
                early = [TaggedGenerator.from_file(p) for p in first]
                for victim in victims:
                    record(evaluate_transfer(early, victim, test, budget), "ttp-full-e1")
            if variant != "full":
                continue
            # the same full generator trained at a larger budget, with and without median blur
            for wide_eps in blur_eps:
                wide = [variant_dir / f"gen_t{t}_eps{wide_eps:g}_{row}.ttpw" for t in targets]
                if wide_eps == eps or not all(p.exists() for p in wide):
                    continue
                wide_gens = [TaggedGenerator.from_file(p) for p in wide]
                for victim in victims:
                    for defense in (None, "median-blur"):
                        report = evaluate_transfer(wide_gens, victim, test, Budget.from_pixels(wide_eps), defense=defense)
                        record(report, f"ttp-full-eps{wide_eps:g}")

    # untrained-generator control, same architecture as the trained ones
    control = []
    for t in targets:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(seed, "control", t))
            control.append(TaggedGenerator(build_generator("resnet", 3).eval(), t, BASELINE_SURROGATE))
    surrogate_path = disc_dir / f"{BASELINE_SURROGATE}.ttpw"
    surrogate = load_weights(surrogate_path) if surrogate_path.exists() else None
    for victim in victims:
        record(evaluate_transfer(control, victim, test, budget), "control")
        if surrogate is not None:
            record(evaluate_baseline("pgd", surrogate, victim, test, targets, budget, steps=pgd_steps), "pgd")

    matrix = TransferMatrix.from_reports(reports)
    matrix.write(out_dir / "matrix.json")
    print()
    print(matrix.to_markdown())
    bb = matrix.black_box_mean()
    if bb is not None:
        print(f"\nBlack-box mean over all rows: {bb * 100:.2f}%")


if __name__ == "__main__":
    main()
