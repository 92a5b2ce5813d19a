import os
import pathlib

from dotenv import load_dotenv

from ttp.config import RunConfig, TrainSection
from ttp.data import load_dataset, make_streams
from ttp.models import DiscriminatorEnsemble
from ttp.train import ablation_configs, generator_card, train_generator
from ttp.weights import load_weights, save_weights

# surrogate rows: single members plus the same-family ensemble
SURROGATES = {
    "convnet-a_s0": ["convnet-a_s0"],
    "convnet-a_s0+convnet-a_s1": ["convnet-a_s0", "convnet-a_s1"],
}


def main() -> None:
    load_dotenv()
    root = pathlib.Path(__file__).resolve().parents[1]
    data_dir = root / "data" / "cifar-10-batches-bin"
    disc_dir = root / "models" / "discriminators"
    targets = [int(t) for t in os.environ.get("TARGETS", "0,3,8").split(",")]
    eps = float(os.environ.get("EPS", "16"))
    epochs = int(os.environ.get("GEN_EPOCHS", "20"))
    seed = int(os.environ.get("SEED", "0"))
    ablation = os.environ.get("ABLATION", "1") == "1"
    # extra budgets for the median-blur comparison; only the full variant is trained at these
    blur_eps = [float(e) for e in os.environ.get("BLUR_EPS", "32").split(",") if e.strip()]
    gen_dir = root / "models" / f"generators_seed{seed}"
    telemetry_dir = root / "reports" / f"seed{seed}" / "telemetry"
    gen_dir.mkdir(parents=True, exist_ok=True)
    telemetry_dir.mkdir(parents=True, exist_ok=True)

    train = load_dataset(data_dir, "cifar10-bin", "train")
    cfg = RunConfig.model_validate(
        {"seed": seed, "budget": {"eps": eps}, "train": TrainSection(epochs=epochs).model_dump()}
    )

    for row, members in SURROGATES.items():
        paths = [disc_dir / f"{m}.ttpw" for m in members]
        if not all(p.exists() for p in paths):
            print(f"Skipping {row}: train discriminators first (02_train_discriminators.py)")
            continue
        ensemble = DiscriminatorEnsemble([load_weights(p) for p in paths]).freeze()
        for t in targets:
            base = cfg.train_config(t, [str(p) for p in paths])
            variants = ablation_configs(base) if ablation and len(members) == 1 else {"full": base}
            jobs = [(name, config) for name, config in variants.items()]
            jobs += [("full", base.model_copy(update={"eps": e})) for e in blur_eps if e != eps]
            for name, config in jobs:
                out = gen_dir / name / f"gen_t{t}_eps{config.eps:g}_{row}.ttpw"
                if out.exists():
                    print(f"Skipping {out.name} ({name}): exists")
                    continue
                source, target = make_streams(
                    train, t, config.batch_size, config.seed, config.augment if config.needs_augmented else None,
                    source_classes=config.source_classes,
                )
                run = train_generator(
                    config,
                    ensemble,
                    source,
                    target,
                    telemetry_path=telemetry_dir / f"{name}_t{t}_eps{config.eps:g}_{row}.jsonl",
                    checkpoint_dir=gen_dir / name / "checkpoints" if name == "full" else None,
                )
                save_weights(run.generator, out, generator_card(run.generator, config, ensemble.tag, config.epochs))
                means = run.epoch_means()
                first, last = means[min(means)], means[max(means)]
                print(f"{row} t={t} eps={config.eps:g} {name}: epoch-1 mean {first:.4f} -> epoch-{max(means) + 1} mean {last:.4f}")


if __name__ == "__main__":
    main()
