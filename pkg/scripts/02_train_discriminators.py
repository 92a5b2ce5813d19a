import os
import pathlib

from dotenv import load_dotenv

from ttp.config import DiscSection
from ttp.data import load_dataset
from ttp.weights import card_for, save_weights
from ttp.train import train_discriminator

# (tag, arch, seed offset): two convnet-a surrogates for the ensemble row, held-out victims of both families
ZOO = [
    ("convnet-a_s0", "convnet-a", 0),
    ("convnet-a_s1", "convnet-a", 1),
    ("convnet-a_s2", "convnet-a", 2),
    ("resnet-s_s0", "resnet-s", 0),
    ("resnet-s_s1", "resnet-s", 1),
]


def main() -> None:
    load_dotenv()
    root = pathlib.Path(__file__).resolve().parents[1]
    data_dir = root / "data" / "cifar-10-batches-bin"
    models_dir = root / "models" / "discriminators"
    models_dir.mkdir(parents=True, exist_ok=True)
    if not data_dir.exists():
        print("CIFAR-10 not found. Run 01_download_cifar10.py first.")
        return

    epochs = int(os.environ.get("DISC_EPOCHS", "30"))
    seed = int(os.environ.get("SEED", "0"))
    train = load_dataset(data_dir, "cifar10-bin", "train")
    test = load_dataset(data_dir, "cifar10-bin", "test")
    print(f"Loaded {len(train)} train / {len(test)} test images.")

    for tag, arch, offset in ZOO:
        out = models_dir / f"{tag}.ttpw"
        if out.exists():
            print(f"Skipping {tag}: {out} exists")
            continue
        model = train_discriminator(train, arch, DiscSection(epochs=epochs), seed=seed + offset, test_set=test)
        model.tag = tag
        save_weights(model, out, card_for(model, accuracy=model.accuracy, seed=seed + offset))
        print(f"{tag}: test accuracy {model.accuracy * 100:.2f}% -> {out}")


if __name__ == "__main__":
    main()
