import pathlib
import shutil
import tarfile

import requests
from tqdm import tqdm

URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"
FILES = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin", "batches.meta.txt"]


def main() -> None:
    data_dir = pathlib.Path(__file__).resolve().parents[1] / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    out_dir = data_dir / "cifar-10-batches-bin"
    if all((out_dir / f).exists() for f in FILES):
        print(f"CIFAR-10 already present at: {out_dir}")
        return

    archive = data_dir / "cifar-10-binary.tar.gz"
    if not archive.exists():
        print(f"Downloading {URL} ...")
        with requests.get(URL, timeout=60, stream=True) as r:
            r.raise_for_status()
            total = int(r.headers.get("content-length", 0)) or None
            with open(archive, "wb") as f, tqdm(total=total, unit="B", unit_scale=True, desc="cifar-10") as bar:
                for chunk in r.iter_content(chunk_size=1 << 20):
                    f.write(chunk)
                    bar.update(len(chunk))
        print(f"Downloaded: {archive}")

    with tarfile.open(archive, "r:gz") as tar:
        for member in tar.getmembers():
            name = pathlib.Path(member.name).name
            if name not in FILES:
                continue
            out_dir.mkdir(parents=True, exist_ok=True)
            with tar.extractfile(member) as src, open(out_dir / name, "wb") as dst:
                shutil.copyfileobj(src, dst)
            print(f"Extracted: {out_dir / name}")

    missing = [f for f in FILES if not (out_dir / f).exists()]
    if missing:
        raise RuntimeError(f"archive did not contain {missing}")
    print(f"\nCIFAR-10 binary batches ready at: {out_dir}")


if __name__ == "__main__":
    main()
