import os
import pathlib
from typing import Dict, List, Optional

import pandas as pd
from dotenv import load_dotenv

from ttp.evaluate import TransferMatrix

SURROGATE = "convnet-a_s0"
ENSEMBLE = "convnet-a_s0+convnet-a_s1"


def load_frame(matrix_path: pathlib.Path) -> pd.DataFrame:
    matrix = TransferMatrix.model_validate_json(matrix_path.read_text())
    return pd.DataFrame(
        [
            {
                "method": r.method,
                "surrogate": r.surrogate_tag,
                "victim": r.victim_tag,
                "defense": r.defense_tag,
                "white_box": r.white_box,
                "acc": r.mean_target_accuracy,
            }
            for r in matrix.reports
        ]
    )


def cell(df: pd.DataFrame, method: str, victim: str, surrogate: str = SURROGATE, defense: str = "none") -> Optional[float]:
    hit = df[(df.method == method) & (df.victim == victim) & (df.surrogate == surrogate) & (df.defense == defense)]
    return float(hit.acc.iloc[0]) if len(hit) else None


def check_seed(df: pd.DataFrame, victim: str) -> Dict[str, Optional[bool]]:
    full, dist, ce = (cell(df, m, victim) for m in ("ttp-full", "ttp-dist", "ttp-ce"))
    pgd, control = cell(df, "pgd", victim), cell(df, "control", victim)
    early = cell(df, "ttp-full-e1", victim)
    ens = cell(df, "ttp-full", victim, surrogate=ENSEMBLE)
    blurred = cell(df, "ttp-full", victim, defense="median-blur")
    first_blur_eps = os.environ.get("BLUR_EPS", "32").split(",")[0]
    wide_eps = f"{float(first_blur_eps):g}"
    wide = cell(df, f"ttp-full-eps{wide_eps}", victim)
    wide_blurred = cell(df, f"ttp-full-eps{wide_eps}", victim, defense="median-blur")

    def known(*xs) -> bool:
        return all(x is not None for x in xs)

    out: Dict[str, Optional[bool]] = {}
    out["ordering"] = (
        full > dist > ce > pgd > control and full >= 2 * pgd and full >= 1.2 * ce
        if known(full, dist, ce, pgd, control)
        else None
    )
    out["rapid convergence"] = early > ce if known(early, ce) else None
    out["ensemble gain"] = ens >= full if known(ens, full) else None
    out["median blur"] = full > blurred > control if known(full, blurred, control) else None
    out[f"median blur eps{wide_eps}"] = wide > wide_blurred > control if known(wide, wide_blurred, control) else None

    gens = df[df.method.str.startswith("ttp") & (df.defense == "none")]
    white_box_ok = None
    for (method, surrogate), grp in gens.groupby(["method", "surrogate"]):
        wb, bb = grp[grp.white_box].acc, grp[~grp.white_box].acc
        if len(wb) and len(bb):
            white_box_ok = bool(white_box_ok is not False and wb.min() > bb.max())
    out["white-box dominance"] = white_box_ok
    return out


def main() -> None:
    load_dotenv()
    root = pathlib.Path(__file__).resolve().parents[1]
    victim = os.environ.get("VICTIM", "resnet-s_s0")
    matrices = sorted((root / "reports").glob("seed*/matrix.json"))
    if not matrices:
        print("No transfer matrices found. Run 04_evaluate_transfer.py for each seed first.")
        return
    print(f"Loaded {len(matrices)} seed(s); black-box victim {victim}.")

    results: Dict[str, List[Optional[bool]]] = {}
    table = []
    for path in matrices:
        df = load_frame(path)
        seed = path.parent.name
        for name, ok in check_seed(df, victim).items():
            results.setdefault(name, []).append(ok)
        bb = df[(df.victim == victim) & (df.defense == "none")]
        table.append(bb.set_index(["method", "surrogate"]).acc.rename(seed))

    def pct(v: float) -> float:
        return v * 100

    print("\nMean black-box target accuracy (%):")
    print(pd.concat(table, axis=1).apply(pct).round(2).to_markdown())

    print("\nResults:")
    need = (2 * len(matrices) + 2) // 3
    for name, oks in results.items():
        passed = sum(1 for ok in oks if ok)
        measured = sum(1 for ok in oks if ok is not None)
        verdict = "SKIP" if measured == 0 else ("PASS" if passed >= need else "FAIL")
        print(f"{name:<20}: {passed}/{measured} seeds ({verdict})")


if __name__ == "__main__":
    main()
