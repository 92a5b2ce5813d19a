"""Top-1 target-accuracy transfer reports and the surrogate x victim grid."""

import logging
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import pandas as pd
import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tqdm import tqdm

from ttp import __version__
from ttp.attacks import AdversarialBatch, craft, make_defense, mim_targeted, pgd_targeted, predict
from ttp.data import LabeledImageSet
from ttp.errors import IoFailure, MissingTargetTag
from ttp.models import Discriminator
from ttp.projection import Budget, SmoothingKernel
from ttp.train import parse_checkpoint_name
from ttp.weights import load_weights

log = logging.getLogger(__name__)


def _git_revision() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def fingerprint(config_hash: Optional[str] = None) -> Dict[str, str]:
    return {"version": __version__, "git": _git_revision(), "config": config_hash or ""}


class TransferReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    per_target: Dict[int, float]
    per_target_counts: Dict[int, int]
    mean_target_accuracy: float = Field(..., ge=0.0, le=1.0)
    victim_tag: str
    surrogate_tag: str
    epsilon: float = Field(..., ge=0.0, le=1.0)
    defense_tag: str = "none"
    sample_count: int = Field(..., ge=0)
    white_box: bool = False
    method: str = "generator"
    fingerprint: Dict[str, str] = {}

    @model_validator(mode="after")
    def _consistent(self) -> "TransferReport":
        if set(self.per_target) != set(self.per_target_counts):
            raise ValueError("per_target and per_target_counts cover different targets")
        for t, acc in self.per_target.items():
            if not 0.0 <= acc <= 1.0:
                raise ValueError(f"target {t} accuracy {acc} outside [0, 1]")
        if self.per_target:
            mean = sum(self.per_target.values()) / len(self.per_target)
            if abs(mean - self.mean_target_accuracy) > 1e-9:
                raise ValueError(f"mean_target_accuracy {self.mean_target_accuracy} != mean of per_target {mean}")
        if self.sample_count != sum(self.per_target_counts.values()):
            raise ValueError("sample_count must equal the sum of per_target_counts")
        return self

    def write(self, path: Path) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(self.model_dump_json(indent=2))
        except OSError as e:
            raise IoFailure(f"cannot write report {path}: {e}") from e
        return path

    @classmethod
    def read(cls, path: Path) -> "TransferReport":
        try:
            return cls.model_validate_json(Path(path).read_text())
        except OSError as e:
            raise IoFailure(f"cannot read report {path}: {e}") from e


@dataclass
class TaggedGenerator:
    generator: nn.Module
    target_class: Optional[int]
    surrogate_tag: str = ""
    smooth: bool = True

    @classmethod
    def from_file(cls, path: Path) -> "TaggedGenerator":
        """Target class from the model card, falling back to the checkpoint filename."""
        gen = load_weights(path)
        card = gen.card
        target = card.target_class
        surrogate = card.tag or "+".join(card.surrogates)
        if target is None or not surrogate:
            parsed = parse_checkpoint_name(Path(path).name)
            target = parsed["target_class"] if target is None else target
            surrogate = surrogate or parsed["surrogate"]
        return cls(gen, target, surrogate, card.smooth)


def _pool(dataset: LabeledImageSet, target_class: int, source_classes: Optional[Sequence[int]]) -> torch.Tensor:
    keep = dataset.labels != target_class
    if source_classes is not None:
        keep &= torch.isin(dataset.labels, torch.tensor(list(source_classes), dtype=torch.long))
    return keep.nonzero(as_tuple=True)[0]


def _score_target(
    attack: Callable[[torch.Tensor], AdversarialBatch],
    victim: nn.Module,
    images: torch.Tensor,
    target_class: int,
    batch_size: int,
    defense: Callable[[torch.Tensor], torch.Tensor],
) -> int:
    hits = 0
    for i in range(0, len(images), batch_size):
        adv = attack(images[i : i + batch_size])
        preds = predict(victim, adv.images, batch_size, defense)
        hits += int((preds == target_class).sum())
    return hits


def _report(
    hits: Mapping[int, int],
    counts: Mapping[int, int],
    victim: nn.Module,
    surrogate_tag: str,
    budget: Budget,
    defense: Optional[str],
    method: str,
    config_hash: Optional[str],
) -> TransferReport:
    per_target = {t: (hits[t] / counts[t] if counts[t] else 0.0) for t in counts}
    victim_tag = getattr(victim, "tag", type(victim).__name__)
    white_box = victim_tag in surrogate_tag.split("+")
    report = TransferReport(
        per_target=per_target,
        per_target_counts=dict(counts),
        mean_target_accuracy=sum(per_target.values()) / len(per_target),
        victim_tag=victim_tag,
        surrogate_tag=surrogate_tag,
        epsilon=budget.epsilon,
        defense_tag=defense or "none",
        sample_count=sum(counts.values()),
        white_box=white_box,
        method=method,
        fingerprint=fingerprint(config_hash),
    )
    log.info(
        "event=transfer_report method=%s surrogate=%s victim=%s eps=%g defense=%s mean_target_accuracy=%.4f white_box=%s",
        method, surrogate_tag, victim_tag, budget.pixels, report.defense_tag, report.mean_target_accuracy, white_box,
    )
    return report


def evaluate_transfer(
    gens: Sequence[TaggedGenerator],
    victim: nn.Module,
    dataset: LabeledImageSet,
    budget: Budget,
    defense: Optional[str] = None,
    window: int = 5,
    batch_size: int = 256,
    source_classes: Optional[Sequence[int]] = None,
    config_hash: Optional[str] = None,
    progress: bool = False,
) -> TransferReport:
    """For each target t: perturb every test image whose label is not t, classify, count hits on t."""
    if not gens:
        raise ValueError("evaluate_transfer needs at least one generator")
    seen = set()
    for g in gens:
        if g.target_class is None:
            raise MissingTargetTag("every generator must be tagged with its target class")
        if g.target_class in seen:
            raise ValueError(f"two generators claim target class {g.target_class}")
        if not 0 <= g.target_class < dataset.num_classes:
            raise MissingTargetTag(f"target class {g.target_class} outside [0, {dataset.num_classes})")
        seen.add(g.target_class)

    defense_fn = make_defense(defense, window)
    surrogate_tag = "+".join(dict.fromkeys(m for g in gens for m in g.surrogate_tag.split("+") if m))
    hits: Dict[int, int] = {}
    counts: Dict[int, int] = {}
    for g in tqdm(gens, desc=f"eval {getattr(victim, 'tag', 'victim')}", disable=not progress):
        t = g.target_class
        kernel = SmoothingKernel() if g.smooth else None
        images = dataset.images[_pool(dataset, t, source_classes)]
        counts[t] = len(images)
        hits[t] = _score_target(
            lambda x: craft(g.generator, x, budget, kernel, g.surrogate_tag, t),
            victim,
            images,
            t,
            batch_size,
            defense_fn,
        )
    return _report(hits, counts, victim, surrogate_tag, budget, defense, "generator", config_hash)


def evaluate_baseline(
    method: str,
    surrogate: Discriminator,
    victim: nn.Module,
    dataset: LabeledImageSet,
    targets: Sequence[int],
    budget: Budget,
    steps: int = 100,
    alpha: float = 2 / 255,
    mu: float = 1.0,
    defense: Optional[str] = None,
    window: int = 5,
    batch_size: int = 256,
    source_classes: Optional[Sequence[int]] = None,
    config_hash: Optional[str] = None,
    progress: bool = False,
) -> TransferReport:
    """Same protocol as evaluate_transfer with targeted PGD or MIM as the adversary."""
    if method not in ("pgd", "mim"):
        raise ValueError(f"unknown baseline {method!r}; expected pgd or mim")
    if not targets:
        raise ValueError("evaluate_baseline needs at least one target class")
    for t in targets:
        if not 0 <= t < dataset.num_classes:
            raise MissingTargetTag(f"target class {t} outside [0, {dataset.num_classes})")

    def attack_for(t: int) -> Callable[[torch.Tensor], AdversarialBatch]:
        if method == "pgd":
            return lambda x: pgd_targeted(surrogate, x, t, budget, steps, alpha, surrogate.tag)
        return lambda x: mim_targeted(surrogate, x, t, budget, steps, alpha, mu, surrogate.tag)

    defense_fn = make_defense(defense, window)
    hits: Dict[int, int] = {}
    counts: Dict[int, int] = {}
    for t in tqdm(list(dict.fromkeys(targets)), desc=f"{method} -> {getattr(victim, 'tag', 'victim')}", disable=not progress):
        images = dataset.images[_pool(dataset, t, source_classes)]
        counts[t] = len(images)
        hits[t] = _score_target(attack_for(t), victim, images, t, batch_size, defense_fn)
    return _report(hits, counts, victim, surrogate.tag, budget, defense, method, config_hash)


class TransferMatrix(BaseModel):
    """Surrogate x victim grid of TransferReports."""

    model_config = ConfigDict(extra="forbid")

    reports: List[TransferReport]

    @classmethod
    def from_reports(cls, reports: Sequence[TransferReport]) -> "TransferMatrix":
        keys = [(r.surrogate_tag, r.victim_tag, r.method, r.defense_tag) for r in reports]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (surrogate, victim, method, defense) entries in the transfer matrix")
        return cls(reports=list(reports))

    @classmethod
    def read(cls, paths: Sequence[Path]) -> "TransferMatrix":
        return cls.from_reports([TransferReport.read(p) for p in paths])

    @property
    def surrogates(self) -> List[str]:
        return list(dict.fromkeys(r.surrogate_tag for r in self.reports))

    @property
    def victims(self) -> List[str]:
        return list(dict.fromkeys(r.victim_tag for r in self.reports))

    def cell(self, surrogate: str, victim: str, method: str = "generator", defense: str = "none") -> TransferReport:
        for r in self.reports:
            if (r.surrogate_tag, r.victim_tag, r.method, r.defense_tag) == (surrogate, victim, method, defense):
                return r
        raise KeyError((surrogate, victim, method, defense))

    def black_box_mean(self) -> Optional[float]:
        """Mean target accuracy over black-box cells only; white-box entries never count."""
        values = [r.mean_target_accuracy for r in self.reports if not r.white_box]
        return sum(values) / len(values) if values else None

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {
                "surrogate": r.surrogate_tag + ("" if r.method == "generator" else f" [{r.method}]"),
                "victim": r.victim_tag + ("*" if r.white_box else ""),
                "defense": r.defense_tag,
                "mean_target_accuracy": r.mean_target_accuracy,
            }
            for r in self.reports
        ]
        df = pd.DataFrame(rows, columns=["surrogate", "victim", "defense", "mean_target_accuracy"])
        return df.pivot_table(
            index=["surrogate", "defense"], columns="victim", values="mean_target_accuracy", aggfunc="first", sort=False
        )

    def to_markdown(self) -> str:
        return (self.to_frame() * 100).round(2).to_markdown()

    def write(self, json_path: Path, csv_path: Optional[Path] = None) -> None:
        json_path = Path(json_path)
        csv_path = Path(csv_path) if csv_path else json_path.with_suffix(".csv")
        try:
            json_path.parent.mkdir(parents=True, exist_ok=True)
            json_path.write_text(self.model_dump_json(indent=2))
            self.to_frame().to_csv(csv_path)
        except OSError as e:
            raise IoFailure(f"cannot write transfer matrix: {e}") from e
        log.info("event=matrix_written json=%s csv=%s cells=%d", json_path, csv_path, len(self.reports))


def transfer_matrix(
    gen_sets: Mapping[str, Sequence[TaggedGenerator]],
    victims: Sequence[nn.Module],
    dataset: LabeledImageSet,
    budget: Budget,
    **kwargs,
) -> TransferMatrix:
    """evaluate_transfer for every (surrogate, victim) pair; keys of gen_sets name the surrogate rows."""
    reports = []
    for surrogate, gens in gen_sets.items():
        tagged = [TaggedGenerator(g.generator, g.target_class, surrogate, g.smooth) for g in gens]
        for victim in victims:
            reports.append(evaluate_transfer(tagged, victim, dataset, budget, **kwargs))
    return TransferMatrix.from_reports(reports)
