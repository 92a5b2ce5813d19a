import contextlib
import logging
import math
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import jsonlines
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader, TensorDataset
from tqdm import tqdm

from ttp.attacks import clean_accuracy
from ttp.config import DiscSection, LossSwitches, TrainConfig
from ttp.data import Batch, BatchStream, LabeledImageSet, prefetch
from ttp.errors import DidNotConverge, InsufficientSamples, MissingTargetTag, NaNLoss, NotFrozen, ShapeMismatch, StreamExhausted
from ttp.losses import LossBreakdown, generator_objective
from ttp.models import Discriminator, DiscriminatorEnsemble, build_discriminator, build_generator, generator_forward
from ttp.projection import SmoothingKernel, assert_within_budget, project
from ttp.seeding import derive_seed, torch_generator
from ttp.weights import ModelCard, card_for, save_weights, weights_fingerprint

log = logging.getLogger(__name__)

# test-accuracy gates before a surrogate/victim is usable for attack experiments
ACCURACY_GATES = {"convnet-a": 0.70, "resnet-s": 0.75}


@dataclass
class OptimizerState:
    step: int
    exp_avg: List[torch.Tensor]
    exp_avg_sq: List[torch.Tensor]

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor]) -> "OptimizerState":
        return cls(0, [torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


def adam_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    state: OptimizerState,
    lr: float,
    beta1: float,
    beta2: float,
    eps_adam: float = 1e-8,
) -> Tuple[Sequence[torch.Tensor], OptimizerState]:
    """One bias-corrected Adam update, in place; same arithmetic as torch.optim.Adam."""
    if not (len(params) == len(grads) == len(state.exp_avg)):
        raise ShapeMismatch(f"{len(params)} params, {len(grads)} grads, {len(state.exp_avg)} moment slots")
    state.step += 1
    bias1 = 1.0 - beta1**state.step
    bias2 = 1.0 - beta2**state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
            if p.shape != g.shape or p.shape != m.shape:
                raise ShapeMismatch(f"param {tuple(p.shape)} vs grad {tuple(g.shape)} vs moment {tuple(m.shape)}")
            m.lerp_(g, 1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            denom = (v.sqrt() / math.sqrt(bias2)).add_(eps_adam)
            p.addcdiv_(m, denom, value=-lr / bias1)
    return params, state


def _pad_crop_flip(x: torch.Tensor, g: torch.Generator, pad: int = 4) -> torch.Tensor:
    n, _, h, w = x.shape
    padded = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    offsets = torch.randint(0, 2 * pad + 1, (n, 2), generator=g)
    flips = torch.rand(n, generator=g) < 0.5
    out = torch.stack([padded[i, :, dy : dy + h, dx : dx + w] for i, (dy, dx) in enumerate(offsets.tolist())])
    out[flips] = out[flips].flip(-1)
    return out


def train_discriminator(
    train_set: LabeledImageSet,
    arch: str,
    config: DiscSection = DiscSection(),
    seed: int = 0,
    test_set: Optional[LabeledImageSet] = None,
    min_accuracy: Optional[float] = None,
    progress: bool = True,
) -> Discriminator:
    """Supervised training of a surrogate/victim classifier, seeded and replayable.

    With a test set, the model must clear its accuracy gate or DidNotConverge is raised.
    """
    if len(train_set) < 2:
        raise InsufficientSamples(f"cannot train a classifier on {len(train_set)} image(s)")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "disc-init", arch))
        model = build_discriminator(arch, train_set.image_shape[0], train_set.num_classes, config.batch_norm)

    loader = DataLoader(
        TensorDataset(train_set.images, train_set.labels),
        batch_size=min(config.batch_size, len(train_set)),
        shuffle=True,
        generator=torch_generator(seed, "disc-shuffle", arch),
    )
    aug_rng = torch_generator(seed, "disc-augment", arch)
    opt = torch.optim.SGD(
        model.parameters(), lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay, nesterov=True
    )
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.epochs * len(loader))

    model.train()
    for epoch in tqdm(range(config.epochs), desc=f"train {arch}", disable=not progress):
        running, seen = 0.0, 0
        for x, y in loader:
            x = _pad_crop_flip(x, aug_rng) if x.shape[-1] > 4 else x
            loss = F.cross_entropy(model(x), y)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            running += loss.item() * len(y)
            seen += len(y)
        log.info("event=disc_epoch arch=%s epoch=%d loss=%.4f", arch, epoch + 1, running / max(seen, 1))

    model.freeze()
    if test_set is not None:
        acc = clean_accuracy(model, test_set)
        model.accuracy = acc
        gate = ACCURACY_GATES.get(arch, 0.0) if min_accuracy is None else min_accuracy
        log.info("event=disc_trained arch=%s test_accuracy=%.4f gate=%.2f", arch, acc, gate)
        if acc < gate:
            raise DidNotConverge(f"{arch} reached {acc:.4f} test accuracy after {config.epochs} epochs, gate is {gate:.2f}")
    return model


_CKPT = re.compile(r"^gen_t(?P<target>\d+)_eps(?P<eps>[\d.]+)_(?P<surrogate>.+)_e(?P<epoch>\d+)\.ttpw$")


def checkpoint_name(target_class: int, eps: float, surrogate_tag: str, epoch: int) -> str:
    return f"gen_t{target_class}_eps{eps:g}_{surrogate_tag}_e{epoch:02d}.ttpw"


def parse_checkpoint_name(name: str) -> Dict[str, object]:
    m = _CKPT.match(Path(name).name)
    if not m:
        raise MissingTargetTag(f"{name} does not carry a gen_t<target>_eps<eps>_<surrogate>_e<epoch> tag")
    return {
        "target_class": int(m["target"]),
        "eps": float(m["eps"]),
        "surrogate": m["surrogate"],
        "epoch": int(m["epoch"]),
    }


def generator_card(gen: nn.Module, config: TrainConfig, surrogate_tag: str, epoch: int) -> ModelCard:
    return card_for(
        gen,
        target_class=config.target_class,
        eps=config.eps,
        surrogates=surrogate_tag.split("+"),
        tag=surrogate_tag,
        epoch=epoch,
        seed=config.seed,
        smooth=config.smooth,
        loss=config.loss,
    )


@dataclass
class GeneratorRun:
    generator: nn.Module
    telemetry: List[Dict[str, float]] = field(default_factory=list)
    disc_hash_before: str = ""
    disc_hash_after: str = ""
    checkpoints: List[Path] = field(default_factory=list)

    def epoch_means(self) -> Dict[int, float]:
        sums: Dict[int, List[float]] = {}
        for rec in self.telemetry:
            sums.setdefault(int(rec["epoch"]), []).append(rec["total"])
        return {e: sum(v) / len(v) for e, v in sorted(sums.items())}


def _ensemble_hash(discs: DiscriminatorEnsemble) -> str:
    return ":".join(weights_fingerprint(m) for m in discs)


def _next(it: Iterator[Batch], role: str) -> Batch:
    try:
        return next(it)
    except StopIteration:
        raise StreamExhausted(f"{role} stream ran out of batches") from None


def _dump_dir(checkpoint_dir: Optional[Path], telemetry_path: Optional[Path]) -> Path:
    if checkpoint_dir is not None:
        return Path(checkpoint_dir)
    if telemetry_path is not None:
        return Path(telemetry_path).parent
    return Path(tempfile.mkdtemp(prefix="ttp-nan-"))


def _dump_nan(dump_dir: Path, step: int, **tensors: torch.Tensor) -> Path:
    dump_dir.mkdir(parents=True, exist_ok=True)
    path = dump_dir / f"nan_step{step:06d}.pt"
    torch.save({k: v.detach().cpu() for k, v in tensors.items() if v is not None}, path)
    return path


def train_generator(
    config: TrainConfig,
    discs: DiscriminatorEnsemble,
    source: BatchStream,
    target: BatchStream,
    generator: Optional[nn.Module] = None,
    telemetry_path: Optional[Path] = None,
    checkpoint_dir: Optional[Path] = None,
    progress: bool = True,
    prefetch_depth: int = 0,
) -> GeneratorRun:
    """Train one generator for (surrogate set, target class) with the discriminators frozen.

    Each step: sample x_s / x_t, take the augmented copy of x_s, push both source
    views through G, project each around its own anchor, read D features of
    x'_s, x~'_s and x_t, form L + L^aug + L^sim and take an Adam step on G only.
    """
    if not discs.frozen:
        raise NotFrozen("freeze every discriminator before generator training")
    if target.role != "target" or source.role == "target":
        raise ValueError(f"expected (source, target) streams, got ({source.role}, {target.role})")
    if source.target_class != config.target_class or target.target_class != config.target_class:
        raise ValueError(
            f"streams were built for target {source.target_class}/{target.target_class}, config says {config.target_class}"
        )
    if config.needs_augmented and source.augment is None:
        raise ValueError("L^aug / L^sim need a source stream that carries an augment policy")

    discs.set_feature_layer(config.feature_layer)
    if generator is None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(config.seed, "generator-init", config.target_class))
            generator = build_generator("resnet", discs.in_channels)
    gen = generator
    gen.train()
    params = [p for p in gen.parameters() if p.requires_grad]
    state = OptimizerState.zeros_like(params)
    budget = config.budget
    kernel = SmoothingKernel() if config.smooth else None
    steps_per_epoch = config.steps_per_epoch or len(source)
    surrogate_tag = discs.tag
    objective = config.loss

    run = GeneratorRun(generator=gen, disc_hash_before=_ensemble_hash(discs))
    source_iter, target_iter = iter(source), iter(target)
    if prefetch_depth > 0:
        source_iter = prefetch(source_iter, prefetch_depth)
    step = 0
    log.info(
        "event=gen_train_start target=%d eps=%g surrogate=%s objective=%s use_aug=%s use_sim=%s smooth=%s steps_per_epoch=%d",
        config.target_class, config.eps, surrogate_tag, objective.objective, objective.use_aug,
        objective.use_sim, config.smooth, steps_per_epoch,
    )

    with contextlib.ExitStack() as stack:
        writer = stack.enter_context(jsonlines.open(telemetry_path, mode="w")) if telemetry_path else None
        for epoch in tqdm(range(config.epochs), desc=f"gen t={config.target_class}", disable=not progress):
            if config.max_steps is not None and step >= config.max_steps:
                break
            for _ in range(steps_per_epoch):
                if config.max_steps is not None and step >= config.max_steps:
                    break
                sb = _next(source_iter, "source")
                tb = _next(target_iter, "target")
                if tb.augmented is not None:
                    raise ValueError("target batch arrived augmented")
                x_s, x_t = sb.images, tb.images

                x_adv = project(generator_forward(gen, x_s), x_s, budget, kernel)
                x_aug = x_aug_adv = None
                if config.needs_augmented:
                    x_aug = sb.augmented
                    x_aug_adv = project(generator_forward(gen, x_aug), x_aug, budget, kernel)
                if config.debug:
                    assert_within_budget(x_adv, x_s, budget)
                    if x_aug_adv is not None:
                        assert_within_budget(x_aug_adv, x_aug, budget)

                feats_adv = [m.features(x_adv) for m in discs]
                feats_aug = [m.features(x_aug_adv) for m in discs] if x_aug_adv is not None else None
                with torch.no_grad():
                    feats_t = [m.features(x_t) for m in discs]
                parts: LossBreakdown = generator_objective(
                    feats_adv,
                    feats_aug,
                    feats_t,
                    objective=objective.objective,
                    use_aug=objective.use_aug,
                    use_sim=objective.use_sim,
                    target_class=config.target_class,
                )

                if not torch.isfinite(parts.total):
                    dump = _dump_nan(
                        _dump_dir(checkpoint_dir, telemetry_path), step, x_s=x_s, x_t=x_t, x_aug=x_aug, x_adv=x_adv, x_aug_adv=x_aug_adv
                    )
                    raise NaNLoss(f"non-finite loss at step {step} ({parts.as_record(step)}); batch dumped to {dump}")

                for p in params:
                    p.grad = None
                parts.total.backward()
                grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in params]
                adam_step(params, grads, state, config.lr, config.beta1, config.beta2)

                record = parts.as_record(step, epoch=epoch)
                run.telemetry.append(record)
                if writer is not None:
                    writer.write(record)
                step += 1

            means = run.epoch_means()
            if epoch in means:
                log.info("event=gen_epoch target=%d epoch=%d mean_total=%.5f", config.target_class, epoch + 1, means[epoch])
            if checkpoint_dir is not None:
                path = Path(checkpoint_dir) / checkpoint_name(config.target_class, config.eps, surrogate_tag, epoch + 1)
                save_weights(gen, path, generator_card(gen, config, surrogate_tag, epoch + 1))
                run.checkpoints.append(path)

    gen.eval()
    run.disc_hash_after = _ensemble_hash(discs)
    if run.disc_hash_after != run.disc_hash_before:
        raise NotFrozen("discriminator weights changed during generator training")
    return run


def ablation_configs(config: TrainConfig) -> Dict[str, TrainConfig]:
    """The ablation ladder under one seed and budget: CE baseline, L, L + L^aug, full, full without smoothing."""
    variants = {
        "ce": dict(loss=LossSwitches(objective="ce", use_aug=False, use_sim=False)),
        "dist": dict(loss=LossSwitches(objective="ttp", use_aug=False, use_sim=False)),
        "dist+aug": dict(loss=LossSwitches(objective="ttp", use_aug=True, use_sim=False)),
        "full": dict(loss=LossSwitches(objective="ttp", use_aug=True, use_sim=True)),
        "full-no-smooth": dict(loss=LossSwitches(objective="ttp", use_aug=True, use_sim=True), smooth=False),
    }
    return {name: config.model_copy(update=update) for name, update in variants.items()}
