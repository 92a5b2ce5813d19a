import jsonlines
import pytest
import torch
import torch.nn as nn

from ttp.config import DiscSection, LossSwitches, TrainConfig
from ttp.data import LabeledImageSet, make_streams
from ttp.errors import DidNotConverge, InsufficientSamples, MissingTargetTag, NaNLoss, NotFrozen, ShapeMismatch
from ttp.models import DiscriminatorEnsemble, ToyDiscriminator, ToyGenerator
from ttp.train import (
    OptimizerState,
    ablation_configs,
    adam_step,
    checkpoint_name,
    parse_checkpoint_name,
    train_discriminator,
    train_generator,
)
from ttp.weights import load_weights, weights_fingerprint


def _config(**kw) -> TrainConfig:
    base = dict(target_class=1, epochs=1, batch_size=4, steps_per_epoch=3, eps=16.0, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def _gen(seed: int = 0) -> ToyGenerator:
    torch.manual_seed(seed)
    return ToyGenerator(3, hidden=4)


def _run(tiny_set, disc, config, gen=None, **kw):
    source, target = make_streams(
        tiny_set, config.target_class, config.batch_size, config.seed,
        augment=config.augment if config.needs_augmented else None,
    )
    return train_generator(config, DiscriminatorEnsemble([disc]), source, target, generator=gen or _gen(), progress=False, **kw)


def test_adam_zero_grad_leaves_params():
    p = [torch.tensor([1.0, -2.0]), torch.tensor(3.0)]
    before = [x.clone() for x in p]
    state = OptimizerState.zeros_like(p)
    adam_step(p, [torch.zeros(2), torch.zeros(())], state, lr=0.1, beta1=0.9, beta2=0.999)
    assert all(torch.equal(a, b) for a, b in zip(p, before))
    assert state.step == 1


def test_adam_first_step_by_hand():
    p = [torch.zeros((), dtype=torch.float64)]
    adam_step(p, [torch.ones((), dtype=torch.float64)], OptimizerState.zeros_like(p), lr=0.1, beta1=0.9, beta2=0.999)
    assert p[0].item() == pytest.approx(-0.1, rel=1e-7)


def test_adam_matches_torch_optimizer():
    torch.manual_seed(0)
    ours = torch.randn(5, 3)
    ref = nn.Parameter(ours.clone())
    opt = torch.optim.Adam([ref], lr=1e-2, betas=(0.5, 0.999), eps=1e-8)
    state = OptimizerState.zeros_like([ours])
    for _ in range(5):
        grad = torch.randn(5, 3)
        ref.grad = grad.clone()
        opt.step()
        adam_step([ours], [grad], state, 1e-2, 0.5, 0.999)
    assert torch.allclose(ours, ref.detach(), rtol=1e-6, atol=1e-7)


def test_adam_shape_mismatch():
    p = [torch.zeros(3)]
    with pytest.raises(ShapeMismatch):
        adam_step(p, [torch.zeros(4)], OptimizerState.zeros_like(p), 0.1, 0.9, 0.999)
    with pytest.raises(ShapeMismatch):
        adam_step(p, [], OptimizerState.zeros_like(p), 0.1, 0.9, 0.999)


def test_same_seed_same_telemetry_and_frozen_discriminator(tiny_set, toy_disc):
    before = weights_fingerprint(toy_disc)
    a = _run(tiny_set, toy_disc, _config())
    b = _run(tiny_set, toy_disc, _config())
    assert len(a.telemetry) == 3
    assert a.telemetry == b.telemetry
    assert a.disc_hash_before == a.disc_hash_after
    assert weights_fingerprint(toy_disc) == before
    for pa, pb in zip(a.generator.parameters(), b.generator.parameters()):
        assert torch.equal(pa, pb)
    rec = a.telemetry[0]
    assert set(rec) == {"step", "epoch", "l_dist", "l_aug", "l_sim", "total"}
    assert rec["total"] == pytest.approx(rec["l_dist"] + rec["l_aug"] + rec["l_sim"])
    assert all(r["l_dist"] >= 0 and r["l_aug"] >= 0 and r["l_sim"] >= 0 for r in a.telemetry)


def test_zero_steps_leaves_generator_untouched(tiny_set, toy_disc):
    gen = _gen(1)
    initial = [p.detach().clone() for p in gen.parameters()]
    config = _config(max_steps=0, loss=LossSwitches(use_aug=False, use_sim=False))
    run = _run(tiny_set, toy_disc, config, gen=gen)
    assert run.telemetry == []
    assert all(torch.equal(a, b) for a, b in zip(initial, run.generator.parameters()))


def test_zero_learning_rate_keeps_params(tiny_set, toy_disc):
    gen = _gen(2)
    initial = [p.detach().clone() for p in gen.parameters()]
    config = _config(max_steps=1).model_copy(update={"lr": 0.0})
    run = _run(tiny_set, toy_disc, config, gen=gen)
    assert len(run.telemetry) == 1
    total = run.telemetry[0]["total"]
    assert total >= 0 and total == total
    assert all(torch.equal(a, b) for a, b in zip(initial, run.generator.parameters()))


def test_generator_moves_with_positive_lr(tiny_set, toy_disc):
    gen = _gen(3)
    initial = [p.detach().clone() for p in gen.parameters()]
    run = _run(tiny_set, toy_disc, _config(lr=1e-2, debug=True), gen=gen)
    assert any(not torch.equal(a, b) for a, b in zip(initial, run.generator.parameters()))


def test_telemetry_and_checkpoints_written(tiny_set, toy_disc, tmp_path):
    config = _config(epochs=2)
    run = _run(tiny_set, toy_disc, config, telemetry_path=tmp_path / "t.jsonl", checkpoint_dir=tmp_path / "ckpt")
    with jsonlines.open(tmp_path / "t.jsonl") as reader:
        records = list(reader)
    assert records == run.telemetry
    assert [r["step"] for r in records] == list(range(6))
    assert sorted(run.epoch_means()) == [0, 1]
    assert [p.name for p in run.checkpoints] == [
        checkpoint_name(1, 16.0, "toy_s0", 1),
        checkpoint_name(1, 16.0, "toy_s0", 2),
    ]
    loaded = load_weights(run.checkpoints[-1])
    assert loaded.card.target_class == 1 and loaded.card.surrogates == ["toy_s0"] and loaded.card.epoch == 2
    for a, b in zip(loaded.parameters(), run.generator.parameters()):
        assert torch.equal(a, b)


def test_cross_entropy_objective_runs_without_augment(tiny_set, toy_disc):
    config = _config(loss=LossSwitches(objective="ce", use_aug=False, use_sim=False))
    assert not config.needs_augmented
    run = _run(tiny_set, toy_disc, config)
    assert all(r["l_aug"] == 0.0 and r["l_sim"] == 0.0 and r["l_dist"] > 0 for r in run.telemetry)


def test_preconditions(tiny_set, toy_disc):
    live = ToyDiscriminator(3, 5)
    with pytest.raises(NotFrozen):
        _run(tiny_set, live, _config())
    config = _config()
    source, target = make_streams(tiny_set, 1, 4, 3)  # no augment policy
    with pytest.raises(ValueError, match="augment"):
        train_generator(config, DiscriminatorEnsemble([toy_disc]), source, target, generator=_gen(), progress=False)
    with pytest.raises(ValueError):
        train_generator(config, DiscriminatorEnsemble([toy_disc]), target, source, generator=_gen(), progress=False)
    other, other_t = make_streams(tiny_set, 2, 4, 3, augment=config.augment)
    with pytest.raises(ValueError, match="target"):
        train_generator(config, DiscriminatorEnsemble([toy_disc]), other, other_t, generator=_gen(), progress=False)


class _NaNGenerator(nn.Module):
    in_channels = 3

    def __init__(self):
        super().__init__()
        self.w = nn.Parameter(torch.tensor(float("nan")))

    def forward(self, x):
        return x * self.w


def test_nan_loss_aborts_and_dumps_batch(tiny_set, toy_disc, tmp_path):
    config = _config(loss=LossSwitches(use_aug=False, use_sim=False))
    with pytest.raises(NaNLoss, match="step 0"):
        _run(tiny_set, toy_disc, config, gen=_NaNGenerator(), checkpoint_dir=tmp_path)
    dump = torch.load(tmp_path / "nan_step000000.pt")
    assert {"x_s", "x_t", "x_adv"} <= set(dump)


def test_nan_dump_lands_next_to_telemetry(tiny_set, toy_disc, tmp_path):
    config = _config(loss=LossSwitches(use_aug=False, use_sim=False))
    (tmp_path / "run").mkdir()
    with pytest.raises(NaNLoss):
        _run(tiny_set, toy_disc, config, gen=_NaNGenerator(), telemetry_path=tmp_path / "run" / "t.jsonl")
    assert (tmp_path / "run" / "nan_step000000.pt").exists()


def test_nan_dump_never_writes_to_working_directory(tiny_set, toy_disc, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    config = _config(loss=LossSwitches(use_aug=False, use_sim=False))
    with pytest.raises(NaNLoss, match="ttp-nan-"):
        _run(tiny_set, toy_disc, config, gen=_NaNGenerator())
    assert list(tmp_path.iterdir()) == []


def test_ablation_ladder():
    variants = ablation_configs(_config())
    assert list(variants) == ["ce", "dist", "dist+aug", "full", "full-no-smooth"]
    assert variants["ce"].loss.objective == "ce"
    assert (variants["dist"].loss.use_aug, variants["dist"].loss.use_sim) == (False, False)
    assert (variants["dist+aug"].loss.use_aug, variants["dist+aug"].loss.use_sim) == (True, False)
    assert variants["full"].smooth and not variants["full-no-smooth"].smooth
    assert len({(v.seed, v.eps, v.target_class) for v in variants.values()}) == 1


def test_ablation_variants_see_identical_source_batches(tiny_set):
    orders = {}
    for name, config in ablation_configs(_config()).items():
        source, target = make_streams(
            tiny_set, config.target_class, config.batch_size, config.seed,
            augment=config.augment if config.needs_augmented else None,
        )
        orders[name] = (
            [b.labels.tolist() for b in source.epoch(0)],
            [b.images for b in target.epoch(0)],
        )
    ref_labels, ref_targets = orders["ce"]
    for name, (labels, targets) in orders.items():
        assert labels == ref_labels, name
        assert all(torch.equal(a, b) for a, b in zip(targets, ref_targets)), name


def test_checkpoint_names():
    name = checkpoint_name(3, 16.0, "convnet-a_s0+convnet-a_s1", 7)
    assert name == "gen_t3_eps16_convnet-a_s0+convnet-a_s1_e07.ttpw"
    assert parse_checkpoint_name(name) == {
        "target_class": 3,
        "eps": 16.0,
        "surrogate": "convnet-a_s0+convnet-a_s1",
        "epoch": 7,
    }
    with pytest.raises(MissingTargetTag):
        parse_checkpoint_name("generator.ttpw")


def test_discriminator_training_is_seeded(tiny_set):
    config = DiscSection(epochs=1, batch_size=8, lr=0.01)
    a = train_discriminator(tiny_set, "toy", config, seed=5, progress=False)
    b = train_discriminator(tiny_set, "toy", config, seed=5, progress=False)
    assert a.frozen and b.frozen
    assert weights_fingerprint(a) == weights_fingerprint(b)


def test_discriminator_gate_and_degenerate_input(tiny_set):
    config = DiscSection(epochs=1, batch_size=8, lr=0.01)
    model = train_discriminator(tiny_set, "toy", config, seed=0, test_set=tiny_set, min_accuracy=0.0, progress=False)
    assert 0.0 <= model.accuracy <= 1.0
    with pytest.raises(DidNotConverge):
        train_discriminator(tiny_set, "toy", config, seed=0, test_set=tiny_set, min_accuracy=1.01, progress=False)
    one = LabeledImageSet(tiny_set.images[:1], tiny_set.labels[:1], tiny_set.num_classes)
    with pytest.raises(InsufficientSamples):
        train_discriminator(one, "toy", config)
