import pytest
import torch
from pydantic import ValidationError

from ttp.attacks import predict
from ttp.errors import MissingTargetTag
from ttp.evaluate import (
    TaggedGenerator,
    TransferMatrix,
    TransferReport,
    evaluate_baseline,
    evaluate_transfer,
    transfer_matrix,
)
from ttp.models import ToyDiscriminator, ToyGenerator
from ttp.projection import Budget
from ttp.weights import card_for, save_weights


def _gens(targets, tag="toy_s0"):
    out = []
    for t in targets:
        torch.manual_seed(100 + t)
        out.append(TaggedGenerator(ToyGenerator(3, hidden=4), t, tag))
    return out


def _victim(seed: int, tag: str) -> ToyDiscriminator:
    torch.manual_seed(seed)
    v = ToyDiscriminator(3, 5).freeze()
    v.tag = tag
    return v


def test_report_accounting(tiny_set):
    victim = _victim(1, "toy_v1")
    report = evaluate_transfer(_gens([0, 2, 4]), victim, tiny_set, Budget.from_pixels(16))
    assert report.per_target_counts == {t: len(tiny_set) - tiny_set.count(t) for t in (0, 2, 4)}
    assert report.sample_count == 3 * 32
    assert report.mean_target_accuracy == pytest.approx(sum(report.per_target.values()) / 3)
    assert all(0.0 <= v <= 1.0 for v in report.per_target.values())
    assert report.victim_tag == "toy_v1" and report.surrogate_tag == "toy_s0"
    assert not report.white_box
    assert report.defense_tag == "none" and report.method == "generator"
    assert set(report.fingerprint) == {"version", "git", "config"}


def test_zero_budget_gives_clean_target_rate(tiny_set):
    victim = _victim(2, "toy_v2")
    report = evaluate_transfer(_gens([1, 3]), victim, tiny_set, Budget(0.0))
    preds = predict(victim, tiny_set.images)
    for t in (1, 3):
        keep = tiny_set.labels != t
        assert report.per_target[t] == pytest.approx((preds[keep] == t).float().mean().item())

    pgd = evaluate_baseline("pgd", _victim(3, "toy_s0"), victim, tiny_set, [1, 3], Budget(0.0), steps=3)
    mim = evaluate_baseline("mim", _victim(3, "toy_s0"), victim, tiny_set, [1, 3], Budget(0.0), steps=3)
    assert pgd.per_target == report.per_target == mim.per_target
    assert pgd.method == "pgd" and mim.method == "mim"


def test_identity_defense_matches_no_defense(tiny_set):
    victim = _victim(4, "toy_v4")
    budget = Budget.from_pixels(32)
    plain = evaluate_transfer(_gens([0, 1]), victim, tiny_set, budget)
    ident = evaluate_transfer(_gens([0, 1]), victim, tiny_set, budget, defense="identity")
    assert plain.per_target == ident.per_target
    blurred = evaluate_transfer(_gens([0, 1]), victim, tiny_set, budget, defense="median-blur", window=3)
    assert blurred.defense_tag == "median-blur"


def test_white_box_flag(tiny_set):
    surrogate = _victim(5, "toy_a")
    report = evaluate_transfer(_gens([2], tag="toy_a+toy_b"), surrogate, tiny_set, Budget.from_pixels(16))
    assert report.white_box
    baseline = evaluate_baseline("pgd", surrogate, surrogate, tiny_set, [2], Budget.from_pixels(16), steps=2)
    assert baseline.white_box


def test_source_classes_restrict_the_pool(tiny_set):
    report = evaluate_transfer(_gens([0]), _victim(6, "v"), tiny_set, Budget.from_pixels(16), source_classes=[0, 1, 2])
    assert report.per_target_counts == {0: 16}


def test_missing_or_duplicate_targets(tiny_set):
    victim = _victim(7, "v")
    with pytest.raises(MissingTargetTag):
        evaluate_transfer([TaggedGenerator(ToyGenerator(3), None, "s")], victim, tiny_set, Budget(0.1))
    with pytest.raises(MissingTargetTag):
        evaluate_transfer(_gens([9]), victim, tiny_set, Budget(0.1))
    with pytest.raises(ValueError):
        evaluate_transfer(_gens([1, 1]), victim, tiny_set, Budget(0.1))
    with pytest.raises(ValueError):
        evaluate_baseline("fgsm", victim, victim, tiny_set, [1], Budget(0.1))


def test_tagged_generator_from_card_and_filename(tmp_path):
    gen = ToyGenerator(3)
    save_weights(gen, tmp_path / "g.ttpw", card_for(gen, target_class=2, tag="convnet-a_s0"))
    tagged = TaggedGenerator.from_file(tmp_path / "g.ttpw")
    assert (tagged.target_class, tagged.surrogate_tag) == (2, "convnet-a_s0")

    name = tmp_path / "gen_t4_eps16_resnet-s_s1_e03.ttpw"
    save_weights(gen, name)
    tagged = TaggedGenerator.from_file(name)
    assert (tagged.target_class, tagged.surrogate_tag) == (4, "resnet-s_s1")

    save_weights(gen, tmp_path / "untagged.ttpw")
    with pytest.raises(MissingTargetTag):
        TaggedGenerator.from_file(tmp_path / "untagged.ttpw")


def test_report_round_trip_and_validation(tmp_path, tiny_set):
    report = evaluate_transfer(_gens([0, 3]), _victim(8, "v8"), tiny_set, Budget.from_pixels(16))
    back = TransferReport.read(report.write(tmp_path / "r.json"))
    assert back == report
    with pytest.raises(ValidationError):
        TransferReport(
            per_target={0: 0.5, 1: 0.1},
            per_target_counts={0: 4, 1: 4},
            mean_target_accuracy=0.9,
            victim_tag="v",
            surrogate_tag="s",
            epsilon=0.1,
            sample_count=8,
        )


def test_one_by_one_matrix_equals_single_report(tiny_set):
    victim = _victim(9, "v9")
    budget = Budget.from_pixels(16)
    single = evaluate_transfer(_gens([1, 2]), victim, tiny_set, budget)
    matrix = transfer_matrix({"toy_s0": _gens([1, 2])}, [victim], tiny_set, budget)
    assert len(matrix.reports) == 1
    assert matrix.cell("toy_s0", "v9").per_target == single.per_target


def test_matrix_grid_outputs(tiny_set, tmp_path):
    surrogate = _victim(10, "toy_a")
    victims = [surrogate, _victim(11, "v11"), _victim(12, "v12")]
    budget = Budget.from_pixels(16)
    matrix = transfer_matrix(
        {"toy_a": _gens([0, 1], "toy_a"), "toy_b": _gens([0, 1], "toy_b")}, victims, tiny_set, budget
    )
    assert len(matrix.reports) == 6
    assert matrix.surrogates == ["toy_a", "toy_b"]
    assert matrix.victims == ["toy_a", "v11", "v12"]
    assert matrix.cell("toy_a", "toy_a").white_box
    black = [r.mean_target_accuracy for r in matrix.reports if not r.white_box]
    assert len(black) == 5
    assert matrix.black_box_mean() == pytest.approx(sum(black) / 5)
    for r in matrix.reports:
        assert r.mean_target_accuracy == pytest.approx(sum(r.per_target.values()) / len(r.per_target))

    matrix.write(tmp_path / "m.json")
    frame = matrix.to_frame()
    assert frame.shape[0] == 2
    assert "toy_a*" in frame.columns
    csv_text = (tmp_path / "m.csv").read_text()
    assert "toy_a*" in csv_text and "v12" in csv_text
    assert "toy_b" in matrix.to_markdown()
    again = TransferMatrix.model_validate_json((tmp_path / "m.json").read_text())
    assert again == matrix


def test_matrix_rejects_duplicates_and_reads_reports(tiny_set, tmp_path):
    report = evaluate_transfer(_gens([0]), _victim(13, "v13"), tiny_set, Budget.from_pixels(8))
    with pytest.raises(ValueError):
        TransferMatrix.from_reports([report, report])
    paths = [report.write(tmp_path / "a.json")]
    assert TransferMatrix.read(paths).reports == [report]
    only_white = TransferMatrix.from_reports([report.model_copy(update={"white_box": True})])
    assert only_white.black_box_mean() is None


def test_mixed_surrogate_cards_join_with_plus(tiny_set):
    gens = _gens([0], tag="toy_a") + _gens([1], tag="toy_b")
    report = evaluate_transfer(gens, _victim(14, "toy_b"), tiny_set, Budget.from_pixels(16))
    assert report.surrogate_tag == "toy_a+toy_b"
    assert report.white_box


def test_cell_lookup_keys_on_method_and_defense(tiny_set):
    victim = _victim(15, "v15")
    budget = Budget.from_pixels(16)
    plain = evaluate_transfer(_gens([0]), victim, tiny_set, budget)
    blurred = evaluate_transfer(_gens([0]), victim, tiny_set, budget, defense="median-blur", window=3)
    pgd = evaluate_baseline("pgd", _victim(16, "toy_s0"), victim, tiny_set, [0], budget, steps=1)
    matrix = TransferMatrix.from_reports([plain, blurred, pgd])
    assert matrix.cell("toy_s0", "v15") == plain
    assert matrix.cell("toy_s0", "v15", defense="median-blur").defense_tag == "median-blur"
    assert matrix.cell("toy_s0", "v15", method="pgd").method == "pgd"
    with pytest.raises(KeyError):
        matrix.cell("toy_s0", "v15", method="mim")
