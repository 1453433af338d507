import numpy as np
import pytest

from cfkit.evaluation import LabeledSet, mean_acc5
from cfkit.params import ParameterSet
from cfkit.reinforcement import (
    ComparisonReport,
    TrainConfig,
    augment_standard,
    blend_parameters,
    fine_tune_head,
    reinforce,
)
from cfkit.types import ImageTensor, ShapeMismatchError


def make_theta(seed):
    rng = np.random.default_rng(seed)
    return ParameterSet(
        {
            "backbone.proj": rng.normal(size=(4, 6)),
            "head.weight": rng.normal(size=(3, 4)),
            "head.bias": rng.normal(size=3),
        },
        frozenset({"head.weight", "head.bias"}),
    )


HEAD = {"head.weight", "head.bias"}


class TestBlendParameters:
    def test_alpha_zero_is_theta0(self):
        theta0, theta1 = make_theta(0), make_theta(1)
        out = blend_parameters(theta0, theta1, 0.0, HEAD)
        for name in theta0.groups:
            assert np.array_equal(out.groups[name], theta0.groups[name])

    def test_alpha_one_is_theta1_on_scope(self):
        theta0, theta1 = make_theta(0), make_theta(1)
        out = blend_parameters(theta0, theta1, 1.0, HEAD)
        for name in HEAD:
            assert np.array_equal(out.groups[name], theta1.groups[name])
        assert np.array_equal(out.groups["backbone.proj"], theta0.groups["backbone.proj"])

    def test_affine_formula(self):
        theta0, theta1 = make_theta(0), make_theta(1)
        alpha = 0.3
        out = blend_parameters(theta0, theta1, alpha, HEAD)
        for name in HEAD:
            want = (1 - alpha) * theta0.groups[name] + alpha * theta1.groups[name]
            assert np.max(np.abs(out.groups[name] - want)) < 1e-12

    def test_body_bit_identical_outside_scope(self):
        theta0, theta1 = make_theta(0), make_theta(1)
        out = blend_parameters(theta0, theta1, 0.7, HEAD)
        assert out.groups["backbone.proj"].tobytes() == theta0.groups["backbone.proj"].tobytes()

    def test_result_does_not_alias_inputs(self):
        theta0, theta1 = make_theta(0), make_theta(1)
        out = blend_parameters(theta0, theta1, 0.0, HEAD)
        out.groups["backbone.proj"][0, 0] += 5.0
        assert theta0.groups["backbone.proj"][0, 0] != out.groups["backbone.proj"][0, 0]

    def test_structure_mismatch_rejected(self):
        theta0 = make_theta(0)
        other = ParameterSet({"head.weight": np.zeros((3, 4))})
        with pytest.raises(ShapeMismatchError):
            blend_parameters(theta0, other, 0.5, set())

    def test_unknown_scope_rejected(self):
        with pytest.raises(ShapeMismatchError):
            blend_parameters(make_theta(0), make_theta(1), 0.5, {"nope"})

    def test_alpha_validated_by_config(self):
        with pytest.raises(ValueError):
            TrainConfig(alpha=1.5)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)


@pytest.fixture()
def small_sets(world):
    """Four focus classes, correlated train images, mismatched-background val."""
    rng = np.random.default_rng(11)
    focus = world.classes[:4]
    universe = list(world.classes)
    train, val = [], []
    for ci, cls in enumerate(focus):
        for j in range(6):
            img = world.make_image(cls, world.class_color[cls], rng)
            train.append((ImageTensor(img, f"tr-{cls}-{j}"), cls))
        for j in range(3):
            other = world.classes[(ci + 7) % len(world.classes)]
            img = world.make_image(cls, world.class_color[other], rng)
            val.append((ImageTensor(img, f"va-{cls}-{j}"), cls))
    return (LabeledSet(train, "train", universe), LabeledSet(val, "val", universe))


class TestFineTuneHead:
    def test_loss_decreases_and_backend_restored(self, classifier, small_sets):
        train, val = small_sets
        before = classifier.get_parameters()
        config = TrainConfig(learning_rate=0.05, max_epochs=8, min_delta=0.0)
        theta1, record = fine_tune_head(classifier, train, val, config)
        after = classifier.get_parameters()
        for name in before.groups:
            assert np.array_equal(after.groups[name], before.groups[name])
        losses = [m["train_loss"] for m in record.epoch_metrics]
        assert losses[-1] < losses[0]
        assert any(
            not np.array_equal(theta1.groups[n], before.groups[n]) for n in HEAD
        )

    def test_body_groups_frozen(self, classifier, small_sets):
        train, val = small_sets
        theta0 = classifier.get_parameters()
        theta1, _ = fine_tune_head(classifier, train, val,
                                   TrainConfig(learning_rate=0.05, max_epochs=3))
        for name in theta0.body_group_names():
            assert theta1.groups[name].tobytes() == theta0.groups[name].tobytes()

    def test_zero_min_delta_runs_all_epochs(self, classifier, small_sets):
        train, val = small_sets
        config = TrainConfig(learning_rate=0.05, max_epochs=6, min_delta=0.0)
        _, record = fine_tune_head(classifier, train, val, config)
        assert record.epochs_run == 6
        assert not record.stopped_early

    def test_impossible_min_delta_stops_at_patience(self, classifier, small_sets):
        train, val = small_sets
        config = TrainConfig(learning_rate=0.05, max_epochs=50, min_delta=1.0, patience=5)
        _, record = fine_tune_head(classifier, train, val, config)
        assert record.stopped_early
        # Epoch 1 establishes the baseline, then patience stale epochs follow.
        assert record.epochs_run == 6

    def test_deterministic_given_seed(self, classifier, small_sets):
        train, val = small_sets
        config = TrainConfig(learning_rate=0.05, max_epochs=4, seed=3)
        t_a, r_a = fine_tune_head(classifier, train, val, config)
        t_b, r_b = fine_tune_head(classifier, train, val, config)
        for name in t_a.groups:
            assert np.array_equal(t_a.groups[name], t_b.groups[name])
        assert r_a.epoch_metrics == r_b.epoch_metrics

    def test_headless_backend_rejected(self, small_sets):
        train, val = small_sets

        class Headless:
            def get_parameters(self):
                return ParameterSet({"w": np.zeros(2)})

        with pytest.raises(ValueError):
            fine_tune_head(Headless(), train, val, TrainConfig())


class TestReinforce:
    def test_arms_and_backend_state(self, classifier, small_sets):
        train, val = small_sets
        config = TrainConfig(learning_rate=0.05, max_epochs=4, alpha=0.3)
        blended, comparisons, record = reinforce(classifier, train, val, [val], config)
        report = comparisons["val"]
        assert report.arms == ["baseline", "counterfactual"]
        assert set(report.overall) == {"baseline", "counterfactual"}
        assert report.metadata["alpha"] == 0.3
        after = classifier.get_parameters()
        for name in blended.groups:
            assert np.array_equal(after.groups[name], blended.groups[name])

    def test_standard_arm_included_when_given(self, classifier, small_sets):
        train, val = small_sets
        std = augment_standard(train, seed=0)
        config = TrainConfig(learning_rate=0.05, max_epochs=3)
        _, comparisons, _ = reinforce(classifier, train, val, [val], config, std_train=std)
        assert comparisons["val"].arms == ["baseline", "standard", "counterfactual"]

    def test_blend_matches_manual_formula(self, classifier, small_sets):
        train, val = small_sets
        theta0 = classifier.get_parameters()
        config = TrainConfig(learning_rate=0.05, max_epochs=4, alpha=0.3, seed=0)
        blended, _, _ = reinforce(classifier, train, val, [], config)
        classifier.set_parameters(theta0)
        theta1, _ = fine_tune_head(classifier, train, val, config)
        for name in HEAD:
            want = 0.7 * theta0.groups[name] + 0.3 * theta1.groups[name]
            assert np.max(np.abs(blended.groups[name] - want)) < 1e-12

    def test_alpha_grid_search_picks_valid_alpha(self, classifier, small_sets):
        train, val = small_sets
        config = TrainConfig(learning_rate=0.05, max_epochs=3, alpha_grid_search=True)
        _, comparisons, _ = reinforce(classifier, train, val, [val], config)
        alpha = comparisons["val"].metadata["alpha"]
        assert alpha in [round(0.1 * i, 1) for i in range(11)]


class TestComparisonReport:
    def make(self):
        return ComparisonReport(
            set_name="ood",
            per_class={"c0": {"baseline": 25.0, "counterfactual": 35.0}},
            overall={"baseline": 25.0, "counterfactual": 35.0},
            model_name="toy",
            arms=["baseline", "counterfactual"],
        )

    def test_json_round_trip(self):
        report = self.make()
        again = ComparisonReport.from_dict(report.to_dict())
        assert again.to_dict() == report.to_dict()

    def test_csv_layout(self):
        lines = self.make().to_csv().strip().splitlines()
        assert lines[0] == "set,class,baseline,counterfactual"
        assert lines[-1] == "ood,__overall__,25.00,35.00"


class TestAugmentStandard:
    def test_shapes_labels_and_ids(self, small_sets):
        train, _ = small_sets
        aug = augment_standard(train, seed=0, n_per_item=2)
        assert len(aug) == 2 * len(train)
        assert aug.name == "train_augmented"
        for (image, gt), (orig, orig_gt) in zip(aug.items[::2], train.items):
            assert gt == orig_gt
            assert image.id == f"{orig.id}__aug0"
            assert image.shape == orig.shape
            assert image.data.min() >= 0.0 and image.data.max() <= 1.0

    def test_deterministic_given_seed(self, small_sets):
        train, _ = small_sets
        a = augment_standard(train, seed=5)
        b = augment_standard(train, seed=5)
        for (ia, _), (ib, _) in zip(a.items, b.items):
            assert np.array_equal(ia.data, ib.data)

    def test_seed_changes_output(self, small_sets):
        train, _ = small_sets
        a = augment_standard(train, seed=1)
        b = augment_standard(train, seed=2)
        assert any(not np.array_equal(ia.data, ib.data)
                   for (ia, _), (ib, _) in zip(a.items, b.items))
