"""Tests for the coarse-to-fine training loop"""
import copy

import numpy as np
import pytest

from bags.blur_synth import BlurSpec, synthesize
from bags.config import DensifyConfig, LearningRates, RunConfig, ScaleSchedule
from bags.errors import ConfigError, ScheduleError
from bags.losses import LossWeights
from bags.scene import init_from_points
from bags.trainer import LOG_COLUMNS, Trainer, train, upscale_transition


@pytest.fixture
def dataset():
    return synthesize(BlurSpec("motion", angle=0.3, length=3.0, seed=5), n_gaussians=20, n_views=4, size=32)


def tiny_config(**overrides):
    options = dict(
        schedule=ScaleSchedule.from_lists([2, 1], [3, 5], [3, 3], warmup_iters=1, strict_fov=False),
        seed=11,
    )
    options.update(overrides)
    return RunConfig(**options)


def make_trainer(dataset, config):
    cloud = init_from_points(dataset.points, dataset.point_colors)
    return Trainer(cloud, dataset.scene.train_cameras, dataset.train_images, config)


class TestRun:
    def test_runs_every_stage(self, dataset):
        result = make_trainer(dataset, tiny_config()).run()
        assert list(result.log.columns) == LOG_COLUMNS
        assert result.log["iter"].tolist() == [1, 2, 3, 4, 5, 6]
        assert result.log["scale"].tolist() == [2, 2, 2, 1, 1, 1]
        assert np.all(np.isfinite(result.log["total"]))
        assert [s["scale"] for s in result.stages] == [2, 1]
        assert result.bpn.kernel_sizes == {2: 3, 1: 5}
        assert 0.0 <= result.mean_mask <= 1.0

    def test_progress_callback(self, dataset):
        seen = []
        make_trainer(dataset, tiny_config()).run(progress=lambda it, values, stage: seen.append((it, stage.scale)))
        assert seen == [(1, 2), (2, 2), (3, 2), (4, 1), (5, 1), (6, 1)]

    def test_warmup_holds_the_mask_back(self, dataset):
        config = tiny_config(schedule=ScaleSchedule.from_lists([2, 1], [3, 5], [3, 3], warmup_iters=2, strict_fov=False))
        log = make_trainer(dataset, config).run().log
        masks = log["mask"].tolist()
        assert masks[0] == masks[1] == masks[3] == masks[4] == 0.0
        assert masks[2] > 0.0 and masks[5] > 0.0

    def test_without_network(self, dataset):
        result = train(
            init_from_points(dataset.points, dataset.point_colors),
            dataset.scene.train_cameras, dataset.train_images, tiny_config(use_bpn=False),
        )
        assert result.bpn is None
        assert result.mean_mask is None
        assert not result.log["mask"].any()

    def test_densification_keeps_optimizer_in_sync(self, dataset):
        config = tiny_config(densify=DensifyConfig(grad_threshold=1e-12, interval=1, stop_fraction=0.0))
        trainer = make_trainer(dataset, config)
        result = trainer.run()
        assert len(result.cloud) > len(dataset.points)
        for name, tensor in result.cloud.parameters().items():
            assert trainer.optimizer.params[name] is tensor
            assert trainer.optimizer.state[name].m.shape == tensor.shape


class TestDeterminism:
    def test_same_seed_same_run(self, dataset):
        first = make_trainer(dataset, tiny_config()).run()
        second = make_trainer(dataset, tiny_config()).run()
        np.testing.assert_array_equal(first.log.to_numpy(), second.log.to_numpy())
        for name, values in first.cloud.arrays().items():
            np.testing.assert_array_equal(second.cloud.arrays()[name], values)

    def test_resume_matches_uninterrupted_run(self, dataset):
        config = tiny_config(checkpoint_every=4)
        snapshots = []
        full = make_trainer(dataset, config).run(on_checkpoint=lambda t: snapshots.append(copy.deepcopy(t.snapshot())))
        assert len(snapshots) == 1

        resumed = make_trainer(dataset, config)
        resumed.restore(snapshots[0])
        assert resumed.iteration == 4
        result = resumed.run()
        np.testing.assert_array_equal(result.log.to_numpy(), full.log.to_numpy())
        for name, values in full.cloud.arrays().items():
            np.testing.assert_array_equal(result.cloud.arrays()[name], values)
        for name, values in full.bpn.arrays().items():
            np.testing.assert_array_equal(result.bpn.arrays()[name], values)

    def test_restore_needs_matching_network(self, dataset):
        sections = make_trainer(dataset, tiny_config(use_bpn=False)).snapshot()
        with pytest.raises(ConfigError):
            make_trainer(dataset, tiny_config()).restore(sections)


class TestSetup:
    def test_needs_two_views(self, dataset):
        cloud = init_from_points(dataset.points, dataset.point_colors)
        with pytest.raises(ConfigError):
            Trainer(cloud, dataset.scene.train_cameras[:1], dataset.train_images[:1], tiny_config())

    def test_image_must_match_camera(self, dataset):
        cloud = init_from_points(dataset.points, dataset.point_colors)
        images = list(dataset.train_images)
        images[1] = images[1][:, :16, :]
        with pytest.raises(ConfigError):
            Trainer(cloud, dataset.scene.train_cameras, images, tiny_config())

    def test_observation_pyramid(self, dataset):
        trainer = make_trainer(dataset, tiny_config())
        assert trainer.observations(2)[0].shape == (3, 16, 16)
        assert trainer.observations(2) is trainer.observations(2)

    def test_upscale_transition(self, dataset):
        trainer = make_trainer(dataset, tiny_config())
        trainer.enter_stage(trainer.schedule.stages[0])
        target = upscale_transition(trainer, 2)
        assert target.scale == 1
        assert trainer.bpn.has_head(1)
        assert "bpn.head1.weight" in trainer.optimizer.params
        with pytest.raises(ScheduleError):
            trainer.upscale_transition(1)


def single_stage(iterations, scale=2, kernel=5):
    return ScaleSchedule.from_lists([scale], [kernel], [iterations], warmup_iters=0, strict_fov=False)


class TestConvergence:
    def test_loss_goes_down(self, dataset):
        result = make_trainer(dataset, tiny_config(schedule=single_stage(60))).run()
        totals = result.log["total"].to_numpy()
        assert totals[-8:].mean() < totals[:8].mean()

    def test_mask_stays_low_on_sharp_input(self):
        clean = synthesize(BlurSpec("none", seed=5), n_gaussians=20, n_views=4, size=32)
        config = tiny_config(
            schedule=single_stage(60),
            weights=LossWeights(photo=0.8, dssim=0.2, mask=0.5),
            lrs=LearningRates(bpn=0.02),
        )
        result = make_trainer(clean, config).run()
        assert result.mean_mask < 0.15

    def test_coarse_to_fine_transitions(self):
        data = synthesize(BlurSpec("motion", angle=0.3, length=3.0, seed=5), n_gaussians=20, n_views=4, size=48)
        config = tiny_config(schedule=ScaleSchedule.from_lists([3, 2, 1], [3, 5, 7], [2, 2, 2], warmup_iters=0,
                                                               strict_fov=False))
        trainer = make_trainer(data, config)
        coarse_head = {}

        def progress(iteration, values, stage):
            if iteration == 2:
                coarse_head.update(trainer.bpn.arrays())

        result = trainer.run(progress=progress)
        assert result.log["scale"].tolist() == [3, 3, 2, 2, 1, 1]
        assert [(s["scale"], s["kernel"]) for s in result.stages] == [(3, 3), (2, 5), (1, 7)]
        assert result.bpn.kernel_sizes == {3: 3, 2: 5, 1: 7}
        assert trainer.observations(4)[0].shape == (3, 12, 12)
        for name in ("bpn.head3.weight", "bpn.head3.bias"):
            assert name in trainer.optimizer.params
            np.testing.assert_array_equal(result.bpn.arrays()[name], coarse_head[name])
