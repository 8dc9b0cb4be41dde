"""Tests for the blur proposal network and per-pixel convolution"""
import math

import numpy as np
import pytest

from bags.bpn import (
    BlurField,
    BlurProposalNetwork,
    apply_blur,
    blend,
    kernel_grid,
    kernel_principal_axis,
    normalize_depth,
    per_pixel_convolve,
    positional_encoding,
)
from bags.blur_synth import degrade_motion, make_toy_scene, render_clean
from bags.errors import BPNError
from bags.gradcheck import check_gradients
from bags.losses import LossWeights, loss_terms, psnr
from bags.optim import Adam
from bags.tensor import Tensor, no_grad
from tests.oracles import six_loop_convolve


def random_field(rng, height, width, k, requires_grad=False):
    kernels = rng.uniform(size=(height * width, k * k))
    kernels /= kernels.sum(axis=1, keepdims=True)
    return BlurField(
        kernels=Tensor(kernels, requires_grad=requires_grad),
        mask=Tensor(rng.uniform(size=(height, width))),
        scale=1,
        kernel_size=k,
        height=height,
        width=width,
    )


def render_like(rng, size=16):
    color = Tensor(rng.uniform(size=(3, size, size)))
    depth = Tensor(rng.uniform(2.0, 4.0, size=(size, size)))
    return color, depth


@pytest.fixture
def network(rng):
    net = BlurProposalNetwork(num_views=4, rng=rng, feature_channels=4, view_dim=8, hidden=16, frequencies=3)
    net.grow_head(1, 5, rng)
    return net


class TestProposal:
    def test_kernels_normalized_and_mask_bounded(self, network, rng):
        checked = 0
        for view in range(4):
            color, depth = render_like(rng)
            field = network.propose(color, depth, view, 1)
            np.testing.assert_allclose(field.kernels.data.sum(axis=1), 1.0, atol=1e-12)
            assert field.kernels.data.min() >= 0.0
            assert 0.0 <= field.mask.data.min() and field.mask.data.max() <= 1.0
            checked += field.kernels.shape[0]
        assert checked >= 1000

    def test_new_head_starts_near_identity(self, network, rng):
        color, depth = render_like(rng)
        kernels = network.propose(color, depth, 0, 1).kernel_array()
        assert kernels[:, :, 2, 2].min() > 0.9

    def test_field_shape(self, network, rng):
        color, depth = render_like(rng, 12)
        field = network.propose(color, depth, 1, 1)
        assert field.kernels.shape == (144, 25)
        assert field.mask.shape == (12, 12)
        assert field.kernel_at(3, 4).shape == (5, 5)

    def test_unknown_view(self, network, rng):
        with pytest.raises(BPNError):
            network.propose(*render_like(rng), 4, 1)

    def test_missing_head(self, network, rng):
        with pytest.raises(BPNError):
            network.propose(*render_like(rng), 0, 2)

    def test_gradients_reach_shared_and_head_weights(self, network, rng):
        color, depth = render_like(rng)
        field = network.propose(color, depth, 2, 1)
        (apply_blur(color, field).sum() + field.mask.sum()).backward()
        assert np.abs(network.params["bpn.head1.weight"].grad).sum() > 0
        assert np.abs(network.params["bpn.base0.weight"].grad).sum() > 0
        table_grad = network.params["bpn.view_table"].grad
        assert np.abs(table_grad[2]).sum() > 0
        assert not table_grad[[0, 1, 3]].any()


class TestHeads:
    def test_duplicate_head(self, network, rng):
        with pytest.raises(BPNError):
            network.grow_head(1, 5, rng)

    def test_even_kernel_size(self, network, rng):
        with pytest.raises(BPNError):
            network.grow_head(2, 4, rng)

    def test_grow_returns_new_parameters(self, network, rng):
        new = network.grow_head(2, 9, rng)
        assert set(new) == {"bpn.head2.weight", "bpn.head2.bias"}
        assert new["bpn.head2.weight"].shape == (16, 81)
        assert network.kernel_sizes == {1: 5, 2: 9}

    def test_growth_leaves_existing_weights_untouched(self, network, rng):
        color, depth = render_like(rng)
        before = network.arrays()
        field = network.propose(color, depth, 1, 1)
        network.grow_head(2, 9, rng)
        network.grow_head(3, 3, rng)
        after = network.arrays()
        for name, values in before.items():
            assert np.array_equal(after[name], values), name
        again = network.propose(color, depth, 1, 1)
        assert np.array_equal(again.kernels.data, field.kernels.data)
        assert np.array_equal(again.mask.data, field.mask.data)

    def test_no_views(self, rng):
        with pytest.raises(BPNError):
            BlurProposalNetwork(num_views=0, rng=rng)


class TestWithoutRgbd:
    def test_propose_without_features(self, rng):
        net = BlurProposalNetwork(num_views=2, rng=rng, view_dim=8, hidden=16, frequencies=3, use_rgbd=False)
        net.grow_head(1, 3, rng)
        assert net.input_dim == 8 + 12
        assert not any(name.startswith("bpn.conv") for name in net.params)
        field = net.propose(*render_like(rng), 0, 1)
        np.testing.assert_allclose(field.kernels.data.sum(axis=1), 1.0, atol=1e-12)

    def test_feature_branch_missing(self, rng):
        net = BlurProposalNetwork(num_views=2, rng=rng, use_rgbd=False)
        with pytest.raises(BPNError):
            net.extract_features(*render_like(rng))


class TestStorage:
    def test_arrays_round_trip(self, network, rng):
        color, depth = render_like(rng)
        restored = BlurProposalNetwork.from_arrays(network.describe(), network.arrays())
        assert restored.kernel_sizes == network.kernel_sizes
        np.testing.assert_array_equal(
            restored.propose(color, depth, 3, 1).kernels.data,
            network.propose(color, depth, 3, 1).kernels.data,
        )

    def test_foreign_parameter(self, network):
        arrays = network.arrays()
        arrays["positions"] = np.zeros((1, 3))
        with pytest.raises(BPNError):
            BlurProposalNetwork.from_arrays(network.describe(), arrays)

    def test_head_without_weights(self, network):
        description = network.describe()
        description["heads"]["3"] = 7
        with pytest.raises(BPNError):
            BlurProposalNetwork.from_arrays(description, network.arrays())


class TestPerPixelConvolution:
    def test_matches_direct_loops(self, rng):
        for case in range(20):
            k = (1, 3, 5, 7)[case % 4]
            field = random_field(rng, 16, 16, k)
            image = rng.uniform(size=(3, 16, 16))
            out = apply_blur(Tensor(image), field).data
            np.testing.assert_allclose(out, six_loop_convolve(image, field.kernel_array()), atol=1e-10, rtol=0)

    def test_delta_kernels_are_identity(self, rng):
        kernels = np.zeros((8, 8, 5, 5))
        kernels[:, :, 2, 2] = 1.0
        image = rng.uniform(size=(3, 8, 8))
        np.testing.assert_array_equal(per_pixel_convolve(image, kernels), image)

    def test_constant_image_is_preserved(self, rng):
        field = random_field(rng, 10, 10, 7)
        out = apply_blur(Tensor(np.full((3, 10, 10), 0.25)), field).data
        np.testing.assert_allclose(out, 0.25, atol=1e-12)

    def test_gradient(self, rng):
        field = random_field(rng, 6, 7, 3, requires_grad=True)
        color = Tensor(rng.uniform(size=(3, 6, 7)), requires_grad=True)
        weights = rng.normal(size=(3, 6, 7))
        errors = check_gradients(
            lambda: (apply_blur(color, field) * weights).sum(),
            {"color": color, "kernels": field.kernels},
        )
        assert max(errors.values()) < 1e-6

    def test_size_mismatch(self, rng):
        with pytest.raises(BPNError):
            apply_blur(Tensor(rng.uniform(size=(3, 8, 8))), random_field(rng, 8, 9, 3))
        with pytest.raises(BPNError):
            per_pixel_convolve(np.zeros((3, 4, 4)), np.zeros((4, 4, 2, 2)))


class TestBlend:
    def test_mask_extremes(self, rng):
        color, blurred = rng.uniform(size=(3, 5, 5)), rng.uniform(size=(3, 5, 5))
        np.testing.assert_allclose(blend(color, blurred, np.zeros((5, 5))).data, color)
        np.testing.assert_allclose(blend(color, blurred, np.ones((5, 5))).data, blurred)
        half = blend(color, blurred, np.full((5, 5), 0.5)).data
        np.testing.assert_allclose(half, 0.5 * (color + blurred))

    def test_shape_mismatch(self, rng):
        with pytest.raises(BPNError):
            blend(np.zeros((3, 5, 5)), np.zeros((3, 5, 5)), np.zeros((4, 5)))


class TestInspection:
    def test_principal_axis(self):
        horizontal = np.zeros((5, 5))
        horizontal[2, :] = 1.0
        vertical = horizontal.T.copy()
        diagonal = np.eye(5)
        assert kernel_principal_axis(horizontal) == pytest.approx(0.0, abs=1e-9)
        assert kernel_principal_axis(vertical) == pytest.approx(math.pi / 2)
        assert kernel_principal_axis(diagonal) == pytest.approx(math.pi / 4)

    def test_principal_axis_of_empty_kernel(self):
        with pytest.raises(BPNError):
            kernel_principal_axis(np.zeros((3, 3)))

    def test_kernel_grid(self, rng):
        field = random_field(rng, 12, 12, 5)
        grid = kernel_grid(field, points=4)
        assert grid.shape == (20, 20)
        assert grid[0:5, 5:10].max() == pytest.approx(1.0)

    def test_positional_encoding(self):
        encoding = positional_encoding(4, 6, frequencies=2)
        assert encoding.shape == (24, 8)
        assert np.abs(encoding).max() <= 1.0
        # first column is sin(pi x) with x the normalized column center
        assert encoding[0, 0] == pytest.approx(math.sin(math.pi * (1.0 / 6.0 - 1.0)))

    def test_flat_depth_normalizes_to_zero(self):
        assert not normalize_depth(Tensor(np.full((4, 4), 3.0))).data.any()


MOTION_ANGLE = math.radians(30.0)


@pytest.fixture(scope="module")
def fitted_motion():
    """A sharp toy render, its motion-blurred copy, and a network fitted to explain the blur"""
    rng = np.random.default_rng(7)
    toy = make_toy_scene(seed=3, n_gaussians=80, n_views=1, size=32)
    color, depth = render_clean(toy.cloud, toy.train_cameras)[0]
    observed = degrade_motion(color, MOTION_ANGLE, 6.0)
    net = BlurProposalNetwork(num_views=1, rng=rng, feature_channels=4, view_dim=8, hidden=16, frequencies=3)
    net.grow_head(1, 7, rng)
    optimizer = Adam(net.parameters(), lrs={"bpn": 0.02})
    weights = LossWeights(photo=0.8, dssim=0.2, mask=0.001)
    color_t, depth_t = Tensor(color), Tensor(depth)
    for iteration in range(150):
        optimizer.zero_grad()
        field = net.propose(color_t, depth_t, 0, 1)
        c_out = blend(color_t, apply_blur(color_t, field), field.mask)
        loss_terms(c_out, observed, field.mask, weights)["total"].backward()
        optimizer.step(iteration)
    with no_grad():
        field = net.propose(color_t, depth_t, 0, 1)
        c_out = blend(color_t, apply_blur(color_t, field), field.mask).data
    return color, observed, field, c_out


class TestBlurRecovery:
    def test_blurred_render_beats_sharp_render(self, fitted_motion):
        color, observed, _, c_out = fitted_motion
        assert psnr(c_out, observed) > psnr(color, observed) + 1.0

    def test_kernels_align_with_motion(self, fitted_motion):
        _, _, field, _ = fitted_motion
        mean_kernel = field.kernel_array().reshape(-1, 7, 7).mean(axis=0)
        offset = (kernel_principal_axis(mean_kernel) - MOTION_ANGLE) % math.pi
        assert min(offset, math.pi - offset) < math.radians(15.0)
