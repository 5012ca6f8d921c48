import json

import numpy as np
import pytest

from blobsurrogate import (
    ConfigError,
    GroundTruth,
    Lesion,
    LoGParams,
    Point3,
    SurrogateModel,
    SurrogateSpec,
    Volume3D,
    build_surrogate_net,
    build_target,
    build_training_targets,
    conv_receptive_field,
    depth_for_receptive_field,
    detect_candidates,
    extract_candidates_from_response,
    load_surrogate,
    predict_response,
    receptive_field_for_log,
    save_surrogate,
    select_threshold,
    smooth_target,
    train_surrogate,
)
from blobsurrogate.nn import Conv3D

from conftest import bump_volume
from oracles import brute_force_select_threshold


class TestReceptiveField:
    def test_stacked_conv_formula(self):
        # rf = k + (d - 1) * (k - 1)
        assert conv_receptive_field(3, 1) == 3
        assert conv_receptive_field(3, 7) == 15
        assert conv_receptive_field(3, 9) == 19
        assert conv_receptive_field(5, 3) == 13

    def test_depth_inverts_formula(self):
        for depth in range(1, 12):
            rf = conv_receptive_field(3, depth)
            assert depth_for_receptive_field(rf, 3) == depth

    def test_inadmissible_rf_rejected(self):
        # an even span cannot be produced by stacked odd kernels
        with pytest.raises(ConfigError):
            depth_for_receptive_field(16, 3)
        with pytest.raises(ConfigError):
            depth_for_receptive_field(2, 3)

    def test_log_coverage_rounds_up(self):
        # sigma 4 mm at 1 mm spacing needs radius 7, window 15: depth 7
        assert receptive_field_for_log(LoGParams(1.0, 4.0, 1.0, 0.1), 1.0) == 15
        # sigma 5 needs window 19: depth 9
        assert receptive_field_for_log(LoGParams(1.0, 5.0, 1.0, 0.1), 1.0) == 19
        # sigma 4.2 needs radius 8, window 17 (odd, already admissible)
        assert receptive_field_for_log(LoGParams(1.0, 4.2, 1.0, 0.1), 1.0) == 17

    def test_spec_depth_and_validation(self):
        spec = SurrogateSpec(receptive_field_vox=15)
        assert spec.depth == 7
        with pytest.raises(ConfigError):
            SurrogateSpec(receptive_field_vox=14)
        with pytest.raises(ConfigError):
            SurrogateSpec(receptive_field_vox=15, kernel_size=4)


class TestBuildNet:
    def test_structure(self):
        net = build_surrogate_net(SurrogateSpec(receptive_field_vox=7, hidden_channels=3))
        assert len(net.layers) == 3
        assert all(isinstance(l, Conv3D) for l in net.layers)
        assert net.layers[0].in_channels == 1
        assert net.layers[0].out_channels == 3
        assert net.layers[-1].out_channels == 1
        # final layer is linear so the response can go negative like the
        # operator it imitates... check activation labels
        assert net.layers[-1].activation != "relu"
        assert all(l.activation == "relu" for l in net.layers[:-1])

    def test_output_shape_preserved(self):
        net = build_surrogate_net(SurrogateSpec(receptive_field_vox=7))
        net.initialize(np.random.default_rng(0))
        x = np.zeros((1, 1, 10, 11, 12), dtype=np.float32)
        assert net.forward(x).shape == x.shape


class TestBuildTarget:
    def params(self):
        return LoGParams(1.0, 2.0, 0.5, 0.02)

    def case(self):
        centers = ((4.0, 4.0, 4.0), (12.0, 11.0, 10.0))
        vol = bump_volume(size=16, centers=centers, sigma_mm=1.5)
        truth = GroundTruth(tuple(Lesion(Point3(*c), 3.5) for c in centers))
        cands = detect_candidates(vol, self.params())
        return vol, truth, cands

    def test_values_and_placement(self):
        vol, truth, cands = self.case()
        q = build_target(vol, cands, truth, candidate_value=0.001)
        # exactly one unit voxel per lesion, at the nearest grid point
        assert int((q == 1.0).sum()) == 2
        for les in truth.lesions:
            ix, iy, iz = vol.voxel_of(les.center)
            assert q[iz, iy, ix] == 1.0
        # all other marks are the candidate value
        others = q[(q != 0.0) & (q != 1.0)]
        assert np.all(others == 0.001)

    def test_candidates_near_truth_are_absorbed(self):
        vol, truth, cands = self.case()
        q = build_target(vol, cands, truth, candidate_value=0.5)
        # any candidate within the hit radius of a lesion contributes no
        # separate mark: its voxel either carries the 1.0 spike or nothing
        pos = cands.positions_mm
        d = np.min(np.linalg.norm(
            pos[:, None, :] - np.array([[l.center.x, l.center.y, l.center.z]
                                        for l in truth.lesions])[None], axis=2), axis=1)
        for p, dist in zip(pos, d):
            ix, iy, iz = vol.voxel_of(Point3(*p))
            if dist <= 1.5:
                assert q[iz, iy, ix] in (0.0, 1.0)

    def test_far_candidates_marked(self):
        vol, truth, cands = self.case()
        empty_truth_far = GroundTruth((Lesion(Point3(0.0, 0.0, 0.0), 2.0),))
        q = build_target(vol, cands, empty_truth_far, candidate_value=0.25)
        assert (q == 0.25).sum() >= 1

    def test_no_candidates_just_spikes(self):
        vol, truth, _ = self.case()
        from blobsurrogate import CandidateSet
        q = build_target(vol, CandidateSet.empty(), truth)
        assert set(np.unique(q)) == {0.0, 1.0}


class TestSmoothTarget:
    def test_spike_keeps_unit_peak(self):
        q = np.zeros((9, 9, 9))
        q[4, 4, 4] = 1.0
        out = smooth_target(q, spacing_mm=1.0, sigma_mm=1.0)
        assert out[4, 4, 4] == 1.0
        assert 0 < out[4, 4, 3] < 1.0

    def test_original_marks_restored_exactly(self):
        q = np.zeros((11, 11, 11))
        q[5, 5, 5] = 1.0
        q[2, 2, 2] = 0.001
        out = smooth_target(q, 1.0, 1.0)
        assert out[2, 2, 2] == 0.001
        assert out[5, 5, 5] == 1.0

    def test_clipped_to_unit_interval(self):
        q = np.zeros((9, 9, 9))
        q[4, 4, 4] = 1.0
        q[4, 4, 5] = 1.0
        out = smooth_target(q, 1.0, 1.5)
        assert out.max() <= 1.0 and out.min() >= 0.0


class TestTraining:
    def tiny_problem(self):
        centers = ((5.0, 5.0, 5.0),)
        vol = bump_volume(size=12, centers=centers, sigma_mm=1.5)
        truth = GroundTruth((Lesion(Point3(*centers[0]), 3.5),))
        params = LoGParams(1.0, 1.5, 0.5, 0.02)
        return [vol], [truth], params

    def test_loss_decreases(self):
        vols, truths, params = self.tiny_problem()
        targets = build_training_targets(vols, truths, params)
        spec = SurrogateSpec.for_log_params(params, vols[0].spacing_mm)
        net = build_surrogate_net(spec)
        net.initialize(np.random.default_rng(0))
        log = train_surrogate(net, vols, targets, epochs=30,
                              rng=np.random.default_rng(1), augment=False)
        losses = [row[1] for row in log]
        assert losses[-1] < losses[0]
        assert len(log) == 30

    def test_training_deterministic(self):
        vols, truths, params = self.tiny_problem()
        targets = build_training_targets(vols, truths, params)
        spec = SurrogateSpec.for_log_params(params, vols[0].spacing_mm)
        preds = []
        for _ in range(2):
            net = build_surrogate_net(spec)
            net.initialize(np.random.default_rng(0))
            train_surrogate(net, vols, targets, epochs=5,
                            rng=np.random.default_rng(1))
            preds.append(predict_response(net, vols[0]))
        np.testing.assert_array_equal(preds[0], preds[1])

    def test_predict_response_shape(self):
        vols, _, params = self.tiny_problem()
        spec = SurrogateSpec.for_log_params(params, 1.0)
        net = build_surrogate_net(spec)
        net.initialize(np.random.default_rng(0))
        r = predict_response(net, vols[0])
        assert r.shape == vols[0].data.shape
        assert r.dtype == np.float32


def synthetic_responses(seed, n=3, size=10, spacing=1.0):
    """Random response fields plus truths sitting on modest local bumps."""
    rng = np.random.default_rng(seed)
    responses, truths = [], []
    for _ in range(n):
        r = rng.uniform(0.0, 0.6, size=(size, size, size))
        n_lesions = int(rng.integers(1, 4))
        lesions = []
        for _ in range(n_lesions):
            c = rng.uniform(2.0, (size - 3.0) * spacing, size=3)
            iz, iy, ix = [int(round(v / spacing)) for v in c[::-1]]
            r[iz, iy, ix] = rng.uniform(0.5, 1.0)
            lesions.append(Lesion(Point3(*map(float, c)), 3.0))
        responses.append(r)
        truths.append(GroundTruth(tuple(lesions)))
    return responses, truths


class TestSelectThreshold:
    @pytest.mark.parametrize("seed", range(4))
    def test_matches_brute_force(self, seed):
        responses, truths = synthetic_responses(seed)
        sel = select_threshold(responses, truths, spacing_mm=1.0,
                               min_sensitivity=0.8, grid_size=40)
        tau, sens, vox, reached, _, _ = brute_force_select_threshold(
            responses, truths, 1.0, 0.8, 1.5, 40)
        assert sel.tau == tau
        assert sel.mean_sensitivity == sens
        assert sel.mean_voxels_above == vox
        assert sel.reached_target == reached

    def test_highest_workable_threshold_wins(self):
        # one response, one lesion at a known peak of 0.9: any tau below
        # 0.9 detects it, so the selected tau is the largest grid value
        # strictly below the peak
        r = np.zeros((8, 8, 8))
        r[4, 4, 4] = 0.9
        truth = GroundTruth((Lesion(Point3(4.0, 4.0, 4.0), 3.0),))
        sel = select_threshold([r], [truth], 1.0, min_sensitivity=1.0,
                               grid_size=9)  # grid: 0.1 .. 0.9
        assert sel.tau == pytest.approx(0.8)
        assert sel.mean_sensitivity == 1.0
        assert sel.reached_target

    def test_detection_needs_strict_excess(self):
        # a peak exactly at tau does not count, so tau = peak fails and the
        # selection backs off to the next lower grid value
        r = np.zeros((8, 8, 8))
        r[4, 4, 4] = 0.5
        truth = GroundTruth((Lesion(Point3(4.0, 4.0, 4.0), 3.0),))
        sel = select_threshold([r], [truth], 1.0, min_sensitivity=1.0,
                               grid_size=9)
        assert sel.tau == pytest.approx(0.4)

    def test_unreachable_falls_back_to_smallest(self):
        r = np.zeros((8, 8, 8))
        truth = GroundTruth((Lesion(Point3(4.0, 4.0, 4.0), 3.0),))
        sel = select_threshold([r], [truth], 1.0, min_sensitivity=0.5,
                               grid_size=9)
        assert not sel.reached_target
        assert sel.tau == pytest.approx(0.1)

    @pytest.mark.parametrize("seed", range(3))
    def test_budget_matches_brute_force(self, seed):
        responses, truths = synthetic_responses(seed + 50)
        budget = 40.0
        sel = select_threshold(responses, truths, 1.0, min_sensitivity=0.8,
                               grid_size=25, voxel_budget=budget)
        _, _, _, _, btau, bvox = brute_force_select_threshold(
            responses, truths, 1.0, 0.8, 1.5, 25, voxel_budget=budget)
        assert sel.budget_tau == btau
        assert sel.budget_mean_voxels == bvox

    def test_rejects_empty_input(self):
        with pytest.raises(ConfigError):
            select_threshold([], [], 1.0)


class TestExtractCandidates:
    def test_hand_built_centroid(self):
        # a 2-voxel component with responses 3 and 1 along x at y=z=2:
        # centroid_x = (3*2 + 1*3) / 4 = 2.25, score = component max = 3
        r = np.zeros((5, 5, 5))
        r[2, 2, 2] = 3.0
        r[2, 2, 3] = 1.0
        cands = extract_candidates_from_response(r, spacing_mm=2.0, tau=0.5)
        assert len(cands) == 1
        np.testing.assert_allclose(cands.positions_mm[0], [2.25 * 2.0, 4.0, 4.0])
        assert cands.scores[0] == 3.0

    def test_diagonal_voxels_join_one_component(self):
        # 26-connectivity: corner-touching voxels merge
        r = np.zeros((5, 5, 5))
        r[1, 1, 1] = 1.0
        r[2, 2, 2] = 1.0
        assert len(extract_candidates_from_response(r, 1.0, 0.5)) == 1

    def test_separate_components_sorted_by_score(self):
        r = np.zeros((7, 7, 7))
        r[1, 1, 1] = 1.0
        r[5, 5, 5] = 2.0
        cands = extract_candidates_from_response(r, 1.0, 0.5)
        assert len(cands) == 2
        assert cands.scores[0] == 2.0
        np.testing.assert_allclose(cands.positions_mm[0], [5.0, 5.0, 5.0])

    def test_threshold_is_strict(self):
        r = np.zeros((5, 5, 5))
        r[2, 2, 2] = 0.5
        assert len(extract_candidates_from_response(r, 1.0, 0.5)) == 0

    def test_max_candidates(self):
        r = np.zeros((9, 9, 9))
        for i, v in enumerate((5.0, 4.0, 3.0)):
            r[1 + 3 * i, 1, 1] = v
        cands = extract_candidates_from_response(r, 1.0, 0.5, max_candidates=2)
        assert list(cands.scores) == [5.0, 4.0]


class TestModelIO:
    def test_round_trip(self, tmp_path):
        spec = SurrogateSpec(receptive_field_vox=7, hidden_channels=2)
        net = build_surrogate_net(spec)
        net.initialize(np.random.default_rng(4))
        model = SurrogateModel(network=net, spec=spec, tau=0.37,
                               candidate_value=0.01, smooth_sigma_mm=1.25)
        save_surrogate(model, tmp_path / "w.bsw", tmp_path / "m.json")
        back = load_surrogate(tmp_path / "w.bsw", tmp_path / "m.json")
        assert back.spec == spec
        assert back.tau == 0.37
        assert back.candidate_value == 0.01
        assert back.smooth_sigma_mm == 1.25
        x = np.random.default_rng(5).normal(size=(1, 1, 8, 8, 8)).astype(np.float32)
        np.testing.assert_array_equal(net.forward(x), back.network.forward(x))

    def test_meta_is_plain_json(self, tmp_path):
        spec = SurrogateSpec(receptive_field_vox=7)
        net = build_surrogate_net(spec)
        net.initialize(np.random.default_rng(0))
        save_surrogate(SurrogateModel(net, spec, tau=0.5),
                       tmp_path / "w.bsw", tmp_path / "m.json")
        meta = json.loads((tmp_path / "m.json").read_text())
        assert meta["tau"] == 0.5
