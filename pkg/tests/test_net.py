import numpy as np
import pytest

from conftest import tiny_arch
from fdcheck import randomize
from seqflow.diff import value_of
from seqflow.geom import CloudSequence, PointCloudFrame
from seqflow.net import (ArchConfig, arch_hash, build_pyramid, estimate_flows,
                         forecast, init_model_params)


def static_sequence(rng, n=16, t=3):
    frame = PointCloudFrame(rng.normal(size=(n, 3)))
    return CloudSequence([PointCloudFrame(frame.coords.copy())
                          for _ in range(t)])


def random_sequence(rng, n=16, t=3):
    return CloudSequence([PointCloudFrame(rng.normal(size=(n, 3)))
                          for _ in range(t)])


class TestArchConfig:
    def test_level_sizes(self):
        cfg = ArchConfig()
        assert cfg.level_sizes(64) == [64, 16, 4]

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            ArchConfig().level_sizes(8)

    def test_validation(self):
        with pytest.raises(ValueError):
            ArchConfig(level_divisors=(1, 4), feature_dims=(8,))
        with pytest.raises(ValueError):
            ArchConfig(level_divisors=(2, 4), feature_dims=(8, 16))
        with pytest.raises(ValueError):
            ArchConfig(level_divisors=(1, 4, 2), feature_dims=(8, 8, 8))

    def test_hash_changes_with_config(self):
        assert arch_hash(ArchConfig()) != arch_hash(ArchConfig(hidden_width=8))
        assert arch_hash(ArchConfig()) == arch_hash(ArchConfig())


class TestModelParams:
    def test_count_equals_slice_sum(self):
        cfg = tiny_arch()
        params = init_model_params(cfg, seed=0)
        total = sum(int(np.prod(shape)) for _, shape in params.slices())
        assert params.param_count() == total
        assert params.flatten().size == total

    def test_deterministic_init(self):
        cfg = tiny_arch()
        a = init_model_params(cfg, seed=3).flatten()
        b = init_model_params(cfg, seed=3).flatten()
        np.testing.assert_array_equal(a, b)
        c = init_model_params(cfg, seed=4).flatten()
        assert not np.array_equal(a, c)


class TestBuildPyramid:
    def test_shapes(self, rng):
        cfg = ArchConfig()
        params = init_model_params(cfg, seed=0)
        frame = PointCloudFrame(rng.normal(size=(64, 3)))
        levels = build_pyramid(frame, params, cfg)
        assert [lvl.n for lvl in levels] == [64, 16, 4]
        assert [value_of(lvl.feats).shape[1] for lvl in levels] == [8, 16, 32]
        assert levels[0].fps_indices is None
        for parent, lvl in zip(levels, levels[1:]):
            assert lvl.fps_indices.max() < parent.n
            np.testing.assert_array_equal(
                value_of(lvl.coords), value_of(parent.coords)[lvl.fps_indices])
        np.testing.assert_array_equal(
            value_of(levels[2].coords),
            frame.coords[levels[2].input_indices])

    def test_translation_symmetric_line_features(self):
        # equispaced line: interior points share congruent neighborhoods,
        # so their aggregated features must coincide
        cfg = tiny_arch(level_divisors=(1, 4), feature_dims=(4, 6))
        params = init_model_params(cfg, seed=1)
        coords = np.zeros((8, 3))
        coords[:, 0] = np.arange(8) * 0.5
        frame = PointCloudFrame(coords, feats=np.ones((8, 3)))
        levels = build_pyramid(frame, params, cfg)
        feats = value_of(levels[0].feats)
        # interior points (2..5) all see offsets {0, -0.5, +0.5}
        for row in feats[3:6]:
            np.testing.assert_array_equal(row, feats[2])

    def test_permuted_input(self, rng):
        cfg = ArchConfig()
        params = init_model_params(cfg, seed=0)
        coords = rng.normal(size=(64, 3))
        base = build_pyramid(PointCloudFrame(coords), params, cfg)
        perm = rng.permutation(64)
        got = build_pyramid(PointCloudFrame(coords[perm]), params, cfg)
        np.testing.assert_array_equal(value_of(got[0].feats),
                                      value_of(base[0].feats)[perm])
        for l in (1, 2):
            np.testing.assert_array_equal(value_of(got[l].coords),
                                          value_of(base[l].coords))
            np.testing.assert_array_equal(value_of(got[l].feats),
                                          value_of(base[l].feats))


class TestEstimateFlows:
    def test_shapes(self, rng):
        cfg = tiny_arch()
        params = init_model_params(cfg, seed=0)
        seq = random_sequence(rng, n=16, t=4)
        pred = estimate_flows(seq, params, cfg)
        assert pred.num_steps == 3
        for s in range(3):
            assert value_of(pred.finest(s)).shape == (16, 3)
            assert value_of(pred.flows[s][1]).shape == (4, 3)

    def test_two_frame_pass_matches_first_step(self, rng):
        cfg = tiny_arch()
        params = init_model_params(cfg, seed=2)
        seq3 = random_sequence(rng, n=16, t=3)
        seq2 = CloudSequence(seq3.frames[:2])
        full = estimate_flows(seq3, params, cfg)
        pair = estimate_flows(seq2, params, cfg)
        np.testing.assert_array_equal(value_of(pair.finest(0)),
                                      value_of(full.finest(0)))

    def test_static_sequence_deterministic(self, rng):
        cfg = tiny_arch()
        params = init_model_params(cfg, seed=3)
        seq = static_sequence(rng, n=16, t=3)
        a = estimate_flows(seq, params, cfg)
        b = estimate_flows(seq, params, cfg)
        for s in range(a.num_steps):
            np.testing.assert_array_equal(value_of(a.finest(s)),
                                          value_of(b.finest(s)))

    def test_reset_makes_static_steps_identical(self, rng):
        # with memories zeroed before every step, each timestep of a static
        # sequence reduces to the two-frame case
        cfg = tiny_arch()
        params = init_model_params(cfg, seed=3)
        randomize(params, seed=4, scale=0.4)
        seq = static_sequence(rng, n=16, t=4)
        pred = estimate_flows(seq, params, cfg, reset_state_each_step=True)
        pair = estimate_flows(CloudSequence(seq.frames[:2]), params, cfg)
        for s in range(pred.num_steps):
            np.testing.assert_array_equal(value_of(pred.finest(s)),
                                          value_of(pair.finest(0)))

    def test_recurrence_changes_later_steps(self, rng):
        cfg = tiny_arch()
        params = init_model_params(cfg, seed=3)
        randomize(params, seed=5, scale=0.4)
        seq = static_sequence(rng, n=16, t=4)
        with_mem = estimate_flows(seq, params, cfg)
        without = estimate_flows(seq, params, cfg, reset_state_each_step=True)
        np.testing.assert_array_equal(value_of(with_mem.finest(0)),
                                      value_of(without.finest(0)))
        assert not np.array_equal(value_of(with_mem.finest(1)),
                                  value_of(without.finest(1)))

    def test_ball_mode_runs(self, rng):
        # fixed-radius neighborhoods end to end, including the empty
        # cross-frame fallback inside the recurrent cells
        cfg = tiny_arch(neighborhood_mode="ball", ball_radius=1.0,
                        ball_radius_growth=2.0)
        params = init_model_params(cfg, seed=4)
        seq = random_sequence(rng, n=16, t=3)
        pred = estimate_flows(seq, params, cfg)
        for s in range(pred.num_steps):
            assert np.isfinite(value_of(pred.finest(s))).all()

    def test_permutation_equivariance(self, rng):
        cfg = tiny_arch()
        params = init_model_params(cfg, seed=6)
        frames = [rng.normal(size=(16, 3)) for _ in range(3)]
        base = estimate_flows(
            CloudSequence([PointCloudFrame(c) for c in frames]), params, cfg)
        perms = [rng.permutation(16) for _ in range(3)]
        got = estimate_flows(
            CloudSequence([PointCloudFrame(c[p]) for c, p in zip(frames, perms)]),
            params, cfg)
        for s in range(2):
            np.testing.assert_array_equal(value_of(got.finest(s)),
                                          value_of(base.finest(s))[perms[s + 1]])


class TestForecast:
    def test_single_step_shape(self, rng):
        cfg = tiny_arch()
        params = init_model_params(cfg, seed=0)
        seq = random_sequence(rng, n=16, t=3)
        result = forecast(seq, params, cfg, K=1)
        assert len(result.frames) == 1
        assert value_of(result.frames[0]).shape == (16, 3)
        assert len(result.pyramids[0]) == cfg.num_levels

    def test_zero_head_identity_rollout(self, rng):
        cfg = tiny_arch()
        params = init_model_params(cfg, seed=0)
        for name in params.names():
            if name.startswith("decoder.head"):
                params.set(name, np.zeros_like(params.get(name)))
        seq = random_sequence(rng, n=16, t=3)
        result = forecast(seq, params, cfg, K=4)
        for frame in result.frames:
            np.testing.assert_array_equal(value_of(frame),
                                          seq.frames[-1].coords)

    def test_autoregressive_chaining(self, rng):
        cfg = tiny_arch()
        params = init_model_params(cfg, seed=1)
        seq = random_sequence(rng, n=16, t=3)
        result = forecast(seq, params, cfg, K=3)
        np.testing.assert_array_equal(result.step_inputs[0],
                                      seq.frames[-1].coords)
        for k in (1, 2):
            np.testing.assert_array_equal(result.step_inputs[k],
                                          value_of(result.frames[k - 1]))

    def test_respects_n_input(self, rng):
        cfg = tiny_arch()
        params = init_model_params(cfg, seed=1)
        frames = [PointCloudFrame(rng.normal(size=(16, 3))) for _ in range(5)]
        seq_marked = CloudSequence(frames, n_input=3)
        seq_cut = CloudSequence(frames[:3])
        a = forecast(seq_marked, params, cfg, K=2)
        b = forecast(seq_cut, params, cfg, K=2)
        for fa, fb in zip(a.frames, b.frames):
            np.testing.assert_array_equal(value_of(fa), value_of(fb))

    def test_permutation_equivariance(self, rng):
        cfg = tiny_arch()
        params = init_model_params(cfg, seed=2)
        frames = [rng.normal(size=(16, 3)) for _ in range(3)]
        base = forecast(CloudSequence([PointCloudFrame(c) for c in frames]),
                        params, cfg, K=2)
        perms = [rng.permutation(16) for _ in range(3)]
        got = forecast(
            CloudSequence([PointCloudFrame(c[p]) for c, p in zip(frames, perms)]),
            params, cfg, K=2)
        for fa, fb in zip(base.frames, got.frames):
            np.testing.assert_array_equal(value_of(fb),
                                          value_of(fa)[perms[-1]])

    def test_k_must_be_positive(self, rng):
        cfg = tiny_arch()
        params = init_model_params(cfg, seed=0)
        with pytest.raises(ValueError):
            forecast(random_sequence(rng), params, cfg, K=0)
