import json

import numpy as np
import pytest

from conftest import tiny_arch
from seqflow.data import generate_scene, random_scene_spec
from seqflow.net import arch_hash, init_model_params
from seqflow.training import (ConfigError, DataError, RunConfig,
                              checkpoint_hash, evaluate, load_checkpoint,
                              load_params_into, report_csv, save_checkpoint,
                              sequence_loss, train, validation_metric)


def small_seqs(base_seed, count, n=24, frames=5, inputs=3):
    return [generate_scene(random_scene_spec(
        seed=base_seed + i, points_per_frame=n, n_frames=frames,
        n_input=inputs, max_objects=1)) for i in range(count)]


def small_config(**kw):
    kw.setdefault("arch", tiny_arch())
    kw.setdefault("level_weights", (1.0, 0.1))
    kw.setdefault("epochs", 2)
    return RunConfig(**kw)


class TestRunConfig:
    def test_roundtrip(self, tmp_path):
        cfg = small_config(task="spf_sup", seed=7)
        path = tmp_path / "run.json"
        path.write_text(cfg.to_json())
        back = RunConfig.from_json_file(path)
        assert back == cfg
        assert back.config_hash() == cfg.config_hash()

    def test_unknown_task(self):
        with pytest.raises(ConfigError, match="unknown task"):
            small_config(task="segment")

    def test_bad_field(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"task": "ssfe", "bogus_field": 1}))
        with pytest.raises(ConfigError, match="bogus_field"):
            RunConfig.from_json_file(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            RunConfig.from_json_file(tmp_path / "nope.json")

    def test_weight_level_mismatch(self):
        with pytest.raises(ConfigError, match="level weights"):
            RunConfig(task="ssfe", arch=tiny_arch(), level_weights=(1.0,))


class TestCheckpoints:
    def test_roundtrip(self, tmp_path):
        arch = tiny_arch()
        params = init_model_params(arch, seed=0)
        path = tmp_path / "model.spcmckp"
        save_checkpoint(path, params, arch, meta={"note": "x"})
        arrays, meta = load_checkpoint(path)
        assert meta["arch_hash"] == arch_hash(arch)
        assert meta["note"] == "x"
        for name in params.names():
            np.testing.assert_array_equal(arrays[name], params.get(name))

    def test_arch_mismatch_rejected(self, tmp_path):
        arch = tiny_arch()
        params = init_model_params(arch, seed=0)
        path = tmp_path / "model.spcmckp"
        save_checkpoint(path, params, arch)
        other = tiny_arch(hidden_width=5)
        fresh = init_model_params(other, seed=0)
        with pytest.raises(ConfigError, match="architecture hash"):
            load_params_into(fresh, path, other)

    def test_corruption_rejected(self, tmp_path):
        arch = tiny_arch()
        path = tmp_path / "model.spcmckp"
        save_checkpoint(path, init_model_params(arch, 0), arch)
        blob = bytearray(path.read_bytes())
        blob[50] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(DataError, match="checksum"):
            load_checkpoint(path)

    def test_hash_stable(self, tmp_path):
        arch = tiny_arch()
        path = tmp_path / "model.spcmckp"
        save_checkpoint(path, init_model_params(arch, 0), arch)
        assert checkpoint_hash(path) == checkpoint_hash(path)


class TestTrainLoop:
    def test_zero_epochs_keeps_init(self):
        seqs = small_seqs(0, 2)
        cfg = small_config(epochs=0)
        result = train(cfg, train_seqs=seqs, val_seqs=[])
        fresh = init_model_params(cfg.arch, cfg.seed)
        np.testing.assert_array_equal(result.params.flatten(), fresh.flatten())
        np.testing.assert_array_equal(result.best_params.flatten(),
                                      fresh.flatten())

    def test_loss_decreases_on_smoke_run(self):
        seqs = small_seqs(10, 3)
        cfg = small_config(epochs=10, task="ssfe")
        result = train(cfg, train_seqs=seqs, val_seqs=[])
        assert result.history[-1]["train_loss"] < result.history[0]["train_loss"]

    def test_deterministic_given_seed(self):
        seqs = small_seqs(20, 2)
        cfg = small_config(epochs=2, seed=5)
        a = train(cfg, train_seqs=seqs, val_seqs=[]).params.flatten()
        b = train(cfg, train_seqs=seqs, val_seqs=[]).params.flatten()
        np.testing.assert_array_equal(a, b)

    def test_max_steps_cutoff(self):
        seqs = small_seqs(30, 4)
        cfg = small_config(epochs=10, max_steps=3)
        result = train(cfg, train_seqs=seqs, val_seqs=[])
        assert result.steps == 3

    def test_warm_start(self):
        seqs = small_seqs(40, 2)
        cfg = small_config(epochs=1)
        first = train(cfg, train_seqs=seqs, val_seqs=[])
        warmed = train(cfg, train_seqs=seqs, val_seqs=[],
                       init_params=first.params)
        fresh = init_model_params(cfg.arch, cfg.seed)
        assert not np.array_equal(warmed.params.flatten(), fresh.flatten())

    @pytest.mark.parametrize("task", ["spf_sup", "spf_selfsup"])
    def test_forecast_tasks_run(self, task):
        seqs = small_seqs(50, 2)
        cfg = small_config(epochs=1, task=task)
        result = train(cfg, train_seqs=seqs, val_seqs=seqs[:1])
        assert np.isfinite(result.history[0]["train_loss"])
        assert np.isfinite(result.history[0]["val_metric"])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_aborts_with_context(self):
        from seqflow.training import NumericError
        seqs = small_seqs(45, 2)
        cfg = small_config(epochs=1)
        params = init_model_params(cfg.arch, cfg.seed)
        params.load_flat(params.flatten() * 1e200)  # overflow the forward
        with pytest.raises(NumericError, match="epoch 0"):
            train(cfg, train_seqs=seqs, val_seqs=[], init_params=params)

    def test_sequence_loss_requires_flows(self):
        seq = generate_scene(random_scene_spec(
            seed=0, points_per_frame=24, n_frames=4, n_input=2, max_objects=1))
        seq.gt_flows = None
        cfg = small_config(task="ssfe")
        params = init_model_params(cfg.arch, 0)
        with pytest.raises(DataError, match="flows"):
            sequence_loss(seq, params, cfg, None)


class TestEvaluation:
    def test_gt_flows_as_predictions_are_perfect(self):
        # feeding ground truth through the metrics path must score perfectly
        seqs = small_seqs(60, 2)
        from seqflow.metrics import flow_stats
        for seq in seqs:
            st = flow_stats(seq.gt_flows[:2], seq.gt_flows[:2],
                            [f.valid_mask for f in seq.frames[1:3]])
            assert st.epe3d == 0.0 and st.acc3ds == 1.0

    def test_report_shape_and_determinism(self):
        seqs = small_seqs(70, 2)
        cfg = small_config(task="ssfe", epochs=0)
        params = init_model_params(cfg.arch, 0)
        a = evaluate(cfg, params, seqs=seqs)
        b = evaluate(cfg, params, seqs=seqs)
        assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
        assert set(a["aggregate"]) == {"epe3d", "acc3ds", "acc3dr",
                                       "outliers3d", "rect_outliers3d"}
        assert len(a["per_sequence"]) == 2
        assert a["schema_version"] == 1

    def test_spf_report_columns(self):
        seqs = small_seqs(80, 1)
        cfg = small_config(task="spf_sup", epochs=0)
        params = init_model_params(cfg.arch, 0)
        report = evaluate(cfg, params, seqs=seqs)
        assert set(report["aggregate"]) == {"ade", "fde", "cd", "emd", "sd"}
        csv = report_csv(report)
        assert csv.splitlines()[0] == "sequence,ade,fde,cd,emd,sd"
        assert csv.splitlines()[-1].startswith("mean,")

    def test_validation_metric_modes(self):
        seqs = small_seqs(90, 1)
        params = init_model_params(tiny_arch(), 0)
        for task in ("ssfe", "spf_sup", "spf_selfsup"):
            cfg = small_config(task=task, epochs=0)
            v = validation_metric(seqs, params, cfg)
            assert np.isfinite(v)
