import numpy as np
import pytest

from epnkit.train.checkpoint import load_checkpoint, save_checkpoint
from epnkit.train.config import TrainConfig, load_config, parse_config_text
from epnkit.train.optim import Adam, decayed_learning_rate


class TestAdam:
    def test_zero_gradient_leaves_parameters_unchanged(self):
        p = np.array([1.5, -2.0, 0.25])
        adam = Adam({"p": p}, learning_rate=0.1)
        adam.step({"p": np.zeros(3)})
        np.testing.assert_array_equal(p, [1.5, -2.0, 0.25])

    def test_first_step_matches_hand_formula(self):
        # bias correction cancels on the first step: delta = -lr * g / (|g| + eps)
        p = np.array([2.0])
        g = np.array([0.37])
        lr, eps = 0.01, 1e-8
        adam = Adam({"p": p}, learning_rate=lr, eps=eps)
        adam.step({"p": g.copy()})
        expected = 2.0 - lr * 0.37 / (0.37 + eps)
        assert p[0] == pytest.approx(expected, abs=1e-15)

    def test_second_step_matches_hand_recursion(self):
        p = np.array([0.0])
        b1, b2, lr, eps = 0.9, 0.999, 0.05, 1e-8
        adam = Adam({"p": p}, learning_rate=lr, beta1=b1, beta2=b2, eps=eps)
        g1, g2 = 0.5, -0.2
        adam.step({"p": np.array([g1])})
        adam.step({"p": np.array([g2])})
        m = (1 - b1) * g1
        v = (1 - b2) * g1 * g1
        x = -lr * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
        m = b1 * m + (1 - b1) * g2
        v = b2 * v + (1 - b2) * g2 * g2
        x -= lr * (m / (1 - b1**2)) / (np.sqrt(v / (1 - b2**2)) + eps)
        assert p[0] == pytest.approx(x, abs=1e-15)


def test_learning_rate_halving_schedule():
    assert decayed_learning_rate(0.001, 100, 50) == pytest.approx(0.00025)
    assert decayed_learning_rate(0.001, 0, 50) == 0.001
    assert decayed_learning_rate(0.001, 49, 50) == 0.001
    assert decayed_learning_rate(0.001, 50, 50) == 0.0005
    assert decayed_learning_rate(0.001, 149, 50) == pytest.approx(0.00025)
    assert decayed_learning_rate(0.001, 7, 0) == 0.001  # decay disabled


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path, rng):
        arrays = {
            "level0.point.weights": rng.standard_normal((3, 2, 4)),
            "fc.bias": rng.standard_normal(5),
            "scalarish": rng.standard_normal((1,)),
        }
        path = tmp_path / "model.epn1"
        save_checkpoint(path, arrays)
        back = load_checkpoint(path)
        assert set(back) == set(arrays)
        for k in arrays:
            np.testing.assert_array_equal(back[k], arrays[k])

    def test_files_are_byte_reproducible(self, tmp_path, rng):
        arrays = {"b": rng.standard_normal((2, 2)), "a": rng.standard_normal(3)}
        p1, p2 = tmp_path / "one.epn1", tmp_path / "two.epn1"
        save_checkpoint(p1, arrays)
        save_checkpoint(p2, dict(reversed(list(arrays.items()))))  # insertion order differs
        assert p1.read_bytes() == p2.read_bytes()

    def test_magic_guard(self, tmp_path):
        path = tmp_path / "bad.epn1"
        path.write_bytes(b"NOPE" + b"\x00" * 8)
        with pytest.raises(ValueError):
            load_checkpoint(path)


class TestConfig:
    def test_defaults_roundtrip(self):
        cfg = parse_config_text("")
        assert cfg == TrainConfig()

    def test_parse_typical_file(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text(
            """
            # pose toy
            seed = 3
            learning_rate = 0.002
            radii = 0.3, 0.6
            k_max = 8,8
            channels = 4, 8
            pooling = max, mean
            compare_baseline = on
            head = quaternion
            """
        )
        cfg = load_config(path)
        assert cfg.seed == 3
        assert cfg.learning_rate == 0.002
        assert cfg.radii == (0.3, 0.6)
        assert cfg.k_max == (8, 8)
        assert cfg.channels == (4, 8)
        assert cfg.pooling == ("max", "mean")
        assert cfg.compare_baseline is True
        assert cfg.head == "quaternion"

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config key"):
            parse_config_text("learning_rte = 0.01\n")

    def test_malformed_line_rejected(self):
        with pytest.raises(ValueError, match="key = value"):
            parse_config_text("just some words\n")

    def test_mismatched_level_lists_rejected(self):
        with pytest.raises(ValueError, match="per level"):
            parse_config_text("levels = 3\nradii = 0.4, 0.8\n")

    def test_overrides_win(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("seed = 1\n")
        assert load_config(path, seed=9).seed == 9
