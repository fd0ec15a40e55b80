"""Architecture: parameter accounting, forward shapes, stream isolation,
transfer adaptations, and checkpoint round-trips.

The parameter-count oracle below is standalone arithmetic over the layer
recipe (stem, 4x[res + down], 3 bottleneck res, 4 decoder stages per stream,
head, auxiliary tail); it never calls into the library's plan.
"""

import numpy as np
import pytest

from vesselseg import autodiff as ad
from vesselseg import network as net
from vesselseg.errors import CheckpointError, ConfigError, ShapeError


def expected_param_count(base, in_ch, num_classes, aux):
    def conv(cin, cout):         # weight + bias + gamma + beta
        return cin * cout * 9 + 3 * cout

    def trconv(cin, cout):
        return cin * cout * 4 + 3 * cout

    def plain(cin, cout):
        return cin * cout + cout

    c = [base * 2 ** r for r in range(5)]
    total = conv(in_ch, c[0])                               # stem
    for r in range(4):
        total += 2 * conv(c[r], c[r]) + conv(c[r], c[r + 1])
    total += 3 * 2 * conv(c[4], c[4])                       # bottleneck
    streams = 2 if aux else 1
    for s in range(4):
        total += streams * (trconv(c[4 - s], c[3 - s])
                            + 2 * conv(c[3 - s], c[3 - s]))
    total += 2 * conv(c[0], c[0]) + plain(c[0], num_classes)
    if aux:
        total += plain(c[0], in_ch)
    return total


def tiny_config(**kw):
    base = dict(input_channels=1, num_classes=2, base_channels=2,
                dropout_rate=0.1, aux_enabled=True)
    base.update(kw)
    return net.ModelConfig(**base)


class TestBuild:
    def test_parameter_count_oracle(self):
        for base, in_ch, k, aux in [(32, 1, 3, True), (8, 1, 3, False),
                                    (4, 3, 2, True)]:
            cfg = net.ModelConfig(input_channels=in_ch, num_classes=k,
                                  base_channels=base, aux_enabled=aux)
            model = net.build_model(cfg, init_seed=0)
            assert model.parameter_count() == expected_param_count(
                base, in_ch, k, aux)

    def test_same_seed_bit_identical(self):
        a = net.build_model(tiny_config(), init_seed=42)
        b = net.build_model(tiny_config(), init_seed=42)
        assert set(a.params) == set(b.params)
        for name in a.params:
            assert np.array_equal(a.params[name].data, b.params[name].data)

    def test_different_seed_differs(self):
        a = net.build_model(tiny_config(), init_seed=1)
        b = net.build_model(tiny_config(), init_seed=2)
        assert not np.array_equal(a.params["stem.weight"].data,
                                  b.params["stem.weight"].data)

    def test_aux_flag_controls_parameters(self):
        with_aux = net.build_model(tiny_config(aux_enabled=True), init_seed=3)
        without = net.build_model(tiny_config(aux_enabled=False), init_seed=3)
        aux_names = [n for n in with_aux.params if n.startswith("aux")]
        assert aux_names
        assert not [n for n in without.params if n.startswith("aux")]
        # the main stream must not shift when the aux stream is added
        for name in without.params:
            assert np.array_equal(without.params[name].data,
                                  with_aux.params[name].data)

    def test_config_validation(self):
        with pytest.raises(ConfigError, match="num_resolutions"):
            net.build_model(tiny_config(num_resolutions=3))
        with pytest.raises(ConfigError, match="num_classes"):
            net.build_model(tiny_config(num_classes=1))
        with pytest.raises(ConfigError, match="dropout_rate"):
            net.build_model(tiny_config(dropout_rate=1.0))
        with pytest.raises(ConfigError, match="base_channels"):
            net.build_model(tiny_config(base_channels=0))
        with pytest.raises(ConfigError, match="input_channels"):
            net.build_model(tiny_config(input_channels=0))

    def test_he_uniform_bounds(self):
        model = net.build_model(tiny_config(base_channels=8), init_seed=9)
        w = model.params["enc1.res.conv1.weight"].data   # 16 channels, 3x3
        limit = np.sqrt(6.0 / (16 * 9))
        assert np.all(np.abs(w) <= limit)
        assert w.std() > 0.2 * limit


class TestForward:
    def test_output_shapes(self):
        model = net.build_model(tiny_config(), init_seed=0)
        rng = np.random.default_rng(0)
        logits, recon = net.forward(model, rng.random((1, 1, 64, 64)), mode="eval")
        assert logits.shape == (1, 2, 64, 64)
        assert recon.shape == (1, 1, 64, 64)
        logits, recon = net.forward(model, rng.random((2, 1, 32, 48)), mode="eval")
        assert logits.shape == (2, 2, 32, 48)
        assert recon.shape == (2, 1, 32, 48)

    def test_no_recon_without_aux(self):
        model = net.build_model(tiny_config(aux_enabled=False), init_seed=0)
        x = np.random.default_rng(1).random((1, 1, 16, 16))
        logits, recon = net.forward(model, x, mode="eval")
        assert recon is None and logits.shape == (1, 2, 16, 16)

    def test_outputs_finite(self):
        model = net.build_model(tiny_config(base_channels=4), init_seed=7)
        x = np.random.default_rng(2).random((2, 1, 32, 32))
        logits, recon = net.forward(model, x, mode="train", rng_seed=1)
        assert np.all(np.isfinite(logits.data))
        assert np.all(np.isfinite(recon.data))
        assert np.all(recon.data >= 0.0)

    def test_eval_mode_deterministic(self):
        model = net.build_model(tiny_config(), init_seed=0)
        x = np.random.default_rng(3).random((1, 1, 16, 16))
        with ad.no_grad():
            a, _ = net.forward(model, x, mode="eval")
            b, _ = net.forward(model, x, mode="eval")
        assert np.array_equal(a.data, b.data)

    def test_train_mode_seeded(self):
        model = net.build_model(tiny_config(), init_seed=0)
        x = np.random.default_rng(4).random((1, 1, 16, 16))
        with ad.no_grad():
            a, _ = net.forward(model.clone(), x, mode="train", rng_seed=11)
            b, _ = net.forward(model.clone(), x, mode="train", rng_seed=11)
            c, _ = net.forward(model.clone(), x, mode="train", rng_seed=12)
        assert np.array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)

    def test_input_validation(self):
        model = net.build_model(tiny_config(), init_seed=0)
        with pytest.raises(ShapeError):
            net.forward(model, np.zeros((1, 1, 30, 32)), mode="eval")
        with pytest.raises(ShapeError):
            net.forward(model, np.zeros((1, 2, 32, 32)), mode="eval")
        with pytest.raises(ShapeError):
            net.forward(model, np.zeros((1, 32, 32)), mode="eval")
        with pytest.raises(ConfigError):
            net.forward(model, np.zeros((1, 1, 32, 32)), mode="predict")

    def test_main_stream_ignores_aux_stream(self):
        """Same seed, aux on vs off: identical logits in both modes."""
        x = np.random.default_rng(5).random((1, 1, 32, 32))
        for mode in ("train", "eval"):
            a = net.build_model(tiny_config(aux_enabled=True), init_seed=6)
            b = net.build_model(tiny_config(aux_enabled=False), init_seed=6)
            with ad.no_grad():
                la, _ = net.forward(a, x, mode=mode, rng_seed=3)
                lb, _ = net.forward(b, x, mode=mode, rng_seed=3)
            assert np.array_equal(la.data, lb.data)

    def test_zeroed_decoder_passes_skips_through(self):
        """With every decoder weight nulled, each stage reduces to the
        encoder skip, so the last decoder output equals the first encoder
        residual output."""
        model = net.build_model(tiny_config(dropout_rate=0.0), init_seed=8)
        for name, p in model.params.items():
            if name.startswith("dec"):
                p.data[:] = 0.0
        captured = {}
        with ad.no_grad():
            net.forward(model, np.random.default_rng(6).random((1, 1, 32, 32)),
                        mode="eval", capture=captured)
        assert np.array_equal(captured["dec3.out"], captured["enc0.res"])

    def test_end_to_end_gradients(self):
        model = net.build_model(tiny_config(), init_seed=10)
        x = np.random.default_rng(7).random((1, 1, 16, 16))
        probes = [model.params[n] for n in
                  ["stem.weight", "head.out.bias", "enc0.res.conv1.gamma",
                   "dec3.res.conv2.beta", "aux.out.bias"]]

        def fn(_):
            logits, recon = net.forward(model, x, mode="train", rng_seed=99)
            return ad.add(logits.sum(), recon.sum())

        # the deep composite is stiff (batch-norm rescaling at small batch
        # variance), so a finer probe keeps truncation error in budget
        assert ad.grad_check(fn, probes, probe_eps=1e-6) < 1e-4


class TestAdaptations:
    def test_adapt_head(self):
        src = net.build_model(tiny_config(num_classes=3), init_seed=0)
        dst = net.adapt_head(src, 2, init_seed=5)
        assert dst.config.num_classes == 2 and not dst.config.aux_enabled
        assert dst.params["head.out.weight"].shape == (2, 2, 1, 1)
        assert not [n for n in dst.params if n.startswith("aux")]
        for name, p in dst.params.items():
            if not name.startswith("head.out"):
                assert np.array_equal(p.data, src.params[name].data)
        logits, recon = net.forward(dst, np.zeros((1, 1, 64, 64)), mode="eval")
        assert logits.shape == (1, 2, 64, 64) and recon is None

    def test_adapt_head_same_count_reinitializes_head_only(self):
        src = net.build_model(tiny_config(num_classes=3), init_seed=0)
        dst = net.adapt_head(src, 3, init_seed=77)
        assert not np.array_equal(dst.params["head.out.weight"].data,
                                  src.params["head.out.weight"].data)
        for name, p in dst.params.items():
            if not name.startswith("head.out"):
                assert np.array_equal(p.data, src.params[name].data)

    def test_adapt_head_rejects_zero(self):
        src = net.build_model(tiny_config(), init_seed=0)
        with pytest.raises(ConfigError):
            net.adapt_head(src, 0)

    def test_adapt_input_identity(self):
        src = net.build_model(tiny_config(), init_seed=0)
        same = net.adapt_input(src, 1)
        for name, p in same.params.items():
            assert np.array_equal(p.data, src.params[name].data)

    def test_adapt_input_1_to_3(self):
        src = net.build_model(tiny_config(), init_seed=4)
        dst = net.adapt_input(src, 3)
        x = np.random.default_rng(8).random((1, 1, 32, 32))
        x3 = np.repeat(x, 3, axis=1)
        with ad.no_grad():
            l1, r1 = net.forward(src, x, mode="eval")
            l3, r3 = net.forward(dst, x3, mode="eval")
        assert np.max(np.abs(l1.data - l3.data)) < 1e-9
        for c in range(3):
            assert np.max(np.abs(r3.data[:, c] - r1.data[:, 0])) < 1e-9

    def test_adapt_input_3_to_1(self):
        src = net.build_model(tiny_config(input_channels=3), init_seed=4)
        dst = net.adapt_input(src, 1)
        plane = np.random.default_rng(9).random((1, 1, 32, 32))
        x3 = np.repeat(plane, 3, axis=1)
        with ad.no_grad():
            l3, _ = net.forward(src, x3, mode="eval")
            l1, _ = net.forward(dst, plane, mode="eval")
        assert np.max(np.abs(l3.data - l1.data)) < 1e-9

    def test_adapt_input_rejects_zero(self):
        src = net.build_model(tiny_config(), init_seed=0)
        with pytest.raises(ConfigError):
            net.adapt_input(src, 0)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        model = net.build_model(tiny_config(base_channels=4), init_seed=0)
        # perturb running stats so they are not the init values
        x = np.random.default_rng(10).random((2, 1, 16, 16))
        with ad.no_grad():
            net.forward(model, x, mode="train", rng_seed=0)
        path = tmp_path / "model.ckpt"
        net.save_checkpoint(model, path)
        loaded = net.load_checkpoint(path)
        assert loaded.config == model.config
        assert set(loaded.params) == set(model.params)
        for name in model.params:
            assert np.array_equal(loaded.params[name].data,
                                  model.params[name].data)
        for name in model.bn_stats:
            for key in ("mean", "var"):
                assert np.array_equal(loaded.bn_stats[name][key],
                                      model.bn_stats[name][key])

    def test_save_load_save_identical_bytes(self, tmp_path):
        model = net.build_model(tiny_config(), init_seed=1)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        net.save_checkpoint(model, p1)
        net.save_checkpoint(net.load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_forward_equal_after_load(self, tmp_path):
        model = net.build_model(tiny_config(), init_seed=2)
        path = tmp_path / "m.ckpt"
        net.save_checkpoint(model, path)
        loaded = net.load_checkpoint(path)
        x = np.random.default_rng(11).random((1, 1, 16, 16))
        with ad.no_grad():
            a, _ = net.forward(model, x, mode="eval")
            b, _ = net.forward(loaded, x, mode="eval")
        assert np.array_equal(a.data, b.data)

    def test_truncated_rejected(self, tmp_path):
        model = net.build_model(tiny_config(), init_seed=3)
        path = tmp_path / "m.ckpt"
        net.save_checkpoint(model, path)
        blob = path.read_bytes()
        for cut in (4, len(blob) // 2, len(blob) - 3):
            bad = tmp_path / "bad.ckpt"
            bad.write_bytes(blob[:cut])
            with pytest.raises(CheckpointError):
                net.load_checkpoint(bad)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
        with pytest.raises(CheckpointError):
            net.load_checkpoint(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        model = net.build_model(tiny_config(), init_seed=3)
        path = tmp_path / "m.ckpt"
        net.save_checkpoint(model, path)
        path.write_bytes(path.read_bytes() + b"extra")
        with pytest.raises(CheckpointError):
            net.load_checkpoint(path)
