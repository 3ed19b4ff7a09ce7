from __future__ import annotations

import math
import struct

import numpy as np
import pytest

from sslscan.harness.bench import (
    EncoderVerdict,
    FixtureConfig,
    build_fixture,
    dacc,
    ensemble,
    summarize,
)
from sslscan.harness.data import (
    SampleSet,
    class_pattern,
    decode_dataset,
    encode_dataset,
    gen_dataset,
    load_dataset,
    save_dataset,
    split_stratified,
)
from sslscan.harness.metrics import eval_acc, eval_asr
from sslscan.harness.plant import PlantConfig, plant_backdoor
from sslscan.harness.train import EncoderConfig, TrainConfig, TrainingError, nt_xent, ssl_train
from sslscan.harness.triggers import (
    TriggerSpec,
    apply_trigger_spec,
    dct2,
    dct_basis,
    idct2,
    load_trigger,
    poison_dataset,
    save_trigger,
)
from sslscan.numkit import EncoderNet, FormatError, encode_encoder, rng_stream

from .oracles import fd_rel_error, fd_scalar_grad

GEOM = (16, 16, 1)


class TestData:
    def test_noiseless_two_classes(self):
        ds = gen_dataset(2, 1, rng_stream(0), noise=0.0)
        assert np.array_equal(ds.x[0], class_pattern(0, 16, 16).ravel().astype(np.float32))
        assert np.array_equal(ds.x[1], class_pattern(1, 16, 16).ravel().astype(np.float32))
        assert not np.array_equal(ds.x[0], ds.x[1])

    def test_label_histogram(self):
        ds = gen_dataset(8, 7, rng_stream(1))
        assert np.array_equal(np.bincount(ds.labels), np.full(8, 7))
        assert ds.x.dtype == np.float32 and ds.x.min() >= 0 and ds.x.max() <= 1

    def test_patterns_distinct(self):
        protos = [class_pattern(c, 16, 16) for c in range(8)]
        for i in range(8):
            for j in range(i):
                assert np.abs(protos[i] - protos[j]).max() > 0.1

    @pytest.mark.parametrize("seed", range(20))
    def test_inter_exceeds_intra(self, seed):
        ds = gen_dataset(8, 10, rng_stream(seed, "sep"))
        d = np.sqrt(((ds.x[:, None, :] - ds.x[None, :, :]) ** 2).sum(-1))
        same = ds.labels[:, None] == ds.labels[None, :]
        off = ~np.eye(ds.n, dtype=bool)
        assert d[~same].mean() > d[same & off].mean()

    def test_errors(self):
        with pytest.raises(ValueError):
            gen_dataset(1, 5, rng_stream(0))
        with pytest.raises(ValueError):
            gen_dataset(8, 5, rng_stream(0), geometry=(6, 6, 1))
        with pytest.raises(ValueError):
            SampleSet(np.full((2, 4), 2.0), (2, 2, 1))

    def test_stratified_split(self):
        ds = gen_dataset(4, 10, rng_stream(0))
        a, b = split_stratified(ds, 0.3, rng_stream(1))
        assert np.array_equal(np.bincount(a.labels), np.full(4, 3))
        assert a.n + b.n == ds.n


class TestDsetFormat:
    @pytest.mark.parametrize("labeled", [True, False])
    def test_round_trip(self, tmp_path, labeled):
        ds = gen_dataset(3, 4, rng_stream(0), geometry=(8, 8, 2))
        if not labeled:
            ds = ds.unlabeled()
        save_dataset(ds, tmp_path / "d.dset")
        back = load_dataset(tmp_path / "d.dset")
        assert back.x.tobytes() == ds.x.tobytes() and back.geometry == ds.geometry
        assert (back.labels is None) == (not labeled)
        if labeled:
            assert np.array_equal(back.labels, ds.labels)
        assert encode_dataset(back) == encode_dataset(ds)

    def test_header_layout(self):
        blob = encode_dataset(gen_dataset(2, 1, rng_stream(0), geometry=(8, 8, 1)))
        assert blob[:4] == b"DSET"
        assert struct.unpack_from("<HIIII", blob, 4) == (1, 2, 8, 8, 1)

    @pytest.mark.parametrize("cut", [3, 10, 30, -1])
    def test_truncated(self, cut):
        blob = encode_dataset(gen_dataset(2, 1, rng_stream(0), geometry=(8, 8, 1)))
        with pytest.raises(FormatError):
            decode_dataset(blob[:cut])

    def test_out_of_range_values(self):
        blob = bytearray(encode_dataset(gen_dataset(2, 1, rng_stream(0), geometry=(8, 8, 1))))
        blob[22:26] = struct.pack("<f", 3.0)
        with pytest.raises(FormatError):
            decode_dataset(bytes(blob))


class TestTriggers:
    def test_patch_on_zero_image(self):
        spec = TriggerSpec("patch")
        out = apply_trigger_spec(np.zeros(256, np.float32), spec, GEOM).reshape(16, 16)
        expect = np.zeros((16, 16))
        expect[12:15, 12:15] = spec.pattern
        assert np.array_equal(out, expect)
        assert int(np.count_nonzero(out)) == 8

    def test_dct_zero_amplitude_round_trip(self):
        x = rng_stream(0).random((5, 256)).astype(np.float32)
        spec = TriggerSpec("global_dct", amplitudes=(0.0,) * 4)
        assert np.max(np.abs(apply_trigger_spec(x, spec, GEOM) - x)) < 1e-5

    def test_dct_round_trip_random(self):
        img = rng_stream(1).random((3, 16, 16, 1))
        assert np.max(np.abs(idct2(dct2(img)) - img)) < 1e-5

    def test_basis_oracle_matches_scipy(self):
        coef = np.zeros((16, 16, 1))
        coef[2, 1, 0] = 1.0
        assert np.allclose(idct2(coef)[:, :, 0], dct_basis(2, 1, 16, 16), atol=1e-12)

    def test_flat_image_change_matches_basis(self):
        spec = TriggerSpec("global_dct")
        x = np.full(256, 0.5, np.float32)
        delta = apply_trigger_spec(x, spec, GEOM).astype(np.float64) - 0.5
        ref = sum(a * dct_basis(u, v, 16, 16) for (u, v), a in zip(spec.coeffs, spec.amplitudes)).ravel()
        assert np.max(np.abs(delta)) <= 0.12
        assert np.max(np.abs(delta)) == pytest.approx(np.max(np.abs(ref)), abs=1e-6)

    def test_patch_outside_geometry(self):
        with pytest.raises(ValueError):
            TriggerSpec("patch", position=(14, 0)).validate(GEOM)

    @pytest.mark.parametrize("kind", ["patch", "global_dct"])
    def test_spec_file_round_trip(self, tmp_path, kind):
        spec = TriggerSpec(kind)
        save_trigger(spec, tmp_path / "t.json")
        assert load_trigger(tmp_path / "t.json") == spec

    def test_bad_spec_file(self, tmp_path):
        (tmp_path / "t.json").write_text('{"kind": "patch"}')
        with pytest.raises(FormatError):
            load_trigger(tmp_path / "t.json")


class TestPoison:
    def test_exact_count_and_isolation(self):
        ds = gen_dataset(4, 100, rng_stream(0))
        out, idx = poison_dataset(ds, TriggerSpec("patch"), 2, 0.5, rng_stream(1))
        assert idx.size == 50 and np.all(ds.labels[idx] == 2)
        changed = np.flatnonzero(np.any(out.x != ds.x, axis=1))
        assert set(changed) <= set(idx)
        assert np.array_equal(out.labels, ds.labels)

    @pytest.mark.parametrize("rate,count", [(1.0, 7), (0.3, 3), (0.01, 1)])
    def test_ceil_count(self, rate, count):
        ds = gen_dataset(3, 7, rng_stream(0))
        _, idx = poison_dataset(ds, TriggerSpec("patch"), 0, rate, rng_stream(2))
        assert idx.size == count == math.ceil(rate * 7 - 1e-9)

    def test_errors(self):
        ds = gen_dataset(3, 7, rng_stream(0))
        with pytest.raises(ValueError):
            poison_dataset(ds, TriggerSpec("patch"), 0, 0.0, rng_stream(0))
        with pytest.raises(ValueError):
            poison_dataset(ds, TriggerSpec("patch"), 5, 0.5, rng_stream(0))


def onehot_encoder(classes: int) -> EncoderNet:
    """Maps each noiseless prototype to (almost) its own axis."""
    protos = np.stack([class_pattern(c, 16, 16).ravel() for c in range(classes)])
    w = np.linalg.pinv(protos) * 10.0
    return EncoderNet([w], [np.zeros(classes)], "relu", normalize=True)


def brute_acc(enc, test: SampleSet, ref: SampleSet) -> float:
    zr, zt = enc(ref.x).astype(np.float64), enc(test.x).astype(np.float64)
    cents = {c: zr[ref.labels == c].mean(axis=0) for c in set(ref.labels.tolist())}
    hits = 0
    for z, y in zip(zt, test.labels):
        best = min(sorted(cents), key=lambda c: float(np.sum((z - cents[c]) ** 2)))
        hits += best == y
    return hits / test.n


class TestMetrics:
    def test_onehot_encoder_perfect(self):
        ds = gen_dataset(4, 10, rng_stream(0), noise=0.0)
        assert eval_acc(onehot_encoder(4), ds, ds) == 1.0

    def test_constant_encoder_chance(self):
        ds = gen_dataset(8, 10, rng_stream(0))
        enc = EncoderNet([np.zeros((256, 3))], [np.ones(3)], "relu", True)
        assert eval_acc(enc, ds, ds) == pytest.approx(1 / 8)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force(self, seed):
        ds = gen_dataset(4, 5, rng_stream(seed, "m"))
        ref, test = split_stratified(ds, 0.4, rng_stream(seed, "s"))
        enc = EncoderNet.init([256, 6, 4], rng_stream(seed, "e"))
        assert abs(eval_acc(enc, test, ref) - brute_acc(enc, test, ref)) < 1e-12

    def test_hardwired_asr(self):
        # a trigger that paints the whole image with the class-0 prototype
        spec = TriggerSpec("patch", position=(0, 0), pattern=tuple(map(tuple, class_pattern(0, 16, 16))))
        ds = gen_dataset(4, 10, rng_stream(0), noise=0.0)
        assert eval_asr(onehot_encoder(4), ds, spec, 0, ds) == 1.0

    def test_asr_excludes_target(self):
        # every triggered non-target sample lands on class 1, so ASR for
        # target 1 is 1 although target-class samples were never counted
        spec = TriggerSpec("patch", position=(0, 0), pattern=tuple(map(tuple, class_pattern(1, 16, 16))))
        ds = gen_dataset(4, 10, rng_stream(0), noise=0.0)
        assert eval_asr(onehot_encoder(4), ds, spec, 1, ds) == 1.0

    def test_missing_labels(self):
        ds = gen_dataset(2, 3, rng_stream(0))
        with pytest.raises(ValueError):
            eval_acc(onehot_encoder(2), ds.unlabeled(), ds)


class TestTraining:
    def test_nt_xent_gradient_fd(self):
        rng = rng_stream(0, "nt")
        z1, z2 = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        _, g1, g2 = nt_xent(z1, z2, 0.5)
        assert fd_rel_error(g1, fd_scalar_grad(lambda: nt_xent(z1, z2, 0.5)[0], z1, 1e-6)) < 1e-6
        assert fd_rel_error(g2, fd_scalar_grad(lambda: nt_xent(z1, z2, 0.5)[0], z2, 1e-6)) < 1e-6

    def test_nt_xent_hand_value(self):
        # two pairs of identical orthogonal unit vectors
        z = np.eye(2)
        s = 1 / 0.5
        expect = np.log(np.exp(s) + 2 * np.exp(0)) - s
        assert nt_xent(z, z, 0.5)[0] == pytest.approx(expect)

    def test_zero_epochs_is_init(self):
        ds = gen_dataset(2, 4, rng_stream(0))
        enc = ssl_train(ds, EncoderConfig(), TrainConfig(epochs=0), rng_stream(3, "t"))
        ref = EncoderNet.init([256, 128, 32], rng_stream(3, "t"))
        assert encode_encoder(enc) == encode_encoder(ref)

    def test_determinism(self):
        ds = gen_dataset(4, 16, rng_stream(0))
        cfg = TrainConfig(epochs=2, batch_size=32)
        a = ssl_train(ds, EncoderConfig((256, 16, 8)), cfg, rng_stream(1, "t"))
        b = ssl_train(ds, EncoderConfig((256, 16, 8)), cfg, rng_stream(1, "t"))
        assert encode_encoder(a) == encode_encoder(b)

    def test_divergence_reported(self):
        ds = gen_dataset(2, 8, rng_stream(0))
        big = EncoderNet.init([256, 4], rng_stream(0))
        big.weights[0][:] = np.nan
        with pytest.raises((TrainingError, FloatingPointError)):
            ssl_train(ds, EncoderConfig(), TrainConfig(epochs=1), rng_stream(0), init=big)

    def test_clean_training_accuracy(self):
        fx = build_fixture("clean", 0)
        assert fx.acc() >= 0.9


class TestPlant:
    def test_teacher_untouched_and_attack_learned(self):
        ds = gen_dataset(4, 40, rng_stream(0), noise=0.02)
        f0 = ssl_train(ds, EncoderConfig((256, 32, 16)), TrainConfig(epochs=5, batch_size=32), rng_stream(0, "t"))
        before = encode_encoder(f0)
        spec = TriggerSpec("patch")
        f = plant_backdoor(f0, ds.x, ds.x[ds.labels == 0], spec, rng_stream(0, "p"), GEOM, PlantConfig(epochs=30, batch_size=32))
        assert encode_encoder(f0) == before
        assert eval_asr(f, ds, spec, 0, ds) > eval_asr(f0, ds, spec, 0, ds)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            PlantConfig(batch_size=0).validate()


class TestBenchAccounting:
    def verdict(self, trojaned: bool, flagged: bool) -> EncoderVerdict:
        return EncoderVerdict("patch" if trojaned else "clean", 0, trojaned, "trojaned" if flagged else "benign", 3, [], 1.0, 0.0)

    def test_all_clean_perfect(self):
        rep = summarize([self.verdict(False, False) for _ in range(4)], 0.1)
        assert (rep.tp, rep.fp, rep.dacc) == (0, 0, 1.0)

    @pytest.mark.parametrize("tp,fp", [(0, 0), (3, 1), (5, 5), (2, 4)])
    def test_identity(self, tp, fp):
        vs = [self.verdict(True, i < tp) for i in range(5)] + [self.verdict(False, i < fp) for i in range(5)]
        rep = summarize(vs, 0.1)
        assert rep.dacc == dacc(tp, fp, 5, 5) == (tp + (5 - fp)) / 10
        assert rep.dacc == sum(v.correct for v in vs) / len(vs)

    def test_ensemble_mix_and_seeds(self):
        members = ensemble(3, 4, 0)
        assert [k for k, _ in members] == ["clean"] * 3 + ["patch", "global_dct"] * 2
        assert len({s for _, s in members}) == 7
        assert members == ensemble(3, 4, 0)
        with pytest.raises(ValueError):
            ensemble(1, 0, 0)

    def test_fixture_config_validation(self):
        with pytest.raises(ValueError):
            FixtureConfig(attack="magic").validate()
        with pytest.raises(ValueError):
            FixtureConfig(target_class=9).validate()
