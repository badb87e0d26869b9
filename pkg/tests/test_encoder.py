import numpy as np
import pytest

from aasv.corpus import UtteranceSpec, gen_speaker, synth_utterance
from aasv.encoder import (
    Architecture,
    Encoder,
    SpeakerDataset,
    TrainConfig,
    embed,
    embed_many,
    finetune,
    load_encoder,
    save_encoder,
    train_encoder,
    wse_merge,
)
from aasv.evaluation import cosine
from aasv.features import level_norm, logmel
from aasv.nn import StatsPool

SMALL = Architecture(n_mels=80, channels=8, bottleneck=16, dim=8)


def stationary_feats(seconds=4.0):
    t = np.arange(int(seconds * 16000)) / 16000
    x = 0.3 * np.sin(2 * np.pi * 220 * t) + 0.2 * np.sin(2 * np.pi * 1300 * t)
    x += 0.01 * np.random.default_rng(0).standard_normal(t.size)
    return level_norm(logmel(x.astype(np.float32)))


def tiny_dataset(n_spk=4, n_utt=3, seed=0, domain="adult", severity=0.0):
    rng = np.random.default_rng(seed)
    wavs, spk = [], []
    for i in range(n_spk):
        p = gen_speaker(domain, severity, rng, f"s{i}")
        for u in range(n_utt):
            wavs.append(synth_utterance(p, UtteranceSpec(f"s{i}-{u}", p.speaker_id, 1.0, -40.0, 100 * i + u)))
            spk.append(p.speaker_id)
    return SpeakerDataset(wavs, spk)


class TestEmbed:
    @pytest.mark.parametrize("frames", [50, 198, 400])
    def test_dimension_independent_of_length(self, frames):
        enc = Encoder(seed=0)
        e = embed(np.random.default_rng(frames).normal(size=(frames, 80)).astype(np.float32), enc)
        assert e.shape == (64,) and np.all(np.isfinite(e))

    def test_crops_of_stationary_signal_agree(self):
        f = stationary_feats()
        enc = Encoder(seed=1)
        assert cosine(embed(f[:198], enc), embed(f[150:348], enc)) > 0.99

    def test_constant_input_has_zero_std(self):
        enc = Encoder(seed=2)
        feats = np.tile(np.random.default_rng(0).normal(size=80).astype(np.float32), (1, 120, 1))
        pooled = enc.pooled(feats)[0]
        # interior frames are identical; only the zero-padded edges move the std
        assert np.max(np.abs(pooled[128:])) < 0.2 * np.max(np.abs(pooled[:128]))
        no_pad = Encoder(Architecture(widths=(1, 1, 1)), seed=2)
        # std is floored at sqrt(eps)
        np.testing.assert_allclose(no_pad.pooled(feats)[0][128:], np.sqrt(StatsPool().eps), rtol=1e-3)

    def test_embed_many_matches_embed(self):
        enc = Encoder(SMALL, seed=3)
        rng = np.random.default_rng(0)
        feats = [rng.normal(size=(n, 80)).astype(np.float32) for n in (60, 90, 60, 75)]
        batch = embed_many(feats, enc, batch_size=2)
        for f, e in zip(feats, batch):
            np.testing.assert_allclose(e, embed(f, enc), rtol=1e-5, atol=1e-6)

    def test_bad_input(self):
        with pytest.raises(ValueError):
            embed(np.zeros((10, 40), np.float32), Encoder(SMALL))
        with pytest.raises(ValueError):
            embed(np.zeros((0, 80), np.float32), Encoder(SMALL))


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        enc = Encoder(SMALL, seed=4)
        save_encoder(tmp_path / "e.ckpt", enc, epoch=3)
        back, head, header = load_encoder(tmp_path / "e.ckpt")
        assert head is None and header["epoch"] == 3 and header["d"] == 8
        f = np.random.default_rng(0).normal(size=(40, 80)).astype(np.float32)
        np.testing.assert_array_equal(embed(f, back), embed(f, enc))

    def test_architecture_mismatch(self):
        with pytest.raises(ValueError):
            Encoder(SMALL).load_state(Encoder(Architecture(channels=6, bottleneck=16, dim=8)).state())

    def test_default_architecture_shapes(self):
        state = Encoder().state()
        assert state["conv1.w"].shape == (80 * 5, 64) and state["fc.w"].shape == (256, 64)


class TestTraining:
    def test_zero_epochs_is_initialisation(self):
        data = tiny_dataset()
        cfg = TrainConfig(epochs=0, seed=5)
        enc, _, log = train_encoder(data, cfg, SMALL)
        fresh = Encoder(SMALL, seed=5)
        for k, v in fresh.state().items():
            np.testing.assert_array_equal(enc.state()[k], v)
        assert log.loss == []

    def test_same_seed_identical_checkpoints(self, tmp_path):
        data = tiny_dataset()
        cfg = TrainConfig(epochs=1, batch_size=4, seed=6)
        for name in ("a", "b"):
            enc, head, _ = train_encoder(data, cfg, SMALL)
            save_encoder(tmp_path / f"{name}.ckpt", enc, head)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_learns_speakers(self):
        data = tiny_dataset(n_spk=10, n_utt=20, seed=1)
        cfg = TrainConfig(epochs=12, batch_size=16, seed=0, crop_frames=98)
        _, _, log = train_encoder(data, cfg)
        assert log.epoch_accuracy[-1] > 0.9
        assert log.epoch_loss[-1] < log.epoch_loss[0]

    def test_finetune_zero_epochs_keeps_weights(self):
        base = Encoder(SMALL, seed=7)
        enc, head, _ = finetune(base, tiny_dataset(domain="child", severity=0.8), TrainConfig(epochs=0))
        for k, v in base.state().items():
            np.testing.assert_array_equal(enc.state()[k], v)
        assert head.params["w"].value.shape[0] == 4

    def test_finetune_does_not_touch_source(self):
        base = Encoder(SMALL, seed=7)
        before = {k: v.copy() for k, v in base.state().items()}
        finetune(base, tiny_dataset(domain="child", severity=0.8), TrainConfig(epochs=1, batch_size=4))
        for k, v in before.items():
            np.testing.assert_array_equal(base.state()[k], v)

    def test_finetune_arch_mismatch(self):
        with pytest.raises(ValueError):
            finetune(Encoder(SMALL), tiny_dataset(), TrainConfig(epochs=0), Architecture())

    def test_needs_two_speakers(self):
        with pytest.raises(ValueError):
            train_encoder(tiny_dataset(n_spk=1), TrainConfig(epochs=1), SMALL)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=-1)


class TestWse:
    def test_endpoints_exact(self):
        a, c = Encoder(SMALL, seed=1), Encoder(SMALL, seed=2)
        for alpha, ref in ((1.0, a), (0.0, c)):
            merged = wse_merge(a, c, alpha)
            for k, v in ref.state().items():
                np.testing.assert_array_equal(merged.state()[k], v)

    def test_midpoint(self):
        a, c = Encoder(SMALL, seed=1), Encoder(SMALL, seed=2)
        sa, sc = a.state(), c.state()
        sa["fc.b"] = np.full_like(sa["fc.b"], 2.0)
        sc["fc.b"] = np.full_like(sc["fc.b"], 4.0)
        a.load_state(sa)
        c.load_state(sc)
        np.testing.assert_array_equal(wse_merge(a, c, 0.5).state()["fc.b"], 3.0)

    def test_errors(self):
        with pytest.raises(ValueError):
            wse_merge(Encoder(SMALL), Encoder(SMALL), 1.5)
        with pytest.raises(ValueError):
            wse_merge(Encoder(SMALL), Encoder(Architecture(channels=6, bottleneck=16, dim=8)))
