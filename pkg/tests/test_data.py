import zlib

import numpy as np
import pytest

from signseq.data import (Checkpoint, CorpusConfig, DATA_MAGIC,
                          average_checkpoint_files, config_digest, generate_split,
                          gloss_prototypes, glosses_to_words, load_checkpoint,
                          load_dataset, save_checkpoint, save_dataset,
                          words_to_glosses)


def small_cfg(**kw):
    base = dict(seed=3, n_gloss=6, d_in=4, n_train=5, n_dev=3, n_test=2,
                min_glosses=2, max_glosses=4, min_frames=3, max_frames=6)
    base.update(kw)
    return CorpusConfig(**base)


class TestWordMapping:
    def test_roundtrip_every_short_sequence(self):
        cfg = small_cfg()
        import itertools
        for u in range(1, cfg.max_glosses + 1):
            for seq in itertools.product(range(1, cfg.n_gloss + 1), repeat=u):
                words = glosses_to_words(seq, cfg)
                assert words_to_glosses(words, cfg) == list(seq)

    def test_swap_and_length_word(self):
        cfg = small_cfg()
        # pairs swapped, odd tail kept, length word appended last
        words = glosses_to_words([1, 2, 3], cfg)
        assert words == [2 + 2, 2 + 1, 2 + 3, 2 + cfg.n_gloss + 3]

    def test_order_actually_differs(self):
        cfg = small_cfg()
        words = glosses_to_words([1, 2], cfg)
        assert words[:2] != [3, 4]

    def test_rejects_bad_sentences(self):
        cfg = small_cfg()
        with pytest.raises(ValueError):
            words_to_glosses([], cfg)
        with pytest.raises(ValueError):
            words_to_glosses([3, 4], cfg)  # last word is not a length word
        good = glosses_to_words([1, 2], cfg)
        with pytest.raises(ValueError):
            words_to_glosses(good[:-1] + [2 + cfg.n_gloss + 4], cfg)  # wrong length claim
        with pytest.raises(ValueError):
            glosses_to_words([1] * (cfg.max_glosses + 1), cfg)

    def test_vocab_size(self):
        cfg = small_cfg()
        assert cfg.n_words == 3 + 6 + 4
        words = glosses_to_words([cfg.n_gloss] * cfg.max_glosses, cfg)
        assert max(words) == cfg.n_words - 1


class TestGeneration:
    def test_prototypes_fixed_by_seed(self):
        a = gloss_prototypes(small_cfg())
        b = gloss_prototypes(small_cfg())
        c = gloss_prototypes(small_cfg(seed=4))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_split_determinism_and_independence(self):
        cfg = small_cfg()
        t1 = generate_split(cfg, "train")
        t2 = generate_split(cfg, "train")
        for a, b in zip(t1, t2):
            assert np.array_equal(a.features, b.features)
            assert np.array_equal(a.glosses, b.glosses)
        dev = generate_split(cfg, "dev")
        assert not np.array_equal(t1[0].features[:3], dev[0].features[:3])

    def test_sample_internal_consistency(self):
        cfg = small_cfg()
        for s in generate_split(cfg, "train"):
            u = len(s.glosses)
            assert cfg.min_glosses <= u <= cfg.max_glosses
            assert s.boundaries.shape == (u + 1,)
            assert s.boundaries[0] == 0 and s.boundaries[-1] == s.length
            seg = np.diff(s.boundaries)
            assert (seg >= cfg.min_frames).all() and (seg <= cfg.max_frames).all()
            assert s.words.tolist() == glosses_to_words(s.glosses, cfg)
            assert s.features.dtype == np.float32
            assert np.isfinite(s.features).all()

    def test_segments_cluster_around_prototypes(self):
        cfg = small_cfg(noise=0.1)
        protos = gloss_prototypes(cfg)
        s = generate_split(cfg, "train")[0]
        for i, g in enumerate(s.glosses):
            seg = s.features[s.boundaries[i]:s.boundaries[i + 1]]
            d = np.linalg.norm(protos - seg.mean(axis=0), axis=1)
            assert d.argmin() == g - 1

    def test_unknown_split_rejected(self):
        with pytest.raises(ValueError):
            generate_split(small_cfg(), "validation")

    def test_validate_min_video(self):
        cfg = small_cfg()  # shortest video 2 * 3 = 6 frames
        cfg.validate_min_video(6)
        with pytest.raises(ValueError):
            cfg.validate_min_video(7)


class TestDatasetIO:
    def test_roundtrip_bit_exact(self, tmp_path):
        cfg = small_cfg()
        samples = generate_split(cfg, "dev")
        p = tmp_path / "dev.bin"
        save_dataset(p, samples, cfg, "dev")
        loaded, meta = load_dataset(p)
        assert meta["split"] == "dev"
        assert meta["corpus"] == cfg.to_dict()
        assert len(loaded) == len(samples)
        for a, b in zip(samples, loaded):
            assert np.array_equal(a.features, b.features)
            assert np.array_equal(a.glosses, b.glosses)
            assert np.array_equal(a.words, b.words)
            assert np.array_equal(a.boundaries, b.boundaries)

    def test_rewrite_is_byte_identical(self, tmp_path):
        cfg = small_cfg()
        samples = generate_split(cfg, "test")
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_dataset(p1, samples, cfg, "test")
        save_dataset(p2, samples, cfg, "test")
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.bin"
        p.write_bytes(b"NOTMAGIC" + bytes(32))
        with pytest.raises(ValueError, match="magic"):
            load_dataset(p)

    def test_corruption_detected(self, tmp_path):
        cfg = small_cfg()
        p = tmp_path / "d.bin"
        save_dataset(p, generate_split(cfg, "test"), cfg, "test")
        raw = bytearray(p.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="checksum mismatch"):
            load_dataset(p)

    def test_truncation_reports_offset(self, tmp_path):
        cfg = small_cfg()
        p = tmp_path / "d.bin"
        save_dataset(p, generate_split(cfg, "test"), cfg, "test")
        p.write_bytes(p.read_bytes()[:10])
        with pytest.raises(ValueError, match="truncated"):
            load_dataset(p)

    def test_trailing_bytes_detected(self, tmp_path):
        cfg = small_cfg()
        p = tmp_path / "d.bin"
        save_dataset(p, generate_split(cfg, "test"), cfg, "test")
        raw = p.read_bytes()
        # keep the envelope valid: extend payload, recompute the crc
        payload = raw[len(DATA_MAGIC):-4] + bytes(8)
        p.write_bytes(raw[:len(DATA_MAGIC)] + payload + zlib.crc32(payload).to_bytes(4, "little"))
        with pytest.raises(ValueError, match="trailing"):
            load_dataset(p)


class TestCheckpointIO:
    def params(self):
        r = np.random.default_rng(0)
        return {"a": r.normal(size=(3, 4)).astype(np.float32),
                "b": r.normal(size=(5,)).astype(np.float32)}

    def test_roundtrip_with_opt_state(self, tmp_path):
        params = self.params()
        opt = {"step": 17,
               "m": {k: np.full_like(v, 0.25, dtype=np.float64) for k, v in params.items()},
               "v": {k: np.full_like(v, 4.0, dtype=np.float64) for k, v in params.items()}}
        cfgd = {"training": {"seed": 0}}
        p = tmp_path / "c.bin"
        save_checkpoint(p, params, 42, cfgd, opt_state=opt)
        ck = load_checkpoint(p)
        assert isinstance(ck, Checkpoint)
        assert ck.step == 42
        assert ck.config == cfgd
        assert ck.config_digest == config_digest(cfgd)
        for k in params:
            assert np.array_equal(ck.params[k], params[k])
            assert ck.params[k].dtype == params[k].dtype
            assert np.array_equal(ck.opt_state["m"][k], opt["m"][k])
            assert np.array_equal(ck.opt_state["v"][k], opt["v"][k])
        assert ck.opt_state["step"] == 17

    def test_roundtrip_without_opt_state(self, tmp_path):
        p = tmp_path / "c.bin"
        save_checkpoint(p, self.params(), 1, {"x": 1})
        assert load_checkpoint(p).opt_state is None

    def test_corruption_detected(self, tmp_path):
        p = tmp_path / "c.bin"
        save_checkpoint(p, self.params(), 1, {"x": 1})
        raw = bytearray(p.read_bytes())
        raw[-10] ^= 0x01
        p.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="checksum"):
            load_checkpoint(p)

    def test_averaging(self, tmp_path):
        cfgd = {"training": {"seed": 0}}
        p1, p2, out = tmp_path / "1.bin", tmp_path / "2.bin", tmp_path / "avg.bin"
        save_checkpoint(p1, {"w": np.ones((2, 2), dtype=np.float32)}, 10, cfgd)
        save_checkpoint(p2, {"w": np.full((2, 2), 3.0, dtype=np.float32)}, 20, cfgd)
        average_checkpoint_files([p1, p2], out)
        ck = load_checkpoint(out)
        assert np.allclose(ck.params["w"], 2.0)
        assert ck.step == 20
        assert ck.opt_state is None

    def test_averaging_rejects_mixed_configs(self, tmp_path):
        p1, p2 = tmp_path / "1.bin", tmp_path / "2.bin"
        save_checkpoint(p1, {"w": np.ones(2, dtype=np.float32)}, 1, {"a": 1})
        save_checkpoint(p2, {"w": np.ones(2, dtype=np.float32)}, 1, {"a": 2})
        with pytest.raises(ValueError, match="different configs"):
            average_checkpoint_files([p1, p2], tmp_path / "o.bin")
        with pytest.raises(ValueError):
            average_checkpoint_files([], tmp_path / "o.bin")
