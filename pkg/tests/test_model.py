import numpy as np
import pytest

from signseq.clipconv import ClipConvConfig
from signseq.data import CorpusConfig, Sample, generate_split
from signseq.gather import GatherConfig
from signseq.model import (AttentionConfig, BOS_ID, EOS_ID, Model, ModelConfig, PAD_ID,
                           average_parameters, train_step)
from signseq.optim import Adam


def tiny_config(**kw):
    base = dict(
        d_in=6, d_model=16, heads=2, enc_layers=2, dec_layers=1,
        dropout=0.0, dtype="float64", n_gloss=5, n_words=11,
        gather=GatherConfig("content_aware", l=3, gamma=4.0 / 3.0),
        clipconv=ClipConvConfig(),
        attention=AttentionConfig(max_dist=8),
    )
    base.update(kw)
    return ModelConfig(**base)


def tiny_samples(n=3, seed=0):
    cfg = CorpusConfig(seed=seed, n_gloss=5, d_in=6, n_train=n, n_dev=1, n_test=1,
                       min_glosses=2, max_glosses=3, min_frames=6, max_frames=9)
    return generate_split(cfg, "train")[:n]


class TestConstruction:
    def test_special_token_ids(self):
        assert (PAD_ID, BOS_ID, EOS_ID) == (0, 1, 2)

    def test_seed_reproducible(self, rng):
        a, b = Model(tiny_config(), seed=3), Model(tiny_config(), seed=3)
        for (na, pa), (nb, pb) in zip(a.named_parameters().items(), b.named_parameters().items()):
            assert na == nb
            assert np.array_equal(pa.data, pb.data)
        feats = rng.normal(size=(10, 6))
        sa, _ = a.encode(feats)
        sb, _ = b.encode(feats)
        assert np.array_equal(sa.data, sb.data)

    def test_named_parameters_all_distinct_and_grad(self):
        params = Model(tiny_config()).named_parameters()
        ids = {id(p) for p in params.values()}
        assert len(ids) == len(params)
        assert all(p.requires_grad for p in params.values())

    def test_pos_tables_follow_rel_sites(self):
        m = Model(tiny_config(attention=AttentionConfig(max_dist=8, rel_sites=("enc",))))
        names = m.named_parameters()
        assert "pos_enc" in names
        assert "pos_dec" not in names and "pos_cross" not in names
        m = Model(tiny_config(attention=AttentionConfig(max_dist=8, rel_sites=())))
        assert not any(k.startswith("pos_") for k in m.named_parameters())

    def test_first_layer_only_limits_clip_params(self):
        m = Model(tiny_config(clipconv=ClipConvConfig(first_layer_only=True)))
        names = m.named_parameters()
        assert any(k.startswith("enc0_clip_") for k in names)
        assert not any(k.startswith("enc1_clip_") for k in names)
        m = Model(tiny_config())
        assert any(k.startswith("enc1_clip_") for k in m.named_parameters())

    def test_variant_none_has_no_clip_params(self):
        m = Model(tiny_config(gather=GatherConfig("none")))
        assert not any("clip" in k for k in m.named_parameters())


class TestEncode:
    def test_shapes(self, rng):
        m = Model(tiny_config())
        states, logp = m.encode(rng.normal(size=(12, 6)))
        assert states.shape == (12, 16)
        assert logp.shape == (12, 6)  # n_gloss + blank
        assert np.allclose(np.exp(logp.data).sum(axis=1), 1.0)

    def test_rejects_wrong_width(self, rng):
        with pytest.raises(Exception):
            Model(tiny_config()).encode(rng.normal(size=(12, 7)))

    def test_padding_equivalence(self, rng):
        """Masked padded run must reproduce the unpadded run on real frames."""
        m = Model(tiny_config())
        feats = rng.normal(size=(14, 6))
        true_len = 9
        full_states, full_logp = m.encode(feats[:true_len])
        pad_states, pad_logp = m.encode(feats, length=true_len)
        assert np.allclose(full_states.data, pad_states.data[:true_len], atol=1e-12)
        assert np.allclose(full_logp.data, pad_logp.data[:true_len], atol=1e-12)

    def test_ape_added_when_enc_not_relative(self, rng):
        cfg = tiny_config(attention=AttentionConfig(max_dist=8, rel_sites=()),
                          gather=GatherConfig("none"))
        m = Model(cfg)
        feats = np.zeros((8, 6))
        states, _ = m.encode(feats)
        # zero input + absolute codes: outputs must differ across positions
        assert not np.allclose(states.data[0], states.data[1])


class TestDecode:
    def test_causal_teacher_forcing(self, rng):
        m = Model(tiny_config())
        enc, _ = m.encode(rng.normal(size=(10, 6)))
        a = m.decode(np.array([BOS_ID, 4, 5]), enc)
        b = m.decode(np.array([BOS_ID, 4, 9]), enc)
        assert np.allclose(a.data[:2], b.data[:2], atol=1e-12)
        assert not np.allclose(a.data[2], b.data[2])

    def test_requires_bos(self, rng):
        m = Model(tiny_config())
        enc, _ = m.encode(rng.normal(size=(10, 6)))
        with pytest.raises(ValueError):
            m.decode(np.array([4, 5]), enc)
        with pytest.raises(ValueError):
            m.decode(np.array([], dtype=np.int64), enc)

    def test_log_probs_normalized(self, rng):
        m = Model(tiny_config())
        enc, _ = m.encode(rng.normal(size=(10, 6)))
        lp = m.decode(np.array([BOS_ID, 3]), enc)
        assert lp.shape == (2, 11)
        assert np.allclose(np.exp(lp.data).sum(axis=1), 1.0)


class TestLosses:
    def test_joint_loss_combines_weighted_heads(self):
        samples = tiny_samples()
        m1 = Model(tiny_config(lambda_rec=1.0, lambda_tr=0.0))
        m2 = Model(tiny_config(lambda_rec=0.0, lambda_tr=1.0))
        m3 = Model(tiny_config(lambda_rec=2.0, lambda_tr=3.0))
        _, s1 = m1.joint_loss(samples)
        _, s2 = m2.joint_loss(samples)
        _, s3 = m3.joint_loss(samples)
        assert "ce_loss" not in s1
        assert "ctc_loss" not in s2
        assert np.isclose(s3["total"], 2.0 * s3["ctc_loss"] + 3.0 * s3["ce_loss"])

    def test_both_weights_zero_rejected(self):
        m = Model(tiny_config(lambda_rec=0.0, lambda_tr=0.0))
        with pytest.raises(ValueError):
            m.joint_loss(tiny_samples())

    def test_eval_loss_leaves_no_grads(self):
        m = Model(tiny_config())
        stats = m.eval_loss(tiny_samples())
        assert np.isfinite(stats["total"])
        assert all(p.grad is None for p in m.named_parameters().values())

    def test_train_step_updates_parameters(self):
        m = Model(tiny_config())
        m.drop_rng = np.random.default_rng(0)
        opt = Adam(m.named_parameters(), peak_lr=1e-3, warmup=10)
        before = {k: p.data.copy() for k, p in m.named_parameters().items()}
        stats = train_step(m, opt, tiny_samples())
        assert stats["lr"] > 0
        changed = sum(not np.array_equal(before[k], p.data)
                      for k, p in m.named_parameters().items())
        assert changed > len(before) * 0.9

    def test_train_step_rejects_nonfinite(self):
        # an infeasible ctc target drives the loss to +inf; the step must
        # be rejected and parameters left untouched
        m = Model(tiny_config(lambda_tr=0.0))
        opt = Adam(m.named_parameters(), peak_lr=1e-3, warmup=10)
        sample = tiny_samples(1)[0]
        # 5 frames is enough to gather but cannot emit 5 glosses with three
        # adjacent repeats (needs 5 + 3 frames), so the ctc loss is +inf
        bad = Sample(features=sample.features[:5],
                     glosses=np.array([1, 1, 1, 2, 2], dtype=np.int32),
                     words=sample.words,
                     boundaries=np.array([0, 1, 2, 3, 4, 5], dtype=np.int32))
        before = {k: p.data.copy() for k, p in m.named_parameters().items()}
        with pytest.warns(Warning):
            stats = train_step(m, opt, [bad])
        assert stats.get("rejected") is True
        assert stats["lr"] == 0.0
        for k, p in m.named_parameters().items():
            assert np.array_equal(before[k], p.data)


class TestParameterIO:
    def test_load_roundtrip(self, rng):
        a = Model(tiny_config(), seed=1)
        b = Model(tiny_config(), seed=2)
        b.load_parameters({k: p.data for k, p in a.named_parameters().items()})
        feats = rng.normal(size=(9, 6))
        sa, la = a.encode(feats)
        sb, lb = b.encode(feats)
        assert np.array_equal(la.data, lb.data)

    def test_load_rejects_mismatches(self):
        m = Model(tiny_config())
        vals = {k: p.data for k, p in m.named_parameters().items()}
        missing = dict(vals)
        missing.pop("in_proj")
        with pytest.raises(ValueError):
            m.load_parameters(missing)
        wrong = dict(vals)
        wrong["in_proj"] = np.zeros((2, 2))
        with pytest.raises(ValueError):
            m.load_parameters(wrong)

    def test_average_parameters(self):
        sets = [{"w": np.full((2, 2), float(v))} for v in (1.0, 2.0, 6.0)]
        avg = average_parameters(sets)
        assert np.allclose(avg["w"], 3.0)
        with pytest.raises(ValueError):
            average_parameters([{"w": np.zeros(2)}, {"u": np.zeros(2)}])
        with pytest.raises(ValueError):
            average_parameters([])


class TestVariantsRun:
    @pytest.mark.parametrize("variant", ["content_aware", "centered", "sparse", "none"])
    def test_forward_backward_each_variant(self, variant):
        cfg = tiny_config(gather=GatherConfig(variant, l=3, gamma=4.0 / 3.0))
        m = Model(cfg)
        loss, stats = m.joint_loss(tiny_samples(2))
        loss.backward()
        assert np.isfinite(stats["total"])

    @pytest.mark.parametrize("sites", [(), ("enc",), ("dec", "cross"), ("enc", "dec", "cross")])
    def test_forward_each_rel_site_mix(self, sites):
        cfg = tiny_config(attention=AttentionConfig(max_dist=8, rel_sites=sites))
        m = Model(cfg)
        stats = m.eval_loss(tiny_samples(2))
        assert np.isfinite(stats["total"])

    @pytest.mark.parametrize("terms", [("c2c",), ("c2c", "c2p", "p2c"), ("c2c", "c2p", "p2c", "p2p")])
    def test_forward_each_term_subset(self, terms):
        cfg = tiny_config(attention=AttentionConfig(max_dist=8, terms=terms))
        m = Model(cfg)
        stats = m.eval_loss(tiny_samples(2))
        assert np.isfinite(stats["total"])
