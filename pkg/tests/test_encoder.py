import numpy as np
import pytest

from focusre import tensor as T
from focusre.data import Vocab
from focusre.encoder import EncoderConfig, padding_masks
from focusre.masks import PositionSet, build_mask_all, build_mask_rc_v2, compose_padding
from focusre.tensor import Tensor

from helpers import random_encoder


class TestConfig:
    def test_d_k(self):
        assert EncoderConfig(vocab_size=5, d_model=64, n_heads=4).d_k == 16

    @pytest.mark.parametrize("kw", [
        {"d_model": 10, "n_heads": 4},
        {"n_layers": 2, "k_focus": 3},
        {"k_focus": -1},
        {"activation": "relu6"},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            EncoderConfig(vocab_size=5, **kw)


class TestEmbed:
    def test_zero_tables(self):
        enc = random_encoder(d_model=8, n_heads=2, d_ff=16)
        for name in ("embed.token", "embed.position"):
            enc.params[name].data[:] = 0
        assert not enc.embed(np.array([1, 5, 6, 2])).data.any()

    def test_word_count_plus_specials(self):
        vocab = Vocab.build([])
        ids = vocab.encode("左主干狭窄")
        enc = random_encoder(vocab_size=len(vocab), d_model=8, n_heads=2, d_ff=16)
        assert enc.embed(ids).shape == (7, 8)

    def test_position_difference(self):
        enc = random_encoder(d_model=8, n_heads=2, d_ff=16)
        H = enc.embed(np.array([1, 7, 4, 7, 2])).data
        pos = enc.params["embed.position"].data
        np.testing.assert_allclose(H[3] - H[1], pos[3] - pos[1], atol=1e-15)

    def test_errors(self):
        enc = random_encoder(d_model=8, n_heads=2, d_ff=16, max_len=4)
        with pytest.raises(KeyError):
            enc.embed(np.array([1, 99, 2]))
        with pytest.raises(ValueError):
            enc.embed(np.array([1, 3, 3, 3, 2]))


class TestLayer:
    def setup_method(self):
        self.enc = random_encoder(d_model=8, n_heads=2, d_ff=16, n_layers=2, k_focus=1)
        self.H = np.random.default_rng(0).normal(size=(1, 5, 8))

    def test_shape(self):
        assert self.enc.layer(Tensor(self.H), build_mask_all(5), 0).shape == (1, 5, 8)

    def test_self_only_mask_is_positionwise(self):
        eye = np.eye(5, dtype=bool)
        base = self.enc.layer(Tensor(self.H), eye, 0).data
        H2 = self.H.copy()
        H2[0, 3] += 5.0
        moved = self.enc.layer(Tensor(H2), eye, 0).data
        np.testing.assert_array_equal(np.delete(moved, 3, axis=1), np.delete(base, 3, axis=1))

    def test_zero_value_path(self):
        p = self.enc.params
        p["layer0.attn.wv"].data[:] = 0
        p["layer0.attn.bv"].data[:] = 0
        p["layer0.attn.bo"].data[:] = 0
        out = self.enc.layer(Tensor(self.H), build_mask_all(5), 0).data
        H1 = T.layer_norm(Tensor(self.H), p["layer0.ln1.gamma"], p["layer0.ln1.beta"], 1e-12)
        expected = T.layer_norm(T.add(H1, self.enc.feed_forward(H1, 0)),
                                p["layer0.ln2.gamma"], p["layer0.ln2.beta"], 1e-12).data
        np.testing.assert_allclose(out, expected, atol=1e-13)

    def test_mask_shape_error(self):
        with pytest.raises(ValueError):
            self.enc.layer(Tensor(self.H), build_mask_all(4), 0)


class TestStrEncode:
    ids = np.array([1, 4, 9, 5, 6, 11, 2])

    def test_k_invariance_under_all_mask(self):
        outs = []
        for k in range(5):
            enc = random_encoder(seed=3, n_layers=4, k_focus=k)
            outs.append(enc.encode(self.ids, build_mask_all(len(self.ids))).data)
        for o in outs[1:]:
            assert np.abs(o - outs[0]).max() < 1e-9

    def test_k0_never_applies_task_mask(self):
        enc = random_encoder(seed=4, n_layers=3, k_focus=0)
        pos = PositionSet(0, (1,), (3,))
        a = enc.encode(self.ids, build_mask_rc_v2(7, pos)).data
        b = enc.encode(self.ids, build_mask_all(7)).data
        np.testing.assert_array_equal(a, b)

    def test_padding_invariance(self):
        enc = random_encoder(seed=5, n_layers=4, k_focus=2)
        pos = PositionSet(0, (1, 2), (5,))
        L = len(self.ids)
        ref = enc.encode(self.ids[None], build_mask_rc_v2(L, pos)[None]).data[0]
        for pad in (1, 7, 16):
            ids = np.concatenate([self.ids, np.zeros(pad, dtype=np.int64)])[None]
            mask = compose_padding(build_mask_rc_v2(L + pad, pos), L)[None]
            out = enc.encode(ids, mask, valid_lens=[L]).data[0]
            assert np.abs(out[:L] - ref).max() < 1e-9

    def test_v2_locality(self):
        enc = random_encoder(seed=6, n_layers=4, k_focus=2)
        pos = PositionSet(0, (2,), (4, 5))
        mask = build_mask_rc_v2(7, pos)
        H = enc.context(self.ids).data
        base = enc.focus(Tensor(H), mask).data[0]
        r = np.random.default_rng(0)
        outside = [i for i in range(7) if i not in pos.members]
        H2 = H.copy()
        H2[outside] += r.normal(0, 10, size=(len(outside), H.shape[1]))
        assert np.abs(enc.focus(Tensor(H2), mask).data[0] - base).max() < 1e-9

    def test_gradient_reaches_every_layer(self):
        enc = random_encoder(seed=7, d_model=8, n_heads=2, d_ff=16, n_layers=3, k_focus=1)
        out = enc.encode(self.ids, build_mask_rc_v2(7, PositionSet(0, (1,), (3,))))
        T.backward(T.tsum(T.getitem(out, 0)))
        for i in range(3):
            assert np.abs(enc.params[f"layer{i}.attn.wq"].grad).sum() > 0

    def test_padding_masks_shape(self):
        m = padding_masks(5, [5, 3])
        assert m.shape == (2, 5, 5)
        np.testing.assert_array_equal(m[1], compose_padding(build_mask_all(5), 3))
