import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from focusre.masks import (
    MaskError,
    PositionSet,
    build_mask_all,
    build_mask_ner,
    build_mask_rc_v1,
    build_mask_rc_v2,
    build_task_mask,
    compose_padding,
    dump_mask,
)

POS5 = PositionSet(cls=0, en1=(1,), en2=(3,))


@st.composite
def position_sets(draw, max_T=12):
    T = draw(st.integers(3, max_T))
    body = list(range(1, T))
    chosen = draw(st.lists(st.sampled_from(body), min_size=2, max_size=min(6, T - 1), unique=True))
    cut = draw(st.integers(1, len(chosen) - 1))
    return T, PositionSet(0, tuple(sorted(chosen[:cut])), tuple(sorted(chosen[cut:])))


class TestAllAndNer:
    def test_t1(self):
        assert build_mask_all(1).tolist() == [[True]]

    def test_all_ones(self):
        assert build_mask_all(3).all() and build_mask_all(3).shape == (3, 3)

    @pytest.mark.parametrize("T", [1, 2, 7, 30])
    def test_ner_equals_all(self, T):
        np.testing.assert_array_equal(build_mask_ner(T), build_mask_all(T))

    def test_zero_length(self):
        with pytest.raises(MaskError):
            build_mask_all(0)


class TestRcV1:
    def test_worked_example(self):
        m = build_mask_rc_v1(5, POS5).astype(int)
        assert m[0].tolist() == [1, 1, 0, 1, 0]
        assert m[1:].all()

    def test_entities_cover_all_words(self):
        # T=6: [CLS] w w w w [SEP]; entities cover every word
        pos = PositionSet(0, (1, 2), (3, 4))
        expected = np.ones((6, 6), bool)
        expected[0, 5] = False
        np.testing.assert_array_equal(build_mask_rc_v1(6, pos), expected)

    def test_no_position_outside_union(self):
        assert build_mask_rc_v1(3, PositionSet(0, (1,), (2,))).all()

    @pytest.mark.parametrize("pos", [
        PositionSet(0, (1,), (1,)),
        PositionSet(0, (0,), (2,)),
        PositionSet(0, (1,), (9,)),
        PositionSet(0, (), (2,)),
    ])
    def test_invalid_positions(self, pos):
        with pytest.raises(MaskError):
            build_mask_rc_v1(5, pos)


class TestRcV2:
    def test_worked_example(self):
        raw = build_mask_rc_v2(5, POS5, repair=False).astype(int)
        block = np.ix_([0, 1, 3], [0, 1, 3])
        assert raw[block].all() and raw.sum() == 9
        assert not raw[2].any() and not raw[4].any()
        fixed = build_mask_rc_v2(5, POS5).astype(int)
        assert fixed[2].tolist() == [0, 0, 1, 0, 0]
        assert fixed[4].tolist() == [0, 0, 0, 0, 1]
        np.testing.assert_array_equal(fixed[[0, 1, 3]], raw[[0, 1, 3]])

    def test_full_cover_is_all_ones(self):
        assert build_mask_rc_v2(4, PositionSet(0, (1, 2), (3,))).all()

    @given(position_sets())
    def test_v2_below_v1_before_repair(self, tp):
        T, pos = tp
        v1, v2 = build_mask_rc_v1(T, pos), build_mask_rc_v2(T, pos, repair=False)
        assert not (v2 & ~v1).any()

    @given(position_sets())
    def test_blocks_agree_and_symmetry(self, tp):
        T, pos = tp
        v1, v2 = build_mask_rc_v1(T, pos), build_mask_rc_v2(T, pos, repair=False)
        blk = np.ix_(pos.members, pos.members)
        assert v1[blk].all() and v2[blk].all()
        np.testing.assert_array_equal(v2, v2.T)
        if len(pos.members) < T:
            assert not np.array_equal(v1, v1.T)

    @given(position_sets())
    def test_repaired_rows_nonempty_with_diagonal(self, tp):
        T, pos = tp
        for mask in (build_mask_rc_v1(T, pos), build_mask_rc_v2(T, pos)):
            assert mask.any(axis=1).all()
        assert np.diag(build_mask_rc_v2(T, pos)).all()

    def test_pure(self):
        a, b = build_mask_rc_v2(7, PositionSet(0, (2, 3), (5,))), build_mask_rc_v2(7, PositionSet(0, (2, 3), (5,)))
        assert a.tobytes() == b.tobytes()


class TestPadding:
    def test_full_length_identity(self):
        m = build_mask_rc_v1(5, POS5)
        np.testing.assert_array_equal(compose_padding(m, 5), m)

    def test_worked_example(self):
        out = compose_padding(build_mask_all(4), 2).astype(int)
        assert out.tolist() == [[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]]

    @given(position_sets(), st.integers(0, 5))
    def test_idempotent_and_nondegenerate(self, tp, extra):
        T, pos = tp
        big = T + extra
        mask = build_mask_rc_v2(big, pos)
        once = compose_padding(mask, T)
        np.testing.assert_array_equal(compose_padding(once, T), once)
        assert once.any(axis=1).all()
        assert not once[:T, T:].any()

    @pytest.mark.parametrize("n", [0, 6])
    def test_bad_valid_len(self, n):
        with pytest.raises(MaskError):
            compose_padding(build_mask_all(5), n)

    def test_task_mask_dispatch(self):
        np.testing.assert_array_equal(build_task_mask("v1", 5, POS5, 4), compose_padding(build_mask_rc_v1(5, POS5), 4))
        with pytest.raises(MaskError):
            build_task_mask("v3", 5, POS5)


def test_dump_mask_grid():
    assert dump_mask(build_mask_rc_v1(5, POS5)).splitlines()[0] == "11010"
    assert dump_mask(build_mask_all(2)) == "11\n11"
