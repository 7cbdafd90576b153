import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from focusre.data import (
    LABEL_INDEX,
    RELATION_LABELS,
    Document,
    EntitySpan,
    RelationTriple,
    build_rc_instances,
    generate_synthetic_corpus,
)
from focusre.evaluate import (
    format_table,
    gold_triples,
    ner_metrics,
    pipeline_eval,
    prf,
    rc_correct_entities,
    rc_metrics,
)
from focusre.trainer import TrainConfig, train

from oracles import brute_pipeline

A, B, C = EntitySpan(0, 2, "Degree"), EntitySpan(3, 4, "Negation"), EntitySpan(5, 7, "Body Part")


class TestPrf:
    def test_zero_conventions(self):
        r = prf(0, 0, 3)
        assert (r.precision, r.recall, r.f1) == (0.0, 0.0, 0.0)
        assert prf(0, 0, 0).f1 == 0.0

    def test_arithmetic(self):
        r = prf(3, 1, 2)
        assert r.precision == 0.75 and r.recall == 0.6
        assert r.f1 == pytest.approx(2 * 0.75 * 0.6 / 1.35)


class TestNer:
    def test_perfect(self):
        rep = ner_metrics([[A, B]], [[A, B]])
        assert (rep.precision, rep.recall, rep.f1) == (1, 1, 1)

    def test_empty_prediction(self):
        rep = ner_metrics([[]], [[A]])
        assert (rep.precision, rep.recall, rep.f1) == (0, 0, 0)

    def test_half(self):
        rep = ner_metrics([[A, EntitySpan(3, 4, "Degree")]], [[A, B]])
        assert (rep.precision, rep.recall, rep.f1) == (0.5, 0.5, 0.5)

    def test_type_must_match(self):
        assert ner_metrics([[EntitySpan(0, 2, "Location")]], [[A]]).f1 == 0

    def test_misaligned(self):
        with pytest.raises(ValueError):
            ner_metrics([[A]], [[A], [B]])

    @given(st.permutations(range(6)), st.integers(0, 1000))
    def test_order_invariance(self, perm, seed):
        r = np.random.default_rng(seed)
        gold = [[EntitySpan(i, i + 1, "Degree") for i in range(5) if r.random() < 0.6] for _ in range(6)]
        pred = [[EntitySpan(i, i + 1, "Degree") for i in range(5) if r.random() < 0.6] for _ in range(6)]
        a = ner_metrics(pred, gold).micro
        b = ner_metrics([pred[i] for i in perm], [gold[i] for i in perm]).micro
        assert a == b


class TestRc:
    def test_all_correct(self):
        assert rc_metrics([1, 2, 0], [1, 2, 0]).f1 == 1

    def test_all_negative_predictions(self):
        assert rc_metrics([0, 0, 0], [1, 2, 0]).recall == 0

    def test_mixed(self):
        # 3 TP, 1 FP (predicted 2 for gold No Relation), 2 FN (missed positives)
        pred = [1, 1, 3, 2, 0, 0, 0]
        gold = [1, 1, 3, 0, 4, 5, 0]
        rep = rc_metrics(pred, gold)
        assert (rep.micro.tp, rep.micro.fp, rep.micro.fn) == (3, 1, 2)
        assert rep.precision == 0.75 and rep.recall == 0.6
        assert rep.f1 == pytest.approx(0.6667, abs=1e-4)

    def test_wrong_positive_counts_twice(self):
        rep = rc_metrics([1], [2])
        assert (rep.micro.tp, rep.micro.fp, rep.micro.fn) == (0, 1, 1)

    def test_names_accepted_and_checked(self):
        assert rc_metrics(["Modifier"], [LABEL_INDEX["Modifier"]]).f1 == 1
        with pytest.raises(ValueError):
            rc_metrics(["Causes"], ["Modifier"])
        with pytest.raises(Exception):
            rc_metrics([17], [0])

    def test_per_label(self):
        rep = rc_metrics([1, 2, 2], [1, 2, 0])
        assert rep.per_label["Negative"].f1 == 1
        assert rep.per_label["Modifier"].precision == 0.5


class FakeModel:
    """Stands in for a trained model: perturbed gold entities, random pair labels."""

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    def predict_entities(self, docs):
        out = []
        for doc in docs:
            ents = [e for e in doc.entities if self.rng.random() < 0.8]
            if self.rng.random() < 0.3 and len(doc.text) > 1:
                ents.append(EntitySpan(len(doc.text) - 1, len(doc.text), "Location"))
            out.append(sorted(set(ents)))
        return out

    def classify_pairs(self, docs, entities=None):
        res = []
        for i, doc in enumerate(docs):
            insts = build_rc_instances(doc, doc_index=i, entities=None if entities is None else entities[i])
            res.append([(inst, int(self.rng.integers(0, len(RELATION_LABELS)))) for inst in insts])
        return res


def test_pipeline_matches_brute_force():
    docs = generate_synthetic_corpus(50, seed=11)
    tot = np.zeros(3, dtype=int)
    for seed in range(5):
        ner_model, oracle_model = FakeModel(seed), FakeModel(seed)
        _, rc = pipeline_eval(ner_model, docs)
        ents = oracle_model.predict_entities(docs)
        pairs = oracle_model.classify_pairs(docs, entities=ents)
        flat = [[(inst.pair, label) for inst, label in p] for p in pairs]
        expected = brute_pipeline(ents, flat, docs)
        got = (rc.micro.tp, rc.micro.fp, rc.micro.fn)
        assert got == expected
        tot += got
    assert tot[0] > 0 and tot[1] > 0 and tot[2] > 0


class PerfectModel:
    def predict_entities(self, docs):
        return [list(d.entities) for d in docs]

    def classify_pairs(self, docs, entities=None):
        return [[(inst, inst.label) for inst in build_rc_instances(d, doc_index=i)] for i, d in enumerate(docs)]


def test_perfect_pipeline():
    docs = generate_synthetic_corpus(20, seed=1)
    ner, rc = pipeline_eval(PerfectModel(), docs)
    assert ner.f1 == 1 and rc.f1 == 1


def test_missing_entity_makes_relation_fn():
    doc = Document("左主干狭窄", [EntitySpan(0, 3, "Body Part"), EntitySpan(3, 5, "Degree")],
                   [RelationTriple(1, 0, "Modifier")])

    class DropOne(PerfectModel):
        def predict_entities(self, docs):
            return [[d.entities[0]] for d in docs]

        def classify_pairs(self, docs, entities=None):
            # any label at all: with one entity there is no pair to classify
            return [[(inst, 2) for inst in build_rc_instances(d, entities=e)] for d, e in zip(docs, entities)]

    ner, rc = pipeline_eval(DropOne(), [doc])
    assert ner.recall == 0.5
    assert (rc.micro.tp, rc.micro.fp, rc.micro.fn) == (0, 0, 1)
    assert gold_triples(doc) == {(doc.entities[0], doc.entities[1], "Modifier")}


def test_pipeline_recall_bounded_by_correct_entities():
    docs = generate_synthetic_corpus(40, seed=5)
    for seed in (0, 1):
        model = train(docs[:30], [], TrainConfig(epochs=3, batch_size=8, seed=seed, d_model=16,
                                                 n_heads=2, d_ff=32, n_layers=2, k_focus=1)).model
        _, pipe = pipeline_eval(model, docs[30:])
        gold = rc_correct_entities(model, docs[30:])
        assert pipe.recall <= gold.recall + 1e-12


def test_table_layout():
    rep = rc_metrics([1, 2], [1, 0])
    text = format_table("T", ["NER", "RC"], [("Joint", [rep, None]), ("Only RC", [None, rep])])
    lines = text.splitlines()
    assert lines[0] == "T" and "Precision" in lines[2] and "F1-score" in lines[2]
    assert "50.00" in lines[4] and lines[4].count("-") >= 3
    assert len({len(l) for l in lines[2:]}) == 1
