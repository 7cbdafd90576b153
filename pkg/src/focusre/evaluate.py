"""Micro-averaged precision / recall / F1 for NER, RC and the full pipeline."""
from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from .data import LABEL_INDEX, NO_RELATION, RELATION_LABELS, Document, EntitySpan


@dataclass
class PRF:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int

    @property
    def support(self) -> int:
        return self.tp + self.fn


def prf(tp: int, fp: int, fn: int) -> PRF:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return PRF(p, r, f, tp, fp, fn)


@dataclass
class MetricsReport:
    task: str
    micro: PRF
    per_label: dict[str, PRF] = field(default_factory=dict)

    @property
    def precision(self) -> float:
        return self.micro.precision

    @property
    def recall(self) -> float:
        return self.micro.recall

    @property
    def f1(self) -> float:
        return self.micro.f1

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            **{k: v for k, v in asdict(self.micro).items()},
            "per_label": {k: asdict(v) for k, v in sorted(self.per_label.items())},
        }


def _report(task: str, tp: Counter, fp: Counter, fn: Counter) -> MetricsReport:
    labels = set(tp) | set(fp) | set(fn)
    per_label = {lab: prf(tp[lab], fp[lab], fn[lab]) for lab in labels}
    return MetricsReport(task, prf(sum(tp.values()), sum(fp.values()), sum(fn.values())), per_label)


def _match_sets(task: str, pred: Sequence[Iterable], gold: Sequence[Iterable], label_of) -> MetricsReport:
    if len(pred) != len(gold):
        raise ValueError(f"{task}: {len(pred)} predicted documents vs {len(gold)} gold")
    tp, fp, fn = Counter(), Counter(), Counter()
    for p_items, g_items in zip(pred, gold):
        p_set, g_set = set(p_items), set(g_items)
        for item in p_set & g_set:
            tp[label_of(item)] += 1
        for item in p_set - g_set:
            fp[label_of(item)] += 1
        for item in g_set - p_set:
            fn[label_of(item)] += 1
    return _report(task, tp, fp, fn)


def ner_metrics(pred: Sequence[Iterable[EntitySpan]], gold: Sequence[Iterable[EntitySpan]]) -> MetricsReport:
    """Exact (start, end, type) span matching, micro-averaged over documents."""
    return _match_sets("ner", pred, gold, lambda span: span.etype)


def _label_name(label) -> str:
    name = RELATION_LABELS[label] if isinstance(label, (int,)) or hasattr(label, "__index__") else label
    if name not in LABEL_INDEX:
        raise ValueError(f"relation label {label!r} outside the schema")
    return name


def rc_metrics(pred: Sequence, gold: Sequence) -> MetricsReport:
    """Micro P/R/F1 over instance labels with No Relation as the negative class.

    A wrong positive prediction counts once as a false positive (for the
    predicted label) and once as a false negative (for the gold label).
    """
    if len(pred) != len(gold):
        raise ValueError(f"rc: {len(pred)} predictions vs {len(gold)} gold labels")
    tp, fp, fn = Counter(), Counter(), Counter()
    for p, g in zip(pred, gold):
        p, g = _label_name(p), _label_name(g)
        if p == g:
            if p != NO_RELATION:
                tp[p] += 1
            continue
        if p != NO_RELATION:
            fp[p] += 1
        if g != NO_RELATION:
            fn[g] += 1
    return _report("rc", tp, fp, fn)


def gold_triples(doc: Document) -> set[tuple[EntitySpan, EntitySpan, str]]:
    """Gold relations as (earlier span, later span, directed label)."""
    from .data import directed_label

    out = set()
    for rel in doc.relations:
        head, tail = doc.entities[rel.head], doc.entities[rel.tail]
        first, second = sorted((head, tail), key=lambda s: (s.start, s.end))
        out.add((first, second, directed_label(rel.rtype, head is first)))
    return out


def triples_from_predictions(entities: Sequence[EntitySpan], pairs) -> set:
    """Positive triples from ``(instance, label_index)`` pairs over ``entities``."""
    out = set()
    for inst, label in pairs:
        name = RELATION_LABELS[label]
        if name == NO_RELATION:
            continue
        i, j = inst.pair
        out.add((entities[i], entities[j], name))
    return out


def rc_correct_entities(model, docs: Sequence[Document]) -> MetricsReport:
    """RC scored on every gold entity pair (all No-Relation pairs kept)."""
    pred, gold = [], []
    for pairs in model.classify_pairs(docs):
        for inst, label in pairs:
            pred.append(label)
            gold.append(inst.label)
    return rc_metrics(pred, gold)


def pipeline_eval(model, docs: Sequence[Document]) -> tuple[MetricsReport, MetricsReport]:
    """NER report plus RC scored on predicted entities.

    A predicted triple is correct only if both spans (with types) and the
    directed label match a gold triple; gold triples whose entities were
    missed are false negatives.
    """
    predicted = model.predict_entities(docs)
    ner = ner_metrics(predicted, [d.entities for d in docs])
    pairs = model.classify_pairs(docs, entities=predicted)
    pred_triples = [triples_from_predictions(ents, p) for ents, p in zip(predicted, pairs)]
    rc = _match_sets("rc_pipeline", pred_triples, [gold_triples(d) for d in docs], lambda t: t[2])
    return ner, rc


def pct(x: float) -> str:
    return f"{100 * x:.2f}"


def format_table(title: str, groups: Sequence[str], rows: Sequence[tuple[str, Sequence]],
                 key_header: str | Sequence[str] = "Methods") -> str:
    """Plain-text table with a P/R/F1 column triple per group.

    ``rows`` holds ``(key, reports)`` where ``reports`` aligns with
    ``groups``; ``None`` renders as ``-``.
    """
    keys = [key_header] if isinstance(key_header, str) else list(key_header)
    key_rows = [[k] if isinstance(k, str) else list(k) for k, _ in rows]
    key_w = [max(len(keys[i]), *(len(r[i]) for r in key_rows)) for i in range(len(keys))]
    cell = 9
    head1 = "  ".join(k.ljust(w) for k, w in zip(keys, key_w))
    group_w = 3 * cell + 2
    line1 = " " * len(head1) + " | " + " | ".join(g.center(group_w) for g in groups)
    sub = "  ".join(c.rjust(cell) for c in ("Precision", "Recall", "F1-score"))
    line2 = head1 + " | " + " | ".join(sub for _ in groups)
    out = [title, line1, line2, "-" * len(line2)]
    for key_cells, (_, reports) in zip(key_rows, rows):
        left = "  ".join(k.ljust(w) for k, w in zip(key_cells, key_w))
        cells = []
        for rep in reports:
            vals = ("-", "-", "-") if rep is None else (pct(rep.precision), pct(rep.recall), pct(rep.f1))
            cells.append("  ".join(v.rjust(cell) for v in vals))
        out.append(left + " | " + " | ".join(cells))
    return "\n".join(out)
