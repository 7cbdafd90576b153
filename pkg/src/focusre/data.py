"""Corpus schema, tokenisation, BIEOS codec, RC instances and a synthetic generator.

Documents are single sentences, tokenised per character.  Relations are
stored undirected-by-name with an explicit head and tail; the directed
label used for classification is derived from which of the two entities
comes first in the text (``e1`` is always the earlier one).
"""
from __future__ import annotations

import configparser
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .masks import PositionSet

ENTITY_TYPES = ("Negation", "Body Part", "Degree", "Quantifier", "Location")
RELATION_TYPES = ("Negative", "Modifier", "Position", "Percentage", "No Relation")
NO_RELATION = "No Relation"

# allowed direction(s) per relation: "e1e2" means head is the earlier entity
RELATION_DIRECTIONS = {
    "Negative": ("e2e1",),
    "Modifier": ("e2e1",),
    "Position": ("e1e2",),
    "Percentage": ("e1e2", "e2e1"),
}

TAGS = ("O",) + tuple(f"{p}-{t}" for t in ENTITY_TYPES for p in "BIES")
TAG_INDEX = {t: i for i, t in enumerate(TAGS)}


def _directed_labels() -> tuple[str, ...]:
    labels = [NO_RELATION]
    for rtype in RELATION_TYPES[:-1]:
        dirs = RELATION_DIRECTIONS[rtype]
        labels += [rtype] if len(dirs) == 1 else [f"{rtype}({d[:2]}->{d[2:]})" for d in dirs]
    return tuple(labels)


RELATION_LABELS = _directed_labels()
LABEL_INDEX = {label: i for i, label in enumerate(RELATION_LABELS)}


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class EntitySpan:
    start: int
    end: int  # exclusive
    etype: str

    def __post_init__(self):
        if self.start >= self.end or self.start < 0:
            raise AnnotationError(f"bad span bounds {self.start}..{self.end}")
        if self.etype not in ENTITY_TYPES:
            raise AnnotationError(f"unknown entity type {self.etype!r}")


@dataclass(frozen=True)
class RelationTriple:
    head: int
    tail: int
    rtype: str

    def __post_init__(self):
        if self.head == self.tail:
            raise AnnotationError("relation head and tail must differ")
        if self.rtype not in RELATION_DIRECTIONS:
            raise AnnotationError(f"unknown relation type {self.rtype!r}")


def directed_label(rtype: str, head_first: bool) -> str:
    direction = "e1e2" if head_first else "e2e1"
    allowed = RELATION_DIRECTIONS[rtype]
    if direction not in allowed:
        raise AnnotationError(f"{rtype} cannot run {direction[:2]}->{direction[2:]}")
    return rtype if len(allowed) == 1 else f"{rtype}({direction[:2]}->{direction[2:]})"


def undirected_label(label: str) -> tuple[str, bool | None]:
    """Inverse of :func:`directed_label`: relation type and whether head is e1."""
    if label == NO_RELATION:
        return label, None
    if "(" in label:
        rtype, rest = label.split("(", 1)
        return rtype, rest.startswith("e1")
    return label, RELATION_DIRECTIONS[label][0] == "e1e2"


@dataclass
class Document:
    text: str
    entities: list[EntitySpan] = field(default_factory=list)
    relations: list[RelationTriple] = field(default_factory=list)

    @property
    def chars(self) -> list[str]:
        return list(self.text)

    def validate(self) -> None:
        n = len(self.text)
        spans = sorted(self.entities)
        for span in spans:
            if span.end > n:
                raise AnnotationError(f"span {span} past end of text of length {n}")
        for a, b in zip(spans, spans[1:]):
            if b.start < a.end:
                raise AnnotationError(f"overlapping entities {a} and {b}")
        pairs = set()
        for rel in self.relations:
            if not (0 <= rel.head < len(self.entities) and 0 <= rel.tail < len(self.entities)):
                raise AnnotationError(f"relation {rel} references a missing entity")
            key = frozenset((rel.head, rel.tail))
            if key in pairs:
                raise AnnotationError(f"two relations on one entity pair: {rel}")
            pairs.add(key)
            head, tail = self.entities[rel.head], self.entities[rel.tail]
            directed_label(rel.rtype, head.start < tail.start)

    def to_record(self) -> dict:
        return {
            "text": self.text,
            "entities": [[e.start, e.end, e.etype] for e in self.entities],
            "relations": [[r.head, r.tail, r.rtype] for r in self.relations],
        }

    @classmethod
    def from_record(cls, record: dict) -> Document:
        doc = cls(
            text=record["text"],
            entities=[EntitySpan(int(s), int(e), t) for s, e, t in record.get("entities", [])],
            relations=[RelationTriple(int(h), int(t), r) for h, t, r in record.get("relations", [])],
        )
        doc.validate()
        return doc


def write_jsonl(docs: Iterable[Document], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(doc.to_record(), ensure_ascii=False) + "\n")


def read_jsonl(path) -> list[Document]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                docs.append(Document.from_record(json.loads(line)))
            except (KeyError, TypeError, ValueError) as exc:
                raise AnnotationError(f"{path}:{lineno}: {exc}") from exc
    return docs


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

PAD, CLS, SEP, UNK = "[PAD]", "[CLS]", "[SEP]", "[UNK]"
SPECIALS = (PAD, CLS, SEP, UNK)


class Vocab:
    def __init__(self, tokens: Sequence[str] = ()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    @classmethod
    def build(cls, docs: Iterable[Document]) -> Vocab:
        chars = sorted({ch for doc in docs for ch in doc.text})
        return cls(chars)

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    def encode(self, text: str) -> list[int]:
        """Character ids wrapped in [CLS] ... [SEP]."""
        unk = self.stoi[UNK]
        return [self.stoi[CLS], *(self.stoi.get(ch, unk) for ch in text), self.stoi[SEP]]

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> Vocab:
        if tuple(itos[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary does not start with the reserved tokens")
        return cls(itos[len(SPECIALS):])


# ---------------------------------------------------------------------------
# BIEOS
# ---------------------------------------------------------------------------

def encode_bieos(entities: Iterable[EntitySpan], length: int) -> list[int]:
    tags = [TAG_INDEX["O"]] * length
    for span in sorted(entities):
        if span.end > length:
            raise AnnotationError(f"span {span} exceeds length {length}")
        if any(tags[i] != TAG_INDEX["O"] for i in range(span.start, span.end)):
            raise AnnotationError(f"overlapping entity {span}")
        if span.end - span.start == 1:
            tags[span.start] = TAG_INDEX[f"S-{span.etype}"]
            continue
        tags[span.start] = TAG_INDEX[f"B-{span.etype}"]
        for i in range(span.start + 1, span.end - 1):
            tags[i] = TAG_INDEX[f"I-{span.etype}"]
        tags[span.end - 1] = TAG_INDEX[f"E-{span.etype}"]
    return tags


def decode_bieos(tags: Sequence[int]) -> list[EntitySpan]:
    """Spans from a tag sequence, keeping only complete ``B I* E`` runs and ``S`` tags."""
    spans: list[EntitySpan] = []
    open_start, open_type = None, None
    for i, idx in enumerate(tags):
        name = TAGS[int(idx)]
        prefix, etype = (name, None) if name == "O" else name.split("-", 1)
        if open_start is not None:
            if prefix in ("I", "E") and etype == open_type:
                if prefix == "E":
                    spans.append(EntitySpan(open_start, i + 1, etype))
                    open_start = open_type = None
                continue
            open_start = open_type = None
        if prefix == "S":
            spans.append(EntitySpan(i, i + 1, etype))
        elif prefix == "B":
            open_start, open_type = i, etype
    return spans


# ---------------------------------------------------------------------------
# relation-classification instances
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RcInstance:
    token_ids: tuple[int, ...]
    positions: PositionSet
    label: int
    doc_index: int = 0
    pair: tuple[int, int] = (0, 1)  # indices into the entity list used to build it


def entity_positions(span: EntitySpan) -> tuple[int, ...]:
    """Token positions of a span once [CLS] has been prepended."""
    return tuple(range(span.start + 1, span.end + 1))


def candidate_pairs(entities: Sequence[EntitySpan]) -> list[tuple[int, int]]:
    """Unordered entity pairs as (earlier, later) indices, in text order."""
    order = sorted(range(len(entities)), key=lambda i: (entities[i].start, entities[i].end))
    return [(order[a], order[b]) for a in range(len(order)) for b in range(a + 1, len(order))]


def build_rc_instances(doc: Document, token_ids: Sequence[int] = (), training: bool = False,
                       keep_rate: float = 1.0, rng: np.random.Generator | int | None = None,
                       doc_index: int = 0, entities: Sequence[EntitySpan] | None = None,
                       ) -> list[RcInstance]:
    """One instance per unordered entity pair, labelled with the directed relation.

    With ``training`` set, No-Relation pairs survive with probability
    ``keep_rate``.  ``entities`` overrides the document's gold entities (used
    when classifying predicted spans); their labels are then all No Relation.
    """
    if not 0.0 <= keep_rate <= 1.0:
        raise ValueError("keep_rate must be within [0, 1]")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    gold = entities is None
    ents = doc.entities if gold else list(entities)
    rel_of = {}
    if gold:
        for rel in doc.relations:
            rel_of[frozenset((rel.head, rel.tail))] = rel
    out = []
    for i, j in candidate_pairs(ents):
        rel = rel_of.get(frozenset((i, j)))
        if rel is None:
            label = NO_RELATION
            if training and keep_rate < 1.0 and rng.random() >= keep_rate:
                continue
        else:
            label = directed_label(rel.rtype, head_first=(rel.head == i))
        pos = PositionSet(0, entity_positions(ents[i]), entity_positions(ents[j]))
        out.append(RcInstance(tuple(token_ids), pos, LABEL_INDEX[label], doc_index, (i, j)))
    return out


def split_dataset(docs: Sequence, seed: int = 0) -> tuple[list, list, list]:
    """Shuffle documents and cut them 8:1:1 (floor, floor, remainder)."""
    n = len(docs)
    if n < 10:
        raise ValueError(f"need at least 10 documents to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train, n_dev = int(0.8 * n), int(0.1 * n)
    pick = lambda idx: [docs[i] for i in idx]  # noqa: E731
    return (pick(order[:n_train]), pick(order[n_train:n_train + n_dev]),
            pick(order[n_train + n_dev:]))


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

LEXICON = {
    "Body Part": ("左主干", "前降支", "回旋支", "右冠状动脉", "对角支", "钝缘支", "后降支", "中间支"),
    "Location": ("近段", "中段", "远段", "开口", "近中段", "中远段"),
    "Degree": ("狭窄", "闭塞", "轻度狭窄", "重度狭窄", "弥漫性狭窄", "次全闭塞", "斑块"),
    "Quantifier": ("30%", "50%", "60%", "70%", "80%", "90%", "95%", "99%", "100%"),
    "Negation": ("未见", "无", "未发现", "没有"),
}
_FILLERS = {
    "Modifier": ("", "可见", "见", "管腔"),
    "Negative": ("", "明显", "确切"),
    "Position": ("", ""),
    "Percentage": ("", "约"),
}
_SUFFIXES = ("", "", "管壁不规则", "血流通畅")
_PREFIXES = ("造影示", "另见", "结果示")


@dataclass
class GeneratorConfig:
    negative: float = 406
    modifier: float = 1068
    position: float = 389
    percentage: float = 356
    percentage_e1e2_share: float = 100 / 356
    min_clauses: int = 1
    max_clauses: int = 3
    prefix_rate: float = 0.3

    def proportions(self) -> dict[str, float]:
        raw = {"Negative": self.negative, "Modifier": self.modifier,
               "Position": self.position, "Percentage": self.percentage}
        total = sum(raw.values())
        return {k: v / total for k, v in raw.items()}

    @classmethod
    def from_file(cls, path) -> GeneratorConfig:
        return cls(**read_kv_config(path, {f.name: f.type for f in fields(cls)}))


def read_kv_config(path, known: dict[str, object]) -> dict:
    """Parse a flat ``key = value`` file (``#`` comments allowed) into typed values."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.optionxform = str
    text = Path(path).read_text(encoding="utf-8")
    parser.read_string("[config]\n" + text)
    out = {}
    for key, raw in parser["config"].items():
        if key not in known:
            raise KeyError(f"{path}: unknown config key {key!r}")
        out[key] = coerce(raw, known[key])
    return out


def write_kv_config(values: dict, path) -> None:
    """Inverse of :func:`read_kv_config` for flat scalar values."""
    lines = []
    for key, value in values.items():
        text = str(value).lower() if isinstance(value, bool) else repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{key} = {text}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def coerce(raw: str, typ):
    typ = {"int": int, "float": float, "str": str, "bool": bool}.get(typ, typ)
    if typ is bool:
        low = raw.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("true", "1", "yes")
    if typ in (int, float, str):
        return typ(raw.strip())
    return raw.strip()


class _Builder:
    def __init__(self):
        self.text = ""
        self.entities: list[EntitySpan] = []
        self.relations: list[RelationTriple] = []

    def plain(self, s: str) -> None:
        self.text += s

    def entity(self, etype: str, surface: str) -> int:
        start = len(self.text)
        self.text += surface
        self.entities.append(EntitySpan(start, len(self.text), etype))
        return len(self.entities) - 1

    def relate(self, head: int, tail: int, rtype: str) -> None:
        self.relations.append(RelationTriple(head, tail, rtype))


def _clause(b: _Builder, rtype: str, rng: np.random.Generator, cfg: GeneratorConfig) -> None:
    pick = lambda seq: seq[rng.integers(len(seq))]  # noqa: E731
    word = lambda etype: pick(LEXICON[etype])  # noqa: E731
    filler = pick(_FILLERS[rtype])
    if rtype == "Modifier":
        body = b.entity("Body Part", word("Body Part"))
        b.plain(filler)
        b.relate(b.entity("Degree", word("Degree")), body, rtype)
    elif rtype == "Negative":
        neg = b.entity("Negation", word("Negation"))
        b.plain(filler)
        b.relate(b.entity("Degree", word("Degree")), neg, rtype)
    elif rtype == "Position":
        body = b.entity("Body Part", word("Body Part"))
        b.plain(filler)
        b.relate(body, b.entity("Location", word("Location")), rtype)
        b.plain(pick(_SUFFIXES))
    elif rtype == "Percentage":
        if rng.random() < cfg.percentage_e1e2_share:
            b.plain(filler)
            qty = b.entity("Quantifier", word("Quantifier"))
            b.relate(qty, b.entity("Degree", word("Degree")), rtype)
        else:
            deg = b.entity("Degree", word("Degree"))
            b.plain(filler)
            b.relate(b.entity("Quantifier", word("Quantifier")), deg, rtype)
    else:
        raise ValueError(rtype)


def generate_synthetic_corpus(n_docs: int, seed: int = 0,
                              config: GeneratorConfig | None = None) -> list[Document]:
    """Template sentences: comma-joined clauses, each realising one relation.

    Entities in different clauses are never related, so every cross-clause
    pair is a No-Relation candidate.
    """
    if n_docs < 1:
        raise ValueError("n_docs must be >= 1")
    cfg = config or GeneratorConfig()
    if not 1 <= cfg.min_clauses <= cfg.max_clauses:
        raise ValueError("need 1 <= min_clauses <= max_clauses")
    rng = np.random.default_rng(seed)
    props = cfg.proportions()
    kinds, weights = list(props), np.array(list(props.values()))
    docs = []
    for _ in range(n_docs):
        b = _Builder()
        if rng.random() < cfg.prefix_rate:
            b.plain(_PREFIXES[rng.integers(len(_PREFIXES))])
        n_clauses = int(rng.integers(cfg.min_clauses, cfg.max_clauses + 1))
        for c in range(n_clauses):
            if c:
                b.plain("，")
            _clause(b, kinds[rng.choice(len(kinds), p=weights)], rng, cfg)
        b.plain("。")
        doc = Document(b.text, b.entities, b.relations)
        doc.validate()
        docs.append(doc)
    return docs
