"""The joint extraction model: shared encoder, CRF tagger and relation head."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .crf import CrfHead, bieos_constraint_init
from .data import (
    RELATION_LABELS,
    TAGS,
    Document,
    EntitySpan,
    RcInstance,
    Vocab,
    build_rc_instances,
    decode_bieos,
    encode_bieos,
)
from .encoder import Encoder, EncoderConfig, padding_masks
from .masks import build_task_mask
from .rc import RcHead, rc_loss
from .tensor import Tensor

MASK_VARIANTS = ("v1", "v2")


@dataclass
class SentenceBatch:
    token_ids: np.ndarray   # (B, T) padded with [PAD]
    valid_lens: np.ndarray  # tokens incl. [CLS]/[SEP]
    tags: np.ndarray        # (B, W) gold BIEOS, 0-padded
    n_words: np.ndarray

    def __len__(self) -> int:
        return len(self.valid_lens)


def make_sentence_batch(docs: Sequence[Document], vocab: Vocab) -> SentenceBatch:
    if not docs:
        raise ValueError("empty sentence batch")
    ids = [vocab.encode(d.text) for d in docs]
    n_words = np.array([len(d.text) for d in docs], dtype=np.int64)
    if (n_words == 0).any():
        raise ValueError("document with empty text")
    T_len = max(map(len, ids))
    token_ids = np.full((len(docs), T_len), vocab.pad_id, dtype=np.int64)
    tags = np.zeros((len(docs), int(n_words.max())), dtype=np.int64)
    for b, (row, doc) in enumerate(zip(ids, docs)):
        token_ids[b, : len(row)] = row
        tags[b, : n_words[b]] = encode_bieos(doc.entities, n_words[b])
    return SentenceBatch(token_ids, np.array([len(r) for r in ids]), tags, n_words)


class JointModel:
    """Shared-parameter NER + RC model.

    ``params`` merges the encoder, CRF and RC parameter maps; names are
    prefixed (``embed.``, ``layerN.``, ``crf.``, ``rc.``) so checkpoints are
    flat name -> array maps.
    """

    def __init__(self, config: EncoderConfig, vocab: Vocab, mask_variant: str = "v2",
                 seed: int = 0, constrain_transitions: bool = False):
        if mask_variant not in MASK_VARIANTS:
            raise ValueError(f"mask_variant must be one of {MASK_VARIANTS}")
        if config.vocab_size != len(vocab):
            raise ValueError("config.vocab_size does not match the vocabulary")
        self.config = config
        self.vocab = vocab
        self.mask_variant = mask_variant
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(config, rng)
        init_A = bieos_constraint_init(list(TAGS)) if constrain_transitions else None
        self.crf = CrfHead(config.d_model, len(TAGS), rng, config.init_std, init_A)
        self.rc = RcHead(config.d_model, len(RELATION_LABELS), rng, init_std=config.init_std)

    @property
    def params(self) -> dict[str, Tensor]:
        return {**self.encoder.params, **self.crf.params, **self.rc.params}

    def head_names(self, task: str) -> set[str]:
        return set((self.crf if task == "ner" else self.rc).params)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.params
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state lacks parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.astype(p.data.dtype, copy=True)

    # -- forward pieces ---------------------------------------------------------

    def context(self, batch: SentenceBatch) -> Tensor:
        return self.encoder.context(batch.token_ids, batch.valid_lens)

    def ner_output(self, batch: SentenceBatch, H_ctx: Tensor) -> Tensor:
        T_len = batch.token_ids.shape[1]
        return self.encoder.focus(H_ctx, padding_masks(T_len, batch.valid_lens))

    def ner_losses(self, batch: SentenceBatch, H_ctx: Tensor) -> Tensor:
        """Per-sentence CRF negative log-likelihood."""
        H = self.ner_output(batch, H_ctx)
        return self.crf.nll(H, batch.tags, batch.n_words)

    def rc_masks(self, instances: Sequence[RcInstance], T_len: int, valid_lens) -> np.ndarray:
        return np.stack([
            build_task_mask(self.mask_variant, T_len, inst.positions, int(v))
            for inst, v in zip(instances, valid_lens)
        ])

    def rc_logits(self, instances: Sequence[RcInstance], rows: np.ndarray, batch: SentenceBatch,
                  H_ctx: Tensor) -> Tensor:
        """Relation logits; ``rows[i]`` is instance i's sentence within ``batch``."""
        rows = np.asarray(rows, dtype=np.int64)
        H = T.getitem(H_ctx, rows)
        masks = self.rc_masks(instances, batch.token_ids.shape[1], batch.valid_lens[rows])
        return self.rc.logits(self.encoder.focus(H, masks))

    def rc_losses(self, instances, rows, batch, H_ctx) -> Tensor:
        logits = self.rc_logits(instances, rows, batch, H_ctx)
        return rc_loss(logits, np.array([inst.label for inst in instances]))

    # -- inference --------------------------------------------------------------

    def predict_entities(self, docs: Sequence[Document], batch_size: int = 64) -> list[list[EntitySpan]]:
        out: list[list[EntitySpan]] = []
        for start in range(0, len(docs), batch_size):
            chunk = docs[start:start + batch_size]
            batch = make_sentence_batch(chunk, self.vocab)
            with T.no_grad():
                H = self.ner_output(batch, self.context(batch))
            out.extend(decode_bieos(tags) for tags in self.crf.decode(H, batch.n_words))
        return out

    def classify_pairs(self, docs: Sequence[Document],
                       entities: Sequence[Sequence[EntitySpan]] | None = None,
                       batch_size: int = 64) -> list[list[tuple[RcInstance, int]]]:
        """Predicted label index for every candidate pair of every document.

        ``entities`` replaces the gold entity lists (pipeline evaluation).
        """
        results: list[list[tuple[RcInstance, int]]] = []
        for start in range(0, len(docs), batch_size):
            chunk = docs[start:start + batch_size]
            ents = None if entities is None else entities[start:start + batch_size]
            per_doc = [
                build_rc_instances(doc, doc_index=i, entities=None if ents is None else ents[i])
                for i, doc in enumerate(chunk)
            ]
            flat = [inst for insts in per_doc for inst in insts]
            preds: list[int] = []
            if flat:
                batch = make_sentence_batch(chunk, self.vocab)
                with T.no_grad():
                    H_ctx = self.context(batch)
                    for s in range(0, len(flat), batch_size):
                        part = flat[s:s + batch_size]
                        rows = np.array([inst.doc_index for inst in part])
                        logits = self.rc_logits(part, rows, batch, H_ctx)
                        preds.extend(int(i) for i in np.argmax(logits.data, axis=-1))
            it = iter(preds)
            results.extend([(inst, next(it)) for inst in insts] for insts in per_doc)
        return results
