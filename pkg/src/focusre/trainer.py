"""Joint training, separate-task ablation modes, and checkpoint I/O."""
from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Document, RcInstance, Vocab, build_rc_instances, read_kv_config
from .encoder import EncoderConfig
from .evaluate import MetricsReport, ner_metrics, rc_correct_entities
from .model import JointModel, SentenceBatch, make_sentence_batch

log = logging.getLogger(__name__)

MODES = ("joint", "ner_only", "rc_only")
BATCH_POLICIES = ("same_sentence", "independent", "alternate")


class DivergenceError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_steps: int = 0
    mode: str = "joint"
    mask_variant: str = "v2"
    batch_policy: str = "same_sentence"
    keep_rate: float = 0.15
    k_focus: int = 2
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 128
    activation: str = "gelu"
    dropout: float = 0.0
    constrain_transitions: bool = False
    dtype: str = "float64"

    def __post_init__(self):
        errors = []
        if not self.lr > 0:
            errors.append("lr must be > 0")
        if self.epochs < 0 or self.batch_size < 1:
            errors.append("epochs must be >= 0 and batch_size >= 1")
        if not 0 <= self.k_focus <= self.n_layers:
            errors.append(f"need 0 <= k_focus <= n_layers, got {self.k_focus} > {self.n_layers}")
        if self.mode not in MODES:
            errors.append(f"mode must be one of {MODES}")
        if self.mask_variant not in ("v1", "v2"):
            errors.append("mask_variant must be v1 or v2")
        if self.batch_policy not in BATCH_POLICIES:
            errors.append(f"batch_policy must be one of {BATCH_POLICIES}")
        if not 0.0 <= self.keep_rate <= 1.0:
            errors.append("keep_rate must be in [0, 1]")
        if self.dtype not in ("float64", "float32"):
            errors.append("dtype must be float64 or float32")
        if errors:
            raise ValueError("; ".join(errors))

    @classmethod
    def from_file(cls, path, **overrides) -> TrainConfig:
        values = read_kv_config(path, {f.name: f.type for f in fields(cls)})
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(
            vocab_size=vocab_size, d_model=self.d_model, n_heads=self.n_heads, d_ff=self.d_ff,
            n_layers=self.n_layers, k_focus=self.k_focus, max_len=self.max_len,
            activation=self.activation, dropout=self.dropout,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def build_model(config: TrainConfig, vocab: Vocab) -> JointModel:
    T.set_default_dtype(np.float32 if config.dtype == "float32" else np.float64)
    return JointModel(config.encoder_config(len(vocab)), vocab, config.mask_variant,
                      seed=config.seed, constrain_transitions=config.constrain_transitions)


class Adam:
    """Adam without weight decay; parameters without a gradient are left untouched."""

    def __init__(self, params: dict[str, T.Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, warmup_steps: int = 0):
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.warmup_steps = warmup_steps
        self.steps = 0
        self.state: dict[str, tuple[np.ndarray, np.ndarray, int]] = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.steps += 1
        lr = self.lr
        if self.warmup_steps:
            lr *= min(1.0, self.steps / self.warmup_steps)
        b1, b2 = self.betas
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m, v, t = self.state.get(name, (np.zeros_like(p.data), np.zeros_like(p.data), 0))
            t += 1
            m = b1 * m + (1 - b1) * p.grad
            v = b2 * v + (1 - b2) * p.grad * p.grad
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)
            self.state[name] = (m, v, t)


@dataclass
class StepLosses:
    ner: float
    rc: float
    all: float


def _rc_subbatch(instances: Sequence[RcInstance], docs: Sequence[Document], vocab: Vocab):
    """Sentence batch covering ``instances`` plus each instance's row in it."""
    order = sorted({inst.doc_index for inst in instances})
    where = {d: i for i, d in enumerate(order)}
    batch = make_sentence_batch([docs[d] for d in order], vocab)
    return batch, np.array([where[inst.doc_index] for inst in instances])


def compute_losses(model: JointModel, ner_docs: Sequence[Document], rc_batch: Sequence[RcInstance],
                   rc_docs: Sequence[Document] | None = None):
    """Graph-carrying ``(L_ner, L_rc, L_all)``; an empty batch gives ``None`` for its task.

    ``rc_docs`` are the sentences that ``RcInstance.doc_index`` points into
    (default ``ner_docs``).  When they are the NER batch itself, the RC pass
    reuses that batch's context representation, so both tasks share one
    ``H_{N-K}`` per sentence.
    """
    rc_docs = ner_docs if rc_docs is None else rc_docs
    if not ner_docs and not rc_batch:
        raise ValueError("joint_step needs at least one non-empty batch")
    L_ner = L_rc = None
    batch: SentenceBatch | None = None
    H_ctx = None
    if ner_docs:
        batch = make_sentence_batch(ner_docs, model.vocab)
        H_ctx = model.context(batch)
        L_ner = model.ner_losses(batch, H_ctx).mean()
    if rc_batch:
        if H_ctx is not None and rc_docs is ner_docs:
            rows = np.array([inst.doc_index for inst in rc_batch])
            rc_sents, rc_ctx = batch, H_ctx
        else:
            rc_sents, rows = _rc_subbatch(rc_batch, rc_docs, model.vocab)
            rc_ctx = model.context(rc_sents)
        L_rc = model.rc_losses(rc_batch, rows, rc_sents, rc_ctx).mean()
    if L_ner is None:
        L_all = L_rc
    elif L_rc is None:
        L_all = L_ner
    else:
        L_all = L_ner + L_rc
    return L_ner, L_rc, L_all


def joint_step(model: JointModel, optimizer: Adam, ner_docs: Sequence[Document],
               rc_batch: Sequence[RcInstance], rc_docs: Sequence[Document] | None = None,
               ) -> StepLosses:
    """One optimisation step on ``L_all = L_ner + L_rc`` with a single backward pass."""
    optimizer.zero_grad()
    L_ner, L_rc, L_all = compute_losses(model, ner_docs, rc_batch, rc_docs)
    value = L_all.item()
    if not math.isfinite(value):
        raise DivergenceError(
            f"non-finite loss: L_ner={None if L_ner is None else L_ner.item()}, "
            f"L_rc={None if L_rc is None else L_rc.item()}"
        )
    T.backward(L_all)
    optimizer.step()
    return StepLosses(0.0 if L_ner is None else L_ner.item(),
                      0.0 if L_rc is None else L_rc.item(), value)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: JointModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    lr_used: float = 0.0


def _instances(docs: Sequence[Document], vocab: Vocab, training: bool, keep_rate: float,
               rng: np.random.Generator | None) -> list[RcInstance]:
    out = []
    for i, doc in enumerate(docs):
        out.extend(build_rc_instances(doc, vocab.encode(doc.text), training=training,
                                      keep_rate=keep_rate, rng=rng, doc_index=i))
    return out


def _round(x: float) -> float:
    return float(f"{x:.12g}")


def _report_dict(rep: MetricsReport | None) -> dict | None:
    if rep is None:
        return None
    return {"p": _round(rep.precision), "r": _round(rep.recall), "f1": _round(rep.f1)}


def evaluate_losses(model: JointModel, docs: Sequence[Document], mode: str,
                    batch_size: int = 64) -> tuple[float, float]:
    """Mean dev losses with every No-Relation pair kept."""
    ner_sum = rc_sum = 0.0
    ner_n = rc_n = 0
    with T.no_grad():
        for s in range(0, len(docs), batch_size):
            chunk = docs[s:s + batch_size]
            insts = _instances(chunk, model.vocab, False, 1.0, None)
            batch = make_sentence_batch(chunk, model.vocab)
            H_ctx = model.context(batch)
            if mode != "rc_only":
                ner_sum += float(model.ner_losses(batch, H_ctx).data.sum())
                ner_n += len(chunk)
            if mode != "ner_only" and insts:
                rows = np.array([i.doc_index for i in insts])
                rc_sum += float(model.rc_losses(insts, rows, batch, H_ctx).data.sum())
                rc_n += len(insts)
    return ner_sum / max(ner_n, 1), rc_sum / max(rc_n, 1)


def evaluate_model(model: JointModel, docs: Sequence[Document], mode: str = "joint"):
    ner = rc = None
    if docs and mode != "rc_only":
        ner = ner_metrics(model.predict_entities(docs), [d.entities for d in docs])
    if docs and mode != "ner_only":
        rc = rc_correct_entities(model, docs)
    return ner, rc


def _selection_score(mode: str, ner, rc) -> float:
    return (0.0 if ner is None else ner.f1) + (0.0 if rc is None else rc.f1)


def _train_once(train_docs, dev_docs, config: TrainConfig, vocab: Vocab, lr: float) -> TrainResult:
    model = build_model(config, vocab)
    if config.dropout:
        model.encoder.dropout_rng = np.random.default_rng([config.seed, 3])
    optimizer = Adam(model.params, lr=lr, betas=(config.beta1, config.beta2),
                     eps=config.adam_eps, warmup_steps=config.warmup_steps)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    instances = _instances(train_docs, vocab, True, config.keep_rate,
                           np.random.default_rng([config.seed, 2]))
    by_doc: dict[int, list[RcInstance]] = {}
    for inst in instances:
        by_doc.setdefault(inst.doc_index, []).append(inst)

    result = TrainResult(model, lr_used=lr)
    best_state, best_score = model.state(), -1.0
    n = len(train_docs)
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        doc_batches = [order[s:s + config.batch_size] for s in range(0, n, config.batch_size)]
        if config.batch_policy == "independent":
            inst_order = shuffle_rng.permutation(len(instances))
            rc_batches = [[instances[i] for i in part]
                          for part in np.array_split(inst_order, len(doc_batches))]
        totals = np.zeros(3)
        steps = 0
        for b, idx in enumerate(doc_batches):
            sub = [train_docs[i] for i in idx]
            if config.batch_policy == "independent":
                rc_batch, rc_docs = rc_batches[b], train_docs
            else:
                local = {int(d): k for k, d in enumerate(idx)}
                rc_batch = [RcInstance(inst.token_ids, inst.positions, inst.label, local[int(d)], inst.pair)
                            for d in idx for inst in by_doc.get(int(d), [])]
                rc_docs = sub
            ner_docs = sub
            if config.batch_policy == "alternate":
                if b % 2:
                    ner_docs = []
                else:
                    rc_batch = []
            if config.mode == "ner_only":
                rc_batch = []
            elif config.mode == "rc_only":
                ner_docs = []
            if not ner_docs and not rc_batch:
                continue
            losses = joint_step(model, optimizer, ner_docs, rc_batch, rc_docs)
            totals += (losses.ner, losses.rc, losses.all)
            steps += 1
        totals /= max(steps, 1)
        dev_ner_loss, dev_rc_loss = evaluate_losses(model, dev_docs, config.mode) if dev_docs else (0.0, 0.0)
        ner, rc = evaluate_model(model, dev_docs, config.mode)
        record = {
            "epoch": epoch,
            "L_ner": _round(totals[0]), "L_rc": _round(totals[1]), "L_all": _round(totals[2]),
            "dev_L_ner": _round(dev_ner_loss), "dev_L_rc": _round(dev_rc_loss),
            "dev_L_all": _round(dev_ner_loss + dev_rc_loss),
            "dev_ner": _report_dict(ner), "dev_rc": _report_dict(rc),
        }
        result.history.append(record)
        log.info("epoch %d %s", epoch, json.dumps(record))
        # without a dev split the last epoch is kept
        score = _selection_score(config.mode, ner, rc) if dev_docs else float(epoch)
        if score > best_score:
            best_score, best_state, result.best_epoch = score, model.state(), epoch
    model.load_state(best_state)
    return result


def train(train_docs: Sequence[Document], dev_docs: Sequence[Document], config: TrainConfig,
          vocab: Vocab | None = None) -> TrainResult:
    """Train from scratch; on divergence retry once at half the learning rate.

    Returns the model restored to its best dev epoch and the per-epoch
    records. With no dev split the last epoch is kept; with ``epochs == 0``
    the initial parameters are.
    """
    if not train_docs:
        raise ValueError("empty training split")
    vocab = vocab or Vocab.build(train_docs)
    lr = config.lr
    for attempt in range(2):
        try:
            return _train_once(train_docs, dev_docs, config, vocab, lr)
        except DivergenceError as exc:
            log.warning("training diverged at lr=%g: %s", lr, exc)
            lr /= 2
    raise TrainingError(f"training diverged twice (last lr {lr * 2:g})")


def write_metrics_log(history: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in history:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"FOCUSRE\x00"
VERSION = 1


def save_checkpoint(model: JointModel, path, config: dict | None = None) -> None:
    """Binary checkpoint: magic, version byte, JSON header, tensors, CRC32.

    Integers and float64 values are little-endian; names are length-prefixed
    UTF-8.
    """
    header = {
        "config": config or {},
        "encoder": model.config.to_dict(),
        "mask_variant": model.mask_variant,
        "vocab": model.vocab.to_list(),
    }
    head = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    parts = [MAGIC, struct.pack("<B", VERSION), struct.pack("<I", len(head)), head]
    params = model.params
    parts.append(struct.pack("<I", len(params)))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.tobytes()]
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 1 or blob[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic bytes")
    version = blob[len(MAGIC)]
    if version != VERSION:
        raise IncompatibleCheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    body, crc = blob[:-4], blob[-4:]
    if len(blob) < len(MAGIC) + 9 or struct.unpack("<I", crc)[0] != zlib.crc32(body):
        raise CorruptCheckpointError(f"{path}: checksum mismatch (truncated or damaged)")
    pos = len(MAGIC) + 1

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise CorruptCheckpointError(f"{path}: truncated")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(take(hlen).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(body):
        raise CorruptCheckpointError(f"{path}: trailing bytes")
    return header, tensors


def load_checkpoint(path) -> JointModel:
    header, tensors = read_checkpoint(path)
    vocab = Vocab.from_list(header["vocab"])
    enc = EncoderConfig(**header["encoder"])
    dtype = header.get("config", {}).get("dtype", "float64")
    T.set_default_dtype(np.float32 if dtype == "float32" else np.float64)
    model = JointModel(enc, vocab, header["mask_variant"])
    model.load_state(tensors)
    return model
