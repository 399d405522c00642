"""Training loop, SGD with momentum, checkpoints and end-to-end gradient checks."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .autodiff import Tape, Tensor, backward, finite_difference_check
from .data import Dataset, DatasetManifest, few_shot_indices, generate_synthetic, load_dataset
from .encoders import (
    ImageEncoderParams,
    TextEncoderParams,
    Vocabulary,
    encode_image,
    encode_text_from_embeddings,
    tokenize,
)
from .errors import ConfigError, ContractError, FormatError, IntegrityError
from .heads import AgotConfig, HeadKind, PromptHead, build_head, build_text_sequence
from .objective import DEFAULT_TAU, MetricReport, contrastive_loss, metric_report, similarity

log = logging.getLogger(__name__)

RETRIEVAL_LR = 0.02
CLASSIFICATION_LR = 0.002


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    head: HeadKind = HeadKind.AGOT
    agot: AgotConfig = AgotConfig()
    learning_rate: float = RETRIEVAL_LR
    momentum: float = 0.9
    epochs: int = 200
    batch_size: int = 16
    seed: int = 0
    tau: float = DEFAULT_TAU
    # "dynamic" or a fixed flow ratio in (0, 1)
    alpha_mode: str = "dynamic"
    shots: int = 16
    split: str = "all"
    encoder_seed: int = 0
    image_hidden: int = 256
    max_len: int = 8
    subnode_std: float = 1.0
    meta_scale: float = 2.0
    dataset: str = ""
    checkpoint: str = ""
    run_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "head", HeadKind.parse(self.head))
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 for in-batch contrast, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.split not in ("all", "base", "new"):
            raise ConfigError(f"split must be all, base or new, got {self.split!r}")
        if self.shots < 1:
            raise ConfigError(f"shots must be >= 1, got {self.shots}")
        self.fixed_alpha  # validates alpha_mode

    @property
    def fixed_alpha(self) -> float | None:
        if self.alpha_mode == "dynamic":
            return None
        try:
            a = float(self.alpha_mode)
        except ValueError:
            raise ConfigError(f"alpha_mode must be 'dynamic' or a number, got {self.alpha_mode!r}") from None
        if not 0 < a < 1:
            raise ConfigError(f"fixed alpha must lie in (0, 1), got {a}")
        return a

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_flat(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "agot":
                out.update({f"agot.{k}": x for k, x in dataclasses.asdict(v).items()})
            elif isinstance(v, HeadKind):
                out[f.name] = v.value
            else:
                out[f.name] = v
        return out

    @classmethod
    def from_flat(cls, flat: dict[str, Any]) -> "TrainConfig":
        """Build from dotted keys; values may be strings and are coerced by field type."""
        kw: dict[str, Any] = {}
        agot_kw: dict[str, Any] = {}
        agot_types = {f.name: f.type for f in dataclasses.fields(AgotConfig)}
        own_types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, val in flat.items():
            if key.startswith("agot."):
                name = key[5:]
                if name not in agot_types:
                    raise ConfigError(f"unknown config key {key!r}")
                agot_kw[name] = _coerce(key, val, "int")
            elif key in own_types and key != "agot":
                kw[key] = _coerce(key, val, own_types[key])
            else:
                raise ConfigError(f"unknown config key {key!r}")
        if agot_kw:
            kw["agot"] = AgotConfig(**agot_kw)
        return cls(**kw)

    def model_hash(self) -> str:
        """Digest of the fields that shape the parameter set."""
        flat = self.to_flat()
        keep = {k: v for k, v in flat.items()
                if k.startswith("agot.") or k in ("head", "alpha_mode", "encoder_seed", "image_hidden", "max_len")}
        return _digest(keep)

    def config_hash(self) -> str:
        return _digest(self.to_flat())


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _coerce(key: str, val: Any, typ: str) -> Any:
    if not isinstance(val, str):
        return val
    try:
        if typ == "int":
            return int(val)
        if typ == "float":
            return float(val)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {val!r} as {typ}") from None
    return val


# ---------------------------------------------------------------- model assembly


@dataclass
class Model:
    vocab: Vocabulary
    text: TextEncoderParams
    image: ImageEncoderParams
    head: PromptHead
    max_len: int

    def encoder_tensors(self) -> dict[str, Tensor]:
        out = {f"text.{k}": t for k, t in self.text.tensors().items()}
        out.update({f"image.{k}": t for k, t in self.image.tensors().items()})
        return out

    def image_features(self, feats: np.ndarray) -> Tensor:
        return encode_image(Tensor(feats), self.image)

    def caption_ids(self, captions: list[str]) -> np.ndarray:
        return np.array([tokenize(c, self.vocab, self.max_len) for c in captions], dtype=np.int64)

    def scores(self, img: Tensor, captions: list[str], tau: float):
        prompt = self.head.forward(img)
        seq = build_text_sequence(prompt, self.caption_ids(captions), self.text)
        text = encode_text_from_embeddings(seq, self.text)
        return similarity(img, text, tau), prompt


def build_model(cfg: TrainConfig, vocab: Vocabulary, raw_dim: int) -> Model:
    a = cfg.agot
    rng_text = np.random.default_rng([cfg.encoder_seed, 10])
    rng_img = np.random.default_rng([cfg.encoder_seed, 11])
    text = TextEncoderParams.init(rng_text, len(vocab), a.d_e, a.d)
    image = ImageEncoderParams.init(rng_img, raw_dim, cfg.image_hidden, a.d)
    head = build_head(cfg.head, a, np.random.default_rng([cfg.seed, 12]), vocab, text,
                      alpha=cfg.fixed_alpha, subnode_std=cfg.subnode_std, meta_scale=cfg.meta_scale)
    return Model(vocab, text, image, head, cfg.max_len)


def in_batch_classes(labels: np.ndarray, captions: list[str]) -> tuple[list[str], np.ndarray]:
    """Candidate captions for one batch: one per distinct class, first occurrence wins."""
    cols: dict[int, int] = {}
    cands: list[str] = []
    for lab, cap in zip(labels.tolist(), captions):
        if lab not in cols:
            cols[lab] = len(cands)
            cands.append(cap)
    return cands, np.array([cols[lab] for lab in labels.tolist()], dtype=np.int64)


def evaluate(model: Model, data: Dataset, tau: float, candidates: dict[int, str] | None = None,
             **meta) -> MetricReport:
    """Frozen top-1 evaluation of every example against one caption per class."""
    if candidates is None:
        candidates = data.class_captions()
    classes = sorted(candidates)
    col = {c: i for i, c in enumerate(classes)}
    labels = data.labels()
    missing = set(labels.tolist()) - set(classes)
    if missing:
        raise ConfigError(f"no candidate caption for classes {sorted(missing)}")
    img = model.image_features(data.features())
    sim, _ = model.scores(img, [candidates[c] for c in classes], tau)
    targets = np.array([col[c] for c in labels.tolist()], dtype=np.int64)
    return metric_report(sim, targets, labels, **meta)


# ---------------------------------------------------------------- optimizer


def sgd_step(params: dict[str, Tensor], lr: float, momentum: float, buffers: dict[str, np.ndarray]) -> None:
    """Heavy-ball SGD: buf = momentum*buf + grad; param -= lr*buf; then zero grads."""
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    for name, p in params.items():
        buf = buffers.get(name)
        buf = p.grad.copy() if buf is None else momentum * buf + p.grad
        buffers[name] = buf
        p.data = p.data - lr * buf
        p.grad = None


# ---------------------------------------------------------------- checkpoints

MAGIC = b"AGOTCKPT"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict[str, np.ndarray]
    epoch: int = 0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    history: list[MetricReport] = field(default_factory=list)
    vocab: list[str] = field(default_factory=list)
    raw_dim: int = 0
    num_classes: int = 0


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Named-array container: header JSON, then raw little-endian float64 arrays, then SHA-256.

    The output location is not stored, so the same run saved anywhere gives the same bytes.
    """
    cfg = ckpt.config.replace(checkpoint="")
    header = {
        "config": cfg.to_flat(),
        "config_hash": cfg.config_hash(),
        "epoch": ckpt.epoch,
        "history": [r.to_dict() for r in ckpt.history],
        "vocab": ckpt.vocab,
        "raw_dim": ckpt.raw_dim,
        "num_classes": ckpt.num_classes,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<II", CKPT_VERSION, len(hbytes)), hbytes]
    arrays = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    arrays += [(f"buffer/{k}", v) for k, v in ckpt.buffers.items()]
    chunks.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        nb = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    body = b"".join(chunks)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 8 + 32 or not blob.startswith(MAGIC):
        raise IntegrityError(f"{path}: not a checkpoint or truncated")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch (truncated or corrupted)")
    pos = len(MAGIC)
    version, hlen = struct.unpack_from("<II", body, pos)
    pos += 8
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unknown checkpoint version {version}")
    header = json.loads(body[pos:pos + hlen])
    pos += hlen
    cfg = TrainConfig.from_flat(header["config"])
    if cfg.config_hash() != header["config_hash"]:
        raise IntegrityError(f"{path}: config hash mismatch")
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        name = body[pos:pos + nlen].decode()
        pos += nlen
        (rank,) = struct.unpack_from("<I", body, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", body, pos)
        pos += 8 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
        kind, key = name.split("/", 1)
        (params if kind == "param" else buffers)[key] = arr
    if pos != len(body):
        raise IntegrityError(f"{path}: {len(body) - pos} trailing bytes")
    return Checkpoint(
        config=cfg, params=params, epoch=header["epoch"], buffers=buffers,
        history=[MetricReport.from_dict(d) for d in header["history"]],
        vocab=header["vocab"], raw_dim=header["raw_dim"], num_classes=header["num_classes"],
    )


def restore_model(ckpt: Checkpoint) -> Model:
    model = build_model(ckpt.config, Vocabulary(ckpt.vocab[3:]), ckpt.raw_dim)
    state = model.head.state()
    if set(state) != set(ckpt.params):
        raise FormatError("checkpoint parameter names do not match the configured head")
    for k, t in state.items():
        if t.shape != ckpt.params[k].shape:
            raise FormatError(f"checkpoint array {k!r} has shape {ckpt.params[k].shape}, expected {t.shape}")
        t.data = ckpt.params[k].copy()
    return model


# ---------------------------------------------------------------- training


@dataclass
class Split:
    train: Dataset
    heldout: Dataset
    classes: list[int]


def make_split(cfg: TrainConfig, dataset: Dataset, base: list[int] | None = None,
               new: list[int] | None = None) -> Split:
    if cfg.split == "all":
        classes = sorted(set(dataset.labels().tolist()))
    else:
        if base is None or new is None:
            raise ConfigError(f"split={cfg.split!r} needs a base/new partition")
        classes = base if cfg.split == "base" else new
    pool = dataset.restrict(classes)
    idx = few_shot_indices(pool, cfg.shots, cfg.seed)
    rest = sorted(set(range(len(pool))) - set(idx))
    return Split(pool.subset(idx), pool.subset(rest), classes)


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 4]).permutation(n)


def train_run(cfg: TrainConfig, dataset: Dataset | None = None, resume: Checkpoint | None = None,
              split: Split | None = None, model: Model | None = None) -> tuple[Checkpoint, list[MetricReport]]:
    """Optimize the prompt head; encoders stay frozen.

    Returns the final checkpoint and the per-epoch metric history.
    """
    if dataset is None:
        if not cfg.dataset:
            raise ConfigError("no dataset given")
        dataset = load_dataset(cfg.dataset)
    vocab = Vocabulary.from_texts(dataset.captions())
    if split is None:
        split = make_split(cfg, dataset)
    if model is None:
        model = build_model(cfg, vocab, dataset.raw_dim)
    if model.image.raw_dim != dataset.raw_dim:
        raise ConfigError(f"model expects raw_dim={model.image.raw_dim}, dataset has {dataset.raw_dim}")

    buffers: dict[str, np.ndarray] = {}
    history: list[MetricReport] = []
    start = 0
    if resume is not None:
        if resume.config.model_hash() != cfg.model_hash():
            raise ConfigError("checkpoint was produced by an incompatible configuration")
        for k, t in model.head.state().items():
            t.data = resume.params[k].copy()
        buffers = {k: v.copy() for k, v in resume.buffers.items()}
        history = list(resume.history)
        start = resume.epoch

    params = model.head.parameters()
    train = split.train
    feats, labels, captions = train.features(), train.labels(), train.captions()
    candidates = dataset.class_captions()
    candidates = {c: candidates[c] for c in split.classes}
    meta = dict(run_id=cfg.run_id, head=cfg.head.value, Z=cfg.agot.Z, R=cfg.agot.R, alpha_mode=cfg.alpha_mode)

    for epoch in range(start, cfg.epochs):
        order = _epoch_order(cfg.seed, epoch, len(train))
        losses = []
        for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            if idx.size < 2:
                continue
            loss = batch_loss(model, feats[idx], labels[idx], [captions[i] for i in idx], cfg.tau, params)
            if not math.isfinite(loss):
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch}, batch {b}")
            losses.append(loss)
            if params:
                sgd_step(params, cfg.learning_rate, cfg.momentum, buffers)
        rep = evaluate(model, train, cfg.tau, candidates, epoch=epoch + 1, **meta)
        rep.loss = float(np.mean(losses)) if losses else float("nan")
        history.append(rep)
        log.debug("epoch %d loss %.4f R@1 %.3f", epoch + 1, rep.loss, rep.recall_at_1)

    ckpt = Checkpoint(
        config=cfg,
        params={k: t.data.copy() for k, t in model.head.state().items()},
        epoch=max(cfg.epochs, start),
        buffers={k: v.copy() for k, v in buffers.items()},
        history=history,
        vocab=list(model.vocab.tokens),
        raw_dim=dataset.raw_dim,
        num_classes=dataset.num_classes,
    )
    if cfg.checkpoint:
        save_checkpoint(ckpt, cfg.checkpoint)
    return ckpt, history


def batch_loss(model: Model, feats: np.ndarray, labels: np.ndarray, captions: list[str], tau: float,
               params: dict[str, Tensor]) -> float:
    """Forward and backward one in-batch contrastive step; leaves grads on ``params``."""
    cands, targets = in_batch_classes(labels, captions)
    for p in params.values():
        p.grad = None
    img = model.image_features(feats)
    with Tape() as tape:
        sim, _ = model.scores(img, cands, tau)
        loss = contrastive_loss(sim, targets)
    value = loss.item()
    if math.isfinite(value):
        backward(loss, tape)
    return value


# ---------------------------------------------------------------- gradient check suite


@dataclass
class GradCheckRow:
    head: str
    param: str
    max_rel_error: float
    coord: tuple[int, ...] | None
    analytic: float
    numeric: float
    passed: bool


MICRO = AgotConfig(Z=2, R=2, L=2, d_e=4, d=6, d_hidden=5)


def gradcheck_suite(agot: AgotConfig = MICRO, heads=(HeadKind.FIXED, HeadKind.COOP, HeadKind.COCOOP,
                                                     HeadKind.COTPT, HeadKind.AGOT),
                    h: float = 1e-5, tol: float = 1e-5, seed: int = 0) -> list[GradCheckRow]:
    """Finite-difference check of the contrastive loss w.r.t. every trainable tensor."""
    if max(agot.Z, agot.R, agot.L, agot.d_e, agot.d, agot.d_hidden) > 8:
        raise ConfigError("gradcheck_suite needs every width <= 8")
    data = generate_synthetic(DatasetManifest(num_classes=3, raw_dim=5, sigma=0.3, seed=seed), 2)
    vocab = Vocabulary.from_texts(data.captions())
    rows: list[GradCheckRow] = []
    for kind in heads:
        kind = HeadKind.parse(kind)
        cfg_agot = dataclasses.replace(agot, R=1) if kind is HeadKind.COTPT else agot
        cfg = TrainConfig(head=kind, agot=cfg_agot, seed=seed, image_hidden=6, max_len=4, tau=0.07, subnode_std=2.0,
                          meta_scale=2.0)
        model = build_model(cfg, vocab, data.raw_dim)
        img = model.image_features(data.features())
        cands, targets = in_batch_classes(data.labels(), data.captions())

        def f(_x, model=model, img=img, cands=cands, targets=targets, tau=cfg.tau):
            sim, _ = model.scores(img, cands, tau)
            return contrastive_loss(sim, targets)

        for name, t in model.head.parameters().items():
            rep = finite_difference_check(f, t, h=h, tol=tol)
            i = rep.worst_index
            rows.append(GradCheckRow(kind.value, name, rep.max_rel_error, i,
                                     float(rep.analytic[i]), float(rep.numeric[i]), rep.passed))
    return rows
