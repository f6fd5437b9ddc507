"""Autoregressive next-event model over the 388-token vocabulary.

The network is a small decoder-only transformer (see _network for the exact
flat parameter order). Likelihood of a window's first event is conditioned
on a dedicated BOS embedding whose id equals vocab_size. The model attends
to at most context_length tokens; older context simply falls out of the
window.

Checkpoint file format ("ACKP1"): the 5 magic bytes, a 32-bit little-endian
header length, a JSON header {config, provenance, param_count, dtype}, then
the parameters as little-endian float32 or float64 in the documented order.

Training is bit-reproducible: initialization and epoch shuffles derive from
config.seed, batches are visited in shuffle order, and every reduction is a
fixed-order numpy operation.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _network as net
from ._seeds import derive_seed
from .errors import (
    EmptyContext,
    EmptyCorpus,
    EmptyPrompt,
    FormatError,
    InvalidConfig,
    NonFiniteLoss,
)

CHECKPOINT_MAGIC = b"ACKP1"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_MARGIN_CLAMP = 1e-12  # floor on (1 - p) in the margin gradient


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 388
    context_length: int = 256
    embed_dim: int = 128
    num_layers: int = 2
    num_heads: int = 4
    hidden_dim: int = 512
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise InvalidConfig("vocab_size must be at least 2")
        if self.context_length < 2:
            raise InvalidConfig("context_length must be at least 2")
        if min(self.embed_dim, self.num_layers, self.num_heads, self.hidden_dim) < 1:
            raise InvalidConfig("model dimensions must be positive")
        if self.embed_dim % self.num_heads != 0:
            raise InvalidConfig(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.precision not in ("float32", "float64"):
            raise InvalidConfig(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    @property
    def bos_id(self) -> int:
        return self.vocab_size


@dataclass(eq=False)
class ModelCheckpoint:
    config: ModelConfig
    params: np.ndarray  # flat, in the documented order
    provenance: dict
    _params64: np.ndarray | None = field(default=None, repr=False)

    @property
    def param_count(self) -> int:
        return int(self.params.size)


@dataclass
class TrainingExample:
    tokens: np.ndarray  # exactly context_length tokens
    work_id: str

    def __post_init__(self) -> None:
        self.tokens = np.asarray(self.tokens, dtype=np.uint16).ravel()


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 40
    batch_size: int = 8
    learning_rate: float = 3e-4
    weight_decay: float = 0.0


@dataclass(frozen=True)
class SamplingSettings:
    temperature: float = 1.0
    top_k: int | None = None
    seed: int = 0


def corpus_fingerprint(examples: list[TrainingExample]) -> str:
    """sha256 over work ids and token bytes, for provenance records."""
    h = hashlib.sha256()
    for ex in examples:
        h.update(ex.work_id.encode("utf-8"))
        h.update(b"\x00")
        h.update(ex.tokens.astype("<u2").tobytes())
    return h.hexdigest()


def params_hash(ckpt: ModelCheckpoint) -> str:
    return hashlib.sha256(np.ascontiguousarray(ckpt.params).tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# construction and basic queries
# ---------------------------------------------------------------------------

def init_model(config: ModelConfig) -> ModelCheckpoint:
    """Fresh checkpoint, deterministic in config.seed."""
    params = net.init_params(config, config.dtype)
    provenance = {
        "corpus_hash": None,
        "subset_mask": None,
        "epochs": 0,
        "optimizer_state_hash": None,
    }
    return ModelCheckpoint(config=config, params=params, provenance=provenance)


def _views64(ckpt: ModelCheckpoint) -> dict[str, np.ndarray]:
    if ckpt._params64 is None or ckpt._params64.size != ckpt.params.size:
        ckpt._params64 = ckpt.params.astype(np.float64)
    return net.views(ckpt._params64, ckpt.config)


def _window_ids(config: ModelConfig, stream: np.ndarray, upto: int) -> np.ndarray:
    """Input ids for predicting stream[upto]: BOS then the preceding tokens,
    clipped to the most recent context_length positions."""
    ids = np.empty(upto + 1, dtype=np.int64)
    ids[0] = config.bos_id
    ids[1:] = stream[:upto]
    if ids.size > config.context_length:
        ids = ids[-config.context_length:]
    return ids


def _log_softmax64(row: np.ndarray) -> np.ndarray:
    z = row.astype(np.float64)
    z -= z.max()
    return z - math.log(np.exp(z).sum())


def next_event_distribution(model: ModelCheckpoint, context) -> np.ndarray:
    """Probability vector (float64, length vocab_size) for the next event.

    Only the most recent context_length tokens influence the result; the
    context must contain at least one token.
    """
    context = np.asarray(context, dtype=np.int64).ravel()
    if context.size == 0:
        raise EmptyContext("next_event_distribution needs at least one token")
    cfg = model.config
    ids = np.concatenate(([cfg.bos_id], context))[-cfg.context_length:]
    logits, _ = net.forward(_views64(model), cfg, ids[None, :])
    lp = _log_softmax64(logits[0, -1])
    return np.exp(lp)


def _stream_event_rows(model: ModelCheckpoint, context, events):
    """Yield (cache, position, logits_row) covering each event of
    context+events, sharing one forward pass whenever the whole stream fits
    into the context window."""
    cfg = model.config
    context = np.asarray(context, dtype=np.int64).ravel()
    events = np.asarray(events, dtype=np.int64).ravel()
    stream = np.concatenate([context, events])
    c, n = context.size, stream.size
    p = _views64(model)

    if n <= cfg.context_length:
        ids = np.concatenate(([cfg.bos_id], stream[:-1]))
        logits, cache = net.forward(p, cfg, ids[None, :])
        for j in range(events.size):
            yield cache, c + j, logits[0, c + j]
    else:
        for j in range(events.size):
            ids = _window_ids(cfg, stream, c + j)
            logits, cache = net.forward(p, cfg, ids[None, :])
            yield cache, ids.size - 1, logits[0, -1]


def sequence_log_likelihood(model: ModelCheckpoint, segment, context=()) -> float:
    """Log-likelihood of `segment` given `context`, in nats (float64).

    Equals the sum over events of the log probability of each event given
    the running context (chain rule). The context may be empty; the first
    event is then conditioned on the BOS embedding alone.
    """
    events = np.asarray(segment, dtype=np.int64).ravel()
    total = 0.0
    for j, (_, _, row) in enumerate(_stream_event_rows(model, context, events)):
        total += _log_softmax64(row)[events[j]]
    return float(total)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train(
    corpus: list[TrainingExample],
    config: ModelConfig,
    settings: TrainSettings = TrainSettings(),
    *,
    subset_mask=None,
) -> ModelCheckpoint:
    """Adam-trained checkpoint, bit-reproducible from (corpus, config, settings).

    `subset_mask`, when given, is a sequence of indices into `corpus`; only
    those examples are trained on and the sorted mask lands in provenance.
    """
    if subset_mask is not None:
        subset_mask = sorted(int(i) for i in subset_mask)
        examples = [corpus[i] for i in subset_mask]
    else:
        examples = list(corpus)
    if not examples:
        raise EmptyCorpus("training needs at least one example")
    cfg = config
    for ex in examples:
        if ex.tokens.size != cfg.context_length:
            raise InvalidConfig(
                f"example {ex.work_id!r} has {ex.tokens.size} tokens, "
                f"expected context_length {cfg.context_length}"
            )

    dtype = cfg.dtype
    flat = net.init_params(cfg, dtype)
    p = net.views(flat, cfg)

    n = len(examples)
    targets = np.stack([ex.tokens for ex in examples]).astype(np.int64)
    inputs = np.empty_like(targets)
    inputs[:, 0] = cfg.bos_id
    inputs[:, 1:] = targets[:, :-1]

    m = np.zeros_like(flat)
    v = np.zeros_like(flat)
    rng = np.random.default_rng(derive_seed(cfg.seed, "epoch-shuffle"))
    lr = dtype(settings.learning_rate)
    wd = dtype(settings.weight_decay)
    step = 0
    final_loss = None

    for epoch in range(settings.epochs):
        perm = rng.permutation(n)
        epoch_nll = 0.0
        for lo in range(0, n, settings.batch_size):
            batch = perm[lo:lo + settings.batch_size]
            xb, yb = inputs[batch], targets[batch]
            logits, cache = net.forward(p, cfg, xb)
            shifted = logits - logits.max(-1, keepdims=True)
            np.exp(shifted, out=shifted)
            probs = shifted / shifted.sum(-1, keepdims=True)
            picked = np.take_along_axis(probs, yb[..., None], axis=-1)[..., 0]
            nll = -np.log(np.maximum(picked, 1e-45)).sum()
            if not np.isfinite(nll):
                raise NonFiniteLoss(
                    f"non-finite loss at epoch {epoch}, batch starting {lo}"
                )
            epoch_nll += float(nll)

            count = xb.size  # batch tokens; loss is the per-token mean
            dlogits = probs
            np.put_along_axis(
                dlogits, yb[..., None],
                np.take_along_axis(dlogits, yb[..., None], axis=-1) - 1.0,
                axis=-1,
            )
            dlogits /= dtype(count)
            grad = net.backward(p, cfg, cache, dlogits)
            if wd != 0.0:
                grad += wd * flat

            step += 1
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * grad
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * grad * grad
            mhat = m / dtype(1.0 - ADAM_BETA1 ** step)
            vhat = v / dtype(1.0 - ADAM_BETA2 ** step)
            flat -= lr * mhat / (np.sqrt(vhat) + dtype(ADAM_EPS))
        final_loss = epoch_nll / (n * cfg.context_length)

    opt_state = hashlib.sha256()
    opt_state.update(m.tobytes())
    opt_state.update(v.tobytes())
    provenance = {
        "corpus_hash": corpus_fingerprint(examples),
        "subset_mask": subset_mask,
        "epochs": settings.epochs,
        "optimizer_state_hash": opt_state.hexdigest(),
        "final_loss": final_loss,
        "settings": asdict(settings),
    }
    return ModelCheckpoint(config=cfg, params=flat, provenance=provenance)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def generate(
    model: ModelCheckpoint,
    prompt,
    length: int,
    sampling: SamplingSettings = SamplingSettings(),
) -> np.ndarray:
    """Sample exactly `length` new tokens after `prompt`.

    Temperature 0 is greedy argmax with ties broken by the lowest token
    index; any other temperature samples reproducibly from the seed. top_k,
    when set, keeps only the k most probable tokens before sampling.
    """
    prompt = np.asarray(prompt, dtype=np.int64).ravel()
    if prompt.size == 0:
        raise EmptyPrompt("generate needs a non-empty prompt")
    if length < 1:
        raise ValueError("length must be at least 1")
    rng = np.random.default_rng(sampling.seed)
    stream = list(prompt)
    out = []
    for _ in range(length):
        dist = next_event_distribution(model, stream)
        if sampling.temperature == 0:
            token = int(np.argmax(dist))
        else:
            logp = np.log(np.maximum(dist, 1e-300)) / sampling.temperature
            if sampling.top_k is not None:
                keep = np.argsort(-logp, kind="stable")[: sampling.top_k]
                masked = np.full_like(logp, -np.inf)
                masked[keep] = logp[keep]
                logp = masked
            logp -= logp.max()
            probs = np.exp(logp)
            probs /= probs.sum()
            u = rng.random()
            token = int(min(np.searchsorted(np.cumsum(probs), u, side="right"),
                            dist.size - 1))
        out.append(token)
        stream.append(token)
    return np.asarray(out, dtype=np.uint16)


# ---------------------------------------------------------------------------
# per-example gradients
# ---------------------------------------------------------------------------

def _seed_row(row: np.ndarray, y: int, output_fn: str):
    """d(psi)/d(logits) for one position; returns (seed, p_correct)."""
    lp = _log_softmax64(row)
    probs = np.exp(lp)
    p = float(probs[y])
    seed = -probs
    seed[y] += 1.0
    if output_fn == "logit_margin":
        seed /= max(1.0 - p, _MARGIN_CLAMP)
    elif output_fn != "log_prob":
        raise ValueError(f"unknown output_fn {output_fn!r}")
    return seed, p


def per_example_gradient(
    model: ModelCheckpoint,
    context,
    events,
    output_fn: str = "logit_margin",
) -> np.ndarray:
    """Exact float64 gradient of psi with respect to all parameters.

    psi is log p(event) ("log_prob") or log(p / (1 - p)) ("logit_margin"),
    evaluated with the running context; for several events the gradient of
    the summed psi is returned. The result has the flat layout documented in
    _network.
    """
    cfg = model.config
    context = np.asarray(context, dtype=np.int64).ravel()
    events = np.asarray(events, dtype=np.int64).ravel()
    if events.size == 0:
        return np.zeros(net.param_count(cfg), dtype=np.float64)
    p = _views64(model)
    stream = np.concatenate([context, events])
    c, n = context.size, stream.size

    if n <= cfg.context_length:
        ids = np.concatenate(([cfg.bos_id], stream[:-1]))
        logits, cache = net.forward(p, cfg, ids[None, :])
        dlogits = np.zeros_like(logits)
        for j in range(events.size):
            seed, _ = _seed_row(logits[0, c + j], int(events[j]), output_fn)
            dlogits[0, c + j] = seed
        return net.backward(p, cfg, cache, dlogits)

    total = np.zeros(net.param_count(cfg), dtype=np.float64)
    for j in range(events.size):
        ids = _window_ids(cfg, stream, c + j)
        logits, cache = net.forward(p, cfg, ids[None, :])
        dlogits = np.zeros_like(logits)
        seed, _ = _seed_row(logits[0, -1], int(events[j]), output_fn)
        dlogits[0, -1] = seed
        total += net.backward(p, cfg, cache, dlogits)
    return total


def segment_feature(
    model: ModelCheckpoint,
    context,
    events,
    output_fn: str = "logit_margin",
):
    """Featurize one work or segment in a single pass.

    Returns (gradient of the summed per-event psi, mean over events of
    1 - p_correct). Equals per_example_gradient plus the probability
    bookkeeping the attribution estimator needs for its q weights.
    """
    cfg = model.config
    context = np.asarray(context, dtype=np.int64).ravel()
    events = np.asarray(events, dtype=np.int64).ravel()
    if events.size == 0:
        return np.zeros(net.param_count(cfg), dtype=np.float64), 0.0
    p = _views64(model)
    stream = np.concatenate([context, events])
    c, n = context.size, stream.size

    if n <= cfg.context_length:
        ids = np.concatenate(([cfg.bos_id], stream[:-1]))
        logits, cache = net.forward(p, cfg, ids[None, :])
        dlogits = np.zeros_like(logits)
        miss = 0.0
        for j in range(events.size):
            seed, pc = _seed_row(logits[0, c + j], int(events[j]), output_fn)
            dlogits[0, c + j] = seed
            miss += 1.0 - pc
        return net.backward(p, cfg, cache, dlogits), miss / events.size

    total = np.zeros(net.param_count(cfg), dtype=np.float64)
    miss = 0.0
    for j in range(events.size):
        ids = _window_ids(cfg, stream, c + j)
        logits, cache = net.forward(p, cfg, ids[None, :])
        dlogits = np.zeros_like(logits)
        seed, pc = _seed_row(logits[0, -1], int(events[j]), output_fn)
        dlogits[0, -1] = seed
        total += net.backward(p, cfg, cache, dlogits)
        miss += 1.0 - pc
    return total, miss / events.size


def event_gradient_matrix(
    model: ModelCheckpoint,
    context,
    events,
    output_fn: str = "logit_margin",
):
    """Per-event gradients: returns (grads of shape (s, D), p_correct of
    shape (s,)). Row j is the gradient of psi for event j alone given its
    running context; one forward pass is shared when the stream fits."""
    cfg = model.config
    context = np.asarray(context, dtype=np.int64).ravel()
    events = np.asarray(events, dtype=np.int64).ravel()
    s = events.size
    grads = np.zeros((s, net.param_count(cfg)), dtype=np.float64)
    p_correct = np.zeros(s, dtype=np.float64)
    if s == 0:
        return grads, p_correct
    p = _views64(model)
    stream = np.concatenate([context, events])
    c, n = context.size, stream.size

    if n <= cfg.context_length:
        ids = np.concatenate(([cfg.bos_id], stream[:-1]))
        logits, cache = net.forward(p, cfg, ids[None, :])
        for j in range(s):
            seed, pc = _seed_row(logits[0, c + j], int(events[j]), output_fn)
            dlogits = np.zeros_like(logits)
            dlogits[0, c + j] = seed
            grads[j] = net.backward(p, cfg, cache, dlogits)
            p_correct[j] = pc
    else:
        for j in range(s):
            ids = _window_ids(cfg, stream, c + j)
            logits, cache = net.forward(p, cfg, ids[None, :])
            seed, pc = _seed_row(logits[0, -1], int(events[j]), output_fn)
            dlogits = np.zeros_like(logits)
            dlogits[0, -1] = seed
            grads[j] = net.backward(p, cfg, cache, dlogits)
            p_correct[j] = pc
    return grads, p_correct


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

def save_checkpoint(ckpt: ModelCheckpoint, path: str | os.PathLike) -> None:
    header = {
        "config": asdict(ckpt.config),
        "provenance": ckpt.provenance,
        "param_count": ckpt.param_count,
        "dtype": ckpt.config.precision,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    wire = "<f4" if ckpt.config.precision == "float32" else "<f8"
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(ckpt.params, dtype=wire).tobytes())


def load_checkpoint(path: str | os.PathLike) -> ModelCheckpoint:
    raw = Path(path).read_bytes()
    mlen = len(CHECKPOINT_MAGIC)
    if len(raw) < mlen + 4 or raw[:mlen] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path} is not an ACKP1 checkpoint")
    (hlen,) = struct.unpack_from("<I", raw, mlen)
    start = mlen + 4
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    config = ModelConfig(**header["config"])
    wire = "<f4" if header["dtype"] == "float32" else "<f8"
    params = np.frombuffer(raw[start + hlen:], dtype=wire).astype(config.dtype)
    if params.size != header["param_count"]:
        raise FormatError(
            f"{path} declares {header['param_count']} parameters, holds {params.size}"
        )
    return ModelCheckpoint(config=config, params=params.copy(),
                           provenance=header["provenance"])
