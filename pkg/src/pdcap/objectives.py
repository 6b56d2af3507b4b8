"""Cross-entropy training, AdamW, self-critical fine-tuning, and checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from pdcap import tensor as T
from pdcap.config import ModelConfig
from pdcap.data import BOS, decode_tokens, encode_caption, tokenize
from pdcap.decoder import (
    DecoderParams,
    encode_image,
    forward_teacher_forced,
    greedy_decode,
    sample_decode,
)
from pdcap.errors import ContractError, DimensionError, FormatError
from pdcap.metrics import CiderD, corpus_eval


def cross_entropy_loss(log_probs):
    """Summed negative log-likelihood of the (already pad-masked) gold steps."""
    if not log_probs:
        raise ContractError("cross-entropy needs at least one step")
    total = T.scale(log_probs[0], -1.0)
    for lp in log_probs[1:]:
        total = T.sub(total, lp)
    return total


@dataclass
class AdamWState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_update(params, grads, state: AdamWState):
    """One in-place AdamW step; weight decay is decoupled from the moment update.

    ``params`` are Tensors, ``grads`` same-shape arrays (``None`` means zero).
    """
    if not state.m:
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
    if len(params) != len(state.m) or len(grads) != len(params):
        raise DimensionError("parameter, gradient and moment lists differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape or m.shape != p.shape:
            raise DimensionError(f"gradient {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.values *= 1.0 - state.lr * state.weight_decay
        p.values -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# -- dataset ---------------------------------------------------------------------


@dataclass
class Sample:
    image_id: str
    fmap: object
    gold: list  # encoded gold ids (first caption)
    references: list  # tokenised captions


def make_samples(records, fmaps, vocab, t_max):
    out = []
    for rec, fmap in zip(records, fmaps):
        refs = [tokenize(c) for c in rec.captions]
        out.append(Sample(rec.image_id, fmap, encode_caption(vocab, refs[0], t_max), refs))
    return out


def sample_loss(params, sample):
    """(summed CE, token count) for one sample on a fresh record."""
    T.new_record()
    enc = encode_image(params, sample.fmap)
    lps = forward_teacher_forced(params, enc, sample.gold)
    return cross_entropy_loss(lps), len(lps)


def accumulate_gradients(params, samples):
    """Sum of per-sample CE gradients, accumulated in list order."""
    tensors = params.tensors()
    T.zero_grad(tensors)
    total, count = 0.0, 0
    for s in samples:
        loss, n = sample_loss(params, s)
        loss.backward()
        total += loss.item()
        count += n
    return [t.grad for t in tensors], total, count


def train_epoch(samples, params, opt: AdamWState, rng, batch=96):
    """One CE epoch in an rng-determined order. Returns mean per-token loss."""
    if not samples:
        raise ContractError("cannot train on an empty dataset")
    order = rng.permutation(len(samples))
    total, count = 0.0, 0
    for start in range(0, len(order), batch):
        chunk = [samples[i] for i in order[start:start + batch]]
        grads, loss, n = accumulate_gradients(params, chunk)
        adamw_update(params.tensors(), grads, opt)
        total += loss
        count += n
    return total / count


def greedy_captions(params, samples, vocab, t_max):
    out = []
    with T.no_grad():
        for s in samples:
            ids = greedy_decode(params, encode_image(params, s.fmap), t_max)
            out.append(tokenize(decode_tokens(vocab, ids)))
    return out


def validation_bleu4(params, samples, vocab, t_max):
    caps = greedy_captions(params, samples, vocab, t_max)
    return corpus_eval([(c, s.references) for c, s in zip(caps, samples)]).bleu[3]


# -- self-critical ---------------------------------------------------------------


@dataclass
class ScstConfig:
    samples_per_image: int = 1
    t_max: int = 16
    reward: str = "cider_d"

    def __post_init__(self):
        if self.samples_per_image < 1:
            raise ContractError("samples_per_image must be >= 1")
        if self.reward != "cider_d":
            raise ContractError("SCST reward is fixed to CIDEr-D")


def sequence_log_prob(params, enc, tokens):
    """Sum of log p(token_t | prefix) for a generated sequence, as a Tensor."""
    lps = forward_teacher_forced(params, enc, [BOS] + list(tokens), skip_pad=False)
    total = lps[0]
    for lp in lps[1:]:
        total = T.add(total, lp)
    return total


@dataclass
class ScstResult:
    advantage: float
    sample_reward: float
    baseline_reward: float
    tokens: list


def scst_gradient(params, fmap, references, scorer: CiderD, vocab, cfg: ScstConfig, rng):
    """Accumulate ``-(r(sample) - r(greedy)) * grad log p(sample)`` into ``.grad``.

    One call draws ``cfg.samples_per_image`` samples against a shared greedy
    baseline. Returns one ScstResult per sample.
    """
    if not references:
        raise ContractError("SCST needs at least one reference caption")
    with T.no_grad():
        enc0 = encode_image(params, fmap)
        base_ids = greedy_decode(params, enc0, cfg.t_max)
        drawn = [sample_decode(params, enc0, cfg.t_max, rng=rng) for _ in range(cfg.samples_per_image)]
    try:
        r_base = scorer.score(tokenize(decode_tokens(vocab, base_ids)), references)
    except ContractError as exc:
        raise ContractError(f"baseline reward failed: {exc}") from exc
    results = []
    for ids in drawn:
        try:
            r_s = scorer.score(tokenize(decode_tokens(vocab, ids)), references)
        except ContractError as exc:
            raise ContractError(f"sample reward failed: {exc}") from exc
        adv = r_s - r_base
        results.append(ScstResult(adv, r_s, r_base, ids))
        if adv == 0.0:
            continue  # exactly zero contribution
        T.new_record()
        enc = encode_image(params, fmap)
        loss = T.scale(sequence_log_prob(params, enc, ids), -adv)
        loss.backward()
    return results


def scst_step(params, samples, scorer, vocab, cfg, opt, rng):
    tensors = params.tensors()
    T.zero_grad(tensors)
    results = []
    for s in samples:
        results.extend(scst_gradient(params, s.fmap, s.references, scorer, vocab, cfg, rng))
    adamw_update(tensors, [t.grad for t in tensors], opt)
    return results


def mean_greedy_cider(params, samples, scorer, vocab, t_max):
    caps = greedy_captions(params, samples, vocab, t_max)
    return sum(scorer.score(c, s.references) for c, s in zip(caps, samples)) / len(samples)


def scst_finetune(samples, params, vocab, cfg: ScstConfig, opt: AdamWState, steps, rng, batch=96):
    """Run ``steps`` SCST updates over rng-ordered minibatches.

    Returns a trace of per-step dicts with mean sample and baseline rewards.
    """
    if not samples:
        raise ContractError("cannot fine-tune on an empty dataset")
    scorer = CiderD([s.references for s in samples])
    trace = []
    order, pos = rng.permutation(len(samples)), 0
    for step in range(steps):
        if pos >= len(order):
            order, pos = rng.permutation(len(samples)), 0
        chunk = [samples[i] for i in order[pos:pos + batch]]
        pos += batch
        res = scst_step(params, chunk, scorer, vocab, cfg, opt, rng)
        trace.append({
            "step": step + 1,
            "sample_reward": sum(r.sample_reward for r in res) / len(res),
            "baseline_reward": sum(r.baseline_reward for r in res) / len(res),
        })
    return trace


# -- checkpoints -----------------------------------------------------------------

CKPT_MAGIC = b"PDCK"
CKPT_VERSION = 1


def save_checkpoint(path, params: DecoderParams, opt: AdamWState | None = None, vocab=None, meta=None):
    """Binary: magic, u32 version, u64 header length, JSON header, float64 arrays."""
    named = params.named()
    header = {
        "model": params.cfg.to_dict(),
        "params": [[n, list(t.shape)] for n, t in named],
        "vocab": list(vocab.tokens) if vocab is not None else None,
        "meta": meta or {},
        "optimizer": None,
    }
    arrays = [t.values for _, t in named]
    if opt is not None:
        header["optimizer"] = {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
                               "weight_decay": opt.weight_decay, "step": opt.step,
                               "has_moments": bool(opt.m)}
        arrays += list(opt.m) + list(opt.v)
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


@dataclass
class Checkpoint:
    params: DecoderParams
    opt: AdamWState | None
    vocab_tokens: list | None
    meta: dict


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)", offset=0)
    if len(blob) < 16:
        raise FormatError("checkpoint header truncated", offset=len(blob))
    version, hlen = struct.unpack_from("<IQ", blob, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    off = 16
    try:
        header = json.loads(blob[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header ({exc})", offset=off) from None
    off += hlen
    params = DecoderParams.init(ModelConfig.from_dict(header["model"]))

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        end = off + 8 * count
        if end > len(blob):
            raise FormatError("checkpoint payload truncated", offset=len(blob))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off = end
        return arr

    named = params.named()
    if [n for n, _ in named] != [n for n, _ in header["params"]]:
        raise FormatError("checkpoint parameter list does not match its model config", offset=16)
    for (_, t), (_, shape) in zip(named, header["params"]):
        t.values[...] = take(tuple(shape))
    opt = None
    if header["optimizer"] is not None:
        o = dict(header["optimizer"])
        has = o.pop("has_moments")
        opt = AdamWState(**o)
        if has:
            shapes = [tuple(s) for _, s in header["params"]]
            opt.m = [take(s) for s in shapes]
            opt.v = [take(s) for s in shapes]
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes in checkpoint", offset=off)
    return Checkpoint(params, opt, header["vocab"], header["meta"])
