"""Two-LSTM top-down caption decoder with greedy, sampled, and beam inference.

Per step::

    x1 = [h2, mean feature, embedding(prev word)]
    h1, c1 = attention_lstm(x1, h1, c1)
    v = dual_context(V, h1)
    h2, c2 = language_lstm([v, h1], h2, c2)
    logits = h2 W_p + b_p
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from pdcap import tensor as T
from pdcap.attention import (
    ChannelAttentionParams,
    SpatialAttentionParams,
    dual_context,
    uniform_init,
    zeros,
)
from pdcap.config import ModelConfig, uses_channel
from pdcap.data import BOS, EOS, PAD, FeatureMap
from pdcap.errors import ContractError, DimensionError, VocabularyError
from pdcap.pyramid import pooling_matrix, spatial_grid
from pdcap.tensor import Tensor


@dataclass
class LstmParams:
    """Gates in order input, forget, candidate, output."""

    W: Tensor  # (input + hidden) x 4*hidden
    b: Tensor  # 4*hidden

    @classmethod
    def init(cls, rng, input_size, hidden):
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        return cls(uniform_init(rng, input_size + hidden, (input_size + hidden, 4 * hidden)),
                   Tensor(b, requires_grad=True))

    @property
    def hidden(self):
        return self.b.shape[0] // 4


def lstm_step(p: LstmParams, x, h, c):
    H = p.hidden
    if x.shape[0] + H != p.W.shape[0] or h.shape != (H,) or c.shape != (H,):
        raise DimensionError(
            f"lstm_step: x {x.shape}, h {h.shape}, c {c.shape} do not fit W {p.W.shape}")
    z = T.add(T.matmul(T.concat(x, h), p.W), p.b)
    i = T.sigmoid(T.slice1d(z, 0, H))
    f = T.sigmoid(T.slice1d(z, H, 2 * H))
    g = T.tanh(T.slice1d(z, 2 * H, 3 * H))
    o = T.sigmoid(T.slice1d(z, 3 * H, 4 * H))
    c_new = T.add(T.mul(f, c), T.mul(i, g))
    h_new = T.mul(o, T.tanh(c_new))
    return h_new, c_new


@dataclass
class DecoderParams:
    cfg: ModelConfig
    embed: Tensor  # K x E
    feat_w: Tensor  # d x d_model, shared by every pyramid level
    feat_b: Tensor
    att_lstm: LstmParams
    lang_lstm: LstmParams
    sp: SpatialAttentionParams
    cp: ChannelAttentionParams | None
    out_w: Tensor  # hidden x K
    out_b: Tensor

    @classmethod
    def init(cls, cfg: ModelConfig, seed=0):
        rng = np.random.default_rng(seed)
        D, E, H, K = cfg.d_model, cfg.embed, cfg.hidden, cfg.vocab
        embed = uniform_init(rng, E, (K, E))
        feat_w = uniform_init(rng, cfg.channels, (cfg.channels, D))
        feat_b = zeros(D)
        att = LstmParams.init(rng, H + D + E, H)
        lang = LstmParams.init(rng, D + H, H)
        sp = SpatialAttentionParams.init(rng, D, H, cfg.att_width)
        cp = ChannelAttentionParams.init(rng, D, H, cfg.chan_width) if uses_channel(cfg.mode) else None
        out_w = uniform_init(rng, H, (H, K))
        return cls(cfg, embed, feat_w, feat_b, att, lang, sp, cp, out_w, zeros(K))

    def named(self):
        items = [("embed", self.embed), ("feat_w", self.feat_w), ("feat_b", self.feat_b),
                 ("att_lstm.W", self.att_lstm.W), ("att_lstm.b", self.att_lstm.b),
                 ("lang_lstm.W", self.lang_lstm.W), ("lang_lstm.b", self.lang_lstm.b)]
        items += [("sp." + n, t) for n, t in self.sp.named()]
        if self.cp is not None:
            items += [("cp." + n, t) for n, t in self.cp.named()]
        items += [("out_w", self.out_w), ("out_b", self.out_b)]
        return items

    def tensors(self):
        return [t for _, t in self.named()]

    def num_scalars(self):
        return sum(t.size for t in self.tensors())

    def copy(self):
        clone = DecoderParams.init(self.cfg)
        for (_, dst), src in zip(clone.named(), self.tensors()):
            dst.values[...] = src.values
        return clone


@dataclass
class DecoderState:
    h1: Tensor
    c1: Tensor
    h2: Tensor
    c2: Tensor

    @classmethod
    def zeros(cls, hidden):
        return cls(*(Tensor(np.zeros(hidden)) for _ in range(4)))


@dataclass
class EncodedImage:
    """Mapped pyramid rows plus the h-independent attention projections."""

    V: Tensor  # L' x d_model
    vbar: Tensor  # mean of the original (bin 1) level
    cache: dict = field(default_factory=dict)


@lru_cache(maxsize=32)
def _pool_matrix(grid, bins):
    m = pooling_matrix(grid, bins)
    m.setflags(write=False)
    return m


def encode_image(params: DecoderParams, fmap: FeatureMap) -> EncodedImage:
    """Dense+ReLU map every region to d_model, then average-pool the mapped grid."""
    cfg = params.cfg
    if fmap.channels != cfg.channels:
        raise DimensionError(f"feature map has {fmap.channels} channels, model expects {cfg.channels}")
    X = Tensor(fmap.as_float64())
    M = T.relu(T.broadcast_add_row(T.matmul(X, params.feat_w), params.feat_b))
    bins = cfg.effective_bins
    if bins == (1,):
        V = M
    else:
        grid = spatial_grid(fmap, bins)
        V = T.matmul(Tensor._wrap(_pool_matrix(grid, bins)), M)
    cache = {"sp_proj": T.broadcast_add_row(T.matmul(V, params.sp.W_s), params.sp.b_s)}
    if params.cp is not None and uses_channel(cfg.mode):
        cache["cp_proj"] = T.broadcast_add_row(T.matmul(V, params.cp.W_c), params.cp.b_c)
        cache["v_mean"] = T.mean_rows(V)
    return EncodedImage(V, T.mean_rows(M), cache)


@dataclass
class StepOutput:
    logits: Tensor
    alpha: Tensor
    beta: Tensor | None
    state: DecoderState


def decode_step(params: DecoderParams, enc: EncodedImage, prev_id, state: DecoderState) -> StepOutput:
    cfg = params.cfg
    if not 0 <= prev_id < cfg.vocab:
        raise VocabularyError(f"previous word id {prev_id} outside vocabulary of size {cfg.vocab}")
    x1 = T.concat(state.h2, enc.vbar, T.embedding_lookup(params.embed, prev_id))
    h1, c1 = lstm_step(params.att_lstm, x1, state.h1, state.c1)
    att = dual_context(enc.V, h1, params.sp, params.cp, cfg.mode, cfg.literal_scaling, enc.cache)
    h2, c2 = lstm_step(params.lang_lstm, T.concat(att.context, h1), state.h2, state.c2)
    logits = T.add(T.matmul(h2, params.out_w), params.out_b)
    return StepOutput(logits, att.spatial_weights, att.channel_weights, DecoderState(h1, c1, h2, c2))


def forward_teacher_forced(params: DecoderParams, enc: EncodedImage, gold_ids, skip_pad=True):
    """Log-probabilities (scalar Tensors) of gold tokens 1.. given gold prefixes.

    Steps whose target is ``<pad>`` are skipped unless ``skip_pad`` is off
    (generated sequences may contain it).
    """
    gold_ids = [int(i) for i in gold_ids]
    if len(gold_ids) < 2:
        raise ContractError("teacher forcing needs <bos> plus at least one target token")
    if gold_ids[0] != BOS:
        raise ContractError("gold sequence must start with <bos>")
    state = DecoderState.zeros(params.cfg.hidden)
    out = []
    for prev, target in zip(gold_ids[:-1], gold_ids[1:]):
        step = decode_step(params, enc, prev, state)
        state = step.state
        if skip_pad and target == PAD:
            continue
        out.append(T.pick(T.log_softmax(step.logits), target))
    return out


def _log_probs(params, enc, prev, state):
    step = decode_step(params, enc, prev, state)
    return T.log_softmax(step.logits).values, step.state


def greedy_decode(params, enc, t_max=50, return_logprob=False):
    """Argmax decoding (ties to the lowest id) until ``<eos>`` or ``t_max`` tokens."""
    if t_max < 1:
        raise ContractError("t_max must be >= 1")
    tokens, total = [], 0.0
    with T.no_grad():
        state, prev = DecoderState.zeros(params.cfg.hidden), BOS
        for _ in range(t_max):
            lp, state = _log_probs(params, enc, prev, state)
            prev = int(np.argmax(lp))
            total += lp[prev]
            tokens.append(prev)
            if prev == EOS:
                break
    return (tokens, total) if return_logprob else tokens


def sample_decode(params, enc, t_max=50, seed=0, temperature=1.0, rng=None, return_logprob=False):
    """Multinomial sampling from softmax(logits / temperature).

    ``temperature == 0`` is the argmax limit and reproduces greedy decoding.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    tokens, total = [], 0.0
    with T.no_grad():
        state, prev = DecoderState.zeros(params.cfg.hidden), BOS
        for _ in range(t_max):
            step = decode_step(params, enc, prev, state)
            state = step.state
            lp = T.log_softmax(step.logits).values
            if temperature == 0:
                prev = int(np.argmax(lp))
            else:
                z = step.logits.values / temperature
                p = np.exp(z - z.max())
                cdf = np.cumsum(p)
                prev = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
                prev = min(prev, len(p) - 1)
            total += lp[prev]
            tokens.append(prev)
            if prev == EOS:
                break
    return (tokens, total) if return_logprob else tokens


@dataclass
class Hypothesis:
    tokens: tuple
    log_prob: float
    state: DecoderState
    finished: bool = False


def _rank(h):
    return (-h.log_prob, h.tokens)


def beam_search(params, enc, beam=5, t_max=50) -> Hypothesis:
    """Length-unnormalised beam search.

    Hypotheses that emit ``<eos>`` retire to a pool; survivors at ``t_max``
    join it unfinished. Ties rank by log-probability, then lexicographic ids.
    """
    if beam < 1:
        raise ContractError("beam must be >= 1")
    live = [Hypothesis((), 0.0, DecoderState.zeros(params.cfg.hidden))]
    pool = []
    with T.no_grad():
        for _ in range(t_max):
            cands = []
            for hyp in live:
                prev = hyp.tokens[-1] if hyp.tokens else BOS
                lp, state = _log_probs(params, enc, prev, hyp.state)
                # stable sort keeps the lowest id first among equal scores
                for k in np.argsort(-lp, kind="stable")[:beam]:
                    k = int(k)
                    cands.append(Hypothesis(hyp.tokens + (k,), hyp.log_prob + lp[k], state, k == EOS))
            cands.sort(key=_rank)
            live = []
            for h in cands[:beam]:
                (pool if h.finished else live).append(h)
            if not live:
                break
    pool.extend(live)
    return min(pool, key=_rank)
