"""Trainable-parameter and forward-FLOP accounting for the decoder variants.

Conventions: a multiply-accumulate is 2 FLOPs, a bias add or elementwise op
is 1 FLOP per element, a softmax is 3 FLOPs per element (exp, sum, divide).
Projections of the feature rows that do not depend on the hidden state are
computed once per image; everything else is charged once per time step, and
a sentence is ``t_max`` steps.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from pdcap.config import ModelConfig, uses_channel


@dataclass(frozen=True)
class ComplexityReport:
    mode: str
    params: int
    flops: int

    def to_json(self):
        return {"mode": self.mode, "params": self.params, "flops": self.flops}


def _lstm_params(n_in, hidden):
    return (n_in + hidden) * 4 * hidden + 4 * hidden


def param_breakdown(cfg: ModelConfig) -> dict:
    D, E, H, K, k, kc = cfg.d_model, cfg.embed, cfg.hidden, cfg.vocab, cfg.att_width, cfg.chan_width
    parts = {
        "embed": K * E,
        "feature_map": cfg.channels * D + D,  # shared by every pyramid level
        "att_lstm": _lstm_params(H + D + E, H),
        "lang_lstm": _lstm_params(D + H, H),
        "spatial": D * k + k + H * k + k + 1,
        "channel": D * kc + kc + H * kc + kc * D + D if uses_channel(cfg.mode) else 0,
        "output": H * K + K,
    }
    return parts


def count_params(cfg: ModelConfig) -> int:
    return sum(param_breakdown(cfg).values())


def _lstm_flops(n_in, hidden):
    gates = 2 * (n_in + hidden) * 4 * hidden + 4 * hidden
    # 4H gate activations, c' = f*c + i*g (3H), tanh(c') and o*tanh(c') (2H)
    return gates + 4 * hidden + 3 * hidden + 2 * hidden


def count_flops(cfg: ModelConfig) -> int:
    D, E, H, K, k, kc = cfg.d_model, cfg.embed, cfg.hidden, cfg.vocab, cfg.att_width, cfg.chan_width
    L, Lp = cfg.regions, cfg.pyramid_rows
    chan = uses_channel(cfg.mode)

    once = 2 * L * cfg.channels * D + 2 * L * D  # dense map + bias + ReLU
    for b in cfg.effective_bins[1:]:
        rows = (cfg.grid_w - b + 1) * (cfg.grid_h - b + 1)
        once += rows * D * b * b  # window sums and the division
    once += L * D  # mean feature for the attention-LSTM input
    once += 2 * Lp * D * k + Lp * k  # V W_s + b_s
    if chan:
        once += 2 * Lp * D * kc + Lp * kc  # V W_c + b_c
        once += Lp * D  # row mean of V

    step = _lstm_flops(H + D + E, H)
    step += 2 * H * k + Lp * k + Lp * k  # h W_hs, broadcast add, tanh
    step += 2 * Lp * k + Lp + 3 * Lp  # score projection, bias, softmax
    step += 2 * Lp * D + D  # weighted row sum, 1/L scaling
    if chan:
        step += 2 * H * kc + 2 * Lp * kc + Lp * kc  # h W_hc, add + tanh, row mean
        step += 2 * kc * D + 3 * D  # gate projection, bias, sigmoid, gating
        step += D  # dual sum
    step += _lstm_flops(D + H, H)
    step += 2 * H * K + K  # output logits
    return once + cfg.t_max * step


def report(cfg: ModelConfig) -> ComplexityReport:
    return ComplexityReport(cfg.mode, count_params(cfg), count_flops(cfg))


def resnet_config(**overrides) -> ModelConfig:
    """7x7x2048 ResNet grid, T=50, K=8000, 1024-d embeddings, 512 hidden units."""
    base = ModelConfig(grid_w=7, grid_h=7, channels=2048, d_model=1024, embed=1024, hidden=512,
                       vocab=8000, t_max=50, bins=(1, 2, 4), mode="plain")
    return replace(base, **overrides)


def mode_reports(base: ModelConfig | None = None):
    base = base or resnet_config()
    return [report(replace(base, mode=m)) for m in ("plain", "p", "d", "pd")]
