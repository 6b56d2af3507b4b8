"""Command line entry point: ``pdcap <command> [--config run.json] [flags]``.

Configuration is one flat JSON object whose keys are the fields of
:class:`RunConfig`; flags override file values. Every artifact records the
effective configuration, either inline (JSON outputs, checkpoints) or in a
``<output>.config.json`` sidecar (vocabulary and caption files, whose formats
have no room for it). Errors print one JSON line to stderr and exit 1.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from pdcap import tensor as T
from pdcap.complexity import report
from pdcap.config import ModelConfig, normalize_mode
from pdcap.data import (
    Vocabulary,
    build_vocab,
    decode_tokens,
    gen_synthetic,
    read_feature_file,
    read_manifest,
    resolve_feature_path,
    tokenize,
)
from pdcap.decoder import DecoderParams, beam_search, encode_image
from pdcap.errors import ConfigError, FormatError, PdcapError
from pdcap.metrics import corpus_eval
from pdcap.objectives import (
    AdamWState,
    ScstConfig,
    load_checkpoint,
    make_samples,
    save_checkpoint,
    scst_finetune,
    train_epoch,
    validation_bleu4,
)

COMMANDS = ("build-vocab", "gen-synthetic", "train", "finetune", "caption", "eval", "count")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    mode: str = "pd"
    beam: int = 5
    epochs: int = 30
    batch: int = 96
    out: str | None = None
    # inputs
    manifest: str | None = None
    val_manifest: str | None = None
    vocab: str | None = None
    checkpoint: str | None = None
    candidates: str | None = None
    min_count: int = 5
    # model
    grid_w: int = 7
    grid_h: int = 7
    channels: int = 2048
    d_model: int = 1024
    embed: int = 1024
    hidden: int = 512
    att_width: int = 512
    chan_width: int = 512
    vocab_size: int = 8000
    t_max: int = 50
    bins: tuple = (1, 2, 4)
    literal_scaling: bool = True
    # optimisation
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    scst_lr: float = 5e-5
    scst_steps: int = 50
    scst_samples: int = 1
    # synthetic corpus
    n_images: int = 20

    def __post_init__(self):
        object.__setattr__(self, "mode", normalize_mode(self.mode))
        object.__setattr__(self, "bins", tuple(self.bins))
        for name in ("beam", "epochs", "batch", "min_count", "scst_steps", "scst_samples", "n_images"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.t_max < 2:
            raise ConfigError("t_max must be >= 2")

    @classmethod
    def from_mapping(cls, data):
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        clean = {}
        for k, v in data.items():
            default = known[k].default
            if v is None or default is None:
                clean[k] = v
            elif isinstance(default, bool):
                if not isinstance(v, bool):
                    raise ConfigError(f"{k} must be a boolean")
                clean[k] = v
            elif isinstance(default, int):
                if isinstance(v, bool) or not isinstance(v, int):
                    raise ConfigError(f"{k} must be an integer")
                clean[k] = v
            elif isinstance(default, float):
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise ConfigError(f"{k} must be a number")
                clean[k] = float(v)
            elif isinstance(default, tuple):
                if not isinstance(v, (list, tuple)) or not all(isinstance(b, int) for b in v):
                    raise ConfigError(f"{k} must be a list of integers")
                clean[k] = tuple(v)
            else:
                clean[k] = str(v)
        return cls(**clean)

    def to_json(self):
        d = asdict(self)
        d["bins"] = list(self.bins)
        return d

    def model_config(self, vocab_size=None, channels=None):
        return ModelConfig(grid_w=self.grid_w, grid_h=self.grid_h,
                           channels=self.channels if channels is None else channels,
                           d_model=self.d_model, embed=self.embed, hidden=self.hidden,
                           vocab=self.vocab_size if vocab_size is None else vocab_size,
                           t_max=self.t_max, bins=self.bins, mode=self.mode,
                           att_width=self.att_width, chan_width=self.chan_width,
                           literal_scaling=self.literal_scaling)


def _need(cfg, *names):
    for n in names:
        if getattr(cfg, n) is None:
            raise ConfigError(f"missing required setting {n!r}")


def _dump(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _write_sidecar(path, cfg):
    Path(str(path) + ".config.json").write_text(_dump(cfg.to_json()), encoding="utf-8")


def _emit(cfg, payload):
    text = _dump(payload)
    if cfg.out is None:
        sys.stdout.write(text)
    else:
        Path(cfg.out).write_text(text, encoding="utf-8")


def _load_dataset(manifest):
    records = read_manifest(manifest)
    if not records:
        raise ConfigError(f"manifest {manifest} is empty")
    fmaps = [read_feature_file(resolve_feature_path(manifest, r)) for r in records]
    return records, fmaps


def _check_channels(cfg, fmaps):
    for f in fmaps:
        if f.channels != cfg.channels:
            raise ConfigError(f"features have {f.channels} channels but config says channels={cfg.channels}")


# -- commands ------------------------------------------------------------------


def cmd_build_vocab(cfg):
    _need(cfg, "manifest", "out")
    vocab = build_vocab(read_manifest(cfg.manifest), cfg.min_count)
    vocab.save(cfg.out)
    _write_sidecar(cfg.out, cfg)


def cmd_gen_synthetic(cfg):
    _need(cfg, "out")
    gen_synthetic(cfg.out, n=cfg.n_images, L=cfg.grid_w * cfg.grid_h, d=cfg.channels,
                  vocab_size=cfg.vocab_size, seed=cfg.seed)
    Path(cfg.out, "config.json").write_text(_dump(cfg.to_json()), encoding="utf-8")


def _vocab_for(cfg, records):
    return Vocabulary.load(cfg.vocab) if cfg.vocab else build_vocab(records, cfg.min_count)


def cmd_train(cfg):
    _need(cfg, "manifest", "out")
    records, fmaps = _load_dataset(cfg.manifest)
    _check_channels(cfg, fmaps)
    vocab = _vocab_for(cfg, records)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    params = DecoderParams.init(cfg.model_config(vocab_size=len(vocab)), seed=cfg.seed)
    samples = make_samples(records, fmaps, vocab, cfg.t_max)
    val = None
    if cfg.val_manifest:
        vrec, vmaps = _load_dataset(cfg.val_manifest)
        _check_channels(cfg, vmaps)
        val = make_samples(vrec, vmaps, vocab, cfg.t_max)
    opt = AdamWState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                     weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    trace, best = [], None
    meta = {"run_config": cfg.to_json()}
    for epoch in range(1, cfg.epochs + 1):
        loss = train_epoch(samples, params, opt, rng, batch=cfg.batch)
        row = {"epoch": epoch, "loss": loss}
        if val is not None:
            row["val_bleu4"] = validation_bleu4(params, val, vocab, cfg.t_max)
            if best is None or row["val_bleu4"] > best:
                best = row["val_bleu4"]
                save_checkpoint(out / "best.ckpt", params, opt, vocab, dict(meta, epoch=epoch))
        trace.append(row)
    save_checkpoint(out / "last.ckpt", params, opt, vocab, dict(meta, epoch=cfg.epochs))
    vocab.save(out / "vocab.txt")
    (out / "loss_trace.json").write_text(_dump({"config": cfg.to_json(), "trace": trace}),
                                         encoding="utf-8")


def _restore(cfg):
    _need(cfg, "checkpoint")
    ck = load_checkpoint(cfg.checkpoint)
    if ck.vocab_tokens is None:
        raise ConfigError(f"checkpoint {cfg.checkpoint} carries no vocabulary")
    return ck, Vocabulary(ck.vocab_tokens)


def cmd_finetune(cfg):
    _need(cfg, "manifest", "out")
    ck, vocab = _restore(cfg)
    records, fmaps = _load_dataset(cfg.manifest)
    _check_channels(ck.params.cfg, fmaps)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = make_samples(records, fmaps, vocab, cfg.t_max)
    opt = AdamWState(lr=cfg.scst_lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                     weight_decay=cfg.weight_decay)
    trace = scst_finetune(samples, ck.params, vocab, ScstConfig(cfg.scst_samples, cfg.t_max), opt,
                          cfg.scst_steps, np.random.default_rng(cfg.seed), batch=cfg.batch)
    save_checkpoint(out / "scst.ckpt", ck.params, opt, vocab, {"run_config": cfg.to_json()})
    (out / "reward_trace.json").write_text(_dump({"config": cfg.to_json(), "trace": trace}),
                                           encoding="utf-8")


def cmd_caption(cfg):
    _need(cfg, "manifest", "out")
    ck, vocab = _restore(cfg)
    records, fmaps = _load_dataset(cfg.manifest)
    _check_channels(ck.params.cfg, fmaps)
    lines = []
    with T.no_grad():
        for rec, fmap in zip(records, fmaps):
            best = beam_search(ck.params, encode_image(ck.params, fmap), cfg.beam, cfg.t_max)
            lines.append(json.dumps({"image_id": rec.image_id,
                                     "caption": decode_tokens(vocab, best.tokens),
                                     "log_prob": float(best.log_prob)}, sort_keys=True))
    Path(cfg.out).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    _write_sidecar(cfg.out, cfg)


def cmd_eval(cfg):
    _need(cfg, "manifest", "candidates")
    refs = {r.image_id: [tokenize(c) for c in r.captions] for r in read_manifest(cfg.manifest)}
    pairs = []
    with open(cfg.candidates, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                image_id, caption = row["image_id"], row["caption"]
            except (ValueError, KeyError, TypeError) as exc:
                raise FormatError(f"{cfg.candidates}:{lineno}: bad candidate row ({exc})") from None
            if image_id not in refs:
                raise ConfigError(f"{cfg.candidates}:{lineno}: image_id {image_id!r} "
                                  "has no references in the manifest")
            pairs.append((tokenize(caption), refs[image_id]))
    rep = corpus_eval(pairs).to_json()
    rep["config"] = cfg.to_json()
    _emit(cfg, rep)


def cmd_count(cfg):
    rep = report(cfg.model_config()).to_json()
    rep["config"] = cfg.to_json()
    _emit(cfg, rep)


HANDLERS = {
    "build-vocab": cmd_build_vocab,
    "gen-synthetic": cmd_gen_synthetic,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "caption": cmd_caption,
    "eval": cmd_eval,
    "count": cmd_count,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser():
    parser = _Parser(prog="pdcap", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="flat JSON run configuration")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--mode", choices=("plain", "p", "d", "pd"))
    parser.add_argument("--beam", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch", type=int)
    parser.add_argument("--out")
    parser.add_argument("--manifest")
    parser.add_argument("--val-manifest", dest="val_manifest")
    parser.add_argument("--vocab")
    parser.add_argument("--checkpoint")
    parser.add_argument("--candidates")
    parser.add_argument("--min-count", dest="min_count", type=int)
    return parser


def resolve_config(args):
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    for k, v in vars(args).items():
        if k not in ("command", "config") and v is not None:
            data[k] = v
    return RunConfig.from_mapping(data)


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        HANDLERS[args.command](cfg)
    except PdcapError as exc:
        print(json.dumps({"error": exc.kind, "message": str(exc)}), file=sys.stderr)
        return 1
    except OSError as exc:
        print(json.dumps({"error": "io", "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
