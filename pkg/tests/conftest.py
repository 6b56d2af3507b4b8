import numpy as np
import pytest

from pdcap.config import ModelConfig
from pdcap.data import FeatureMap, build_vocab, gen_synthetic, read_feature_file, read_manifest, resolve_feature_path
from pdcap.decoder import DecoderParams
from pdcap.objectives import AdamWState, make_samples, train_epoch

# K=12, hidden=8, d_model=6, L=9 (3x3 grid, pyramid bins 1 and 2 -> 13 stacked rows)
TINY = ModelConfig(grid_w=3, grid_h=3, channels=4, d_model=6, embed=6, hidden=8, vocab=12,
                   t_max=5, bins=(1, 2), mode="pd", att_width=5, chan_width=5)

TOY_T_MAX = 8


def tiny_params(mode="pd", seed=1, scale=1.0):
    """Tiny decoder with every tensor (biases included) drawn from U[-scale, scale]."""
    from dataclasses import replace

    p = DecoderParams.init(replace(TINY, mode=mode), seed=seed)
    rng = np.random.default_rng(seed + 100)
    for t in p.tensors():
        t.values[...] = rng.uniform(-scale, scale, t.shape)
    return p


def tiny_fmap(seed=0):
    rng = np.random.default_rng(seed)
    return FeatureMap(rng.uniform(-1, 1, (9, 4)), grid=(3, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    manifest = gen_synthetic(root, n=20, L=49, d=32, vocab_size=30, seed=0)
    records = read_manifest(manifest)
    fmaps = [read_feature_file(resolve_feature_path(manifest, r)) for r in records]
    vocab = build_vocab(records, min_count=1)
    return manifest, records, fmaps, vocab


def toy_config(vocab_size):
    return ModelConfig(grid_w=7, grid_h=7, channels=32, d_model=16, embed=16, hidden=32,
                       vocab=vocab_size, t_max=TOY_T_MAX, mode="pd", att_width=16, chan_width=16)


@pytest.fixture(scope="session")
def overfit_run(toy_dataset):
    """CE training on the toy set until mean per-token loss < 0.05 (max 500 epochs)."""
    import time

    _, records, fmaps, vocab = toy_dataset
    params = DecoderParams.init(toy_config(len(vocab)), seed=0)
    samples = make_samples(records, fmaps, vocab, TOY_T_MAX)
    opt = AdamWState(lr=5e-3)
    rng = np.random.default_rng(0)
    losses = []
    start = time.perf_counter()
    for _ in range(500):
        losses.append(train_epoch(samples, params, opt, rng, batch=5))
        if losses[-1] < 0.05:
            break
    elapsed = time.perf_counter() - start
    return {"params": params, "samples": samples, "vocab": vocab, "losses": losses, "seconds": elapsed}


# acceptance verdicts, printed once at the end of the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
