import numpy as np
import pytest

from seqpan.model import Batch, ModelConfig, SeqPAN
from seqpan.labeling import assign_bieo


def toy_batch(rng, b=2, n=8, m=5, dv=6, vocab=12, short=True):
    """Small random batch; with ``short`` the second sample is padded."""
    vm = np.ones((b, n), dtype=bool)
    qm = np.ones((b, m), dtype=bool)
    if short and b > 1:
        vm[1, n - 2:] = False
        qm[1, m - 2:] = False
    start = np.zeros(b, dtype=np.int64)
    end = np.zeros(b, dtype=np.int64)
    bieo = np.zeros((b, n), dtype=np.int64)
    for i in range(b):
        valid = int(vm[i].sum())
        s = int(rng.integers(0, valid - 1))
        e = int(rng.integers(s, valid))
        start[i], end[i] = s, e
        bieo[i, :valid] = assign_bieo(s, e, valid).labels
    video = rng.normal(size=(b, dv, n))
    video[~np.broadcast_to(vm[:, None, :], video.shape)] = 0.0
    ids = rng.integers(2, vocab, (b, m))
    ids[~qm] = 0
    return Batch(video, vm, ids, qm, start, end, bieo, (bieo > 0).astype(np.int64))


def toy_model(seed=0, dv=6, dw=7, vocab=12, **overrides):
    rng = np.random.default_rng(seed)
    words = rng.normal(size=(dw, vocab))
    words[:, 0] = 0.0
    kw = dict(d=8, heads=2, N=8, M=5, video_dim=dv, word_dim=dw, dropout=0.0)
    kw.update(overrides)
    return SeqPAN(ModelConfig(**kw), words, rng=seed + 1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
