"""Finite-difference checks for every primitive and for the whole model loss.

All analytic gradients are computed in float64. The numeric side of the
whole-model check runs on an extended-precision twin of the model: in
float64 the loss (about 6) has a unit roundoff near 1e-15, which after
dividing by ``2 * eps`` leaves ~1e-10 of noise, too coarse for the many
parameters whose true gradient is around 1e-8.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .labeling import assign_bieo, sample_gumbel
from .model import Batch, ModelConfig, SeqPAN

TOLERANCE = 1e-4
EPS = 1e-5

# Toy problem used for the whole-model check.
TINY = dict(d=8, heads=2, N=6, M=4, batch=2, video_dim=4, word_dim=4, vocab=8)


def _weighted_sum(y: Tensor, w: np.ndarray) -> Tensor:
    # a random linear read-out makes every output entry matter
    return (y * Tensor(w)).sum()


def primitive_errors(rng: np.random.Generator) -> dict[str, float]:
    """Max relative error of each differentiable op on random float64 inputs."""

    def t(*shape, positive=False):
        a = rng.normal(size=shape)
        return Tensor(np.abs(a) + 0.5 if positive else a)

    def read(y):
        return _weighted_sum(y, rng.normal(size=y.shape))

    out = {}

    def check(name, build, inputs, reference=None):
        w_holder = {}

        def f():
            y = build()
            if "w" not in w_holder:
                w_holder["w"] = rng.normal(size=y.shape)
            return _weighted_sum(y, w_holder["w"])

        ref = None
        if reference is not None:
            def ref():
                return _weighted_sum(reference(), w_holder["w"])
        out[name] = ag.grad_check(f, inputs, EPS, reference=ref)

    a, b = t(3, 4), t(3, 4)
    check("add", lambda: a + b, [a, b])
    check("sub", lambda: a - b, [a, b])
    check("mul", lambda: a * b, [a, b])
    row = t(4)
    check("add_broadcast", lambda: a + row, [a, row])
    check("scale", lambda: ag.scale(a, -1.7), [a])
    check("sigmoid", lambda: ag.sigmoid(a), [a])
    # keep relu inputs away from the kink
    r = Tensor(np.where(rng.random((3, 4)) < 0.5, -1, 1) * (rng.random((3, 4)) + 0.1))
    check("relu", lambda: ag.relu(r), [r])
    check("exp", lambda: ag.exp(a), [a])
    p = t(3, 4, positive=True)
    check("log", lambda: ag.log(p), [p])
    x3 = t(2, 3, 4)
    check("reshape", lambda: ag.reshape(x3, (6, 4)), [x3])
    check("transpose", lambda: ag.transpose(x3), [x3])
    check("getitem", lambda: ag.getitem(x3, (slice(None), [0, 2, 2])), [x3])
    c = t(2, 5, 4)
    check("concat", lambda: ag.concat([x3, c], axis=1), [x3, c])
    check("sum", lambda: ag.tsum(x3, axis=1, keepdims=True), [x3])
    check("mean", lambda: ag.mean(x3, axis=2), [x3])
    m1, m2 = t(2, 3, 5), t(2, 5, 4)
    check("matmul", lambda: m1 @ m2, [m1, m2])
    shared = t(5, 4)
    check("matmul_shared", lambda: m1 @ shared, [m1, shared])
    w, bias, x = t(3, 5), t(3), t(2, 5, 7)
    check("affine", lambda: ag.affine(x, w, bias), [x, w, bias])
    check("softmax", lambda: ag.softmax(x, axis=-1), [x])
    g, beta = t(5), t(5)
    check("layer_norm", lambda: ag.layer_norm(x, g, beta), [x, g, beta])
    q = Tensor(ag.softmax(t(3, 5)).data)
    target = ag.one_hot([0, 4, 2], 5)
    mask = np.array([True, True, False])
    check("cross_entropy", lambda: ag.cross_entropy(q, target, mask), [q])
    k, kb = t(3, 5, 3), t(3)
    check("conv1d", lambda: ag.conv1d(x, k, kb), [x, k, kb])
    keep = rng.random((2, 5, 7)) < 0.7
    check("mask_fill", lambda: ag.mask_fill(x, keep, -3.0), [x])
    seed = int(rng.integers(1 << 31))
    check("dropout", lambda: ag.dropout(x, 0.3, np.random.default_rng(seed), True), [x])
    logits = t(2, 4, 6)
    hard = ag.one_hot(np.argmax(logits.data, axis=1), 4, axis=1)
    # forward is piecewise constant; its gradient is defined by the soft path
    check("straight_through", lambda: ag.straight_through(hard, ag.softmax(logits, axis=1)), [logits],
          reference=lambda: ag.softmax(logits, axis=1))
    return out


def tiny_problem(seed: int, dtype=np.float64, **overrides):
    """Build the toy model, batch and frozen Gumbel noise used by the whole-model check."""
    rng = np.random.default_rng(seed)
    dims = dict(TINY)
    dims.update(overrides)
    n, m, bsz = dims["N"], dims["M"], dims["batch"]
    words = rng.normal(size=(dims["word_dim"], dims["vocab"]))
    words[:, 0] = 0.0
    cfg = ModelConfig(d=dims["d"], heads=dims["heads"], N=n, M=m, video_dim=dims["video_dim"],
                      word_dim=dims["word_dim"], dropout=0.0, relaxed_labels=True)
    model = SeqPAN(cfg, words, rng=seed + 1, dtype=dtype)
    video_mask = np.ones((bsz, n), dtype=bool)
    video_mask[1, n - 1] = False
    query_mask = np.ones((bsz, m), dtype=bool)
    query_mask[0, m - 1] = False
    start = np.array([1, 0])[:bsz]
    end = np.array([3, n - 2])[:bsz]
    bieo = np.zeros((bsz, n), dtype=np.int64)
    for i in range(bsz):
        valid = int(video_mask[i].sum())
        bieo[i, :valid] = assign_bieo(int(start[i]), int(end[i]), valid).labels
    batch = Batch(video=rng.normal(size=(bsz, dims["video_dim"], n)), video_mask=video_mask,
                  query_ids=rng.integers(2, dims["vocab"], (bsz, m)), query_mask=query_mask,
                  start=start, end=end, bieo=bieo, fb=(bieo > 0).astype(np.int64))
    noise = sample_gumbel((bsz, 4, n), rng)
    return model, batch, noise


def _cast_batch(batch: Batch, dtype) -> Batch:
    return Batch(batch.video.astype(dtype), batch.video_mask, batch.query_ids, batch.query_mask,
                 batch.start, batch.end, batch.bieo, batch.fb, batch.meta)


def model_error(seed: int = 0, numeric_dtype=np.longdouble) -> float:
    """Max relative error over every parameter of the full training loss."""
    from .training import total_loss

    model, batch, noise = tiny_problem(seed)
    twin = SeqPAN(model.config, model.word_vectors, rng=0, dtype=numeric_dtype)
    twin.load_state_dict(model.state_dict())
    tbatch = _cast_batch(batch, numeric_dtype)
    tnoise = noise.astype(numeric_dtype)

    def f():
        return total_loss(model, model.forward(batch, noise=noise), batch)[0]

    def ref():
        return total_loss(twin, twin.forward(tbatch, noise=tnoise), tbatch)[0]

    return ag.grad_check(f, model.parameters(), EPS, reference=ref, numeric_inputs=twin.parameters())


@dataclass
class GradcheckReport:
    seed: int
    primitives: dict[str, float]
    model: float | None
    seconds: float
    tolerance: float = TOLERANCE
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        out = [f"{name:18s} {err:.3e} {'ok' if err < self.tolerance else 'FAIL'}"
               for name, err in self.primitives.items()]
        if self.model is not None:
            out.append(f"{'seqpan_loss':18s} {self.model:.3e} {'ok' if self.model < self.tolerance else 'FAIL'}")
        out.append(f"seed={self.seed} tolerance={self.tolerance:g} seconds={self.seconds:.1f}")
        return out


def run(seed: int = 0, include_model: bool = True) -> GradcheckReport:
    t0 = time.perf_counter()
    prims = primitive_errors(np.random.default_rng(seed))
    model = model_error(seed) if include_model else None
    report = GradcheckReport(seed, prims, model, time.perf_counter() - t0)
    report.failures = [k for k, v in prims.items() if not v < TOLERANCE]
    if model is not None and not model < TOLERANCE:
        report.failures.append("seqpan_loss")
    return report
