"""
Grounding planted spans
=======================

Build the synthetic task, train a small model for a few epochs and
compare it with the matched filter, which knows the true class
directions and so bounds what any model can reach.
"""

import numpy as np

from seqpan.data import Vocabulary, build_dataset, load_word_vectors, matched_filter_spans, synth_dataset
from seqpan.evaluation import aggregate, evaluate_model, iou
from seqpan.model import ModelConfig, SeqPAN
from seqpan.training import TrainConfig, train_loop

N, M, DV = 16, 10, 32
SIGNAL = 3.0

# 1000 training and 200 test videos; each video also hides two distractor spans
data = synth_dataset(1200, N, DV, 30, np.random.default_rng(100), n_classes=4, signal_scale=SIGNAL)
train_raw, test_raw = data.split([1000, 200])
print(test_raw.records[0])

vocab = Vocabulary.build(train_raw.records)
train = build_dataset(train_raw.records, train_raw.features, vocab, N, M)
test = build_dataset(test_raw.records, test_raw.features, vocab, N, M)
idx = np.arange(len(train))
train, val = train.subset(np.setdiff1d(idx, idx[::10])), train.subset(idx[::10])

rng = np.random.default_rng(0)
words = load_word_vectors(None, vocab, rng, dim=16)
cfg = ModelConfig(d=16, heads=2, n_sgpa=2, N=N, M=M, video_dim=DV, word_dim=16)
model = SeqPAN(cfg, words, rng=rng, dtype=np.float32)
print(f"{model.num_parameters()} trainable parameters")

result = train_loop(model, train, val, TrainConfig(epochs=15, lr=1e-3, seed=0),
                    on_epoch=lambda e: print(e.line()))
model.load_state_dict(result.best_state)

report = evaluate_model(model, test)
ceiling = aggregate([iou(p, g) for p, g in zip(matched_filter_spans(test_raw), test_raw.spans)])
print("\nmodel  ", report.to_dict() | {"histogram": None})
print("ceiling", ceiling.to_dict() | {"histogram": None})
print(report.histogram_text())
