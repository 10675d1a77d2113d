"""Train a small model on the synthetic gesture set, then quantize it.

Each class is a windowed sinusoid burst on two adjacent channels plus a
decoy burst borrowed from another class, so the network has to use both
frequency content and channel position.

Run: python demos/train_synthetic.py [epochs]   (about two minutes at 30 epochs)
"""

import sys

import numpy as np

from waveformer.model import ModelConfig, WaveFormer
from waveformer.quant import quantize_model
from waveformer.signals import make_windows, split_indices, synth_gestures
from waveformer.training import TrainConfig, evaluate, history_csv, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 30

recordings = synth_gestures(num_classes=6, channels=8, per_class=200, seed=0)
windows = make_windows(recordings)  # z-scored, 200-sample windows
split = split_indices(windows.labels, seed=0)
print(f"{len(windows)} windows: train {len(split.train)}, val {len(split.val)}, "
      f"test {len(split.test)}")

model = WaveFormer(ModelConfig(embed_dim=64, layers=2, heads=4, ffn_dim=256), seed=0)
print(f"model has {model.num_params:,} parameters")

result = train(model, windows.subset(split.train).batch(), windows.subset(split.val).batch(),
               TrainConfig(lr=1e-3, epochs=epochs, seed=0))
print(history_csv([r for r in result.history if r.split == "val"]))
print(f"best epoch {result.best_epoch} (weights restored)")

test = windows.subset(split.test).batch()
fp = evaluate(model, test)
q = quantize_model(model)
i8 = evaluate(q, test)
agree = np.mean(model.predict_logits(test.data).argmax(1) == q.predict_logits(test.data).argmax(1))
print(f"fp32 test: {fp.summary()}")
print(f"int8 test: {i8.summary()}  argmax agreement {agree:.3f}")
