"""Train a small binary-encoder autoencoder, deploy it and check the deployed copy.

Uses a reduced dataset and few epochs so it finishes in about a minute.
Run: python3 demos/03_train_deploy_evaluate.py
"""

import tempfile
from pathlib import Path

import numpy as np

from bcsinet import binkernel, channel, models, trainer

# Synthetic angular-delay channels, normalized into [0, 1].
splits = channel.generate(seed=0, sizes=(200, 50, 50))
print({name: len(ds) for name, ds in splits.items()})

spec = models.ModelSpec("BCsiNet", "A", 2, 1 / 4)
net = models.build(spec, seed=0)
cfg = trainer.TrainConfig(epochs=12, warmup=3, batch=32)


def show(record):
    print(f"epoch {record['epoch']:2d}  lr {record['lr']:.4f}  "
          f"val MSE {record['val_mse']:.2e}  NMSE {record['val_nmse_db']:6.2f} dB")


best, state = trainer.fit(net, splits["train"], splits["val"], cfg, log=show)
print(f"best epoch {state.best_epoch}, reboots {state.reboots}")

# The encoder's FC layer trains against real-valued master weights but runs on signs.
fc = best.encoder.layers[-1]
print(f"binary FC: {fc.kind}, {fc.n_in} -> {fc.n_out}")

# Deploy: fold batch norms, pack the binary weights, store to disk.
test = splits["test"]
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "model.bcsinet"
    binkernel.export(best, path, test.norm_min, test.norm_max)
    deployed = binkernel.import_model(path)
    print(f"exported {path.stat().st_size} bytes; FC storage {deployed.fc_storage_bytes} bytes")

_, _, db_train = trainer.evaluate(best, test)
_, _, db_dep = trainer.evaluate(deployed, test)
print(f"test NMSE: training graph {db_train:.3f} dB, deployed {db_dep:.3f} dB")

codes = deployed.encode(test.data[:4])
print(f"codeword shape {codes.shape}, first values {np.round(codes[0, :4], 3)}")

report = binkernel.bench(deployed, iterations=500, runs=3)
print(report.summary())
