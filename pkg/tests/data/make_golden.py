"""Regenerate the golden files in this directory (run once; the files are committed).

    python3 tests/data/make_golden.py

The checkpoint holds a tiny MDN whose parameters follow ``golden_values``;
the dataset is a 4-sample inverse-sine draw.  Tests compare the stored bytes
against an explicit little-endian encoding, so a loader that ignored byte
order would fail on any host.
"""

from pathlib import Path

import numpy as np

from mdnkit import dynamics, persist
from mdnkit.mdn import build_model
from mdnkit.nn import ParamStore

HERE = Path(__file__).resolve().parent


def golden_values(n: int) -> np.ndarray:
    i = np.arange(n, dtype=np.float64)
    return (-1.0) ** i * (i + 1) / 8.0 + 1.0 / 3.0


def golden_model():
    m = build_model("mdn", 1, 1, K=2, width=2, layers=1, seed=0)
    arrays, off = {}, 0
    for name, arr in m.params.arrays().items():
        arrays[name] = golden_values(off + arr.size)[off:].reshape(arr.shape)
        off += arr.size
    m.params = ParamStore.from_arrays(arrays)
    return m


if __name__ == "__main__":
    persist.save_checkpoint(HERE / "golden_mdn.ckpt", golden_model(), seed=7, step=42)
    persist.save_dataset(HERE / "golden_sine.data", dynamics.gen_inverse_sine(4, seed=5))
