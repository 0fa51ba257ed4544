"""Regenerate the sample raw-patch files bundled in vrlab/data."""
from pathlib import Path

import numpy as np

from vrlab.data import PatchSource, ScaleMixtureAR1, write_patches

OUT = Path(__file__).resolve().parents[1] / "src" / "vrlab" / "data"


def main() -> None:
    OUT.mkdir(exist_ok=True)
    vec = ScaleMixtureAR1(dim=16)
    write_patches(OUT / "ar1_16_a.rpc", vec.sample(256, np.random.default_rng(101)))
    write_patches(OUT / "ar1_16_b.rpc", vec.sample(1000, np.random.default_rng(102)))
    patches = PatchSource(side=8).sample(128, np.random.default_rng(103)).reshape(-1, 8, 8)
    write_patches(OUT / "patches_8x8.rpc", patches)


if __name__ == "__main__":
    main()
