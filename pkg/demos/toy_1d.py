"""WGAN-GP on a single 1-D Gaussian, N(5, 1).

Prints the generated mean and std every few hundred steps.  With the
default penalty weight the run typically reaches the data quickly and
then drifts, because the critic's slope cannot change sign in one
dimension without crossing zero gradient, which the penalty charges
heavily.

    python demos/toy_1d.py [seed] [steps]
"""
import sys

import numpy as np

from kggan import FeatureSet, GanConfig, synthesize_unseen, train_gan
from kggan.gae import ClassEmbeddingTable


def main(seed: int = 0, steps: int = 2000) -> None:
    rng = np.random.default_rng(seed)
    real = FeatureSet.build(rng.normal(5.0, 1.0, size=(2000, 1)), ["x"] * 2000, "seen")
    table = ClassEmbeddingTable(("x",), np.ones((1, 1)), np.zeros((1, 0)))
    cfg = GanConfig(noise_dim=4, feature_dim=1, hidden_g=32, hidden_d=32, batch_size=64,
                    steps=steps, seed=seed, checkpoint_every=200)

    def show(ckpt):
        x = synthesize_unseen(ckpt, table, ["x"], 2000, seed=1).x
        last = ckpt.history[-1]
        print(f"step {ckpt.step:5d}  mean {x.mean():6.2f}  std {x.std():5.2f}  "
              f"L_D {last['L_D']:7.3f}  GP {last['GP']:.3f}", flush=True)

    train_gan(real, table, cfg, on_checkpoint=show)


if __name__ == "__main__":
    args = [int(a) for a in sys.argv[1:]]
    main(*args)
