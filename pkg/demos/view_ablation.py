"""Compare class-embedding views on a few synthetic worlds.

    python demos/view_ablation.py [n_seeds]
"""
import sys

import numpy as np

from kggan import PipelineConfig, generate_world, run_pipeline, sample_dataset

VIEWS = ("GC+GA", "GA", "GC", "word-vector-only")


def main(n_seeds: int = 3) -> None:
    scores = {v: [] for v in VIEWS}
    for seed in range(n_seeds):
        for view in VIEWS:
            cfg = PipelineConfig.default(seed=seed)
            cfg.set("eval", "view", view)
            world = generate_world(cfg.world_spec())
            split = sample_dataset(world, 200, 100, seed=seed)
            res = run_pipeline(split, world.kg, world.name_vectors, cfg)
            scores[view].append(res.report.macro[1])
        print(f"seed {seed}: " + "  ".join(f"{v} {scores[v][-1]:.1f}" for v in VIEWS), flush=True)
    print("mean Hit@1: " + "  ".join(f"{v} {np.mean(s):.1f}" for v, s in scores.items()))


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 3)
