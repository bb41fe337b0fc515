"""Build the synthetic four-source corpus that ships in configs/corpus/.

Each source mimics the per-class box counts of a real microscopy collection
(63 images per source, rare classes only just above the split minimums). The
pixels are flat shapes on a dark background, so only oracle backends give
meaningful scores on it, but every code path (splits, support crops, runs,
evaluation) can be exercised end to end.

    python demos/01_build_corpus.py [out_dir] [--trials N]
"""

import argparse
import time
from pathlib import Path

from fsodbench.dataset import REFERENCE_COUNTS, DatasetIndex, SynthSpec, save_index, synth_fixture
from fsodbench.split_optimizer import SeedSearchConfig, SplitConstraints, solve, write_split

ROOT = Path(__file__).resolve().parents[1]


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("out", nargs="?", default=str(ROOT / "configs" / "corpus"))
    ap.add_argument("--trials", type=int, default=1000)
    args = ap.parse_args()
    out = Path(args.out)

    # One synthetic source per collection; the seed offsets keep layouts distinct.
    parts = []
    for n, source in enumerate(REFERENCE_COUNTS):
        spec = SynthSpec.reference(source, seed=100 + n)
        parts.append(synth_fixture(spec, out / "images"))
        print(f"{source:9s} {sum(spec.classes.values()):5d} boxes over {spec.n_images} images")
    index = DatasetIndex(
        {i: r for p in parts for i, r in p.images.items()},
        [a for p in parts for a in p.annotations],
    )
    save_index(index, out / "index.json")

    # Splits are solved per source: 10 example images, 53 test images.
    constraints = SplitConstraints()
    search = SeedSearchConfig(trials=args.trials, base_seed=0)
    for source in index.sources():
        t0 = time.perf_counter()
        a = solve(index.to_split_instance(source), constraints, search)
        write_split(a, out / f"split_{source}.jsonl")
        print(f"{source:9s} SSS {a.score.sss:.3f} (CPC {a.score.cpc:.3f} x CBE {a.score.cbe:.3f}), "
              f"best trial {a.trial}, {time.perf_counter() - t0:.1f}s")
        for part in ("example", "test"):
            print(f"    {part:7s}", a.tallies(part))


if __name__ == "__main__":
    main()
