"""Augment a defect classifier with generated data through the CLI.

Run: python3 demos/04_inspector_with_synthetic.py

This is the full desk pipeline, so expect roughly ten minutes on one core.
"""

import json
import subprocess
import sys
from pathlib import Path

root = Path("demo_out/pipeline")


def cli(*args):
    print("$ defectsynth", " ".join(args))
    subprocess.run([sys.executable, "-m", "defectsynth.cli", *args], check=True)


# %% Data, a desk-scale GAN, and 200 synthetic defects plus 200 restorations.
cli("make-toy-data", "--samples_per_class", "60", "--out", str(root / "toy"))
cli("train", "--data", str(root / "toy"), "--preset", "desk", "--out", str(root / "gan"))
cli(
    "generate",
    "--checkpoint",
    str(root / "gan"),
    "--data",
    str(root / "toy"),
    "--count",
    "200",
    "--with-restorations",
    "--out",
    str(root / "corpus"),
)

# %% Two inspectors: real data only, and real plus generated data with a gradient-reversed source head.
cli("train-inspector", "--data", str(root / "toy"), "--preset", "desk", "--out", str(root / "baseline"))
cli(
    "train-inspector",
    "--data",
    str(root / "toy"),
    "--synthetic",
    str(root / "corpus"),
    "--preset",
    "desk",
    "--out",
    str(root / "augmented"),
)

for name in ("baseline", "augmented"):
    results = json.loads((root / name / "run_manifest.json").read_text())["results"]
    val, test = results["val_accuracy"], results["test_accuracy"]
    print(f"{name}: val {val:.1f}%  test {test:.1f}%  sources {results['sources']}")
