#!/usr/bin/env python3
"""Smoke test for the tabperceiver_py extension module.

Builds the cdylib, loads it, and exercises encoding, metrics, generation,
training, checkpoint loading, and prediction end to end on a tiny cohort.

Usage: python3 python/smoke_test.py
"""

import json
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent

TINY_CONFIG = """\
variant = "ml-tabperceiver-decoder"

[model]
embed_dim = 8
bins = 4
batch_size = 64
epochs = 2
patience = 2
mlp_head_hidden = [8]
baseline_hidden = [8]

[model.latent]
num_latents = 2
latent_channels = 8
self_layers_per_block = 1
heads_cross = 2
heads_self = 2
num_blocks = 1

[synthetic]
rows = 200
"""


def build_and_import(workdir: Path):
    subprocess.run(
        ["cargo", "build", "-p", "tabperceiver-py"], cwd=ROOT, check=True
    )
    built = ROOT / "target" / "debug" / "libtabperceiver_py.so"
    shutil.copy(built, workdir / "tabperceiver_py.so")
    sys.path.insert(0, str(workdir))
    import tabperceiver_py

    return tabperceiver_py


def main() -> None:
    workdir = Path(tempfile.mkdtemp(prefix="tabperceiver-smoke-"))
    tp = build_and_import(workdir)

    # encoding: quantile bins and hand-checked PLE branches
    bins = tp.fit_bins([float(v) for v in range(101)], 4)
    assert bins == [0.0, 25.0, 50.0, 75.0, 100.0], bins
    assert tp.ple_encode(0.5, [0.0, 1.0, 2.0]) == [0.5, 0.0]
    assert tp.ple_encode(1.5, [0.0, 1.0, 2.0]) == [1.0, 0.5]

    # metrics: hand example plus agreement with scikit-learn
    assert tp.roc_auc([0.1, 0.4, 0.35, 0.8], [False, False, True, True]) == 0.75
    try:
        from sklearn.metrics import roc_auc_score

        import random

        rng = random.Random(0)
        scores = [rng.random() for _ in range(200)]
        labels = [rng.random() < 0.4 for _ in range(200)]
        ours = tp.roc_auc(scores, labels)
        theirs = roc_auc_score(labels, scores)
        assert abs(ours - theirs) < 1e-12, (ours, theirs)
    except ImportError:
        print("scikit-learn unavailable; skipped cross-check")
    lo, hi = tp.auc_bootstrap_ci([0.1, 0.4, 0.35, 0.8, 0.7, 0.2], [False, False, True, True, True, False], 500, 0.95, 1)
    assert 0.0 <= lo <= hi <= 1.0
    assert abs(tp.brier([[0.8, 0.2]], [0]) - 0.08) < 1e-12
    stat, p, dof = tp.paired_t_test(
        [51.0, 45.0, 33.0, 45.0, 67.0], [23.0, 31.0, -4.0, 25.0, 55.0]
    )
    assert abs(stat - 4.7944) < 1e-3 and abs(p - 0.00872) < 1e-4 and dof == 4.0

    # generation is deterministic per seed
    tp.generate(str(workdir / "data-a"), rows=80, seed=3)
    tp.generate(str(workdir / "data-b"), rows=80, seed=3)
    a = (workdir / "data-a" / "cohort.csv").read_bytes()
    assert a == (workdir / "data-b" / "cohort.csv").read_bytes()
    assert len(a.splitlines()) == 81

    # train a tiny model, reload its checkpoint, and predict
    config = workdir / "exp.toml"
    config.write_text(TINY_CONFIG)
    report = json.loads(tp.train(str(workdir / "run"), config=str(config), seed=7))
    targets = [t["target"] for t in report["targets"]]
    assert targets == ["low", "medium", "high", "invasive test"], targets

    model = tp.Model.load(str(workdir / "run" / "checkpoint.tabp"))
    assert model.parameter_count > 0
    assert model.tasks == [("risk", 3), ("downstream", 2)]
    probs = model.predict_proba(str(workdir / "run" / "test.csv"))
    assert set(probs) == {"risk", "downstream"}
    assert len(probs["risk"]) == report["n"]
    for row in probs["risk"]:
        assert len(row) == 3 and abs(sum(row) - 1.0) < 1e-9

    # evaluating the checkpoint on its own test split reproduces the report
    again = json.loads(
        tp.evaluate(
            str(workdir / "run" / "checkpoint.tabp"),
            str(workdir / "run" / "test.csv"),
            str(workdir / "eval"),
            seed=7,
        )
    )
    assert again == report

    shutil.rmtree(workdir)
    print("smoke test passed")


if __name__ == "__main__":
    main()
