"""Smoke test for the nodx_py extension.

Build and install first:
    pip install maturin
    cd crates/py && maturin build --release -o dist && pip install dist/*.whl
"""

import json
import math
import random
import sys
import tempfile
from pathlib import Path

import nodx_py as nx


def check(cond, what):
    print(("ok   " if cond else "FAIL ") + what)
    return bool(cond)


def main():
    ok = True

    ok &= check(nx.Network("cnn21").param_count() == 138330, "cnn21 parameter count")
    ok &= check(nx.Network("cnn47").param_count() == 1051354, "cnn47 parameter count")
    ok &= check(len(nx.qif_feature_names()) == 50, "50 qif features")
    ok &= check(nx.sub_seed(7, "SPLIT") == nx.sub_seed(7, "SPLIT"), "sub_seed is stable")

    ok &= check(nx.auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75, "auc")
    pts = nx.roc_points([0.1, 0.9], [0, 1])
    ok &= check(pts[0] == (0.0, 0.0) and pts[-1] == (1.0, 1.0), "roc endpoints")

    rng = random.Random(1)
    xs = [rng.gauss(0, 1) for _ in range(400)]
    ys = [1 if rng.random() < 1 / (1 + math.exp(-(0.5 + 2 * x))) else 0 for x in xs]
    lm = nx.Logistic.fit(xs, ys)
    ok &= check(abs(lm.slope - 2) < 0.6 and lm.converged, f"logistic slope {lm.slope:.2f}")

    X = [[rng.random(), rng.random()] for _ in range(200)]
    Y = [1 if a + b > 1 else 0 for a, b in X]
    forest = nx.Forest.train(X, Y, n_trees=50, seed=3)
    p = forest.predict_proba([[0.9, 0.9], [0.05, 0.05]])
    ok &= check(p[0] > 0.8 and p[1] < 0.2, "forest separates corners")

    patients = [f"P{i // 2}" for i in range(40)]
    labels = [i % 2 for i in range(40)]
    tr, va = nx.split_by_patient(patients, labels, 0.8, True, 11)
    ok &= check(not {patients[i] for i in tr} & {patients[i] for i in va}, "patient split is disjoint")

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        manifest = json.loads(nx.generate_phantom(tmp / "ph", 2, seed=5))
        ok &= check(len(manifest["nodules"]) == 4, "phantom nodule count")
        vol = nx.Volume.read(tmp / "ph" / manifest["patients"][0]["volume"])
        ok &= check(vol.dims == [128, 128, 32], "volume dims")
        nod = manifest["nodules"][0]
        feats = vol.qif_at(nod["center"])
        ok &= check(len(feats) == 50 and all(math.isfinite(v) for v in feats), "qif at nodule")

        net = nx.Network("cnn21", seed=1)
        inputs = [[rng.random() for _ in range(net.input_len)] for _ in range(3)]
        probs = net.predict(inputs)
        ok &= check(all(0 <= q <= 1 for q in probs), "cnn probabilities")
        ok &= check(all(len(f) == 200 for f in net.features(inputs)), "cnn features")
        net.save(tmp / "w.ndxw")
        ok &= check(nx.Network.load(tmp / "w.ndxw").predict(inputs) == probs, "weights round trip")

        code = nx.run_cli(["consensus", "build", "--in", str(tmp / "ph"), "--out", str(tmp / "c")])
        ok &= check(code == 0 and (tmp / "c" / "consensus.json").exists(), "cli consensus build")
        ok &= check(nx.run_cli(["no-such-command"]) == 1, "cli usage error")

    print("all passed" if ok else "failures")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
