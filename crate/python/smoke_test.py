"""Smoke test for the mfcast_py extension module.

Builds the extension with cargo (unless MFCAST_PY_LIB points at an already
built shared library), loads it under its module name and exercises the
main types end to end.

    python3 python/smoke_test.py
"""

import os
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def locate_library():
    env = os.environ.get("MFCAST_PY_LIB")
    if env:
        return Path(env)
    subprocess.run(["cargo", "build", "-p", "mfcast-py"], cwd=ROOT, check=True)
    target = Path(os.environ.get("CARGO_TARGET_DIR", ROOT / "target")) / "debug"
    for name in ("libmfcast_py.so", "libmfcast_py.dylib", "mfcast_py.dll"):
        if (target / name).exists():
            return target / name
    sys.exit(f"extension library not found under {target}")


def load_module(workdir):
    suffix = ".pyd" if sys.platform == "win32" else ".so"
    shutil.copy(locate_library(), Path(workdir) / f"mfcast_py{suffix}")
    sys.path.insert(0, str(workdir))
    import mfcast_py

    return mfcast_py


def main():
    with tempfile.TemporaryDirectory() as tmp:
        mf = load_module(tmp)
        print("mfcast_py", mf.__version__)

        raw = mf.RawSeries.synth(n_plants=3, n_periods=1500, seed=7)
        assert (raw.n_plants, raw.n_periods) == (3, 1500)
        csv_path = os.path.join(tmp, "data.csv")
        raw.to_csv(csv_path)
        assert mf.RawSeries.load_csv(csv_path).values() == raw.values()

        ds = raw.supervised(target_plant=0, max_lag=1, horizon=1)
        assert ds.n_features == 3 * 2 + 2  # lags per plant, weather, bias
        assert ds.maskable == list(range(6))
        train, val, test = ds.split(0.8, 0.2)
        assert len(train) + len(val) + len(test) == len(ds)

        cfg = mf.TrainConfig(learning_rate=0.01, max_iters=100, batch_size=64, seed=1)
        model, loss = mf.train_nominal(train, val, cfg)
        assert loss >= 0.0 and abs(model.mse(val) - loss) < 1e-12
        x = test.x()[0]
        assert mf.Model.from_json(model.to_json()).predict(x) == model.predict(x)

        robust, worst = mf.train_adversarial(train, val, cfg, budget=2)
        missing, adv_loss = mf.find_adversarial(val, robust, budget=2)
        assert len(missing) <= 2 and adv_loss >= 0.0

        art = mf.learn_partition(train, val, cfg, budget=2, max_subsets=3, epsilon=0.0)
        leaves = art.leaf_ids()
        assert 1 <= len(leaves) <= 3
        assert art.locate([]) in leaves
        print(art.bounds_table())
        path = os.path.join(tmp, "arf.json")
        art.save(path)
        again = mf.Artifact.load(path)
        assert again.predict(x, [0, 3]) == art.predict(x, [0, 3])
        assert len(art.truncate(1).leaf_ids()) == 1

        fixed = mf.fixed_partition(train, val, cfg, budget=2)
        assert "subsets=3" in repr(fixed)

        mask = mf.simulate_markov(0.2, 0.9, 3, 200, 3)
        assert len(mask) == 200 and not any(mask[0])

        preds = [model.predict(row) for row in test.x()]
        score = mf.nrmse(preds, test.y)
        assert score >= 0.0
        stat, p = mf.dm_test([1.0 + 0.01 * (i % 3) for i in range(60)], [0.5] * 60)
        assert stat > 0 and 0.0 <= p < 0.01

        try:
            model.predict(x, [99])
        except ValueError:
            pass
        else:
            raise AssertionError("out-of-range feature accepted")

        print(f"test nrmse {score:.3f}%, worst-case val loss {worst:.5f}")
        print("python smoke test passed")


if __name__ == "__main__":
    main()
