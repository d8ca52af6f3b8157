"""Smoke test for the Python bindings: simulate, train, predict, evaluate."""

import math
import os
import tempfile

import survtopic_py as st


def main():
    with tempfile.TemporaryDirectory() as tmp:
        sim = os.path.join(tmp, "sim")
        model = os.path.join(tmp, "model")
        args = ["--seed", "2", "--log-level", "warn", "simulate", "--patients", "80", "--topics", "4",
                "--vocab-size", "40", "--nonzero", "1", "--out", sim]
        assert st.run_cli(args) == 0
        assert st.run_cli(["--log-level", "warn", "train", "--vocab", f"{sim}/vocab.tsv",
                           "--corpus", f"{sim}/corpus.tsv", "--survival", f"{sim}/survival.tsv",
                           "--variant", "mixehr_surv", "--topics", "4", "--max-sweeps", "3",
                           "--out", model]) == 0
        assert st.run_cli(["--no-such-flag"]) == 2

        preds = st.predict(model, f"{sim}/corpus.tsv")
        assert len(preds) == 80
        for _, hr, theta in preds:
            assert math.isfinite(hr) and hr > 0
            assert abs(sum(theta) - 1) < 1e-9

        times = {}
        with open(f"{sim}/survival.tsv") as f:
            for line in f:
                if line.startswith("#") or line.startswith("patient_id"):
                    continue
                pid, t, _ = line.rstrip("\n").split("\t")
                times[pid] = float(t)
        t = [times[p] for p, _, _ in preds]
        hr = [h for _, h, _ in preds]
        auc = st.dynamic_auc(t, hr, sorted(t)[40])
        assert auc is not None and 0 <= auc <= 1
        _, mean_auc = st.dynamic_auc_curve(t, hr, sorted(t)[10:70:10])
        assert 0 <= mean_auc <= 1

    lr = st.log_rank_test([1.0, 2.0, 3.0], [True] * 3, [4.0, 5.0, 6.0], [True] * 3)
    assert abs(lr["chi_square"] - 1369 / 271) < 1e-12
    km_t, km_s = st.kaplan_meier([1.0, 2.0, 2.0, 3.0], [True, True, False, True])
    assert km_t == [1.0, 2.0, 3.0] and abs(km_s[0] - 0.75) < 1e-15
    try:
        st.predict("/nonexistent", "/nonexistent")
    except (IOError, ValueError):
        pass
    else:
        raise AssertionError("expected an error")
    print(f"survtopic_py {st.__version__}: smoke test passed")


if __name__ == "__main__":
    main()
