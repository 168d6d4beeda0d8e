"""Loads the built extension and exercises each binding once.

Build first with `cargo build -p cardioloop-py --release`, then run
`python3 python/smoke_test.py` from the repository root.
"""

import json
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def find_library():
    for profile in ("release", "debug"):
        for name in ("libcardioloop_py.so", "libcardioloop_py.dylib", "cardioloop_py.dll"):
            path = ROOT / "target" / profile / name
            if path.exists():
                return path
    sys.exit("extension not built; run `cargo build -p cardioloop-py --release`")


def load():
    lib = find_library()
    tmp = pathlib.Path(tempfile.mkdtemp())
    suffix = ".pyd" if lib.suffix == ".dll" else ".so"
    shutil.copy(lib, tmp / f"cardioloop_py{suffix}")
    sys.path.insert(0, str(tmp))
    import cardioloop_py

    return cardioloop_py


def main():
    cl = load()

    samples, fs, labels = cl.simulate_record("AFib", 60, seed=1)
    print(f"simulated {len(samples)} samples at {fs} Hz, {labels.count('AFib')} AFib")

    rows = cl.spectrogram(samples[: int(10 * fs)], fs)
    print(f"spectrogram {len(rows)}x{len(rows[0])}")

    mags = cl.cwt_magnitude([1.0] + [0.0] * 255, [4.0, 8.0], fs)
    print(f"cwt rows {len(mags)} of {len(mags[0])}")

    m = json.loads(cl.metrics_from_confusion([[45, 5], [10, 40]]))
    print(f"accuracy {m['accuracy']:.2f} precision {m['precision']:.4f}")

    g = cl.PumpGeometry()
    print(f"0.5 mL -> {g.volume_to_steps(0.5)} on a {g.syringe_capacity_ml:.2f} mL syringe")

    rx = json.dumps({
        "dose_ml": 0.5, "max_doses_per_day": 2, "min_interdose_interval_s": 28800,
        "daily_max_ml": 1.0, "mode": "PredictionBased", "fixed_times": ["08:00", "16:00"],
    })
    gate = cl.SafetyGate(rx, now=0)
    print(f"first dose {gate.authorize('d1', 0.5, 60) or 'granted'}, "
          f"second dose {gate.authorize('d2', 0.5, 120) or 'granted'}")

    audit, summary = cl.run_closed_loop()
    summary = json.loads(summary)
    verdict = json.loads(cl.replay(audit))
    print(f"closed loop: {summary['records']} records, {summary['deliveries']} deliveries, "
          f"stage {summary['final_stage']}, replay consistent {verdict['consistent']}")

    ok = verdict["consistent"] and summary["deliveries"] > 0 and abs(m["accuracy"] - 0.85) < 1e-12
    print("OK" if ok else "FAILED")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
