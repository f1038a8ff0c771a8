"""Smoke test for the oddforge Python module.

Build first with `cargo build -p oddforge-py --features extension-module`,
then run `python3 python/smoke_test.py`. The script copies the built library
to a temporary directory as `oddforge.so` and imports it from there.
"""

import importlib
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module(tmp: Path):
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "liboddforge.so"
        if lib.exists():
            shutil.copy(lib, tmp / "oddforge.so")
            sys.path.insert(0, str(tmp))
            return importlib.import_module("oddforge")
    sys.exit("liboddforge.so not found; run `cargo build -p oddforge-py --features extension-module`")


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        of = load_module(tmp)

        report = of.iou([0, 0, 1, 1], [0, 1, 1, 1], 4, 1)
        assert abs(report["mean_iou"] - 7 / 12) < 1e-12, report["mean_iou"]

        flags = of.detect_drops([0.95, 0.01, 0.06, 0.91], 0.3)
        assert [(f["step"], f["kind"]) for f in flags] == [(0, "drop"), (2, "recovery")], flags

        layout = of.write_demo(str(tmp / "demo"), scenes=3, per_weather=2)
        ws = of.Workspace(layout["config"])
        assert ws.encode()["scenes"] == 8
        catalog = ws.cluster()
        assert catalog["k"] == 4

        results = ws.suite()
        means = {c["condition"]: c["aggregate"]["mean_iou"] for c in results["conditions"]}
        assert means["night"] < means["original"] and means["snow"] < means["original"], means

        sweep = ws.sweep("scene_01", "night", steps=4, focus="on-rail")
        assert len(sweep["steps"]) == 4

        report, code = ws.comply()
        assert code in (0, 2, 3) and len(report["cells"]) == 4 * 19

        ws.verdict("scene_01", "snow", True, reason="artifacts")
        assert of.Workspace.resume(str(tmp / "demo" / "store"), ws.run_id).run_id == ws.run_id

        try:
            ws.verdict("scene_01", "fog", True)
        except of.OddforgeError:
            pass
        else:
            raise AssertionError("unknown sample was accepted")

        print(f"smoke test ok: run {ws.run_id}, mean IoU {means}")


if __name__ == "__main__":
    main()
