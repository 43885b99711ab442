"""Regenerate tests/golden/*.txt from the CLI cases in tests/cli_cases.py.

Run after an intentional output change, then review the diff:

    python3 scripts/make_golden.py [case ...]
"""

import contextlib
import io
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parents[1] / "tests"))

import torch  # noqa: E402

from cli_cases import CASES, GOLDEN  # noqa: E402
from lapformer.cli import main  # noqa: E402


def run(name: str) -> str:
    with tempfile.TemporaryDirectory() as tmp:
        argv = CASES[name](Path(tmp))
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            code = main(argv)
    if code != 0:
        raise SystemExit(f"{name}: exit {code}")
    return buf.getvalue()


def main_():
    torch.set_num_threads(1)
    GOLDEN.mkdir(exist_ok=True)
    for name in sys.argv[1:] or CASES:
        (GOLDEN / f"{name}.txt").write_text(run(name))
        print(f"wrote {GOLDEN / name}.txt")


if __name__ == "__main__":
    main_()
