"""Fetch MovieLens 100k ratings into ~/.cache/ncimpute/ml-100k/u.data.

The ratings ship inside the RecBole wheel (dataset_example/ml-100k), which
pip can download from any package index.  The file is rewritten in the
original u.data layout: user, item, rating, timestamp separated by tabs.
"""
import argparse
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"
DEFAULT_OUT = Path.home() / ".cache" / "ncimpute" / "ml-100k" / "u.data"


def download_wheel(dest: Path) -> Path:
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "--only-binary", ":all:",
         "recbole==1.2.1", "-d", str(dest)],
        check=True,
    )
    wheels = sorted(dest.glob("recbole-*.whl"))
    if not wheels:
        raise SystemExit("pip download produced no recbole wheel")
    return wheels[0]


def convert(wheel: Path, out: Path) -> int:
    with zipfile.ZipFile(wheel) as zf:
        lines = zf.read(MEMBER).decode("latin-1").splitlines()
    rows = [line for line in lines[1:] if line.strip()]  # first line is a typed header
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(line.rstrip("\r") + "\n" for line in rows), encoding="latin-1")
    return len(rows)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=DEFAULT_OUT)
    parser.add_argument("--wheel", type=Path, help="use an already downloaded recbole wheel")
    args = parser.parse_args(argv)
    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel or download_wheel(Path(tmp))
        count = convert(wheel, args.out)
    print(f"wrote {count} ratings to {args.out}")
    return 0 if count == 100_000 else 1


if __name__ == "__main__":
    sys.exit(main())
