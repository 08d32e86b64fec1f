#!/usr/bin/env python3
"""Assemble the desk-scale byte corpus from public-domain texts on PyPI.

Downloads the `shakespeare` and `pybible` source packages with pip, keeps
one copy of every distinct plain-text file, and writes the result as a few
UTF-8 text files under the output directory.

    python3 scripts/fetch_corpus.py data/raw
"""

import argparse
import ast
import hashlib
import pathlib
import subprocess
import sys
import tarfile
import tempfile
import zipfile

PACKAGES = ["shakespeare==0.6", "pybible==0.0.2"]


def download(dest):
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "--no-binary", "shakespeare", "-d", str(dest), *PACKAGES],
        check=True,
    )


def members(archive):
    if archive.suffix == ".whl" or archive.suffix == ".zip":
        with zipfile.ZipFile(archive) as z:
            for name in sorted(z.namelist()):
                yield name, z.read(name)
    else:
        with tarfile.open(archive) as t:
            for m in sorted(t.getmembers(), key=lambda m: m.name):
                if m.isfile():
                    yield m.name, t.extractfile(m).read()


def bible_text(source):
    tree = ast.parse(source)
    for node in tree.body:
        if isinstance(node, ast.Assign) and getattr(node.targets[0], "id", "") == "Bible":
            verses = ast.literal_eval(node.value)
            return "\n".join(v.split(" ", 1)[1] for v in verses) + "\n"
    raise SystemExit("Bible list not found")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out", type=pathlib.Path)
    ap.add_argument("--downloads", type=pathlib.Path, help="reuse already downloaded archives")
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        dl = args.downloads or pathlib.Path(tmp)
        if args.downloads is None:
            download(dl)
        seen = set()
        plays = []
        bible = None
        for archive in sorted(dl.iterdir()):
            if archive.name.startswith("shakespeare") and archive.name.endswith(".tar.gz"):
                for name, data in members(archive):
                    if not name.endswith(".txt"):
                        continue
                    digest = hashlib.sha256(data).hexdigest()
                    if digest not in seen:
                        seen.add(digest)
                        plays.append(data.decode("utf-8", "replace").replace("\r\n", "\n"))
            elif archive.name.startswith("pybible"):
                for name, data in members(archive):
                    if name.endswith("Bible.py"):
                        bible = bible_text(data.decode("utf-8"))
        if not plays or bible is None:
            raise SystemExit("expected archives not found in " + str(dl))
        (args.out / "literature.txt").write_text("\n\n".join(plays), encoding="utf-8")
        (args.out / "bible.txt").write_text(bible, encoding="utf-8")
    total = sum(p.stat().st_size for p in args.out.iterdir())
    print(f"{len(plays)} distinct texts plus the Bible, {total} bytes in {args.out}")


if __name__ == "__main__":
    main()
