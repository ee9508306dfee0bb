#!/usr/bin/env python3
"""Build forge inputs from a LibriSpeech checkout: utterance metadata TSV plus a flat books directory.

Reads ``<split>/<speaker>/<chapter>/*.trans.txt`` for each split and
``CHAPTERS.TXT`` to map chapters to book ids, and links each book text
(``<book_id>.txt.utf-8`` or ``<book_id>.txt`` under --books-src) to
``<books-out>/<book_id>.txt``.

Usage:
  python scripts/librispeech_metadata.py --librispeech LibriSpeech --books-src original-books \\
      --books-out data/books --metadata data/metadata.tsv
  userlibri forge --books data/books --metadata data/metadata.tsv --out data/userlibri
"""
import argparse
import os
import sys
from pathlib import Path


def read_chapters(path: Path) -> dict[str, str]:
    """chapter id -> book id from the pipe-separated CHAPTERS.TXT."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith(";") or not line.strip():
                continue
            cols = [c.strip() for c in line.split("|")]
            out[cols[0]] = cols[5]
    return out


def find_book(src: Path, book_id: str) -> Path | None:
    for pattern in (f"{book_id}.txt.utf-8", f"{book_id}.txt"):
        hits = sorted(src.rglob(pattern))
        if hits:
            return hits[0]
    return None


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--librispeech", required=True, type=Path, help="directory holding CHAPTERS.TXT and the splits")
    parser.add_argument("--splits", nargs="+", default=["test-clean", "test-other"])
    parser.add_argument("--books-src", required=True, type=Path)
    parser.add_argument("--books-out", required=True, type=Path)
    parser.add_argument("--metadata", required=True, type=Path)
    args = parser.parse_args(argv)

    chapters = read_chapters(args.librispeech / "CHAPTERS.TXT")
    rows, books = [], set()
    for split in args.splits:
        for trans in sorted((args.librispeech / split).glob("*/*/*.trans.txt")):
            speaker, chapter = trans.parent.parent.name, trans.parent.name
            book = chapters.get(chapter)
            if book is None:
                print(f"chapter {chapter} missing from CHAPTERS.TXT", file=sys.stderr)
                return 2
            books.add(book)
            for line in trans.read_text(encoding="utf-8").splitlines():
                utt, _, text = line.partition(" ")
                rows.append(f"{utt}\t{speaker}\t{book}\t{text}\t{split}")
    args.books_out.mkdir(parents=True, exist_ok=True)
    missing = []
    for book in sorted(books):
        src = find_book(args.books_src, book)
        if src is None:
            missing.append(book)
            continue
        dst = args.books_out / f"{book}.txt"
        if not dst.exists():
            os.symlink(src.resolve(), dst)
    args.metadata.parent.mkdir(parents=True, exist_ok=True)
    args.metadata.write_text("utterance_id\tspeaker_id\tbook_id\ttranscript\tsplit\n" + "\n".join(rows) + "\n",
                             encoding="utf-8")
    print(f"{len(rows)} utterances, {len(books)} books ({len(missing)} missing)")
    if missing:
        print("missing book texts: " + " ".join(missing), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
