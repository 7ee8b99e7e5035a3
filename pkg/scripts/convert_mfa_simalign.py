#!/usr/bin/env python3
"""Convert forced-alignment and word-alignment exports into aligned-utterance JSONL.

Inputs (all keyed by utterance id):

  --mfa-dir DIR        one ``<utt_id>.csv`` per utterance as written by
                       ``mfa align --output_format csv``; columns
                       Begin,End,Label,Type,Speaker with times in seconds.
                       Only rows whose Type is ``words`` are kept.
  --translations TSV   ``utt_id<TAB>target text`` (whitespace tokenised).
  --word-alignments TSV
                       ``utt_id<TAB>0-0 1-2 ...`` pairs of source word index
                       and target token index, as printed by SimAlign.
  --segments TSV       optional ``utt_id<TAB>recording_id<TAB>start_s<TAB>end_s``
                       placing each utterance inside a long recording. Without
                       it every utterance is standalone and its span ends at
                       the last word.

Word times are written in integer milliseconds relative to the utterance
start. Records that fail validation are reported and skipped, and the exit
status is 1 if any were skipped.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from streamst.trajectory import AlignedUtterance, write_jsonl


def read_tsv(path) -> dict[str, list[str]]:
    out = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh, delimiter="\t"):
            if row and not row[0].startswith("#"):
                out[row[0]] = row[1:]
    return out


def read_mfa_words(path: Path) -> list[tuple[str, float, float]]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = csv.DictReader(fh)
        return [
            (r["Label"], float(r["Begin"]), float(r["End"]))
            for r in rows
            if r.get("Type", "words") == "words" and r["Label"].strip()
        ]


def parse_pairs(text: str) -> list[tuple[int, int]]:
    pairs = []
    for item in text.split():
        s, t = item.split("-")
        pairs.append((int(s), int(t)))
    return sorted(pairs)


def convert(mfa_dir, translations, word_alignments, segments=None) -> tuple[list[AlignedUtterance], list[str]]:
    targets = read_tsv(translations)
    links = read_tsv(word_alignments)
    placing = read_tsv(segments) if segments else {}
    utts, errors = [], []
    for csv_path in sorted(Path(mfa_dir).glob("*.csv")):
        utt_id = csv_path.stem
        if utt_id not in targets:
            errors.append(f"{utt_id}: no translation")
            continue
        words = read_mfa_words(csv_path)
        if utt_id in placing:
            rec_id, start_s, end_s = placing[utt_id][0], float(placing[utt_id][1]), float(placing[utt_id][2])
        else:
            rec_id, start_s, end_s = None, 0.0, max((w[2] for w in words), default=0.0)
        span = (round(start_s * 1000), round(end_s * 1000))
        # MFA times are absolute within the audio file it was given; for
        # utterances cut from a recording that file is the utterance itself
        source_words = [(w, round(a * 1000), round(b * 1000)) for w, a, b in words]
        tokens = targets[utt_id][0].split() if targets[utt_id] else []
        pairs = parse_pairs(links[utt_id][0]) if links.get(utt_id) else []
        u = AlignedUtterance(utt_id, source_words, tokens, pairs, span, rec_id)
        problems = u.problems()
        if problems:
            errors.append(f"{utt_id}: {'; '.join(problems)}")
            continue
        utts.append(u)
    return utts, errors


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--mfa-dir", required=True)
    p.add_argument("--translations", required=True)
    p.add_argument("--word-alignments", required=True)
    p.add_argument("--segments")
    p.add_argument("--output", required=True, help="aligned-utterance JSONL to write")
    args = p.parse_args(argv)
    utts, errors = convert(args.mfa_dir, args.translations, args.word_alignments, args.segments)
    write_jsonl(args.output, [u.to_record() for u in utts])
    for e in errors:
        print(f"skipped {e}", file=sys.stderr)
    print(f"wrote {len(utts)} utterances to {args.output}, skipped {len(errors)}")
    return 1 if errors else 0


if __name__ == "__main__":
    sys.exit(main())
