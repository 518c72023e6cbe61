#!/usr/bin/env python3
"""Summarize ``flowpert estimate`` JSONL (file argument or stdin) per kind and point.

    flowpert estimate --config cfg.toml | python scripts/summarize_estimates.py
"""

import argparse
import json
import sys

from flowpert.cli import summarize_records


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("path", nargs="?", help="JSONL file (default: stdin)")
    args = ap.parse_args()
    fh = open(args.path) if args.path else sys.stdin
    with fh:
        print(json.dumps(summarize_records(fh), indent=2))


if __name__ == "__main__":
    main()
